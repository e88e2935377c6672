use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use maskflow::ablation::{arms, run_ablation, save_results_csv, select};
use maskflow::codec::{psnr, train_codec, Codec, CodecConfig};
use maskflow::data::{
    build_dataset, color_index, from_model_space, load_split, query_tokens, read_png, rgb_to_mask, to_model_space,
    write_gray_png, write_rgb_png, Kind, Manifest, SceneConfig, Split, COLOR_BASE, KIND_BASE,
};
use maskflow::eval::{eval_noise, evaluate_segmentation};
use maskflow::flow::{euler_sample, one_step_segment};
use maskflow::reproduce::{latent_study, reproduce, ReproduceConfig, StudyConfig};
use maskflow::samplers::{density_table, save_density_csv, unit_grid, Curve};
use maskflow::tensor::{par, Prng, Tensor};
use maskflow::train::{model_space_batches, train_until, LatentCorpus, TrainConfig, TrainState};
use maskflow::Error;

#[derive(Parser, Debug)]
#[command(name = "maskflow", version, about = "Joint segmentation and generation with one rectified-flow transformer")]
struct Cli {
    /// Worker threads for data-parallel stages.
    #[arg(long, global = true, env = "MASKFLOW_THREADS")]
    threads: Option<usize>,
    /// Run every data-parallel stage on one thread.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic shapes corpus.
    GenData(GenData),
    /// Train the latent codec on images and mask renderings.
    TrainCodec(TrainCodecArgs),
    /// Probe sweep and PCA of mask latents.
    AnalyzeLatents(Analyze),
    /// Timestep density curves as CSV.
    PlotSamplers(PlotSamplers),
    /// Mixed segmentation and generation training.
    Train(TrainArgs),
    /// One-step mask for a single image and query.
    Segment(SegmentArgs),
    /// Generate images with Euler sampling.
    Sample(SampleArgs),
    /// One-step segmentation metrics on the validation split.
    Eval(EvalArgs),
    /// Train and evaluate the ablation arms.
    Ablate(AblateArgs),
    /// Figure and table artifacts from finished stages.
    Reproduce(ReproduceArgs),
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// JSON config; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Print the effective config and exit.
    #[arg(long)]
    dump_config: bool,
}

#[derive(Args, Debug)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    train: usize,
    #[arg(long, default_value_t = 200)]
    val: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args, Debug)]
struct TrainCodecArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1500)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args, Debug)]
struct Analyze {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    codec: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args, Debug)]
struct PlotSamplers {
    /// Segmentation shift; repeat for several curves.
    #[arg(long = "a", default_values_t = [0.05])]
    a: Vec<f64>,
    /// Points on [0, 1] per curve.
    #[arg(long, default_value_t = 1000)]
    grid: usize,
    /// Also emit the generation curve.
    #[arg(long)]
    gen: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    codec: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the configured step count.
    #[arg(long)]
    steps: Option<usize>,
    /// Continue from `out/latest`.
    #[arg(long)]
    resume: bool,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args, Debug)]
struct SegmentArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    codec: PathBuf,
    /// RGB PNG at the codec's resolution.
    #[arg(long)]
    image: PathBuf,
    /// Color and shape, e.g. "red circle".
    #[arg(long)]
    query: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    codec: PathBuf,
    /// Comma-separated objects, e.g. "red circle, blue square". Empty means unconditional.
    #[arg(long, default_value = "")]
    caption: String,
    #[arg(long, default_value_t = 4)]
    count: usize,
    #[arg(long, default_value_t = 20)]
    steps: usize,
    #[arg(long, default_value_t = 1.0)]
    guidance: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    codec: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    eps_seed: u64,
    /// Report JSON path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// Base training config; defaults when omitted.
    #[arg(long)]
    base: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    codec: PathBuf,
    /// Output directory for arm checkpoints and results.csv.
    #[arg(long)]
    out: PathBuf,
    /// Run only these arms (the base always runs).
    #[arg(long, value_delimiter = ',')]
    arms: Vec<String>,
    #[arg(long, default_value_t = 0)]
    eps_seed: u64,
    #[arg(long)]
    dump_config: bool,
}

#[derive(Args, Debug)]
struct ReproduceArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    codec: PathBuf,
    #[arg(long)]
    ablation: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
}

enum Fail {
    User(String),
    Internal(String),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        if e.is_user_error() {
            Fail::User(e.to_string())
        } else {
            Fail::Internal(e.to_string())
        }
    }
}

type Run<T = ()> = Result<T, Fail>;

fn user(msg: impl Into<String>) -> Fail {
    Fail::User(msg.into())
}

fn io_fail(path: &Path, e: std::io::Error) -> Fail {
    Error::io(path, e).into()
}

/// Defaults, overlaid with the JSON file when given.
fn load_config<T: Serialize + DeserializeOwned + Default>(path: Option<&Path>) -> Run<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_fail(p, e))?;
            serde_json::from_str(&text).map_err(|e| user(format!("{}: {e}", p.display())))
        }
    }
}

fn dump<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("config serializes"));
}

fn create_dir(dir: &Path) -> Run {
    fs::create_dir_all(dir).map_err(|e| io_fail(dir, e))
}

fn open_log(path: &Path) -> Run<std::io::BufWriter<fs::File>> {
    let f = fs::File::create(path).map_err(|e| io_fail(path, e))?;
    Ok(std::io::BufWriter::new(f))
}

fn parse_object(text: &str) -> Run<(usize, Kind)> {
    let words: Vec<&str> = text.split_whitespace().collect();
    let [color, kind] = words.as_slice() else {
        return Err(user(format!("expected \"<color> <shape>\", got {text:?}")));
    };
    let c = color_index(color).ok_or_else(|| user(format!("unknown color {color:?}")))?;
    let k = Kind::from_name(kind).ok_or_else(|| user(format!("unknown shape {kind:?}")))?;
    Ok((c, k))
}

fn caption_ids(text: &str) -> Run<Vec<usize>> {
    let mut ids = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (c, k) = parse_object(part)?;
        ids.push(COLOR_BASE + c);
        ids.push(KIND_BASE + Kind::ALL.iter().position(|&x| x == k).unwrap());
    }
    Ok(ids)
}

fn gen_data(a: GenData) -> Run {
    let cfg: SceneConfig = load_config(a.cfg.config.as_deref())?;
    if a.cfg.dump_config {
        dump(&cfg);
        return Ok(());
    }
    let m = build_dataset(a.train, a.val, a.seed, &cfg, &a.out)?;
    println!("wrote {} train and {} val records to {}", m.train.len(), m.val.len(), a.out.display());
    Ok(())
}

fn load_data(dir: &Path) -> Run<(Manifest, Vec<maskflow::data::Sample>, Vec<maskflow::data::Sample>)> {
    let m = Manifest::load(dir)?;
    let train = load_split(dir, &m, Split::Train)?;
    let val = load_split(dir, &m, Split::Val)?;
    Ok((m, train, val))
}

fn train_codec_cmd(a: TrainCodecArgs) -> Run {
    let cfg: CodecConfig = load_config(a.cfg.config.as_deref())?;
    if a.cfg.dump_config {
        dump(&cfg);
        return Ok(());
    }
    cfg.validate()?;
    let (_, train, val) = load_data(&a.data)?;
    create_dir(&a.out)?;
    let mut log = open_log(&a.out.join("log.jsonl"))?;
    let codec = train_codec(&train, &cfg, a.steps, a.seed, Some(&mut log))?;
    log.flush().map_err(|e| io_fail(&a.out, e))?;
    codec.save(&a.out)?;
    let (im, mk) = model_space_batches(&val);
    let rec = codec.decode(&codec.encode(&im)?)?;
    let mrec = codec.decode(&codec.encode(&mk)?)?;
    let per = im.numel() / val.len().max(1);
    let mut ps = 0.0;
    let mut ious = 0.0;
    for (i, s) in val.iter().enumerate() {
        let r = i * per..(i + 1) * per;
        ps += psnr(&im.data()[r.clone()], &rec.data()[r.clone()]);
        ious += maskflow::eval::iou(&rgb_to_mask(&mrec.data()[r], 0.0), &s.mask);
    }
    let n = val.len().max(1) as f64;
    let report = serde_json::json!({ "val_psnr_db": ps / n, "val_mask_iou": ious / n, "steps": a.steps });
    fs::write(a.out.join("report.json"), format!("{report:#}\n")).map_err(|e| io_fail(&a.out, e))?;
    println!("codec saved to {}: psnr {:.2} dB, mask iou {:.4}", a.out.display(), ps / n, ious / n);
    Ok(())
}

fn analyze(a: Analyze) -> Run {
    let cfg: StudyConfig = load_config(a.cfg.config.as_deref())?;
    if a.cfg.dump_config {
        dump(&cfg);
        return Ok(());
    }
    let (_, train, val) = load_data(&a.data)?;
    let codec = Codec::load(&a.codec)?;
    let study = latent_study(&codec, &train, &val, &cfg)?;
    create_dir(&a.out)?;
    maskflow::analysis::save_sweep_csv(&study.sweep, &a.out.join("sweep.csv"))?;
    let pca = serde_json::json!({
        "explained": study.pca_explained,
        "threshold": study.threshold,
        "agreement": study.agreement,
        "mean_val_by_t": cfg.t_grid.iter().zip(&study.mean_val).map(|(t, v)| [*t, *v]).collect::<Vec<_>>(),
    });
    fs::write(a.out.join("pca.json"), format!("{pca:#}\n")).map_err(|e| io_fail(&a.out, e))?;
    for (t, v) in cfg.t_grid.iter().zip(&study.mean_val) {
        println!("t={t:.2} val_acc={v:.4}");
    }
    println!("pca agreement {:.4}", study.agreement);
    Ok(())
}

fn plot_samplers(a: PlotSamplers) -> Run {
    let mut curves: Vec<Curve> = a.a.iter().map(|&a| Curve::Seg(a)).collect();
    if a.gen {
        curves.insert(0, Curve::Gen);
    }
    let rows = density_table(&curves, &unit_grid(a.grid)?)?;
    save_density_csv(&rows, &a.out)?;
    println!("wrote {} rows to {}", rows.len(), a.out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Run {
    let mut cfg: TrainConfig = load_config(a.cfg.config.as_deref())?;
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if a.cfg.dump_config {
        dump(&cfg);
        return Ok(());
    }
    cfg.validate()?;
    let codec = Codec::load(&a.codec)?;
    let (_, train, _) = load_data(&a.data)?;
    let corpus = LatentCorpus::build(&codec, &train)?;
    let latest = a.out.join("latest");
    let mut state = if a.resume {
        let mut s = TrainState::load(&latest)?;
        s.config.steps = cfg.steps.max(s.step);
        s
    } else {
        TrainState::new(cfg.clone(), codec.latent_channels(), codec.config.factor)?
    };
    create_dir(&a.out)?;
    let log_path = a.out.join("log.jsonl");
    let file = fs::OpenOptions::new()
        .create(true)
        .append(a.resume)
        .write(true)
        .truncate(!a.resume)
        .open(&log_path)
        .map_err(|e| io_fail(&log_path, e))?;
    let mut log = std::io::BufWriter::new(file);
    let total = state.config.steps;
    let every = state.config.checkpoint_every.max(1);
    while state.step < total {
        let until = ((state.step / every + 1) * every).min(total);
        train_until(&mut state, until, &corpus, &codec, None, Some(&mut log))?;
        log.flush().map_err(|e| io_fail(&log_path, e))?;
        state.save(&latest, codec.config.factor)?;
        eprintln!("step {}/{}", state.step, total);
    }
    state.save(&a.out.join("final"), codec.config.factor)?;
    state.save(&latest, codec.config.factor)?;
    println!("saved {}", a.out.join("final").display());
    Ok(())
}

fn segment(a: SegmentArgs) -> Run {
    let state = TrainState::load(&a.ckpt)?;
    let codec = Codec::load(&a.codec)?;
    let (px, w, h, c) = read_png(&a.image)?;
    if c != 3 || w != h {
        return Err(user(format!("{}: expected a square RGB image, got {w}x{h}x{c}", a.image.display())));
    }
    let (color, kind) = parse_object(&a.query)?;
    let image = Tensor::new(&[1, h, w, 3], to_model_space(&px)).map_err(Error::from)?;
    let latent = codec.encode(&image)?;
    let mut shape = latent.shape().to_vec();
    shape[0] = 1;
    let eps = eval_noise(a.seed, 0, &shape[1..]).reshape(&shape).map_err(Error::from)?;
    let model = state.model();
    let head = state.head();
    let readout = state.readout(&codec, &head)?;
    let (_, masks) = one_step_segment(&model, &[query_tokens(color, kind)], Some(&latent), &eps, &readout)?;
    write_gray_png(&a.out, &masks[0], w)?;
    println!("wrote {} ({} foreground pixels)", a.out.display(), masks[0].iter().filter(|&&m| m != 0).count());
    Ok(())
}

fn sample(a: SampleArgs) -> Run {
    let state = TrainState::load(&a.ckpt)?;
    let codec = Codec::load(&a.codec)?;
    let mut ids = caption_ids(&a.caption)?;
    if ids.is_empty() {
        ids.push(maskflow::data::NULL);
    }
    let m = &state.config.model;
    let cond = vec![ids; a.count];
    let mut prng = Prng::new(a.seed, 0);
    let model = state.model();
    let z = euler_sample(&model, &cond, &[a.count, m.grid_h, m.grid_w, m.channels], a.steps, a.guidance, &mut prng)?;
    let images = codec.decode(&z)?;
    create_dir(&a.out)?;
    let size = images.shape()[1];
    let per = images.numel() / a.count.max(1);
    for i in 0..a.count {
        let path = a.out.join(format!("{i:03}.png"));
        write_rgb_png(&path, &from_model_space(&images.data()[i * per..(i + 1) * per]), size)?;
    }
    println!("wrote {} images to {}", a.count, a.out.display());
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Run {
    let state = TrainState::load(&a.ckpt)?;
    let codec = Codec::load(&a.codec)?;
    let m = Manifest::load(&a.data)?;
    let val = load_split(&a.data, &m, Split::Val)?;
    let corpus = LatentCorpus::build(&codec, &val)?;
    let model = state.model();
    let head = state.head();
    let readout = state.readout(&codec, &head)?;
    let report = evaluate_segmentation(&model, &readout, &corpus, a.eps_seed, &state.config.fingerprint())?;
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    fs::write(&a.out, text + "\n").map_err(|e| io_fail(&a.out, e))?;
    println!("miou {:.4} oiou {:.4} over {} samples", report.miou, report.oiou, report.count);
    Ok(())
}

fn ablate(a: AblateArgs) -> Run {
    let base: TrainConfig = load_config(a.base.as_deref())?;
    let names: Vec<&str> = a.arms.iter().map(String::as_str).collect();
    let all = arms(&base);
    let chosen = if names.is_empty() { all } else { select(all, &names)? };
    if a.dump_config {
        dump(&chosen);
        return Ok(());
    }
    base.validate()?;
    let codec = Codec::load(&a.codec)?;
    let (_, train, val) = load_data(&a.data)?;
    let corpus = LatentCorpus::build(&codec, &train)?;
    let val = LatentCorpus::build(&codec, &val)?;
    let mut err = std::io::stderr();
    let results = run_ablation(&chosen, &corpus, &val, &codec, a.eps_seed, Some(&a.out), Some(&mut err))?;
    save_results_csv(&results, &a.out.join("results.csv"))?;
    for r in &results {
        println!("{:<14} miou {:.4} ({:+.4})", r.name, r.miou, r.delta_miou);
    }
    Ok(())
}

fn reproduce_cmd(a: ReproduceArgs) -> Run {
    let cfg: ReproduceConfig = load_config(a.cfg.config.as_deref())?;
    if a.cfg.dump_config {
        dump(&cfg);
        return Ok(());
    }
    let m = reproduce(&a.data, &a.codec, &a.ablation, &a.out, &cfg)?;
    println!("wrote {} artifacts to {}", m.files.len() + 1, a.out.display());
    Ok(())
}

fn dispatch(cli: Cli) -> Run {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(user("--threads must be at least 1"));
        }
        par::init_threads(n);
    }
    if cli.deterministic {
        par::set_sequential(true);
    }
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::TrainCodec(a) => train_codec_cmd(a),
        Command::AnalyzeLatents(a) => analyze(a),
        Command::PlotSamplers(a) => plot_samplers(a),
        Command::Train(a) => train_cmd(a),
        Command::Segment(a) => segment(a),
        Command::Sample(a) => sample(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Ablate(a) => ablate(a),
        Command::Reproduce(a) => reproduce_cmd(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Fail::User(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Fail::Internal(m)) => {
            eprintln!("internal error: {m}");
            ExitCode::from(2)
        }
    }
}
