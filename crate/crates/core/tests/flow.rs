use maskflow::analysis::{probe_fit, AnalysisMatrix};
use maskflow::codec::{Codec, CodecConfig};
use maskflow::data::NULL;
use maskflow::eval::iou;
use maskflow::flow::{
    bce_decoder_loss, bce_linear_loss, euler_sample_from, make_path, mask_targets, mse_loss, one_step_latent,
    one_step_segment, predict_x0, AnalyticModel, MaskReadout, VelocityModel,
};
use maskflow::tensor::{grad_check, grad_check_params, ParamSet, Prng, Tape, Tensor, TensorError};

fn lift<T>(r: maskflow::Result<T>) -> Result<T, TensorError> {
    r.map_err(|e| match e {
        maskflow::Error::Tensor(t) => t,
        other => panic!("{other}"),
    })
}

fn scalar_loss(build: impl FnOnce(&mut Tape<f64>) -> maskflow::Result<maskflow::tensor::Var>) -> f64 {
    let mut tape = Tape::new();
    let v = build(&mut tape).unwrap();
    tape.value(v).item().unwrap()
}

#[test]
fn path_recovers_clean_data() {
    let mut prng = Prng::new(1, 1);
    for _ in 0..1000 {
        let x0 = Tensor::randn(&[1, 4], 1.0, &mut prng);
        let eps = Tensor::randn(&[1, 4], 1.0, &mut prng);
        let t = [prng.uniform() as f32];
        let (xt, v) = make_path(&x0, &eps, &t).unwrap();
        let back = predict_x0(&xt, &t, &v).unwrap();
        assert!(back.max_abs_diff(&x0) < 1e-6);
    }
}

#[test]
fn path_rejects_mismatched_shapes() {
    let a = Tensor::zeros(&[1, 3]);
    let b = Tensor::zeros(&[1, 4]);
    assert!(make_path(&a, &b, &[0.5]).is_err());
    assert!(make_path(&a, &a, &[1.5]).is_err());
}

#[test]
fn predict_x0_endpoints() {
    let mut prng = Prng::new(2, 1);
    let x = Tensor::randn(&[2, 3], 1.0, &mut prng);
    let v = Tensor::randn(&[2, 3], 1.0, &mut prng);
    assert_eq!(predict_x0(&x, &[0.0, 0.0], &v).unwrap(), x);
    let one = predict_x0(&x, &[1.0, 1.0], &v).unwrap();
    assert_eq!(one, x.zip_with(&v, "sum", |a, b| a + b).unwrap());
}

#[test]
fn mse_values_and_gradient() {
    let mut prng = Prng::new(3, 1);
    let target = Tensor::<f64>::randn(&[3, 5], 1.0, &mut prng);
    let same = scalar_loss(|tape| {
        let p = tape.constant(target.clone());
        let q = tape.constant(target.clone());
        mse_loss(tape, p, q)
    });
    assert_eq!(same, 0.0);
    let off = scalar_loss(|tape| {
        let p = tape.constant(target.map(|v| v + 1.0));
        let q = tape.constant(target.clone());
        mse_loss(tape, p, q)
    });
    assert!((off - 1.0).abs() < 1e-12);

    let pred = Tensor::<f64>::randn(&[3, 5], 1.0, &mut prng);
    let mut tape = Tape::new();
    let p = tape.param(pred.clone());
    let q = tape.constant(target.clone());
    let loss = mse_loss(&mut tape, p, q).unwrap();
    let grads = tape.backward(loss).unwrap();
    let g = grads.get(p).unwrap();
    for ((g, a), b) in g.data().iter().zip(pred.data()).zip(target.data()) {
        assert!((g - 2.0 * (a - b) / 15.0).abs() < 1e-12);
    }
    let rel = grad_check(
        |tape, x| {
            let q = tape.constant(target.clone());
            lift(mse_loss(tape, x, q))
        },
        &pred,
        1e-5,
    )
    .unwrap();
    assert!(rel < 1e-4, "{rel}");
}

fn linear_head(w: Tensor<f64>, b: Tensor<f64>) -> ParamSet<f64> {
    let mut p = ParamSet::new();
    p.insert("w", w);
    p.insert("b", b);
    p
}

#[test]
fn zero_linear_head_is_uniform() {
    let mut prng = Prng::new(4, 1);
    let latent = Tensor::<f64>::randn(&[2, 2, 2, 3], 1.0, &mut prng);
    let masks: Vec<Vec<u8>> = (0..2).map(|i| (0..16).map(|j| if (i + j) % 3 == 0 { 255 } else { 0 }).collect()).collect();
    let refs: Vec<&[u8]> = masks.iter().map(|m| m.as_slice()).collect();
    let head = linear_head(Tensor::zeros(&[3, 4]), Tensor::zeros(&[4]));
    let loss = scalar_loss(|tape| {
        let bound = head.bind(tape, false);
        let z = tape.constant(latent.clone());
        let y = tape.constant(mask_targets(&refs, 4)?);
        bce_linear_loss(tape, z, y, &bound, 2)
    });
    assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    let bad = linear_head(Tensor::zeros(&[3, 9]), Tensor::zeros(&[9]));
    let mut tape = Tape::<f64>::new();
    let bound = bad.bind(&mut tape, false);
    let z = tape.constant(latent);
    let y = tape.constant(mask_targets(&refs, 4).unwrap());
    assert!(bce_linear_loss(&mut tape, z, y, &bound, 2).is_err());
}

/// Latents whose first channel carries the cell label; masks own whole
/// 2×2 blocks.
fn separable(n: usize, seed: u64) -> (Tensor, Vec<Vec<u8>>, Vec<u8>) {
    let mut prng = Prng::new(seed, 2);
    let (g, d, f) = (4, 3, 2);
    let mut data = Vec::new();
    let mut cells = Vec::new();
    let mut masks = Vec::new();
    for _ in 0..n {
        let labels: Vec<u8> = (0..g * g).map(|_| (prng.uniform() < 0.4) as u8).collect();
        for &l in &labels {
            data.push(if l == 1 { 2.0 } else { -2.0 } + 0.3 * prng.normal() as f32);
            for _ in 1..d {
                data.push(prng.normal() as f32);
            }
        }
        let size = g * f;
        masks.push((0..size * size).map(|p| labels[(p / size / f) * g + (p % size) / f] * 255).collect());
        cells.extend(labels);
    }
    (Tensor::new(&[n, g, g, d], data).unwrap(), masks, cells)
}

fn oracle_head(latent: &Tensor, cells: &[u8]) -> (Tensor, Tensor) {
    let d = latent.shape()[3];
    let m = AnalysisMatrix {
        x: latent.data().iter().map(|&v| v as f64).collect(),
        labels: cells.to_vec(),
        d,
        n: latent.shape()[0],
        h: latent.shape()[1],
        w: latent.shape()[2],
    };
    let probe = probe_fit(&m, 1e-6).unwrap();
    assert_eq!(probe.accuracy(&m), 1.0);
    let gain = 10.0;
    let w = Tensor::from_fn(&[d, 4], |i| (gain * probe.w[i / 4]) as f32);
    let b = Tensor::full(&[4], (gain * probe.b) as f32);
    (w, b)
}

#[test]
fn oracle_linear_head_gives_small_loss() {
    let (latent, masks, cells) = separable(20, 5);
    let (w, b) = oracle_head(&latent, &cells);
    let refs: Vec<&[u8]> = masks.iter().map(|m| m.as_slice()).collect();
    let head: ParamSet<f64> = linear_head(w.cast(), b.cast());
    let loss = scalar_loss(|tape| {
        let bound = head.bind(tape, false);
        let z = tape.constant(latent.cast());
        let y = tape.constant(mask_targets(&refs, 8)?);
        bce_linear_loss(tape, z, y, &bound, 2)
    });
    assert!(loss < 0.1, "{loss}");
}

#[test]
fn linear_head_gradient() {
    let (latent, masks, _) = separable(2, 6);
    let refs: Vec<&[u8]> = masks.iter().map(|m| m.as_slice()).collect();
    let mut prng = Prng::new(7, 1);
    let head = linear_head(Tensor::randn(&[3, 4], 0.5, &mut prng), Tensor::randn(&[4], 0.5, &mut prng));
    let report = grad_check_params(
        |tape, bound| {
            let z = tape.constant(latent.cast());
            let y = tape.constant(lift(mask_targets(&refs, 8))?);
            lift(bce_linear_loss(tape, z, y, bound, 2))
        },
        &head,
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

fn constant_decoder(latent: usize, value: f32) -> Codec {
    let cfg = CodecConfig {
        factor: 2,
        latent,
        widths: vec![4, 4],
        ..CodecConfig::default()
    };
    let mut codec = Codec::new(cfg, 1).unwrap();
    let w = codec.params.get_mut("dec.out.w").unwrap();
    *w = Tensor::zeros(w.shape());
    *codec.params.get_mut("dec.out.b").unwrap() = Tensor::full(&[3], value);
    codec
}

fn decoder_loss(codec: &Codec, mask: u8, scale: f64) -> f64 {
    let mut prng = Prng::new(8, 1);
    let latent = Tensor::<f64>::randn(&[1, 4, 4, codec.config.latent], 1.0, &mut prng);
    let mask = vec![mask; 64];
    let params: ParamSet<f64> = codec.params.cast();
    let mut head = ParamSet::<f64>::new();
    head.insert("scale", Tensor::full(&[1], scale));
    head.insert("bias", Tensor::zeros(&[1]));
    scalar_loss(|tape| {
        let cp = params.bind(tape, false);
        let hb = head.bind(tape, false);
        let z = tape.constant(latent);
        let y = tape.constant(mask_targets(&[&mask], 8)?);
        bce_decoder_loss(tape, z, y, codec, &cp, &hb)
    })
}

#[test]
fn saturated_decoder_logits() {
    // Bias past the clamp decodes every pixel to white.
    let white = constant_decoder(4, 5.0);
    assert!(decoder_loss(&white, 255, 50.0) < 1e-6);
    assert!(decoder_loss(&white, 0, 50.0) > 5.0);
    let black = constant_decoder(4, -5.0);
    assert!(decoder_loss(&black, 0, 50.0) < 1e-6);
    assert!(decoder_loss(&black, 255, 50.0) > 5.0);
}

#[test]
fn decoder_resolution_mismatch_is_an_error() {
    let codec = constant_decoder(4, 0.0);
    let params: ParamSet<f64> = codec.params.cast();
    let mut head = ParamSet::<f64>::new();
    head.insert("scale", Tensor::full(&[1], 1.0));
    head.insert("bias", Tensor::zeros(&[1]));
    let mut tape = Tape::new();
    let cp = params.bind(&mut tape, false);
    let hb = head.bind(&mut tape, false);
    let z = tape.constant(Tensor::zeros(&[1, 4, 4, 4]));
    let mask = vec![0u8; 36];
    let y = tape.constant(mask_targets(&[&mask], 6).unwrap());
    assert!(bce_decoder_loss(&mut tape, z, y, &codec, &cp, &hb).is_err());
}

#[test]
fn decoder_gradient_reaches_the_latent() {
    let cfg = CodecConfig {
        factor: 2,
        latent: 16,
        widths: vec![4, 4],
        ..CodecConfig::default()
    };
    let codec = Codec::new(cfg, 2).unwrap();
    let params: ParamSet<f64> = codec.params.cast();
    let mut head = ParamSet::<f64>::new();
    head.insert("scale", Tensor::full(&[1], 4.0));
    head.insert("bias", Tensor::full(&[1], 0.1));
    let mut prng = Prng::new(9, 1);
    let latent = Tensor::<f64>::randn(&[1, 8, 8, 16], 0.3, &mut prng);
    let mask: Vec<u8> = (0..256).map(|i| if (i / 16) < 7 && i % 16 > 4 { 255 } else { 0 }).collect();
    let rel = grad_check(
        |tape, x| {
            let cp = params.bind(tape, false);
            let hb = head.bind(tape, false);
            let y = tape.constant(lift(mask_targets(&[&mask], 16))?);
            lift(bce_decoder_loss(tape, x, y, &codec, &cp, &hb))
        },
        &latent,
        1e-4,
    )
    .unwrap();
    assert!(rel < 1e-3, "{rel}");
}

/// Velocity that depends on the first condition token and refuses the
/// null condition.
struct CondOnly;

impl VelocityModel for CondOnly {
    fn velocity(&self, x: &Tensor, t: f32, cond: &[Vec<usize>], _clean: Option<&Tensor>) -> maskflow::Result<Tensor> {
        assert!(cond.iter().all(|c| c[0] != NULL), "unconditional pass at w = 1");
        let k = cond[0][0] as f32;
        Ok(x.map(|v| -0.1 * k * v + t))
    }
}

/// Velocity that reads the condition, null included.
struct Shifted;

impl VelocityModel for Shifted {
    fn velocity(&self, x: &Tensor, t: f32, cond: &[Vec<usize>], _clean: Option<&Tensor>) -> maskflow::Result<Tensor> {
        let k = if cond[0][0] == NULL { 0.0 } else { 1.0 };
        Ok(x.map(|v| k - v * t))
    }
}

#[test]
fn unit_guidance_is_conditional_only() {
    let mut prng = Prng::new(10, 1);
    let eps = Tensor::randn(&[1, 2, 2, 3], 1.0, &mut prng);
    let cond = vec![vec![3, 9]];
    let out = euler_sample_from(&CondOnly, &cond, eps.clone(), 7, 1.0).unwrap();
    let mut x = eps;
    for k in (1..=7).rev() {
        let t = k as f32 / 7.0;
        let v = CondOnly.velocity(&x, t, &cond, None).unwrap();
        x = x.zip_with(&v, "euler", |x, v| x + v / 7.0).unwrap();
    }
    assert!(out.max_abs_diff(&x) < 1e-6);
}

#[test]
fn guidance_extrapolates_the_condition() {
    let eps = Tensor::zeros(&[1, 1, 1, 1]);
    let cond = vec![vec![3]];
    let plain = euler_sample_from(&Shifted, &cond, eps.clone(), 1, 1.0).unwrap();
    let guided = euler_sample_from(&Shifted, &cond, eps.clone(), 1, 3.0).unwrap();
    assert!((plain.data()[0] - 1.0).abs() < 1e-6);
    assert!((guided.data()[0] - 3.0).abs() < 1e-6);
    assert!(euler_sample_from(&Shifted, &cond, eps.clone(), 0, 1.0).is_err());
    assert!(euler_sample_from(&Shifted, &cond, eps, 1, -1.0).is_err());
}

#[test]
fn analytic_model_reaches_the_datum() {
    let mut prng = Prng::new(11, 1);
    let x0 = Tensor::randn(&[4, 4, 3], 1.0, &mut prng);
    let model = AnalyticModel { x0: x0.clone() };
    let eps = Tensor::randn(&[1, 4, 4, 3], 1.0, &mut prng);
    let cond = vec![vec![2, 8]];
    let want = x0.reshape(&[1, 4, 4, 3]).unwrap();
    let one = euler_sample_from(&model, &cond, eps.clone(), 1, 1.0).unwrap();
    assert!(one.max_abs_diff(&want) < 1e-6);
    let many = euler_sample_from(&model, &cond, eps.clone(), 20, 1.0).unwrap();
    let err = many
        .data()
        .iter()
        .zip(want.data())
        .map(|(a, b)| ((a - b) as f64).powi(2))
        .sum::<f64>()
        .sqrt();
    assert!(err < 1e-4, "{err}");
    let direct = one_step_latent(&model, &cond, None, &eps).unwrap();
    let v = model.velocity(&eps, 1.0, &cond, None).unwrap();
    assert_eq!(direct, predict_x0(&eps, &[1.0], &v).unwrap());
    assert!(one.max_abs_diff(&direct) < 1e-6);
}

#[test]
fn analytic_one_step_masks_are_exact() {
    let (latent, masks, cells) = separable(6, 12);
    let (w, b) = oracle_head(&latent, &cells);
    let readout = MaskReadout::Linear { w: &w, b: &b, factor: 2 };
    let mut prng = Prng::new(13, 1);
    for i in 0..6 {
        let x0 = latent.narrow(0, i, 1).unwrap().reshape(&[4, 4, 3]).unwrap();
        let model = AnalyticModel { x0 };
        let eps = Tensor::randn(&[1, 4, 4, 3], 1.0, &mut prng);
        let cond = vec![vec![1, 2, 8]];
        let (_, got) = one_step_segment(&model, &cond, None, &eps, &readout).unwrap();
        assert_eq!(iou(&got[0], &masks[i]), 1.0);
        let (_, again) = one_step_segment(&model, &cond, None, &eps, &readout).unwrap();
        assert_eq!(got, again);
    }
}
