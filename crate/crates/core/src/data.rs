//! Synthetic shapes corpus with referring queries.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use maskflow_tensor::prng::stream_id;
use maskflow_tensor::{par, Prng};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const VOCAB: usize = 32;
pub const PAD: usize = 0;
pub const SEG: usize = 1;
pub const COLOR_BASE: usize = 2;
pub const KIND_BASE: usize = 8;
pub const NULL: usize = 31;

pub const COLORS: [(&str, [u8; 3]); 6] = [
    ("red", [220, 40, 40]),
    ("green", [40, 200, 60]),
    ("blue", [50, 70, 230]),
    ("yellow", [230, 210, 40]),
    ("magenta", [210, 50, 200]),
    ("cyan", [40, 200, 210]),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Circle,
    Square,
    Triangle,
}

impl Kind {
    pub const ALL: [Kind; 3] = [Kind::Circle, Kind::Square, Kind::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Kind::Circle => "circle",
            Kind::Square => "square",
            Kind::Triangle => "triangle",
        }
    }

    pub fn from_name(s: &str) -> Option<Kind> {
        Kind::ALL.into_iter().find(|k| k.name() == s)
    }

    fn index(self) -> usize {
        self as usize
    }
}

pub fn color_index(name: &str) -> Option<usize> {
    COLORS.iter().position(|(n, _)| *n == name)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub size: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub min_radius: f64,
    pub max_radius: f64,
    pub min_gray: u8,
    pub max_gray: u8,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            size: 32,
            min_shapes: 1,
            max_shapes: 3,
            min_radius: 3.5,
            max_radius: 7.5,
            min_gray: 70,
            max_gray: 150,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.size >= 8
            && self.min_shapes >= 1
            && self.min_shapes <= self.max_shapes
            && self.max_shapes <= COLORS.len() * Kind::ALL.len()
            && self.min_radius >= 1.0
            && self.min_radius <= self.max_radius
            && 2.0 * self.max_radius < self.size as f64
            && self.min_gray <= self.max_gray;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("unusable scene config {self:?}")))
        }
    }
}

/// One placed shape; `radius` is the circumradius.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub kind: Kind,
    pub color: usize,
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
}

impl Shape {
    /// Point test at pixel centers.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let r = self.radius;
        match self.kind {
            Kind::Circle => dx * dx + dy * dy <= r * r,
            Kind::Square => {
                let half = r / std::f64::consts::SQRT_2;
                dx.abs() <= half && dy.abs() <= half
            }
            Kind::Triangle => {
                // Upward equilateral triangle inscribed in the circumcircle.
                let h = 0.5 * 3f64.sqrt() * r;
                let pts = [(0.0, -r), (-h, 0.5 * r), (h, 0.5 * r)];
                let mut sign = [false; 3];
                for i in 0..3 {
                    let (ax, ay) = pts[i];
                    let (bx, by) = pts[(i + 1) % 3];
                    sign[i] = (bx - ax) * (dy - ay) - (by - ay) * (dx - ax) >= 0.0;
                }
                sign.iter().all(|&s| s) || sign.iter().all(|&s| !s)
            }
        }
    }

    pub fn rasterize(&self, size: usize) -> Vec<u8> {
        let mut out = vec![0u8; size * size];
        for y in 0..size {
            for x in 0..size {
                if self.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    out[y * size + x] = 255;
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub size: usize,
    /// `size × size × 3` RGB bytes.
    pub image: Vec<u8>,
    /// `size × size`, values in `{0, 255}`.
    pub mask: Vec<u8>,
    pub query: Vec<usize>,
    pub caption: Vec<usize>,
    pub target: usize,
}

impl Sample {
    pub fn mask_area(&self) -> usize {
        self.mask.iter().filter(|&&m| m != 0).count()
    }
}

pub fn query_tokens(color: usize, kind: Kind) -> Vec<usize> {
    vec![SEG, COLOR_BASE + color, KIND_BASE + kind.index()]
}

pub fn caption_tokens(shapes: &[Shape]) -> Vec<usize> {
    shapes
        .iter()
        .flat_map(|s| [COLOR_BASE + s.color, KIND_BASE + s.kind.index()])
        .collect()
}

/// Scene layout for `(seed, record_id)`; the target index comes last.
pub fn layout_scene(seed: u64, record_id: u64, config: &SceneConfig) -> (Vec<Shape>, u8, usize) {
    let size = config.size as f64;
    for sub in 0u64.. {
        let mut prng = Prng::new(seed, stream_id(&[0x5ce4e, record_id, sub]));
        let span = config.max_shapes - config.min_shapes + 1;
        let count = config.min_shapes + prng.below(span);
        let mut pairs: Vec<usize> = (0..COLORS.len() * Kind::ALL.len()).collect();
        prng.shuffle(&mut pairs);
        let gray = config.min_gray + prng.below((config.max_gray - config.min_gray) as usize + 1) as u8;
        let mut shapes: Vec<Shape> = Vec::with_capacity(count);
        let mut failed = false;
        for &pair in &pairs[..count] {
            let (color, kind) = (pair / Kind::ALL.len(), Kind::ALL[pair % Kind::ALL.len()]);
            let mut placed = None;
            for _ in 0..100 {
                let r = config.min_radius + prng.uniform() * (config.max_radius - config.min_radius);
                let cx = r + prng.uniform() * (size - 2.0 * r);
                let cy = r + prng.uniform() * (size - 2.0 * r);
                let clear = shapes.iter().all(|o| {
                    let d = ((o.cx - cx).powi(2) + (o.cy - cy).powi(2)).sqrt();
                    d >= 0.8 * (o.radius + r)
                });
                if clear {
                    placed = Some(Shape {
                        kind,
                        color,
                        cx,
                        cy,
                        radius: r,
                    });
                    break;
                }
            }
            match placed {
                Some(s) => shapes.push(s),
                None => {
                    failed = true;
                    break;
                }
            }
        }
        if failed {
            continue;
        }
        let target = prng.below(count);
        return (shapes, gray, target);
    }
    unreachable!()
}

pub fn render(shapes: &[Shape], gray: u8, size: usize) -> Vec<u8> {
    let mut image = vec![gray; size * size * 3];
    for s in shapes {
        let rgb = COLORS[s.color].1;
        for (i, &m) in s.rasterize(size).iter().enumerate() {
            if m != 0 {
                image[3 * i..3 * i + 3].copy_from_slice(&rgb);
            }
        }
    }
    image
}

/// Deterministic in `(seed, record_id, config)`.
pub fn generate_scene(seed: u64, record_id: u64, config: &SceneConfig) -> Sample {
    let (shapes, gray, target) = layout_scene(seed, record_id, config);
    let t = shapes[target];
    Sample {
        size: config.size,
        image: render(&shapes, gray, config.size),
        mask: t.rasterize(config.size),
        query: query_tokens(t.color, t.kind),
        caption: caption_tokens(&shapes),
        target,
    }
}

/// Byte `b` maps to `b / 127.5 − 1`.
pub fn to_model_space(bytes: &[u8]) -> Vec<f32> {
    bytes.iter().map(|&b| b as f32 / 127.5 - 1.0).collect()
}

pub fn from_model_space(values: &[f32]) -> Vec<u8> {
    values
        .iter()
        .map(|&v| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8)
        .collect()
}

pub fn mask_to_rgb(mask: &[u8]) -> Vec<u8> {
    mask.iter().flat_map(|&m| [if m != 0 { 255 } else { 0 }; 3]).collect()
}

/// Foreground where the model-space channel mean exceeds `threshold`.
pub fn rgb_to_mask(image: &[f32], threshold: f32) -> Vec<u8> {
    image
        .chunks_exact(3)
        .map(|p| if (p[0] + p[1] + p[2]) / 3.0 > threshold { 255 } else { 0 })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: u64,
    pub image: String,
    pub mask: String,
    pub query: Vec<usize>,
    pub caption: Vec<usize>,
    pub target: usize,
    pub mask_area: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub config: SceneConfig,
    pub train: Vec<Record>,
    pub val: Vec<Record>,
}

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

impl Manifest {
    pub fn records(&self, split: Split) -> &[Record] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        }
    }

    pub fn load(dir: &Path) -> Result<Manifest> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Missing {
                path: path.clone(),
                hint: "gen-data",
            },
            _ => Error::io(&path, e),
        })?;
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
    }
}

fn write_png(path: &Path, data: &[u8], size: usize, color: png::ColorType) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), size as u32, size as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header().map_err(|e| Error::format(path, e.to_string()))?;
    w.write_image_data(data).map_err(|e| Error::format(path, e.to_string()))?;
    w.finish().map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_rgb_png(path: &Path, rgb: &[u8], size: usize) -> Result<()> {
    write_png(path, rgb, size, png::ColorType::Rgb)
}

pub fn write_gray_png(path: &Path, gray: &[u8], size: usize) -> Result<()> {
    write_png(path, gray, size, png::ColorType::Grayscale)
}

/// Decodes an 8-bit PNG; returns `(pixels, width, height, channels)`.
pub fn read_png(path: &Path) -> Result<(Vec<u8>, usize, usize, usize)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let dec = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = dec.read_info().map_err(|e| Error::format(path, e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(path, e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::format(path, "expected 8-bit samples"));
    }
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(Error::format(path, format!("unsupported color type {other:?}"))),
    };
    buf.truncate(info.buffer_size());
    Ok((buf, info.width as usize, info.height as usize, channels))
}

/// Writes `n_train + n_val` scenes as PNG pairs plus the manifest.
pub fn build_dataset(n_train: usize, n_val: usize, seed: u64, config: &SceneConfig, out: &Path) -> Result<Manifest> {
    config.validate()?;
    let total = n_train + n_val;
    let samples = par::map_range(total, |i| generate_scene(seed, i as u64, config));
    for split in ["train", "val"] {
        let dir = out.join(split);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut manifest = Manifest {
        version: 1,
        seed,
        config: config.clone(),
        train: Vec::with_capacity(n_train),
        val: Vec::with_capacity(n_val),
    };
    for (i, s) in samples.iter().enumerate() {
        let split = if i < n_train { "train" } else { "val" };
        let image = format!("{split}/{i:05}_image.png");
        let mask = format!("{split}/{i:05}_mask.png");
        write_rgb_png(&out.join(&image), &s.image, s.size)?;
        write_gray_png(&out.join(&mask), &s.mask, s.size)?;
        let rec = Record {
            id: i as u64,
            image,
            mask,
            query: s.query.clone(),
            caption: s.caption.clone(),
            target: s.target,
            mask_area: s.mask_area(),
        };
        if i < n_train {
            manifest.train.push(rec);
        } else {
            manifest.val.push(rec);
        }
    }
    let path = out.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::format(&path, e.to_string()))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn load_sample(dir: &Path, manifest: &Manifest, split: Split, index: usize) -> Result<Sample> {
    let records = manifest.records(split);
    let rec = records.get(index).ok_or_else(|| Error::Range {
        split: split.name().to_string(),
        index,
        len: records.len(),
    })?;
    let size = manifest.config.size;
    let image_path: PathBuf = dir.join(&rec.image);
    let (image, w, h, c) = read_png(&image_path)?;
    if (w, h, c) != (size, size, 3) {
        return Err(Error::format(&image_path, format!("expected {size}x{size} RGB, got {w}x{h}x{c}")));
    }
    let mask_path = dir.join(&rec.mask);
    let (mask, w, h, c) = read_png(&mask_path)?;
    if (w, h, c) != (size, size, 1) {
        return Err(Error::format(&mask_path, format!("expected {size}x{size} gray, got {w}x{h}x{c}")));
    }
    if mask.iter().any(|&m| m != 0 && m != 255) {
        return Err(Error::format(&mask_path, "mask is not binary"));
    }
    let sample = Sample {
        size,
        image,
        mask,
        query: rec.query.clone(),
        caption: rec.caption.clone(),
        target: rec.target,
    };
    if sample.mask_area() != rec.mask_area {
        return Err(Error::format(
            &mask_path,
            format!("mask area {} differs from manifest {}", sample.mask_area(), rec.mask_area),
        ));
    }
    Ok(sample)
}

pub fn load_split(dir: &Path, manifest: &Manifest, split: Split) -> Result<Vec<Sample>> {
    (0..manifest.records(split).len())
        .map(|i| load_sample(dir, manifest, split, i))
        .collect()
}
