//! Straight-path flow matching: path construction, losses, Euler sampling
//! with guidance and one-step mask inference.

use maskflow_tensor::{Bound, Element, Prng, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::codec::{decode_graph, Codec};
use crate::data::{rgb_to_mask, NULL};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Generation,
    Segmentation,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Supervision {
    #[default]
    MseLatent,
    BceDecoder,
    BceLinear,
}

impl Supervision {
    pub fn name(self) -> &'static str {
        match self {
            Supervision::MseLatent => "mse_latent",
            Supervision::BceDecoder => "bce_decoder",
            Supervision::BceLinear => "bce_linear",
        }
    }
}

fn per_sample(shape: &[usize], t: &[f32], op: &'static str) -> Result<usize> {
    if shape.is_empty() || shape[0] != t.len() {
        return Err(Error::domain(op, format!("{} timesteps for batch shape {shape:?}", t.len())));
    }
    if let Some(bad) = t.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::domain(op, format!("t = {bad} outside [0, 1]")));
    }
    Ok(shape[1..].iter().product())
}

/// `x_t = t·ε + (1 − t)·x0` and `v = x0 − ε`, with `t` per leading index.
pub fn make_path(x0: &Tensor, eps: &Tensor, t: &[f32]) -> Result<(Tensor, Tensor)> {
    if x0.shape() != eps.shape() {
        return Err(Error::Tensor(maskflow_tensor::TensorError::ShapeMismatch {
            op: "make_path",
            lhs: x0.shape().to_vec(),
            rhs: eps.shape().to_vec(),
        }));
    }
    let per = per_sample(x0.shape(), t, "make_path")?;
    let mut xt = Vec::with_capacity(x0.numel());
    let mut v = Vec::with_capacity(x0.numel());
    for (i, (&a, &e)) in x0.data().iter().zip(eps.data()).enumerate() {
        let ti = t[i / per.max(1)];
        xt.push(ti * e + (1.0 - ti) * a);
        v.push(a - e);
    }
    Ok((Tensor::new(x0.shape(), xt)?, Tensor::new(x0.shape(), v)?))
}

/// `x_t + t·v`.
pub fn predict_x0(x_t: &Tensor, t: &[f32], v: &Tensor) -> Result<Tensor> {
    let per = per_sample(x_t.shape(), t, "predict_x0")?.max(1);
    if x_t.shape() != v.shape() {
        return Err(Error::Tensor(maskflow_tensor::TensorError::ShapeMismatch {
            op: "predict_x0",
            lhs: x_t.shape().to_vec(),
            rhs: v.shape().to_vec(),
        }));
    }
    let data = x_t
        .data()
        .iter()
        .zip(v.data())
        .enumerate()
        .map(|(i, (&x, &v))| x + t[i / per] * v)
        .collect();
    Ok(Tensor::new(x_t.shape(), data)?)
}

/// `x_t + t·v` on the tape.
pub fn predict_x0_graph<T: Element>(tape: &mut Tape<T>, x_t: Var, t: &[f32], v: Var) -> Result<Var> {
    let shape = tape.shape(x_t).to_vec();
    let mut ts = vec![1; shape.len()];
    ts[0] = t.len();
    let tv = tape.constant(Tensor::new(&ts, t.iter().map(|&t| T::of(t as f64)).collect())?);
    let step = tape.mul(v, tv)?;
    Ok(tape.add(x_t, step)?)
}

pub fn mse_loss<T: Element>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(Error::Tensor(maskflow_tensor::TensorError::ShapeMismatch {
            op: "mse_loss",
            lhs: tape.shape(pred).to_vec(),
            rhs: tape.shape(target).to_vec(),
        }));
    }
    let d = tape.sub(pred, target)?;
    let sq = tape.square(d);
    Ok(tape.mean(sq))
}

/// Mean of `softplus(z) − y·z` for targets `y ∈ {0, 1}`.
pub fn bce_with_logits<T: Element>(tape: &mut Tape<T>, logits: Var, target: Var) -> Result<Var> {
    let sp = tape.softplus(logits);
    let yz = tape.mul(target, logits)?;
    let l = tape.sub(sp, yz)?;
    Ok(tape.mean(l))
}

/// `[B, H, W]` binary masks as `{0, 1}` targets.
pub fn mask_targets<T: Element>(masks: &[&[u8]], size: usize) -> Result<Tensor<T>> {
    let data = masks
        .iter()
        .flat_map(|m| m.iter().map(|&v| if v != 0 { T::one() } else { T::zero() }))
        .collect();
    Ok(Tensor::new(&[masks.len(), size, size], data)?)
}

/// Through-decoder BCE: decode, clamp, channel mean, then `scale·g + bias`.
/// `codec` is bound frozen; `head` carries `scale` and `bias`.
pub fn bce_decoder_logits<T: Element>(
    tape: &mut Tape<T>,
    x0_latent: Var,
    codec: &Codec,
    codec_params: &Bound,
    head: &Bound,
) -> Result<Var> {
    let raw = codec.norm.invert_graph(tape, x0_latent)?;
    let img = decode_graph(tape, codec_params, &codec.config, raw)?;
    let img = tape.clamp(img, -1.0, 1.0);
    let gray = tape.mean_axis(img, 3, false)?;
    let scale = head.get("scale")?;
    let bias = head.get("bias")?;
    let z = tape.mul(gray, scale)?;
    Ok(tape.add(z, bias)?)
}

pub fn bce_decoder_loss<T: Element>(
    tape: &mut Tape<T>,
    x0_latent: Var,
    mask: Var,
    codec: &Codec,
    codec_params: &Bound,
    head: &Bound,
) -> Result<Var> {
    let z = bce_decoder_logits(tape, x0_latent, codec, codec_params, head)?;
    if tape.shape(z) != tape.shape(mask) {
        return Err(Error::domain(
            "bce_decoder_loss",
            format!("decoded {:?} vs mask {:?}", tape.shape(z), tape.shape(mask)),
        ));
    }
    bce_with_logits(tape, z, mask)
}

/// Shared `d → f²` projection per latent cell, unshuffled to pixels.
pub fn bce_linear_logits<T: Element>(tape: &mut Tape<T>, x0_latent: Var, head: &Bound, factor: usize) -> Result<Var> {
    let s = tape.shape(x0_latent).to_vec();
    let w = head.get("w")?;
    if tape.shape(w)[1] != factor * factor {
        return Err(Error::domain(
            "bce_linear_loss",
            format!("head emits {} logits per cell, factor {factor} needs {}", tape.shape(w)[1], factor * factor),
        ));
    }
    let b = head.get("b")?;
    let z = tape.matmul(x0_latent, w)?;
    let z = tape.add(z, b)?;
    let z = tape.reshape(z, &[s[0], s[1], s[2], factor, factor])?;
    let z = tape.permute(z, &[0, 1, 3, 2, 4])?;
    Ok(tape.reshape(z, &[s[0], s[1] * factor, s[2] * factor])?)
}

pub fn bce_linear_loss<T: Element>(
    tape: &mut Tape<T>,
    x0_latent: Var,
    mask: Var,
    head: &Bound,
    factor: usize,
) -> Result<Var> {
    let z = bce_linear_logits(tape, x0_latent, head, factor)?;
    if tape.shape(z) != tape.shape(mask) {
        return Err(Error::domain(
            "bce_linear_loss",
            format!("logits {:?} vs mask {:?}", tape.shape(z), tape.shape(mask)),
        ));
    }
    bce_with_logits(tape, z, mask)
}

/// Velocity field evaluated on a batch at one shared timestep.
pub trait VelocityModel {
    /// `x` is `[B, h, w, d]`; `cond[i]` are token ids for sample `i`;
    /// `clean` is the image latent for segmentation calls.
    fn velocity(&self, x: &Tensor, t: f32, cond: &[Vec<usize>], clean: Option<&Tensor>) -> Result<Tensor>;
}

/// The exact single-datum optimum `v(x, t) = (x0* − x) / t`.
#[derive(Clone, Debug)]
pub struct AnalyticModel {
    pub x0: Tensor,
}

impl VelocityModel for AnalyticModel {
    fn velocity(&self, x: &Tensor, t: f32, _cond: &[Vec<usize>], _clean: Option<&Tensor>) -> Result<Tensor> {
        let per = self.x0.numel();
        if x.numel() % per != 0 || x.shape()[1..] != *self.x0.shape() {
            return Err(Error::domain(
                "analytic_model",
                format!("input {:?} vs datum {:?}", x.shape(), self.x0.shape()),
            ));
        }
        let d = self.x0.data();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| (d[i % per] - v) / t)
            .collect();
        Ok(Tensor::new(x.shape(), data)?)
    }
}

pub fn null_condition(batch: usize) -> Vec<Vec<usize>> {
    vec![vec![NULL]; batch]
}

/// Integrates from `ε` at `t = 1` to `t = 0` in `steps` uniform Euler
/// steps, combining `v_u + w·(v_c − v_u)`. `w = 1` skips the
/// unconditional pass.
pub fn euler_sample_from(
    model: &dyn VelocityModel,
    cond: &[Vec<usize>],
    eps: Tensor,
    steps: usize,
    guidance: f32,
) -> Result<Tensor> {
    if steps == 0 {
        return Err(Error::domain("euler_sample", "steps must be at least 1"));
    }
    if !(guidance >= 0.0) {
        return Err(Error::domain("euler_sample", format!("guidance {guidance} must be >= 0")));
    }
    let null = null_condition(cond.len());
    let dt = 1.0 / steps as f32;
    let mut x = eps;
    for k in (1..=steps).rev() {
        let t = k as f32 * dt;
        let vc = model.velocity(&x, t, cond, None)?;
        let v = if guidance == 1.0 {
            vc
        } else {
            let vu = model.velocity(&x, t, &null, None)?;
            vu.zip_with(&vc, "cfg", |u, c| u + guidance * (c - u))?
        };
        x = x.zip_with(&v, "euler", |x, v| x + dt * v)?;
    }
    Ok(x)
}

pub fn euler_sample(
    model: &dyn VelocityModel,
    cond: &[Vec<usize>],
    shape: &[usize],
    steps: usize,
    guidance: f32,
    prng: &mut Prng,
) -> Result<Tensor> {
    let eps = Tensor::randn(shape, 1.0, prng);
    euler_sample_from(model, cond, eps, steps, guidance)
}

/// `ε + v(ε, 1 | cond, image)`: one velocity evaluation, no guidance.
pub fn one_step_latent(
    model: &dyn VelocityModel,
    cond: &[Vec<usize>],
    image_latent: Option<&Tensor>,
    eps: &Tensor,
) -> Result<Tensor> {
    let v = model.velocity(eps, 1.0, cond, image_latent)?;
    Ok(eps.zip_with(&v, "one_step", |e, v| e + v)?)
}

/// Turns a predicted mask latent into binary masks.
#[derive(Clone, Debug)]
pub enum MaskReadout<'a> {
    /// Decode then threshold the channel mean at zero.
    Decoder(&'a Codec),
    /// Sigmoid of the linear head above one half.
    Linear { w: &'a Tensor, b: &'a Tensor, factor: usize },
}

impl MaskReadout<'_> {
    /// `[B, h, w, d]` latents to `B` masks of `{0, 255}`.
    pub fn masks(&self, latents: &Tensor) -> Result<Vec<Vec<u8>>> {
        let b = latents.shape()[0];
        match self {
            MaskReadout::Decoder(codec) => {
                let img = codec.decode(latents)?;
                let per = img.numel() / b.max(1);
                Ok(img.data().chunks(per).map(|im| rgb_to_mask(im, 0.0)).collect())
            }
            MaskReadout::Linear { w, b: bias, factor } => {
                let mut tape = Tape::new();
                let mut p = maskflow_tensor::ParamSet::new();
                p.insert("w", (*w).clone());
                p.insert("b", (*bias).clone());
                let bound = p.bind(&mut tape, false);
                let z = tape.constant(latents.clone());
                let logits = bce_linear_logits(&mut tape, z, &bound, *factor)?;
                let v = tape.value(logits);
                let per = v.numel() / b.max(1);
                Ok(v
                    .data()
                    .chunks(per)
                    .map(|c| c.iter().map(|&z| if z > 0.0 { 255 } else { 0 }).collect())
                    .collect())
            }
        }
    }
}

/// One-step segmentation: the mask latent and its binarization.
pub fn one_step_segment(
    model: &dyn VelocityModel,
    cond: &[Vec<usize>],
    image_latent: Option<&Tensor>,
    eps: &Tensor,
    readout: &MaskReadout,
) -> Result<(Tensor, Vec<Vec<u8>>)> {
    let latent = one_step_latent(model, cond, image_latent, eps)?;
    let masks = readout.masks(&latent)?;
    Ok((latent, masks))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn path_arithmetic() {
        let (xt, v) = make_path(&t(&[1, 2], &[1.0, 0.0]), &t(&[1, 2], &[0.0, 1.0]), &[0.5]).unwrap();
        assert_eq!(xt.data(), &[0.5, 0.5]);
        assert_eq!(v.data(), &[1.0, -1.0]);
        let x = t(&[2, 1], &[0.3, -0.7]);
        let (xt, v) = make_path(&x, &x, &[0.2, 0.9]).unwrap();
        assert_eq!(xt, x);
        assert!(v.data().iter().all(|&v| v == 0.0));
        assert!(make_path(&x, &t(&[1, 2], &[0.0, 0.0]), &[0.1]).is_err());
        assert!(make_path(&x, &x, &[0.1, 1.5]).is_err());
    }

    #[test]
    fn predict_x0_cases() {
        let eps = t(&[1, 2], &[0.5, -1.0]);
        let v = t(&[1, 2], &[2.0, 3.0]);
        assert_eq!(predict_x0(&eps, &[1.0], &v).unwrap().data(), &[2.5, 2.0]);
        assert_eq!(predict_x0(&eps, &[0.0], &v).unwrap(), eps);
    }

    #[test]
    fn mse_values() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(t(&[4], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[4], &[2.0, 3.0, 4.0, 5.0]));
        let l = mse_loss(&mut tape, a, a).unwrap();
        assert_eq!(tape.value(l).data(), &[0.0]);
        let l = mse_loss(&mut tape, b, a).unwrap();
        assert_eq!(tape.value(l).data(), &[1.0]);
        let c = tape.constant(t(&[2], &[1.0, 2.0]));
        assert!(mse_loss(&mut tape, a, c).is_err());
    }

    #[test]
    fn zero_linear_head_gives_ln2() {
        let mut tape = Tape::<f64>::new();
        let mut p = maskflow_tensor::ParamSet::<f64>::new();
        p.insert("w", Tensor::zeros(&[3, 4]));
        p.insert("b", Tensor::zeros(&[4]));
        let head = p.bind(&mut tape, false);
        let mut prng = Prng::new(0, 0);
        let z = tape.constant(Tensor::randn(&[1, 2, 2, 3], 1.0, &mut prng));
        let mask: Vec<u8> = (0..16).map(|i| if i % 3 == 0 { 255 } else { 0 }).collect();
        let m = tape.constant(mask_targets(&[&mask], 4).unwrap());
        let l = bce_linear_loss(&mut tape, z, m, &head, 2).unwrap();
        assert!((tape.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
        let m3 = tape.constant(Tensor::zeros(&[1, 4, 4]));
        assert!(bce_linear_loss(&mut tape, z, m3, &head, 3).is_err());
    }

    #[test]
    fn analytic_model_one_and_many_steps() {
        let mut prng = Prng::new(7, 0);
        let x0 = Tensor::randn(&[2, 2, 3], 1.0, &mut prng);
        let m = AnalyticModel { x0: x0.clone() };
        let eps = Tensor::randn(&[1, 2, 2, 3], 1.0, &mut prng);
        let cond = vec![vec![1]];
        let one = euler_sample_from(&m, &cond, eps.clone(), 1, 1.0).unwrap();
        // ε + (x0 − ε) rounds once in f32.
        assert!(one.max_abs_diff(&x0.reshape(&[1, 2, 2, 3]).unwrap()) < 1e-6);
        let many = euler_sample_from(&m, &cond, eps, 20, 3.0).unwrap();
        assert!(many.max_abs_diff(&x0.reshape(&[1, 2, 2, 3]).unwrap()) < 1e-4);
    }

    #[test]
    fn guidance_one_skips_unconditional() {
        struct Counting(std::cell::Cell<usize>);
        impl VelocityModel for Counting {
            fn velocity(&self, x: &Tensor, _: f32, _: &[Vec<usize>], _: Option<&Tensor>) -> Result<Tensor> {
                self.0.set(self.0.get() + 1);
                Ok(x.map(|v| -v))
            }
        }
        let m = Counting(Default::default());
        let eps = Tensor::ones(&[1, 1, 1, 1]);
        euler_sample_from(&m, &[vec![1]], eps.clone(), 5, 1.0).unwrap();
        assert_eq!(m.0.get(), 5);
        euler_sample_from(&m, &[vec![1]], eps, 5, 2.0).unwrap();
        assert_eq!(m.0.get(), 15);
    }
}
