//! Small layer helpers shared by the codec and the transformer.

use maskflow_tensor::{Bound, Element, ParamSet, Prng, Tape, Tensor, Var};

use crate::Result;

/// `x @ w + b` over the last axis of `x`.
pub(crate) fn linear<T: Element>(tape: &mut Tape<T>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{name}.w"))?;
    let b = p.get(&format!("{name}.b"))?;
    let y = tape.matmul(x, w)?;
    Ok(tape.add(y, b)?)
}

pub(crate) fn conv<T: Element>(
    tape: &mut Tape<T>,
    p: &Bound,
    name: &str,
    x: Var,
    stride: usize,
) -> Result<Var> {
    let w = p.get(&format!("{name}.w"))?;
    let b = p.get(&format!("{name}.b"))?;
    let pad = tape.shape(w)[0] / 2;
    let y = tape.conv2d(x, w, stride, pad)?;
    Ok(tape.add(y, b)?)
}

/// `[B, h, w, 4c] -> [B, 2h, 2w, c]`, sub-pixel order `(dy, dx, c)`.
pub(crate) fn depth_to_space<T: Element>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (b, h, w, c) = (s[0], s[1], s[2], s[3] / 4);
    let y = tape.reshape(x, &[b, h, w, 2, 2, c])?;
    let y = tape.permute(y, &[0, 1, 3, 2, 4, 5])?;
    Ok(tape.reshape(y, &[b, 2 * h, 2 * w, c])?)
}

/// Glorot-uniform weight and zero bias.
pub(crate) fn init_linear(p: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, prng: &mut Prng) {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    p.insert(format!("{name}.w"), Tensor::uniform(&[fan_in, fan_out], bound, prng));
    p.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
}

pub(crate) fn init_zero_linear(p: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize) {
    p.insert(format!("{name}.w"), Tensor::zeros(&[fan_in, fan_out]));
    p.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
}

/// He-uniform HWIO kernel.
pub(crate) fn init_conv(p: &mut ParamSet, name: &str, k: usize, cin: usize, cout: usize, prng: &mut Prng) {
    let bound = (6.0 / (k * k * cin) as f64).sqrt();
    p.insert(format!("{name}.w"), Tensor::uniform(&[k, k, cin, cout], bound, prng));
    p.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
}
