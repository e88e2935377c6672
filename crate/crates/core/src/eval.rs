//! IoU metrics and one-step evaluation.

use maskflow_tensor::prng::stream_id;
use maskflow_tensor::{Prng, Tensor};
use serde::{Deserialize, Serialize};

use crate::flow::{one_step_segment, MaskReadout, VelocityModel};
use crate::train::LatentCorpus;
use crate::Result;

/// `(|pred ∧ gt|, |pred ∨ gt|)` for `{0, 255}` masks.
pub fn intersection_union(pred: &[u8], gt: &[u8]) -> (usize, usize) {
    let mut i = 0;
    let mut u = 0;
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = (p != 0, g != 0);
        i += (p && g) as usize;
        u += (p || g) as usize;
    }
    (i, u)
}

/// Both masks empty counts as full agreement.
pub fn iou(pred: &[u8], gt: &[u8]) -> f64 {
    match intersection_union(pred, gt) {
        (_, 0) => 1.0,
        (i, u) => i as f64 / u as f64,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ious: Vec<f64>,
    pub miou: f64,
    pub oiou: f64,
    /// Same as `miou`.
    pub giou: f64,
    /// Same as `oiou`.
    pub ciou: f64,
    pub count: usize,
    pub fingerprint: String,
}

impl EvalReport {
    pub fn from_counts(counts: &[(usize, usize)], fingerprint: impl Into<String>) -> Self {
        let ious: Vec<f64> = counts
            .iter()
            .map(|&(i, u)| if u == 0 { 1.0 } else { i as f64 / u as f64 })
            .collect();
        let n = ious.len();
        let miou = if n == 0 { 0.0 } else { ious.iter().sum::<f64>() / n as f64 };
        let (si, su) = counts.iter().fold((0, 0), |(a, b), &(i, u)| (a + i, b + u));
        let oiou = if su == 0 { 1.0 } else { si as f64 / su as f64 };
        EvalReport {
            ious,
            miou,
            oiou,
            giou: miou,
            ciou: oiou,
            count: n,
            fingerprint: fingerprint.into(),
        }
    }

    pub fn from_masks(preds: &[Vec<u8>], gts: &[Vec<u8>], fingerprint: impl Into<String>) -> Self {
        let counts: Vec<_> = preds.iter().zip(gts).map(|(p, g)| intersection_union(p, g)).collect();
        Self::from_counts(&counts, fingerprint)
    }
}

/// Fixed noise for sample `index` under `seed`.
pub fn eval_noise(seed: u64, index: usize, shape: &[usize]) -> Tensor {
    let mut prng = Prng::new(seed, stream_id(&[0xe7a1, index as u64]));
    Tensor::randn(shape, 1.0, &mut prng)
}

/// Predicted masks for every record of `corpus` with per-record noise.
pub fn predict_masks(
    model: &dyn VelocityModel,
    readout: &MaskReadout,
    corpus: &LatentCorpus,
    eps_seed: u64,
) -> Result<Vec<Vec<u8>>> {
    let shape = corpus.latent_shape().to_vec();
    let per: usize = shape.iter().product();
    let n = corpus.len();
    let mut eps = Vec::with_capacity(n * per);
    for i in 0..n {
        eps.extend_from_slice(eval_noise(eps_seed, i, &shape).data());
    }
    let mut full = vec![n];
    full.extend_from_slice(&shape);
    let eps = Tensor::new(&full, eps)?;
    let (_, masks) = one_step_segment(model, &corpus.queries, Some(&corpus.images), &eps, readout)?;
    Ok(masks)
}

pub fn evaluate_segmentation(
    model: &dyn VelocityModel,
    readout: &MaskReadout,
    corpus: &LatentCorpus,
    eps_seed: u64,
    fingerprint: &str,
) -> Result<EvalReport> {
    let preds = predict_masks(model, readout, corpus, eps_seed)?;
    Ok(EvalReport::from_masks(&preds, &corpus.masks, fingerprint))
}
