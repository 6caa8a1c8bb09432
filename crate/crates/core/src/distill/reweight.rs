use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gray::GrayImage;
use crate::tensor::{ResampleMap, ResampleMode, Tensor};

/// How the per-pixel mask distillation loss is weighted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReweightKind {
    #[default]
    None,
    /// Local patch cosine similarity of the original and reconstructed image.
    #[serde(alias = "cs")]
    CosineSimilarity,
    /// Squared difference of the two branches' feature maps.
    #[serde(alias = "sd")]
    FeatureDifference,
    /// Learned dissimilarity network, trained jointly.
    #[serde(alias = "dn")]
    DissimilarityNetwork,
}

impl fmt::Display for ReweightKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReweightKind::None => "none",
            ReweightKind::CosineSimilarity => "cosine-similarity",
            ReweightKind::FeatureDifference => "feature-difference",
            ReweightKind::DissimilarityNetwork => "dissimilarity-network",
        })
    }
}

impl FromStr for ReweightKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "cosine-similarity" | "cs" => Ok(Self::CosineSimilarity),
            "feature-difference" | "sd" => Ok(Self::FeatureDifference),
            "dissimilarity-network" | "dn" => Ok(Self::DissimilarityNetwork),
            other => Err(Error::config(format!("unknown reweight strategy {other:?}"))),
        }
    }
}

/// Weight maps of the non-learned strategies, flattened to `[H*W]`.
/// `f_image` and `f_event` are `[d_f, h, w]` feature maps and only used by
/// the feature-difference strategy.
pub fn alternative_weight_map(
    kind: ReweightKind,
    x: &GrayImage,
    x_hat: &GrayImage,
    f_image: &Tensor,
    f_event: &Tensor,
) -> Result<Tensor> {
    if (x.width, x.height) != (x_hat.width, x_hat.height) {
        return Err(Error::invalid("original and reconstruction geometries differ"));
    }
    let n = x.width * x.height;
    match kind {
        ReweightKind::None => Ok(Tensor::ones(&[n])),
        ReweightKind::CosineSimilarity => Ok(patch_cosine_map(x, x_hat)),
        ReweightKind::FeatureDifference => feature_difference_map(f_image, f_event, x.height, x.width),
        ReweightKind::DissimilarityNetwork => Err(Error::config(
            "the dissimilarity-network map comes from the trained network, not a fixed rule",
        )),
    }
}

/// Cosine similarity of zero-padded 3x3 patches mapped from `[-1, 1]` to
/// `[0, 1]`. Two all-zero patches count as identical.
fn patch_cosine_map(a: &GrayImage, b: &GrayImage) -> Tensor {
    let (w, h) = (a.width as isize, a.height as isize);
    let mut out = Vec::with_capacity((w * h) as usize);
    for y in 0..h {
        for x in 0..w {
            let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (px, py) = (x + dx, y + dy);
                    if px < 0 || py < 0 || px >= w || py >= h {
                        continue;
                    }
                    let (u, v) = (a.get(px as usize, py as usize), b.get(px as usize, py as usize));
                    dot += u * v;
                    na += u * u;
                    nb += v * v;
                }
            }
            let cos = if na == 0.0 && nb == 0.0 {
                1.0
            } else if na == 0.0 || nb == 0.0 {
                0.0
            } else {
                (dot / (na * nb).sqrt()).clamp(-1.0, 1.0)
            };
            out.push((cos + 1.0) / 2.0);
        }
    }
    Tensor::from_parts(vec![out.len()], out)
}

/// `1 - d / max(d)` for the per-location squared feature difference `d`,
/// bilinearly upsampled.
fn feature_difference_map(fa: &Tensor, fb: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    if fa.shape() != fb.shape() || fa.shape().len() != 3 {
        return Err(Error::invalid(format!(
            "feature maps must share a [C, h, w] shape, got {:?} and {:?}",
            fa.shape(),
            fb.shape()
        )));
    }
    let (c, fh, fw) = (fa.shape()[0], fa.shape()[1], fa.shape()[2]);
    let hw = fh * fw;
    let mut d = vec![0.0; hw];
    for ch in 0..c {
        for (i, dv) in d.iter_mut().enumerate() {
            let diff = fa.data()[ch * hw + i] - fb.data()[ch * hw + i];
            *dv += diff * diff;
        }
    }
    let max = d.iter().cloned().fold(0.0, f64::max);
    let low: Vec<f64> = d.iter().map(|&v| if max > 0.0 { 1.0 - v / max } else { 1.0 }).collect();
    let map = Rc::new(ResampleMap::new(ResampleMode::Bilinear, fh, fw, height, width));
    let up = map.apply(&low, 1);
    Ok(Tensor::from_parts(vec![height * width], up))
}
