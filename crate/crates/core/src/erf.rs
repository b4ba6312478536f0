//! Effective receptive field: spread of the input pixels carrying the largest
//! gradient of the central pixel's dominant logit.

use serde::{Deserialize, Serialize};

use crate::data::GrayImage;
use crate::error::{Error, Result};
use crate::graph::Model;
use crate::scalar::Scalar;
use crate::tensor::{backward, ops, Tensor, Var};

pub const DEFAULT_FRACTION: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErfReport {
    /// Std of selected column coordinates, pixels.
    pub erf_h: f64,
    /// Std of selected row coordinates, pixels.
    pub erf_v: f64,
    pub threshold_fraction: f64,
    pub images_used: usize,
    /// `(erf_h, erf_v)` for each image.
    pub per_image: Vec<(f64, f64)>,
}

impl ErfReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Per-pixel sum over channels of `|d logit / d input|` for one `[1, C, H, W]` image,
/// where the logit is the argmax class at the output's central pixel.
pub fn gradient_map<T, F>(f: &F, image: &Tensor<T>) -> Result<Vec<f64>>
where
    T: Scalar,
    F: Fn(&Var<T>) -> Result<Var<T>>,
{
    let d = image.dims();
    if d.n != 1 {
        return Err(Error::shape("erf", format!("expected a single image, got {d:?}")));
    }
    let x = Var::leaf(image.clone());
    let y = f(&x)?;
    let yd = y.dims();
    let (ch, cw) = (yd.h / 2, yd.w / 2);
    let logits = y.value();
    let class = (0..yd.c)
        .max_by(|&a, &b| logits.at(0, a, ch, cw).partial_cmp(&logits.at(0, b, ch, cw)).expect("finite logits"))
        .ok_or_else(|| Error::shape("erf", "model produced no channels"))?;
    let target = ops::pick(&y, 0, class, ch, cw)?;
    backward(&target)?;
    let p = d.h * d.w;
    let mut map = vec![0.0; p];
    if let Some(g) = x.take_grad() {
        for c in 0..d.c {
            for (m, v) in map.iter_mut().zip(g.plane(0, c)) {
                *m += v.to_f64_lossy().abs();
            }
        }
    }
    Ok(map)
}

/// Population std of column and row coordinates of the top-`fraction` pixels.
///
/// Every pixel equal to the threshold value is included; zero-gradient pixels
/// never are.
pub fn spread(map: &[f64], h: usize, w: usize, fraction: f64) -> (f64, f64) {
    assert_eq!(map.len(), h * w, "map size");
    let k = ((fraction * map.len() as f64).ceil() as usize).clamp(1, map.len());
    let mut sorted = map.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let threshold = sorted[k - 1];
    let picked: Vec<(f64, f64)> = map
        .iter()
        .enumerate()
        .filter(|&(_, &g)| g > 0.0 && g >= threshold)
        .map(|(i, _)| ((i % w) as f64, (i / w) as f64))
        .collect();
    if picked.is_empty() {
        return (0.0, 0.0);
    }
    let std = |vals: &mut dyn Iterator<Item = f64>| {
        let v: Vec<f64> = vals.collect();
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
    };
    (
        std(&mut picked.iter().map(|p| p.0)),
        std(&mut picked.iter().map(|p| p.1)),
    )
}

/// Mean per-image receptive field spread of an arbitrary differentiable function.
pub fn estimate<T, F>(f: F, images: &[Tensor<T>], fraction: f64) -> Result<ErfReport>
where
    T: Scalar,
    F: Fn(&Var<T>) -> Result<Var<T>>,
{
    if images.is_empty() {
        return Err(Error::Invalid("erf estimate needs at least one image".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Invalid(format!("threshold fraction must be in (0, 1], got {fraction}")));
    }
    let per_image = images
        .iter()
        .map(|img| {
            let d = img.dims();
            let map = gradient_map(&f, img)?;
            Ok(spread(&map, d.h, d.w, fraction))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = per_image.len() as f64;
    Ok(ErfReport {
        erf_h: per_image.iter().map(|p| p.0).sum::<f64>() / n,
        erf_v: per_image.iter().map(|p| p.1).sum::<f64>() / n,
        threshold_fraction: fraction,
        images_used: per_image.len(),
        per_image,
    })
}

/// [`estimate`] for a segmentation model in inference mode.
pub fn estimate_model<T: Scalar>(model: &Model<T>, images: &[Tensor<T>]) -> Result<ErfReport> {
    estimate(|x: &Var<T>| model.forward(x), images, DEFAULT_FRACTION)
}

/// Gradient magnitudes scaled to bytes for inspection.
pub fn map_to_pgm(map: &[f64], h: usize, w: usize) -> GrayImage {
    let max = map.iter().cloned().fold(0.0, f64::max);
    let data = map
        .iter()
        .map(|&g| if max > 0.0 { (g / max * 255.0).round() as u8 } else { 0 })
        .collect();
    GrayImage {
        width: w,
        height: h,
        data,
    }
}
