use crate::metrics::LabelMap;
use crate::tensor::Tensor;
use crate::{Error, Result};

use super::MicroNetConfig;

/// Window of side `patch` centred on `center`, shifted to stay inside
/// `[0, extent)` when it would cross a border.
fn window(center: usize, patch: usize, extent: usize) -> std::ops::Range<usize> {
    if patch >= extent {
        return 0..extent;
    }
    let start = (center as isize - (patch / 2) as isize).clamp(0, (extent - patch) as isize);
    start as usize..start as usize + patch
}

/// Binary target for the classification map: cell `(i, j)` is 1 on channel
/// `k` when its image window contains at least one pixel of class `k`.
///
/// The window has side `config.patch`, is centred on pixel
/// `(i·s + s/2, j·s + s/2)` and is shifted inward at image borders.
/// Pixels carrying the ignore label are skipped.
pub fn gt_classification_map(truth: &LabelMap, config: &MicroNetConfig) -> Result<Tensor> {
    let (h_full, w_full) = (truth.height(), truth.width());
    config.check_image(h_full, w_full)?;
    let s = config.downsample;
    let c = config.num_classes;
    let (h, w) = (h_full / s, w_full / s);

    // 2-D prefix counts per class make each window query O(c)
    let mut prefix = vec![0u32; (h_full + 1) * (w_full + 1) * c];
    let at = |y: usize, x: usize, k: usize| (y * (w_full + 1) + x) * c + k;
    for y in 0..h_full {
        for x in 0..w_full {
            let label = truth.get(y, x);
            for k in 0..c {
                let here = u32::from(label as usize == k);
                prefix[at(y + 1, x + 1, k)] =
                    here + prefix[at(y, x + 1, k)] + prefix[at(y + 1, x, k)] - prefix[at(y, x, k)];
            }
            if label != config.ignore_label && label as usize >= c {
                return Err(Error::LabelOutOfRange {
                    label,
                    num_classes: c,
                });
            }
        }
    }

    let mut out = Tensor::zeros(&[h, w, c]);
    let data = out.data_mut();
    for i in 0..h {
        let rows = window(i * s + s / 2, config.patch, h_full);
        for j in 0..w {
            let cols = window(j * s + s / 2, config.patch, w_full);
            for k in 0..c {
                let n = prefix[at(rows.end, cols.end, k)] + prefix[at(rows.start, cols.start, k)]
                    - prefix[at(rows.start, cols.end, k)]
                    - prefix[at(rows.end, cols.start, k)];
                if n > 0 {
                    data[(i * w + j) * c + k] = 1.0;
                }
            }
        }
    }
    Ok(out)
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Mean binary cross-entropy of `sigmoid(map)` against a 0/1 target,
/// evaluated in logit space.
pub fn classification_loss(map: &Tensor, target: &Tensor) -> Result<f64> {
    map.expect_same_dims(target)?;
    let total: f64 = map
        .data()
        .iter()
        .zip(target.data())
        .map(|(&z, &g)| softplus(z) - g * z)
        .sum();
    Ok(total / map.len() as f64)
}

pub fn classification_loss_backward(map: &Tensor, target: &Tensor) -> Result<Tensor> {
    let n = map.len() as f64;
    map.zip_map(target, |z, g| (crate::tensor::sigmoid1(z) - g) / n)
}

fn check_segmentation(map: &Tensor, truth: &LabelMap, ignore_label: u32) -> Result<usize> {
    let (h, w, c) = map.hwc()?;
    if truth.height() != h || truth.width() != w {
        return Err(Error::DimMismatch(format!(
            "map {h}×{w} vs truth {}×{}",
            truth.height(),
            truth.width()
        )));
    }
    let mut counted = 0;
    for &l in truth.data() {
        if l == ignore_label {
            continue;
        }
        if l as usize >= c {
            return Err(Error::LabelOutOfRange {
                label: l,
                num_classes: c,
            });
        }
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::AllIgnored);
    }
    Ok(counted)
}

/// Mean over non-ignored pixels of `-ln softmax(map)[truth]`.
pub fn segmentation_loss(map: &Tensor, truth: &LabelMap, ignore_label: u32) -> Result<f64> {
    let n = check_segmentation(map, truth, ignore_label)?;
    let c = map.dims()[2];
    let mut total = 0.0;
    for (cell, &l) in map.data().chunks(c).zip(truth.data()) {
        if l == ignore_label {
            continue;
        }
        let m = cell.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + cell.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - cell[l as usize];
    }
    Ok(total / n as f64)
}

pub fn segmentation_loss_backward(
    map: &Tensor,
    truth: &LabelMap,
    ignore_label: u32,
) -> Result<Tensor> {
    let n = check_segmentation(map, truth, ignore_label)? as f64;
    let c = map.dims()[2];
    let probs = crate::tensor::softmax_channel(map);
    let mut grad = Tensor::zeros(map.dims());
    for ((g, p), &l) in grad
        .data_mut()
        .chunks_mut(c)
        .zip(probs.data().chunks(c))
        .zip(truth.data())
    {
        if l == ignore_label {
            continue;
        }
        for (gk, pk) in g.iter_mut().zip(p) {
            *gk = pk / n;
        }
        g[l as usize] -= 1.0 / n;
    }
    Ok(grad)
}
