use rand::seq::SliceRandom;
use rand::Rng;

use crate::io::palette_color;
use crate::metrics::LabelMap;
use crate::rng::stream;
use crate::tensor::{bilinear_resize, Tensor};
use crate::{Error, Result};

use super::TrainSample;

/// Scale factors sampled by [`augment`].
pub const SCALE_FACTORS: [f64; 7] = [0.7, 0.8, 0.9, 1.0, 1.1, 1.2, 1.3];

const NOISE: f64 = 0.08;
const COLOR_SEED: u64 = 0x5EED_C010;

fn class_color(class: u32) -> [f64; 3] {
    palette_color(class, COLOR_SEED).map(|v| f64::from(v) / 255.0)
}

/// Synthetic segmentation images: a class-0 background with one to three
/// rectangles or discs of distinct foreground classes. Every class has a
/// fixed colour; pixels get uniform noise on top. Labels match the drawn
/// regions exactly.
pub fn make_shapes_dataset(
    n: usize,
    height: usize,
    width: usize,
    num_classes: usize,
    seed: u64,
) -> Result<Vec<TrainSample>> {
    if num_classes < 3 {
        return Err(Error::InvalidArgument(format!(
            "shapes dataset needs at least 3 classes, got {num_classes}"
        )));
    }
    if height < 4 || width < 4 {
        return Err(Error::InvalidArgument("shapes images must be at least 4×4".into()));
    }
    (0..n)
        .map(|i| {
            let mut rng = stream(seed, &[i as u64]);
            let mut truth = LabelMap::filled(height, width, 0);
            let mut foreground: Vec<u32> = (1..num_classes as u32).collect();
            foreground.shuffle(&mut rng);
            let regions = rng.gen_range(1..=3usize.min(foreground.len()));
            for &class in &foreground[..regions] {
                let rh = rng.gen_range(height / 4..=height / 2);
                let rw = rng.gen_range(width / 4..=width / 2);
                let y0 = rng.gen_range(0..=height - rh);
                let x0 = rng.gen_range(0..=width - rw);
                let disc = rng.gen_bool(0.5);
                let (cy, cx) = (y0 as f64 + rh as f64 / 2.0, x0 as f64 + rw as f64 / 2.0);
                let (ry, rx) = (rh as f64 / 2.0, rw as f64 / 2.0);
                for y in y0..y0 + rh {
                    for x in x0..x0 + rw {
                        let dy = (y as f64 + 0.5 - cy) / ry;
                        let dx = (x as f64 + 0.5 - cx) / rx;
                        if !disc || dy * dy + dx * dx <= 1.0 {
                            truth.set(y, x, class);
                        }
                    }
                }
            }
            let mut image = Tensor::zeros(&[height, width, 3]);
            for (px, &l) in image.data_mut().chunks_mut(3).zip(truth.data()) {
                for (v, base) in px.iter_mut().zip(class_color(l)) {
                    *v = (base + rng.gen_range(-NOISE..NOISE)).clamp(0.0, 1.0);
                }
            }
            TrainSample::new(image, truth)
        })
        .collect()
}

/// Random horizontal flip (probability 0.5) and rescale by a factor drawn
/// from [`SCALE_FACTORS`], then pad or crop back to the original size.
pub fn augment<R: Rng + ?Sized>(
    sample: &TrainSample,
    rng: &mut R,
    ignore_label: u32,
) -> Result<TrainSample> {
    let flip = rng.gen_bool(0.5);
    let factor = SCALE_FACTORS[rng.gen_range(0..SCALE_FACTORS.len())];
    augment_with(sample, flip, factor, ignore_label)
}

/// Deterministic core of [`augment`]. The image is resized bilinearly and
/// the labels by nearest neighbour (both align-corners). Padding uses zero
/// pixels and `ignore_label`; crops and pads are centred.
pub fn augment_with(
    sample: &TrainSample,
    flip: bool,
    factor: f64,
    ignore_label: u32,
) -> Result<TrainSample> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(Error::InvalidArgument(format!("scale factor must be positive, got {factor}")));
    }
    let (h, w) = (sample.height(), sample.width());
    let (image, truth) = if flip {
        (flip_image(&sample.image), flip_labels(&sample.truth))
    } else {
        (sample.image.clone(), sample.truth.clone())
    };
    let sh = ((h as f64 * factor).round() as usize).max(1);
    let sw = ((w as f64 * factor).round() as usize).max(1);
    let scaled = bilinear_resize(&image, sh, sw)?;
    let scaled_truth = resize_nearest(&truth, sh, sw);

    let oy = (sh as isize - h as isize) / 2;
    let ox = (sw as isize - w as isize) / 2;
    let mut out_image = Tensor::zeros(&[h, w, 3]);
    let mut out_truth = LabelMap::filled(h, w, ignore_label);
    for y in 0..h {
        let sy = y as isize + oy;
        if sy < 0 || sy >= sh as isize {
            continue;
        }
        for x in 0..w {
            let sx = x as isize + ox;
            if sx < 0 || sx >= sw as isize {
                continue;
            }
            let (sy, sx) = (sy as usize, sx as usize);
            for k in 0..3 {
                out_image.data_mut()[(y * w + x) * 3 + k] = scaled.at3(sy, sx, k);
            }
            out_truth.set(y, x, scaled_truth.get(sy, sx));
        }
    }
    TrainSample::new(out_image, out_truth)
}

fn flip_image(t: &Tensor) -> Tensor {
    let (_, w, c) = (t.dims()[0], t.dims()[1], t.dims()[2]);
    Tensor::from_fn(t.dims(), |i| {
        let (y, x, k) = (i / (w * c), (i / c) % w, i % c);
        t.at3(y, w - 1 - x, k)
    })
}

fn flip_labels(m: &LabelMap) -> LabelMap {
    let w = m.width();
    let data = (0..m.height())
        .flat_map(|y| (0..w).rev().map(move |x| (y, x)))
        .map(|(y, x)| m.get(y, x))
        .collect();
    LabelMap::new(m.height(), w, data).expect("same extents")
}

/// Align-corners source index for nearest-neighbour resampling. Exact
/// halves round toward the nearer border so the mapping stays mirror
/// symmetric.
fn nearest(o: usize, src: usize, dst: usize) -> usize {
    if src == 1 || dst == 1 {
        return 0;
    }
    let num = o * (src - 1);
    let den = dst - 1;
    let (q, r) = (num / den, num % den);
    let twice = 2 * r;
    let round_up = match twice.cmp(&den) {
        std::cmp::Ordering::Less => false,
        std::cmp::Ordering::Greater => true,
        // halfway: round away from the axis centre
        std::cmp::Ordering::Equal => 2 * q + 1 > src - 1,
    };
    q + usize::from(round_up)
}

fn resize_nearest(m: &LabelMap, out_h: usize, out_w: usize) -> LabelMap {
    let rows: Vec<usize> = (0..out_h).map(|o| nearest(o, m.height(), out_h)).collect();
    let cols: Vec<usize> = (0..out_w).map(|o| nearest(o, m.width(), out_w)).collect();
    let data = rows
        .iter()
        .flat_map(|&y| cols.iter().map(move |&x| (y, x)))
        .map(|(y, x)| m.get(y, x))
        .collect();
    LabelMap::new(out_h, out_w, data).expect("positive extents")
}
