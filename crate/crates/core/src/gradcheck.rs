//! Finite-difference verification of every hand-written backward pass.
//!
//! Element-wise ops are reduced to a scalar by a fixed random projection
//! `L = Σ r ⊙ op(x)`, so the upstream gradient handed to each backward
//! function is `r`. Inputs are drawn away from kinks and clamps.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::filter::{
    filter_then_upsample, filter_then_upsample_backward, soft_filter, soft_filter_backward,
    FilterOrder, HolisticConfidence,
};
use crate::micronet::{
    classification_loss, classification_loss_backward, kink_margin, loss_and_gradients,
    make_shapes_dataset, segmentation_loss, segmentation_loss_backward, MicroNetConfig,
    TrainSample, Variant, Weights,
};
use crate::metrics::LabelMap;
use crate::rng::{name_key, stream};
use crate::tensor::{
    bilinear_upsample, bilinear_upsample_backward, conv2d, conv2d_backward, global_max_pool,
    global_max_pool_backward, grad_check, logit, logit_backward, relu, relu_backward, sigmoid,
    sigmoid_backward, softmax_channel, softmax_channel_backward, Tensor, DEFAULT_EPS,
    GRAD_CHECK_STEP,
};
use crate::{Error, Result};

/// Operations accepted by [`check_op`].
pub const OPS: &[&str] = &[
    "sigmoid",
    "logit",
    "relu",
    "conv2d",
    "max_pool",
    "upsample",
    "softmax",
    "soft_filter",
    "filter_then_upsample",
    "classification_loss",
    "segmentation_loss",
];

/// Tolerance for single operations.
pub const OP_TOLERANCE: f64 = 1e-6;
/// Tolerance for the composed network loss.
pub const NET_TOLERANCE: f64 = 1e-3;

/// Maximum relative error of one gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    /// `op/argument` or the weight tensor name.
    pub name: String,
    pub max_error: f64,
}

impl CheckResult {
    fn new(name: impl Into<String>, max_error: f64) -> Self {
        Self {
            name: name.into(),
            max_error,
        }
    }
}

fn uniform(dims: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(dims, |_| rng.gen_range(lo..hi))
}

/// Uniform values with magnitude at least `gap`.
fn away_from_zero(dims: &[usize], gap: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(dims, |_| {
        let m = rng.gen_range(gap..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn scalar(v: f64) -> Result<Tensor> {
    Tensor::vector(vec![v])
}

/// Checks `L = Σ r ⊙ op(x)` where `back(x, r)` returns `∂L/∂x`.
fn projected<F, B>(x: &Tensor, out_dims: &[usize], rng: &mut ChaCha8Rng, op: F, back: B) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
    B: Fn(&Tensor, &Tensor) -> Result<Tensor>,
{
    let r = uniform(out_dims, -1.0, 1.0, rng);
    grad_check(
        |x| Ok((scalar(op(x)?.dot(&r)?)?, back(x, &r)?)),
        x,
        GRAD_CHECK_STEP,
    )
}

/// Runs the gradient checks for one operation; some return one result per
/// differentiable argument.
pub fn check_op(name: &str, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = stream(seed, &[name_key(name)]);
    let rng = &mut rng;
    let one = |arg: &str, e: f64| Ok(vec![CheckResult::new(format!("{name}/{arg}"), e)]);
    match name {
        "sigmoid" => {
            let x = uniform(&[3, 4, 2], -4.0, 4.0, rng);
            let e = projected(&x, x.dims(), rng, |x| Ok(sigmoid(x)), |x, g| {
                sigmoid_backward(&sigmoid(x), g)
            })?;
            one("x", e)
        }
        "logit" => {
            let p = uniform(&[3, 4, 2], 0.1, 0.9, rng);
            let e = projected(&p, p.dims(), rng, |p| logit(p, DEFAULT_EPS), |p, g| {
                logit_backward(p, DEFAULT_EPS, g)
            })?;
            one("p", e)
        }
        "relu" => {
            let x = away_from_zero(&[3, 4, 2], 0.05, rng);
            let e = projected(&x, x.dims(), rng, |x| Ok(relu(x)), relu_backward)?;
            one("x", e)
        }
        "conv2d" => {
            let mut out = Vec::new();
            for (dilation, stride) in [(1, 1), (2, 1), (1, 2), (2, 2)] {
                let x = uniform(&[7, 6, 3], -1.0, 1.0, rng);
                let k = uniform(&[3, 3, 3, 2], -1.0, 1.0, rng);
                let b = uniform(&[2], -1.0, 1.0, rng);
                let y = conv2d(&x, &k, &b, dilation, stride)?;
                let r = uniform(y.dims(), -1.0, 1.0, rng);
                let tag = format!("{name}[d={dilation},s={stride}]");
                let e_x = grad_check(
                    |x| {
                        let back = conv2d_backward(x, &k, dilation, stride, &r)?;
                        Ok((scalar(conv2d(x, &k, &b, dilation, stride)?.dot(&r)?)?, back.input))
                    },
                    &x,
                    GRAD_CHECK_STEP,
                )?;
                let e_k = grad_check(
                    |k| {
                        let back = conv2d_backward(&x, k, dilation, stride, &r)?;
                        Ok((scalar(conv2d(&x, k, &b, dilation, stride)?.dot(&r)?)?, back.kernel))
                    },
                    &k,
                    GRAD_CHECK_STEP,
                )?;
                let e_b = grad_check(
                    |b| {
                        let back = conv2d_backward(&x, &k, dilation, stride, &r)?;
                        Ok((scalar(conv2d(&x, &k, b, dilation, stride)?.dot(&r)?)?, back.bias))
                    },
                    &b,
                    GRAD_CHECK_STEP,
                )?;
                out.push(CheckResult::new(format!("{tag}/input"), e_x));
                out.push(CheckResult::new(format!("{tag}/kernel"), e_k));
                out.push(CheckResult::new(format!("{tag}/bias"), e_b));
            }
            Ok(out)
        }
        "max_pool" => {
            // distinct values on a 0.01 lattice keep every winner unique
            let (h, w, c) = (3, 4, 3);
            let mut levels: Vec<f64> = (0..h * w * c).map(|i| i as f64 * 0.01).collect();
            levels.shuffle(rng);
            let x = Tensor::new(vec![h, w, c], levels)?;
            let e = projected(
                &x,
                &[c],
                rng,
                |x| Ok(global_max_pool(x)?.values),
                |x, g| global_max_pool_backward(x.dims(), &global_max_pool(x)?.argmax, g),
            )?;
            one("x", e)
        }
        "upsample" => {
            let x = uniform(&[3, 4, 2], -1.0, 1.0, rng);
            let e = projected(
                &x,
                &[9, 7, 2],
                rng,
                |x| bilinear_upsample(x, 9, 7),
                |x, g| bilinear_upsample_backward(x.dims(), g),
            )?;
            one("x", e)
        }
        "softmax" => {
            let x = uniform(&[3, 2, 4], -3.0, 3.0, rng);
            let e = projected(&x, x.dims(), rng, |x| Ok(softmax_channel(x)), |x, g| {
                softmax_channel_backward(&softmax_channel(x), g)
            })?;
            one("x", e)
        }
        "soft_filter" | "filter_then_upsample" => {
            let c = 3;
            let seg = uniform(&[3, 4, c], -3.0, 3.0, rng);
            let conf = HolisticConfidence::new(uniform(&[c], -3.0, 3.0, rng))?;
            let mut out = Vec::new();
            let cases: Vec<(String, Option<FilterOrder>)> = if name == "soft_filter" {
                vec![(name.to_string(), None)]
            } else {
                [FilterOrder::FilterThenUpsample, FilterOrder::UpsampleThenFilter]
                    .into_iter()
                    .map(|o| (format!("{name}[{o}]"), Some(o)))
                    .collect()
            };
            for (tag, order) in cases {
                let fwd = |s: &Tensor, b: &HolisticConfidence| match order {
                    None => soft_filter(s, b, DEFAULT_EPS),
                    Some(o) => filter_then_upsample(s, b, 7, 9, DEFAULT_EPS, o),
                };
                let back = |s: &Tensor, b: &HolisticConfidence, g: &Tensor| match order {
                    None => soft_filter_backward(s, b, DEFAULT_EPS, g),
                    Some(o) => filter_then_upsample_backward(s, b, DEFAULT_EPS, o, g),
                };
                let r = uniform(fwd(&seg, &conf)?.dims(), -1.0, 1.0, rng);
                let e_seg = grad_check(
                    |s| Ok((scalar(fwd(s, &conf)?.dot(&r)?)?, back(s, &conf, &r)?.0)),
                    &seg,
                    GRAD_CHECK_STEP,
                )?;
                let e_conf = grad_check(
                    |b| {
                        let b = HolisticConfidence::new(b.clone())?;
                        Ok((scalar(fwd(&seg, &b)?.dot(&r)?)?, back(&seg, &b, &r)?.1))
                    },
                    conf.values(),
                    GRAD_CHECK_STEP,
                )?;
                out.push(CheckResult::new(format!("{tag}/seg"), e_seg));
                out.push(CheckResult::new(format!("{tag}/conf"), e_conf));
            }
            Ok(out)
        }
        "classification_loss" => {
            let z = uniform(&[3, 3, 4], -4.0, 4.0, rng);
            let target = Tensor::from_fn(z.dims(), |_| f64::from(rng.gen_bool(0.5)));
            let e = grad_check(
                |z| {
                    Ok((
                        scalar(classification_loss(z, &target)?)?,
                        classification_loss_backward(z, &target)?,
                    ))
                },
                &z,
                GRAD_CHECK_STEP,
            )?;
            one("map", e)
        }
        "segmentation_loss" => {
            let (h, w, c) = (4, 3, 4);
            let z = uniform(&[h, w, c], -3.0, 3.0, rng);
            let mut truth: Vec<u32> = (0..h * w).map(|_| rng.gen_range(0..c as u32)).collect();
            truth[0] = 255;
            let truth = LabelMap::new(h, w, truth)?;
            let e = grad_check(
                |z| {
                    Ok((
                        scalar(segmentation_loss(z, &truth, 255)?)?,
                        segmentation_loss_backward(z, &truth, 255)?,
                    ))
                },
                &z,
                GRAD_CHECK_STEP,
            )?;
            one("map", e)
        }
        _ => Err(Error::InvalidArgument(format!(
            "unknown op {name:?} (expected one of {})",
            OPS.join(", ")
        ))),
    }
}

pub fn check_all_ops(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for op in OPS {
        out.extend(check_op(op, seed)?);
    }
    Ok(out)
}

/// Network used by [`check_full_net`]: the default structure, slimmed so
/// that every weight can be perturbed quickly, on a 16×16 input.
pub fn full_net_config() -> MicroNetConfig {
    MicroNetConfig {
        num_classes: 4,
        feature_channels: 4,
        hidden: 8,
        patch: 8,
        ..MicroNetConfig::default()
    }
}

pub const FULL_NET_SIZE: usize = 16;

/// Smallest kink margin accepted for a random draw. A perturbation of
/// `GRAD_CHECK_STEP` must not flip any ReLU or max-pool winner.
pub const MIN_KINK_MARGIN: f64 = 10.0 * GRAD_CHECK_STEP;
const MAX_DRAWS: u64 = 2000;
const BIAS_RANGE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct NetCheck {
    /// Total-loss check for every weight tensor.
    pub total: Vec<CheckResult>,
    /// Patch-head checks with `lambda = 0`, where only the soft filter
    /// connects the holistic branch to the loss.
    pub filter_path: Vec<CheckResult>,
    /// Largest patch-head gradient magnitude with `lambda = 0`.
    pub filter_path_grad: f64,
    pub kink_margin: f64,
    /// Number of random weight draws until one cleared [`MIN_KINK_MARGIN`].
    pub draws: u64,
}

impl NetCheck {
    pub fn max_error(&self) -> f64 {
        self.total
            .iter()
            .chain(&self.filter_path)
            .fold(0.0, |m, r| m.max(r.max_error))
    }
}

fn check_weights(
    weights: &Weights,
    config: &MicroNetConfig,
    sample: &TrainSample,
    filter: impl Fn(&str) -> bool,
) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let (_, grads) = loss_and_gradients(weights, config, sample, Variant::Holistic)?;
    for ((name, t), (_, g)) in weights.named().into_iter().zip(grads.named()) {
        if !filter(&name) {
            continue;
        }
        let e = grad_check(
            |probe| {
                let mut w = weights.clone();
                for (n, slot) in w.named_mut() {
                    if n == name {
                        *slot = probe.clone();
                    }
                }
                let (loss, _) = loss_and_gradients(&w, config, sample, Variant::Holistic)?;
                // the analytic gradient is evaluated once, at the unperturbed point
                Ok((scalar(loss.total)?, g.clone()))
            },
            t,
            GRAD_CHECK_STEP,
        )?;
        out.push(CheckResult::new(name, e));
    }
    Ok(out)
}

/// Checks the holistic objective against finite differences for every
/// weight tensor, then repeats the check on the patch head with
/// `lambda = 0` to confirm the soft filter carries gradient into it.
///
/// The input is uniform noise with shapes labels, and biases are drawn
/// alongside the weights; flat images and zero biases leave many ReLU
/// inputs and max-pool runners-up within one step of a kink.
pub fn check_full_net(seed: u64) -> Result<NetCheck> {
    let config = full_net_config();
    let truth = make_shapes_dataset(1, FULL_NET_SIZE, FULL_NET_SIZE, config.num_classes, seed)?
        .remove(0)
        .truth;
    let mut rng = stream(seed, &[name_key("image")]);
    let image = uniform(&[FULL_NET_SIZE, FULL_NET_SIZE, 3], 0.0, 1.0, &mut rng);
    let sample = TrainSample::new(image, truth)?;
    let mut draw = 0;
    let (weights, margin) = loop {
        if draw == MAX_DRAWS {
            return Err(Error::InvalidArgument(format!(
                "no weight draw cleared the kink margin in {MAX_DRAWS} attempts"
            )));
        }
        let draw_seed = crate::rng::derive_seed(seed, &[draw]);
        let mut w = Weights::init(&config, draw_seed)?;
        let mut rng = stream(draw_seed, &[name_key("bias")]);
        for (name, t) in w.named_mut() {
            if name.ends_with(".bias") {
                *t = uniform(t.dims(), -BIAS_RANGE, BIAS_RANGE, &mut rng);
            }
        }
        draw += 1;
        let m = kink_margin(&w, &config, &sample.image)?;
        if m >= MIN_KINK_MARGIN {
            break (w, m);
        }
    };

    let total = check_weights(&weights, &config, &sample, |_| true)?;

    let no_cls = MicroNetConfig {
        lambda: 0.0,
        ..config.clone()
    };
    let filter_path = check_weights(&weights, &no_cls, &sample, |n| n.starts_with("patch."))?;
    let (_, grads) = loss_and_gradients(&weights, &no_cls, &sample, Variant::Holistic)?;
    let filter_path_grad = grads
        .named()
        .into_iter()
        .filter(|(n, _)| n.starts_with("patch."))
        .flat_map(|(_, t)| t.data().to_vec())
        .fold(0.0f64, |m, v| m.max(v.abs()));

    Ok(NetCheck {
        total,
        filter_path,
        filter_path_grad,
        kink_margin: margin,
        draws: draw,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes() {
        let results = check_all_ops(7).unwrap();
        assert!(results.len() >= OPS.len());
        for r in &results {
            assert!(r.max_error < OP_TOLERANCE, "{r:?}");
        }
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let x = Tensor::vector(vec![0.3, -0.2]).unwrap();
        let e = grad_check(
            |x| Ok((scalar(x.dot(x)?)?, x.map(|v| 3.0 * v))),
            &x,
            GRAD_CHECK_STEP,
        )
        .unwrap();
        assert!(e > 0.1);
    }

    #[test]
    fn full_net_passes() {
        let r = check_full_net(3).unwrap();
        assert_eq!(r.total.len(), 12);
        assert_eq!(r.filter_path.len(), 4);
        assert!(r.max_error() < NET_TOLERANCE, "{r:?}");
        assert!(r.filter_path_grad > 0.0);
        assert!(r.kink_margin >= MIN_KINK_MARGIN);
    }

    #[test]
    fn unknown_op() {
        assert!(check_op("tanh", 0).is_err());
    }
}
