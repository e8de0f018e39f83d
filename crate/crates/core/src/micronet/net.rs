use crate::filter::{
    filter_then_upsample, filter_then_upsample_backward, gt_confidence, HolisticConfidence,
};
use crate::tensor::{
    bilinear_upsample, bilinear_upsample_backward, conv2d, conv2d_backward, global_max_pool,
    global_max_pool_backward, relu, relu_backward, MaxPool, Tensor,
};
use crate::Result;

use super::loss::{
    classification_loss, classification_loss_backward, gt_classification_map, segmentation_loss,
    segmentation_loss_backward,
};
use super::{ConvLayer, Head, MicroNetConfig, TrainSample, Variant, Weights};

/// Where the filter's image-level confidences come from.
#[derive(Clone, Debug, PartialEq)]
pub enum ConfidenceSource {
    /// Max-pooled classification map of the patch head.
    Predicted,
    /// Externally supplied confidences, e.g. saturated ground truth.
    Given(HolisticConfidence),
    /// Skip the filter and upsample the segmentation map directly.
    Bypass,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    /// `h×w×c` patch-level label scores.
    pub classification_map: Tensor,
    /// Max-pooled classification map.
    pub holistic_conf: HolisticConfidence,
    /// `h×w×c` pixel scores before filtering.
    pub seg_map: Tensor,
    /// `H×W×c` filtered and upsampled scores.
    pub filtered_full_map: Tensor,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub segmentation: f64,
    pub classification: f64,
    pub total: f64,
}

struct HeadTrace {
    pre: Tensor,
    hidden: Tensor,
    out: Tensor,
}

struct Trace {
    stage_inputs: Vec<Tensor>,
    stage_pre: Vec<Tensor>,
    features: Tensor,
    patch: HeadTrace,
    pixel: HeadTrace,
    pool: MaxPool,
    applied: Option<HolisticConfidence>,
    full: Tensor,
}

fn run_head(head: &Head, input: &Tensor, config: &MicroNetConfig) -> Result<HeadTrace> {
    let pre = conv2d(input, &head.hidden.weight, &head.hidden.bias, config.dilation, 1)?;
    let hidden = relu(&pre);
    let out = conv2d(&hidden, &head.classifier.weight, &head.classifier.bias, 1, 1)?;
    Ok(HeadTrace { pre, hidden, out })
}

fn head_backward(
    head: &Head,
    input: &Tensor,
    trace: &HeadTrace,
    grad_out: &Tensor,
    config: &MicroNetConfig,
) -> Result<(Head, Tensor)> {
    let cls = conv2d_backward(&trace.hidden, &head.classifier.weight, 1, 1, grad_out)?;
    let g_pre = relu_backward(&trace.pre, &cls.input)?;
    let hid = conv2d_backward(input, &head.hidden.weight, config.dilation, 1, &g_pre)?;
    Ok((
        Head {
            hidden: ConvLayer {
                weight: hid.kernel,
                bias: hid.bias,
            },
            classifier: ConvLayer {
                weight: cls.kernel,
                bias: cls.bias,
            },
        },
        hid.input,
    ))
}

fn run(
    weights: &Weights,
    config: &MicroNetConfig,
    image: &Tensor,
    source: &ConfidenceSource,
) -> Result<Trace> {
    config.check_structure()?;
    let (h, w, _) = image.hwc()?;
    config.check_image(h, w)?;

    let mut stage_inputs = Vec::with_capacity(weights.features.len());
    let mut stage_pre = Vec::with_capacity(weights.features.len());
    let mut x = image.clone();
    for layer in &weights.features {
        let pre = conv2d(&x, &layer.weight, &layer.bias, 1, 2)?;
        stage_inputs.push(std::mem::replace(&mut x, relu(&pre)));
        stage_pre.push(pre);
    }
    let features = x;

    let patch = run_head(&weights.patch, &features, config)?;
    let pixel = run_head(&weights.pixel, &features, config)?;
    let pool = global_max_pool(&patch.out)?;

    let applied = match source {
        ConfidenceSource::Predicted => Some(HolisticConfidence::new(pool.values.clone())?),
        ConfidenceSource::Given(conf) => Some(conf.clone()),
        ConfidenceSource::Bypass => None,
    };
    let full = match &applied {
        Some(conf) => filter_then_upsample(&pixel.out, conf, h, w, config.eps, config.filter_order)?,
        None => bilinear_upsample(&pixel.out, h, w)?,
    };
    Ok(Trace {
        stage_inputs,
        stage_pre,
        features,
        patch,
        pixel,
        pool,
        applied,
        full,
    })
}

/// Runs the full two-stream pipeline with confidences from the patch head.
pub fn forward(weights: &Weights, config: &MicroNetConfig, image: &Tensor) -> Result<ForwardOutput> {
    forward_with(weights, config, image, &ConfidenceSource::Predicted)
}

pub fn forward_with(
    weights: &Weights,
    config: &MicroNetConfig,
    image: &Tensor,
    source: &ConfidenceSource,
) -> Result<ForwardOutput> {
    let t = run(weights, config, image, source)?;
    Ok(ForwardOutput {
        classification_map: t.patch.out,
        holistic_conf: HolisticConfidence::new(t.pool.values)?,
        seg_map: t.pixel.out,
        filtered_full_map: t.full,
    })
}

pub(crate) fn source_for(variant: Variant, sample: &TrainSample, config: &MicroNetConfig) -> Result<ConfidenceSource> {
    Ok(match variant {
        Variant::Holistic => ConfidenceSource::Predicted,
        Variant::Baseline => ConfidenceSource::Bypass,
        Variant::HolisticGt => ConfidenceSource::Given(gt_confidence(
            &sample.truth.label_set(Some(config.ignore_label)),
            config.num_classes,
        )?),
    })
}

/// Segmentation loss plus `lambda` times the classification loss, with the
/// learned holistic head driving the filter.
pub fn total_loss(sample: &TrainSample, weights: &Weights, config: &MicroNetConfig) -> Result<f64> {
    let t = run(weights, config, &sample.image, &ConfidenceSource::Predicted)?;
    let seg = segmentation_loss(&t.full, &sample.truth, config.ignore_label)?;
    let target = gt_classification_map(&sample.truth, config)?;
    Ok(seg + config.lambda * classification_loss(&t.patch.out, &target)?)
}

/// Loss terms and the gradient of the variant's training objective.
///
/// `Holistic` optimises `segmentation + lambda · classification`; the other
/// variants optimise the segmentation loss alone (the classification loss
/// is still reported). Tensors that the objective does not reach get zero
/// gradients.
pub fn loss_and_gradients(
    weights: &Weights,
    config: &MicroNetConfig,
    sample: &TrainSample,
    variant: Variant,
) -> Result<(LossBreakdown, Weights)> {
    let source = source_for(variant, sample, config)?;
    let t = run(weights, config, &sample.image, &source)?;

    let seg = segmentation_loss(&t.full, &sample.truth, config.ignore_label)?;
    let target = gt_classification_map(&sample.truth, config)?;
    let cls = classification_loss(&t.patch.out, &target)?;
    let uses_cls = variant == Variant::Holistic;
    let losses = LossBreakdown {
        segmentation: seg,
        classification: cls,
        total: if uses_cls { seg + config.lambda * cls } else { seg },
    };

    let mut grads = weights.zeros_like();
    let g_full = segmentation_loss_backward(&t.full, &sample.truth, config.ignore_label)?;
    let (g_seg, g_conf) = match &t.applied {
        Some(conf) => {
            let (gs, gc) =
                filter_then_upsample_backward(&t.pixel.out, conf, config.eps, config.filter_order, &g_full)?;
            (gs, Some(gc))
        }
        None => (bilinear_upsample_backward(t.pixel.out.dims(), &g_full)?, None),
    };

    let (pixel_grads, mut g_features) =
        head_backward(&weights.pixel, &t.features, &t.pixel, &g_seg, config)?;
    grads.pixel = pixel_grads;

    let mut g_class: Option<Tensor> = None;
    if variant == Variant::Holistic {
        let gc = g_conf.expect("holistic variant always filters");
        g_class = Some(global_max_pool_backward(t.patch.out.dims(), &t.pool.argmax, &gc)?);
    }
    if uses_cls {
        let g_cls = classification_loss_backward(&t.patch.out, &target)?.map(|v| v * config.lambda);
        g_class = Some(match g_class {
            Some(g) => g.zip_map(&g_cls, |a, b| a + b)?,
            None => g_cls,
        });
    }
    if let Some(g_class) = g_class {
        let (patch_grads, g_feat_patch) =
            head_backward(&weights.patch, &t.features, &t.patch, &g_class, config)?;
        grads.patch = patch_grads;
        g_features = g_features.zip_map(&g_feat_patch, |a, b| a + b)?;
    }

    let mut g = g_features;
    for (i, layer) in weights.features.iter().enumerate().rev() {
        let g_pre = relu_backward(&t.stage_pre[i], &g)?;
        let back = conv2d_backward(&t.stage_inputs[i], &layer.weight, 1, 2, &g_pre)?;
        grads.features[i] = ConvLayer {
            weight: back.kernel,
            bias: back.bias,
        };
        g = back.input;
    }
    Ok((losses, grads))
}

/// Smallest distance of any ReLU input from zero, or of any channel's
/// max-pool winner from its runner-up. Finite-difference checks are only
/// meaningful when this exceeds the perturbation size.
pub fn kink_margin(weights: &Weights, config: &MicroNetConfig, image: &Tensor) -> Result<f64> {
    let t = run(weights, config, image, &ConfidenceSource::Predicted)?;
    let mut margin = f64::INFINITY;
    for pre in t.stage_pre.iter().chain([&t.patch.pre, &t.pixel.pre]) {
        margin = pre.data().iter().fold(margin, |m, v| m.min(v.abs()));
    }
    let (h, w, c) = t.patch.out.hwc()?;
    for k in 0..c {
        let best = t.pool.values.data()[k];
        for pos in 0..h * w {
            if pos != t.pool.argmax[k] {
                margin = margin.min(best - t.patch.out.data()[pos * c + k]);
            }
        }
    }
    Ok(margin)
}
