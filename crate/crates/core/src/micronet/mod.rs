//! A toy two-stream segmentation network small enough to verify end to end.
//!
//! A shared feature net (stride-2 conv + ReLU stages) feeds two heads. The
//! patch head produces a location-aware classification map that is
//! max-pooled into image-level confidences; the pixel head produces the
//! segmentation map. The soft holistic filter combines both before bilinear
//! upsampling to the input resolution.

mod checkpoint;
mod data;
mod loss;
mod net;
mod train;

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::filter::FilterOrder;
use crate::metrics::{LabelMap, DEFAULT_IGNORE_LABEL};
use crate::rng::{name_key, stream};
use crate::tensor::{Tensor, DEFAULT_EPS};
use crate::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, CONFIG_FILE, MANIFEST_FILE};
pub use data::{augment, augment_with, make_shapes_dataset, SCALE_FACTORS};
pub use loss::{
    classification_loss, classification_loss_backward, gt_classification_map,
    segmentation_loss, segmentation_loss_backward,
};
pub use net::{
    forward, forward_with, kink_margin, loss_and_gradients, total_loss, ConfidenceSource,
    ForwardOutput, LossBreakdown,
};
pub use train::{evaluate, mean_loss, sgd_step, train, EpochLog, TrainOutput};

#[derive(Clone, Debug, PartialEq)]
pub struct MicroNetConfig {
    pub num_classes: usize,
    /// Channels of the shared feature map.
    pub feature_channels: usize,
    /// Total downsampling factor; one stride-2 stage per factor of two.
    pub downsample: usize,
    pub kernel: usize,
    pub dilation: usize,
    /// Hidden channels of both heads.
    pub hidden: usize,
    /// Side of the image window each classification-map cell summarises.
    pub patch: usize,
    pub lambda: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub eps: f64,
    pub ignore_label: u32,
    pub augment: bool,
    pub filter_order: FilterOrder,
}

impl Default for MicroNetConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            feature_channels: 8,
            downsample: 4,
            kernel: 3,
            dilation: 2,
            hidden: 32,
            patch: 16,
            lambda: 1.0,
            learning_rate: 0.01,
            momentum: 0.99,
            epochs: 10,
            eps: DEFAULT_EPS,
            ignore_label: DEFAULT_IGNORE_LABEL,
            augment: false,
            filter_order: FilterOrder::FilterThenUpsample,
        }
    }
}

impl MicroNetConfig {
    /// Number of stride-2 feature stages.
    pub fn stages(&self) -> usize {
        self.downsample.trailing_zeros() as usize
    }

    /// Checks the fields the network structure depends on.
    pub fn check_structure(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes == 0 || self.feature_channels == 0 || self.hidden == 0 {
            return bad("class, feature and hidden counts must be positive".into());
        }
        if self.downsample < 2 || !self.downsample.is_power_of_two() {
            return bad(format!(
                "downsample must be a power of two >= 2, got {}",
                self.downsample
            ));
        }
        if self.kernel.is_multiple_of(2) {
            return bad(format!("kernel must be odd, got {}", self.kernel));
        }
        if self.dilation == 0 || self.patch == 0 {
            return bad("dilation and patch must be positive".into());
        }
        if !(self.eps > 0.0 && self.eps < 0.5) {
            return bad(format!("eps must lie in (0, 0.5), got {}", self.eps));
        }
        Ok(())
    }

    /// Full validation, including the optimiser settings.
    pub fn validate(&self) -> Result<()> {
        self.check_structure()?;
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }

    pub(crate) fn check_image(&self, height: usize, width: usize) -> Result<()> {
        if height == 0 || width == 0 || !height.is_multiple_of(self.downsample) || !width.is_multiple_of(self.downsample)
        {
            return Err(Error::DimMismatch(format!(
                "image {height}×{width} is not divisible by downsample {}",
                self.downsample
            )));
        }
        Ok(())
    }
}

/// Which training objective and filtering path to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Learned holistic head, segmentation + lambda · classification loss.
    Holistic,
    /// No filter: the segmentation map is upsampled directly.
    Baseline,
    /// Ground-truth image labels replace the holistic head.
    HolisticGt,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Holistic => "holistic",
            Variant::Baseline => "baseline",
            Variant::HolisticGt => "holistic_gt",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "holistic" => Ok(Variant::Holistic),
            "baseline" => Ok(Variant::Baseline),
            "holistic_gt" => Ok(Variant::HolisticGt),
            _ => Err(Error::Config(format!(
                "unknown variant {s:?} (expected holistic, baseline or holistic_gt)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvLayer {
    fn zeros(k: usize, cin: usize, cout: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[k, k, cin, cout]),
            bias: Tensor::zeros(&[cout]),
        }
    }
}

/// Dilated conv + ReLU followed by a 1×1 classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub hidden: ConvLayer,
    pub classifier: ConvLayer,
}

/// Every learnable tensor of the network. Also used for gradients and
/// momentum buffers, which share the layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights {
    pub features: Vec<ConvLayer>,
    pub patch: Head,
    pub pixel: Head,
}

impl Weights {
    pub fn zeros(config: &MicroNetConfig) -> Self {
        let (k, f, d, c) = (
            config.kernel,
            config.feature_channels,
            config.hidden,
            config.num_classes,
        );
        let features = (0..config.stages())
            .map(|i| ConvLayer::zeros(3, if i == 0 { 3 } else { f }, f))
            .collect();
        let head = || Head {
            hidden: ConvLayer::zeros(k, f, d),
            classifier: ConvLayer::zeros(1, d, c),
        };
        Self {
            features,
            patch: head(),
            pixel: head(),
        }
    }

    /// Centered uniform weights with half-width `1/sqrt(fan_in)` and zero
    /// biases. Each tensor draws from its own stream keyed by name, so two
    /// networks built from the same seed share every tensor regardless of
    /// which parts a variant uses.
    pub fn init(config: &MicroNetConfig, seed: u64) -> Result<Self> {
        config.check_structure()?;
        let mut w = Self::zeros(config);
        for (name, t) in w.named_mut() {
            if name.ends_with(".bias") {
                continue;
            }
            let d = t.dims();
            let fan_in = (d[0] * d[1] * d[2]) as f64;
            let a = 1.0 / fan_in.sqrt();
            let mut rng = stream(seed, &[name_key(&name)]);
            for v in t.data_mut() {
                *v = rng.gen_range(-a..a);
            }
        }
        Ok(w)
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.named_mut() {
            t.data_mut().fill(0.0);
        }
        z
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.features.iter().enumerate() {
            out.push((format!("features.{i}.weight"), &l.weight));
            out.push((format!("features.{i}.bias"), &l.bias));
        }
        for (head, h) in [("patch", &self.patch), ("pixel", &self.pixel)] {
            for (part, l) in [("hidden", &h.hidden), ("classifier", &h.classifier)] {
                out.push((format!("{head}.{part}.weight"), &l.weight));
                out.push((format!("{head}.{part}.bias"), &l.bias));
            }
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.features.iter_mut().enumerate() {
            out.push((format!("features.{i}.weight"), &mut l.weight));
            out.push((format!("features.{i}.bias"), &mut l.bias));
        }
        for (head, h) in [("patch", &mut self.patch), ("pixel", &mut self.pixel)] {
            for (part, l) in [("hidden", &mut h.hidden), ("classifier", &mut h.classifier)] {
                out.push((format!("{head}.{part}.weight"), &mut l.weight));
                out.push((format!("{head}.{part}.bias"), &mut l.bias));
            }
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.all_finite())
    }

    pub(crate) fn expect_same_layout(&self, other: &Weights) -> Result<()> {
        let (a, b) = (self.named(), other.named());
        if a.len() != b.len() {
            return Err(Error::DimMismatch(format!(
                "{} tensors vs {}",
                a.len(),
                b.len()
            )));
        }
        for ((na, ta), (_, tb)) in a.iter().zip(&b) {
            if ta.dims() != tb.dims() {
                return Err(Error::DimMismatch(format!(
                    "{na}: {:?} vs {:?}",
                    ta.dims(),
                    tb.dims()
                )));
            }
        }
        Ok(())
    }
}

/// Weights plus the SGD momentum buffer for each of them.
#[derive(Clone, Debug, PartialEq)]
pub struct MicroNetParams {
    pub weights: Weights,
    pub momentum: Weights,
}

impl MicroNetParams {
    pub fn init(config: &MicroNetConfig, seed: u64) -> Result<Self> {
        let weights = Weights::init(config, seed)?;
        let momentum = weights.zeros_like();
        Ok(Self { weights, momentum })
    }

    pub fn from_weights(weights: Weights) -> Self {
        let momentum = weights.zeros_like();
        Self { weights, momentum }
    }
}

/// One training image with its pixel labels.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub image: Tensor,
    pub truth: LabelMap,
}

impl TrainSample {
    pub fn new(image: Tensor, truth: LabelMap) -> Result<Self> {
        let (h, w, ch) = image.hwc()?;
        if ch != 3 || truth.height() != h || truth.width() != w {
            return Err(Error::DimMismatch(format!(
                "image {h}×{w}×{ch} vs truth {}×{}",
                truth.height(),
                truth.width()
            )));
        }
        Ok(Self { image, truth })
    }

    pub fn height(&self) -> usize {
        self.truth.height()
    }

    pub fn width(&self) -> usize {
        self.truth.width()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        let ok = MicroNetConfig::default();
        ok.validate().unwrap();
        assert_eq!(ok.stages(), 2);
        for bad in [
            MicroNetConfig { kernel: 2, ..ok.clone() },
            MicroNetConfig { downsample: 3, ..ok.clone() },
            MicroNetConfig { downsample: 1, ..ok.clone() },
            MicroNetConfig { lambda: 0.0, ..ok.clone() },
            MicroNetConfig { momentum: 1.0, ..ok.clone() },
            MicroNetConfig { eps: 0.0, ..ok.clone() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
        assert!(ok.check_image(16, 12).is_ok());
        assert!(ok.check_image(16, 10).is_err());
    }

    #[test]
    fn weights_layout_and_init() {
        let cfg = MicroNetConfig::default();
        let w = Weights::init(&cfg, 3).unwrap();
        let names: Vec<String> = w.named().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.len(), 2 * 2 + 8);
        assert_eq!(names[0], "features.0.weight");
        assert_eq!(names.last().unwrap(), "pixel.classifier.bias");
        assert_eq!(w.patch.hidden.weight.dims(), &[3, 3, 8, 32]);
        assert_eq!(w.pixel.classifier.weight.dims(), &[1, 1, 32, 4]);
        let a = 1.0 / (27f64).sqrt();
        assert!(w.features[0].weight.data().iter().all(|v| v.abs() < a));
        assert!(w.features[0].bias.data().iter().all(|&v| v == 0.0));
        assert_eq!(Weights::init(&cfg, 3).unwrap(), w);
        assert_ne!(Weights::init(&cfg, 4).unwrap(), w);
        assert_ne!(w.patch.hidden.weight, w.pixel.hidden.weight);
    }

    #[test]
    fn variant_names() {
        for v in [Variant::Holistic, Variant::Baseline, Variant::HolisticGt] {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
        assert!("fcn".parse::<Variant>().is_err());
    }
}
