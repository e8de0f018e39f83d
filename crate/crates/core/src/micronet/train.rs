use std::fmt::Write as _;

use rand::seq::SliceRandom;

use crate::filter::argmax;
use crate::metrics::{ConfusionMatrix, MetricReport};
use crate::rng::stream;
use crate::{Error, Result};

use super::data::augment;
use super::net::{forward_with, loss_and_gradients, source_for, LossBreakdown};
use super::{MicroNetConfig, MicroNetParams, TrainSample, Variant, Weights};

const STREAM_SHUFFLE: u64 = 1;
const STREAM_AUGMENT: u64 = 2;

/// Momentum SGD: `buffer ← momentum·buffer + gradient`, `weight ← weight − lr·buffer`.
pub fn sgd_step(
    params: &mut MicroNetParams,
    gradients: &Weights,
    learning_rate: f64,
    momentum: f64,
) -> Result<()> {
    params.weights.expect_same_layout(gradients)?;
    params.weights.expect_same_layout(&params.momentum)?;
    let grads = gradients.named();
    for (((_, w), (_, buf)), (_, g)) in params
        .weights
        .named_mut()
        .into_iter()
        .zip(params.momentum.named_mut())
        .zip(grads)
    {
        for ((wv, bv), gv) in w.data_mut().iter_mut().zip(buf.data_mut()).zip(g.data()) {
            *bv = momentum * *bv + gv;
            *wv -= learning_rate * *bv;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub segmentation_loss: f64,
    pub classification_loss: f64,
    pub total_loss: f64,
    pub val_miu: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutput {
    pub params: MicroNetParams,
    pub log: Vec<EpochLog>,
}

impl TrainOutput {
    pub const CSV_HEADER: &'static str = "epoch,seg_loss,cls_loss,total,val_mIU";

    pub fn log_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for e in &self.log {
            let val = e.val_miu.map(|v| format!("{v:.6}")).unwrap_or_default();
            writeln!(
                s,
                "{},{:.6},{:.6},{:.6},{}",
                e.epoch, e.segmentation_loss, e.classification_loss, e.total_loss, val
            )
            .unwrap();
        }
        s
    }
}

/// Batch-size-1 momentum SGD over `config.epochs` shuffled passes.
///
/// Weights are initialised from `seed`, so variants trained with the same
/// seed start from identical tensors. Validation mIU is logged after every
/// epoch when `val_set` is nonempty.
pub fn train(
    train_set: &[TrainSample],
    val_set: &[TrainSample],
    config: &MicroNetConfig,
    seed: u64,
    variant: Variant,
) -> Result<TrainOutput> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let mut params = MicroNetParams::init(config, seed)?;
    let mut log = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut stream(seed, &[STREAM_SHUFFLE, epoch as u64]));
        let mut sum = LossBreakdown::default();
        for (step, &i) in order.iter().enumerate() {
            let augmented;
            let sample = if config.augment {
                let mut rng = stream(seed, &[STREAM_AUGMENT, epoch as u64, step as u64]);
                augmented = augment(&train_set[i], &mut rng, config.ignore_label)?;
                &augmented
            } else {
                &train_set[i]
            };
            let (loss, grads) = loss_and_gradients(&params.weights, config, sample, variant)?;
            sgd_step(&mut params, &grads, config.learning_rate, config.momentum)?;
            sum.segmentation += loss.segmentation;
            sum.classification += loss.classification;
            sum.total += loss.total;
        }
        if !params.weights.all_finite() {
            return Err(Error::InvalidArgument(format!(
                "training diverged in epoch {}; lower the learning rate",
                epoch + 1
            )));
        }
        let n = train_set.len() as f64;
        let val_miu = if val_set.is_empty() {
            None
        } else {
            Some(evaluate(&params.weights, config, val_set, variant)?.mean_iu)
        };
        log.push(EpochLog {
            epoch: epoch + 1,
            segmentation_loss: sum.segmentation / n,
            classification_loss: sum.classification / n,
            total_loss: sum.total / n,
            val_miu,
        });
    }
    Ok(TrainOutput { params, log })
}

/// Metrics of the argmax of the variant's full-resolution output.
pub fn evaluate(
    weights: &Weights,
    config: &MicroNetConfig,
    samples: &[TrainSample],
    variant: Variant,
) -> Result<MetricReport> {
    let mut cm = ConfusionMatrix::new(config.num_classes)?;
    for s in samples {
        let source = source_for(variant, s, config)?;
        let out = forward_with(weights, config, &s.image, &source)?;
        cm.accumulate(&argmax(&out.filtered_full_map)?, &s.truth, Some(config.ignore_label))?;
    }
    cm.compute()
}

/// Average loss terms of the variant's objective over `samples`.
pub fn mean_loss(
    weights: &Weights,
    config: &MicroNetConfig,
    samples: &[TrainSample],
    variant: Variant,
) -> Result<LossBreakdown> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no samples".into()));
    }
    let mut sum = LossBreakdown::default();
    for s in samples {
        let (l, _) = loss_and_gradients(weights, config, s, variant)?;
        sum.segmentation += l.segmentation;
        sum.classification += l.classification;
        sum.total += l.total;
    }
    let n = samples.len() as f64;
    Ok(LossBreakdown {
        segmentation: sum.segmentation / n,
        classification: sum.classification / n,
        total: sum.total / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::micronet::make_shapes_dataset;
    use crate::tensor::Tensor;

    fn tiny() -> MicroNetConfig {
        MicroNetConfig {
            num_classes: 3,
            feature_channels: 2,
            hidden: 2,
            ..MicroNetConfig::default()
        }
    }

    #[test]
    fn sgd_plain_and_zero() {
        let cfg = tiny();
        let mut p = MicroNetParams::init(&cfg, 1).unwrap();
        let before = p.clone();
        let zero = p.weights.zeros_like();
        sgd_step(&mut p, &zero, 0.1, 0.9).unwrap();
        assert_eq!(p, before);

        let mut g = p.weights.zeros_like();
        g.pixel.classifier.bias = Tensor::vector(vec![1.0, -2.0, 0.5]).unwrap();
        sgd_step(&mut p, &g, 0.1, 0.0).unwrap();
        let b = p.weights.pixel.classifier.bias.data();
        assert_eq!(b, &[-0.1, 0.2, -0.05]);
    }

    #[test]
    fn sgd_momentum_recurrence() {
        let cfg = tiny();
        let mut p = MicroNetParams::init(&cfg, 1).unwrap();
        let w0 = p.weights.features[0].weight.data()[0];
        let (g1, g2, lr, m) = (0.3, -0.7, 0.05, 0.9);
        for g in [g1, g2] {
            let mut grads = p.weights.zeros_like();
            grads.features[0].weight.data_mut()[0] = g;
            sgd_step(&mut p, &grads, lr, m).unwrap();
        }
        let v1 = g1;
        let v2 = m * v1 + g2;
        let expected = w0 - lr * v1 - lr * v2;
        assert!((p.weights.features[0].weight.data()[0] - expected).abs() < 1e-15);
        assert!((p.momentum.features[0].weight.data()[0] - v2).abs() < 1e-15);
    }

    #[test]
    fn sgd_rejects_layout_mismatch() {
        let mut p = MicroNetParams::init(&tiny(), 1).unwrap();
        let other = Weights::zeros(&MicroNetConfig { num_classes: 4, ..tiny() });
        assert!(sgd_step(&mut p, &other, 0.1, 0.0).is_err());
    }

    #[test]
    fn zero_epochs_leaves_init() {
        let cfg = MicroNetConfig { epochs: 0, ..tiny() };
        let data = make_shapes_dataset(2, 8, 8, 3, 0).unwrap();
        let out = train(&data, &[], &cfg, 5, Variant::Holistic).unwrap();
        assert!(out.log.is_empty());
        assert_eq!(out.params, MicroNetParams::init(&cfg, 5).unwrap());
        assert_eq!(out.log_csv(), "epoch,seg_loss,cls_loss,total,val_mIU\n");
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = MicroNetConfig {
            epochs: 2,
            augment: true,
            learning_rate: 0.01,
            momentum: 0.9,
            ..tiny()
        };
        let data = make_shapes_dataset(4, 8, 8, 3, 0).unwrap();
        let val = make_shapes_dataset(2, 8, 8, 3, 1).unwrap();
        let a = train(&data, &val, &cfg, 9, Variant::Holistic).unwrap();
        let b = train(&data, &val, &cfg, 9, Variant::Holistic).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.log_csv(), b.log_csv());
        assert_eq!(a.log.len(), 2);
        assert!(a.log[0].val_miu.is_some());
        assert!(train(&[], &val, &cfg, 9, Variant::Holistic).is_err());
    }
}
