//! Label-set contamination and the precision/recall grid.
//!
//! Ground-truth label sets are degraded by removing `n_r` true labels and
//! adding `n_p` spurious ones per image. Fractional parts apply one extra
//! removal (or addition) to that fraction of the images. Each degraded set
//! drives a hard filter over the image's score map, and the resulting
//! metrics are collected per `(n_p, n_r)` cell.
//!
//! Randomness is keyed on `(seed, role, image index)` only, so every grid
//! cell sees the same label orderings: the labels removed at `n_r = 2` are a
//! subset of those removed at `n_r = 3`. Records therefore do not depend on
//! iteration order or on how cells are scheduled across threads.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::filter::{argmax, hard_filter_argmax, ScoreMapSet};
use crate::io::encode_ppm;
use crate::metrics::{label_set_pr, ConfusionMatrix, LabelSet, MetricReport};
use crate::rng::stream;
use crate::{Error, Result};

const ROLE_PICK_REMOVE: u64 = 1;
const ROLE_PICK_ADD: u64 = 2;
const ROLE_REMOVE: u64 = 3;
const ROLE_ADD: u64 = 4;

/// Grid values used when none are given: `0, 0.2, 0.4, 0.6, 0.8, 1, 2, ..., 10`.
pub fn default_grid() -> Vec<f64> {
    [0.0, 0.2, 0.4, 0.6, 0.8]
        .into_iter()
        .chain((1..=10).map(f64::from))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContaminationSpec {
    /// Spurious labels added per image (`n_p`).
    pub added: f64,
    /// True labels removed per image (`n_r`).
    pub removed: f64,
    pub seed: u64,
}

impl ContaminationSpec {
    pub fn new(added: f64, removed: f64, seed: u64) -> Result<Self> {
        for (name, v) in [("n_p", added), ("n_r", removed)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be a nonnegative finite number, got {v}"
                )));
            }
        }
        Ok(Self {
            added,
            removed,
            seed,
        })
    }
}

/// Per-image counts: `floor(v)` everywhere plus one on a seeded
/// `round(frac(v) * n)` subset of images.
fn per_image_counts(value: f64, n: usize, seed: u64, role: u64) -> Vec<usize> {
    let base = value.floor() as usize;
    let extra = ((value - value.floor()) * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, &[role]));
    let mut counts = vec![base; n];
    for &i in &order[..extra.min(n)] {
        counts[i] += 1;
    }
    counts
}

pub fn contaminate(
    truth_sets: &[LabelSet],
    spec: &ContaminationSpec,
    num_classes: usize,
) -> Result<Vec<LabelSet>> {
    let spec = ContaminationSpec::new(spec.added, spec.removed, spec.seed)?;
    let n = truth_sets.len();
    let removals = per_image_counts(spec.removed, n, spec.seed, ROLE_PICK_REMOVE);
    let additions = per_image_counts(spec.added, n, spec.seed, ROLE_PICK_ADD);

    truth_sets
        .iter()
        .enumerate()
        .map(|(i, truth)| {
            if truth.is_empty() {
                return Err(Error::Contamination(format!(
                    "image {i} has an empty ground-truth label set"
                )));
            }
            if let Some(max) = truth.max().filter(|&m| m >= num_classes) {
                return Err(Error::LabelOutOfRange {
                    label: max as u32,
                    num_classes,
                });
            }
            let mut present: Vec<usize> = truth.iter().collect();
            present.shuffle(&mut stream(spec.seed, &[ROLE_REMOVE, i as u64]));
            let drop = removals[i].min(present.len());
            let mut out: LabelSet = present[drop..].iter().copied().collect();

            let mut absent: Vec<usize> = (0..num_classes).filter(|&k| !truth.contains(k)).collect();
            if additions[i] > absent.len() {
                return Err(Error::Contamination(format!(
                    "image {i} needs {} noisy labels but only {} of {num_classes} classes are absent",
                    additions[i],
                    absent.len()
                )));
            }
            absent.shuffle(&mut stream(spec.seed, &[ROLE_ADD, i as u64]));
            for &k in &absent[..additions[i]] {
                out.insert(k);
            }
            Ok(out)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridRecord {
    pub added: f64,
    pub removed: f64,
    pub precision: f64,
    pub recall: f64,
    pub report: MetricReport,
    /// Images whose contaminated set came out empty and were filtered with
    /// the full label set instead.
    pub empty_set_fallbacks: usize,
}

impl GridRecord {
    pub const CSV_HEADER: &'static str =
        "n_p,n_r,precision,recall,pAcc,mAcc,mIU,fwIU,empty_set_fallbacks";

    pub fn csv_row(&self) -> String {
        let r = &self.report;
        format!(
            "{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            self.added,
            self.removed,
            self.precision,
            self.recall,
            r.pixel_accuracy,
            r.mean_accuracy,
            r.mean_iu,
            r.frequency_weighted_iu,
            self.empty_set_fallbacks
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridOutput {
    pub records: Vec<GridRecord>,
    /// Metrics of the unfiltered argmax prediction.
    pub baseline: MetricReport,
}

impl GridOutput {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(GridRecord::CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            writeln!(s, "{}", r.csv_row()).unwrap();
        }
        s
    }
}

/// Evaluates hard filtering for every `(n_p, n_r)` pair.
///
/// Records are ordered with `n_p` as the outer loop.
pub fn run_grid(
    data: &[ScoreMapSet],
    added_values: &[f64],
    removed_values: &[f64],
    seed: u64,
    ignore_label: Option<u32>,
) -> Result<GridOutput> {
    let first = data
        .first()
        .ok_or_else(|| Error::InvalidArgument("grid needs at least one image".into()))?;
    let c = first.num_classes();
    if let Some(bad) = data.iter().position(|d| d.num_classes() != c) {
        return Err(Error::DimMismatch(format!(
            "image {bad} has {} classes, expected {c}",
            data[bad].num_classes()
        )));
    }
    if added_values.is_empty() || removed_values.is_empty() {
        return Err(Error::InvalidArgument("grid value lists must be nonempty".into()));
    }
    let truth_sets: Vec<LabelSet> = data.iter().map(|d| d.truth.label_set(ignore_label)).collect();

    let mut baseline = ConfusionMatrix::new(c)?;
    for d in data {
        baseline.accumulate(&argmax(&d.scores)?, &d.truth, ignore_label)?;
    }

    let cells: Vec<(f64, f64)> = added_values
        .iter()
        .flat_map(|&a| removed_values.iter().map(move |&r| (a, r)))
        .collect();
    let records = cells
        .par_iter()
        .map(|&(added, removed)| {
            let spec = ContaminationSpec::new(added, removed, seed)?;
            let sets = contaminate(&truth_sets, &spec, c)?;
            let mut cm = ConfusionMatrix::new(c)?;
            let (mut p_sum, mut r_sum, mut fallbacks) = (0.0, 0.0, 0);
            for ((d, set), truth) in data.iter().zip(&sets).zip(&truth_sets) {
                let pr = label_set_pr(set, truth)?;
                p_sum += pr.precision;
                r_sum += pr.recall;
                let pred = if set.is_empty() {
                    fallbacks += 1;
                    argmax(&d.scores)?
                } else {
                    hard_filter_argmax(&d.scores, set)?
                };
                cm.accumulate(&pred, &d.truth, ignore_label)?;
            }
            let n = data.len() as f64;
            Ok(GridRecord {
                added,
                removed,
                precision: p_sum / n,
                recall: r_sum / n,
                report: cm.compute()?,
                empty_set_fallbacks: fallbacks,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(GridOutput {
        records,
        baseline: baseline.compute()?,
    })
}

/// Which record field a heatmap shows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetricField {
    PixelAccuracy,
    MeanAccuracy,
    MeanIu,
    FrequencyWeightedIu,
    Precision,
    Recall,
}

impl MetricField {
    pub fn name(self) -> &'static str {
        match self {
            Self::PixelAccuracy => "pAcc",
            Self::MeanAccuracy => "mAcc",
            Self::MeanIu => "mIU",
            Self::FrequencyWeightedIu => "fwIU",
            Self::Precision => "precision",
            Self::Recall => "recall",
        }
    }

    pub fn of_record(self, r: &GridRecord) -> f64 {
        match self {
            Self::Precision => r.precision,
            Self::Recall => r.recall,
            other => other.of_report(&r.report).unwrap_or(f64::NAN),
        }
    }

    /// The field's value in a plain metric report, if it has one.
    pub fn of_report(self, r: &MetricReport) -> Option<f64> {
        match self {
            Self::PixelAccuracy => Some(r.pixel_accuracy),
            Self::MeanAccuracy => Some(r.mean_accuracy),
            Self::MeanIu => Some(r.mean_iu),
            Self::FrequencyWeightedIu => Some(r.frequency_weighted_iu),
            Self::Precision | Self::Recall => None,
        }
    }
}

impl FromStr for MetricField {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "pAcc" => Self::PixelAccuracy,
            "mAcc" => Self::MeanAccuracy,
            "mIU" => Self::MeanIu,
            "fwIU" => Self::FrequencyWeightedIu,
            "precision" => Self::Precision,
            "recall" => Self::Recall,
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "unknown metric {s:?} (expected pAcc, mAcc, mIU, fwIU, precision or recall)"
                )))
            }
        })
    }
}

/// Color-mapped grid: one pixel per cell, columns follow ascending `n_p`,
/// rows follow ascending `n_r`.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub metric: MetricField,
    pub added_axis: Vec<f64>,
    pub removed_axis: Vec<f64>,
    /// Row-major values, `removed_axis.len()` rows.
    pub values: Vec<f64>,
    pub rgb: Vec<u8>,
    pub min: f64,
    pub max: f64,
    pub baseline: Option<f64>,
}

impl Heatmap {
    pub fn width(&self) -> usize {
        self.added_axis.len()
    }

    pub fn height(&self) -> usize {
        self.removed_axis.len()
    }

    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.width() + col) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    /// Binary PPM with the metric, range and baseline in header comments.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut comments = vec![
            format!("metric={}", self.metric.name()),
            format!("min={:.6} max={:.6}", self.min, self.max),
        ];
        if let Some(b) = self.baseline {
            comments.push(format!("baseline={b:.6}"));
        }
        let axis = |v: &[f64]| v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(",");
        comments.push(format!("n_p={}", axis(&self.added_axis)));
        comments.push(format!("n_r={}", axis(&self.removed_axis)));
        encode_ppm(self.width(), self.height(), &self.rgb, &comments)
    }
}

const RAMP_LOW: [f64; 3] = [68.0, 1.0, 84.0];
const RAMP_HIGH: [f64; 3] = [253.0, 231.0, 37.0];

/// Two-stop ramp: red and green rise, blue falls with `t`.
pub fn ramp_color(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let mut out = [0u8; 3];
    for (o, (lo, hi)) in out.iter_mut().zip(RAMP_LOW.iter().zip(RAMP_HIGH)) {
        *o = (lo + (hi - lo) * t).round() as u8;
    }
    out
}

fn sorted_axis(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

pub fn render_surface(
    records: &[GridRecord],
    metric: MetricField,
    baseline: Option<f64>,
) -> Result<Heatmap> {
    if records.is_empty() {
        return Err(Error::RaggedGrid("no records".into()));
    }
    let added_axis = sorted_axis(records.iter().map(|r| r.added));
    let removed_axis = sorted_axis(records.iter().map(|r| r.removed));
    let (w, h) = (added_axis.len(), removed_axis.len());
    if records.len() != w * h {
        return Err(Error::RaggedGrid(format!(
            "{} records do not fill a {w}×{h} grid",
            records.len()
        )));
    }
    let mut values = vec![None; w * h];
    for r in records {
        let col = added_axis.iter().position(|&a| a == r.added).unwrap();
        let row = removed_axis.iter().position(|&a| a == r.removed).unwrap();
        if values[row * w + col].replace(metric.of_record(r)).is_some() {
            return Err(Error::RaggedGrid(format!(
                "duplicate cell n_p={}, n_r={}",
                r.added, r.removed
            )));
        }
    }
    let values: Vec<f64> = values.into_iter().map(|v| v.unwrap()).collect();
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let rgb = values
        .iter()
        .flat_map(|&v| ramp_color(if span > 0.0 { (v - min) / span } else { 0.0 }))
        .collect();
    Ok(Heatmap {
        metric,
        added_axis,
        removed_axis,
        values,
        rgb,
        min,
        max,
        baseline,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::LabelMap;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set(v: &[usize]) -> LabelSet {
        v.iter().copied().collect()
    }

    fn noisy_images(n: usize, c: usize, seed: u64) -> Vec<ScoreMapSet> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let classes: Vec<u32> = (0..3).map(|_| rng.gen_range(0..c as u32)).collect();
                let truth: Vec<u32> = (0..64).map(|p| classes[p * 3 / 64]).collect();
                let scores = Tensor::from_fn(&[8, 8, c], |i| {
                    let (p, k) = (i / c, i % c);
                    let hit = if truth[p] as usize == k { 2.0 } else { 0.0 };
                    hit + rng.gen_range(-1.5..1.5)
                });
                ScoreMapSet::new(scores, LabelMap::new(8, 8, truth).unwrap()).unwrap()
            })
            .collect()
    }

    #[test]
    fn identity_spec_is_noop() {
        let sets = vec![set(&[0, 1]), set(&[2]), set(&[1, 3, 4])];
        let spec = ContaminationSpec::new(0.0, 0.0, 9).unwrap();
        assert_eq!(contaminate(&sets, &spec, 6).unwrap(), sets);
    }

    #[test]
    fn single_image_precision_recall() {
        let truth = vec![set(&[1, 2, 3])];
        for seed in 0..20 {
            let spec = ContaminationSpec::new(2.0, 1.0, seed).unwrap();
            let out = contaminate(&truth, &spec, 10).unwrap();
            let pr = label_set_pr(&out[0], &truth[0]).unwrap();
            assert_eq!(pr.recall, 2.0 / 3.0);
            assert_eq!(pr.precision, 0.5);
        }
    }

    #[test]
    fn fractional_removal_counts() {
        let truth: Vec<LabelSet> = (0..10).map(|_| set(&[0, 1, 2, 3, 4])).collect();
        for seed in 0..10 {
            let spec = ContaminationSpec::new(0.0, 2.3, seed).unwrap();
            let out = contaminate(&truth, &spec, 8).unwrap();
            let lost: Vec<usize> = out.iter().map(|s| 5 - s.len()).collect();
            assert_eq!(lost.iter().filter(|&&l| l == 3).count(), 3);
            assert_eq!(lost.iter().filter(|&&l| l == 2).count(), 7);
        }
    }

    #[test]
    fn removal_caps_at_set_size() {
        let out = contaminate(
            &[set(&[4, 5])],
            &ContaminationSpec::new(0.0, 7.0, 1).unwrap(),
            8,
        )
        .unwrap();
        assert!(out[0].is_empty());
    }

    #[test]
    fn contamination_errors() {
        let spec = ContaminationSpec::new(3.0, 0.0, 1).unwrap();
        assert!(matches!(
            contaminate(&[set(&[0, 1])], &spec, 4),
            Err(Error::Contamination(_))
        ));
        assert!(contaminate(&[LabelSet::new()], &ContaminationSpec::new(0.0, 0.0, 1).unwrap(), 4).is_err());
        assert!(ContaminationSpec::new(-1.0, 0.0, 0).is_err());
        assert!(ContaminationSpec::new(0.0, f64::NAN, 0).is_err());
    }

    #[test]
    fn grid_origin_matches_gt_filtering() {
        let data = noisy_images(12, 6, 1);
        let out = run_grid(&data, &[0.0], &[0.0], 5, None).unwrap();
        assert_eq!(out.records.len(), 1);
        let rec = &out.records[0];
        assert_eq!((rec.precision, rec.recall), (1.0, 1.0));
        let mut cm = ConfusionMatrix::new(6).unwrap();
        for d in &data {
            cm.accumulate(&hard_filter_argmax(&d.scores, &d.truth.label_set(None)).unwrap(), &d.truth, None)
                .unwrap();
        }
        assert_eq!(rec.report, cm.compute().unwrap());
        assert!(rec.report.pixel_accuracy >= out.baseline.pixel_accuracy);
    }

    #[test]
    fn grid_recall_and_determinism() {
        let data = noisy_images(20, 12, 2);
        let grid = [0.0, 0.4, 1.0, 2.0];
        let a = run_grid(&data, &grid, &grid, 17, None).unwrap();
        let b = run_grid(&data, &grid, &grid, 17, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_csv(), b.to_csv());
        assert_eq!(a.records.len(), 16);
        for r in &a.records {
            if r.removed == 0.0 {
                assert_eq!(r.recall, 1.0);
                assert!(r.report.pixel_accuracy >= a.baseline.pixel_accuracy);
            }
            assert!((0.0..=1.0).contains(&r.precision) && (0.0..=1.0).contains(&r.recall));
        }
        assert!(a.to_csv().starts_with(GridRecord::CSV_HEADER));
    }

    fn record(added: f64, removed: f64, miu: f64) -> GridRecord {
        GridRecord {
            added,
            removed,
            precision: 1.0,
            recall: 1.0,
            report: MetricReport {
                pixel_accuracy: miu,
                mean_accuracy: miu,
                mean_iu: miu,
                frequency_weighted_iu: miu,
                per_class_iu: vec![],
                valid_classes: 0,
            },
            empty_set_fallbacks: 0,
        }
    }

    #[test]
    fn heatmap_shapes_and_extremes() {
        let one = render_surface(&[record(0.0, 0.0, 0.4)], MetricField::MeanIu, Some(0.3)).unwrap();
        assert_eq!((one.width(), one.height(), one.rgb.len()), (1, 1, 3));

        let column: Vec<_> = (0..5).map(|i| record(0.0, i as f64, 1.0 - 0.1 * i as f64)).collect();
        let hm = render_surface(&column, MetricField::MeanIu, None).unwrap();
        for row in 1..5 {
            let (a, b) = (hm.pixel(row - 1, 0), hm.pixel(row, 0));
            assert!(b[0] <= a[0] && b[1] <= a[1] && b[2] >= a[2]);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let grid: Vec<_> = (0..5)
            .flat_map(|a| (0..5).map(move |r| (a, r)))
            .map(|(a, r)| record(a as f64, r as f64, rng.gen_range(0.0..1.0)))
            .collect();
        let hm = render_surface(&grid, MetricField::MeanIu, None).unwrap();
        let lo = grid.iter().map(|r| r.report.mean_iu).fold(f64::INFINITY, f64::min);
        let hi = grid.iter().map(|r| r.report.mean_iu).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!((hm.min, hm.max), (lo, hi));
        for r in &grid {
            let px = hm.pixel(r.removed as usize, r.added as usize);
            if r.report.mean_iu == lo {
                assert_eq!(px, ramp_color(0.0));
            }
            if r.report.mean_iu == hi {
                assert_eq!(px, ramp_color(1.0));
            }
        }
    }

    #[test]
    fn heatmap_rejects_ragged_grids() {
        let ragged = vec![record(0.0, 0.0, 0.1), record(1.0, 0.0, 0.1), record(0.0, 1.0, 0.1)];
        assert!(matches!(
            render_surface(&ragged, MetricField::MeanIu, None),
            Err(Error::RaggedGrid(_))
        ));
        let dup = vec![record(0.0, 0.0, 0.1), record(0.0, 0.0, 0.2)];
        assert!(render_surface(&dup, MetricField::MeanIu, None).is_err());
    }

    #[test]
    fn metric_names_round_trip() {
        for m in [
            MetricField::PixelAccuracy,
            MetricField::MeanAccuracy,
            MetricField::MeanIu,
            MetricField::FrequencyWeightedIu,
            MetricField::Precision,
            MetricField::Recall,
        ] {
            assert_eq!(m.name().parse::<MetricField>().unwrap(), m);
        }
        assert!("IoU".parse::<MetricField>().is_err());
    }
}
