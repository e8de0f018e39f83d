//! Confusion matrices, the four segmentation metrics and label-set
//! precision/recall.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::{Error, Result};

/// Pixel value that never enters counts or losses.
pub const DEFAULT_IGNORE_LABEL: u32 = 255;

/// A dense `height×width` map of class ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u32>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument("label map extents must be positive".into()));
        }
        if data.len() != height * width {
            return Err(Error::DimMismatch(format!(
                "label map {height}×{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, label: u32) -> Self {
        Self {
            height,
            width,
            data: vec![label; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u32] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, label: u32) {
        self.data[y * self.width + x] = label;
    }

    /// Distinct labels present, excluding `ignore_label`.
    pub fn label_set(&self, ignore_label: Option<u32>) -> LabelSet {
        self.data
            .iter()
            .filter(|&&l| Some(l) != ignore_label)
            .map(|&l| l as usize)
            .collect()
    }
}

/// Set of semantic class indices present in (or predicted for) one image.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct LabelSet(BTreeSet<usize>);

impl LabelSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn full(num_classes: usize) -> Self {
        (0..num_classes).collect()
    }

    pub fn insert(&mut self, label: usize) -> bool {
        self.0.insert(label)
    }

    pub fn remove(&mut self, label: usize) -> bool {
        self.0.remove(&label)
    }

    pub fn contains(&self, label: usize) -> bool {
        self.0.contains(&label)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    pub fn intersection_len(&self, other: &LabelSet) -> usize {
        self.0.intersection(&other.0).count()
    }

    pub fn is_superset(&self, other: &LabelSet) -> bool {
        self.0.is_superset(&other.0)
    }

    pub fn max(&self) -> Option<usize> {
        self.0.last().copied()
    }
}

impl FromIterator<usize> for LabelSet {
    fn from_iter<I: IntoIterator<Item = usize>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

/// `counts[i][j]` is the number of pixels of true class `i` predicted as `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::InvalidArgument("class count must be positive".into()));
        }
        Ok(Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        })
    }

    /// Builds a matrix from row-major rows.
    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let c = rows.len();
        let mut cm = Self::new(c)?;
        for (i, row) in rows.iter().enumerate() {
            if row.len() != c {
                return Err(Error::DimMismatch(format!(
                    "row {i} has {} entries, expected {c}",
                    row.len()
                )));
            }
            cm.counts[i * c..][..c].copy_from_slice(row);
        }
        Ok(cm)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.num_classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `t_i`, the number of pixels whose true class is `i`.
    pub fn true_count(&self, class: usize) -> u64 {
        self.counts[class * self.num_classes..][..self.num_classes]
            .iter()
            .sum()
    }

    pub fn predicted_count(&self, class: usize) -> u64 {
        (0..self.num_classes).map(|i| self.get(i, class)).sum()
    }

    pub fn accumulate(
        &mut self,
        predicted: &LabelMap,
        truth: &LabelMap,
        ignore_label: Option<u32>,
    ) -> Result<()> {
        if predicted.height != truth.height || predicted.width != truth.width {
            return Err(Error::DimMismatch(format!(
                "prediction {}×{} vs truth {}×{}",
                predicted.height, predicted.width, truth.height, truth.width
            )));
        }
        let c = self.num_classes;
        let check = |l: u32| {
            if (l as usize) < c {
                Ok(l as usize)
            } else {
                Err(Error::LabelOutOfRange {
                    label: l,
                    num_classes: c,
                })
            }
        };
        // validate before touching counts so a failed call leaves the matrix unchanged
        let mut pairs = Vec::with_capacity(truth.data.len());
        for (&p, &t) in predicted.data.iter().zip(&truth.data) {
            if Some(t) == ignore_label {
                continue;
            }
            pairs.push((check(t)?, check(p)?));
        }
        for (t, p) in pairs {
            self.counts[t * c + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.num_classes != other.num_classes {
            return Err(Error::DimMismatch(format!(
                "merging {} classes with {}",
                self.num_classes, other.num_classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn compute(&self) -> Result<MetricReport> {
        let total = self.total();
        if total == 0 {
            return Err(Error::EmptyMatrix);
        }
        let c = self.num_classes;
        let mut diag_sum = 0u64;
        let mut acc_sum = 0.0;
        let mut acc_classes = 0usize;
        let mut per_class_iu = Vec::with_capacity(c);
        let mut fw = 0.0;
        for i in 0..c {
            let nii = self.get(i, i);
            let ti = self.true_count(i);
            let union = ti + self.predicted_count(i) - nii;
            diag_sum += nii;
            if ti > 0 {
                acc_sum += nii as f64 / ti as f64;
                acc_classes += 1;
            }
            let iu = (union > 0).then(|| nii as f64 / union as f64);
            if let Some(iu) = iu {
                fw += ti as f64 * iu;
            }
            per_class_iu.push(iu);
        }
        let present: Vec<f64> = per_class_iu.iter().flatten().copied().collect();
        Ok(MetricReport {
            pixel_accuracy: diag_sum as f64 / total as f64,
            mean_accuracy: acc_sum / acc_classes as f64,
            mean_iu: present.iter().sum::<f64>() / present.len() as f64,
            frequency_weighted_iu: fw / total as f64,
            valid_classes: present.len(),
            per_class_iu,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub pixel_accuracy: f64,
    pub mean_accuracy: f64,
    pub mean_iu: f64,
    pub frequency_weighted_iu: f64,
    /// `None` for classes that are neither present nor predicted.
    pub per_class_iu: Vec<Option<f64>>,
    pub valid_classes: usize,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "pAcc,mAcc,mIU,fwIU,valid_classes";

    pub fn csv_row(&self) -> String {
        let mut s = String::new();
        write!(
            s,
            "{:.6},{:.6},{:.6},{:.6},{}",
            self.pixel_accuracy,
            self.mean_accuracy,
            self.mean_iu,
            self.frequency_weighted_iu,
            self.valid_classes
        )
        .unwrap();
        s
    }

    /// Header plus a single row, newline terminated.
    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", Self::CSV_HEADER, self.csv_row())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabelSetPR {
    pub precision: f64,
    pub recall: f64,
}

pub fn label_set_pr(predicted: &LabelSet, truth: &LabelSet) -> Result<LabelSetPR> {
    if truth.is_empty() {
        return Err(Error::EmptyLabelSet);
    }
    let hit = predicted.intersection_len(truth) as f64;
    let precision = if predicted.is_empty() {
        0.0
    } else {
        hit / predicted.len() as f64
    };
    Ok(LabelSetPR {
        precision,
        recall: hit / truth.len() as f64,
    })
}
