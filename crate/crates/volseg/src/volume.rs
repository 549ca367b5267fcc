//! Core data model: volumes, label maps, logit maps, subject time series,
//! and cross-validation splits.
//!
//! All types are immutable after construction and validate their invariants
//! in the constructor. Grids are stored in C order with axes (H, W, D).

use std::collections::BTreeMap;

use ndarray::{Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VolsegError};

/// One scalar 3D image frame with voxel spacing in mm.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    data: Array3<f64>,
    spacing: [f64; 3],
}

impl Volume3D {
    pub fn new(data: Array3<f64>, spacing: [f64; 3]) -> Result<Self> {
        let dim = data.dim();
        if dim.0 < 1 || dim.1 < 1 || dim.2 < 1 {
            return Err(VolsegError::Validation(format!(
                "volume dimensions must be >= 1, got {:?}",
                dim
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(VolsegError::Validation(
                "volume contains non-finite intensities".into(),
            ));
        }
        if !spacing.iter().all(|s| *s > 0.0 && s.is_finite()) {
            return Err(VolsegError::Validation(format!(
                "spacing components must be positive, got {:?}",
                spacing
            )));
        }
        Ok(Self { data, spacing })
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    /// Min-max normalization to [0, 1]. Constant volumes map to all zeros.
    ///
    /// Idempotent: a volume whose minimum is exactly 0.0 and maximum exactly
    /// 1.0 is returned unchanged bit for bit.
    pub fn normalized(&self) -> Volume3D {
        let min = self.data.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max <= min {
            return Volume3D {
                data: Array3::zeros(self.data.dim()),
                spacing: self.spacing,
            };
        }
        let range = max - min;
        Volume3D {
            data: self.data.mapv(|v| (v - min) / range),
            spacing: self.spacing,
        }
    }
}

/// Integer segmentation grid with values in {0, ..., num_classes - 1}.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    data: Array3<u8>,
    num_classes: usize,
}

impl LabelMap {
    pub fn new(data: Array3<u8>, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(VolsegError::Validation(format!(
                "num_classes must be >= 2, got {}",
                num_classes
            )));
        }
        if let Some(v) = data.iter().find(|v| (**v as usize) >= num_classes) {
            return Err(VolsegError::Validation(format!(
                "label value {} out of range for {} classes",
                v, num_classes
            )));
        }
        Ok(Self { data, num_classes })
    }

    pub fn binary(data: Array3<u8>) -> Result<Self> {
        Self::new(data, 2)
    }

    pub fn data(&self) -> &Array3<u8> {
        &self.data
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    /// Number of foreground (non-zero) voxels.
    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|v| **v != 0).count()
    }
}

/// Per-class pre-softmax prediction volume, shape (C, H, W, D).
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMap {
    data: Array4<f64>,
}

impl LogitMap {
    pub fn new(data: Array4<f64>) -> Result<Self> {
        if data.dim().0 < 2 {
            return Err(VolsegError::Validation(
                "logit map needs at least 2 class channels".into(),
            ));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(VolsegError::Validation(
                "logit map contains non-finite values".into(),
            ));
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.data
    }

    pub fn num_classes(&self) -> usize {
        self.data.dim().0
    }

    pub fn spatial_shape(&self) -> (usize, usize, usize) {
        let d = self.data.dim();
        (d.1, d.2, d.3)
    }

    /// Softmax over the class axis.
    pub fn softmax(&self) -> Array4<f64> {
        softmax_over_classes(&self.data)
    }
}

/// Softmax along axis 0 of a (C, H, W, D) array.
pub fn softmax_over_classes(logits: &Array4<f64>) -> Array4<f64> {
    let mut out = logits.clone();
    let (c, h, w, d) = logits.dim();
    for i in 0..h {
        for j in 0..w {
            for k in 0..d {
                let mut max = f64::NEG_INFINITY;
                for ch in 0..c {
                    max = max.max(out[[ch, i, j, k]]);
                }
                let mut sum = 0.0;
                for ch in 0..c {
                    let e = (out[[ch, i, j, k]] - max).exp();
                    out[[ch, i, j, k]] = e;
                    sum += e;
                }
                for ch in 0..c {
                    out[[ch, i, j, k]] /= sum;
                }
            }
        }
    }
    out
}

/// Per-voxel argmax over classes; ties break toward the lower class index.
pub fn logits_to_labels(logits: &LogitMap) -> LabelMap {
    let (c, h, w, d) = logits.data.dim();
    let mut out = Array3::<u8>::zeros((h, w, d));
    for i in 0..h {
        for j in 0..w {
            for k in 0..d {
                let mut best = 0usize;
                let mut best_v = logits.data[[0, i, j, k]];
                for ch in 1..c {
                    let v = logits.data[[ch, i, j, k]];
                    if v > best_v {
                        best_v = v;
                        best = ch;
                    }
                }
                out[[i, j, k]] = best as u8;
            }
        }
    }
    LabelMap {
        data: out,
        num_classes: c,
    }
}

/// Ordered frames of one subject plus sparse ground-truth label maps.
#[derive(Debug, Clone)]
pub struct TimeSeries {
    subject_id: String,
    frames: Vec<Volume3D>,
    labels: BTreeMap<usize, LabelMap>,
}

impl TimeSeries {
    pub fn new(
        subject_id: String,
        frames: Vec<Volume3D>,
        labels: BTreeMap<usize, LabelMap>,
    ) -> Result<Self> {
        if frames.len() < 2 {
            return Err(VolsegError::Validation(format!(
                "time series needs >= 2 frames, got {}",
                frames.len()
            )));
        }
        let shape = frames[0].shape();
        let spacing = frames[0].spacing();
        for (t, f) in frames.iter().enumerate() {
            if f.shape() != shape {
                return Err(VolsegError::Validation(format!(
                    "frame {} has shape {:?}, expected {:?}",
                    t,
                    f.shape(),
                    shape
                )));
            }
            if f.spacing() != spacing {
                return Err(VolsegError::Validation(format!(
                    "frame {} has spacing {:?}, expected {:?}",
                    t,
                    f.spacing(),
                    spacing
                )));
            }
        }
        for (t, l) in &labels {
            if *t >= frames.len() {
                return Err(VolsegError::Validation(format!(
                    "label index {} outside {} frames",
                    t,
                    frames.len()
                )));
            }
            if l.shape() != shape {
                return Err(VolsegError::Validation(format!(
                    "label at frame {} has shape {:?}, expected {:?}",
                    t,
                    l.shape(),
                    shape
                )));
            }
        }
        Ok(Self {
            subject_id,
            frames,
            labels,
        })
    }

    pub fn subject_id(&self) -> &str {
        &self.subject_id
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn frame(&self, t: usize) -> &Volume3D {
        &self.frames[t]
    }

    pub fn frames(&self) -> &[Volume3D] {
        &self.frames
    }

    pub fn labels(&self) -> &BTreeMap<usize, LabelMap> {
        &self.labels
    }

    pub fn labeled_indices(&self) -> Vec<usize> {
        self.labels.keys().cloned().collect()
    }

    pub fn grid_shape(&self) -> (usize, usize, usize) {
        self.frames[0].shape()
    }
}

/// One fold of a subject-level cross-validation split.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct DatasetSplit {
    pub fold_id: usize,
    pub train_subjects: Vec<String>,
    pub val_subjects: Vec<String>,
    pub test_subjects: Vec<String>,
}

/// Divide subjects into `k` folds. Each subject appears in exactly one test
/// set across folds; the validation set is carved from the training folds as
/// `val_fraction` of the remaining subjects (at least one, and always leaving
/// at least one training subject). Deterministic given the seed.
pub fn make_folds(
    subject_ids: &[String],
    k: usize,
    seed: u64,
    val_fraction: f64,
) -> Result<Vec<DatasetSplit>> {
    if k < 2 {
        return Err(VolsegError::Argument(format!("k must be >= 2, got {}", k)));
    }
    if subject_ids.len() < k {
        return Err(VolsegError::Argument(format!(
            "need at least k={} subjects, got {}",
            k,
            subject_ids.len()
        )));
    }
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(VolsegError::Argument(format!(
            "val_fraction must be in [0, 1), got {}",
            val_fraction
        )));
    }
    let mut shuffled: Vec<String> = subject_ids.to_vec();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);

    let n = shuffled.len();
    let base = n / k;
    let extra = n % k;
    let mut folds = Vec::with_capacity(k);
    let mut cursor = 0usize;
    for fold_id in 0..k {
        let size = base + usize::from(fold_id < extra);
        let test: Vec<String> = shuffled[cursor..cursor + size].to_vec();
        cursor += size;
        let mut rest: Vec<String> = shuffled
            .iter()
            .filter(|s| !test.contains(s))
            .cloned()
            .collect();
        let mut fold_rng = ChaCha12Rng::seed_from_u64(seed ^ (0x5eed ^ fold_id as u64).rotate_left(17));
        rest.shuffle(&mut fold_rng);
        let mut n_val = ((rest.len() as f64) * val_fraction).round() as usize;
        if val_fraction > 0.0 {
            n_val = n_val.max(1);
        }
        n_val = n_val.min(rest.len().saturating_sub(1));
        let val: Vec<String> = rest[..n_val].to_vec();
        let train: Vec<String> = rest[n_val..].to_vec();
        folds.push(DatasetSplit {
            fold_id,
            train_subjects: train,
            val_subjects: val,
            test_subjects: test,
        });
    }
    Ok(folds)
}

/// Logit maps warp and transform per class channel; this helper applies a
/// channel-wise map and rebuilds the LogitMap.
pub fn map_channels<F>(logits: &LogitMap, mut f: F) -> Result<LogitMap>
where
    F: FnMut(&Array3<f64>) -> Array3<f64>,
{
    let c = logits.num_classes();
    let (h, w, d) = logits.spatial_shape();
    let mut out = Array4::<f64>::zeros((c, h, w, d));
    for ch in 0..c {
        let mapped = f(&logits.data().index_axis(Axis(0), ch).to_owned());
        out.index_axis_mut(Axis(0), ch).assign(&mapped);
    }
    LogitMap::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    #[test]
    fn volume_rejects_bad_spacing() {
        let v = Volume3D::new(Array3::zeros((4, 4, 4)), [1.0, 0.0, 1.0]);
        assert!(v.is_err());
    }

    #[test]
    fn volume_rejects_nan() {
        let mut d = Array3::zeros((4, 4, 4));
        d[[0, 0, 0]] = f64::NAN;
        assert!(Volume3D::new(d, [1.0; 3]).is_err());
    }

    #[test]
    fn label_rejects_out_of_range() {
        let mut d = Array3::<u8>::zeros((2, 2, 2));
        d[[0, 0, 0]] = 2;
        assert!(LabelMap::new(d, 2).is_err());
    }

    #[test]
    fn normalize_idempotent_bitwise() {
        let mut d = Array3::zeros((2, 2, 2));
        d[[0, 0, 0]] = 3.0;
        d[[1, 1, 1]] = 7.0;
        d[[0, 1, 0]] = 4.123456789;
        let v = Volume3D::new(d, [1.0; 3]).unwrap();
        let n1 = v.normalized();
        let n2 = n1.normalized();
        assert_eq!(n1.data(), n2.data());
    }

    #[test]
    fn argmax_tie_breaks_to_class_zero() {
        let z = LogitMap::new(Array4::zeros((2, 2, 2, 2))).unwrap();
        let l = logits_to_labels(&z);
        assert!(l.data().iter().all(|v| *v == 0));
    }

    #[test]
    fn argmax_picks_larger_logit() {
        let mut d = Array4::zeros((2, 2, 2, 2));
        d.index_axis_mut(Axis(0), 0).fill(-1.0);
        d.index_axis_mut(Axis(0), 1).fill(1.0);
        let l = logits_to_labels(&LogitMap::new(d).unwrap());
        assert!(l.data().iter().all(|v| *v == 1));
    }

    #[test]
    fn argmax_matches_brute_force_scan() {
        use rand::Rng;
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let d = Array4::from_shape_fn((2, 4, 4, 4), |_| rng.gen_range(-3.0..3.0));
        let z = LogitMap::new(d.clone()).unwrap();
        let l = logits_to_labels(&z);
        for i in 0..4 {
            for j in 0..4 {
                for k in 0..4 {
                    let expect = if d[[1, i, j, k]] > d[[0, i, j, k]] { 1 } else { 0 };
                    assert_eq!(l.data()[[i, j, k]], expect);
                }
            }
        }
    }

    #[test]
    fn softmax_argmax_matches_logit_argmax() {
        use rand::Rng;
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let d = Array4::from_shape_fn((3, 3, 3, 3), |_| rng.gen_range(-5.0..5.0));
        let z = LogitMap::new(d.clone()).unwrap();
        let p = z.softmax();
        let l = logits_to_labels(&z);
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    let mut best = 0;
                    for ch in 1..3 {
                        if p[[ch, i, j, k]] > p[[best, i, j, k]] {
                            best = ch;
                        }
                    }
                    assert_eq!(l.data()[[i, j, k]] as usize, best);
                }
            }
        }
        // per-voxel softmax sums to one
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    let s: f64 = (0..3).map(|ch| p[[ch, i, j, k]]).sum();
                    assert!((s - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn series_rejects_shape_mismatch() {
        let a = Volume3D::new(Array3::zeros((4, 4, 4)), [1.0; 3]).unwrap();
        let b = Volume3D::new(Array3::zeros((2, 2, 2)), [1.0; 3]).unwrap();
        let r = TimeSeries::new("s".into(), vec![a, b], BTreeMap::new());
        assert!(r.is_err());
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("subj-{:03}", i)).collect()
    }

    #[test]
    fn folds_ten_subjects_five_folds() {
        let folds = make_folds(&ids(10), 5, 42, 0.2).unwrap();
        assert_eq!(folds.len(), 5);
        for f in &folds {
            assert_eq!(f.test_subjects.len(), 2);
            assert!(!f.train_subjects.is_empty());
            assert!(!f.val_subjects.is_empty());
        }
    }

    #[test]
    fn folds_deterministic() {
        let a = make_folds(&ids(10), 5, 9, 0.2).unwrap();
        let b = make_folds(&ids(10), 5, 9, 0.2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn folds_partition_subjects() {
        use std::collections::BTreeSet;
        let all = ids(13);
        let folds = make_folds(&all, 5, 3, 0.2).unwrap();
        let mut seen: BTreeSet<String> = BTreeSet::new();
        for f in &folds {
            for s in &f.test_subjects {
                assert!(seen.insert(s.clone()), "subject {} in two test sets", s);
            }
            // disjoint within the fold
            let train: BTreeSet<_> = f.train_subjects.iter().collect();
            let val: BTreeSet<_> = f.val_subjects.iter().collect();
            let test: BTreeSet<_> = f.test_subjects.iter().collect();
            assert!(train.is_disjoint(&val));
            assert!(train.is_disjoint(&test));
            assert!(val.is_disjoint(&test));
            assert_eq!(train.len() + val.len() + test.len(), all.len());
        }
        assert_eq!(seen.len(), all.len());
    }

    #[test]
    fn folds_reject_k_larger_than_cohort() {
        assert!(make_folds(&ids(3), 5, 0, 0.2).is_err());
    }
}
