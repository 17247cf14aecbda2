//! Confusion-matrix accumulation and mean intersection-over-union.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::maps::{LabelMap, IGNORE_INDEX};

/// `counts[gt][pred]`, flattened row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(shape_err(classes * classes, counts.len()));
        }
        Ok(Self { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one prediction/ground-truth pair. Ignored ground-truth pixels are skipped.
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if pred.dims() != gt.dims() {
            return Err(shape_err(format!("{:?}", gt.dims()), format!("{:?}", pred.dims())));
        }
        let k = self.classes;
        // validate before touching counts so a failed call leaves the matrix unchanged
        for (&p, &g) in pred.values.iter().zip(&gt.values) {
            if g == IGNORE_INDEX {
                continue;
            }
            if usize::from(g) >= k {
                return Err(Error::InvalidInput(format!("ground-truth class {g} outside 0..{k}")));
            }
            if usize::from(p) >= k {
                return Err(Error::InvalidInput(format!("predicted class {p} outside 0..{k}")));
            }
        }
        for (&p, &g) in pred.values.iter().zip(&gt.values) {
            if g != IGNORE_INDEX {
                self.counts[usize::from(g) * k + usize::from(p)] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(shape_err(self.classes, other.classes));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn miou(&self) -> Result<IouReport> {
        miou(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

/// Per-class IoU and their mean over classes with non-zero union.
pub fn miou(cm: &ConfusionMatrix) -> Result<IouReport> {
    let k = cm.classes;
    let per_class: Vec<Option<f64>> = (0..k)
        .map(|c| {
            let tp = cm.get(c, c);
            let row: u64 = (0..k).map(|p| cm.get(c, p)).sum();
            let col: u64 = (0..k).map(|g| cm.get(g, c)).sum();
            let union = row + col - tp;
            (union > 0).then(|| tp as f64 / union as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::InvalidInput("mIoU undefined: no class present".into()));
    }
    let mean = present.iter().sum::<f64>() / present.len() as f64;
    Ok(IouReport { per_class, mean })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lm(h: usize, w: usize, v: Vec<u8>) -> LabelMap {
        LabelMap::from_vec(h, w, v).unwrap()
    }

    #[test]
    fn perfect_prediction_is_diagonal() {
        let gt = lm(2, 3, vec![0, 1, 2, 2, 1, 0]);
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&gt, &gt).unwrap();
        for g in 0..3 {
            for p in 0..3 {
                assert_eq!(cm.get(g, p), if g == p { 2 } else { 0 });
            }
        }
        let r = cm.miou().unwrap();
        assert_eq!(r.mean, 1.0);
        assert!(r.per_class.iter().all(|v| *v == Some(1.0)));
    }

    #[test]
    fn ignored_ground_truth_is_skipped() {
        let gt = LabelMap::filled(2, 2, IGNORE_INDEX);
        let pred = LabelMap::filled(2, 2, 1);
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&pred, &gt).unwrap();
        assert_eq!(cm, ConfusionMatrix::new(2));
        assert!(cm.miou().is_err());
    }

    #[test]
    fn invalid_predictions_are_rejected() {
        let gt = LabelMap::filled(1, 2, 0);
        let pred = lm(1, 2, vec![0, IGNORE_INDEX]);
        let mut cm = ConfusionMatrix::new(2);
        assert!(cm.accumulate(&pred, &gt).is_err());
        assert_eq!(cm.total(), 0);
        assert!(cm.accumulate(&LabelMap::filled(2, 1, 0), &gt).is_err());
    }

    #[test]
    fn two_class_hand_matrix() {
        // class 1: TP 6, FP 2, FN 2; class 0 takes the remaining 6 of 16 pixels
        let cm = ConfusionMatrix::from_counts(2, vec![6, 2, 2, 6]).unwrap();
        let r = cm.miou().unwrap();
        assert!((r.per_class[1].unwrap() - 0.6).abs() < 1e-15);
        assert!((r.per_class[0].unwrap() - 0.6).abs() < 1e-15);
        assert_eq!(cm.total(), 16);
    }

    #[test]
    fn absent_class_excluded_from_mean() {
        let cm = ConfusionMatrix::from_counts(3, vec![3, 1, 0, 1, 3, 0, 0, 0, 0]).unwrap();
        let r = cm.miou().unwrap();
        assert_eq!(r.per_class[2], None);
        assert!((r.mean - 0.6).abs() < 1e-15);
    }

    #[test]
    fn matches_counting_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let gt = lm(8, 8, (0..64).map(|_| if rng.random_bool(0.1) { IGNORE_INDEX } else { rng.random_range(0..4) }).collect());
        let pred = lm(8, 8, (0..64).map(|_| rng.random_range(0..4)).collect());
        let mut cm = ConfusionMatrix::new(4);
        cm.accumulate(&pred, &gt).unwrap();
        let mut oracle = [[0u64; 4]; 4];
        for y in 0..8 {
            for x in 0..8 {
                let g = *gt.get(y, x);
                if g != IGNORE_INDEX {
                    oracle[g as usize][*pred.get(y, x) as usize] += 1;
                }
            }
        }
        for g in 0..4 {
            for p in 0..4 {
                assert_eq!(cm.get(g, p), oracle[g][p]);
            }
        }
    }

    proptest! {
        #[test]
        fn shard_accumulation_is_order_free(
            pairs in proptest::collection::vec(
                (proptest::collection::vec(0u8..3, 9), proptest::collection::vec(0u8..3, 9)), 1..6)
        ) {
            let maps: Vec<(LabelMap, LabelMap)> = pairs
                .into_iter()
                .map(|(p, g)| (lm(3, 3, p), lm(3, 3, g)))
                .collect();
            let mut fwd = ConfusionMatrix::new(3);
            for (p, g) in &maps {
                fwd.accumulate(p, g).unwrap();
            }
            let mut rev = ConfusionMatrix::new(3);
            for (p, g) in maps.iter().rev() {
                rev.accumulate(p, g).unwrap();
            }
            let mut merged = ConfusionMatrix::new(3);
            for (p, g) in &maps {
                let mut shard = ConfusionMatrix::new(3);
                shard.accumulate(p, g).unwrap();
                merged.merge(&shard).unwrap();
            }
            prop_assert_eq!(&fwd, &rev);
            prop_assert_eq!(&fwd, &merged);
            let r = fwd.miou().unwrap();
            prop_assert!(r.per_class.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
