//! Per-pixel data types shared by every stage of the pipeline.
//!
//! All multi-channel tensors are stored channel-first (`[C, H, W]`) in a flat
//! row-major buffer, so pixel `j = y * W + x` of channel `k` lives at
//! `k * H * W + j`.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Label value excluded from every loss and metric.
pub const IGNORE_INDEX: u8 = 255;

/// A dense `[H, W]` grid of per-pixel values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid<T> {
    pub height: usize,
    pub width: usize,
    pub values: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self {
            height,
            width,
            values: vec![value; height * width],
        }
    }
}

impl<T> Grid<T> {
    pub fn from_vec(height: usize, width: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != height * width {
            return Err(shape_err(
                format!("{} values for {height}x{width}", height * width),
                values.len(),
            ));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn get(&self, y: usize, x: usize) -> &T {
        &self.values[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, value: T) {
        self.values[y * self.width + x] = value;
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(f).collect(),
        }
    }
}

/// Integer class map; values in `0..K` or [`IGNORE_INDEX`].
pub type LabelMap = Grid<u8>;
/// Per-pixel confidence in `[0, 1]`.
pub type ConfidenceMap = Grid<f64>;
/// Per-pixel boolean mask (retention, boundary, validity).
pub type PixelMask = Grid<bool>;

impl LabelMap {
    /// Checks that every non-ignored value is a valid class index.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self
            .values
            .iter()
            .find(|&&v| v != IGNORE_INDEX && usize::from(v) >= num_classes)
        {
            Some(v) => Err(Error::InvalidInput(format!(
                "label value {v} outside 0..{num_classes}"
            ))),
            None => Ok(()),
        }
    }

    pub fn valid_count(&self) -> usize {
        self.values.iter().filter(|&&v| v != IGNORE_INDEX).count()
    }
}

/// Real-valued image tensor `[C, H, W]`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

impl Image {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            values: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != channels * height * width {
            return Err(shape_err(
                format!("{channels}x{height}x{width}"),
                values.len(),
            ));
        }
        Ok(Self {
            channels,
            height,
            width,
            values,
        })
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let hw = self.height * self.width;
        &self.values[c * hw..(c + 1) * hw]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let hw = self.height * self.width;
        &mut self.values[c * hw..(c + 1) * hw]
    }
}

/// One training or evaluation example.
#[derive(Debug, Clone, PartialEq)]
pub struct SegSample {
    pub id: String,
    pub image: Image,
    pub label: Option<LabelMap>,
}

impl SegSample {
    pub fn new(id: impl Into<String>, image: Image, label: Option<LabelMap>) -> Result<Self> {
        if let Some(label) = &label {
            if label.dims() != (image.height, image.width) {
                return Err(shape_err(
                    format!("label {}x{}", image.height, image.width),
                    format!("{}x{}", label.height, label.width),
                ));
            }
        }
        Ok(Self {
            id: id.into(),
            image,
            label,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.image.height, self.image.width)
    }
}

/// Non-empty batch of samples sharing one `[C, H, W]` shape.
#[derive(Debug, Clone)]
pub struct SegBatch {
    samples: Vec<SegSample>,
}

impl SegBatch {
    pub fn new(samples: Vec<SegSample>) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::InvalidInput("empty batch".into()))?;
        let shape = (first.image.channels, first.image.height, first.image.width);
        for s in &samples[1..] {
            let other = (s.image.channels, s.image.height, s.image.width);
            if other != shape {
                return Err(shape_err(format!("{shape:?}"), format!("{other:?}")));
            }
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[SegSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.id.clone()).collect()
    }
}

macro_rules! class_tensor {
    ($name:ident) => {
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        pub struct $name {
            pub classes: usize,
            pub height: usize,
            pub width: usize,
            pub values: Vec<f64>,
        }

        impl $name {
            pub fn zeros(classes: usize, height: usize, width: usize) -> Self {
                Self {
                    classes,
                    height,
                    width,
                    values: vec![0.0; classes * height * width],
                }
            }

            pub fn from_vec(
                classes: usize,
                height: usize,
                width: usize,
                values: Vec<f64>,
            ) -> Result<Self> {
                if values.len() != classes * height * width {
                    return Err(shape_err(
                        format!("{classes}x{height}x{width}"),
                        values.len(),
                    ));
                }
                Ok(Self {
                    classes,
                    height,
                    width,
                    values,
                })
            }

            pub fn pixels(&self) -> usize {
                self.height * self.width
            }

            pub fn dims(&self) -> (usize, usize) {
                (self.height, self.width)
            }

            #[inline]
            pub fn at(&self, k: usize, pixel: usize) -> f64 {
                self.values[k * self.pixels() + pixel]
            }

            #[inline]
            pub fn at_mut(&mut self, k: usize, pixel: usize) -> &mut f64 {
                let hw = self.pixels();
                &mut self.values[k * hw + pixel]
            }

            /// Copies the class vector of one pixel into `out`.
            pub fn pixel_into(&self, pixel: usize, out: &mut [f64]) {
                let hw = self.pixels();
                for (k, o) in out.iter_mut().enumerate().take(self.classes) {
                    *o = self.values[k * hw + pixel];
                }
            }
        }
    };
}

class_tensor!(LogitMap);
class_tensor!(ProbMap);

impl LogitMap {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::InvalidInput(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        if let Some(v) = self.values.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("logit {v}")));
        }
        Ok(())
    }
}

/// Numerically stable per-pixel softmax over the class axis.
pub fn softmax_probs(logits: &LogitMap) -> Result<ProbMap> {
    logits.validate()?;
    let hw = logits.pixels();
    let mut probs = ProbMap::zeros(logits.classes, logits.height, logits.width);
    for j in 0..hw {
        let max = (0..logits.classes)
            .map(|k| logits.at(k, j))
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for k in 0..logits.classes {
            let e = (logits.at(k, j) - max).exp();
            *probs.at_mut(k, j) = e;
            sum += e;
        }
        for k in 0..logits.classes {
            *probs.at_mut(k, j) /= sum;
        }
    }
    Ok(probs)
}

/// Per-pixel arg-max class; ties go to the lowest class index.
pub fn argmax_labels(logits: &LogitMap) -> LabelMap {
    let hw = logits.pixels();
    let mut labels = LabelMap::filled(logits.height, logits.width, 0);
    for j in 0..hw {
        let mut best = 0;
        let mut best_val = logits.at(0, j);
        for k in 1..logits.classes {
            let v = logits.at(k, j);
            if v > best_val {
                best = k;
                best_val = v;
            }
        }
        labels.values[j] = best as u8;
    }
    labels
}

/// Per-pixel maximum class probability.
pub fn max_confidence(probs: &ProbMap) -> ConfidenceMap {
    let hw = probs.pixels();
    let mut conf = ConfidenceMap::filled(probs.height, probs.width, 0.0);
    for (j, c) in conf.values.iter_mut().enumerate().take(hw) {
        *c = (0..probs.classes)
            .map(|k| probs.at(k, j))
            .fold(f64::NEG_INFINITY, f64::max);
    }
    conf
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single_pixel(values: &[f64]) -> LogitMap {
        LogitMap::from_vec(values.len(), 1, 1, values.to_vec()).unwrap()
    }

    fn random_logits(rng: &mut ChaCha8Rng, k: usize, h: usize, w: usize) -> LogitMap {
        let values = (0..k * h * w).map(|_| rng.random_range(-3.0..3.0)).collect();
        LogitMap::from_vec(k, h, w, values).unwrap()
    }

    #[test]
    fn softmax_of_zero_logits_is_uniform() {
        let probs = softmax_probs(&LogitMap::zeros(3, 2, 2)).unwrap();
        for v in &probs.values {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_two_class_closed_form() {
        let probs = softmax_probs(&single_pixel(&[2.0, 0.0])).unwrap();
        let e2 = 2f64.exp();
        assert!((probs.values[0] - e2 / (e2 + 1.0)).abs() < 1e-15);
        assert!((probs.values[1] - 1.0 / (e2 + 1.0)).abs() < 1e-15);
        assert!((probs.values[0] - 0.8808).abs() < 1e-4);
        assert!((probs.values[1] - 0.1192).abs() < 1e-4);
    }

    #[test]
    fn softmax_is_stable_for_huge_logits() {
        let probs = softmax_probs(&single_pixel(&[1000.0, 0.0])).unwrap();
        assert!(probs.values.iter().all(|v| v.is_finite()));
        assert!((probs.values[0] - 1.0).abs() < 1e-12);
        assert!(probs.values[1] < 1e-12);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(matches!(
            softmax_probs(&single_pixel(&[f64::NAN, 0.0])),
            Err(Error::NonFinite(_))
        ));
        assert!(softmax_probs(&single_pixel(&[f64::INFINITY, 0.0])).is_err());
    }

    #[test]
    fn argmax_picks_unique_max_and_breaks_ties_low() {
        assert_eq!(argmax_labels(&single_pixel(&[0.1, 0.9, 0.3])).values, vec![1]);
        assert_eq!(argmax_labels(&single_pixel(&[0.5, 0.5])).values, vec![0]);
        assert_eq!(argmax_labels(&single_pixel(&[0.2, 0.7, 0.7])).values, vec![1]);
    }

    #[test]
    fn argmax_matches_brute_force_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let logits = random_logits(&mut rng, 3, 4, 4);
        let labels = argmax_labels(&logits);
        for y in 0..4 {
            for x in 0..4 {
                let j = y * 4 + x;
                let scores = [logits.at(0, j), logits.at(1, j), logits.at(2, j)];
                let mut best = 0;
                for k in 0..3 {
                    if scores[k] > scores[best] {
                        best = k;
                    }
                }
                assert_eq!(*labels.get(y, x) as usize, best);
            }
        }
    }

    #[test]
    fn max_confidence_reference_cases() {
        let uniform = ProbMap::from_vec(4, 2, 2, vec![0.25; 16]).unwrap();
        assert!(max_confidence(&uniform).values.iter().all(|&v| v == 0.25));

        let mut one_hot = ProbMap::zeros(3, 1, 3);
        *one_hot.at_mut(0, 0) = 1.0;
        *one_hot.at_mut(2, 1) = 1.0;
        *one_hot.at_mut(1, 2) = 1.0;
        assert!(max_confidence(&one_hot).values.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn max_confidence_matches_scan_and_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits = random_logits(&mut rng, 4, 3, 5);
        let probs = softmax_probs(&logits).unwrap();
        let conf = max_confidence(&probs);
        let labels = argmax_labels(&logits);
        for j in 0..15 {
            let mut best = f64::MIN;
            for k in 0..4 {
                best = best.max(probs.at(k, j));
            }
            assert_eq!(conf.values[j], best);
            assert_eq!(conf.values[j], probs.at(labels.values[j] as usize, j));
        }
    }

    #[test]
    fn sample_and_batch_shape_checks() {
        let img = Image::zeros(3, 4, 4);
        let bad = LabelMap::filled(4, 5, 0);
        assert!(SegSample::new("a", img.clone(), Some(bad)).is_err());
        assert!(SegBatch::new(vec![]).is_err());
        let a = SegSample::new("a", img, None).unwrap();
        let b = SegSample::new("b", Image::zeros(3, 5, 4), None).unwrap();
        assert!(SegBatch::new(vec![a.clone(), b]).is_err());
        assert_eq!(SegBatch::new(vec![a]).unwrap().ids(), vec!["a"]);
    }

    #[test]
    fn label_validation() {
        let mut l = LabelMap::filled(2, 2, 1);
        l.values[0] = IGNORE_INDEX;
        assert!(l.validate(2).is_ok());
        l.values[1] = 2;
        assert!(l.validate(2).is_err());
        assert_eq!(l.valid_count(), 3);
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_confidence_floor(
            k in 2usize..6,
            raw in proptest::collection::vec(-1e4f64..1e4, 6 * 9)
        ) {
            let logits = LogitMap::from_vec(k, 3, 3, raw[..k * 9].to_vec()).unwrap();
            let probs = softmax_probs(&logits).unwrap();
            let conf = max_confidence(&probs);
            for j in 0..9 {
                let sum: f64 = (0..k).map(|c| probs.at(c, j)).sum();
                prop_assert!((sum - 1.0).abs() < 1e-5);
                prop_assert!(conf.values[j] >= 1.0 / k as f64 - 1e-12);
            }
        }

        #[test]
        fn argmax_invariant_under_per_pixel_shift(
            raw in proptest::collection::vec(-10f64..10.0, 3 * 4),
            shifts in proptest::collection::vec(-100f64..100.0, 4)
        ) {
            let logits = LogitMap::from_vec(3, 2, 2, raw).unwrap();
            let mut shifted = logits.clone();
            for j in 0..4 {
                for k in 0..3 {
                    *shifted.at_mut(k, j) += shifts[j];
                }
            }
            // exact float ties can flip under shifting; skip near-ties
            let near_tie = (0..4).any(|j| {
                let mut v: Vec<f64> = (0..3).map(|k| logits.at(k, j)).collect();
                v.sort_by(|a, b| b.partial_cmp(a).unwrap());
                v[0] - v[1] < 1e-9
            });
            prop_assume!(!near_tie);
            prop_assert_eq!(argmax_labels(&logits), argmax_labels(&shifted));
        }
    }
}
