//! Teacher pseudo-labels, the adaptive retention threshold and confidence decay.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use byteorder::{ReadBytesExt, WriteBytesExt, LE};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::maps::{
    argmax_labels, max_confidence, softmax_probs, ConfidenceMap, Image, LabelMap, LogitMap,
    PixelMask, SegBatch, SegSample,
};

/// Logistic threshold before clamping: `T0 / (1 + exp(-beta * (mean - 0.5)))`.
pub fn logistic_threshold(base: f64, sensitivity: f64, mean_conf: f64) -> f64 {
    base / (1.0 + (-sensitivity * (mean_conf - 0.5)).exp())
}

/// Adaptive confidence cutoff for pseudo-label retention.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdState {
    pub base: f64,
    pub sensitivity: f64,
    pub current: f64,
    pub clamp_low: f64,
    pub clamp_high: f64,
}

impl ThresholdState {
    /// Starts at the threshold implied by a neutral mean confidence of 0.5.
    pub fn new(base: f64, sensitivity: f64, clamp_low: f64, clamp_high: f64) -> Result<Self> {
        if !(base > 0.0 && base <= 1.0) {
            return Err(Error::Config(format!("base threshold {base} not in (0, 1]")));
        }
        if !(sensitivity >= 0.0) {
            return Err(Error::Config(format!("sensitivity {sensitivity} < 0")));
        }
        if !(0.0 < clamp_low && clamp_low < clamp_high && clamp_high <= 1.0) {
            return Err(Error::Config(format!(
                "clamp bounds [{clamp_low}, {clamp_high}] must satisfy 0 < low < high <= 1"
            )));
        }
        let current = logistic_threshold(base, sensitivity, 0.5).clamp(clamp_low, clamp_high);
        Ok(Self {
            base,
            sensitivity,
            current,
            clamp_low,
            clamp_high,
        })
    }

    /// Recomputes the threshold from a batch mean confidence.
    pub fn update(self, mean_conf: f64) -> Self {
        let raw = logistic_threshold(self.base, self.sensitivity, mean_conf);
        Self {
            current: raw.clamp(self.clamp_low, self.clamp_high),
            ..self
        }
    }
}

impl Default for ThresholdState {
    fn default() -> Self {
        Self::new(0.6, 0.5, 0.3, 0.8).expect("valid defaults")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecayConfig {
    /// Multiplier for below-threshold confidences. `1.0` disables decay.
    pub alpha: f64,
    pub refresh_on_teacher_update: bool,
}

impl DecayConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!("alpha {} not in (0, 1]", self.alpha)));
        }
        Ok(())
    }
}

impl Default for DecayConfig {
    fn default() -> Self {
        Self {
            alpha: 0.9,
            refresh_on_teacher_update: true,
        }
    }
}

/// Runs the teacher on every sample and derives hard labels plus confidences.
pub fn generate_pseudo_labels<F>(
    teacher_forward: F,
    batch: &SegBatch,
    num_classes: usize,
) -> Result<Vec<(LabelMap, ConfidenceMap)>>
where
    F: Fn(&Image) -> Result<LogitMap>,
{
    batch
        .samples()
        .iter()
        .map(|s| pseudo_label_one(&teacher_forward, s, num_classes))
        .collect()
}

fn pseudo_label_one<F>(
    teacher_forward: &F,
    sample: &SegSample,
    num_classes: usize,
) -> Result<(LabelMap, ConfidenceMap)>
where
    F: Fn(&Image) -> Result<LogitMap>,
{
    let logits = teacher_forward(&sample.image)?;
    let expected = (num_classes, sample.image.height, sample.image.width);
    let got = (logits.classes, logits.height, logits.width);
    if got != expected {
        return Err(Error::Contract(format!(
            "teacher output {got:?} for sample `{}`, expected {expected:?}",
            sample.id
        )));
    }
    let probs = softmax_probs(&logits)?;
    Ok((argmax_labels(&logits), max_confidence(&probs)))
}

/// Mean of per-image mean confidences (per-image mean first, then over images).
pub fn batch_mean_confidence<'a, I>(confs: I) -> Result<f64>
where
    I: IntoIterator<Item = &'a ConfidenceMap>,
{
    let mut total = 0.0;
    let mut images = 0usize;
    for conf in confs {
        if conf.is_empty() {
            return Err(Error::InvalidInput("confidence map with no pixels".into()));
        }
        total += conf.values.iter().sum::<f64>() / conf.len() as f64;
        images += 1;
    }
    if images == 0 {
        return Err(Error::InvalidInput("empty confidence collection".into()));
    }
    Ok(total / images as f64)
}

/// Like [`batch_mean_confidence`], averaging each image over its valid pixels only.
/// Images without any valid pixel do not take part.
pub fn batch_mean_confidence_masked(items: &[(&ConfidenceMap, &PixelMask)]) -> Result<f64> {
    let mut total = 0.0;
    let mut images = 0usize;
    for (conf, valid) in items {
        if conf.dims() != valid.dims() {
            return Err(shape_err(format!("{:?}", conf.dims()), format!("{:?}", valid.dims())));
        }
        let (sum, n) = conf
            .values
            .iter()
            .zip(&valid.values)
            .filter(|(_, &v)| v)
            .fold((0.0, 0usize), |(s, n), (c, _)| (s + c, n + 1));
        if n > 0 {
            total += sum / n as f64;
            images += 1;
        }
    }
    if images == 0 {
        return Err(Error::InvalidInput("no valid pixels in batch".into()));
    }
    Ok(total / images as f64)
}

/// True where `conf >= threshold`.
pub fn retain_mask(conf: &ConfidenceMap, threshold: f64) -> PixelMask {
    conf.map(|&c| c >= threshold)
}

/// Stored pseudo-label data for one unlabeled image.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelRecord {
    pub labels: LabelMap,
    pub confidence: ConfidenceMap,
    pub retain: PixelMask,
    /// Threshold the retain mask was last computed against.
    pub threshold: f64,
}

impl PseudoLabelRecord {
    pub fn new(labels: LabelMap, confidence: ConfidenceMap, threshold: f64) -> Result<Self> {
        if labels.dims() != confidence.dims() {
            return Err(shape_err(
                format!("{:?}", labels.dims()),
                format!("{:?}", confidence.dims()),
            ));
        }
        let retain = retain_mask(&confidence, threshold);
        Ok(Self {
            labels,
            confidence,
            retain,
            threshold,
        })
    }

    /// One decay step: below-threshold confidences are scaled by `alpha`.
    pub fn decay(&mut self, threshold: f64, alpha: f64) {
        for p in &mut self.confidence.values {
            if *p < threshold {
                *p *= alpha;
            }
        }
        self.retain = retain_mask(&self.confidence, threshold);
        self.threshold = threshold;
    }
}

/// Pseudo-labels and decayed confidences for every unlabeled image, keyed by sample id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PseudoLabelState {
    records: BTreeMap<String, PseudoLabelRecord>,
    pub epoch_of_last_refresh: u64,
}

impl PseudoLabelState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&PseudoLabelRecord> {
        self.records.get(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.records.keys().map(String::as_str)
    }

    pub fn records(&self) -> impl Iterator<Item = (&str, &PseudoLabelRecord)> {
        self.records.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn insert(&mut self, id: impl Into<String>, record: PseudoLabelRecord) {
        self.records.insert(id.into(), record);
    }

    /// Applies one decay step to a single sample.
    pub fn apply_confidence_decay(
        &mut self,
        id: &str,
        threshold: f64,
        cfg: &DecayConfig,
    ) -> Result<()> {
        let rec = self
            .records
            .get_mut(id)
            .ok_or_else(|| Error::UnknownSample(id.to_string()))?;
        rec.decay(threshold, cfg.alpha);
        Ok(())
    }

    pub fn decay_all(&mut self, threshold: f64, cfg: &DecayConfig) {
        for rec in self.records.values_mut() {
            rec.decay(threshold, cfg.alpha);
        }
    }

    /// Replaces every record with fresh teacher output.
    ///
    /// When the state is already populated, `samples` must cover exactly the
    /// stored ids.
    pub fn refresh_from_teacher<F>(
        &mut self,
        teacher_forward: F,
        samples: &[SegSample],
        num_classes: usize,
        threshold: f64,
        epoch: u64,
    ) -> Result<()>
    where
        F: Fn(&Image) -> Result<LogitMap>,
    {
        let ids: BTreeSet<&str> = samples.iter().map(|s| s.id.as_str()).collect();
        if ids.len() != samples.len() {
            return Err(Error::Contract("duplicate sample ids in unlabeled set".into()));
        }
        if !self.records.is_empty() && !self.records.keys().map(String::as_str).eq(ids.iter().copied())
        {
            return Err(Error::Contract(
                "unlabeled samples do not match stored pseudo-label ids".into(),
            ));
        }
        let mut fresh = BTreeMap::new();
        for s in samples {
            let (labels, conf) = pseudo_label_one(&teacher_forward, s, num_classes)?;
            fresh.insert(s.id.clone(), PseudoLabelRecord::new(labels, conf, threshold)?);
        }
        self.records = fresh;
        self.epoch_of_last_refresh = epoch;
        Ok(())
    }

    /// Hook for teacher weight copies; refreshes only when the config asks for it.
    /// Returns whether a refresh happened.
    pub fn on_teacher_update<F>(
        &mut self,
        cfg: &DecayConfig,
        teacher_forward: F,
        samples: &[SegSample],
        num_classes: usize,
        threshold: f64,
        epoch: u64,
    ) -> Result<bool>
    where
        F: Fn(&Image) -> Result<LogitMap>,
    {
        if !cfg.refresh_on_teacher_update {
            return Ok(false);
        }
        self.refresh_from_teacher(teacher_forward, samples, num_classes, threshold, epoch)?;
        Ok(true)
    }

    /// Serializes the state.
    ///
    /// Layout (little-endian): magic `CSPL`, `u16` version, `u64` epoch of last
    /// refresh, `u32` record count, then per record: `u32` id length, UTF-8 id,
    /// `u32` height, `u32` width, `f64` threshold, `H*W` label bytes,
    /// `H*W` `f64` confidences, `H*W` retain bytes (0/1).
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let io = |e: std::io::Error| Error::Checkpoint(e.to_string());
        w.write_all(PL_MAGIC).map_err(io)?;
        w.write_u16::<LE>(PL_VERSION).map_err(io)?;
        w.write_u64::<LE>(self.epoch_of_last_refresh).map_err(io)?;
        w.write_u32::<LE>(self.records.len() as u32).map_err(io)?;
        for (id, rec) in &self.records {
            w.write_u32::<LE>(id.len() as u32).map_err(io)?;
            w.write_all(id.as_bytes()).map_err(io)?;
            w.write_u32::<LE>(rec.labels.height as u32).map_err(io)?;
            w.write_u32::<LE>(rec.labels.width as u32).map_err(io)?;
            w.write_f64::<LE>(rec.threshold).map_err(io)?;
            w.write_all(&rec.labels.values).map_err(io)?;
            for &c in &rec.confidence.values {
                w.write_f64::<LE>(c).map_err(io)?;
            }
            let retain: Vec<u8> = rec.retain.values.iter().map(|&b| b as u8).collect();
            w.write_all(&retain).map_err(io)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let io = |e: std::io::Error| Error::Checkpoint(e.to_string());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != PL_MAGIC {
            return Err(Error::Checkpoint("not a pseudo-label state file".into()));
        }
        let version = r.read_u16::<LE>().map_err(io)?;
        if version != PL_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported pseudo-label state version {version}"
            )));
        }
        let epoch_of_last_refresh = r.read_u64::<LE>().map_err(io)?;
        let count = r.read_u32::<LE>().map_err(io)?;
        let mut records = BTreeMap::new();
        for _ in 0..count {
            let id_len = r.read_u32::<LE>().map_err(io)? as usize;
            let mut id = vec![0u8; id_len];
            r.read_exact(&mut id).map_err(io)?;
            let id = String::from_utf8(id).map_err(|e| Error::Checkpoint(e.to_string()))?;
            let h = r.read_u32::<LE>().map_err(io)? as usize;
            let w = r.read_u32::<LE>().map_err(io)? as usize;
            let threshold = r.read_f64::<LE>().map_err(io)?;
            let mut labels = vec![0u8; h * w];
            r.read_exact(&mut labels).map_err(io)?;
            let mut conf = vec![0f64; h * w];
            r.read_f64_into::<LE>(&mut conf).map_err(io)?;
            let mut retain = vec![0u8; h * w];
            r.read_exact(&mut retain).map_err(io)?;
            let rec = PseudoLabelRecord {
                labels: LabelMap::from_vec(h, w, labels)?,
                confidence: ConfidenceMap::from_vec(h, w, conf)?,
                retain: PixelMask::from_vec(h, w, retain.into_iter().map(|b| b != 0).collect())?,
                threshold,
            };
            records.insert(id, rec);
        }
        Ok(Self {
            records,
            epoch_of_last_refresh,
        })
    }
}

const PL_MAGIC: &[u8; 4] = b"CSPL";
const PL_VERSION: u16 = 1;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maps::Grid;
    use proptest::prelude::*;

    fn sample(id: &str, image: Image) -> SegSample {
        SegSample::new(id, image, None).unwrap()
    }

    fn constant_teacher(k: usize, favored: usize) -> impl Fn(&Image) -> Result<LogitMap> {
        move |img: &Image| {
            let mut l = LogitMap::zeros(k, img.height, img.width);
            for j in 0..img.height * img.width {
                *l.at_mut(favored, j) = 2.0;
            }
            Ok(l)
        }
    }

    /// Reads channel `c` of a one-hot encoded image as logit `c`.
    fn identity_teacher(img: &Image) -> Result<LogitMap> {
        let values = img.values.iter().map(|&v| v as f64 * 5.0).collect();
        LogitMap::from_vec(img.channels, img.height, img.width, values)
    }

    fn one_hot_image(labels: &LabelMap, k: usize) -> Image {
        let mut img = Image::zeros(k, labels.height, labels.width);
        for (j, &l) in labels.values.iter().enumerate() {
            img.plane_mut(l as usize)[j] = 1.0;
        }
        img
    }

    #[test]
    fn constant_teacher_labels_everything_with_its_class() {
        let batch = SegBatch::new(vec![sample("a", Image::zeros(3, 4, 4))]).unwrap();
        let out = generate_pseudo_labels(constant_teacher(3, 2), &batch, 3).unwrap();
        let (labels, conf) = &out[0];
        assert!(labels.values.iter().all(|&l| l == 2));
        let first = conf.values[0];
        assert!(conf.values.iter().all(|&c| c == first));
        let e2 = 2f64.exp();
        assert!((first - e2 / (e2 + 2.0)).abs() < 1e-12);
    }

    #[test]
    fn identity_teacher_reproduces_encoded_map() {
        let labels = LabelMap::from_vec(3, 3, vec![0, 1, 2, 2, 1, 0, 1, 1, 3]).unwrap();
        let img = one_hot_image(&labels, 4);
        let batch = SegBatch::new(vec![sample("x", img)]).unwrap();
        let out = generate_pseudo_labels(identity_teacher, &batch, 4).unwrap();
        assert_eq!(out[0].0, labels);
        let again = generate_pseudo_labels(identity_teacher, &batch, 4).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn teacher_shape_mismatch_is_contract_error() {
        let batch = SegBatch::new(vec![sample("a", Image::zeros(3, 4, 4))]).unwrap();
        let bad = |_: &Image| Ok(LogitMap::zeros(3, 2, 2));
        assert!(matches!(
            generate_pseudo_labels(bad, &batch, 3),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn batch_mean_uses_nested_means() {
        let a = Grid::filled(2, 2, 0.4);
        let b = Grid::filled(3, 3, 0.8);
        assert!((batch_mean_confidence([&a, &b]).unwrap() - 0.6).abs() < 1e-15);

        let big = Grid::filled(4, 4, 1.0);
        let small = Grid::filled(2, 2, 0.0);
        assert_eq!(batch_mean_confidence([&big, &small]).unwrap(), 0.5);

        let single = ConfidenceMap::from_vec(1, 4, vec![0.1, 0.2, 0.3, 0.6]).unwrap();
        assert!((batch_mean_confidence([&single]).unwrap() - 0.3).abs() < 1e-15);

        assert!(batch_mean_confidence(std::iter::empty()).is_err());
    }

    #[test]
    fn masked_mean_skips_invalid_pixels() {
        let conf = ConfidenceMap::from_vec(1, 4, vec![1.0, 0.5, 0.0, 0.25]).unwrap();
        let valid = PixelMask::from_vec(1, 4, vec![true, true, false, false]).unwrap();
        let none = PixelMask::filled(1, 4, false);
        let m = batch_mean_confidence_masked(&[(&conf, &valid), (&conf, &none)]).unwrap();
        assert_eq!(m, 0.75);
        assert!(batch_mean_confidence_masked(&[(&conf, &none)]).is_err());
    }

    #[test]
    fn threshold_reference_values() {
        let s = ThresholdState::new(0.6, 0.5, 0.3, 0.8).unwrap();
        assert!((s.update(0.5).current - 0.30).abs() < 1e-15);
        let t1 = s.update(1.0).current;
        assert!((t1 - 0.6 / (1.0 + (-0.25f64).exp())).abs() < 1e-15);
        assert!((t1 - 0.3374).abs() < 1e-4);

        let flat = ThresholdState::new(0.6, 0.0, 0.1, 0.8).unwrap();
        for m in [0.0, 0.3, 0.9] {
            assert!((flat.update(m).current - 0.3).abs() < 1e-15);
        }
        // raw value below the clamp floor
        assert_eq!(s.update(0.0).current, 0.3);
    }

    #[test]
    fn threshold_rejects_bad_config() {
        assert!(ThresholdState::new(0.0, 0.5, 0.3, 0.8).is_err());
        assert!(ThresholdState::new(0.6, -1.0, 0.3, 0.8).is_err());
        assert!(ThresholdState::new(0.6, 0.5, 0.8, 0.3).is_err());
        assert!(ThresholdState::new(0.6, 0.5, 0.3, 1.2).is_err());
    }

    #[test]
    fn retain_is_inclusive() {
        let conf = ConfidenceMap::from_vec(1, 3, vec![0.29, 0.3, 0.31]).unwrap();
        assert_eq!(retain_mask(&conf, 0.3).values, vec![false, true, true]);
        let ones = Grid::filled(2, 2, 1.0);
        assert!(retain_mask(&ones, 0.8).values.iter().all(|&b| b));
    }

    fn state_with(conf: Vec<f64>) -> PseudoLabelState {
        let n = conf.len();
        let mut st = PseudoLabelState::new();
        let rec = PseudoLabelRecord::new(
            LabelMap::filled(1, n, 1),
            ConfidenceMap::from_vec(1, n, conf).unwrap(),
            0.3,
        )
        .unwrap();
        st.insert("u0", rec);
        st
    }

    #[test]
    fn decay_reference_values() {
        let cfg = DecayConfig {
            alpha: 0.9,
            refresh_on_teacher_update: true,
        };
        let mut st = state_with(vec![0.9, 0.2]);
        st.apply_confidence_decay("u0", 0.3, &cfg).unwrap();
        let rec = st.get("u0").unwrap();
        assert_eq!(rec.confidence.values[0], 0.9);
        assert!((rec.confidence.values[1] - 0.18).abs() < 1e-15);
        assert_eq!(rec.retain.values, vec![true, false]);

        for _ in 0..4 {
            st.apply_confidence_decay("u0", 0.3, &cfg).unwrap();
        }
        let p = st.get("u0").unwrap().confidence.values[1];
        assert!((p - 0.2 * 0.9f64.powi(5)).abs() < 1e-15);
        assert!((p - 0.1181).abs() < 1e-4);

        assert!(matches!(
            st.apply_confidence_decay("nope", 0.3, &cfg),
            Err(Error::UnknownSample(_))
        ));
    }

    #[test]
    fn refresh_replaces_and_is_idempotent() {
        let samples: Vec<_> = (0..3)
            .map(|i| sample(&format!("u{i}"), Image::zeros(3, 2, 2)))
            .collect();
        let mut st = PseudoLabelState::new();
        st.refresh_from_teacher(constant_teacher(3, 1), &samples, 3, 0.3, 0)
            .unwrap();
        let batch = SegBatch::new(samples.clone()).unwrap();
        let direct = generate_pseudo_labels(constant_teacher(3, 1), &batch, 3).unwrap();
        for (s, (labels, conf)) in samples.iter().zip(&direct) {
            let rec = st.get(&s.id).unwrap();
            assert_eq!(&rec.labels, labels);
            assert_eq!(&rec.confidence, conf);
        }
        let once = st.clone();
        st.refresh_from_teacher(constant_teacher(3, 1), &samples, 3, 0.3, 0)
            .unwrap();
        assert_eq!(st, once);

        // decayed confidences are reset by a refresh
        st.decay_all(0.99, &DecayConfig::default());
        assert_ne!(st, once);
        st.refresh_from_teacher(constant_teacher(3, 1), &samples, 3, 0.3, 0)
            .unwrap();
        assert_eq!(st, once);

        assert!(matches!(
            st.refresh_from_teacher(constant_teacher(3, 1), &samples[..2], 3, 0.3, 1),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn refresh_gate_leaves_state_untouched() {
        let samples = vec![sample("u0", Image::zeros(3, 2, 2))];
        let mut st = PseudoLabelState::new();
        st.refresh_from_teacher(constant_teacher(3, 1), &samples, 3, 0.3, 0)
            .unwrap();
        let before = st.clone();
        let cfg = DecayConfig {
            alpha: 0.9,
            refresh_on_teacher_update: false,
        };
        let refreshed = st
            .on_teacher_update(&cfg, constant_teacher(3, 2), &samples, 3, 0.3, 4)
            .unwrap();
        assert!(!refreshed);
        assert_eq!(st, before);

        let cfg = DecayConfig::default();
        assert!(st
            .on_teacher_update(&cfg, constant_teacher(3, 2), &samples, 3, 0.3, 4)
            .unwrap());
        assert!(st.get("u0").unwrap().labels.values.iter().all(|&l| l == 2));
        assert_eq!(st.epoch_of_last_refresh, 4);
    }

    #[test]
    fn state_file_round_trip() {
        let mut st = state_with(vec![0.9, 0.2, 0.5]);
        st.epoch_of_last_refresh = 7;
        let mut buf = Vec::new();
        st.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"CSPL");
        let back = PseudoLabelState::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, st);
        buf[0] = b'X';
        assert!(PseudoLabelState::read_from(buf.as_slice()).is_err());
    }

    proptest! {
        #[test]
        fn threshold_stays_clamped_and_monotone(
            t0 in 0.05f64..1.0, beta in 0.0f64..20.0, a in 0.0f64..1.0, b in 0.0f64..1.0
        ) {
            let s = ThresholdState::new(t0, beta, 0.3, 0.8).unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let t = s.update(a).current;
            prop_assert!((0.3..=0.8).contains(&t));
            prop_assert!(logistic_threshold(t0, beta, lo) <= logistic_threshold(t0, beta, hi));
        }

        #[test]
        fn retention_monotone_in_threshold(
            conf in proptest::collection::vec(0.0f64..1.0, 16),
            t1 in 0.0f64..1.0, t2 in 0.0f64..1.0
        ) {
            let map = ConfidenceMap::from_vec(4, 4, conf).unwrap();
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let m_lo = retain_mask(&map, lo);
            let m_hi = retain_mask(&map, hi);
            for (a, b) in m_lo.values.iter().zip(&m_hi.values) {
                prop_assert!(*a || !*b);
            }
            prop_assert!(retain_mask(&map, 0.0).values.iter().all(|&b| b));
            prop_assert!(retain_mask(&map, 1.0 + 1e-9).values.iter().all(|&b| !b));
        }

        #[test]
        fn decay_geometric_below_threshold(p0 in 0.0f64..0.29, n in 1u32..20, alpha in 0.5f64..0.99) {
            let cfg = DecayConfig { alpha, refresh_on_teacher_update: true };
            let mut st = state_with(vec![p0]);
            for _ in 0..n {
                st.apply_confidence_decay("u0", 0.3, &cfg).unwrap();
            }
            let p = st.get("u0").unwrap().confidence.values[0];
            let expected = p0 * alpha.powi(n as i32);
            prop_assert!((p - expected).abs() <= 1e-12 * expected.abs().max(f64::MIN_POSITIVE));
        }
    }
}
