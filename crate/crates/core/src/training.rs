//! Two-stage teacher-student training driver.
//!
//! Stage 1 trains the teacher on labeled data while the student learns from
//! the labeled loss plus confidence-weighted pseudo-labels produced by the
//! teacher step by step. Stage 2 keeps per-image pseudo-labels across epochs,
//! decays low-confidence entries, adds the boundary term, and periodically
//! copies the student into the teacher.
//!
//! The driver is a resumable state machine: every random draw and cursor
//! lives in [`Trainer`], so a checkpoint taken between steps reproduces the
//! remaining run exactly.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{strong_augment, AugmentConfig, AugmentParams};
use crate::boundary::boundary_from_labels;
use crate::error::{Error, Result};
use crate::eval::ConfusionMatrix;
use crate::losses::{
    boundary_loss_with_grad, confidence_weighted_ce_with_grad, final_loss, labeled_ce_with_grad,
    LossConfig, LossReport,
};
use crate::maps::{
    argmax_labels, ConfidenceMap, LabelMap, LogitMap, PixelMask, SegSample, IGNORE_INDEX,
};
use crate::model::{ModelConfig, SegModel};
use crate::optim::{poly_lr, Sgd};
use crate::pseudo_label::{
    batch_mean_confidence, retain_mask, DecayConfig, PseudoLabelRecord, PseudoLabelState,
    ThresholdState,
};

/// Initial threshold parameters plus the switch for dynamic filtering.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThresholdConfig {
    /// When off, every valid pseudo-label pixel is retained and the threshold
    /// stays at its initial value (still used as the decay cutoff).
    pub enabled: bool,
    pub base: f64,
    pub sensitivity: f64,
    pub clamp_low: f64,
    pub clamp_high: f64,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            base: 0.6,
            sensitivity: 0.5,
            clamp_low: 0.3,
            clamp_high: 0.8,
        }
    }
}

impl ThresholdConfig {
    pub fn initial_state(&self) -> Result<ThresholdState> {
        ThresholdState::new(self.base, self.sensitivity, self.clamp_low, self.clamp_high)
    }
}

/// Student objective during stage 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StudentObjective {
    /// labeled + lambda * weighted + coeff * boundary.
    #[default]
    Combined,
    /// lambda * weighted + coeff * boundary, no labeled term.
    UnlabeledOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage1_epochs: u64,
    pub stage2_epochs: u64,
    pub batch_size_labeled: usize,
    pub batch_size_unlabeled: usize,
    pub lr_initial: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub seed: u64,
    pub augment: AugmentConfig,
    pub loss: LossConfig,
    pub threshold: ThresholdConfig,
    pub decay: DecayConfig,
    pub teacher_copy_every_epochs: u64,
    #[serde(default)]
    pub student_objective: StudentObjective,
    #[serde(default)]
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1_epochs: 20,
            stage2_epochs: 60,
            batch_size_labeled: 8,
            batch_size_unlabeled: 8,
            lr_initial: 0.001,
            momentum: 0.9,
            weight_decay: 1e-4,
            poly_power: 0.9,
            seed: 0,
            augment: AugmentConfig::default(),
            loss: LossConfig::default(),
            threshold: ThresholdConfig::default(),
            decay: DecayConfig::default(),
            teacher_copy_every_epochs: 1,
            student_objective: StudentObjective::Combined,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.stage1_epochs + self.stage2_epochs == 0 {
            return cfg("at least one training epoch is required".into());
        }
        if self.batch_size_labeled == 0 || self.batch_size_unlabeled == 0 {
            return cfg("batch sizes must be positive".into());
        }
        if !(self.lr_initial > 0.0 && self.lr_initial.is_finite()) {
            return cfg(format!("lr_initial {} must be positive", self.lr_initial));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return cfg(format!("momentum {} not in [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0) || !(self.poly_power >= 0.0) {
            return cfg("weight_decay and poly_power must be non-negative".into());
        }
        if self.teacher_copy_every_epochs == 0 {
            return cfg("teacher_copy_every_epochs must be at least 1".into());
        }
        self.augment.validate()?;
        self.loss.validate()?;
        self.decay.validate()?;
        self.threshold.initial_state()?;
        Ok(())
    }

    pub fn total_epochs(&self) -> u64 {
        self.stage1_epochs + self.stage2_epochs
    }

    /// True when neither unlabeled term contributes, so the teacher is idle.
    pub fn supervised_only(&self) -> bool {
        self.loss.lambda_unsup == 0.0 && self.loss.boundary_coeff == 0.0
    }
}

/// Teacher and student sharing one architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelPair<M> {
    pub teacher: M,
    pub student: M,
}

impl<M: SegModel> ModelPair<M> {
    pub fn new(teacher: M, student: M) -> Result<Self> {
        check_compatible(&teacher, &student)?;
        Ok(Self { teacher, student })
    }

    /// Overwrites the teacher with an exact copy of the student's weights.
    pub fn update_teacher(&mut self) -> Result<()> {
        check_compatible(&self.teacher, &self.student)?;
        self.teacher.params_mut().copy_from_slice(self.student.params());
        Ok(())
    }
}

fn check_compatible<M: SegModel>(a: &M, b: &M) -> Result<()> {
    if a.params().len() != b.params().len()
        || a.num_classes() != b.num_classes()
        || a.in_channels() != b.in_channels()
    {
        return Err(Error::Contract(format!(
            "teacher/student mismatch: {} vs {} params",
            a.params().len(),
            b.params().len()
        )));
    }
    Ok(())
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub epoch: u64,
    pub stage: u8,
    pub lr: f64,
    pub labeled: f64,
    pub weighted: f64,
    pub boundary: f64,
    pub total: f64,
    /// Absent when the step used no unlabeled data.
    pub mean_confidence: Option<f64>,
    pub threshold: f64,
    pub retention_fraction: f64,
    pub boundary_fraction: f64,
}

impl MetricsRecord {
    /// Column names of the numeric series, in serialization order.
    pub const COLUMNS: [&'static str; 12] = [
        "step",
        "epoch",
        "stage",
        "lr",
        "labeled",
        "weighted",
        "boundary",
        "total",
        "mean_confidence",
        "threshold",
        "retention_fraction",
        "boundary_fraction",
    ];

    pub fn values(&self) -> [f64; 12] {
        [
            self.step as f64,
            self.epoch as f64,
            f64::from(self.stage),
            self.lr,
            self.labeled,
            self.weighted,
            self.boundary,
            self.total,
            self.mean_confidence.unwrap_or(f64::NAN),
            self.threshold,
            self.retention_fraction,
            self.boundary_fraction,
        ]
    }
}

/// An augmented unlabeled crop with its aligned pseudo-label targets.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledView {
    pub id: String,
    pub image: crate::maps::Image,
    pub pseudo: LabelMap,
    pub confidence: ConfidenceMap,
    pub retain: PixelMask,
    pub boundary: PixelMask,
}

/// Which terms the student objective includes for a step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepTerms {
    pub labeled: bool,
    pub boundary: bool,
}

/// Student loss and logit gradients for one step.
///
/// Returns the report plus `d total / d logits` for every labeled and every
/// unlabeled image, in input order. Terms whose coefficient is zero are still
/// evaluated so the report is complete, but contribute nothing.
pub fn student_loss<M: SegModel>(
    student: &M,
    labeled: &[SegSample],
    unlabeled: &[UnlabeledView],
    cfg: &LossConfig,
    terms: StepTerms,
) -> Result<(LossReport, Vec<LossGrad<M::Tape>>)> {
    let mut report = LossReport::default();
    let mut out = Vec::with_capacity(labeled.len() + unlabeled.len());

    let mut logits = Vec::with_capacity(labeled.len());
    let mut tapes = Vec::with_capacity(labeled.len());
    let mut gts = Vec::with_capacity(labeled.len());
    for s in labeled {
        let (l, t) = student.forward_train(&s.image)?;
        logits.push(l);
        tapes.push(t);
        gts.push(
            s.label
                .clone()
                .ok_or_else(|| Error::Contract(format!("labeled sample `{}` has no mask", s.id)))?,
        );
    }
    if !labeled.is_empty() {
        let (ce, mut grads) = labeled_ce_with_grad(&logits, &gts)?;
        report.labeled = ce.value;
        report.labeled_pixels = ce.pixels;
        report.labeled_empty = ce.empty;
        if !terms.labeled {
            for g in &mut grads {
                g.values.fill(0.0);
            }
        }
        out.extend(tapes.into_iter().zip(grads).map(|(tape, grad)| LossGrad { tape, grad }));
    } else {
        report.labeled_empty = true;
    }

    let n_u = unlabeled.len().max(1) as f64;
    let w_scale = cfg.lambda_unsup / n_u;
    let b_scale = if terms.boundary { cfg.boundary_coeff / n_u } else { 0.0 };
    let mut weighted = 0.0;
    let mut boundary = 0.0;
    for v in unlabeled {
        let (l, tape) = student.forward_train(&v.image)?;
        let mut grad = LogitMap::zeros(l.classes, l.height, l.width);
        let (w, kept) = confidence_weighted_ce_with_grad(
            &l,
            &v.pseudo,
            &v.confidence,
            &v.retain,
            cfg.gamma,
            cfg.weighted_norm,
            w_scale,
            &mut grad,
        )?;
        weighted += w;
        report.retained_pixels += kept;
        if terms.boundary {
            let (b, edges) = boundary_loss_with_grad(&l, &v.pseudo, &v.boundary, b_scale, &mut grad)?;
            boundary += b;
            report.boundary_pixels += edges;
        }
        out.push(LossGrad { tape, grad });
    }
    report.weighted = weighted / n_u;
    report.boundary = boundary / n_u;
    let labeled_term = if terms.labeled { report.labeled } else { 0.0 };
    report.total = final_loss(labeled_term, report.weighted, report.boundary, cfg);
    Ok((report, out))
}

/// A forward tape paired with the loss gradient w.r.t. its logits.
pub struct LossGrad<T> {
    pub tape: T,
    pub grad: LogitMap,
}

/// Predicted label maps for every sample accumulated into a confusion matrix.
pub fn evaluate<M: SegModel>(model: &M, samples: &[SegSample]) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(model.num_classes());
    for s in samples {
        let Some(gt) = &s.label else { continue };
        let pred = argmax_labels(&model.forward(&s.image)?);
        cm.accumulate(&pred, gt)?;
    }
    Ok(cm)
}

/// Position of the driver inside the schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cursor {
    pub global_step: u64,
    pub epoch: u64,
    pub step_in_epoch: u64,
    pub labeled_order: Vec<usize>,
    pub labeled_pos: usize,
    pub unlabeled_order: Vec<usize>,
}

/// Everything except model weights, optimizer buffers and pseudo-labels that
/// a resumed run needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerSnapshot {
    pub config: TrainConfig,
    pub num_classes: usize,
    pub labeled_ids: Vec<String>,
    pub unlabeled_ids: Vec<String>,
    pub cursor: Cursor,
    pub threshold: ThresholdState,
    pub rng: ChaCha8Rng,
}

/// Outcome of a single optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub report: LossReport,
    pub metrics: MetricsRecord,
    /// Whether the teacher was overwritten by the student after this step.
    pub teacher_updated: bool,
}

pub struct Trainer<M: SegModel> {
    cfg: TrainConfig,
    num_classes: usize,
    labeled: Vec<SegSample>,
    unlabeled: Vec<SegSample>,
    pair: ModelPair<M>,
    teacher_opt: Sgd,
    student_opt: Sgd,
    threshold: ThresholdState,
    pseudo: PseudoLabelState,
    rng: ChaCha8Rng,
    cursor: Cursor,
}

impl<M: SegModel> Trainer<M> {
    pub fn new(
        cfg: TrainConfig,
        pair: ModelPair<M>,
        labeled: Vec<SegSample>,
        unlabeled: Vec<SegSample>,
    ) -> Result<Self> {
        cfg.validate()?;
        if labeled.is_empty() {
            return Err(Error::Config("labeled set is empty".into()));
        }
        let num_classes = pair.student.num_classes();
        for s in &labeled {
            match &s.label {
                Some(l) => l.validate(num_classes)?,
                None => {
                    return Err(Error::Config(format!("labeled sample `{}` has no mask", s.id)))
                }
            }
        }
        check_compatible(&pair.teacher, &pair.student)?;
        let n = pair.student.params().len();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut labeled_order: Vec<usize> = (0..labeled.len()).collect();
        labeled_order.shuffle(&mut rng);
        let threshold = cfg.threshold.initial_state()?;
        let opt = Sgd::new(n, cfg.momentum as f32, cfg.weight_decay as f32)
            .without_decay(pair.student.no_decay_ranges());
        Ok(Self {
            teacher_opt: opt.clone(),
            student_opt: opt,
            cursor: Cursor {
                global_step: 0,
                epoch: 0,
                step_in_epoch: 0,
                labeled_order,
                labeled_pos: 0,
                unlabeled_order: Vec::new(),
            },
            cfg,
            num_classes,
            labeled,
            unlabeled,
            pair,
            threshold,
            pseudo: PseudoLabelState::new(),
            rng,
        })
    }

    /// Rebuilds a trainer from checkpointed parts.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        snapshot: TrainerSnapshot,
        pair: ModelPair<M>,
        teacher_opt: Sgd,
        student_opt: Sgd,
        pseudo: PseudoLabelState,
        labeled: Vec<SegSample>,
        unlabeled: Vec<SegSample>,
    ) -> Result<Self> {
        snapshot.config.validate()?;
        check_compatible(&pair.teacher, &pair.student)?;
        let ids = |v: &[SegSample]| v.iter().map(|s| s.id.clone()).collect::<Vec<_>>();
        if ids(&labeled) != snapshot.labeled_ids || ids(&unlabeled) != snapshot.unlabeled_ids {
            return Err(Error::Contract(
                "dataset split differs from the one recorded in the checkpoint".into(),
            ));
        }
        let n = pair.student.params().len();
        if teacher_opt.velocity.len() != n || student_opt.velocity.len() != n {
            return Err(Error::Contract("optimizer state does not match the model".into()));
        }
        if pair.student.num_classes() != snapshot.num_classes {
            return Err(Error::Contract(format!(
                "model has {} classes, checkpoint {}",
                pair.student.num_classes(),
                snapshot.num_classes
            )));
        }
        Ok(Self {
            cfg: snapshot.config,
            num_classes: snapshot.num_classes,
            labeled,
            unlabeled,
            pair,
            teacher_opt,
            student_opt,
            threshold: snapshot.threshold,
            pseudo,
            rng: snapshot.rng,
            cursor: snapshot.cursor,
        })
    }

    pub fn snapshot(&self) -> TrainerSnapshot {
        let ids = |v: &[SegSample]| v.iter().map(|s| s.id.clone()).collect();
        TrainerSnapshot {
            config: self.cfg.clone(),
            num_classes: self.num_classes,
            labeled_ids: ids(&self.labeled),
            unlabeled_ids: ids(&self.unlabeled),
            cursor: self.cursor.clone(),
            threshold: self.threshold,
            rng: self.rng.clone(),
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn models(&self) -> &ModelPair<M> {
        &self.pair
    }

    pub fn optimizers(&self) -> (&Sgd, &Sgd) {
        (&self.teacher_opt, &self.student_opt)
    }

    pub fn threshold(&self) -> &ThresholdState {
        &self.threshold
    }

    pub fn pseudo_labels(&self) -> &PseudoLabelState {
        &self.pseudo
    }

    pub fn cursor(&self) -> &Cursor {
        &self.cursor
    }

    pub fn into_models(self) -> ModelPair<M> {
        self.pair
    }

    pub fn steps_per_epoch(&self) -> u64 {
        let (n, b) = if self.unlabeled.is_empty() {
            (self.labeled.len(), self.cfg.batch_size_labeled)
        } else {
            (self.unlabeled.len(), self.cfg.batch_size_unlabeled)
        };
        n.div_ceil(b) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_epoch() * self.cfg.total_epochs()
    }

    pub fn is_finished(&self) -> bool {
        self.cursor.epoch >= self.cfg.total_epochs()
    }

    /// 1 or 2 for the stage the next step belongs to.
    pub fn stage(&self) -> u8 {
        if self.cursor.epoch < self.cfg.stage1_epochs {
            1
        } else {
            2
        }
    }

    fn uses_unlabeled(&self) -> bool {
        !self.unlabeled.is_empty() && !self.cfg.supervised_only()
    }

    fn next_labeled_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.cfg.batch_size_labeled);
        for _ in 0..self.cfg.batch_size_labeled {
            if self.cursor.labeled_pos == self.cursor.labeled_order.len() {
                self.cursor.labeled_order.shuffle(&mut self.rng);
                self.cursor.labeled_pos = 0;
            }
            out.push(self.cursor.labeled_order[self.cursor.labeled_pos]);
            self.cursor.labeled_pos += 1;
        }
        out
    }

    fn unlabeled_batch(&self) -> Vec<usize> {
        let b = self.cfg.batch_size_unlabeled;
        let start = self.cursor.step_in_epoch as usize * b;
        let end = (start + b).min(self.cursor.unlabeled_order.len());
        self.cursor.unlabeled_order[start.min(end)..end].to_vec()
    }

    fn begin_epoch(&mut self) -> Result<()> {
        if !self.uses_unlabeled() {
            return Ok(());
        }
        let mut order: Vec<usize> = (0..self.unlabeled.len()).collect();
        order.shuffle(&mut self.rng);
        self.cursor.unlabeled_order = order;
        if self.stage() == 2 {
            if self.pseudo.len() != self.unlabeled.len() {
                let teacher = &self.pair.teacher;
                self.pseudo.refresh_from_teacher(
                    |img| teacher.forward(img),
                    &self.unlabeled,
                    self.num_classes,
                    self.threshold.current,
                    self.cursor.epoch,
                )?;
            }
            self.pseudo.decay_all(self.threshold.current, &self.cfg.decay);
        }
        Ok(())
    }

    fn end_epoch(&mut self) -> Result<bool> {
        let stage2_epoch = self.cursor.epoch.checked_sub(self.cfg.stage1_epochs);
        let mut copied = false;
        if let Some(e) = stage2_epoch {
            if (e + 1) % self.cfg.teacher_copy_every_epochs == 0 {
                self.pair.update_teacher()?;
                copied = true;
                if self.uses_unlabeled() {
                    let teacher = &self.pair.teacher;
                    self.pseudo.on_teacher_update(
                        &self.cfg.decay,
                        |img| teacher.forward(img),
                        &self.unlabeled,
                        self.num_classes,
                        self.threshold.current,
                        self.cursor.epoch + 1,
                    )?;
                }
            }
        }
        self.cursor.epoch += 1;
        self.cursor.step_in_epoch = 0;
        Ok(copied)
    }

    /// Builds an augmented view of one unlabeled sample from its stored record.
    fn unlabeled_view(&mut self, idx: usize, threshold: f64) -> Result<UnlabeledView> {
        let sample = &self.unlabeled[idx];
        let rec = self
            .pseudo
            .get(&sample.id)
            .ok_or_else(|| Error::Contract(format!("no pseudo-label for `{}`", sample.id)))?;
        let params = AugmentParams::sample(&mut self.rng, &self.cfg.augment, sample.dims());
        let mut image = params.apply_image(&sample.image)?;
        if self.cfg.augment.strong.enabled {
            strong_augment(&mut image, &self.cfg.augment.strong, &mut self.rng);
        }
        let pseudo = params.apply_grid(&rec.labels, IGNORE_INDEX)?;
        let confidence = params.apply_grid(&rec.confidence, 0.0)?;
        let retain = if self.cfg.threshold.enabled {
            retain_mask(&confidence, threshold)
        } else {
            confidence.map(|_| true)
        };
        let boundary = if self.stage() == 2 && self.cfg.loss.boundary_coeff > 0.0 {
            params.apply_grid(&boundary_from_labels(&rec.labels)?, false)?
        } else {
            confidence.map(|_| false)
        };
        Ok(UnlabeledView {
            id: sample.id.clone(),
            image,
            pseudo,
            confidence,
            retain,
            boundary,
        })
    }

    /// Runs one optimizer step and advances the schedule. Non-finite logits
    /// or losses surface as [`Error::NonFiniteLoss`] naming the batch.
    pub fn step(&mut self) -> Result<StepOutput> {
        if self.is_finished() {
            return Err(Error::Contract("training schedule already complete".into()));
        }
        let mut ids = Vec::new();
        let step = self.cursor.global_step;
        self.step_inner(&mut ids).map_err(|e| match e {
            Error::NonFinite(_) => Error::NonFiniteLoss { step, ids },
            e => e,
        })
    }

    fn step_inner(&mut self, batch_ids: &mut Vec<String>) -> Result<StepOutput> {
        if self.cursor.step_in_epoch == 0 {
            self.begin_epoch()?;
        }
        let stage = self.stage();
        let lr = poly_lr(
            self.cursor.global_step,
            self.total_steps(),
            self.cfg.lr_initial,
            self.cfg.poly_power,
        )?;

        let l_idx = self.next_labeled_batch();
        let mut labeled = Vec::with_capacity(l_idx.len());
        for &i in &l_idx {
            let params = AugmentParams::sample(&mut self.rng, &self.cfg.augment, self.labeled[i].dims());
            labeled.push(crate::augment::apply_params(&self.labeled[i], &params)?);
        }
        batch_ids.extend(labeled.iter().map(|s| s.id.clone()));

        // Stage 1: the teacher learns from labeled data only.
        if stage == 1 && !self.cfg.supervised_only() {
            let teacher = &mut self.pair.teacher;
            let (_, grads) = supervised_grads(teacher, &labeled)?;
            self.teacher_opt.step(teacher.params_mut(), &grads, lr as f32);
        }

        let u_idx = if self.uses_unlabeled() { self.unlabeled_batch() } else { Vec::new() };
        batch_ids.extend(u_idx.iter().map(|&i| self.unlabeled[i].id.clone()));
        if stage == 1 {
            let teacher = &self.pair.teacher;
            for &i in &u_idx {
                let s = &self.unlabeled[i];
                let logits = teacher.forward(&s.image)?;
                let probs = crate::maps::softmax_probs(&logits)?;
                let rec = PseudoLabelRecord::new(
                    argmax_labels(&logits),
                    crate::maps::max_confidence(&probs),
                    self.threshold.current,
                )?;
                self.pseudo.insert(s.id.clone(), rec);
            }
        }
        let mut mean_conf = None;
        if !u_idx.is_empty() {
            let ids: Vec<&str> = u_idx.iter().map(|&i| self.unlabeled[i].id.as_str()).collect();
            let confs: Vec<&ConfidenceMap> = ids
                .iter()
                .map(|id| {
                    self.pseudo
                        .get(id)
                        .map(|r| &r.confidence)
                        .ok_or_else(|| Error::Contract(format!("no pseudo-label for `{id}`")))
                })
                .collect::<Result<_>>()?;
            let mean = batch_mean_confidence(confs)?;
            if self.cfg.threshold.enabled {
                self.threshold = self.threshold.update(mean);
            }
            mean_conf = Some(mean);
        }
        let threshold = self.threshold.current;
        let mut views = Vec::with_capacity(u_idx.len());
        for &i in &u_idx {
            views.push(self.unlabeled_view(i, threshold)?);
        }

        let terms = StepTerms {
            labeled: stage == 1 || self.cfg.student_objective == StudentObjective::Combined,
            boundary: stage == 2,
        };
        let (report, grads) = student_loss(&self.pair.student, &labeled, &views, &self.cfg.loss, terms)?;
        if !report.total.is_finite() {
            return Err(Error::NonFinite(format!("loss {}", report.total)));
        }
        let student = &mut self.pair.student;
        let mut pgrad = vec![0.0f32; student.params().len()];
        for g in grads {
            student.backward(g.tape, &g.grad, &mut pgrad)?;
        }
        self.student_opt.step(student.params_mut(), &pgrad, lr as f32);

        let valid: usize = views.iter().map(|v| v.pseudo.valid_count()).sum();
        let frac = |n: usize| if valid == 0 { 0.0 } else { n as f64 / valid as f64 };
        let metrics = MetricsRecord {
            step: self.cursor.global_step,
            epoch: self.cursor.epoch,
            stage,
            lr,
            labeled: report.labeled,
            weighted: report.weighted,
            boundary: report.boundary,
            total: report.total,
            mean_confidence: mean_conf,
            threshold,
            retention_fraction: frac(report.retained_pixels),
            boundary_fraction: frac(report.boundary_pixels),
        };

        self.cursor.global_step += 1;
        self.cursor.step_in_epoch += 1;
        let teacher_updated = if self.cursor.step_in_epoch == self.steps_per_epoch() {
            self.end_epoch()?
        } else {
            false
        };
        Ok(StepOutput {
            report,
            metrics,
            teacher_updated,
        })
    }

    /// Steps until the current stage is complete.
    pub fn run_stage<F>(&mut self, stage: u8, mut sink: F) -> Result<()>
    where
        F: FnMut(&StepOutput) -> Result<()>,
    {
        while !self.is_finished() && self.stage() == stage {
            let out = self.step()?;
            sink(&out)?;
        }
        Ok(())
    }

    /// Stage 1: teacher training with per-batch pseudo-labels and threshold updates.
    pub fn train_stage1<F>(&mut self, sink: F) -> Result<()>
    where
        F: FnMut(&StepOutput) -> Result<()>,
    {
        self.run_stage(1, sink)
    }

    /// Stage 2: decay, boundary term and teacher copies.
    pub fn train_stage2<F>(&mut self, sink: F) -> Result<()>
    where
        F: FnMut(&StepOutput) -> Result<()>,
    {
        if self.stage() == 1 && !self.is_finished() {
            return Err(Error::Contract("stage 2 requested before stage 1 finished".into()));
        }
        if self.uses_unlabeled() && self.cfg.stage1_epochs > 0 && self.pseudo.is_empty() {
            return Err(Error::Contract("stage 2 needs pseudo-label state from stage 1".into()));
        }
        self.run_stage(2, sink)
    }

    /// Runs whatever remains of the schedule.
    pub fn run<F>(&mut self, mut sink: F) -> Result<()>
    where
        F: FnMut(&StepOutput) -> Result<()>,
    {
        while !self.is_finished() {
            let out = self.step()?;
            sink(&out)?;
        }
        Ok(())
    }
}

/// Labeled CE and its parameter gradient for a model.
fn supervised_grads<M: SegModel>(model: &M, batch: &[SegSample]) -> Result<(f64, Vec<f32>)> {
    let (report, grads) = student_loss(
        model,
        batch,
        &[],
        &LossConfig::default(),
        StepTerms {
            labeled: true,
            boundary: false,
        },
    )?;
    let mut pgrad = vec![0.0f32; model.params().len()];
    for g in grads {
        model.backward(g.tape, &g.grad, &mut pgrad)?;
    }
    Ok((report.labeled, pgrad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_dataset, SyntheticConfig};
    use crate::losses::{boundary_loss, confidence_weighted_ce, labeled_ce};
    use crate::model::SmallSegNet;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            stage1_epochs: 1,
            stage2_epochs: 2,
            batch_size_labeled: 2,
            batch_size_unlabeled: 3,
            lr_initial: 0.01,
            augment: AugmentConfig {
                flip: true,
                scale_range: (0.8, 1.2),
                crop: (16, 16),
                strong: Default::default(),
            },
            model: ModelConfig { base_width: 4, ..Default::default() },
            ..TrainConfig::default()
        }
    }

    fn setup(cfg: &TrainConfig, n: usize) -> Trainer<SmallSegNet> {
        let ds = generate_synthetic_dataset(&SyntheticConfig::new(n, (20, 20), 3, 5)).unwrap();
        let (l, u) = ds.samples.split_at(3);
        let net = SmallSegNet::new(3, 3, cfg.model, 1).unwrap();
        let pair = ModelPair::new(net.clone(), net).unwrap();
        Trainer::new(cfg.clone(), pair, l.to_vec(), u.to_vec()).unwrap()
    }

    #[test]
    fn schedule_covers_both_stages_and_copies_teacher() {
        let cfg = tiny_cfg();
        let mut t = setup(&cfg, 10);
        assert_eq!(t.steps_per_epoch(), 3);
        let mut stages = Vec::new();
        let mut copies = 0;
        t.run(|o| {
            stages.push(o.metrics.stage);
            copies += usize::from(o.teacher_updated);
            assert!((o.report.total - final_loss(o.report.labeled, o.report.weighted, o.report.boundary, &cfg.loss)).abs() < 1e-6);
            Ok(())
        })
        .unwrap();
        assert_eq!(stages, vec![1, 1, 1, 2, 2, 2, 2, 2, 2]);
        assert_eq!(copies, 2);
        assert_eq!(t.models().teacher.params(), t.models().student.params());
        assert_eq!(t.pseudo_labels().len(), 7);
        assert!(t.step().is_err());
    }

    #[test]
    fn zero_lr_keeps_weights() {
        let mut cfg = tiny_cfg();
        cfg.lr_initial = 1e-300;
        let mut t = setup(&cfg, 8);
        let before = t.models().clone();
        let out = t.step().unwrap();
        assert!(out.report.total.is_finite());
        assert_eq!(t.models().student.params(), before.student.params());
    }

    #[test]
    fn supervised_only_never_touches_teacher() {
        let mut cfg = tiny_cfg();
        cfg.loss.lambda_unsup = 0.0;
        cfg.loss.boundary_coeff = 0.0;
        cfg.stage2_epochs = 0;
        let mut t = setup(&cfg, 9);
        let teacher = t.models().teacher.clone();
        t.run(|o| {
            assert_eq!(o.report.total, o.report.labeled);
            Ok(())
        })
        .unwrap();
        assert_eq!(t.models().teacher, teacher);
        assert!(t.pseudo_labels().is_empty());
    }

    #[test]
    fn stage2_teacher_changes_only_at_copies() {
        let cfg = TrainConfig {
            stage1_epochs: 0,
            teacher_copy_every_epochs: 2,
            ..tiny_cfg()
        };
        let mut t = setup(&cfg, 12);
        let initial = t.models().teacher.clone();
        for _ in 0..3 {
            t.step().unwrap();
            assert_eq!(t.models().teacher, initial);
        }
        // end of the second stage-2 epoch
        for _ in 0..2 {
            t.step().unwrap();
        }
        let out = t.step().unwrap();
        assert!(out.teacher_updated);
        assert_eq!(t.models().teacher.params(), t.models().student.params());
    }

    #[test]
    fn student_loss_matches_standalone_terms() {
        let cfg = tiny_cfg();
        let t = setup(&cfg, 6);
        let net = &t.models().student;
        let labeled = &t.labeled[..2];
        let img = t.unlabeled[0].image.clone();
        let logits = net.forward(&img).unwrap();
        let probs = crate::maps::softmax_probs(&logits).unwrap();
        let pseudo = argmax_labels(&logits);
        let conf = crate::maps::max_confidence(&probs);
        let view = UnlabeledView {
            id: "u".into(),
            image: img,
            retain: retain_mask(&conf, 0.4),
            boundary: boundary_from_labels(&pseudo).unwrap(),
            pseudo,
            confidence: conf,
        };
        let terms = StepTerms { labeled: true, boundary: true };
        let (r, _) = student_loss(net, labeled, std::slice::from_ref(&view), &cfg.loss, terms).unwrap();
        let l_logits: Vec<_> = labeled.iter().map(|s| net.forward(&s.image).unwrap()).collect();
        let gts: Vec<_> = labeled.iter().map(|s| s.label.clone().unwrap()).collect();
        let l = labeled_ce(&l_logits, &gts).unwrap().value;
        let ul = net.forward(&view.image).unwrap();
        let w = confidence_weighted_ce(&ul, &view.pseudo, &view.confidence, &view.retain, 1.0, Default::default()).unwrap();
        let b = boundary_loss(&ul, &view.pseudo, &view.boundary).unwrap();
        assert_eq!(r.labeled, l);
        assert_eq!(r.weighted, w);
        assert_eq!(r.boundary, b);
        assert_eq!(r.total, l + w + 0.5 * b);
    }

    #[test]
    fn non_finite_loss_reports_batch_ids() {
        let cfg = tiny_cfg();
        let mut t = setup(&cfg, 6);
        t.pair.student.params_mut()[0] = f32::NAN;
        match t.step() {
            Err(Error::NonFiniteLoss { step: 0, ids }) => assert_eq!(ids.len(), 5),
            other => panic!("{other:?}"),
        }
        // a broken teacher fails while producing pseudo-labels
        let mut t = setup(&cfg, 6);
        t.pair.teacher.params_mut().fill(f32::NAN);
        assert!(matches!(t.step(), Err(Error::NonFiniteLoss { step: 0, .. })));
    }

    #[test]
    fn empty_labeled_set_is_config_error() {
        let cfg = tiny_cfg();
        let net = SmallSegNet::new(3, 3, cfg.model, 1).unwrap();
        let pair = ModelPair::new(net.clone(), net).unwrap();
        assert!(matches!(Trainer::new(cfg, pair, vec![], vec![]), Err(Error::Config(_))));
    }

    #[test]
    fn copy_makes_outputs_identical() {
        let a = SmallSegNet::new(3, 3, ModelConfig { base_width: 4, ..Default::default() }, 1).unwrap();
        let b = SmallSegNet::new(3, 3, ModelConfig { base_width: 4, ..Default::default() }, 2).unwrap();
        let mut pair = ModelPair::new(a, b).unwrap();
        pair.update_teacher().unwrap();
        pair.update_teacher().unwrap();
        let img = generate_synthetic_dataset(&SyntheticConfig::new(1, (16, 16), 3, 0)).unwrap().samples[0]
            .image
            .clone();
        assert_eq!(pair.teacher.forward(&img).unwrap(), pair.student.forward(&img).unwrap());
        let c = SmallSegNet::new(3, 4, ModelConfig { base_width: 4, ..Default::default() }, 2).unwrap();
        assert!(ModelPair::new(pair.teacher.clone(), c).is_err());
    }
}
