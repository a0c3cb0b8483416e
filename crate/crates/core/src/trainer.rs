//! Linear ROI classifier trained by plain gradient descent under either the
//! standard softmax cross-entropy or the decoupled loss, and the Recall /
//! mRecall bias metric.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dcloss::{
    build_image_mask, dc_loss_image, negative_head_grad_logits, positive_head_grad_logits, standard_ce_image,
    LabelMask, RoiClassificationBatch,
};
use crate::detection::{
    assign_labels, sample_rois, DEFAULT_BATCH_SIZE, DEFAULT_FG_THRESHOLD, DEFAULT_POSITIVE_FRACTION,
};
use crate::error::{Error, Result};
use crate::numerics::{argmax, stable_softmax, LogitVector};
use crate::sim::{
    generate_proposals, stream_rng, synthesize_feature, FeatureModel, FewShotSplit, SimConfig, Stream, SyntheticScene,
};

/// Standard deviation of the initial weights.
pub const INIT_SCALE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Standard softmax cross-entropy over all ROIs.
    #[serde(rename = "ce")]
    StandardCe,
    /// Positive head plus masked negative head.
    #[serde(rename = "dc")]
    Decoupled,
}

impl LossKind {
    pub fn label(&self) -> &'static str {
        match self {
            LossKind::StandardCe => "ce",
            LossKind::Decoupled => "dc",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(LossKind::StandardCe),
            "dc" => Ok(LossKind::Decoupled),
            other => Err(Error::invalid(format!("unknown loss kind {other:?}"))),
        }
    }
}

/// `x = W f + b` with `W` stored row-major as `(C+1) × d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearClassifier {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
    pub num_outputs: usize,
    pub dim: usize,
}

/// Gradient with the same layout as [`LinearClassifier`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Gradients {
    pub fn zeros(num_outputs: usize, dim: usize) -> Self {
        Gradients {
            weights: vec![0.0; num_outputs * dim],
            biases: vec![0.0; num_outputs],
        }
    }

    fn scale(&mut self, s: f64) {
        self.weights
            .iter_mut()
            .chain(self.biases.iter_mut())
            .for_each(|v| *v *= s);
    }

    fn add(&mut self, other: &Gradients) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }
}

/// Gaussian weights with standard deviation [`INIT_SCALE`], zero biases.
pub fn init_classifier<R: Rng + ?Sized>(dim: usize, num_fg_classes: usize, rng: &mut R) -> Result<LinearClassifier> {
    if dim == 0 || num_fg_classes == 0 {
        return Err(Error::config("classifier needs d >= 1 and C >= 1"));
    }
    let normal = Normal::new(0.0, INIT_SCALE).expect("valid normal");
    let num_outputs = num_fg_classes + 1;
    let weights = (0..num_outputs * dim).map(|_| normal.sample(rng)).collect();
    Ok(LinearClassifier {
        weights,
        biases: vec![0.0; num_outputs],
        num_outputs,
        dim,
    })
}

impl LinearClassifier {
    pub fn zeros(dim: usize, num_fg_classes: usize) -> Self {
        LinearClassifier {
            weights: vec![0.0; (num_fg_classes + 1) * dim],
            biases: vec![0.0; num_fg_classes + 1],
            num_outputs: num_fg_classes + 1,
            dim,
        }
    }

    pub fn num_fg_classes(&self) -> usize {
        self.num_outputs - 1
    }

    pub fn weight(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.dim + col]
    }

    pub fn logits(&self, feature: &[f64]) -> Result<Vec<f64>> {
        if feature.len() != self.dim {
            return Err(Error::invalid(format!(
                "feature has dimension {}, classifier expects {}",
                feature.len(),
                self.dim
            )));
        }
        Ok(self
            .weights
            .chunks_exact(self.dim)
            .zip(&self.biases)
            .map(|(row, b)| row.iter().zip(feature).map(|(w, f)| w * f).sum::<f64>() + b)
            .collect())
    }

    pub fn forward(&self, features: &[Vec<f64>]) -> Result<Vec<LogitVector>> {
        features.iter().map(|f| LogitVector::new(self.logits(f)?)).collect()
    }

    /// `θ ← θ − λ·g`.
    pub fn sgd_step(&mut self, grad: &Gradients, learning_rate: f64) -> Result<()> {
        if grad.weights.len() != self.weights.len() || grad.biases.len() != self.biases.len() {
            return Err(Error::invalid("gradient shape does not match classifier"));
        }
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        for (p, g) in self.weights.iter_mut().zip(&grad.weights) {
            *p -= learning_rate * g;
        }
        for (p, g) in self.biases.iter_mut().zip(&grad.biases) {
            *p -= learning_rate * g;
        }
        Ok(())
    }

    pub fn predict(&self, feature: &[f64]) -> Result<usize> {
        Ok(argmax(&self.logits(feature)?))
    }
}

/// Logit-space gradient of one ROI under `kind`, unnormalized.
pub fn roi_logit_grad(x: &[f64], label: usize, mask: &LabelMask, kind: LossKind) -> Result<Vec<f64>> {
    let bg = x.len() - 1;
    match kind {
        LossKind::StandardCe => {
            let mut g = stable_softmax(x)?.into_inner();
            g[label] -= 1.0;
            Ok(g)
        }
        LossKind::Decoupled if label == bg => negative_head_grad_logits(x, mask),
        LossKind::Decoupled => positive_head_grad_logits(x, label),
    }
}

/// Image loss under `kind`.
pub fn image_loss(batch: &RoiClassificationBatch, kind: LossKind) -> Result<f64> {
    match kind {
        LossKind::StandardCe => standard_ce_image(batch),
        LossKind::Decoupled => Ok(dc_loss_image(batch)?.total),
    }
}

/// Loss and parameter gradients of one image: per-ROI logit gradients `g`
/// accumulated as `Σ g ⊗ f / N` and `Σ g / N`.
pub fn backprop_image(
    clf: &LinearClassifier,
    batch: &RoiClassificationBatch,
    features: &[Vec<f64>],
    kind: LossKind,
) -> Result<(f64, Gradients)> {
    if features.len() != batch.len() {
        return Err(Error::invalid(format!(
            "{} features for {} ROIs",
            features.len(),
            batch.len()
        )));
    }
    if batch.mask().len() != clf.num_outputs {
        return Err(Error::invalid("batch class count does not match classifier"));
    }
    let loss = image_loss(batch, kind)?;
    let mut grad = Gradients::zeros(clf.num_outputs, clf.dim);
    for ((x, &y), f) in batch.logits().iter().zip(batch.labels()).zip(features) {
        if f.len() != clf.dim {
            return Err(Error::invalid("feature dimension does not match classifier"));
        }
        let g = roi_logit_grad(x.as_slice(), y, batch.mask(), kind)?;
        for (k, gk) in g.iter().enumerate() {
            if *gk == 0.0 {
                continue;
            }
            let row = &mut grad.weights[k * clf.dim..(k + 1) * clf.dim];
            for (w, fv) in row.iter_mut().zip(f) {
                *w += gk * fv;
            }
            grad.biases[k] += gk;
        }
    }
    grad.scale(1.0 / batch.len() as f64);
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub loss: LossKind,
    pub images_per_step: usize,
    pub seed: u64,
    /// Off by default.
    pub momentum: f64,
    /// Off by default.
    pub weight_decay: f64,
    pub batch_size: usize,
    pub positive_fraction: f64,
    pub fg_threshold: f64,
    /// Window used by [`epoch_means`].
    pub steps_per_epoch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.5,
            steps: 2000,
            loss: LossKind::Decoupled,
            images_per_step: 1,
            seed: 0,
            momentum: 0.0,
            weight_decay: 0.0,
            batch_size: DEFAULT_BATCH_SIZE,
            positive_fraction: DEFAULT_POSITIVE_FRACTION,
            fg_threshold: DEFAULT_FG_THRESHOLD,
            steps_per_epoch: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning rate must be positive"));
        }
        if self.steps == 0 {
            return Err(Error::config("steps must be at least 1"));
        }
        if self.images_per_step == 0 {
            return Err(Error::config("images_per_step must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight decay must be non-negative"));
        }
        if self.batch_size == 0 || self.steps_per_epoch == 0 {
            return Err(Error::config("batch_size and steps_per_epoch must be at least 1"));
        }
        if !(self.positive_fraction > 0.0 && self.positive_fraction < 1.0) {
            return Err(Error::config("positive_fraction must lie in (0, 1)"));
        }
        if !(self.fg_threshold > 0.0 && self.fg_threshold <= 1.0) {
            return Err(Error::config("fg_threshold must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// One image's worth of sampled, featurized and labeled ROIs.
#[derive(Debug, Clone)]
pub struct ImageSample {
    pub scene_id: usize,
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub mask: LabelMask,
}

/// Proposals → assignment against labeled ground truth → ROI sampling →
/// features, for one scene.
pub fn sample_image<R: Rng + ?Sized>(
    scene: &SyntheticScene,
    sim: &SimConfig,
    fm: &FeatureModel,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<ImageSample> {
    let c = sim.num_fg_classes;
    let proposals = generate_proposals(scene, sim, rng);
    let assignments = assign_labels(&proposals, &scene.instances, c, cfg.fg_threshold)?;
    let picked = sample_rois(&assignments, c, cfg.batch_size, cfg.positive_fraction, rng)?;
    let mut features = Vec::with_capacity(picked.len());
    let mut labels = Vec::with_capacity(picked.len());
    for i in picked {
        features.push(synthesize_feature(&proposals[i], scene, fm, rng));
        labels.push(assignments[i].assigned_label);
    }
    let mask = build_image_mask(scene.labeled_classes(), c)?;
    Ok(ImageSample {
        scene_id: scene.id,
        features,
        labels,
        mask,
    })
}

/// Deterministic stream of training images. It depends only on the data,
/// the split and the seed, never on classifier state, so runs that differ
/// only in loss see identical batches.
pub struct DataStream<'a> {
    scenes: Vec<&'a SyntheticScene>,
    sim: &'a SimConfig,
    fm: &'a FeatureModel,
    cfg: &'a TrainConfig,
    rng: rand_chacha::ChaCha8Rng,
}

impl<'a> DataStream<'a> {
    pub fn new(
        scenes: &'a [SyntheticScene],
        split: &FewShotSplit,
        sim: &'a SimConfig,
        fm: &'a FeatureModel,
        cfg: &'a TrainConfig,
    ) -> Result<Self> {
        let training = split.training_scenes();
        if training.is_empty() {
            return Err(Error::config("dataset has no labeled instances to train on"));
        }
        let mut by_id: BTreeMap<usize, &SyntheticScene> = scenes.iter().map(|s| (s.id, s)).collect();
        let mut picked = Vec::with_capacity(training.len());
        for id in training {
            let s = by_id
                .remove(&id)
                .ok_or_else(|| Error::config(format!("split refers to missing scene {id}")))?;
            picked.push(s);
        }
        for r in split.all_refs() {
            let s = picked.iter().find(|s| s.id == r.scene).expect("training scene present");
            if !s.instances.get(r.instance).is_some_and(|g| g.labeled) {
                return Err(Error::config(format!("scene flags disagree with split at {r:?}")));
            }
        }
        if fm.num_fg_classes() != sim.num_fg_classes {
            return Err(Error::config("feature model and simulator disagree on class count"));
        }
        Ok(DataStream {
            scenes: picked,
            sim,
            fm,
            cfg,
            rng: stream_rng(cfg.seed, Stream::TrainData),
        })
    }

    pub fn training_scene_count(&self) -> usize {
        self.scenes.len()
    }

    pub fn next_image(&mut self) -> Result<ImageSample> {
        let scene = self.scenes[self.rng.random_range(0..self.scenes.len())];
        sample_image(scene, self.sim, self.fm, self.cfg, &mut self.rng)
    }
}

/// Gradient of one step's images, averaged over images.
pub fn step_gradient(clf: &LinearClassifier, images: &[ImageSample], kind: LossKind) -> Result<(f64, Gradients)> {
    let mut total = Gradients::zeros(clf.num_outputs, clf.dim);
    let mut loss = 0.0;
    for img in images {
        let batch = RoiClassificationBatch::new(clf.forward(&img.features)?, img.labels.clone(), img.mask.clone())?;
        let (l, g) = backprop_image(clf, &batch, &img.features, kind)?;
        loss += l;
        total.add(&g);
    }
    let n = images.len() as f64;
    total.scale(1.0 / n);
    Ok((loss / n, total))
}

/// Optional heavy-ball momentum and L2 decay on top of [`LinearClassifier::sgd_step`].
struct Optimizer {
    velocity: Option<Gradients>,
}

impl Optimizer {
    fn step(&mut self, clf: &mut LinearClassifier, grad: Gradients, cfg: &TrainConfig) -> Result<()> {
        if cfg.momentum == 0.0 && cfg.weight_decay == 0.0 {
            return clf.sgd_step(&grad, cfg.learning_rate);
        }
        let mut g = grad;
        if cfg.weight_decay > 0.0 {
            for (gv, p) in g.weights.iter_mut().zip(&clf.weights) {
                *gv += cfg.weight_decay * p;
            }
        }
        let v = self
            .velocity
            .get_or_insert_with(|| Gradients::zeros(clf.num_outputs, clf.dim));
        v.scale(cfg.momentum);
        v.add(&g);
        clf.sgd_step(v, cfg.learning_rate)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub classifier: LinearClassifier,
    /// Loss of every step, before its update.
    pub history: Vec<f64>,
}

/// Trains from a fresh initialization drawn from the seed's init stream.
pub fn train(
    scenes: &[SyntheticScene],
    split: &FewShotSplit,
    sim: &SimConfig,
    fm: &FeatureModel,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let clf = init_classifier(fm.dim(), sim.num_fg_classes, &mut stream_rng(cfg.seed, Stream::Init))?;
    train_from(clf, scenes, split, sim, fm, cfg)
}

/// Trains starting from `clf`.
pub fn train_from(
    mut clf: LinearClassifier,
    scenes: &[SyntheticScene],
    split: &FewShotSplit,
    sim: &SimConfig,
    fm: &FeatureModel,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut stream = DataStream::new(scenes, split, sim, fm, cfg)?;
    let mut opt = Optimizer { velocity: None };
    let mut history = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let images = (0..cfg.images_per_step)
            .map(|_| stream.next_image())
            .collect::<Result<Vec<_>>>()?;
        let (loss, grad) = step_gradient(&clf, &images, cfg.loss)?;
        history.push(loss);
        opt.step(&mut clf, grad, cfg)?;
    }
    Ok(TrainOutcome {
        classifier: clf,
        history,
    })
}

/// Mean loss of each consecutive window of `steps_per_epoch` steps; a
/// trailing partial window is dropped.
pub fn epoch_means(history: &[f64], steps_per_epoch: usize) -> Vec<f64> {
    history
        .chunks_exact(steps_per_epoch.max(1))
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `None` for classes without support.
    pub per_class_recall: Vec<Option<f64>>,
    pub support: Vec<usize>,
    pub recalled: Vec<usize>,
    /// Fraction of all objects recalled.
    pub recall: f64,
    /// Unweighted mean of per-class recall over classes with support.
    pub m_recall: f64,
}

/// An object counts as recalled when its argmax prediction is any foreground
/// class, right or wrong.
pub fn evaluate_recall(clf: &LinearClassifier, eval_set: &[(Vec<f64>, usize)]) -> Result<EvalReport> {
    if eval_set.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let c = clf.num_fg_classes();
    let mut support = vec![0usize; c];
    let mut recalled = vec![0usize; c];
    for (f, class) in eval_set {
        if *class >= c {
            return Err(Error::invalid(format!(
                "evaluation object has non-foreground class {class}"
            )));
        }
        support[*class] += 1;
        if clf.predict(f)? != c {
            recalled[*class] += 1;
        }
    }
    Ok(report_from_counts(support, recalled))
}

pub(crate) fn report_from_counts(support: Vec<usize>, recalled: Vec<usize>) -> EvalReport {
    let per_class_recall: Vec<Option<f64>> = support
        .iter()
        .zip(&recalled)
        .map(|(&s, &r)| (s > 0).then(|| r as f64 / s as f64))
        .collect();
    let present: Vec<f64> = per_class_recall.iter().flatten().copied().collect();
    let m_recall = present.iter().sum::<f64>() / present.len() as f64;
    let total: usize = support.iter().sum();
    let recall = recalled.iter().sum::<usize>() as f64 / total as f64;
    EvalReport {
        per_class_recall,
        support,
        recalled,
        recall,
        m_recall,
    }
}

/// Features of every ground-truth instance, labeled or not, drawn around its
/// class prototype with the model's noise.
pub fn build_eval_set<R: Rng + ?Sized>(
    scenes: &[SyntheticScene],
    fm: &FeatureModel,
    rng: &mut R,
) -> Vec<(Vec<f64>, usize)> {
    scenes
        .iter()
        .flat_map(|s| &s.instances)
        .map(|g| (fm.sample(g.category, rng), g.category))
        .collect()
}
