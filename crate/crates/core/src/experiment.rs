//! Experiment drivers behind the CLI: randomized gradient checks, paired
//! CE/DC simulations and manifest aggregation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dcloss::{
    negative_head_grad_logits, negative_head_loss, positive_head_grad_logits, positive_head_loss, LabelMask,
    RoiClassificationBatch,
};
use crate::error::{Error, Result};
use crate::numerics::{finite_diff_grad, max_relative_error, DEFAULT_FD_STEP};
use crate::sim::{
    generate_scenes, make_fewshot_split, stream_rng, synthetic_missing_rate, FeatureModel, SimConfig, Stream,
};
use crate::trainer::{
    backprop_image, build_eval_set, evaluate_recall, image_loss, train, LinearClassifier, LossKind, TrainConfig,
};

pub const DEFAULT_GRAD_CHECK_CASES: usize = 200;
pub const DEFAULT_GRAD_CHECK_TOLERANCE: f64 = 1e-6;
/// Scale of the random logits drawn by [`grad_check`].
pub const GRAD_CHECK_LOGIT_SCALE: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub cases: usize,
    pub seed: u64,
    pub tolerance: f64,
    pub max_positive_head: f64,
    pub max_negative_head: f64,
    pub max_linear: f64,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.max_positive_head.max(self.max_negative_head).max(self.max_linear)
    }

    pub fn passed(&self) -> bool {
        self.max_error() <= self.tolerance
    }

    pub fn to_csv(&self) -> String {
        format!(
            "cases,seed,tolerance,max_positive_head,max_negative_head,max_linear,max_error,passed\n{},{},{},{:e},{:e},{:e},{:e},{}\n",
            self.cases,
            self.seed,
            self.tolerance,
            self.max_positive_head,
            self.max_negative_head,
            self.max_linear,
            self.max_error(),
            self.passed()
        )
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn random_mask(rng: &mut ChaCha8Rng, c: usize) -> LabelMask {
    let mut bits: Vec<u8> = (0..c).map(|_| rng.random_range(0..=1)).collect();
    bits.push(1);
    LabelMask::from_bits(&bits).expect("background bit set")
}

/// Compares analytic and central-difference gradients of both heads with
/// respect to the logits and of the linear head with respect to its
/// parameters, over `cases` random configurations.
pub fn grad_check(cases: usize, tolerance: f64, seed: u64) -> Result<GradCheckReport> {
    if cases == 0 {
        return Err(Error::invalid("grad check needs at least one case"));
    }
    if !(tolerance > 0.0 && tolerance.is_finite()) {
        return Err(Error::invalid("tolerance must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        cases,
        seed,
        tolerance,
        max_positive_head: 0.0,
        max_negative_head: 0.0,
        max_linear: 0.0,
    };
    for _ in 0..cases {
        let c = rng.random_range(1..=10);
        let x = normal_vec(&mut rng, c + 1, GRAD_CHECK_LOGIT_SCALE);
        let mask = random_mask(&mut rng, c);
        let target = rng.random_range(0..c);

        let analytic = positive_head_grad_logits(&x, target)?;
        let numeric = finite_diff_grad(|v| positive_head_loss(v, target), &x, DEFAULT_FD_STEP)?;
        report.max_positive_head = report.max_positive_head.max(max_relative_error(&analytic, &numeric));

        let analytic = negative_head_grad_logits(&x, &mask)?;
        let numeric = finite_diff_grad(|v| negative_head_loss(v, &mask), &x, DEFAULT_FD_STEP)?;
        report.max_negative_head = report.max_negative_head.max(max_relative_error(&analytic, &numeric));

        let d = rng.random_range(1..=6);
        let n = rng.random_range(1..=8);
        let clf = LinearClassifier {
            weights: normal_vec(&mut rng, (c + 1) * d, 1.0),
            biases: normal_vec(&mut rng, c + 1, 1.0),
            num_outputs: c + 1,
            dim: d,
        };
        let features: Vec<Vec<f64>> = (0..n).map(|_| normal_vec(&mut rng, d, 1.0)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..=c)).collect();
        let kind = if rng.random::<bool>() {
            LossKind::Decoupled
        } else {
            LossKind::StandardCe
        };
        let batch = RoiClassificationBatch::new(clf.forward(&features)?, labels.clone(), mask.clone())?;
        let (_, g) = backprop_image(&clf, &batch, &features, kind)?;
        let analytic: Vec<f64> = g.weights.iter().chain(&g.biases).copied().collect();
        let params: Vec<f64> = clf.weights.iter().chain(&clf.biases).copied().collect();
        let nw = clf.weights.len();
        let numeric = finite_diff_grad(
            |p| {
                let probe = LinearClassifier {
                    weights: p[..nw].to_vec(),
                    biases: p[nw..].to_vec(),
                    ..clf.clone()
                };
                let b = RoiClassificationBatch::new(probe.forward(&features)?, labels.clone(), mask.clone())?;
                image_loss(&b, kind)
            },
            &params,
            DEFAULT_FD_STEP,
        )?;
        report.max_linear = report.max_linear.max(max_relative_error(&analytic, &numeric));
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub shots: usize,
    pub sim: SimConfig,
    pub train: TrainConfig,
    pub losses: Vec<LossKind>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seeds: (0..10).collect(),
            shots: 1,
            sim: SimConfig::default(),
            train: TrainConfig::default(),
            losses: vec![LossKind::StandardCe, LossKind::Decoupled],
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("at least one seed is required"));
        }
        if self.shots == 0 {
            return Err(Error::config("shots must be at least 1"));
        }
        if self.losses.is_empty() {
            return Err(Error::config("at least one loss kind is required"));
        }
        let unique: BTreeSet<_> = self.seeds.iter().collect();
        if unique.len() != self.seeds.len() {
            return Err(Error::config("seeds must be distinct"));
        }
        self.sim.validate()?;
        self.train.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub seed: u64,
    pub loss: LossKind,
    pub shots: usize,
    pub missing_rate: f64,
    pub recall: f64,
    pub m_recall: f64,
    pub per_class_recall: Vec<Option<f64>>,
    pub final_loss: f64,
}

/// One seed: dataset, split, shared evaluation set, then one training run
/// per loss kind. Every run reads the same data stream.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<ResultRow>> {
    let sim = SimConfig {
        seed,
        ..cfg.sim.clone()
    };
    let c = sim.num_fg_classes;
    let mut scenes = generate_scenes(&sim, &mut stream_rng(seed, Stream::Scenes))?;
    let split = make_fewshot_split(&mut scenes, c, cfg.shots, &mut stream_rng(seed, Stream::Split))?;
    let fm = FeatureModel::from_config(&sim)?;
    let scope: BTreeSet<usize> = (0..c).collect();
    let missing_rate = synthetic_missing_rate(&scenes, &split, &scope)?.rate;
    let eval_set = build_eval_set(&scenes, &fm, &mut stream_rng(seed, Stream::Eval));
    let mut rows = Vec::with_capacity(cfg.losses.len());
    for &loss in &cfg.losses {
        let tc = TrainConfig {
            seed,
            loss,
            ..cfg.train.clone()
        };
        let out = train(&scenes, &split, &sim, &fm, &tc)?;
        let eval = evaluate_recall(&out.classifier, &eval_set)?;
        rows.push(ResultRow {
            seed,
            loss,
            shots: cfg.shots,
            missing_rate,
            recall: eval.recall,
            m_recall: eval.m_recall,
            per_class_recall: eval.per_class_recall,
            final_loss: out.history.last().copied().unwrap_or(f64::NAN),
        });
    }
    Ok(rows)
}

/// Runs every seed in parallel; rows come back ordered by `(seed, loss)`.
pub fn simulate(cfg: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    cfg.validate()?;
    let per_seed: Vec<Vec<ResultRow>> = cfg.seeds.par_iter().map(|&s| run_seed(cfg, s)).collect::<Result<_>>()?;
    let mut rows: Vec<ResultRow> = per_seed.into_iter().flatten().collect();
    rows.sort_by_key(|r| (r.seed, r.loss));
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub created_unix: u64,
    pub elapsed_seconds: f64,
    pub config: ExperimentConfig,
    pub rows: Vec<ResultRow>,
}

impl RunManifest {
    pub fn num_fg_classes(&self) -> usize {
        self.config.sim.num_fg_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.config.sim.feature_dim
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    MeanStd { mean, std }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub shots: usize,
    pub loss: LossKind,
    pub n: usize,
    pub m_recall: MeanStd,
    pub recall: MeanStd,
    pub missing_rate: MeanStd,
}

/// Mean and deviation per `(shots, loss)`.
pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(usize, LossKind), Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.shots, r.loss)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((shots, loss), g)| {
            let col = |f: fn(&ResultRow) -> f64| mean_std(&g.iter().map(|r| f(r)).collect::<Vec<_>>());
            SummaryRow {
                shots,
                loss,
                n: g.len(),
                m_recall: col(|r| r.m_recall),
                recall: col(|r| r.recall),
                missing_rate: col(|r| r.missing_rate),
            }
        })
        .collect()
}

/// Pools the rows of compatible manifests. Manifests must agree on class
/// count and feature dimension, and no `(seed, loss, shots)` may repeat.
pub fn report(manifests: &[RunManifest]) -> Result<(Vec<ResultRow>, Vec<SummaryRow>)> {
    let first = manifests
        .first()
        .ok_or_else(|| Error::invalid("report needs at least one manifest"))?;
    let (c, d) = (first.num_fg_classes(), first.feature_dim());
    let mut seen = BTreeSet::new();
    let mut rows = Vec::new();
    for (i, m) in manifests.iter().enumerate() {
        if m.num_fg_classes() != c || m.feature_dim() != d {
            return Err(Error::Incompatible(format!(
                "manifest {i} has C={} d={}, expected C={c} d={d}",
                m.num_fg_classes(),
                m.feature_dim()
            )));
        }
        for r in &m.rows {
            if !seen.insert((r.seed, r.loss, r.shots)) {
                return Err(Error::Incompatible(format!(
                    "row (seed {}, loss {}, shots {}) appears in more than one manifest",
                    r.seed, r.loss, r.shots
                )));
            }
            rows.push(r.clone());
        }
    }
    rows.sort_by_key(|r| (r.shots, r.seed, r.loss));
    let summary = summarize(&rows);
    Ok((rows, summary))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn rows_to_csv(rows: &[ResultRow]) -> String {
    let width = rows.iter().map(|r| r.per_class_recall.len()).max().unwrap_or(0);
    let mut out = String::from("seed,loss,shots,missing_rate,recall,m_recall,final_loss");
    for k in 0..width {
        let _ = write!(out, ",recall_c{k}");
    }
    out.push('\n');
    for r in rows {
        let _ = write!(
            out,
            "{},{},{},{},{},{},{}",
            r.seed, r.loss, r.shots, r.missing_rate, r.recall, r.m_recall, r.final_loss
        );
        for k in 0..width {
            let _ = write!(out, ",{}", opt(r.per_class_recall.get(k).copied().flatten()));
        }
        out.push('\n');
    }
    out
}

pub fn summary_to_csv(summary: &[SummaryRow]) -> String {
    let mut out = String::from(
        "shots,loss,n,m_recall_mean,m_recall_std,recall_mean,recall_std,missing_rate_mean,missing_rate_std\n",
    );
    for s in summary {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            s.shots,
            s.loss,
            s.n,
            s.m_recall.mean,
            s.m_recall.std,
            s.recall.mean,
            s.recall.std,
            s.missing_rate.mean,
            s.missing_rate.std
        );
    }
    out
}
