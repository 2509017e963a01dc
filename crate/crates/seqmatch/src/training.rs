//! Episodic training and evaluation.
//!
//! Training is sequential over episodes: sample a task for the configured
//! regime, run the relation forward pass on a fresh tape, score queries
//! against class prototypes with the configured metric, combine the loss
//! terms, backpropagate, and apply one Adam step. Evaluation freezes the
//! parameters and measures query accuracy over many independently seeded
//! episodes in parallel.

use std::collections::HashMap;
use std::time::Instant;

use rayon::prelude::*;

use crate::autograd::{backward, Tape};
use crate::episodes::{
    cluster_videos, pseudo_label_and_augment, sample_semi_supervised, sample_supervised,
    sample_unsupervised, ClusterAssignment, Dataset, Split,
};
use crate::error::{Error, Result};
use crate::losses::{total_loss, CoherenceKind, LossWeights};
use crate::matrix::Matrix;
use crate::metric::{episode_logits, episode_logits_tape, MetricKind};
use crate::relation::{
    forward_episode, forward_episode_eval, ModelDims, RelationModelParams, RelationOptions,
};
use crate::rng::Rng;
use crate::types::{Episode, LabelSpace};

const STREAM_INIT: u64 = 0x01;
const STREAM_TRAIN: u64 = 0x02;
const STREAM_EVAL: u64 = 0x03;
const STREAM_CLUSTER: u64 = 0x04;

/// Training regime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    Supervised,
    Semi,
    Unsupervised,
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Regime::Supervised => f.write_str("supervised"),
            Regime::Semi => f.write_str("semi"),
            Regime::Unsupervised => f.write_str("unsupervised"),
        }
    }
}

/// Full run configuration. Every field has a desk-scale default and maps
/// onto a config-file key of the same name.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub regime: Regime,
    pub metric: MetricKind,
    /// `None` disables temporal-coherence regularization.
    pub coherence: Option<CoherenceKind>,
    pub weights: LossWeights,
    pub relation: RelationOptions,
    pub n_way: usize,
    pub k_shot: usize,
    pub queries_per_class: usize,
    pub episodes_per_epoch: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Episodes per evaluation; the desk profile uses 1,000.
    pub eval_episodes: usize,
    /// Attention heads; default 2 for C <= 64, 8 above.
    pub heads: Option<usize>,
    /// Correlation projection width; default C/2.
    pub corr_dim: Option<usize>,
    /// Unlabeled pool size per semi-supervised episode.
    pub unlabeled_per_episode: usize,
    /// Pseudo-label confidence threshold.
    pub confidence_tau: f64,
    /// Cluster count for the unsupervised regime; default
    /// min(150, videos / 4).
    pub n_clusters: Option<usize>,
    pub kmeans_max_iters: usize,
    /// Multiplier on the negative-distance logits inside the training
    /// cross-entropy. Cosine distances span at most [0, 2], so unscaled
    /// softmax logits are nearly flat and carry almost no gradient.
    /// Prediction argmax is unaffected.
    pub logit_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            regime: Regime::Supervised,
            metric: MetricKind::BiMhm,
            coherence: Some(CoherenceKind::SmoothTcr),
            weights: LossWeights::default(),
            relation: RelationOptions::default(),
            n_way: 5,
            k_shot: 1,
            queries_per_class: 1,
            episodes_per_epoch: 100,
            epochs: 30,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 7,
            eval_episodes: 1000,
            heads: None,
            corr_dim: None,
            unlabeled_per_episode: 100,
            confidence_tau: 0.7,
            n_clusters: None,
            kmeans_max_iters: 100,
            logit_scale: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_way == 0
            || self.k_shot == 0
            || self.queries_per_class == 0
            || self.episodes_per_epoch == 0
            || self.eval_episodes == 0
        {
            return Err(Error::InvalidConfig("episode counts must be positive".into()));
        }
        if self.learning_rate < 0.0 {
            return Err(Error::InvalidConfig("learning rate must be nonnegative".into()));
        }
        if self.logit_scale <= 0.0 {
            return Err(Error::InvalidConfig("logit_scale must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidConfig("Adam betas must lie in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.confidence_tau) && self.confidence_tau <= 1.0 {
            return Err(Error::InvalidConfig("confidence_tau must be nonnegative".into()));
        }
        self.weights.validate()
    }

    /// Model dimensions for a dataset shape and class count.
    pub fn model_dims(&self, channels: usize, t_max: usize, classes: usize) -> Result<ModelDims> {
        let heads = self.heads.unwrap_or(if channels <= 64 { 2 } else { 8 });
        let corr = self.corr_dim.unwrap_or((channels / 2).max(1));
        ModelDims::new(channels, heads, corr, t_max, classes.max(1))
    }
}

/// Adam with bias correction; state per parameter matrix in canonical
/// order.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: usize,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig, params: &RelationModelParams) -> Self {
        let shapes: Vec<Matrix> = params
            .named()
            .iter()
            .map(|(_, m)| Matrix::zeros(m.rows(), m.cols()))
            .collect();
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            step: 0,
            m: shapes.clone(),
            v: shapes,
        }
    }

    /// One update. Gradients must align with `params.named()` order; they
    /// are consumed as-is (the caller records a fresh tape per episode, so
    /// zeroing happens by construction).
    pub fn step(&mut self, params: &mut RelationModelParams, grads: &[Matrix]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((target, grad), (m, v)) in params
            .ordered_mut()
            .into_iter()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for ((t, &g), (m, v)) in target
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *t -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpisodeLog {
    pub step: usize,
    pub ce: f64,
    pub aux: f64,
    pub tcr: f64,
    pub total: f64,
    /// Query accuracy of this training episode.
    pub accuracy: f64,
}

/// Everything `train` produces.
pub struct TrainOutcome {
    pub params: RelationModelParams,
    pub log: Vec<EpisodeLog>,
    pub dims: ModelDims,
}

fn fraction_correct(logits: &Matrix, labels: &[Option<usize>]) -> f64 {
    let mut correct = 0usize;
    let mut counted = 0usize;
    for (row, label) in labels.iter().enumerate() {
        let Some(label) = label else { continue };
        counted += 1;
        let mut best = f64::NEG_INFINITY;
        let mut arg = 0;
        for c in 0..logits.cols() {
            if logits.get(row, c) > best {
                best = logits.get(row, c);
                arg = c;
            }
        }
        if arg == *label {
            correct += 1;
        }
    }
    if counted == 0 {
        0.0
    } else {
        correct as f64 / counted as f64
    }
}

/// Per-regime episode source used by both training and evaluation.
struct Sampler<'a> {
    ds: &'a Dataset,
    cfg: &'a TrainConfig,
    split: Split,
    assignments: Option<Vec<ClusterAssignment>>,
}

impl<'a> Sampler<'a> {
    fn sample(&self, rng: &mut Rng) -> Result<Episode> {
        match (self.cfg.regime, &self.assignments) {
            (Regime::Unsupervised, Some(assignments)) => sample_unsupervised(
                assignments,
                self.ds,
                self.cfg.n_way,
                self.cfg.k_shot,
                self.cfg.queries_per_class,
                rng,
            ),
            (Regime::Semi, _) => sample_semi_supervised(
                self.ds,
                self.split,
                self.cfg.n_way,
                self.cfg.k_shot,
                self.cfg.queries_per_class,
                self.cfg.unlabeled_per_episode,
                rng,
            ),
            _ => sample_supervised(
                self.ds,
                self.split,
                self.cfg.n_way,
                self.cfg.k_shot,
                self.cfg.queries_per_class,
                rng,
            ),
        }
    }
}

fn global_label_lookup(
    ds: &Dataset,
    space: &LabelSpace,
    assignments: Option<&[ClusterAssignment]>,
) -> HashMap<String, usize> {
    match assignments {
        Some(assignments) => assignments
            .iter()
            .map(|a| (a.video_id.clone(), a.cluster))
            .collect(),
        None => ds
            .index()
            .entries()
            .iter()
            .filter_map(|e| {
                let label = e.label.as_deref()?;
                Some((e.id.clone(), space.index_of(label)?))
            })
            .collect(),
    }
}

fn episode_global_labels(
    episode: &Episode,
    lookup: &HashMap<String, usize>,
) -> Vec<Option<usize>> {
    episode
        .support
        .iter()
        .map(|(f, _)| lookup.get(&f.video_id).copied())
        .chain(episode.query.iter().map(|(f, _)| lookup.get(&f.video_id).copied()))
        .collect()
}

/// Trains a fresh model on the meta-train split under `cfg`.
pub fn train(cfg: &TrainConfig, ds: &Dataset) -> Result<TrainOutcome> {
    train_from(cfg, ds, None)
}

/// Like [`train`] but optionally starting from explicit parameters instead
/// of the seeded initialization (warm starts, ablation baselines).
pub fn train_from(
    cfg: &TrainConfig,
    ds: &Dataset,
    initial: Option<RelationModelParams>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (t, c) = ds.shape()?;
    let base = Rng::new(cfg.seed);

    let train_space = ds.index().label_space(Split::MetaTrain);
    let assignments = match cfg.regime {
        Regime::Unsupervised => {
            let videos = ds
                .index()
                .entries()
                .iter()
                .filter(|e| e.split == Split::MetaTrain)
                .count();
            let clusters = cfg.n_clusters.unwrap_or_else(|| (videos / 4).clamp(1, 150));
            let mut rng = base.derive(STREAM_CLUSTER);
            Some(cluster_videos(ds, Split::MetaTrain, clusters, &mut rng, cfg.kmeans_max_iters)?)
        }
        _ => None,
    };

    let global_classes = match &assignments {
        Some(assignments) => assignments.iter().map(|a| a.cluster + 1).max().unwrap_or(1),
        None => train_space.global_classes(),
    };
    let dims = cfg.model_dims(c, t, global_classes)?;
    let lookup = global_label_lookup(ds, &train_space, assignments.as_deref());

    let mut rng_init = base.derive(STREAM_INIT);
    let mut params = match initial {
        Some(params) => params,
        None => RelationModelParams::init(&dims, &mut rng_init),
    };
    let mut adam = Adam::new(cfg, &params);
    let sampler = Sampler { ds, cfg, split: Split::MetaTrain, assignments };

    let mut log = Vec::with_capacity(cfg.epochs * cfg.episodes_per_epoch);
    let train_stream = base.derive(STREAM_TRAIN);
    for step in 0..cfg.epochs * cfg.episodes_per_epoch {
        let mut rng = train_stream.derive(step as u64);
        let mut episode = sampler.sample(&mut rng)?;
        if cfg.regime == Regime::Semi {
            episode = pseudo_label_and_augment(
                &episode,
                &params,
                cfg.relation,
                cfg.metric,
                cfg.confidence_tau,
                cfg.logit_scale,
            )?
            .episode;
        }
        let global_labels = episode_global_labels(&episode, &lookup);

        let tape = Tape::new();
        let pt = params.to_tape(&tape, true);
        let emb = forward_episode(&episode, &pt, cfg.relation)?;
        let logits = episode_logits_tape(&emb, &episode, cfg.metric)?;
        let scaled_logits = logits.scale(cfg.logit_scale);
        let (loss, terms) = total_loss(
            &episode,
            &emb,
            &scaled_logits,
            &pt,
            &global_labels,
            &cfg.weights,
            cfg.coherence,
        )?;
        if !terms.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                ce: terms.ce,
                aux: terms.aux,
                tcr: terms.tcr,
            });
        }
        backward(&loss)?;
        adam.step(&mut params, &pt.grads());

        let query_labels: Vec<Option<usize>> =
            episode.query.iter().map(|(_, l)| *l).collect();
        log.push(EpisodeLog {
            step,
            ce: terms.ce,
            aux: terms.aux,
            tcr: terms.tcr,
            total: terms.total,
            accuracy: fraction_correct(&logits.value(), &query_labels),
        });
    }

    Ok(TrainOutcome { params, log, dims })
}

/// Evaluation summary over independently sampled episodes.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub mean_accuracy: f64,
    /// Half-width of the 95% interval over per-episode accuracies.
    pub ci95: f64,
    pub per_episode: Vec<f64>,
    pub config_echo: String,
    pub wall_clock_secs: f64,
}

impl EvalReport {
    /// Line-oriented text emission used by the CLI. Deliberately excludes
    /// the wall clock so identical command + seed reproduces the artifact
    /// textually; timing goes to standard error instead.
    pub fn to_text(&self) -> String {
        format!(
            "episodes\t{}\nmean_accuracy\t{:.6}\nci95\t{:.6}\nconfig\t{}\n",
            self.per_episode.len(),
            self.mean_accuracy,
            self.ci95,
            self.config_echo
        )
    }
}

/// Accuracy of one frozen-parameter episode.
fn evaluate_episode(
    params: &RelationModelParams,
    cfg: &TrainConfig,
    sampler: &Sampler<'_>,
    rng: &mut Rng,
) -> Result<f64> {
    let mut episode = sampler.sample(rng)?;
    if cfg.regime == Regime::Semi && !episode.unlabeled.is_empty() {
        episode = pseudo_label_and_augment(
            &episode,
            params,
            cfg.relation,
            cfg.metric,
            cfg.confidence_tau,
            cfg.logit_scale,
        )?
        .episode;
    }
    let emb = forward_episode_eval(&episode, params, cfg.relation)?;
    let logits = episode_logits(&emb, &episode, cfg.metric)?;
    let labels: Vec<Option<usize>> = episode.query.iter().map(|(_, l)| *l).collect();
    Ok(fraction_correct(&logits, &labels))
}

/// Evaluates frozen parameters over `cfg.eval_episodes` meta-test episodes.
/// Episodes run in parallel against the shared parameter snapshot; each
/// draws its own derived seed, so the report is independent of thread
/// count.
pub fn evaluate(
    params: &RelationModelParams,
    ds: &Dataset,
    cfg: &TrainConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    let started = Instant::now();

    let train_space = ds.index().label_space(Split::MetaTrain);
    let test_space = ds.index().label_space(Split::MetaTest);
    for i in 0..test_space.global_classes() {
        let name = test_space.name_of(i).unwrap();
        if train_space.index_of(name).is_some() {
            return Err(Error::InvalidConfig(format!(
                "class `{name}` appears in both meta-train and meta-test"
            )));
        }
    }

    let sampler = Sampler { ds, cfg, split: Split::MetaTest, assignments: None };
    let eval_stream = Rng::new(cfg.seed).derive(STREAM_EVAL);
    let per_episode: Vec<f64> = (0..cfg.eval_episodes)
        .into_par_iter()
        .map(|i| {
            let mut rng = eval_stream.derive(i as u64);
            evaluate_episode(params, cfg, &sampler, &mut rng)
        })
        .collect::<Result<_>>()?;

    let n = per_episode.len() as f64;
    let mean = per_episode.iter().sum::<f64>() / n;
    let ci95 = if per_episode.len() > 1 {
        let var = per_episode.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (n - 1.0);
        1.96 * (var / n).sqrt()
    } else {
        0.0
    };
    Ok(EvalReport {
        mean_accuracy: mean,
        ci95,
        per_episode,
        config_echo: serde_json::to_string(cfg)?,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}
