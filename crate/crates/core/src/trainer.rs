//! Joint adversarial training: task loss on labeled windows, discriminator
//! loss on (target, anchor, positive) triplets, coupled through gradient
//! reversal so one backward pass yields `∂L_Q − λ∂L_D` for the extractor.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sum_all, Adam, ParamId, Tape, Tensor, Var};
use crate::corpus::{tokenize_all, LengthLimits, RawExample, TokenizedExample, Vocabulary};
use crate::discriminator::{
    discriminator_loss, epoch_distances, DomainTriplet, LossKind, TraceRow, TripletCls,
};
use crate::encoder::{encode, Graph};
use crate::error::{Error, Result};
use crate::eval_metrics::{compute_metrics, GoldenAnswer, MetricReport, RANK_CUTOFF};
use crate::model::{Model, ModelConfig};
use crate::mrc_head::{mrc_loss, span_distribution, PredictionList};

/// Any loss above this magnitude counts as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GrlScope {
    /// Reverse the whole discriminator loss into the extractor.
    #[serde(rename = "full_L_D")]
    Full,
    /// Reverse only the metric term; the auxiliary head reads detached features.
    #[serde(rename = "triplet_only")]
    TripletOnly,
}

impl std::str::FromStr for GrlScope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full_L_D" | "full" => Ok(GrlScope::Full),
            "triplet_only" => Ok(GrlScope::TripletOnly),
            other => Err(Error::Config(format!("unknown grl scope {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaSchedule {
    pub start: f64,
    pub increment: f64,
    pub every: usize,
    pub cap: f64,
}

impl Default for LambdaSchedule {
    fn default() -> Self {
        Self { start: 0.0, increment: 0.01, every: 10, cap: 0.04 }
    }
}

pub fn lambda_at(epoch: usize, s: &LambdaSchedule) -> f64 {
    let steps = if s.every == 0 { 0 } else { epoch / s.every };
    (s.start + s.increment * steps as f64).clamp(0.0, s.cap.max(0.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Triplets per step.
    pub batch_size: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub lambda: LambdaSchedule,
    pub seed: u64,
    pub loss_kind: LossKind,
    pub aux_enabled: bool,
    pub discriminator_enabled: bool,
    pub labeled_target_ratio: f64,
    pub grl_scope: GrlScope,
    /// Keep every step's `[CLS]` triplets for recomputing the distance trace.
    pub keep_cls_vectors: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            batch_size: 12,
            epochs: 50,
            steps_per_epoch: 10,
            lambda: LambdaSchedule::default(),
            seed: 42,
            loss_kind: LossKind::Triplet,
            aux_enabled: true,
            discriminator_enabled: true,
            labeled_target_ratio: 0.0,
            grl_scope: GrlScope::Full,
            keep_cls_vectors: false,
        }
    }
}

impl TrainConfig {
    /// Settings for the desk-scale encoder and corpus: a larger step size and
    /// smaller batches than the full-size defaults, 50 steps per epoch.
    pub fn desk() -> Self {
        Self { learning_rate: 3e-3, batch_size: 8, steps_per_epoch: 50, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.batch_size == 0 || self.steps_per_epoch == 0 {
            return Err(Error::Config("batch_size and steps_per_epoch must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.labeled_target_ratio) {
            return Err(Error::Config(format!(
                "labeled_target_ratio {} outside [0, 1]",
                self.labeled_target_ratio
            )));
        }
        let l = &self.lambda;
        if !(l.start >= 0.0 && l.increment >= 0.0 && l.cap >= 0.0) {
            return Err(Error::Config("lambda schedule values must be non-negative".into()));
        }
        Ok(())
    }
}

/// Tokenized training windows.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub source: Vec<TokenizedExample>,
    pub target: Vec<TokenizedExample>,
}

/// Target-train examples with the first `round(ratio · n)` kept labeled and the
/// rest reduced to masked contexts. The labeled ones must come from the
/// leading labeled pool.
pub fn semi_supervised_split(target_train: &[RawExample], ratio: f64) -> Result<Vec<RawExample>> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!("labeled_target_ratio {ratio} outside [0, 1]")));
    }
    let want = (ratio * target_train.len() as f64).round() as usize;
    let pool = target_train.iter().take_while(|e| e.is_labeled()).count();
    if want > pool {
        return Err(Error::Config(format!(
            "ratio {ratio} needs {want} labeled target examples but only {pool} are available"
        )));
    }
    Ok(target_train
        .iter()
        .enumerate()
        .map(|(i, e)| if i < want { e.clone() } else { e.masked() })
        .collect())
}

pub fn prepare_data(
    source: &[RawExample],
    target_train: &[RawExample],
    vocab: &Vocabulary,
    limits: &LengthLimits,
    labeled_target_ratio: f64,
) -> Result<TrainData> {
    let target = semi_supervised_split(target_train, labeled_target_ratio)?;
    Ok(TrainData {
        source: tokenize_all(source, vocab, limits, true)?,
        target: tokenize_all(&target, vocab, limits, true)?,
    })
}

/// Indices into the source and target windows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletIndex {
    pub anchor: usize,
    pub positive: usize,
    pub target: usize,
}

/// Draws `batch` triplets: two distinct source windows and one target window,
/// uniformly. The first source draw is the anchor.
pub fn sample_step<R: Rng + ?Sized>(n_source: usize, n_target: usize, batch: usize, rng: &mut R) -> Result<Vec<TripletIndex>> {
    if n_source < 2 {
        return Err(Error::Sampling(format!("need at least 2 source examples, got {n_source}")));
    }
    if n_target == 0 {
        return Err(Error::Sampling("empty target set".into()));
    }
    Ok((0..batch)
        .map(|_| {
            let anchor = rng.gen_range(0..n_source);
            let mut positive = rng.gen_range(0..n_source - 1);
            if positive >= anchor {
                positive += 1;
            }
            TripletIndex { anchor, positive, target: rng.gen_range(0..n_target) }
        })
        .collect())
}

pub struct StepOutput {
    pub grads: Vec<(ParamId, Tensor)>,
    pub l_q: f64,
    pub l_d: f64,
    /// `L_Q − λ L_D`.
    pub l_total: f64,
    pub cls: Vec<TripletCls>,
}

/// One forward and backward pass. `dropout = None` runs in evaluation mode.
pub fn compute_gradients(
    model: &Model,
    data: &TrainData,
    batch: &[TripletIndex],
    lambda: f64,
    cfg: &TrainConfig,
    dropout: Option<ChaCha8Rng>,
) -> Result<StepOutput> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let tape = Tape::new();
    let g = match dropout {
        Some(rng) => Graph::train(&tape, &model.store, rng),
        None => Graph::eval(&tape, &model.store),
    };
    let mut task_terms = Vec::new();
    let mut disc_terms = Vec::new();
    let mut cls = Vec::new();
    for t in batch {
        let (a, p, x) = (&data.source[t.anchor], &data.source[t.positive], &data.target[t.target]);
        let fa = encode(&g, &model.encoder, a)?.features;
        let fp = encode(&g, &model.encoder, p)?.features;
        let fx = encode(&g, &model.encoder, x)?.features;
        for (ex, f) in [(a, fa), (p, fp), (x, fx)] {
            if let Some((s, e)) = ex.golden_span() {
                let scores = span_distribution(&g, f, &model.head)?;
                task_terms.push(mrc_loss(&scores, s, e)?);
            }
        }
        if cfg.discriminator_enabled {
            let triplet = DomainTriplet {
                target: fx.gradient_reversal(lambda)?,
                anchor: fa.gradient_reversal(lambda)?,
                positive: fp.gradient_reversal(lambda)?,
                anchor_span: a.golden_span(),
            };
            let aux = cfg.aux_enabled && triplet.anchor_span.is_some();
            let aux_features = match cfg.grl_scope {
                GrlScope::Full => None,
                GrlScope::TripletOnly => Some(fa.detach()),
            };
            let l = discriminator_loss(&g, &triplet, &model.disc, cfg.loss_kind, aux, aux_features)?;
            cls.push(TripletCls::from_vars(l.cls_anchor, l.cls_positive, l.cls_target));
            disc_terms.push(l.total);
        }
    }
    let l_q = mean(&task_terms)?;
    let l_d = mean(&disc_terms)?;
    let objective = match (l_q, l_d) {
        (Some(q), Some(d)) => q.add(d)?,
        (Some(q), None) => q,
        (None, Some(d)) => d,
        (None, None) => return Err(Error::Contract("batch yields neither task nor discriminator loss".into())),
    };
    tape.backward(objective)?;
    let lq = l_q.map_or(0.0, |v| v.item());
    let ld = l_d.map_or(0.0, |v| v.item());
    Ok(StepOutput { grads: tape.param_grads(), l_q: lq, l_d: ld, l_total: lq - lambda * ld, cls })
}

fn mean<'t>(terms: &[Var<'t>]) -> Result<Option<Var<'t>>> {
    if terms.is_empty() {
        return Ok(None);
    }
    Ok(Some(sum_all(terms)?.scale(1.0 / terms.len() as f64)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lambda: f64,
    pub l_q: f64,
    pub l_d: f64,
    pub l_total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub model: ModelConfig,
    pub epochs: Vec<EpochRecord>,
    pub lambda_trace: Vec<f64>,
    pub distance_trace: Vec<TraceRow>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub distance_trace_path: Option<String>,
    pub metrics: Option<MetricReport>,
    /// Set when training stopped on a non-finite or exploding loss.
    pub failure: Option<String>,
    pub steps: usize,
}

pub struct Outcome {
    /// Parameters after the last successful step.
    pub model: Model,
    pub report: TrainReport,
    pub predictions: Option<BTreeMap<String, PredictionList>>,
    /// Per-epoch `[CLS]` triplets when `keep_cls_vectors` is set.
    pub cls_log: Vec<Vec<TripletCls>>,
}

/// Held-out windows plus their gold answers.
pub struct EvalSet {
    pub windows: Vec<TokenizedExample>,
    pub golds: Vec<GoldenAnswer>,
}

impl EvalSet {
    pub fn from_raw(examples: &[RawExample], vocab: &Vocabulary, limits: &LengthLimits) -> Result<Self> {
        let golds = examples
            .iter()
            .filter_map(|e| e.answer.as_ref().map(|a| GoldenAnswer { id: e.id.clone(), answer: a.text.clone() }))
            .collect();
        Ok(Self { windows: tokenize_all(examples, vocab, limits, true)?, golds })
    }
}

pub fn evaluate(model: &Model, set: &EvalSet) -> Result<(MetricReport, BTreeMap<String, PredictionList>)> {
    let preds = model.predict(&set.windows, RANK_CUTOFF)?;
    let map = preds.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    Ok((compute_metrics(&map, &set.golds)?, preds))
}

fn finite_guard(epoch: usize, out: &StepOutput) -> Option<String> {
    for (name, v) in [("L_Q", out.l_q), ("L_D", out.l_d)] {
        if !v.is_finite() {
            return Some(format!("epoch {epoch}: {name} is not finite"));
        }
        if v.abs() > DIVERGENCE_LIMIT {
            return Some(format!("epoch {epoch}: {name} = {v:e} exceeds {DIVERGENCE_LIMIT:e}"));
        }
    }
    if out.grads.iter().any(|(_, g)| !g.is_finite()) {
        return Some(format!("epoch {epoch}: non-finite gradient"));
    }
    None
}

/// Seeds for the initialization, sampling and dropout streams.
fn stream_seeds(seed: u64) -> (u64, u64, u64) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (r.gen(), r.gen(), r.gen())
}

pub fn run_experiment(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    data: &TrainData,
    eval: Option<&EvalSet>,
) -> Result<Outcome> {
    cfg.validate()?;
    let (init_seed, sample_seed, dropout_seed) = stream_seeds(cfg.seed);
    let mut model = Model::new(model_cfg.clone(), init_seed)?;
    let mut sampler = ChaCha8Rng::seed_from_u64(sample_seed);
    let mut dropout = ChaCha8Rng::seed_from_u64(dropout_seed);
    let mut adam = Adam::new(&model.store, cfg.learning_rate);

    let mut report = TrainReport {
        config: cfg.clone(),
        model: model_cfg.clone(),
        epochs: Vec::new(),
        lambda_trace: Vec::new(),
        distance_trace: Vec::new(),
        distance_trace_path: None,
        metrics: None,
        failure: None,
        steps: 0,
    };
    let mut cls_log = Vec::new();

    'epochs: for epoch in 0..cfg.epochs {
        let lambda = lambda_at(epoch, &cfg.lambda);
        report.lambda_trace.push(lambda);
        let (mut sq, mut sd, mut st) = (0.0, 0.0, 0.0);
        let mut epoch_cls = Vec::new();
        for _ in 0..cfg.steps_per_epoch {
            let batch = sample_step(data.source.len(), data.target.len(), cfg.batch_size, &mut sampler)?;
            let stream = ChaCha8Rng::seed_from_u64(dropout.gen());
            let out = compute_gradients(&model, data, &batch, lambda, cfg, Some(stream))?;
            if let Some(reason) = finite_guard(epoch, &out) {
                report.failure = Some(reason);
                break 'epochs;
            }
            adam.step(&mut model.store, &out.grads);
            report.steps += 1;
            sq += out.l_q;
            sd += out.l_d;
            st += out.l_total;
            epoch_cls.extend(out.cls);
        }
        let n = cfg.steps_per_epoch as f64;
        report.epochs.push(EpochRecord { epoch, lambda, l_q: sq / n, l_d: sd / n, l_total: st / n });
        if cfg.discriminator_enabled {
            let (ss, stg) = epoch_distances(&epoch_cls)?;
            report.distance_trace.push(TraceRow {
                epoch,
                mean_d_source_source: ss,
                mean_d_source_target: stg,
                loss_kind: cfg.loss_kind,
            });
        }
        if cfg.keep_cls_vectors {
            cls_log.push(epoch_cls);
        }
    }

    let mut predictions = None;
    if let (Some(set), None) = (eval, &report.failure) {
        let (m, p) = evaluate(&model, set)?;
        report.metrics = Some(m);
        predictions = Some(p);
    }
    Ok(Outcome { model, report, predictions, cls_log })
}
