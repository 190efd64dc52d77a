//! Start/end span head over per-token features, its loss, and n-best decoding.

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tensor, Var};
use crate::corpus::TokenizedExample;
use crate::encoder::Graph;
use crate::error::{Error, Result};

/// `W^start`, `W^end ∈ R^H`, no bias.
#[derive(Clone, Debug)]
pub struct MrcHeadParams {
    pub w_start: ParamId,
    pub w_end: ParamId,
    pub hidden: usize,
}

impl MrcHeadParams {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, hidden: usize, rng: &mut R) -> Self {
        Self {
            w_start: store.insert_normal(format!("{prefix}.w_start"), &[hidden, 1], 0.02, rng),
            w_end: store.insert_normal(format!("{prefix}.w_end"), &[hidden, 1], 0.02, rng),
            hidden,
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.w_start, self.w_end]
    }
}

/// Log-probabilities over all `n_seq` positions, on the tape.
#[derive(Clone, Copy, Debug)]
pub struct SpanScores<'t> {
    pub log_p_start: Var<'t>,
    pub log_p_end: Var<'t>,
}

impl<'t> SpanScores<'t> {
    pub fn distribution(&self) -> SpanDistribution {
        let exp = |v: Var<'t>| v.value().data().iter().map(|x| x.exp()).collect();
        SpanDistribution {
            p_start: exp(self.log_p_start),
            p_end: exp(self.log_p_end),
        }
    }
}

/// Plain start/end probability vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpanDistribution {
    pub p_start: Vec<f64>,
    pub p_end: Vec<f64>,
}

/// `p_l = softmax_l(W · h_l)` for start and end, normalized over the whole sequence.
pub fn span_distribution<'t>(g: &Graph<'t, '_>, features: Var<'t>, head: &MrcHeadParams) -> Result<SpanScores<'t>> {
    let shape = features.shape();
    if shape.len() != 2 || shape[1] != head.hidden {
        return Err(Error::dim("span_distribution", &shape, &[head.hidden]));
    }
    let start = features.matmul(g.p(head.w_start))?.transpose()?;
    let end = features.matmul(g.p(head.w_end))?.transpose()?;
    Ok(SpanScores {
        log_p_start: start.log_softmax()?,
        log_p_end: end.log_softmax()?,
    })
}

/// `L = -(log p_start[y_start] + log p_end[y_end]) / 2`.
pub fn mrc_loss<'t>(scores: &SpanScores<'t>, y_start: usize, y_end: usize) -> Result<Var<'t>> {
    let n = scores.log_p_start.value().len();
    if y_start >= n || y_end >= n {
        return Err(Error::Label(format!(
            "golden span ({y_start}, {y_end}) outside sequence of {n}"
        )));
    }
    let s = scores.log_p_start.cross_entropy_from_logprobs(y_start)?;
    let e = scores.log_p_end.cross_entropy_from_logprobs(y_end)?;
    Ok(s.add(e)?.scale(0.5))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub text: String,
    pub start_token: usize,
    pub end_token: usize,
    pub score: f64,
}

/// Ranked answer candidates for one question.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PredictionList {
    pub predictions: Vec<Prediction>,
}

impl PredictionList {
    pub fn top(&self) -> Option<&Prediction> {
        self.predictions.first()
    }

    pub fn texts(&self) -> Vec<&str> {
        self.predictions.iter().map(|p| p.text.as_str()).collect()
    }
}

struct Candidate {
    score: f64,
    char_start: usize,
    char_end: usize,
    window: usize,
    start: usize,
    end: usize,
}

/// Top-`n` spans by `p_start[s] · p_end[e]` over every window of a question.
///
/// Candidates satisfy `s <= e`, `e - s + 1 <= max_answer_len` and lie in the
/// context region. Ties break on earlier character start, then earlier end.
/// Candidates whose text exactly repeats a higher-ranked one are dropped.
pub fn decode_n_best(
    windows: &[(&SpanDistribution, &TokenizedExample)],
    n: usize,
    max_answer_len: usize,
) -> Result<PredictionList> {
    if n == 0 || max_answer_len == 0 {
        return Err(Error::Contract("n and max_answer_len must be positive".into()));
    }
    let mut cands = Vec::new();
    for (w, (dist, ex)) in windows.iter().enumerate() {
        if dist.p_start.len() != ex.len() || dist.p_end.len() != ex.len() {
            return Err(Error::dim("decode_n_best", &[dist.p_start.len()], &[ex.len()]));
        }
        let ctx = ex.context_range.clone();
        for s in ctx.clone() {
            let last = (s + max_answer_len).min(ctx.end);
            for e in s..last {
                let (Some((cb, _)), Some((_, ce))) = (ex.offsets[s], ex.offsets[e]) else {
                    continue;
                };
                cands.push(Candidate {
                    score: dist.p_start[s] * dist.p_end[e],
                    char_start: cb,
                    char_end: ce,
                    window: w,
                    start: s,
                    end: e,
                });
            }
        }
    }
    if cands.is_empty() {
        return Err(Error::Decoding("no context tokens to decode from".into()));
    }
    cands.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.char_start.cmp(&b.char_start))
            .then(a.char_end.cmp(&b.char_end))
            .then(a.window.cmp(&b.window))
    });
    let mut seen = HashSet::new();
    let mut predictions = Vec::with_capacity(n);
    for c in cands {
        let ex = windows[c.window].1;
        let text = ex.span_text(c.start, c.end).unwrap_or_default();
        if !seen.insert(text.clone()) {
            continue;
        }
        predictions.push(Prediction {
            text,
            start_token: c.start,
            end_token: c.end,
            score: c.score,
        });
        if predictions.len() == n {
            break;
        }
    }
    Ok(PredictionList { predictions })
}

/// Independent argmax of start and end probabilities.
pub fn argmax_span(dist: &SpanDistribution) -> (usize, usize) {
    let argmax = |v: &[f64]| {
        v.iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
            .0
    };
    (argmax(&dist.p_start), argmax(&dist.p_end))
}

/// A tape leaf holding fixed log-probabilities; handy for exercising the loss.
pub fn scores_from_log_probs<'t>(tape: &'t crate::autodiff::Tape, start: &[f64], end: &[f64]) -> SpanScores<'t> {
    SpanScores {
        log_p_start: tape.var(Tensor::new(vec![1, start.len()], start.to_vec()).expect("row")),
        log_p_end: tape.var(Tensor::new(vec![1, end.len()], end.to_vec()).expect("row")),
    }
}
