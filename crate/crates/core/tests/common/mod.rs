//! Independent reference implementations used as oracles by the integration
//! and acceptance tests. Nothing here calls the library code it checks.

#![allow(dead_code)]

use std::collections::BTreeMap;

use mrcadapt::autodiff::{sum_all, ParamId, Tape, Tensor};
use mrcadapt::corpus::{generate_corpus, CorpusSpec, Domain, TokenizedExample};
use mrcadapt::discriminator::{discriminator_loss, DomainTriplet, LossKind};
use mrcadapt::encoder::{encode, Graph};
use mrcadapt::model::{Model, ModelConfig};
use mrcadapt::mrc_head::{mrc_loss, span_distribution};
use mrcadapt::trainer::{prepare_data, TrainData, TripletIndex};

/// Central difference of `f` along every coordinate of `x`.
pub fn central_differences(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut work = x.to_vec();
    (0..x.len())
        .map(|i| {
            work[i] = x[i] + h;
            let up = f(&work);
            work[i] = x[i] - h;
            let down = f(&work);
            work[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, 1e-12)`; the floor keeps exactly-zero
/// gradients from comparing round-off against round-off.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1e-12)
}

/// Small deterministic pseudo-random stream (splitmix64), independent of the
/// generators used by the library.
pub struct Stream(u64);

impl Stream {
    pub fn new(seed: u64) -> Self {
        Self(seed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)`.
    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }

    pub fn vec(&mut self, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| self.uniform(lo, hi)).collect()
    }
}

/// A model of a few hundred parameters at a generic (perturbed) point, its
/// data with half the target labeled, and a two-triplet batch.
pub fn tiny_setup() -> (Model, TrainData, Vec<TripletIndex>) {
    let spec = CorpusSpec {
        entity_pool: 20,
        relation_pool: 4,
        filler_pool: 6,
        separator_pool: 2,
        question_pool: 2,
        n_source: 6,
        n_target_labeled: 2,
        n_target_unlabeled: 2,
        n_target_test: 2,
        context_len: (6, 8),
        ..CorpusSpec::default()
    };
    let corpus = generate_corpus(&spec).unwrap();
    let mut mc = ModelConfig::desk(corpus.vocab.len());
    mc.encoder.hidden_size = 4;
    mc.encoder.num_heads = 2;
    mc.encoder.ffn_inner_size = 6;
    mc.encoder.num_layers = 1;
    mc.encoder.max_positions = 24;
    mc.encoder.dropout_rate = 0.0;
    mc.limits.max_seq_len = 24;
    mc.limits.max_query_len = 8;
    mc.limits.doc_stride = 8;
    let mut model = Model::new(mc.clone(), 3).unwrap();
    // move away from the tiny-gradient initialisation to a generic point
    let mut s = Stream::new(99);
    let ids: Vec<ParamId> = model.store.ids().collect();
    for id in ids {
        for v in model.store.get_mut(id).data_mut() {
            *v += s.uniform(-0.4, 0.4);
        }
    }
    let data = prepare_data(&corpus.source, &corpus.target_train, &corpus.vocab, &mc.limits, 0.5).unwrap();
    let labeled = data.target.iter().position(|t| t.is_labeled).unwrap();
    let masked = data.target.iter().position(|t| !t.is_labeled).unwrap();
    let batch = vec![
        TripletIndex { anchor: 0, positive: 1, target: labeled },
        TripletIndex { anchor: 2, positive: 0, target: masked },
    ];
    (model, data, batch)
}

// ---------------------------------------------------------------- losses

/// The two objectives built as separate graphs, without any gradient reversal.
pub struct SplitLosses {
    pub l_q: f64,
    pub l_d: f64,
    pub grad_q: BTreeMap<ParamId, Vec<f64>>,
    pub grad_d: BTreeMap<ParamId, Vec<f64>>,
}

fn task_loss_value<'t>(g: &Graph<'t, '_>, model: &Model, data: &TrainData, batch: &[TripletIndex]) -> Option<mrcadapt::autodiff::Var<'t>> {
    let mut terms = Vec::new();
    for t in batch {
        for ex in [&data.source[t.anchor], &data.source[t.positive], &data.target[t.target]] {
            if let Some((s, e)) = ex.golden_span() {
                let f = encode(g, &model.encoder, ex).unwrap().features;
                let scores = span_distribution(g, f, &model.head).unwrap();
                terms.push(mrc_loss(&scores, s, e).unwrap());
            }
        }
    }
    if terms.is_empty() {
        return None;
    }
    let n = terms.len() as f64;
    Some(sum_all(&terms).unwrap().scale(1.0 / n))
}

fn disc_loss_value<'t>(
    g: &Graph<'t, '_>,
    model: &Model,
    data: &TrainData,
    batch: &[TripletIndex],
    kind: LossKind,
    aux: bool,
) -> mrcadapt::autodiff::Var<'t> {
    let mut terms = Vec::new();
    for t in batch {
        let anchor = &data.source[t.anchor];
        let triplet = DomainTriplet {
            anchor: encode(g, &model.encoder, anchor).unwrap().features,
            positive: encode(g, &model.encoder, &data.source[t.positive]).unwrap().features,
            target: encode(g, &model.encoder, &data.target[t.target]).unwrap().features,
            anchor_span: anchor.golden_span(),
        };
        let use_aux = aux && triplet.anchor_span.is_some();
        terms.push(discriminator_loss(g, &triplet, &model.disc, kind, use_aux, None).unwrap().total);
    }
    let n = terms.len() as f64;
    sum_all(&terms).unwrap().scale(1.0 / n)
}

fn grads(tape: &Tape) -> BTreeMap<ParamId, Vec<f64>> {
    tape.param_grads().into_iter().map(|(id, t)| (id, t.into_data())).collect()
}

/// `L_Q` and `L_D` with their gradients from two independent backward passes
/// in evaluation mode.
pub fn split_losses(model: &Model, data: &TrainData, batch: &[TripletIndex], kind: LossKind, aux: bool) -> SplitLosses {
    let tq = Tape::new();
    let gq = Graph::eval(&tq, &model.store);
    let q = task_loss_value(&gq, model, data, batch).expect("batch has labeled members");
    tq.backward(q).unwrap();
    let td = Tape::new();
    let gd = Graph::eval(&td, &model.store);
    let d = disc_loss_value(&gd, model, data, batch, kind, aux);
    td.backward(d).unwrap();
    SplitLosses { l_q: q.item(), l_d: d.item(), grad_q: grads(&tq), grad_d: grads(&td) }
}

/// Forward-only values of `(L_Q, L_D)`.
pub fn loss_values(model: &Model, data: &TrainData, batch: &[TripletIndex], kind: LossKind, aux: bool) -> (f64, f64) {
    let tape = Tape::new();
    let g = Graph::eval(&tape, &model.store);
    let q = task_loss_value(&g, model, data, batch).map_or(0.0, |v| v.item());
    let d = disc_loss_value(&g, model, data, batch, kind, aux).item();
    (q, d)
}

pub fn cosine_distance(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    1.0 - dot / (nu * nv)
}

// ---------------------------------------------------------------- decoding

/// One window over a short context of repeated words, no question text.
pub fn tiny_window(s: &mut Stream) -> TokenizedExample {
    let words = ["x", "y", "zz", "x", "q"];
    let n_ctx = 1 + s.below(7);
    let n_q = 1 + s.below(3);
    let mut context = String::new();
    let mut offsets = vec![None; n_q + 2];
    for i in 0..n_ctx {
        if i > 0 {
            context.push(' ');
        }
        let w = words[s.below(words.len())];
        let b = context.chars().count();
        context.push_str(w);
        offsets.push(Some((b, b + w.len())));
    }
    offsets.push(None);
    let len = offsets.len();
    TokenizedExample {
        example_id: "r".into(),
        window: 0,
        domain: Domain::Target,
        input_ids: vec![5; len],
        segment_ids: (0..len).map(|i| usize::from(i > n_q + 1)).collect(),
        context_range: n_q + 2..n_q + 2 + n_ctx,
        offsets,
        answer_start: None,
        answer_end: None,
        is_labeled: false,
        masked_question: true,
        context: context.as_str().into(),
        gold_text: None,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Span {
    pub text: String,
    pub start: usize,
    pub end: usize,
    pub score: f64,
}

/// Exhaustive top-`n` spans of one window: every `(s, e)` pair over the full
/// sequence is scored, invalid ones are discarded, and the best remaining
/// span is selected repeatedly, skipping repeated texts.
pub fn brute_force_n_best(p_start: &[f64], p_end: &[f64], ex: &TokenizedExample, n: usize, max_len: usize) -> Vec<Span> {
    let len = ex.input_ids.len();
    let mut pool = Vec::new();
    for s in 0..len {
        for e in 0..len {
            let valid = s <= e
                && e - s < max_len
                && ex.context_range.contains(&s)
                && ex.context_range.contains(&e)
                && ex.offsets[s].is_some()
                && ex.offsets[e].is_some();
            if valid {
                let cb = ex.offsets[s].unwrap().0;
                let ce = ex.offsets[e].unwrap().1;
                let text: String = ex.context.chars().skip(cb).take(ce - cb).collect();
                pool.push((p_start[s] * p_end[e], cb, ce, s, e, text));
            }
        }
    }
    let mut out: Vec<Span> = Vec::new();
    while out.len() < n && !pool.is_empty() {
        let mut best = 0;
        for i in 1..pool.len() {
            let (a, b) = (&pool[i], &pool[best]);
            let better = a.0 > b.0 || (a.0 == b.0 && (a.1 < b.1 || (a.1 == b.1 && a.2 < b.2)));
            if better {
                best = i;
            }
        }
        let c = pool.swap_remove(best);
        if out.iter().all(|o| o.text != c.5) {
            out.push(Span { text: c.5, start: c.3, end: c.4, score: c.0 });
        }
    }
    out
}

// ---------------------------------------------------------------- metrics

fn normalize(s: &str) -> String {
    let mut cleaned = String::new();
    for ch in s.chars() {
        if ch.is_ascii_punctuation() {
            cleaned.push(' ');
        } else {
            cleaned.extend(ch.to_lowercase());
        }
    }
    let kept: Vec<&str> = cleaned.split_whitespace().filter(|w| !["a", "an", "the"].contains(w)).collect();
    kept.join(" ")
}

fn overlap_f1(pred: &str, gold: &str) -> f64 {
    let mut p: Vec<String> = normalize(pred).split(' ').filter(|w| !w.is_empty()).map(String::from).collect();
    let mut g: Vec<String> = normalize(gold).split(' ').filter(|w| !w.is_empty()).map(String::from).collect();
    if p.is_empty() || g.is_empty() {
        return 0.0;
    }
    let (np, ng) = (p.len() as f64, g.len() as f64);
    p.sort();
    g.sort();
    let (mut i, mut j, mut common) = (0, 0, 0.0);
    while i < p.len() && j < g.len() {
        match p[i].cmp(&g[j]) {
            std::cmp::Ordering::Equal => {
                common += 1.0;
                i += 1;
                j += 1;
            }
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
        }
    }
    if common == 0.0 {
        return 0.0;
    }
    let (prec, rec) = (common / np, common / ng);
    2.0 * prec * rec / (prec + rec)
}

/// `(sacc, lacc, mrr, em, f1)` from ranked answer lists; a missing list is unanswered.
pub fn brute_force_scores(ranked: &BTreeMap<String, Vec<String>>, golds: &[(String, String)]) -> [f64; 5] {
    let mut acc = [0.0; 5];
    for (id, gold) in golds {
        let list = ranked.get(id).cloned().unwrap_or_default();
        let g = normalize(gold);
        let rank = list.iter().take(5).position(|p| normalize(p) == g);
        if rank == Some(0) {
            acc[0] += 1.0;
        }
        if let Some(r) = rank {
            acc[1] += 1.0;
            acc[2] += 1.0 / (r + 1) as f64;
        }
        if let Some(top) = list.first() {
            if normalize(top) == g {
                acc[3] += 1.0;
            }
            acc[4] += overlap_f1(top, gold);
        }
    }
    acc.map(|v| v / golds.len() as f64)
}

// ---------------------------------------------------------------- dbscan

fn find(parent: &mut [usize], i: usize) -> usize {
    let mut r = i;
    while parent[r] != r {
        r = parent[r];
    }
    let mut i = i;
    while parent[i] != r {
        let next = parent[i];
        parent[i] = r;
        i = next;
    }
    r
}

/// Reference DBSCAN: core points have at least `min_samples` points (itself
/// included) within `eps`; core points within `eps` of each other are merged
/// with union-find; clusters are numbered by smallest member; each border
/// point takes the cluster of its nearest core point (ties to the smaller
/// cluster number); the rest is noise (-1).
pub fn reference_dbscan(d: &[Vec<f64>], eps: f64, min_samples: usize) -> Vec<i64> {
    let n = d.len();
    let core: Vec<bool> = (0..n).map(|i| (0..n).filter(|&j| d[i][j] <= eps).count() >= min_samples).collect();
    let mut parent: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for j in 0..n {
            if core[i] && core[j] && d[i][j] <= eps {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut number: BTreeMap<usize, i64> = BTreeMap::new();
    let mut labels = vec![-1i64; n];
    for i in 0..n {
        if core[i] {
            let root = find(&mut parent, i);
            let next = number.len() as i64;
            labels[i] = *number.entry(root).or_insert(next);
        }
    }
    let core_labels = labels.clone();
    for i in 0..n {
        if core[i] {
            continue;
        }
        let mut best: Option<(f64, i64)> = None;
        for j in 0..n {
            if core[j] && d[i][j] <= eps {
                let cand = (d[i][j], core_labels[j]);
                best = match best {
                    None => Some(cand),
                    Some(b) if cand.0 < b.0 || (cand.0 == b.0 && cand.1 < b.1) => Some(cand),
                    keep => keep,
                };
            }
        }
        if let Some((_, l)) = best {
            labels[i] = l;
        }
    }
    labels
}

pub fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).unwrap()
}
