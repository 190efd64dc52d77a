//! Template-generated two-domain reading-comprehension corpus.
//!
//! Every context is a run of facts `SUBJ REL OBJ FILLER* SEP`. A question
//! `QWORD REL SUBJ` asks for the object phrase of the fact whose subject it
//! names, so answers are always a template slot. Each domain draws every
//! token from its own word pools; a configurable fraction of each pool is
//! shared between domains, which fixes the Jaccard overlap of the two
//! domains' vocabularies.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{build_vocabulary, AnswerSpan, Domain, RawExample, Vocabulary};
use crate::error::{Error, Result};

/// Distribution of the shared vocabulary over word roles.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sharing {
    /// Every role shares the same fraction of its pool.
    Proportional,
    /// Separators, question words, relations and fillers are shared before
    /// any entity, so the domains differ mostly in content words.
    FunctionFirst,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    /// Per-domain pool sizes by role.
    pub entity_pool: usize,
    pub relation_pool: usize,
    pub filler_pool: usize,
    pub separator_pool: usize,
    pub question_pool: usize,
    /// Jaccard overlap of the two domains' vocabularies, in `[0, 1]`.
    pub shared_fraction: f64,
    /// How the shared words are distributed over roles.
    pub sharing: Sharing,
    pub n_source: usize,
    pub n_target_unlabeled: usize,
    /// Labeled target-train examples available for semi-supervised runs.
    pub n_target_labeled: usize,
    pub n_target_test: usize,
    /// Context length in tokens, inclusive range.
    pub context_len: (usize, usize),
    pub fillers_per_fact: (usize, usize),
    /// Target-domain layout overrides; `None` reuses the ranges above.
    pub target_context_len: Option<(usize, usize)>,
    pub target_fillers_per_fact: Option<(usize, usize)>,
    /// Object-phrase length in tokens, inclusive range.
    pub answer_len: (usize, usize),
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            entity_pool: 120,
            relation_pool: 16,
            filler_pool: 48,
            separator_pool: 4,
            question_pool: 4,
            shared_fraction: 0.15,
            sharing: Sharing::FunctionFirst,
            n_source: 2000,
            n_target_unlabeled: 100,
            n_target_labeled: 600,
            n_target_test: 300,
            context_len: (10, 18),
            fillers_per_fact: (0, 2),
            target_context_len: None,
            target_fillers_per_fact: None,
            answer_len: (1, 2),
            seed: 7,
        }
    }
}

impl CorpusSpec {
    /// `(context_len, fillers_per_fact)` for one domain.
    pub fn layout(&self, domain: Domain) -> ((usize, usize), (usize, usize)) {
        match domain {
            Domain::Source => (self.context_len, self.fillers_per_fact),
            Domain::Target => (
                self.target_context_len.unwrap_or(self.context_len),
                self.target_fillers_per_fact.unwrap_or(self.fillers_per_fact),
            ),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Spec(m.to_string()));
        if !(0.0..=1.0).contains(&self.shared_fraction) {
            return bad("shared_fraction must lie in [0, 1]");
        }
        if self.n_source == 0 || self.n_target_test == 0 || self.n_target_unlabeled + self.n_target_labeled == 0 {
            return bad("example counts must be positive");
        }
        if [self.entity_pool, self.relation_pool, self.filler_pool, self.separator_pool, self.question_pool]
            .contains(&0)
        {
            return bad("word pools must be non-empty");
        }
        if self.answer_len.0 > self.answer_len.1 || self.answer_len.0 == 0 {
            return bad("ranges must be ordered with a positive answer length");
        }
        for domain in [Domain::Source, Domain::Target] {
            let (context_len, fillers) = self.layout(domain);
            if context_len.0 > context_len.1 || fillers.0 > fillers.1 {
                return bad("ranges must be ordered with a positive answer length");
            }
            if self.answer_len.1 + 3 > context_len.0 {
                return Err(Error::Spec(format!(
                    "answer length up to {} does not fit a context of {} tokens",
                    self.answer_len.1, context_len.0
                )));
            }
            if context_len.1 > 300 {
                return bad("context_len above 300 tokens exceeds the tokenizer window");
            }
            // distinct subjects per context
            let max_facts = context_len.1 / (3 + fillers.0) + 1;
            if self.entity_pool < max_facts + self.answer_len.1 {
                return bad("entity_pool too small for distinct subjects per context");
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub source: Vec<RawExample>,
    /// Labeled semi-supervised pool first, unlabeled contexts after.
    pub target_train: Vec<RawExample>,
    pub target_test: Vec<RawExample>,
    pub vocab: Vocabulary,
}

struct Pools {
    entity: Vec<String>,
    relation: Vec<String>,
    filler: Vec<String>,
    separator: Vec<String>,
    question: Vec<String>,
}

const ONSETS: [&str; 16] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "ch", "th"];
const VOWELS: [&str; 6] = ["a", "e", "i", "o", "u", "y"];

fn fresh_word(rng: &mut ChaCha8Rng, used: &mut HashSet<String>) -> String {
    loop {
        let syl = rng.gen_range(2..=3);
        let mut w = String::new();
        for _ in 0..syl {
            w.push_str(ONSETS[rng.gen_range(0..ONSETS.len())]);
            w.push_str(VOWELS[rng.gen_range(0..VOWELS.len())]);
        }
        if rng.gen_bool(0.3) {
            w.push_str(ONSETS[rng.gen_range(0..12)]);
        }
        if used.insert(w.clone()) {
            return w;
        }
    }
}

fn shared_total(sizes: &[usize], fraction: f64) -> usize {
    let total: usize = sizes.iter().sum();
    (2.0 * total as f64 * fraction / (1.0 + fraction)).round() as usize
}

/// Splits the shared words across roles proportionally (largest remainder).
fn shared_counts(sizes: &[usize], fraction: f64) -> Vec<usize> {
    let total: usize = sizes.iter().sum();
    let target = shared_total(sizes, fraction);
    let exact: Vec<f64> = sizes
        .iter()
        .map(|&n| target as f64 * n as f64 / total as f64)
        .collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let mut left = target - counts.iter().sum::<usize>();
    for i in order {
        if left == 0 {
            break;
        }
        if counts[i] < sizes[i] {
            counts[i] += 1;
            left -= 1;
        }
    }
    counts.iter().zip(sizes).map(|(c, s)| (*c).min(*s)).collect()
}

/// Fills roles completely in `priority` order until the shared total is spent.
fn shared_counts_by_priority(sizes: &[usize], fraction: f64, priority: &[usize]) -> Vec<usize> {
    let mut left = shared_total(sizes, fraction);
    let mut counts = vec![0; sizes.len()];
    for &i in priority {
        counts[i] = sizes[i].min(left);
        left -= counts[i];
    }
    counts
}

fn build_pools(spec: &CorpusSpec, rng: &mut ChaCha8Rng) -> (Pools, Pools) {
    let sizes = [
        spec.entity_pool,
        spec.relation_pool,
        spec.filler_pool,
        spec.separator_pool,
        spec.question_pool,
    ];
    let shared = match spec.sharing {
        Sharing::Proportional => shared_counts(&sizes, spec.shared_fraction),
        // separator, question, relation, filler, entity
        Sharing::FunctionFirst => shared_counts_by_priority(&sizes, spec.shared_fraction, &[3, 4, 1, 2, 0]),
    };
    let mut used = HashSet::new();
    let mut src: Vec<Vec<String>> = Vec::new();
    let mut tgt: Vec<Vec<String>> = Vec::new();
    for (&n, &k) in sizes.iter().zip(&shared) {
        let common: Vec<String> = (0..k).map(|_| fresh_word(rng, &mut used)).collect();
        let mut s = common.clone();
        s.extend((k..n).map(|_| fresh_word(rng, &mut used)));
        let mut t = common;
        t.extend((k..n).map(|_| fresh_word(rng, &mut used)));
        src.push(s);
        tgt.push(t);
    }
    let to_pools = |mut v: Vec<Vec<String>>| Pools {
        question: v.pop().unwrap(),
        separator: v.pop().unwrap(),
        filler: v.pop().unwrap(),
        relation: v.pop().unwrap(),
        entity: v.pop().unwrap(),
    };
    (to_pools(src), to_pools(tgt))
}

fn pick<'a>(rng: &mut ChaCha8Rng, pool: &'a [String]) -> &'a str {
    &pool[rng.gen_range(0..pool.len())]
}

fn make_example(spec: &CorpusSpec, pools: &Pools, rng: &mut ChaCha8Rng, id: String, domain: Domain) -> RawExample {
    let (context_len, fillers) = spec.layout(domain);
    let target_len = rng.gen_range(context_len.0..=context_len.1);
    let mut entities: Vec<&String> = pools.entity.iter().collect();
    entities.shuffle(rng);
    let mut next_entity = entities.into_iter();

    struct Fact {
        subj: String,
        rel: String,
        obj_start: usize,
        obj_text: String,
    }
    let mut words: Vec<String> = Vec::new();
    let mut facts: Vec<Fact> = Vec::new();
    loop {
        let alen = rng.gen_range(spec.answer_len.0..=spec.answer_len.1);
        let nfill = rng.gen_range(fillers.0..=fillers.1);
        let fact_len = 2 + alen + nfill + 1;
        if !facts.is_empty() && words.len() + fact_len > target_len {
            break;
        }
        let subj = next_entity.next().expect("validated pool size").clone();
        let rel = pick(rng, &pools.relation).to_string();
        words.push(subj.clone());
        words.push(rel.clone());
        let obj_start = words.len();
        let obj: Vec<String> = (0..alen).map(|_| pick(rng, &pools.entity).to_string()).collect();
        words.extend(obj.iter().cloned());
        for _ in 0..nfill {
            words.push(pick(rng, &pools.filler).to_string());
        }
        words.push(pick(rng, &pools.separator).to_string());
        facts.push(Fact { subj, rel, obj_start, obj_text: obj.join(" ") });
        if words.len() >= target_len {
            break;
        }
    }
    let fact = &facts[rng.gen_range(0..facts.len())];
    let start_char: usize = words[..fact.obj_start].iter().map(|w| w.chars().count() + 1).sum();
    let question = format!("{} {} {}", pick(rng, &pools.question), fact.rel, fact.subj);
    RawExample {
        id,
        domain,
        context: words.join(" "),
        question: Some(question),
        answer: Some(AnswerSpan { text: fact.obj_text.clone(), start_char }),
    }
}

/// Deterministic under `spec.seed`.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (src_pools, tgt_pools) = build_pools(spec, &mut rng);

    let source: Vec<RawExample> = (0..spec.n_source)
        .map(|i| make_example(spec, &src_pools, &mut rng, format!("src-{i:05}"), Domain::Source))
        .collect();
    let n_train = spec.n_target_labeled + spec.n_target_unlabeled;
    let target_train: Vec<RawExample> = (0..n_train)
        .map(|i| {
            let ex = make_example(spec, &tgt_pools, &mut rng, format!("tgt-train-{i:05}"), Domain::Target);
            if i < spec.n_target_labeled {
                ex
            } else {
                ex.masked()
            }
        })
        .collect();
    let target_test: Vec<RawExample> = (0..spec.n_target_test)
        .map(|i| make_example(spec, &tgt_pools, &mut rng, format!("tgt-test-{i:05}"), Domain::Target))
        .collect();
    let vocab = build_vocabulary([source.as_slice(), target_train.as_slice(), target_test.as_slice()]);
    Ok(Corpus { source, target_train, target_test, vocab })
}
