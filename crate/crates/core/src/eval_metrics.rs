//! Factoid QA metrics: strict/lenient accuracy, MRR over five ranked
//! answers, plus exact match and token F1 over the top answer.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mrc_head::PredictionList;

/// Number of ranked answers considered by LAcc and MRR.
pub const RANK_CUTOFF: usize = 5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldenAnswer {
    pub id: String,
    pub answer: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub sacc: f64,
    pub lacc: f64,
    pub mrr: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub em: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub f1: Option<f64>,
    pub n_test: usize,
}

impl MetricReport {
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<6} {:>8}\n{:<6} {:>8.4}\n{:<6} {:>8.4}\n{:<6} {:>8.4}\n",
            "n_test", self.n_test, "SAcc", self.sacc, "LAcc", self.lacc, "MRR", self.mrr
        );
        if let Some(em) = self.em {
            s.push_str(&format!("{:<6} {:>8.4}\n", "EM", em));
        }
        if let Some(f1) = self.f1 {
            s.push_str(&format!("{:<6} {:>8.4}\n", "F1", f1));
        }
        s
    }
}

/// Lowercase, drop punctuation, drop the articles a/an/the, collapse whitespace.
pub fn normalize_answer(text: &str) -> String {
    let lowered: String = text
        .to_lowercase()
        .chars()
        .map(|c| if c.is_ascii_punctuation() { ' ' } else { c })
        .collect();
    lowered
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn answers_match(predicted: &str, golden: &str) -> bool {
    normalize_answer(predicted) == normalize_answer(golden)
}

/// 1-based rank of the first matching prediction within the cutoff.
pub fn gold_rank(predictions: Option<&PredictionList>, golden: &str) -> Option<usize> {
    predictions?
        .predictions
        .iter()
        .take(RANK_CUTOFF)
        .position(|p| answers_match(&p.text, golden))
        .map(|i| i + 1)
}

pub fn compute_metrics(predictions: &HashMap<String, PredictionList>, golds: &[GoldenAnswer]) -> Result<MetricReport> {
    if golds.is_empty() {
        return Err(Error::Metric("empty gold set".into()));
    }
    let (mut c1, mut c5, mut rr) = (0usize, 0usize, 0.0);
    for g in golds {
        if let Some(r) = gold_rank(predictions.get(&g.id), &g.answer) {
            c5 += 1;
            if r == 1 {
                c1 += 1;
            }
            rr += 1.0 / r as f64;
        }
    }
    let n = golds.len() as f64;
    let (em, f1) = compute_em_f1(predictions, golds)?;
    Ok(MetricReport {
        sacc: c1 as f64 / n,
        lacc: c5 as f64 / n,
        mrr: rr / n,
        em: Some(em),
        f1: Some(f1),
        n_test: golds.len(),
    })
}

pub fn token_f1(predicted: &str, golden: &str) -> f64 {
    let p = normalize_answer(predicted);
    let g = normalize_answer(golden);
    let p: Vec<&str> = p.split_whitespace().collect();
    let g: Vec<&str> = g.split_whitespace().collect();
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &g {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in &p {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / p.len() as f64;
    let recall = common as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// `(EM, F1)` of the top-1 prediction; unanswered questions score 0.
pub fn compute_em_f1(predictions: &HashMap<String, PredictionList>, golds: &[GoldenAnswer]) -> Result<(f64, f64)> {
    if golds.is_empty() {
        return Err(Error::Metric("empty gold set".into()));
    }
    let (mut em, mut f1) = (0.0, 0.0);
    for g in golds {
        if let Some(top) = predictions.get(&g.id).and_then(|p| p.top()) {
            if answers_match(&top.text, &g.answer) {
                em += 1.0;
            }
            f1 += token_f1(&top.text, &g.answer);
        }
    }
    let n = golds.len() as f64;
    Ok((em / n, f1 / n))
}

/// Drops golds whose ids have no prediction entry; returns the dropped ids.
pub fn split_known(predictions: &HashMap<String, PredictionList>, golds: Vec<GoldenAnswer>) -> (Vec<GoldenAnswer>, Vec<String>) {
    let mut unknown = Vec::new();
    let known = golds
        .into_iter()
        .filter(|g| {
            let ok = predictions.contains_key(&g.id);
            if !ok {
                unknown.push(g.id.clone());
            }
            ok
        })
        .collect();
    (known, unknown)
}

/// One `{"id", "predictions": [...]}` object per line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub predictions: PredictionList,
}

pub fn write_predictions<W: Write>(mut w: W, predictions: &BTreeMap<String, PredictionList>) -> Result<()> {
    for (id, p) in predictions {
        serde_json::to_writer(&mut w, &PredictionRecord { id: id.clone(), predictions: p.clone() })?;
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_predictions<R: BufRead>(r: R) -> Result<HashMap<String, PredictionList>> {
    let mut out = HashMap::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PredictionRecord = serde_json::from_str(&line)?;
        out.insert(rec.id, rec.predictions);
    }
    Ok(out)
}

/// Gold file: one `{"id", "answer"}` object per line.
pub fn read_golds<R: BufRead>(r: R) -> Result<Vec<GoldenAnswer>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let g: GoldenAnswer = serde_json::from_str(&line)?;
        if g.answer.trim().is_empty() {
            return Err(Error::Input(format!("gold line {}: empty answer", i + 1)));
        }
        if !seen.insert(g.id.clone()) {
            return Err(Error::Input(format!("gold line {}: duplicate id {}", i + 1, g.id)));
        }
        out.push(g);
    }
    Ok(out)
}

pub fn write_golds<W: Write>(mut w: W, golds: &[GoldenAnswer]) -> Result<()> {
    for g in golds {
        serde_json::to_writer(&mut w, g)?;
        writeln!(w)?;
    }
    Ok(())
}

/// Reads a BioASQ golden-enriched file, keeping factoid questions.
///
/// Expects `{"questions": [{"id", "type": "factoid", "exact_answer": ...}]}`
/// where `exact_answer` is a string, a list of synonyms, or a list of lists;
/// the first synonym becomes the gold answer.
pub fn golds_from_bioasq(json: &str) -> Result<Vec<GoldenAnswer>> {
    let v: serde_json::Value = serde_json::from_str(json)?;
    let qs = v
        .get("questions")
        .and_then(|q| q.as_array())
        .ok_or_else(|| Error::Input("missing \"questions\" array".into()))?;
    let mut out = Vec::new();
    for q in qs {
        if q.get("type").and_then(|t| t.as_str()) != Some("factoid") {
            continue;
        }
        let id = q
            .get("id")
            .and_then(|i| i.as_str())
            .ok_or_else(|| Error::Input("question without id".into()))?;
        let mut ans = q.get("exact_answer");
        while let Some(serde_json::Value::Array(items)) = ans {
            ans = items.first();
        }
        let Some(text) = ans.and_then(|a| a.as_str()) else {
            return Err(Error::Input(format!("question {id}: no usable exact_answer")));
        };
        out.push(GoldenAnswer { id: id.to_string(), answer: text.to_string() });
    }
    Ok(out)
}
