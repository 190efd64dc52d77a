use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::vocab::Vocabulary;
use super::Domain;
use crate::error::{Error, Result};

/// Sequence-length limits for windowing.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthLimits {
    pub max_query_len: usize,
    pub max_seq_len: usize,
    pub doc_stride: usize,
    pub max_answer_len: usize,
}

impl Default for LengthLimits {
    fn default() -> Self {
        Self {
            max_query_len: 64,
            max_seq_len: 384,
            doc_stride: 128,
            max_answer_len: 30,
        }
    }
}

/// A word token with its character span in the source text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WordToken {
    pub text: String,
    pub begin: usize,
    pub end: usize,
}

/// Splits on whitespace; runs of alphanumerics form one token, every other
/// visible character is a token of its own. Spans are in characters.
pub fn split_words(text: &str) -> Vec<WordToken> {
    let mut out = Vec::new();
    let mut cur: Option<(usize, String)> = None;
    for (ci, ch) in text.chars().enumerate() {
        if ch.is_alphanumeric() || ch == '_' {
            match &mut cur {
                Some((_, s)) => s.push(ch),
                None => cur = Some((ci, ch.to_string())),
            }
            continue;
        }
        if let Some((b, s)) = cur.take() {
            let end = b + s.chars().count();
            out.push(WordToken { text: s, begin: b, end });
        }
        if !ch.is_whitespace() {
            out.push(WordToken { text: ch.to_string(), begin: ci, end: ci + 1 });
        }
    }
    if let Some((b, s)) = cur {
        let end = b + s.chars().count();
        out.push(WordToken { text: s, begin: b, end });
    }
    out
}

/// Substring by character positions.
pub fn char_slice(text: &str, begin: usize, end: usize) -> &str {
    let mut idx = text.char_indices().map(|(b, _)| b).chain(std::iter::once(text.len()));
    let b = idx.by_ref().nth(begin).unwrap_or(text.len());
    let e = if end > begin {
        idx.nth(end - begin - 1).unwrap_or(text.len())
    } else {
        b
    };
    &text[b..e]
}

/// One model input window `[CLS] Q [SEP] C [SEP]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizedExample {
    pub example_id: String,
    pub window: usize,
    pub domain: Domain,
    pub input_ids: Vec<usize>,
    /// 0 over `[CLS] Q [SEP]`, 1 over `C [SEP]`.
    pub segment_ids: Vec<usize>,
    /// Positions in `input_ids` holding context tokens.
    pub context_range: Range<usize>,
    /// Character span in the raw context for each input position (context tokens only).
    pub offsets: Vec<Option<(usize, usize)>>,
    pub answer_start: Option<usize>,
    pub answer_end: Option<usize>,
    pub is_labeled: bool,
    /// The question region is a single `[MASK]`.
    pub masked_question: bool,
    pub context: Arc<str>,
    pub gold_text: Option<String>,
}

impl TokenizedExample {
    pub fn len(&self) -> usize {
        self.input_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input_ids.is_empty()
    }

    /// Raw context text covering input positions `start..=end`.
    pub fn span_text(&self, start: usize, end: usize) -> Option<String> {
        let (b, _) = self.offsets.get(start).copied().flatten()?;
        let (_, e) = self.offsets.get(end).copied().flatten()?;
        Some(char_slice(&self.context, b, e).to_string())
    }

    /// Raw context text covered by this window.
    pub fn detokenize(&self) -> String {
        if self.context_range.is_empty() {
            return String::new();
        }
        self.span_text(self.context_range.start, self.context_range.end - 1)
            .unwrap_or_default()
    }

    pub fn golden_span(&self) -> Option<(usize, usize)> {
        self.answer_start.zip(self.answer_end)
    }
}

/// Character-level answer annotation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerSpan {
    pub text: String,
    pub start_char: usize,
}

/// Tokenizes one question/context pair into one or more windows.
///
/// `question = None` emits the masked form used for unlabeled target text.
/// Windows that do not contain the full answer are kept but unlabeled.
pub fn tokenize(
    example_id: &str,
    domain: Domain,
    question: Option<&str>,
    context: &str,
    answer: Option<&AnswerSpan>,
    vocab: &Vocabulary,
    limits: &LengthLimits,
) -> Result<Vec<TokenizedExample>> {
    let ctx_tokens = split_words(context);
    if ctx_tokens.is_empty() {
        return Err(Error::Input(format!("example {example_id}: empty context")));
    }
    let n_chars = context.chars().count();

    let answer_tokens = match answer {
        Some(a) => {
            let len = a.text.chars().count();
            if a.text.trim().is_empty() || a.start_char + len > n_chars {
                return Err(Error::Alignment(format!(
                    "example {example_id}: answer [{}, {}) outside context of {n_chars} chars",
                    a.start_char,
                    a.start_char + len
                )));
            }
            if char_slice(context, a.start_char, a.start_char + len) != a.text {
                return Err(Error::Alignment(format!(
                    "example {example_id}: answer text {:?} not found at char {}",
                    a.text, a.start_char
                )));
            }
            let end_char = a.start_char + len;
            let s = ctx_tokens.iter().position(|t| t.end > a.start_char);
            let e = ctx_tokens.iter().rposition(|t| t.begin < end_char);
            match (s, e) {
                (Some(s), Some(e)) if s <= e => Some((s, e)),
                _ => {
                    return Err(Error::Alignment(format!(
                        "example {example_id}: answer covers no context token"
                    )))
                }
            }
        }
        None => None,
    };

    let (q_ids, masked) = match question {
        Some(q) => {
            let mut ids: Vec<usize> = split_words(q).iter().map(|t| vocab.id(&t.text)).collect();
            ids.truncate(limits.max_query_len);
            if ids.is_empty() {
                (vec![Vocabulary::MASK_ID], true)
            } else {
                (ids, false)
            }
        }
        None => (vec![Vocabulary::MASK_ID], true),
    };

    let capacity = limits
        .max_seq_len
        .checked_sub(q_ids.len() + 3)
        .filter(|c| *c > 0)
        .ok_or_else(|| Error::Config("max_seq_len too small for the question".into()))?;
    if limits.doc_stride == 0 {
        return Err(Error::Config("doc_stride must be positive".into()));
    }

    let context: Arc<str> = Arc::from(context);
    let gold_text = answer.map(|a| a.text.clone());
    let n = ctx_tokens.len();
    let mut out = Vec::new();
    for (window, start) in window_starts(n, capacity, limits.doc_stride).into_iter().enumerate() {
        let end = (start + capacity).min(n);
        let mut input_ids = Vec::with_capacity(q_ids.len() + end - start + 3);
        input_ids.push(Vocabulary::CLS_ID);
        input_ids.extend_from_slice(&q_ids);
        input_ids.push(Vocabulary::SEP_ID);
        let ctx_begin = input_ids.len();
        let mut offsets = vec![None; ctx_begin];
        for t in &ctx_tokens[start..end] {
            input_ids.push(vocab.id(&t.text));
            offsets.push(Some((t.begin, t.end)));
        }
        let ctx_end = input_ids.len();
        input_ids.push(Vocabulary::SEP_ID);
        offsets.push(None);
        let segment_ids = (0..input_ids.len())
            .map(|i| usize::from(i >= ctx_begin))
            .collect();

        let span = answer_tokens
            .filter(|&(s, e)| s >= start && e < end)
            .map(|(s, e)| (s - start + ctx_begin, e - start + ctx_begin));
        out.push(TokenizedExample {
            example_id: example_id.to_string(),
            window,
            domain,
            input_ids,
            segment_ids,
            context_range: ctx_begin..ctx_end,
            offsets,
            answer_start: span.map(|s| s.0),
            answer_end: span.map(|s| s.1),
            is_labeled: span.is_some(),
            masked_question: masked,
            context: context.clone(),
            gold_text: gold_text.clone(),
        });
    }
    Ok(out)
}

/// Start offsets of sliding windows of `capacity` tokens advanced by `stride`.
pub fn window_starts(n: usize, capacity: usize, stride: usize) -> Vec<usize> {
    let mut starts = vec![0];
    let mut start = 0;
    while start + capacity < n {
        start += stride;
        starts.push(start);
    }
    starts
}
