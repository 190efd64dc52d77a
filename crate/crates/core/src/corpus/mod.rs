//! Tokenization, the synthetic two-domain corpus, and dataset files.
//!
//! Raw examples travel as JSON lines:
//!
//! ```text
//! {"id": "...", "domain": "source"|"target", "context": "...",
//!  "question": "..." | null, "answer": {"text": "...", "start_char": 12} | null}
//! ```

mod synthetic;
mod tokenize;
mod vocab;

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

pub use synthetic::{generate_corpus, Corpus, CorpusSpec, Sharing};
pub use tokenize::{
    char_slice, split_words, tokenize, window_starts, AnswerSpan, LengthLimits, TokenizedExample,
    WordToken,
};
pub use vocab::{Vocabulary, CLS, MASK, PAD, SEP, UNK};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One untokenized example as stored on disk.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawExample {
    pub id: String,
    pub domain: Domain,
    pub context: String,
    pub question: Option<String>,
    pub answer: Option<AnswerSpan>,
}

impl RawExample {
    pub fn is_labeled(&self) -> bool {
        self.question.is_some() && self.answer.is_some()
    }

    /// The same context with question and answer removed.
    pub fn masked(&self) -> RawExample {
        RawExample {
            question: None,
            answer: None,
            ..self.clone()
        }
    }
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<RawExample>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: RawExample = serde_json::from_str(&line)
            .map_err(|e| Error::Input(format!("line {}: {e}", i + 1)))?;
        out.push(ex);
    }
    Ok(out)
}

pub fn write_jsonl<W: Write>(mut w: W, examples: &[RawExample]) -> Result<()> {
    for ex in examples {
        serde_json::to_writer(&mut w, ex)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Deserialize)]
struct SquadFile {
    data: Vec<SquadArticle>,
}

#[derive(Deserialize)]
struct SquadArticle {
    paragraphs: Vec<SquadParagraph>,
}

#[derive(Deserialize)]
struct SquadParagraph {
    context: String,
    qas: Vec<SquadQa>,
}

#[derive(Deserialize)]
struct SquadQa {
    id: String,
    question: String,
    #[serde(default)]
    answers: Vec<SquadAnswer>,
}

#[derive(Deserialize)]
struct SquadAnswer {
    text: String,
    answer_start: usize,
}

/// Maps a SQuAD-style JSON document (`data[].paragraphs[].qas[]`) onto raw
/// examples. The first listed answer is taken as golden; questions without
/// answers are kept unlabeled. With `mask_questions`, every question and
/// answer is dropped, which is how labeled target data is made unlabeled.
pub fn from_squad_json(json: &str, domain: Domain, mask_questions: bool) -> Result<Vec<RawExample>> {
    let file: SquadFile = serde_json::from_str(json)?;
    let mut out = Vec::new();
    for art in file.data {
        for para in art.paragraphs {
            for qa in para.qas {
                let answer = qa.answers.into_iter().next().map(|a| AnswerSpan {
                    text: a.text,
                    start_char: a.answer_start,
                });
                let ex = RawExample {
                    id: qa.id,
                    domain,
                    context: para.context.clone(),
                    question: Some(qa.question),
                    answer,
                };
                out.push(if mask_questions { ex.masked() } else { ex });
            }
        }
    }
    Ok(out)
}

/// Builds a vocabulary covering every question and context token.
pub fn build_vocabulary<'a>(sets: impl IntoIterator<Item = &'a [RawExample]>) -> Vocabulary {
    let mut words = Vec::new();
    for set in sets {
        for ex in set {
            words.extend(split_words(&ex.context).into_iter().map(|w| w.text));
            if let Some(q) = &ex.question {
                words.extend(split_words(q).into_iter().map(|w| w.text));
            }
        }
    }
    Vocabulary::from_tokens(words)
}

/// Tokenizes a set of raw examples. `keep_questions = false` masks every
/// example's question (the unlabeled-target form).
pub fn tokenize_all(
    examples: &[RawExample],
    vocab: &Vocabulary,
    limits: &LengthLimits,
    keep_questions: bool,
) -> Result<Vec<TokenizedExample>> {
    let mut out = Vec::new();
    for ex in examples {
        let (q, a) = if keep_questions {
            (ex.question.as_deref(), ex.answer.as_ref())
        } else {
            (None, None)
        };
        out.extend(tokenize(&ex.id, ex.domain, q, &ex.context, a, vocab, limits)?);
    }
    Ok(out)
}
