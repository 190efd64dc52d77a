//! The full parameter bundle (feature extractor, span head, discriminator)
//! with checkpointing and inference helpers.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{read_checkpoint, write_checkpoint, ParamStore, Tape};
use crate::corpus::{LengthLimits, TokenizedExample};
use crate::discriminator::DiscriminatorParams;
use crate::encoder::{encode, EncoderConfig, EncoderParams, Graph};
use crate::error::{Error, Result};
use crate::mrc_head::{decode_n_best, span_distribution, MrcHeadParams, PredictionList, SpanDistribution};

const FORMAT: &str = "mrcadapt-model";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Triplet margin α.
    pub margin: f64,
    pub limits: LengthLimits,
}

impl ModelConfig {
    pub fn desk(vocab_size: usize) -> Self {
        Self { encoder: EncoderConfig::desk(vocab_size), margin: 0.2, limits: LengthLimits::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if !(self.margin >= 0.0) {
            return Err(Error::Config(format!("margin {} must be non-negative", self.margin)));
        }
        if self.limits.max_seq_len > self.encoder.max_positions {
            return Err(Error::Config(format!(
                "max_seq_len {} exceeds {} positions",
                self.limits.max_seq_len, self.encoder.max_positions
            )));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    config: ModelConfig,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub head: MrcHeadParams,
    pub disc: DiscriminatorParams,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let e = &config.encoder;
        let encoder = EncoderParams::init(&mut store, e, &mut rng)?;
        let head = MrcHeadParams::init(&mut store, "mrc", e.hidden_size, &mut rng);
        let disc = DiscriminatorParams::init(
            &mut store,
            e.hidden_size,
            e.num_heads,
            e.ffn_inner_size,
            e.dropout_rate,
            config.margin,
            &mut rng,
        )?;
        Ok(Self { config, store, encoder, head, disc })
    }

    pub fn save<W: Write>(&self, w: W) -> Result<()> {
        let header = serde_json::to_string(&Header { format: FORMAT.into(), config: self.config.clone() })?;
        write_checkpoint(w, &header, &self.store)
    }

    /// Loads a checkpoint; `expected` geometry, when given, must match exactly.
    pub fn load<R: Read>(r: R, expected: Option<&ModelConfig>) -> Result<Self> {
        let (header, values) = read_checkpoint(r)?;
        let header: Header = serde_json::from_str(&header)?;
        if header.format != FORMAT {
            return Err(Error::Format(format!("unexpected checkpoint format {:?}", header.format)));
        }
        if let Some(want) = expected {
            if want.encoder != header.config.encoder || want.margin != header.config.margin {
                return Err(Error::Checkpoint(format!(
                    "checkpoint geometry {} differs from configured {}",
                    serde_json::to_string(&header.config.encoder)?,
                    serde_json::to_string(&want.encoder)?
                )));
            }
        }
        let mut model = Self::new(header.config, 0)?;
        model.store.load_from(&values)?;
        Ok(model)
    }

    pub fn span_distribution(&self, example: &TokenizedExample) -> Result<SpanDistribution> {
        let tape = Tape::new();
        let g = Graph::eval(&tape, &self.store);
        let f = encode(&g, &self.encoder, example)?;
        Ok(span_distribution(&g, f.features, &self.head)?.distribution())
    }

    /// `n`-best answers per example id, merging that example's windows.
    pub fn predict(&self, windows: &[TokenizedExample], n: usize) -> Result<BTreeMap<String, PredictionList>> {
        let mut grouped: BTreeMap<&str, Vec<(SpanDistribution, &TokenizedExample)>> = BTreeMap::new();
        for w in windows {
            grouped.entry(&w.example_id).or_default().push((self.span_distribution(w)?, w));
        }
        let mut out = BTreeMap::new();
        for (id, ws) in grouped {
            let refs: Vec<(&SpanDistribution, &TokenizedExample)> = ws.iter().map(|(d, e)| (d, *e)).collect();
            let list = match decode_n_best(&refs, n, self.config.limits.max_answer_len) {
                Ok(l) => l,
                Err(Error::Decoding(_)) => PredictionList::default(),
                Err(e) => return Err(e),
            };
            out.insert(id.to_string(), list);
        }
        Ok(out)
    }

    /// Feature-extractor `[CLS]` vector of one window (evaluation mode).
    pub fn cls_vector(&self, example: &TokenizedExample) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let g = Graph::eval(&tape, &self.store);
        let f = encode(&g, &self.encoder, example)?;
        Ok(f.cls()?.value().data().to_vec())
    }
}
