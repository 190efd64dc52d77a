//! Transformer feature extractor: token, position and segment embeddings
//! followed by post-layer-norm encoder blocks.

use std::cell::RefCell;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{concat_cols, ParamId, ParamStore, Tape, Tensor, Var};
use crate::corpus::TokenizedExample;
use crate::error::{Error, Result};

const INIT_STD: f64 = 0.02;
const MASKED_SCORE: f64 = -1e9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub ffn_inner_size: usize,
    pub dropout_rate: f64,
    pub max_positions: usize,
    pub vocab_size: usize,
}

impl EncoderConfig {
    /// Desk geometry: 2 layers, H=32, 4 heads, FFN 128.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            num_layers: 2,
            hidden_size: 32,
            num_heads: 4,
            ffn_inner_size: 128,
            dropout_rate: 0.1,
            max_positions: 384,
            vocab_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.hidden_size % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {} not divisible by {} heads",
                self.hidden_size, self.num_heads
            )));
        }
        if self.hidden_size == 0 || self.ffn_inner_size == 0 || self.max_positions == 0 || self.vocab_size == 0 {
            return Err(Error::Config("encoder extents must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout rate {} outside [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }
}

/// Binds parameters to a tape and carries the dropout stream for one forward pass.
pub struct Graph<'t, 's> {
    pub tape: &'t Tape,
    pub store: &'s ParamStore,
    rng: Option<RefCell<ChaCha8Rng>>,
}

impl<'t, 's> Graph<'t, 's> {
    /// Evaluation mode: dropout disabled.
    pub fn eval(tape: &'t Tape, store: &'s ParamStore) -> Self {
        Self { tape, store, rng: None }
    }

    /// Training mode: dropout masks drawn from `rng`.
    pub fn train(tape: &'t Tape, store: &'s ParamStore, rng: ChaCha8Rng) -> Self {
        Self { tape, store, rng: Some(RefCell::new(rng)) }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn p(&self, id: ParamId) -> Var<'t> {
        self.tape.param(self.store, id)
    }

    pub fn dropout(&self, x: Var<'t>, rate: f64) -> Result<Var<'t>> {
        match &self.rng {
            Some(rng) => x.dropout(rate, Some(&mut *rng.borrow_mut())),
            None => x.dropout::<ChaCha8Rng>(rate, None),
        }
    }
}

/// One encoder block's parameters.
#[derive(Clone, Debug)]
pub struct LayerParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub hidden: usize,
    pub heads: usize,
    pub dropout: f64,
}

impl LayerParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        hidden: usize,
        heads: usize,
        ffn: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Self {
        let mut w = |name: &str, shape: &[usize]| store.insert_normal(format!("{prefix}.{name}"), shape, INIT_STD, rng);
        let (wq, wk, wv, wo) = (w("wq", &[hidden, hidden]), w("wk", &[hidden, hidden]), w("wv", &[hidden, hidden]), w("wo", &[hidden, hidden]));
        let (w1, w2) = (w("w1", &[hidden, ffn]), w("w2", &[ffn, hidden]));
        let mut z = |name: &str, n: usize, v: f64| store.insert(format!("{prefix}.{name}"), Tensor::full(&[n], v));
        Self {
            wq,
            bq: z("bq", hidden, 0.0),
            wk,
            bk: z("bk", hidden, 0.0),
            wv,
            bv: z("bv", hidden, 0.0),
            wo,
            bo: z("bo", hidden, 0.0),
            ln1_g: z("ln1_g", hidden, 1.0),
            ln1_b: z("ln1_b", hidden, 0.0),
            w1,
            b1: z("b1", ffn, 0.0),
            w2,
            b2: z("b2", hidden, 0.0),
            ln2_g: z("ln2_g", hidden, 1.0),
            ln2_b: z("ln2_b", hidden, 0.0),
            hidden,
            heads,
            dropout,
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![
            self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo, self.ln1_g,
            self.ln1_b, self.w1, self.b1, self.w2, self.b2, self.ln2_g, self.ln2_b,
        ]
    }
}

pub struct LayerOutput<'t> {
    pub hidden: Var<'t>,
    /// Attention probabilities per head, `[n, n]` each.
    pub attention: Vec<Var<'t>>,
}

fn linear<'t>(g: &Graph<'t, '_>, x: Var<'t>, w: ParamId, b: ParamId) -> Result<Var<'t>> {
    x.matmul(g.p(w))?.add_row(g.p(b))
}

/// Post-LN block: `h = LN(x + Drop(MHA(x)))`, `out = LN(h + Drop(FFN(h)))`.
/// `key_mask[j] == false` marks position `j` as padding: it receives no attention.
pub fn encoder_layer<'t>(
    g: &Graph<'t, '_>,
    x: Var<'t>,
    layer: &LayerParams,
    key_mask: Option<&[bool]>,
) -> Result<LayerOutput<'t>> {
    let shape = x.shape();
    if shape.len() != 2 || shape[1] != layer.hidden {
        return Err(Error::dim("encoder_layer", &shape, &[shape.first().copied().unwrap_or(0), layer.hidden]));
    }
    let n = shape[0];
    let head_dim = layer.hidden / layer.heads;
    let q = linear(g, x, layer.wq, layer.bq)?;
    let k = linear(g, x, layer.wk, layer.bk)?;
    let v = linear(g, x, layer.wv, layer.bv)?;
    let mask = match key_mask {
        Some(m) if m.len() != n => return Err(Error::dim("attention mask", &[m.len()], &[n])),
        Some(m) => {
            let row: Vec<f64> = m.iter().map(|&keep| if keep { 0.0 } else { MASKED_SCORE }).collect();
            let data = (0..n).flat_map(|_| row.iter().copied()).collect();
            Some(g.tape.constant(Tensor::new(vec![n, n], data)?))
        }
        None => None,
    };
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut heads = Vec::with_capacity(layer.heads);
    let mut attention = Vec::with_capacity(layer.heads);
    for h in 0..layer.heads {
        let (lo, hi) = (h * head_dim, (h + 1) * head_dim);
        let qh = q.slice_cols(lo, hi)?;
        let kh = k.slice_cols(lo, hi)?;
        let vh = v.slice_cols(lo, hi)?;
        let mut scores = qh.matmul(kh.transpose()?)?.scale(scale);
        if let Some(m) = mask {
            scores = scores.add(m)?;
        }
        let probs = scores.softmax()?;
        attention.push(probs);
        let probs = g.dropout(probs, layer.dropout)?;
        heads.push(probs.matmul(vh)?);
    }
    let ctx = if heads.len() == 1 { heads[0] } else { concat_cols(&heads)? };
    let attn_out = g.dropout(linear(g, ctx, layer.wo, layer.bo)?, layer.dropout)?;
    let h1 = x.add(attn_out)?.layer_norm(g.p(layer.ln1_g), g.p(layer.ln1_b))?;
    let ff = linear(g, h1, layer.w1, layer.b1)?.gelu();
    let ff = g.dropout(linear(g, ff, layer.w2, layer.b2)?, layer.dropout)?;
    let hidden = h1.add(ff)?.layer_norm(g.p(layer.ln2_g), g.p(layer.ln2_b))?;
    Ok(LayerOutput { hidden, attention })
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub token_emb: ParamId,
    pub position_emb: ParamId,
    pub segment_emb: ParamId,
    pub emb_ln_g: ParamId,
    pub emb_ln_b: ParamId,
    pub layers: Vec<LayerParams>,
}

impl EncoderParams {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, config: &EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let h = config.hidden_size;
        let token_emb = store.insert_normal("encoder.token_emb", &[config.vocab_size, h], INIT_STD, rng);
        let position_emb = store.insert_normal("encoder.position_emb", &[config.max_positions, h], INIT_STD, rng);
        let segment_emb = store.insert_normal("encoder.segment_emb", &[2, h], INIT_STD, rng);
        let emb_ln_g = store.insert("encoder.emb_ln_g", Tensor::full(&[h], 1.0));
        let emb_ln_b = store.insert("encoder.emb_ln_b", Tensor::zeros(&[h]));
        let layers = (0..config.num_layers)
            .map(|i| {
                LayerParams::init(
                    store,
                    &format!("encoder.layer{i}"),
                    h,
                    config.num_heads,
                    config.ffn_inner_size,
                    config.dropout_rate,
                    rng,
                )
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            token_emb,
            position_emb,
            segment_emb,
            emb_ln_g,
            emb_ln_b,
            layers,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.token_emb, self.position_emb, self.segment_emb, self.emb_ln_g, self.emb_ln_b];
        for l in &self.layers {
            v.extend(l.ids());
        }
        v
    }
}

/// Per-token features `[n, H]`; row 0 is the `[CLS]` position.
pub struct FeatureMatrix<'t> {
    pub features: Var<'t>,
    /// Attention probabilities, indexed `[layer][head]`.
    pub attention: Vec<Vec<Var<'t>>>,
}

impl<'t> FeatureMatrix<'t> {
    pub fn cls(&self) -> Result<Var<'t>> {
        self.features.slice_rows(0, 1)
    }
}

/// Embedding sum `token + position + segment`, normalized, with dropout.
pub fn embed<'t>(g: &Graph<'t, '_>, params: &EncoderParams, ids: &[usize], segments: &[usize]) -> Result<Var<'t>> {
    check_input(params, ids, segments)?;
    let positions: Vec<usize> = (0..ids.len()).collect();
    let tok = g.p(params.token_emb).embedding(ids)?;
    let pos = g.p(params.position_emb).embedding(&positions)?;
    let seg = g.p(params.segment_emb).embedding(segments)?;
    let sum = tok.add(pos)?.add(seg)?;
    let normed = sum.layer_norm(g.p(params.emb_ln_g), g.p(params.emb_ln_b))?;
    g.dropout(normed, params.config.dropout_rate)
}

/// Runs the layer stack over precomputed input embeddings `[n, H]`.
pub fn encode_embeddings<'t>(
    g: &Graph<'t, '_>,
    params: &EncoderParams,
    embeddings: Var<'t>,
    key_mask: Option<&[bool]>,
) -> Result<FeatureMatrix<'t>> {
    let mut h = embeddings;
    let mut attention = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let out = encoder_layer(g, h, layer, key_mask)?;
        h = out.hidden;
        attention.push(out.attention);
    }
    Ok(FeatureMatrix { features: h, attention })
}

pub fn encode_ids<'t>(
    g: &Graph<'t, '_>,
    params: &EncoderParams,
    ids: &[usize],
    segments: &[usize],
    key_mask: Option<&[bool]>,
) -> Result<FeatureMatrix<'t>> {
    let e = embed(g, params, ids, segments)?;
    encode_embeddings(g, params, e, key_mask)
}

/// `f = M_F(X)` for one tokenized window.
pub fn encode<'t>(g: &Graph<'t, '_>, params: &EncoderParams, example: &TokenizedExample) -> Result<FeatureMatrix<'t>> {
    encode_ids(g, params, &example.input_ids, &example.segment_ids, None)
}

fn check_input(params: &EncoderParams, ids: &[usize], segments: &[usize]) -> Result<()> {
    if ids.is_empty() {
        return Err(Error::Input("empty input sequence".into()));
    }
    if ids.len() != segments.len() {
        return Err(Error::dim("segments", &[ids.len()], &[segments.len()]));
    }
    if ids.len() > params.config.max_positions {
        return Err(Error::Input(format!(
            "sequence of {} tokens exceeds {} positions",
            ids.len(),
            params.config.max_positions
        )));
    }
    if let Some(&id) = ids.iter().find(|&&id| id >= params.config.vocab_size) {
        return Err(Error::Vocabulary { id, size: params.config.vocab_size });
    }
    if segments.iter().any(|&s| s > 1) {
        return Err(Error::Input("segment ids must be 0 or 1".into()));
    }
    Ok(())
}
