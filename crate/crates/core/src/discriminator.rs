//! Domain similarity discriminator.
//!
//! One encoder layer `D_e` is applied with the same weights to all three
//! members of a (target, source anchor, source positive) triplet. The
//! `[CLS]` rows of its outputs feed a cosine-distance triplet loss (or the
//! plain distance variant), and an auxiliary span head `D_q` reads the
//! anchor's encoding.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tensor, Var};
use crate::encoder::{encoder_layer, Graph, LayerParams};
use crate::error::{Error, Result};
use crate::mrc_head::{mrc_loss, span_distribution, MrcHeadParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Triplet,
    Distance,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Triplet => "triplet",
            LossKind::Distance => "distance",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "triplet" => Ok(LossKind::Triplet),
            "distance" => Ok(LossKind::Distance),
            other => Err(Error::Config(format!("unknown loss kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DiscriminatorParams {
    /// `D_e`, shared across triplet members.
    pub encoder: LayerParams,
    /// `D_q`.
    pub head: MrcHeadParams,
    pub margin: f64,
}

impl DiscriminatorParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        hidden: usize,
        heads: usize,
        ffn: usize,
        dropout: f64,
        margin: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if !(margin >= 0.0) {
            return Err(Error::Config(format!("margin {margin} must be non-negative")));
        }
        Ok(Self {
            encoder: LayerParams::init(store, "disc.encoder", hidden, heads, ffn, dropout, rng),
            head: MrcHeadParams::init(store, "disc.head", hidden, rng),
            margin,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = self.encoder.ids();
        v.extend(self.head.ids());
        v
    }
}

/// Extracted features for one triplet.
#[derive(Clone, Copy, Debug)]
pub struct DomainTriplet<'t> {
    pub target: Var<'t>,
    pub anchor: Var<'t>,
    pub positive: Var<'t>,
    /// Anchor's golden `(start, end)` for the auxiliary head.
    pub anchor_span: Option<(usize, usize)>,
}

pub struct Discriminated<'t> {
    pub cls_target: Var<'t>,
    pub cls_anchor: Var<'t>,
    pub cls_positive: Var<'t>,
    pub anchor_encoded: Var<'t>,
}

/// Applies `D_e` to each triplet member with identical weights.
pub fn discriminate<'t>(
    g: &Graph<'t, '_>,
    triplet: &DomainTriplet<'t>,
    params: &DiscriminatorParams,
) -> Result<Discriminated<'t>> {
    let enc = |x: Var<'t>| encoder_layer(g, x, &params.encoder, None).map(|o| o.hidden);
    let t = enc(triplet.target)?;
    let a = enc(triplet.anchor)?;
    let p = enc(triplet.positive)?;
    Ok(Discriminated {
        cls_target: t.slice_rows(0, 1)?,
        cls_anchor: a.slice_rows(0, 1)?,
        cls_positive: p.slice_rows(0, 1)?,
        anchor_encoded: a,
    })
}

/// `1 - cos(u, v)`.
pub fn cosine_distance<'t>(u: Var<'t>, v: Var<'t>) -> Result<Var<'t>> {
    Ok(u.cosine_similarity(v)?.neg().add_scalar(1.0))
}

/// `max(d(anchor, positive) - d(anchor, target) + margin, 0)`.
pub fn triplet_loss<'t>(anchor: Var<'t>, positive: Var<'t>, target: Var<'t>, margin: f64) -> Result<Var<'t>> {
    let d_pos = cosine_distance(anchor, positive)?;
    let d_neg = cosine_distance(anchor, target)?;
    Ok(d_pos.sub(d_neg)?.add_scalar(margin).relu())
}

/// `d(anchor, target)`.
pub fn distance_loss<'t>(anchor: Var<'t>, target: Var<'t>) -> Result<Var<'t>> {
    cosine_distance(anchor, target)
}

pub struct DiscriminatorLoss<'t> {
    pub total: Var<'t>,
    pub metric_term: Var<'t>,
    pub aux_term: Option<Var<'t>>,
    pub cls_target: Var<'t>,
    pub cls_anchor: Var<'t>,
    pub cls_positive: Var<'t>,
}

/// `L_D = L_metric + L_aux`; `aux_enabled = false` drops the auxiliary term.
///
/// With `aux_features = Some(f)`, `D_q` reads `D_e(f)` instead of the
/// anchor's triplet encoding, so its gradient can be routed differently.
pub fn discriminator_loss<'t>(
    g: &Graph<'t, '_>,
    triplet: &DomainTriplet<'t>,
    params: &DiscriminatorParams,
    kind: LossKind,
    aux_enabled: bool,
    aux_features: Option<Var<'t>>,
) -> Result<DiscriminatorLoss<'t>> {
    let d = discriminate(g, triplet, params)?;
    let metric_term = match kind {
        LossKind::Triplet => triplet_loss(d.cls_anchor, d.cls_positive, d.cls_target, params.margin)?,
        LossKind::Distance => distance_loss(d.cls_anchor, d.cls_target)?,
    };
    let aux_term = if aux_enabled {
        let (ys, ye) = triplet
            .anchor_span
            .ok_or_else(|| Error::Label("auxiliary head needs the anchor's golden span".into()))?;
        let encoded = match aux_features {
            Some(f) => encoder_layer(g, f, &params.encoder, None)?.hidden,
            None => d.anchor_encoded,
        };
        let scores = span_distribution(g, encoded, &params.head)?;
        Some(mrc_loss(&scores, ys, ye)?)
    } else {
        None
    };
    let total = match aux_term {
        Some(a) => metric_term.add(a)?,
        None => metric_term,
    };
    Ok(DiscriminatorLoss {
        total,
        metric_term,
        aux_term,
        cls_target: d.cls_target,
        cls_anchor: d.cls_anchor,
        cls_positive: d.cls_positive,
    })
}

/// `[CLS]` vectors of one triplet, kept for distance tracing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripletCls {
    pub anchor: Vec<f64>,
    pub positive: Vec<f64>,
    pub target: Vec<f64>,
}

pub fn cosine_distance_plain(u: &[f64], v: &[f64]) -> Result<f64> {
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::DegenerateVector("cosine_distance"));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok(1.0 - (dot / (nu * nv)).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub mean_d_source_source: f64,
    pub mean_d_source_target: f64,
    pub loss_kind: LossKind,
}

/// Mean anchor–positive and anchor–target cosine distances over one epoch.
pub fn epoch_distances(triplets: &[TripletCls]) -> Result<(f64, f64)> {
    if triplets.is_empty() {
        return Err(Error::Contract("distance trace needs at least one triplet".into()));
    }
    let mut ss = 0.0;
    let mut st = 0.0;
    for t in triplets {
        ss += cosine_distance_plain(&t.anchor, &t.positive)?;
        st += cosine_distance_plain(&t.anchor, &t.target)?;
    }
    let n = triplets.len() as f64;
    Ok((ss / n, st / n))
}

/// Per-epoch distance trajectory.
pub fn pair_distance_trace(epochs: &[Vec<TripletCls>], kind: LossKind) -> Result<Vec<TraceRow>> {
    epochs
        .iter()
        .enumerate()
        .map(|(epoch, batch)| {
            let (ss, st) = epoch_distances(batch)?;
            Ok(TraceRow {
                epoch,
                mean_d_source_source: ss,
                mean_d_source_target: st,
                loss_kind: kind,
            })
        })
        .collect()
}

pub fn write_trace_csv<W: Write>(mut w: W, rows: &[TraceRow], header: bool) -> Result<()> {
    if header {
        writeln!(w, "epoch,mean_d_source_source,mean_d_source_target,loss_kind")?;
    }
    for r in rows {
        writeln!(
            w,
            "{},{:.17e},{:.17e},{}",
            r.epoch,
            r.mean_d_source_source,
            r.mean_d_source_target,
            r.loss_kind.as_str()
        )?;
    }
    Ok(())
}

pub fn read_trace_csv(text: &str) -> Result<Vec<TraceRow>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 && line.starts_with("epoch") || line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let parse = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::Input(format!("trace line {}: bad number {s:?}", i + 1)))
        };
        if f.len() != 4 {
            return Err(Error::Input(format!("trace line {}: expected 4 fields", i + 1)));
        }
        rows.push(TraceRow {
            epoch: f[0].parse().map_err(|_| Error::Input(format!("trace line {}: bad epoch", i + 1)))?,
            mean_d_source_source: parse(f[1])?,
            mean_d_source_target: parse(f[2])?,
            loss_kind: f[3].parse()?,
        });
    }
    Ok(rows)
}

impl TripletCls {
    pub fn from_vars(anchor: Var<'_>, positive: Var<'_>, target: Var<'_>) -> Self {
        let v = |x: Var<'_>| x.value().data().to_vec();
        Self { anchor: v(anchor), positive: v(positive), target: v(target) }
    }
}

/// Row vector leaf helper for fixtures.
pub fn row<'t>(tape: &'t crate::autodiff::Tape, v: &[f64]) -> Var<'t> {
    tape.var(Tensor::new(vec![1, v.len()], v.to_vec()).expect("row"))
}
