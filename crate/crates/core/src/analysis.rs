//! Representation diagnostics: cosine-distance MDS, DBSCAN, clustering
//! accuracy, silhouette, and integrated-gradients token attribution.

use std::collections::{BTreeMap, VecDeque};
use std::io::{BufRead, Write};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::corpus::{Domain, TokenizedExample, Vocabulary};
use crate::discriminator::cosine_distance_plain;
use crate::encoder::{embed, encode_embeddings, Graph};
use crate::error::{Error, Result};
use crate::model::Model;

pub const NOISE: i64 = -1;

/// One `[CLS]` vector per example with its domain.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AnalysisFrame {
    pub ids: Vec<String>,
    pub domains: Vec<Domain>,
    pub vectors: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct FrameRow {
    id: String,
    domain: Domain,
    vector: Vec<f64>,
}

impl AnalysisFrame {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn push(&mut self, id: impl Into<String>, domain: Domain, vector: Vec<f64>) {
        self.ids.push(id.into());
        self.domains.push(domain);
        self.vectors.push(vector);
    }

    pub fn validate(&self) -> Result<()> {
        if self.ids.len() != self.domains.len() || self.ids.len() != self.vectors.len() {
            return Err(Error::Input("frame columns differ in length".into()));
        }
        let width = self.vectors.first().map_or(0, Vec::len);
        for v in &self.vectors {
            if v.len() != width {
                return Err(Error::dim("frame", &[width], &[v.len()]));
            }
            if v.iter().all(|x| *x == 0.0) {
                return Err(Error::DegenerateVector("frame vector"));
            }
        }
        Ok(())
    }

    /// Encodes the first window of each example with the feature extractor.
    pub fn from_model(model: &Model, windows: &[TokenizedExample]) -> Result<Self> {
        let mut frame = Self::default();
        let mut seen = std::collections::HashSet::new();
        for w in windows {
            if seen.insert(w.example_id.as_str()) {
                frame.push(w.example_id.clone(), w.domain, model.cls_vector(w)?);
            }
        }
        Ok(frame)
    }

    pub fn concat(mut self, other: AnalysisFrame) -> Self {
        self.ids.extend(other.ids);
        self.domains.extend(other.domains);
        self.vectors.extend(other.vectors);
        self
    }

    fn subset(&self, idx: &[usize]) -> Self {
        Self {
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
            domains: idx.iter().map(|&i| self.domains[i]).collect(),
            vectors: idx.iter().map(|&i| self.vectors[i].clone()).collect(),
        }
    }

    /// JSON lines: `{"id", "domain", "vector"}`.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for i in 0..self.len() {
            let row = FrameRow { id: self.ids[i].clone(), domain: self.domains[i], vector: self.vectors[i].clone() };
            serde_json::to_writer(&mut w, &row)?;
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut f = Self::default();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row: FrameRow = serde_json::from_str(&line)?;
            f.push(row.id, row.domain, row.vector);
        }
        f.validate()?;
        Ok(f)
    }
}

pub type Matrix = Vec<Vec<f64>>;

pub fn cosine_distance_matrix(vectors: &[Vec<f64>]) -> Result<Matrix> {
    let n = vectors.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v = cosine_distance_plain(&vectors[i], &vectors[j])?;
            d[i][j] = v;
            d[j][i] = v;
        }
        if vectors[i].iter().all(|x| *x == 0.0) {
            return Err(Error::DegenerateVector("cosine_distance_matrix"));
        }
    }
    Ok(d)
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn euclidean_distance_matrix(points: &[Vec<f64>]) -> Matrix {
    let n = points.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v = euclidean(&points[i], &points[j]);
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    d
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MdsOptions {
    pub dims: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for MdsOptions {
    fn default() -> Self {
        Self { dims: 2, max_iter: 300, tol: 1e-6, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MdsResult {
    pub points: Matrix,
    /// Raw stress of the initial layout followed by one entry per iteration.
    pub stress_trace: Vec<f64>,
}

impl MdsResult {
    pub fn stress(&self) -> f64 {
        *self.stress_trace.last().expect("stress trace is never empty")
    }
}

/// `Σ_{i<j} (d_ij − ‖x_i − x_j‖)²`.
pub fn raw_stress(d: &Matrix, x: &Matrix) -> f64 {
    let mut s = 0.0;
    for i in 0..d.len() {
        for j in i + 1..d.len() {
            let r = d[i][j] - euclidean(&x[i], &x[j]);
            s += r * r;
        }
    }
    s
}

fn validate_distances(d: &Matrix) -> Result<()> {
    let n = d.len();
    for (i, row) in d.iter().enumerate() {
        if row.len() != n {
            return Err(Error::Input(format!("distance row {i} has {} entries, want {n}", row.len())));
        }
        if row[i] != 0.0 {
            return Err(Error::Input(format!("distance diagonal at {i} is {}", row[i])));
        }
        for j in 0..n {
            let v = row[j];
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Input(format!("distance ({i},{j}) = {v} is not a non-negative number")));
            }
            if (v - d[j][i]).abs() > 1e-9 * v.abs().max(1.0) {
                return Err(Error::Input(format!("distance matrix asymmetric at ({i},{j})")));
            }
        }
    }
    Ok(())
}

/// SMACOF stress majorization with unit weights via Guttman transforms.
pub fn mds_embed(d: &Matrix, opts: &MdsOptions) -> Result<MdsResult> {
    validate_distances(d)?;
    if opts.dims == 0 {
        return Err(Error::Config("mds dims must be positive".into()));
    }
    let n = d.len();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let scale = d.iter().flatten().fold(0.0f64, |m, v| m.max(*v)).max(1e-12);
    let mut x: Matrix = (0..n)
        .map(|_| (0..opts.dims).map(|_| rng.gen_range(-0.5..0.5) * scale).collect())
        .collect();
    let mut trace = vec![raw_stress(d, &x)];
    if n < 2 {
        return Ok(MdsResult { points: x, stress_trace: trace });
    }
    for _ in 0..opts.max_iter {
        let mut next = vec![vec![0.0; opts.dims]; n];
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let dist = euclidean(&x[i], &x[j]);
                if dist <= 0.0 {
                    continue;
                }
                let b = d[i][j] / dist;
                for k in 0..opts.dims {
                    next[i][k] += b * (x[i][k] - x[j][k]);
                }
            }
            for k in 0..opts.dims {
                next[i][k] /= n as f64;
            }
        }
        // Guttman transform of a centered layout stays centered; keep it so.
        for k in 0..opts.dims {
            let m = next.iter().map(|p| p[k]).sum::<f64>() / n as f64;
            next.iter_mut().for_each(|p| p[k] -= m);
        }
        x = next;
        let prev = *trace.last().expect("nonempty");
        let s = raw_stress(d, &x);
        trace.push(s);
        if prev <= 0.0 || (prev - s) / prev < opts.tol {
            break;
        }
    }
    Ok(MdsResult { points: x, stress_trace: trace })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Euclidean,
    Cosine,
}

impl std::str::FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Metric::Euclidean),
            "cosine" => Ok(Metric::Cosine),
            other => Err(Error::Config(format!("unknown metric {other:?}"))),
        }
    }
}

pub fn distance_matrix(points: &[Vec<f64>], metric: Metric) -> Result<Matrix> {
    match metric {
        Metric::Euclidean => Ok(euclidean_distance_matrix(points)),
        Metric::Cosine => cosine_distance_matrix(points),
    }
}

/// DBSCAN over a precomputed distance matrix.
///
/// A point is core when at least `min_samples` points (itself included) lie
/// within `eps`. Clusters are connected components of the core graph,
/// numbered by their smallest member index. A border point joins the cluster
/// of its nearest core neighbor, so the partition does not depend on input
/// order. Everything else is [`NOISE`].
pub fn dbscan_matrix(d: &Matrix, eps: f64, min_samples: usize) -> Result<Vec<i64>> {
    if !(eps > 0.0) || min_samples == 0 {
        return Err(Error::Config(format!("dbscan needs eps > 0 and min_samples >= 1, got {eps}, {min_samples}")));
    }
    let n = d.len();
    let neighbors: Vec<Vec<usize>> = (0..n).map(|i| (0..n).filter(|&j| d[i][j] <= eps).collect()).collect();
    let core: Vec<bool> = neighbors.iter().map(|nb| nb.len() >= min_samples).collect();
    let mut labels = vec![NOISE; n];
    let mut next = 0;
    for seed in 0..n {
        if !core[seed] || labels[seed] != NOISE {
            continue;
        }
        labels[seed] = next;
        let mut queue = VecDeque::from([seed]);
        while let Some(p) = queue.pop_front() {
            for &q in &neighbors[p] {
                if core[q] && labels[q] == NOISE {
                    labels[q] = next;
                    queue.push_back(q);
                }
            }
        }
        next += 1;
    }
    for i in 0..n {
        if core[i] {
            continue;
        }
        let nearest = neighbors[i]
            .iter()
            .filter(|&&j| core[j])
            .min_by(|&&a, &&b| d[i][a].total_cmp(&d[i][b]).then(labels[a].cmp(&labels[b])));
        if let Some(&j) = nearest {
            labels[i] = labels[j];
        }
    }
    Ok(labels)
}

pub fn dbscan(points: &[Vec<f64>], eps: f64, min_samples: usize, metric: Metric) -> Result<Vec<i64>> {
    dbscan_matrix(&distance_matrix(points, metric)?, eps, min_samples)
}

/// Best fraction of points labeled correctly when each cluster is mapped to
/// one domain. Noise always counts as wrong.
pub fn clustering_accuracy(clusters: &[i64], domains: &[Domain]) -> Result<f64> {
    if clusters.len() != domains.len() {
        return Err(Error::dim("clustering_accuracy", &[clusters.len()], &[domains.len()]));
    }
    if clusters.is_empty() {
        return Err(Error::Input("empty clustering".into()));
    }
    let mut counts: BTreeMap<i64, (usize, usize)> = BTreeMap::new();
    for (&c, &d) in clusters.iter().zip(domains) {
        if c == NOISE {
            continue;
        }
        let e = counts.entry(c).or_default();
        match d {
            Domain::Source => e.0 += 1,
            Domain::Target => e.1 += 1,
        }
    }
    let correct: usize = counts.values().map(|&(s, t)| s.max(t)).sum();
    Ok(correct as f64 / clusters.len() as f64)
}

/// Mean silhouette over non-noise points. Points alone in their cluster score 0.
pub fn silhouette(d: &Matrix, clusters: &[i64]) -> Result<f64> {
    if d.len() != clusters.len() {
        return Err(Error::dim("silhouette", &[d.len()], &[clusters.len()]));
    }
    let mut members: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (i, &c) in clusters.iter().enumerate() {
        if c != NOISE {
            members.entry(c).or_default().push(i);
        }
    }
    if members.len() < 2 {
        return Err(Error::UndefinedScore(format!("silhouette needs 2 clusters, found {}", members.len())));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (&c, own) in &members {
        for &i in own {
            count += 1;
            if own.len() == 1 {
                continue;
            }
            let a = own.iter().filter(|&&j| j != i).map(|&j| d[i][j]).sum::<f64>() / (own.len() - 1) as f64;
            let b = members
                .iter()
                .filter(|(&k, _)| k != c)
                .map(|(_, m)| m.iter().map(|&j| d[i][j]).sum::<f64>() / m.len() as f64)
                .fold(f64::INFINITY, f64::min);
            let denom = a.max(b);
            if denom > 0.0 {
                total += (b - a) / denom;
            }
        }
    }
    Ok(total / count as f64)
}

/// How DBSCAN's radius is chosen on each resample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpsRule {
    Fixed(f64),
    /// This quantile of the per-point distance to the `min_samples`-th
    /// nearest point (the point itself counts as the first).
    KDistance(f64),
}

impl EpsRule {
    /// Preset radii used for the three published test sets.
    pub const PRESETS: [f64; 3] = [0.005, 0.01, 0.001];

    pub fn resolve(self, d: &Matrix, min_samples: usize) -> Result<f64> {
        match self {
            EpsRule::Fixed(e) => Ok(e),
            EpsRule::KDistance(q) => {
                if !(0.0..=1.0).contains(&q) {
                    return Err(Error::Config(format!("k-distance quantile {q} outside [0, 1]")));
                }
                if d.is_empty() || min_samples == 0 {
                    return Err(Error::Input("k-distance needs points and min_samples >= 1".into()));
                }
                let k = min_samples.min(d.len()) - 1;
                let mut kd: Vec<f64> = d
                    .iter()
                    .map(|row| {
                        let mut r = row.clone();
                        r.sort_by(f64::total_cmp);
                        r[k]
                    })
                    .collect();
                kd.sort_by(f64::total_cmp);
                let e = kd[((kd.len() - 1) as f64 * q).round() as usize];
                Ok(e.max(1e-12))
            }
        }
    }
}

impl std::str::FromStr for EpsRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("eps must be a number or k<quantile>, got {s:?}"));
        match s.strip_prefix('k') {
            Some(q) => Ok(EpsRule::KDistance(q.parse().map_err(|_| bad())?)),
            None => Ok(EpsRule::Fixed(s.parse().map_err(|_| bad())?)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterOptions {
    pub eps: EpsRule,
    pub min_samples: usize,
    /// Space DBSCAN runs in: MDS coordinates (euclidean) or raw vectors (cosine).
    pub metric: Metric,
    pub repeats: usize,
    pub seed: u64,
    pub mds: MdsOptions,
}

impl Default for ClusterOptions {
    fn default() -> Self {
        Self {
            eps: EpsRule::KDistance(0.9),
            min_samples: 20,
            metric: Metric::Euclidean,
            repeats: 5,
            seed: 0,
            mds: MdsOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterSample {
    pub accuracy: f64,
    /// 0 when fewer than two clusters were found.
    pub silhouette: f64,
    pub silhouette_defined: bool,
    pub n_clusters: usize,
    pub n_noise: usize,
    pub eps: f64,
    pub stress: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Sample standard deviation (n − 1); 0 for a single value.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        if values.is_empty() {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub options: ClusterOptions,
    pub samples: Vec<ClusterSample>,
    pub accuracy: MeanStd,
    pub silhouette: MeanStd,
    /// MDS coordinates of the first resample, aligned with `ids`/`domains`.
    pub coordinates: Vec<Vec<f64>>,
    pub ids: Vec<String>,
    pub domains: Vec<Domain>,
}

/// Indices of a domain-balanced subsample: the larger domain is reduced to
/// the smaller one's size without replacement.
pub fn balanced_sample<R: Rng + ?Sized>(domains: &[Domain], rng: &mut R) -> Result<Vec<usize>> {
    let src: Vec<usize> = (0..domains.len()).filter(|&i| domains[i] == Domain::Source).collect();
    let tgt: Vec<usize> = (0..domains.len()).filter(|&i| domains[i] == Domain::Target).collect();
    if src.is_empty() || tgt.is_empty() {
        return Err(Error::Input("analysis needs both source and target examples".into()));
    }
    let k = src.len().min(tgt.len());
    let mut take = |pool: &[usize]| -> Vec<usize> {
        let mut picked: Vec<usize> = sample(rng, pool.len(), k).into_iter().map(|i| pool[i]).collect();
        picked.sort_unstable();
        picked
    };
    let mut idx = take(&src);
    idx.extend(take(&tgt));
    Ok(idx)
}

/// MDS + DBSCAN + scoring on `repeats` balanced resamples.
pub fn cluster_analysis(frame: &AnalysisFrame, opts: &ClusterOptions) -> Result<ClusterReport> {
    frame.validate()?;
    if opts.repeats == 0 {
        return Err(Error::Config("repeats must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut samples = Vec::new();
    let mut first = None;
    for r in 0..opts.repeats {
        let idx = balanced_sample(&frame.domains, &mut rng)?;
        let sub = frame.subset(&idx);
        let dist = cosine_distance_matrix(&sub.vectors)?;
        let mds = mds_embed(&dist, &MdsOptions { seed: opts.mds.seed.wrapping_add(r as u64), ..opts.mds })?;
        let space = match opts.metric {
            Metric::Euclidean => euclidean_distance_matrix(&mds.points),
            Metric::Cosine => dist,
        };
        let eps = opts.eps.resolve(&space, opts.min_samples)?;
        let labels = dbscan_matrix(&space, eps, opts.min_samples)?;
        let accuracy = clustering_accuracy(&labels, &sub.domains)?;
        let (silhouette, defined) = match silhouette(&space, &labels) {
            Ok(s) => (s, true),
            Err(Error::UndefinedScore(_)) => (0.0, false),
            Err(e) => return Err(e),
        };
        let n_clusters = labels.iter().filter(|&&l| l != NOISE).collect::<std::collections::BTreeSet<_>>().len();
        samples.push(ClusterSample {
            accuracy,
            silhouette,
            silhouette_defined: defined,
            n_clusters,
            n_noise: labels.iter().filter(|&&l| l == NOISE).count(),
            eps,
            stress: mds.stress(),
        });
        if first.is_none() {
            first = Some((mds.points, sub));
        }
    }
    let (coordinates, sub) = first.expect("repeats > 0");
    Ok(ClusterReport {
        options: opts.clone(),
        accuracy: MeanStd::of(&samples.iter().map(|s| s.accuracy).collect::<Vec<_>>()),
        silhouette: MeanStd::of(&samples.iter().map(|s| s.silhouette).collect::<Vec<_>>()),
        samples,
        coordinates,
        ids: sub.ids,
        domains: sub.domains,
    })
}

pub fn write_coordinates_csv<W: Write>(mut w: W, report: &ClusterReport) -> Result<()> {
    writeln!(w, "id,domain,x,y")?;
    for (i, p) in report.coordinates.iter().enumerate() {
        let y = p.get(1).copied().unwrap_or(0.0);
        writeln!(w, "{},{},{:.17e},{:.17e}", report.ids[i], report.domains[i].as_str(), p[0], y)?;
    }
    Ok(())
}

/// Scalar output whose attribution is computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputSelector {
    StartLogitAt(usize),
    EndLogitAt(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    /// One value per input position.
    pub per_token: Vec<f64>,
    pub f_input: f64,
    pub f_baseline: f64,
}

impl Attribution {
    /// `|Σ attributions − (F(x) − F(x'))|`.
    pub fn completeness_gap(&self) -> f64 {
        (self.per_token.iter().sum::<f64>() - (self.f_input - self.f_baseline)).abs()
    }

    /// Completeness gap relative to `|F(x) − F(x')|`.
    pub fn residual(&self) -> f64 {
        let delta = (self.f_input - self.f_baseline).abs();
        if delta == 0.0 {
            return self.completeness_gap();
        }
        self.completeness_gap() / delta
    }
}

/// Integrated gradients of a scalar function of an `[n, h]` input along the
/// straight path from `baseline` to `input`, with a right Riemann sum of `m`
/// steps. Attributions are summed over the second axis.
pub fn integrated_gradients_with<F>(input: &Tensor, baseline: &Tensor, steps: usize, f: F) -> Result<Attribution>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    if steps == 0 {
        return Err(Error::Config("integrated gradients needs at least one step".into()));
    }
    if input.shape() != baseline.shape() || input.shape().len() != 2 {
        return Err(Error::dim("integrated_gradients", input.shape(), baseline.shape()));
    }
    let eval = |t: &Tensor| -> Result<f64> {
        let tape = Tape::new();
        let out = f(&tape, tape.constant(t.clone()))?;
        scalar(out)
    };
    let diff: Vec<f64> = input.data().iter().zip(baseline.data()).map(|(x, b)| x - b).collect();
    let mut avg = vec![0.0; diff.len()];
    for k in 1..=steps {
        let a = k as f64 / steps as f64;
        let point: Vec<f64> = baseline.data().iter().zip(&diff).map(|(b, d)| b + a * d).collect();
        let tape = Tape::new();
        let x = tape.var(Tensor::new(input.shape().to_vec(), point)?);
        let out = f(&tape, x)?;
        scalar(out)?;
        tape.backward(out)?;
        let g = x.grad().ok_or_else(|| Error::Contract("selector does not depend on the input".into()))?;
        for (acc, v) in avg.iter_mut().zip(g.data()) {
            *acc += v / steps as f64;
        }
    }
    let (n, h) = (input.shape()[0], input.shape()[1]);
    let per_token = (0..n).map(|t| (0..h).map(|j| diff[t * h + j] * avg[t * h + j]).sum()).collect();
    Ok(Attribution { per_token, f_input: eval(input)?, f_baseline: eval(baseline)? })
}

fn scalar(v: Var<'_>) -> Result<f64> {
    if v.value().len() != 1 {
        return Err(Error::Contract(format!("selector must be scalar, got shape {:?}", v.shape())));
    }
    Ok(v.value().data()[0])
}

/// Token ids of the reference input: `[PAD]` everywhere except `[CLS]`/`[SEP]`.
pub fn pad_baseline_ids(example: &TokenizedExample) -> Vec<usize> {
    example
        .input_ids
        .iter()
        .map(|&id| if id == Vocabulary::CLS_ID || id == Vocabulary::SEP_ID { id } else { Vocabulary::PAD_ID })
        .collect()
}

fn embedding_of(model: &Model, ids: &[usize], segments: &[usize]) -> Result<Tensor> {
    let tape = Tape::new();
    let g = Graph::eval(&tape, &model.store);
    let e = embed(&g, &model.encoder, ids, segments)?;
    Ok((*e.value()).clone())
}

/// Attribution of a start/end logit to each input token, interpolating the
/// embedding layer's output between the `[PAD]` baseline and the example.
pub fn integrated_gradients(model: &Model, example: &TokenizedExample, selector: OutputSelector, steps: usize) -> Result<Attribution> {
    let pos = match selector {
        OutputSelector::StartLogitAt(p) | OutputSelector::EndLogitAt(p) => p,
    };
    if pos >= example.len() {
        return Err(Error::Contract(format!("selector position {pos} outside {} tokens", example.len())));
    }
    let input = embedding_of(model, &example.input_ids, &example.segment_ids)?;
    let baseline = embedding_of(model, &pad_baseline_ids(example), &example.segment_ids)?;
    let weight = match selector {
        OutputSelector::StartLogitAt(_) => model.head.w_start,
        OutputSelector::EndLogitAt(_) => model.head.w_end,
    };
    integrated_gradients_with(&input, &baseline, steps, |tape, x| {
        let g = Graph::eval(tape, &model.store);
        let f = encode_embeddings(&g, &model.encoder, x, None)?.features;
        f.slice_rows(pos, pos + 1)?.matmul(g.p(weight))?.reshape(&[])
    })
}

/// CSV with one row per token: `position,token,start,end`.
pub fn write_attribution_csv<W: Write>(
    mut w: W,
    tokens: &[String],
    start: &Attribution,
    end: &Attribution,
) -> Result<()> {
    if tokens.len() != start.per_token.len() || tokens.len() != end.per_token.len() {
        return Err(Error::dim("attribution", &[tokens.len()], &[start.per_token.len()]));
    }
    writeln!(w, "position,token,start_attribution,end_attribution")?;
    for (i, t) in tokens.iter().enumerate() {
        let t = if t.contains([',', '"']) { format!("\"{}\"", t.replace('"', "\"\"")) } else { t.clone() };
        writeln!(w, "{i},{t},{:.17e},{:.17e}", start.per_token[i], end.per_token[i])?;
    }
    Ok(())
}
