//! Workloads shared by the benchmarks in `benches/`.

use mrcadapt::autodiff::Tensor;
use mrcadapt::corpus::{generate_corpus, CorpusSpec};
use mrcadapt::model::{Model, ModelConfig};
use mrcadapt::trainer::{prepare_data, TrainData, TripletIndex};

/// Deterministic dense tensor with entries in `[-1, 1]`.
pub fn filled(shape: &[usize], phase: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|i| (i as f64 * 0.37 + phase).sin()).collect()).expect("shape matches data")
}

pub struct StepFixture {
    pub model: Model,
    pub data: TrainData,
    pub batch: Vec<TripletIndex>,
}

/// Desk-geometry model on a small corpus with a four-triplet batch.
pub fn step_fixture() -> StepFixture {
    let spec = CorpusSpec { n_source: 64, n_target_labeled: 16, n_target_unlabeled: 16, n_target_test: 8, ..CorpusSpec::default() };
    let corpus = generate_corpus(&spec).expect("valid spec");
    let mc = ModelConfig::desk(corpus.vocab.len());
    let model = Model::new(mc.clone(), 1).expect("valid config");
    let data = prepare_data(&corpus.source, &corpus.target_train, &corpus.vocab, &mc.limits, 0.0).expect("tokenizes");
    let batch = (0..4).map(|i| TripletIndex { anchor: i, positive: i + 4, target: i }).collect();
    StepFixture { model, data, batch }
}

/// `n` points in two blobs four units apart.
pub fn two_blobs(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| {
            let centre = if i % 2 == 0 { 0.0 } else { 4.0 };
            vec![centre + (i as f64 * 1.3).sin(), (i as f64 * 0.7).cos(), (i as f64 * 2.1).sin()]
        })
        .collect()
}
