use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use mrcadapt::analysis::{
    cluster_analysis, integrated_gradients, write_attribution_csv, write_coordinates_csv, AnalysisFrame,
    ClusterOptions, MeanStd, OutputSelector,
};
use mrcadapt::corpus::{
    from_squad_json, generate_corpus, read_jsonl, tokenize_all, write_jsonl, CorpusSpec, Domain, RawExample,
    Vocabulary,
};
use mrcadapt::discriminator::{write_trace_csv, LossKind};
use mrcadapt::eval_metrics::{
    compute_metrics, golds_from_bioasq, read_golds, split_known, write_golds, write_predictions, GoldenAnswer,
    MetricReport, RANK_CUTOFF,
};
use mrcadapt::model::{Model, ModelConfig};
use mrcadapt::mrc_head::argmax_span;
use mrcadapt::trainer::{prepare_data, run_experiment, semi_supervised_split, EvalSet, TrainConfig};
use serde::Serialize;

use crate::config::{self, Pairs};
use crate::manifest::{write_json, RunManifest};
use crate::{Exit, ImportFormat, Mode, OUT_DIR_ENV};

pub const SOURCE_FILE: &str = "source.jsonl";
pub const TARGET_TRAIN_FILE: &str = "target_train.jsonl";
pub const TARGET_TEST_FILE: &str = "target_test.jsonl";
pub const GOLDS_FILE: &str = "target_test.golds.jsonl";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const SPEC_FILE: &str = "corpus.conf";

/// `--out`, else `$MRCADAPT_OUT_DIR`, else `mrcadapt-out/<command>`.
fn out_dir(flag: Option<PathBuf>, command: &str) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| Path::new("mrcadapt-out").join(command))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn read_examples(path: &Path) -> Result<Vec<RawExample>> {
    read_jsonl(open(path)?).with_context(|| format!("reading {}", path.display()))
}

fn read_vocab(path: &Path) -> Result<Vocabulary> {
    Vocabulary::read(open(path)?).with_context(|| format!("reading {}", path.display()))
}

fn config_pairs(path: Option<&Path>) -> Result<Pairs> {
    match path {
        Some(p) => config::read(p).context(Exit(2)),
        None => Ok(Pairs::new()),
    }
}

pub fn gen_corpus(spec_path: Option<&Path>, out: Option<PathBuf>) -> Result<()> {
    let out = out_dir(out, "corpus");
    let mut manifest = RunManifest::start("gen-corpus");
    let pairs = config_pairs(spec_path)?;
    let (spec, rest) = config::overlay(&CorpusSpec::default(), &pairs).context(Exit(2))?;
    config::reject_unknown(&rest).context(Exit(2))?;
    spec.validate()?;
    if let Some(p) = spec_path {
        manifest.config(p)?;
    }
    let corpus = generate_corpus(&spec)?;
    let golds: Vec<GoldenAnswer> = corpus
        .target_test
        .iter()
        .filter_map(|e| e.answer.as_ref().map(|a| GoldenAnswer { id: e.id.clone(), answer: a.text.clone() }))
        .collect();

    // Everything is written to a sibling staging directory first so a failure
    // never leaves a partial dataset behind.
    let parent = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    create_dir(parent)?;
    let name = out.file_name().ok_or_else(|| anyhow!("output path {} has no name", out.display()))?;
    let staging = parent.join(format!(".{}.staging-{}", name.to_string_lossy(), std::process::id()));
    create_dir(&staging)?;
    let staged = (|| -> Result<Vec<&str>> {
        write_jsonl(create(&staging.join(SOURCE_FILE))?, &corpus.source)?;
        write_jsonl(create(&staging.join(TARGET_TRAIN_FILE))?, &corpus.target_train)?;
        write_jsonl(create(&staging.join(TARGET_TEST_FILE))?, &corpus.target_test)?;
        write_golds(create(&staging.join(GOLDS_FILE))?, &golds)?;
        corpus.vocab.write(create(&staging.join(VOCAB_FILE))?)?;
        fs::write(staging.join(SPEC_FILE), config::render(&spec)?)?;
        Ok(vec![SOURCE_FILE, TARGET_TRAIN_FILE, TARGET_TEST_FILE, GOLDS_FILE, VOCAB_FILE, SPEC_FILE])
    })();
    let files = match staged {
        Ok(f) => f,
        Err(e) => {
            let _ = fs::remove_dir_all(&staging);
            return Err(e);
        }
    };
    create_dir(&out)?;
    for f in &files {
        fs::rename(staging.join(f), out.join(f))?;
        manifest.output(&out.join(f))?;
    }
    fs::remove_dir_all(&staging)?;

    manifest.seeds = vec![spec.seed];
    manifest.settings = serde_json::json!({
        "spec": spec,
        "n_source": corpus.source.len(),
        "n_target_train": corpus.target_train.len(),
        "n_target_test": corpus.target_test.len(),
        "vocab_size": corpus.vocab.len(),
    });
    manifest.finish(&out)?;
    println!(
        "wrote {} source, {} target-train, {} target-test examples (vocabulary {}) to {}",
        corpus.source.len(),
        corpus.target_train.len(),
        corpus.target_test.len(),
        corpus.vocab.len(),
        out.display()
    );
    Ok(())
}

pub fn import(format: ImportFormat, input: &Path, domain: &str, mask_questions: bool, output: &Path) -> Result<()> {
    let text = fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
    match format {
        ImportFormat::Squad => {
            let domain = match domain {
                "source" => Domain::Source,
                "target" => Domain::Target,
                other => return Err(anyhow!("domain must be source or target, got {other:?}")).context(Exit(2)),
            };
            let examples = from_squad_json(&text, domain, mask_questions)?;
            write_jsonl(create(output)?, &examples)?;
            println!("imported {} examples into {}", examples.len(), output.display());
        }
        ImportFormat::BioasqGolds => {
            let golds = golds_from_bioasq(&text)?;
            write_golds(create(output)?, &golds)?;
            println!("imported {} factoid golds into {}", golds.len(), output.display());
        }
    }
    Ok(())
}

/// Training and model settings from one key=value file. Model keys are the
/// dotted paths of [`ModelConfig`] (`encoder.hidden_size`, `margin`,
/// `limits.max_seq_len`); everything else belongs to [`TrainConfig`].
pub fn load_configs(path: Option<&Path>, vocab_size: usize) -> Result<(TrainConfig, ModelConfig)> {
    let pairs = config_pairs(path)?;
    let (train, rest) = config::overlay(&TrainConfig::desk(), &pairs).context(Exit(2))?;
    let (mut model, rest) = config::overlay(&ModelConfig::desk(vocab_size), &rest).context(Exit(2))?;
    config::reject_unknown(&rest).context(Exit(2))?;
    if model.encoder.vocab_size != vocab_size {
        return Err(anyhow!(
            "encoder.vocab_size {} disagrees with the {vocab_size}-entry vocabulary",
            model.encoder.vocab_size
        ))
        .context(Exit(2));
    }
    model.encoder.vocab_size = vocab_size;
    train.validate()?;
    model.validate()?;
    Ok((train, model))
}

fn apply_mode(cfg: &mut TrainConfig, mode: Mode) {
    let (disc, aux, kind) = match mode {
        Mode::Baseline => (false, false, LossKind::Triplet),
        Mode::NoAux => (true, false, LossKind::Triplet),
        Mode::Full => (true, true, LossKind::Triplet),
        Mode::Distance => (true, true, LossKind::Distance),
    };
    cfg.discriminator_enabled = disc;
    cfg.aux_enabled = aux;
    cfg.loss_kind = kind;
}

#[derive(Serialize)]
struct SeedResult {
    seed: u64,
    metrics: Option<MetricReport>,
    failure: Option<String>,
}

#[derive(Serialize)]
struct Summary {
    mode: Mode,
    labeled_target_ratio: f64,
    runs: Vec<SeedResult>,
    /// Mean and sample standard deviation over seeds, per metric.
    mean_std: BTreeMap<String, MeanStd>,
}

fn aggregate(runs: &[SeedResult]) -> BTreeMap<String, MeanStd> {
    let reports: Vec<&MetricReport> = runs.iter().filter_map(|r| r.metrics.as_ref()).collect();
    let mut out = BTreeMap::new();
    if reports.is_empty() {
        return out;
    }
    let mut put = |name: &str, values: Vec<f64>| {
        if values.len() == reports.len() {
            out.insert(name.to_string(), MeanStd::of(&values));
        }
    };
    put("sacc", reports.iter().map(|r| r.sacc).collect());
    put("lacc", reports.iter().map(|r| r.lacc).collect());
    put("mrr", reports.iter().map(|r| r.mrr).collect());
    put("em", reports.iter().filter_map(|r| r.em).collect());
    put("f1", reports.iter().filter_map(|r| r.f1).collect());
    out
}

pub fn train(
    config_path: Option<&Path>,
    data: &Path,
    out: Option<PathBuf>,
    mode: Mode,
    seeds: &[u64],
    ratio: Option<f64>,
) -> Result<()> {
    let out = out_dir(out, "train");
    let mut manifest = RunManifest::start("train");
    let vocab_path = data.join(VOCAB_FILE);
    let vocab = read_vocab(&vocab_path)?;
    let (mut cfg, model_cfg) = load_configs(config_path, vocab.len())?;
    apply_mode(&mut cfg, mode);
    if let Some(r) = ratio {
        cfg.labeled_target_ratio = r;
    }
    cfg.validate()?;
    let seeds: Vec<u64> = if seeds.is_empty() { vec![cfg.seed] } else { seeds.to_vec() };
    if let Some(p) = config_path {
        manifest.config(p)?;
    }

    let source = read_examples(&data.join(SOURCE_FILE))?;
    let target_train = read_examples(&data.join(TARGET_TRAIN_FILE))?;
    let n_labeled = semi_supervised_split(&target_train, cfg.labeled_target_ratio)?
        .iter()
        .filter(|e| e.is_labeled())
        .count();
    let train_data = prepare_data(&source, &target_train, &vocab, &model_cfg.limits, cfg.labeled_target_ratio)?;
    for f in [SOURCE_FILE, TARGET_TRAIN_FILE, VOCAB_FILE] {
        manifest.input(&data.join(f))?;
    }
    let test_path = data.join(TARGET_TEST_FILE);
    let eval_set = if test_path.exists() {
        manifest.input(&test_path)?;
        Some(EvalSet::from_raw(&read_examples(&test_path)?, &vocab, &model_cfg.limits)?)
    } else {
        eprintln!("warning: {} not found, skipping evaluation", test_path.display());
        None
    };

    create_dir(&out)?;
    let mut runs = Vec::new();
    let mut diverged = None;
    for &seed in &seeds {
        let mut run_cfg = cfg.clone();
        run_cfg.seed = seed;
        let dir = out.join(format!("seed_{seed}"));
        create_dir(&dir)?;
        let outcome = run_experiment(&run_cfg, &model_cfg, &train_data, eval_set.as_ref())?;
        let mut report = outcome.report;

        let ckpt = dir.join("model.ckpt");
        outcome.model.save(create(&ckpt)?)?;
        manifest.output(&ckpt)?;
        if !report.distance_trace.is_empty() {
            let trace = dir.join("distance_trace.csv");
            write_trace_csv(create(&trace)?, &report.distance_trace, true)?;
            manifest.output(&trace)?;
            report.distance_trace_path = Some("distance_trace.csv".into());
        }
        if let Some(p) = &outcome.predictions {
            let path = dir.join("predictions.jsonl");
            write_predictions(create(&path)?, p)?;
            manifest.output(&path)?;
        }
        let report_path = dir.join("report.json");
        write_json(&report_path, &report)?;
        manifest.output(&report_path)?;

        match (&report.failure, &report.metrics) {
            (Some(f), _) => eprintln!("seed {seed}: {f}"),
            (None, Some(m)) => println!("seed {seed}: SAcc {:.4} LAcc {:.4} MRR {:.4}", m.sacc, m.lacc, m.mrr),
            (None, None) => println!("seed {seed}: trained {} steps", report.steps),
        }
        runs.push(SeedResult { seed, metrics: report.metrics.clone(), failure: report.failure.clone() });
        if report.failure.is_some() {
            diverged = Some(seed);
            break;
        }
    }

    let summary = Summary { mode, labeled_target_ratio: cfg.labeled_target_ratio, mean_std: aggregate(&runs), runs };
    for (name, ms) in &summary.mean_std {
        println!("{name}: {:.4} ± {:.4}", ms.mean, ms.std);
    }
    let summary_path = out.join("summary.json");
    write_json(&summary_path, &summary)?;
    manifest.output(&summary_path)?;
    manifest.seeds = seeds;
    manifest.settings = serde_json::json!({
        "mode": mode,
        "labeled_target_ratio": cfg.labeled_target_ratio,
        "n_target_train": target_train.len(),
        "n_target_labeled": n_labeled,
        "train": cfg,
        "model": model_cfg,
    });
    manifest.finish(&out)?;
    if let Some(seed) = diverged {
        return Err(anyhow!("seed {seed} diverged; report kept in {}", out.display())).context(Exit(3));
    }
    Ok(())
}

fn load_model(path: &Path, expected: Option<&ModelConfig>) -> Result<Model> {
    Model::load(open(path)?, expected).with_context(|| format!("loading {}", path.display()))
}

fn check_vocab(model: &Model, vocab: &Vocabulary) -> Result<()> {
    if model.config.encoder.vocab_size != vocab.len() {
        return Err(anyhow!(
            "checkpoint expects {} vocabulary entries, vocabulary file has {}",
            model.config.encoder.vocab_size,
            vocab.len()
        ))
        .context(Exit(4));
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput {
    metrics: MetricReport,
    unknown_gold_ids: Vec<String>,
}

pub fn eval(
    checkpoint: &Path,
    test: &Path,
    golds_path: &Path,
    vocab_path: &Path,
    config_path: Option<&Path>,
    out: Option<PathBuf>,
) -> Result<()> {
    let out = out_dir(out, "eval");
    let mut manifest = RunManifest::start("eval");
    let vocab = read_vocab(vocab_path)?;
    let expected = match config_path {
        Some(p) => {
            manifest.config(p)?;
            Some(load_configs(Some(p), vocab.len())?.1)
        }
        None => None,
    };
    let model = load_model(checkpoint, expected.as_ref())?;
    check_vocab(&model, &vocab)?;
    let examples = read_examples(test)?;
    let golds = read_golds(open(golds_path)?).with_context(|| format!("reading {}", golds_path.display()))?;
    for p in [checkpoint, test, golds_path, vocab_path] {
        manifest.input(p)?;
    }

    let windows = tokenize_all(&examples, &vocab, &model.config.limits, true)?;
    let predictions = model.predict(&windows, RANK_CUTOFF)?;
    let lookup: HashMap<String, _> = predictions.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    let (known, unknown) = split_known(&lookup, golds);
    for id in &unknown {
        eprintln!("warning: gold id {id:?} has no test example; excluded");
    }
    let metrics = compute_metrics(&lookup, &known)?;

    create_dir(&out)?;
    let pred_path = out.join("predictions.jsonl");
    write_predictions(create(&pred_path)?, &predictions)?;
    let metrics_path = out.join("metrics.json");
    write_json(&metrics_path, &EvalOutput { metrics: metrics.clone(), unknown_gold_ids: unknown })?;
    manifest.output(&pred_path)?;
    manifest.output(&metrics_path)?;
    manifest.finish(&out)?;
    print!("{}", metrics.table());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn analyze(
    checkpoints: &[PathBuf],
    data: &Path,
    target_file: &str,
    repeats: usize,
    eps: &str,
    min_samples: usize,
    metric: &str,
    seed: u64,
    out: Option<PathBuf>,
) -> Result<()> {
    let out = out_dir(out, "analyze");
    let mut manifest = RunManifest::start("analyze");
    let opts = ClusterOptions {
        eps: eps.parse()?,
        min_samples,
        metric: metric.parse()?,
        repeats,
        seed,
        ..ClusterOptions::default()
    };
    if repeats == 0 {
        return Err(anyhow!("--repeats must be positive")).context(Exit(2));
    }
    let vocab = read_vocab(&data.join(VOCAB_FILE))?;
    let source = read_examples(&data.join(SOURCE_FILE))?;
    let target = read_examples(&data.join(target_file))?;
    for f in [VOCAB_FILE, SOURCE_FILE, target_file] {
        manifest.input(&data.join(f))?;
    }
    create_dir(&out)?;

    let mut summary = BTreeMap::new();
    for (i, ckpt) in checkpoints.iter().enumerate() {
        let model = load_model(ckpt, None)?;
        check_vocab(&model, &vocab)?;
        manifest.input(ckpt)?;
        let limits = &model.config.limits;
        let frame = AnalysisFrame::from_model(&model, &tokenize_all(&source, &vocab, limits, true)?)?
            .concat(AnalysisFrame::from_model(&model, &tokenize_all(&target, &vocab, limits, true)?)?);
        let report = cluster_analysis(&frame, &opts)?;

        let stem = ckpt.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into());
        let name = format!("{i}-{stem}");
        let frame_path = out.join(format!("{name}.frame.jsonl"));
        frame.write_jsonl(create(&frame_path)?)?;
        let coords_path = out.join(format!("{name}.coords.csv"));
        write_coordinates_csv(create(&coords_path)?, &report)?;
        let report_path = out.join(format!("{name}.clusters.json"));
        write_json(&report_path, &report)?;
        for p in [&frame_path, &coords_path, &report_path] {
            manifest.output(p)?;
        }
        println!(
            "{}: accuracy {:.3} ± {:.3}, silhouette {:.3} ± {:.3}",
            ckpt.display(),
            report.accuracy.mean,
            report.accuracy.std,
            report.silhouette.mean,
            report.silhouette.std
        );
        summary.insert(ckpt.display().to_string(), (report.accuracy, report.silhouette));
    }
    manifest.seeds = vec![seed];
    manifest.settings = serde_json::json!({ "options": opts, "summary": summary });
    manifest.finish(&out)?;
    Ok(())
}

#[derive(Serialize)]
struct AttributionSummary {
    id: String,
    window: usize,
    steps: usize,
    start_position: usize,
    end_position: usize,
    start_residual: f64,
    end_residual: f64,
}

pub fn attribute(
    checkpoint: &Path,
    data: &Path,
    vocab_path: &Path,
    id: &str,
    steps: usize,
    out: Option<PathBuf>,
) -> Result<()> {
    let out = out_dir(out, "attribute");
    let mut manifest = RunManifest::start("attribute");
    if steps == 0 {
        return Err(anyhow!("--steps must be positive")).context(Exit(2));
    }
    let vocab = read_vocab(vocab_path)?;
    let model = load_model(checkpoint, None)?;
    check_vocab(&model, &vocab)?;
    let examples = read_examples(data)?;
    let example = examples
        .iter()
        .find(|e| e.id == id)
        .ok_or_else(|| anyhow!("example id {id:?} not found in {}", data.display()))
        .context(Exit(5))?;
    for p in [checkpoint, data, vocab_path] {
        manifest.input(p)?;
    }
    let windows = tokenize_all(std::slice::from_ref(example), &vocab, &model.config.limits, true)?;
    let window = windows.first().ok_or_else(|| anyhow!("example {id:?} produced no windows"))?;
    let (s, e) = match (window.answer_start, window.answer_end) {
        (Some(s), Some(e)) => (s, e),
        _ => argmax_span(&model.span_distribution(window)?),
    };
    let start = integrated_gradients(&model, window, OutputSelector::StartLogitAt(s), steps)?;
    let end = integrated_gradients(&model, window, OutputSelector::EndLogitAt(e), steps)?;
    let tokens: Vec<String> =
        window.input_ids.iter().map(|&t| vocab.token(t).unwrap_or("[UNK]").to_string()).collect();

    create_dir(&out)?;
    let csv = out.join("attribution.csv");
    write_attribution_csv(create(&csv)?, &tokens, &start, &end)?;
    let summary = AttributionSummary {
        id: id.to_string(),
        window: window.window,
        steps,
        start_position: s,
        end_position: e,
        start_residual: start.residual(),
        end_residual: end.residual(),
    };
    let json = out.join("attribution.json");
    write_json(&json, &summary)?;
    manifest.output(&csv)?;
    manifest.output(&json)?;
    manifest.finish(&out)?;
    println!(
        "{} tokens; completeness residual start {:.4} end {:.4}",
        tokens.len(),
        summary.start_residual,
        summary.end_residual
    );
    Ok(())
}
