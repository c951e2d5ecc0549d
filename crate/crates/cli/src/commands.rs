use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use sguq_core::baselines::{HttpNli, PairwiseJudge};
use sguq_core::embedder::{
    embed_records, join_with_records, load_cache, save_cache, EncoderEndpoint,
};
use sguq_core::gpc::{default_grid, GpcModel, KernelSpec};
use sguq_core::http::RetryPolicy;
use sguq_core::judge::{checkpoint_path_for, label_dataset, HttpChat, JudgeEndpoint};
use sguq_core::metrics::{report_json_lines, report_table, roc_points_table, EvalReport};
use sguq_core::parallel::try_ordered_map;
use sguq_core::pipeline::{
    cluster_record, evaluate_methods, featurize, predict_all, read_json_lines,
    score_all_baselines, train, write_json_lines, BaselineConfig, BaselineLine,
    EvaluationInputs, Method, PredictionLine,
};
use sguq_core::records::{load_records, split, write_records, GenerationRecord};
use sguq_core::spectral::{load_spectra, save_spectra, SpectrumVector};
use sguq_core::synth::{generate, SynthSpec};

use crate::args::*;
use crate::meta;

pub const ENCODER_URL: &str = "SGUQ_ENCODER_URL";
pub const JUDGE_URL: &str = "SGUQ_JUDGE_URL";
pub const NLI_URL: &str = "SGUQ_NLI_URL";

fn env_url(var: &str) -> Result<String> {
    match std::env::var(var) {
        Ok(v) if !v.trim().is_empty() => Ok(v),
        _ => Err(sguq_core::Error::Argument(format!("environment variable {var} is not set")).into()),
    }
}

fn records(path: &Path) -> Result<Vec<GenerationRecord>> {
    Ok(load_records(path, None)?.0)
}

/// The side of the seeded split a stage works on.
#[derive(Clone, Copy)]
enum Side {
    Train,
    Test,
}

fn select(records: Vec<GenerationRecord>, s: &SplitArgs, side: Side) -> Result<Vec<GenerationRecord>> {
    match s.train_frac {
        None => Ok(records),
        Some(f) => {
            let (train, test) = split(&records, f, s.seed)?;
            Ok(match side {
                Side::Train => train,
                Side::Test => test,
            })
        }
    }
}

/// Keeps the spectra of `records`, in record order.
fn spectra_for(spectra: Vec<SpectrumVector>, records: &[GenerationRecord]) -> Result<Vec<SpectrumVector>> {
    let mut by_id: std::collections::HashMap<String, SpectrumVector> =
        spectra.into_iter().map(|s| (s.record_id.clone(), s)).collect();
    records
        .iter()
        .map(|r| {
            by_id.remove(&r.id).ok_or_else(|| {
                sguq_core::Error::Join(format!("no spectrum for record {:?}", r.id)).into()
            })
        })
        .collect()
}

fn embeddings_for(
    records: &[GenerationRecord],
    path: &Path,
) -> Result<Vec<sguq_core::embedder::EmbeddingSet>> {
    let all = load_cache(path)?;
    let wanted: HashSet<&str> = records.iter().map(|r| r.id.as_str()).collect();
    let kept = all
        .into_iter()
        .filter(|s| wanted.contains(s.record_id.as_str()))
        .collect();
    Ok(join_with_records(records, kept)?)
}

fn pairwise_judge(args: &JudgeArgs) -> Result<PairwiseJudge> {
    Ok(match args.similarity {
        Similarity::Cosine => PairwiseJudge::cosine(args.tau)?,
        Similarity::Nli => PairwiseJudge::ExternalNli(Arc::new(HttpNli::new(
            &env_url(NLI_URL)?,
            "SGUQ_NLI_TOKEN",
            Duration::from_secs(args.timeout_secs),
            RetryPolicy::default(),
        ))),
    })
}

pub fn label(args: &LabelArgs) -> Result<()> {
    let mut endpoint = JudgeEndpoint::new(&env_url(JUDGE_URL)?, &args.judge_model);
    let mut recs = records(&args.records)?;
    endpoint.max_retries = args.max_retries;
    endpoint.timeout = Duration::from_secs(args.timeout_secs);
    endpoint.in_flight = args.parallelism.max(1);
    let checkpoint = args
        .checkpoint
        .clone()
        .unwrap_or_else(|| checkpoint_path_for(&args.records));
    let chat = HttpChat::new(&endpoint);
    let calls = label_dataset(&mut recs, &chat, Some(&checkpoint), endpoint.in_flight)?;
    let output = args.output.clone().unwrap_or_else(|| args.records.clone());
    let input_digest = meta::digest(&args.records)?;
    write_records(&output, &recs)?;
    eprintln!("labeled {} records with {calls} judge calls", recs.len());
    // The input may have just been overwritten, so its digest was taken first.
    let meta_text = serde_json::json!({
        "command": "label",
        "version": env!("CARGO_PKG_VERSION"),
        "core_version": sguq_core::VERSION,
        "config": args,
        "inputs": [{"path": args.records.display().to_string(), "sha256": input_digest}],
        "outputs": [output.display().to_string()],
    });
    fs::write(
        meta::meta_path(&output),
        serde_json::to_string_pretty(&meta_text)? + "\n",
    )?;
    Ok(())
}

pub fn embed(args: &EmbedArgs) -> Result<()> {
    let mut endpoint = EncoderEndpoint::new(&env_url(ENCODER_URL)?, &args.encoder_model);
    let recs = records(&args.records)?;
    endpoint.max_batch = args.max_batch;
    endpoint.timeout = Duration::from_secs(args.timeout_secs);
    endpoint.in_flight = args.parallelism.max(1);
    let sets = embed_records(&recs, &endpoint)?;
    save_cache(&sets, &args.embeddings)?;
    meta::write("embed", args, &[&args.records], &[&args.embeddings])
}

pub fn featurize_cmd(args: &FeaturizeArgs) -> Result<()> {
    let recs = records(&args.records)?;
    let sets = embeddings_for(&recs, &args.embeddings)?;
    let spectra = featurize(&sets, args.parallelism)?;
    save_spectra(&spectra, &args.spectra)?;
    meta::write(
        "featurize",
        args,
        &[&args.records, &args.embeddings],
        &[&args.spectra],
    )
}

pub fn cluster(args: &ClusterArgs) -> Result<()> {
    let recs = records(&args.records)?;
    let sets = embeddings_for(&recs, &args.embeddings)?;
    let judge = pairwise_judge(&args.judge)?;
    let pairs: Vec<_> = recs.iter().zip(&sets).collect();
    let clusters = try_ordered_map(&pairs, args.parallelism, |(r, e)| {
        cluster_record(r, e, &judge)
    })?;
    write_json_lines(&args.clusters, &clusters)?;
    meta::write(
        "cluster",
        args,
        &[&args.records, &args.embeddings],
        &[&args.clusters],
    )
}

pub fn baselines(args: &BaselinesArgs) -> Result<()> {
    let methods: Vec<Method> = args
        .methods
        .0
        .iter()
        .copied()
        .filter(|m| *m != Method::Sgpu)
        .collect();
    if methods.is_empty() {
        bail!(sguq_core::Error::Argument("no baseline method requested".into()));
    }
    let recs = select(records(&args.records)?, &args.split, Side::Test)?;
    let sets = embeddings_for(&recs, &args.embeddings)?;
    let cfg = BaselineConfig {
        alpha: args.alpha,
        judge: pairwise_judge(&args.judge)?,
        kle_t: args.kle_t,
        ..BaselineConfig::default()
    };
    let lines = score_all_baselines(&recs, &sets, &methods, &cfg, args.parallelism)?;
    write_json_lines(&args.output, &lines)?;
    meta::write(
        "baselines",
        args,
        &[&args.records, &args.embeddings],
        &[&args.output],
    )
}

fn kernel_grid(args: &TrainArgs) -> Result<Vec<KernelSpec>> {
    if args.grid_signal_std.is_none() && args.grid_lengthscale.is_none() {
        return Ok(default_grid());
    }
    let stds: Vec<f64> = match &args.grid_signal_std {
        Some(v) => v.clone(),
        None => sguq_core::gpc::GRID_SIGNAL_STD.to_vec(),
    };
    let lengths: Vec<f64> = match &args.grid_lengthscale {
        Some(v) => v.clone(),
        None => sguq_core::gpc::GRID_LENGTHSCALE.to_vec(),
    };
    let grid: Vec<KernelSpec> = stds
        .iter()
        .flat_map(|&s| lengths.iter().map(move |&l| KernelSpec::squared_exponential(s, l)))
        .collect();
    for k in &grid {
        k.validate()?;
    }
    if grid.is_empty() {
        bail!(sguq_core::Error::Argument("empty kernel grid".into()));
    }
    Ok(grid)
}

pub fn train_cmd(args: &TrainArgs) -> Result<()> {
    let recs = select(records(&args.records)?, &args.split, Side::Train)?;
    let spectra = spectra_for(load_spectra(&args.spectra)?, &recs)?;
    let grid = kernel_grid(args)?;
    let model = train(&spectra, &recs, &grid, args.parallelism)?;
    model.save(&args.model)?;
    eprintln!(
        "trained on {} records: signal variance {}, lengthscale {}, log marginal {:.6}",
        model.m(),
        model.kernel.signal_variance,
        model.kernel.lengthscale,
        model.log_marginal
    );
    meta::write("train", args, &[&args.records, &args.spectra], &[&args.model])
}

pub fn predict(args: &PredictArgs) -> Result<()> {
    let model = GpcModel::load(&args.model)?;
    let mut spectra = load_spectra(&args.spectra)?;
    let mut inputs: Vec<&Path> = vec![&args.spectra, &args.model];
    if args.split.train_frac.is_some() {
        let path = args.records.as_ref().ok_or_else(|| {
            sguq_core::Error::Argument("--train-frac needs --records".into())
        })?;
        let recs = select(records(path)?, &args.split, Side::Test)?;
        spectra = spectra_for(spectra, &recs)?;
        inputs.push(path);
    }
    let preds = predict_all(&model, &spectra, args.parallelism)?;
    let lines: Vec<PredictionLine> = spectra
        .iter()
        .zip(preds)
        .map(|(s, p)| PredictionLine {
            id: s.record_id.clone(),
            prediction: p,
        })
        .collect();
    write_json_lines(&args.predictions, &lines)?;
    meta::write("predict", args, &inputs, &[&args.predictions])
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

pub fn evaluate(args: &EvaluateArgs) -> Result<()> {
    let recs = select(records(&args.records)?, &args.split, Side::Test)?;
    let predictions: Option<Vec<PredictionLine>> =
        args.predictions.as_deref().map(read_json_lines).transpose()?;
    let baselines: Option<Vec<BaselineLine>> =
        args.baselines.as_deref().map(read_json_lines).transpose()?;

    let methods = match &args.methods {
        Some(m) => m.0.clone(),
        None => {
            let mut m = Vec::new();
            if predictions.is_some() {
                m.push(Method::Sgpu);
            }
            if let Some(first) = baselines.as_ref().and_then(|b| b.first()) {
                m.extend(
                    Method::ALL
                        .into_iter()
                        .filter(|x| first.scores.contains_key(x.name())),
                );
            }
            m
        }
    };
    if methods.is_empty() {
        bail!(sguq_core::Error::Argument(
            "nothing to evaluate: pass --predictions and/or --baselines".into()
        ));
    }
    let eval = evaluate_methods(
        &recs,
        &methods,
        &EvaluationInputs {
            predictions: predictions.as_deref(),
            baselines: baselines.as_deref(),
        },
    )?;
    let dataset = args
        .records
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let table = report_table(&eval.reports);
    let json_path = sibling(&args.report, ".jsonl");
    let roc_path = sibling(&args.report, ".roc.csv");
    fs::write(&args.report, &table)?;
    fs::write(&json_path, report_json_lines(&dataset, &eval.reports))?;
    fs::write(&roc_path, roc_points_table(&eval.roc))?;
    print!("{table}");

    let mut inputs: Vec<&Path> = vec![&args.records];
    inputs.extend(args.predictions.as_deref());
    inputs.extend(args.baselines.as_deref());
    meta::write(
        "evaluate",
        args,
        &inputs,
        &[&args.report, &json_path, &roc_path],
    )
}

pub fn synth(args: &SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        records: args.count,
        samples: args.samples,
        dim: args.dim,
        positive_fraction: args.positive_fraction,
        concentration: args.concentration,
        spread: args.spread,
        seed: args.seed,
    };
    let data = generate(&spec)?;
    write_records(&args.records, &data.records)?;
    save_cache(&data.embeddings, &args.embeddings)?;
    meta::write("synth", args, &[], &[&args.records, &args.embeddings])
}

#[derive(Deserialize)]
struct ReportLine {
    dataset: String,
    #[serde(flatten)]
    report: EvalReport,
}

pub fn report(args: &ReportArgs) -> Result<()> {
    let json_path = sibling(&args.report, ".jsonl");
    let lines: Vec<ReportLine> = read_json_lines(&json_path)
        .with_context(|| format!("reading {}", json_path.display()))?;
    let mut out = String::new();
    for line in &lines {
        let r = &line.report;
        let _ = writeln!(out, "{} / {}", line.dataset, r.method);
        let _ = writeln!(
            out,
            "  auroc {:.6}  auarc {:.6}  ece {:.6}  n {}",
            r.auroc, r.auarc, r.ece, r.n
        );
        if let (Some(f), Some(n)) = (r.auroc_filtered, r.n_filtered) {
            let _ = writeln!(out, "  auroc without unsafe predictions {f:.6} over {n}");
        }
        if let Some(w) = &r.filter_warning {
            let _ = writeln!(out, "  warning: {w}");
        }
        let _ = writeln!(out, "  bin           conf     acc    count");
        for b in &r.reliability_bins {
            let _ = writeln!(
                out,
                "  [{:.1}, {:.1}]  {:>7.4} {:>7.4} {:>7}",
                b.lower, b.upper, b.mean_confidence, b.accuracy, b.count
            );
        }
    }
    print!("{out}");
    Ok(())
}
