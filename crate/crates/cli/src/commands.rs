//! Subcommand implementations. Every command writes CSV outputs plus a
//! section of `manifest.txt` into the output directory.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use ndarray::Array2;
use osda::checkpoint::{Checkpoint, TrainingMeta};
use osda::data::{generate_synthetic, load_csv, write_csv, LabeledData};
use osda::experiment::{prepare, ExperimentConfig, Prepared, StageSeeds};
use osda::metrics::{evaluate, sweep_summary, write_confusion_csv, write_report_csv, write_report_text, write_sweep_csv, EvalReport, SweepRun};
use osda::pseudolabel::{pseudo_label_report, write_assignments_csv, write_histogram_csv, write_reliability_csv, write_reliability_summary, PseudoLabelSets};
use osda::trainer::{adapt, predict_open_set, train_source, AdaptConfig, OpenSetLabel, StepRecord, Variant};
use osda::verification::{ablation_ordering, adaptation_quality, beta_sensitivity, desk_run, oracle_suite, CriterionOutcome};
use osda::Scalar;
use rayon::prelude::*;

use crate::config::{Precision, RunConfig};
use crate::error::CliError;

pub const SOURCE_CSV: &str = "source.csv";
pub const TARGET_CSV: &str = "target.csv";
pub const HIDDEN_CSV: &str = "hidden_labels.csv";
pub const SOURCE_CKPT: &str = "source.ckpt";
pub const SOURCE_LOG: &str = "source_log.csv";
pub const ADAPTED_CKPT: &str = "adapted.ckpt";
pub const ADAPT_LOG: &str = "adapt_log.csv";
pub const PSEUDO_CSV: &str = "pseudo_labels.csv";
pub const PREDICTIONS_CSV: &str = "predictions.csv";
pub const MANIFEST: &str = "manifest.txt";

type CliResult<T> = Result<T, CliError>;

fn out_path(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.output.join(name)
}

fn ensure_out(cfg: &RunConfig) -> CliResult<()> {
    fs::create_dir_all(&cfg.output).map_err(|e| CliError::io(cfg.output.display(), e))
}

/// Replaces this command's section of the manifest, keeping the others.
fn write_manifest(cfg: &RunConfig, command: &str, outputs: &[&str], notes: &[String]) -> CliResult<()> {
    let path = out_path(cfg, MANIFEST);
    let mut sections: BTreeMap<String, String> = BTreeMap::new();
    if let Ok(text) = fs::read_to_string(&path) {
        let mut current: Option<String> = None;
        for line in text.lines() {
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                current = Some(name.to_string());
                sections.entry(name.to_string()).or_default();
            } else if let Some(name) = &current {
                if !line.is_empty() {
                    let s = sections.get_mut(name).expect("inserted above");
                    s.push_str(line);
                    s.push('\n');
                }
            }
        }
    }
    let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let mut body = format!(
        "version = {}\nseed = {}\nconfig_sha256 = {}\ntimestamp = {timestamp}\noutputs = {}\n",
        env!("CARGO_PKG_VERSION"),
        cfg.seed,
        cfg.hash(),
        outputs.join(" ")
    );
    for n in notes {
        body.push_str(&format!("note = {n}\n"));
    }
    sections.insert(command.to_string(), body);
    let mut text = String::new();
    for (name, body) in sections {
        text.push_str(&format!("[{name}]\n{body}\n"));
    }
    fs::write(&path, text).map_err(|e| CliError::io(path.display(), e))
}

fn cast<T: Scalar>(x: &Array2<f64>) -> Array2<T> {
    x.mapv(T::of)
}

fn csv_paths(cfg: &RunConfig) -> (Option<PathBuf>, Option<PathBuf>, Option<PathBuf>) {
    match &cfg.data.csv {
        Some(c) => (c.source.clone(), c.target.clone(), c.hidden_labels.clone()),
        None => (None, None, None),
    }
}

fn label_column(cfg: &RunConfig) -> &str {
    cfg.data.csv.as_ref().map_or("label", |c| c.label_column.as_str())
}

fn require(path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Data(format!("missing artifact {}", path.display())))
    }
}

/// Reads an `index,<column>` CSV into a vector ordered by index.
fn read_indexed(path: &Path, column: &str) -> CliResult<Vec<String>> {
    require(path)?;
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = r.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Data(format!("{}: missing column {name:?}", path.display())))
    };
    let (ic, vc) = (find("index")?, find(column)?);
    let mut map = BTreeMap::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        let idx: usize = rec[ic]
            .parse()
            .map_err(|_| CliError::Data(format!("{}: row {}: bad index {:?}", path.display(), row + 1, &rec[ic])))?;
        if map.insert(idx, rec[vc].to_string()).is_some() {
            return Err(CliError::Data(format!("{}: duplicate index {idx}", path.display())));
        }
    }
    if let Some((&last, _)) = map.iter().next_back() {
        if last + 1 != map.len() {
            return Err(CliError::Data(format!("{}: indices are not 0..{}", path.display(), map.len())));
        }
    }
    Ok(map.into_values().collect())
}

fn read_hidden(path: &Path) -> CliResult<Vec<usize>> {
    read_indexed(path, "label")?
        .iter()
        .enumerate()
        .map(|(i, v)| v.parse().map_err(|_| CliError::Data(format!("{}: index {i}: bad label {v:?}", path.display()))))
        .collect()
}

fn parse_prediction(v: &str, num_known: usize) -> Option<OpenSetLabel> {
    if v == "unknown" {
        return Some(OpenSetLabel::Unknown);
    }
    v.parse().ok().filter(|&c| c < num_known).map(OpenSetLabel::Known)
}

fn prediction_label(p: OpenSetLabel) -> String {
    match p {
        OpenSetLabel::Known(c) => c.to_string(),
        OpenSetLabel::Unknown => "unknown".into(),
    }
}

fn write_hidden(path: &Path, labels: &[usize]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["index", "label"])?;
    for (i, l) in labels.iter().enumerate() {
        w.write_record([i.to_string(), l.to_string()])?;
    }
    w.flush().map_err(|e| CliError::io(path.display(), e))
}

/// Source CSV, target CSV (features only) and the evaluation-only hidden labels.
pub fn cmd_generate(cfg: &RunConfig) -> CliResult<()> {
    ensure_out(cfg)?;
    let seeds = StageSeeds::derive(cfg.seed);
    let data = generate_synthetic::<f64>(&cfg.synth(), seeds.data)?;
    write_csv(out_path(cfg, SOURCE_CSV), &data.source.features, Some(("label", &data.source.labels)))?;
    write_csv(out_path(cfg, TARGET_CSV), &data.target_features, None)?;
    write_hidden(&out_path(cfg, HIDDEN_CSV), data.target_labels_hidden.as_slice())?;
    log::info!(
        "generated {} source and {} target rows",
        data.source.len(),
        data.target_features.nrows()
    );
    write_manifest(
        cfg,
        "generate",
        &[SOURCE_CSV, TARGET_CSV, HIDDEN_CSV],
        &[format!("{HIDDEN_CSV} is evaluation-only")],
    )
}

pub fn cmd_train_source(cfg: &RunConfig, source: Option<PathBuf>) -> CliResult<()> {
    match cfg.model.precision {
        Precision::F32 => train_source_as::<f32>(cfg, source),
        Precision::F64 => train_source_as::<f64>(cfg, source),
    }
}

fn train_source_as<T: Scalar>(cfg: &RunConfig, source: Option<PathBuf>) -> CliResult<()> {
    let path = source
        .or(csv_paths(cfg).0)
        .unwrap_or_else(|| out_path(cfg, SOURCE_CSV));
    require(&path)?;
    let table = load_csv(&path, label_column(cfg), true)?;
    let labels = table.labels.expect("labels requested");
    let nk = cfg.data.num_known;
    if let Some(bad) = labels.iter().find(|&&l| l >= nk) {
        return Err(CliError::Data(format!(
            "{}: label {bad} outside 0..{nk} (data.num_known)",
            path.display()
        )));
    }
    let data = LabeledData {
        features: cast::<T>(&table.features),
        labels,
    };
    ensure_out(cfg)?;
    let seed = StageSeeds::derive(cfg.seed).source;
    let train_cfg = osda::trainer::SourceTrainConfig {
        seed,
        ..cfg.source_train()
    };
    let trained = train_source(&data, nk, &train_cfg)?;
    log::info!("source training accuracy {:.4}", trained.final_accuracy());
    Checkpoint::new(
        trained.model,
        TrainingMeta {
            seed,
            steps: trained.steps,
        },
    )
    .save(out_path(cfg, SOURCE_CKPT))?;
    let log_path = out_path(cfg, SOURCE_LOG);
    let mut w = csv::Writer::from_path(&log_path)?;
    w.write_record(["epoch", "loss", "accuracy"])?;
    for r in &trained.log {
        w.write_record([r.epoch.to_string(), r.loss.to_string(), r.accuracy.to_string()])?;
    }
    w.flush().map_err(|e| CliError::io(log_path.display(), e))?;
    write_manifest(cfg, "train-source", &[SOURCE_CKPT, SOURCE_LOG], &[])
}

/// Adapts a source checkpoint to target features. There is deliberately no
/// way to pass source data or hidden labels to this command.
pub fn cmd_adapt(cfg: &RunConfig, checkpoint: Option<PathBuf>, target: Option<PathBuf>) -> CliResult<()> {
    match cfg.model.precision {
        Precision::F32 => adapt_as::<f32>(cfg, checkpoint, target),
        Precision::F64 => adapt_as::<f64>(cfg, checkpoint, target),
    }
}

fn write_adapt_log(path: &Path, log: &[StepRecord]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "L_P", "L_C", "total", "learning_rate"])?;
    let opt = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
    for r in log {
        w.write_record([
            r.step.to_string(),
            opt(r.pseudo_loss),
            opt(r.consistency_loss),
            r.total.to_string(),
            r.learning_rate.to_string(),
        ])?;
    }
    w.flush().map_err(|e| CliError::io(path.display(), e))
}

fn write_predictions(path: &Path, preds: &[OpenSetLabel]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["index", "prediction"])?;
    for (i, p) in preds.iter().enumerate() {
        w.write_record([i.to_string(), prediction_label(*p)])?;
    }
    w.flush().map_err(|e| CliError::io(path.display(), e))
}

fn adapt_as<T: Scalar>(cfg: &RunConfig, checkpoint: Option<PathBuf>, target: Option<PathBuf>) -> CliResult<()> {
    let ckpt_path = checkpoint.unwrap_or_else(|| out_path(cfg, SOURCE_CKPT));
    let target_path = target
        .or(csv_paths(cfg).1)
        .unwrap_or_else(|| out_path(cfg, TARGET_CSV));
    require(&ckpt_path)?;
    require(&target_path)?;
    let source = Checkpoint::<T>::load(&ckpt_path)?;
    if source.model.num_extra() != 0 {
        return Err(CliError::Data(format!("{} is already adapted", ckpt_path.display())));
    }
    let table = load_csv(&target_path, label_column(cfg), false)?;
    if table.features.ncols() != source.model.input_dim() {
        return Err(CliError::Data(format!(
            "checkpoint expects {} features, {} has {}",
            source.model.input_dim(),
            target_path.display(),
            table.features.ncols()
        )));
    }
    let target_x = cast::<T>(&table.features);
    let seed = StageSeeds::derive(cfg.seed).adapt;
    let adapt_cfg = AdaptConfig {
        seed,
        ..cfg.adapt_config()?
    };
    let out = adapt(&source.model, &target_x, &adapt_cfg)?;
    ensure_out(cfg)?;
    let preds = predict_open_set(&out.model, &target_x)?;
    Checkpoint::new(
        out.model,
        TrainingMeta {
            seed,
            steps: adapt_cfg.steps as u64,
        },
    )
    .save(out_path(cfg, ADAPTED_CKPT))?;
    write_adapt_log(&out_path(cfg, ADAPT_LOG), &out.log)?;
    write_assignments_csv(out_path(cfg, PSEUDO_CSV), &out.pseudo_labels)?;
    write_predictions(&out_path(cfg, PREDICTIONS_CSV), &preds)?;
    log::info!(
        "pseudo-labels: {} known, {} unknown, {} discarded",
        out.pseudo_labels.known.len(),
        out.pseudo_labels.unknown.len(),
        out.pseudo_labels.discarded.len()
    );
    write_manifest(cfg, "adapt", &[ADAPTED_CKPT, ADAPT_LOG, PSEUDO_CSV, PREDICTIONS_CSV], &[])
}

/// Rebuilds pseudo-label sets from an assignments CSV.
fn read_pseudo_labels(path: &Path, cfg: &RunConfig) -> CliResult<PseudoLabelSets> {
    let nk = cfg.data.num_known;
    let t = cfg.adapt_config()?.thresholds_for(nk)?;
    let assignments = read_indexed(path, "assignment")?;
    let entropies = read_indexed(path, "entropy")?;
    let mut sets = PseudoLabelSets {
        known: Vec::new(),
        unknown: Vec::new(),
        discarded: Vec::new(),
        delta_k: t.delta_k,
        delta_u: t.delta_u,
        num_known: nk,
        entropies: Vec::with_capacity(entropies.len()),
    };
    for (i, (a, h)) in assignments.iter().zip(&entropies).enumerate() {
        let h: f64 = h
            .parse()
            .map_err(|_| CliError::Data(format!("{}: index {i}: bad entropy {h:?}", path.display())))?;
        sets.entropies.push(h);
        match a.as_str() {
            "unknown" => sets.unknown.push(i),
            "discarded" => sets.discarded.push(i),
            other => match other.parse::<usize>() {
                Ok(c) if c < nk => sets.known.push((i, c)),
                _ => return Err(CliError::Data(format!("{}: index {i}: bad assignment {other:?}", path.display()))),
            },
        }
    }
    Ok(sets)
}

/// Scores a prediction file against hidden labels. Rows are matched by index,
/// so file order is irrelevant.
pub fn cmd_eval(
    cfg: &RunConfig,
    predictions: Option<PathBuf>,
    hidden: Option<PathBuf>,
    pseudo_labels: Option<PathBuf>,
) -> CliResult<EvalReport> {
    let pred_path = predictions.unwrap_or_else(|| out_path(cfg, PREDICTIONS_CSV));
    let hidden_path = hidden
        .or(csv_paths(cfg).2)
        .unwrap_or_else(|| out_path(cfg, HIDDEN_CSV));
    let nk = cfg.data.num_known;
    let preds = read_indexed(&pred_path, "prediction")?
        .iter()
        .enumerate()
        .map(|(i, v)| {
            parse_prediction(v, nk)
                .ok_or_else(|| CliError::Data(format!("{}: index {i}: bad prediction {v:?}", pred_path.display())))
        })
        .collect::<CliResult<Vec<_>>>()?;
    let labels = read_hidden(&hidden_path)?;
    let report = evaluate(&preds, &labels, nk)?;
    ensure_out(cfg)?;
    write_report_csv(out_path(cfg, "report.csv"), &report)?;
    write_confusion_csv(out_path(cfg, "confusion.csv"), &report)?;
    let mut outputs = vec!["report.csv", "confusion.csv"];

    let pseudo_path = pseudo_labels.unwrap_or_else(|| out_path(cfg, PSEUDO_CSV));
    if pseudo_path.is_file() {
        let sets = read_pseudo_labels(&pseudo_path, cfg)?;
        let rel = pseudo_label_report(&sets, &labels, cfg.eval.histogram_bins)?;
        write_reliability_csv(out_path(cfg, "reliability.csv"), &rel)?;
        write_reliability_summary(out_path(cfg, "reliability_summary.csv"), &rel)?;
        write_histogram_csv(out_path(cfg, "entropy_histogram.csv"), &rel.histogram)?;
        outputs.extend(["reliability.csv", "reliability_summary.csv", "entropy_histogram.csv"]);
    }
    write_report_text(std::io::stdout().lock(), &report)?;
    write_manifest(cfg, "eval", &outputs, &[])?;
    Ok(report)
}

fn seeds(cfg: &RunConfig) -> Vec<u64> {
    (0..cfg.eval.repeats as u64).map(|i| cfg.seed.wrapping_add(i)).collect()
}

fn pool(cfg: &RunConfig) -> CliResult<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))
}

fn synthetic_only(cfg: &RunConfig, command: &str) -> CliResult<()> {
    if cfg.data.csv.is_some() {
        return Err(CliError::Config(format!("{command} needs synthetic data; remove data.csv")));
    }
    Ok(())
}

/// Converts a failed run into a missing report; numeric failures are logged.
fn run_or_skip(key: &str, seed: u64, r: osda::Result<EvalReport>) -> SweepRun {
    let report = match r {
        Ok(rep) => Some(rep),
        Err(e) => {
            log::warn!("{key} seed {seed}: {e}");
            None
        }
    };
    SweepRun {
        key: key.to_string(),
        seed,
        report,
    }
}

fn write_runs_csv(path: &Path, parameter: &str, runs: &[SweepRun]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([parameter, "seed", "os", "os_star", "acc", "status"])?;
    for r in runs {
        let mut rec = vec![r.key.clone(), r.seed.to_string()];
        match &r.report {
            Some(rep) => {
                rec.extend([rep.os, rep.os_star, rep.total_acc].iter().map(|v| format!("{v:.6}")));
                rec.push("ok".into());
            }
            None => rec.extend(["".into(), "".into(), "".into(), "failed".into()]),
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| CliError::io(path.display(), e))
}

fn prepare_all<T: Scalar>(exp: &ExperimentConfig, seeds: &[u64]) -> CliResult<Vec<Prepared<T>>> {
    seeds
        .par_iter()
        .map(|&s| prepare::<T>(exp, s).map_err(CliError::from))
        .collect()
}

/// Pseudo-label only, consistency only and full method over seed repeats.
pub fn cmd_ablate(cfg: &RunConfig) -> CliResult<()> {
    synthetic_only(cfg, "ablate")?;
    match cfg.model.precision {
        Precision::F32 => ablate_as::<f32>(cfg),
        Precision::F64 => ablate_as::<f64>(cfg),
    }
}

fn ablate_as<T: Scalar>(cfg: &RunConfig) -> CliResult<()> {
    let exp = cfg.experiment()?;
    let seeds = seeds(cfg);
    let pool = pool(cfg)?;
    let (prepared, runs) = pool.install(|| -> CliResult<_> {
        let prepared = prepare_all::<T>(&exp, &seeds)?;
        let tasks: Vec<(Variant, usize)> = Variant::ALL
            .iter()
            .flat_map(|&v| (0..prepared.len()).map(move |i| (v, i)))
            .collect();
        let runs: Vec<SweepRun> = tasks
            .par_iter()
            .map(|&(v, i)| run_or_skip(v.name(), seeds[i], prepared[i].run_variant(&exp.adapt, v)))
            .collect();
        Ok((prepared, runs))
    })?;
    let baseline: Vec<SweepRun> = prepared
        .iter()
        .zip(&seeds)
        .map(|(p, &s)| run_or_skip("source_only", s, p.baseline(&exp.adapt)))
        .collect();
    ensure_out(cfg)?;
    write_sweep_csv(out_path(cfg, "ablation.csv"), &sweep_summary("variant", &runs)?)?;
    let all: Vec<SweepRun> = baseline.into_iter().chain(runs).collect();
    write_runs_csv(&out_path(cfg, "ablation_runs.csv"), "variant", &all)?;
    write_manifest(cfg, "ablate", &["ablation.csv", "ablation_runs.csv"], &[])
}

/// One grid axis: the parameter name and its values as labels.
fn axes(cfg: &RunConfig) -> Vec<(&'static str, Vec<String>)> {
    let s = &cfg.sweep;
    let f = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    let u = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    [
        ("beta", f(&s.beta)),
        ("extra_outputs", u(&s.extra_outputs)),
        ("delta_k", f(&s.delta_k)),
        ("delta_u", f(&s.delta_u)),
        ("num_unknown", u(&s.num_unknown)),
    ]
    .into_iter()
    .filter(|(_, v)| !v.is_empty())
    .collect()
}

/// The adapt config with one swept value applied.
fn with_value(base: &AdaptConfig, num_known: usize, param: &str, value: &str) -> CliResult<AdaptConfig> {
    let mut c = base.clone();
    let num = |v: &str| v.parse::<f64>().map_err(|_| CliError::Config(format!("sweep.{param}: bad value {v}")));
    match param {
        "beta" => c.beta = num(value)?,
        "extra_outputs" => c.extra_outputs = num(value)? as usize,
        "delta_k" | "delta_u" => {
            let mut t = c.thresholds_for(num_known)?;
            if param == "delta_k" {
                t.delta_k = num(value)?;
            } else {
                t.delta_u = num(value)?;
            }
            t.validate(num_known)
                .map_err(|e| CliError::Config(format!("sweep.{param} = {value}: {e}")))?;
            c.thresholds = Some(t);
        }
        _ => {}
    }
    c.validate().map_err(|e| CliError::Config(format!("sweep.{param} = {value}: {e}")))?;
    Ok(c)
}

pub fn cmd_sweep(cfg: &RunConfig) -> CliResult<()> {
    synthetic_only(cfg, "sweep")?;
    if cfg.sweep.is_empty() {
        return Err(CliError::Config("sweep grid is empty".into()));
    }
    match cfg.model.precision {
        Precision::F32 => sweep_as::<f32>(cfg),
        Precision::F64 => sweep_as::<f64>(cfg),
    }
}

fn sweep_as<T: Scalar>(cfg: &RunConfig) -> CliResult<()> {
    let exp = cfg.experiment()?;
    let nk = cfg.data.num_known;
    let axes = axes(cfg);
    for (param, values) in &axes {
        for v in values {
            if *param == "num_unknown" {
                let n: usize = v.parse().expect("formatted from usize");
                let mut probe = cfg.clone();
                probe.data.num_unknown = n;
                probe.synth().validate().map_err(|e| CliError::Config(format!("sweep.num_unknown = {n}: {e}")))?;
            } else {
                with_value(&exp.adapt, nk, param, v)?;
            }
        }
    }
    let seeds = seeds(cfg);
    let pool = pool(cfg)?;
    ensure_out(cfg)?;
    let mut outputs = Vec::new();
    let started = Instant::now();
    let needs_shared = axes.iter().any(|(p, _)| *p != "num_unknown");
    let shared = if needs_shared {
        pool.install(|| prepare_all::<T>(&exp, &seeds))?
    } else {
        Vec::new()
    };
    for (param, values) in &axes {
        let tasks: Vec<(&String, usize)> = values
            .iter()
            .flat_map(|v| (0..seeds.len()).map(move |i| (v, i)))
            .collect();
        let runs: Vec<SweepRun> = pool.install(|| {
            tasks
                .par_iter()
                .map(|&(v, i)| {
                    let seed = seeds[i];
                    let result = if *param == "num_unknown" {
                        let data = osda::data::SynthConfig {
                            num_unknown: v.parse().expect("validated"),
                            ..exp.data.clone()
                        };
                        let e = ExperimentConfig {
                            data,
                            ..exp.clone()
                        };
                        prepare::<T>(&e, seed).and_then(|p| p.run(&exp.adapt).map(|r| r.0))
                    } else {
                        let c = with_value(&exp.adapt, nk, param, v).expect("validated");
                        shared[i].run(&c).map(|r| r.0)
                    };
                    run_or_skip(v, seed, result)
                })
                .collect()
        });
        let summary = format!("sweep_{param}.csv");
        let detail = format!("sweep_{param}_runs.csv");
        write_sweep_csv(out_path(cfg, &summary), &sweep_summary(param, &runs)?)?;
        write_runs_csv(&out_path(cfg, &detail), param, &runs)?;
        outputs.push(summary);
        outputs.push(detail);
    }
    log::info!("sweep finished in {:.1}s", started.elapsed().as_secs_f64());
    let names: Vec<&str> = outputs.iter().map(String::as_str).collect();
    write_manifest(cfg, "sweep", &names, &[])
}

fn write_criteria(path: &Path, outcomes: &[CriterionOutcome]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["criterion", "name", "passed", "detail"])?;
    for o in outcomes {
        w.write_record([o.id.to_string(), o.name.to_string(), o.passed.to_string(), o.detail.clone()])?;
    }
    w.flush().map_err(|e| CliError::io(path.display(), e))
}

/// Oracle checks, plus the training-based checks with `desk`.
pub fn cmd_verify(cfg: &RunConfig, desk: bool) -> CliResult<Vec<CriterionOutcome>> {
    let mut outcomes = oracle_suite();
    if desk {
        synthetic_only(cfg, "verify --desk")?;
        let exp = cfg.experiment()?;
        let started = Instant::now();
        let runs = pool(cfg)?.install(|| {
            seeds(cfg)
                .par_iter()
                .map(|&s| desk_run(&exp, s))
                .collect::<osda::Result<Vec<_>>>()
        })?;
        let secs = started.elapsed().as_secs_f64();
        outcomes.push(adaptation_quality(&runs, 0.85, 0.10, secs));
        outcomes.push(ablation_ordering(&runs, secs));
        outcomes.push(beta_sensitivity(&runs, secs));
        outcomes.sort_by_key(|o| o.id);
    }
    let mut stdout = std::io::stdout().lock();
    for o in &outcomes {
        let _ = writeln!(stdout, "{o}");
    }
    ensure_out(cfg)?;
    write_criteria(&out_path(cfg, "verify.csv"), &outcomes)?;
    write_manifest(cfg, "verify", &["verify.csv"], &[])?;
    let failed: Vec<u8> = outcomes.iter().filter(|o| !o.passed).map(|o| o.id).collect();
    if failed.is_empty() {
        Ok(outcomes)
    } else {
        Err(CliError::Numeric(format!("failed checks: {failed:?}")))
    }
}
