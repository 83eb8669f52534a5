//! Implementations of the `fsied` subcommands.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use fsied::corpus::{
    build_manifest, manifest_warnings, materialize_splits, rank_classes, read_corpus, read_manifest, read_splits,
    write_jsonl, write_manifest, write_splits, DatasetManifest, Splits,
};
use fsied::encoders::{BackendKind, TextBackend};
use fsied::evaluation::{
    default_thresholds, ood_sweep, render_matrices, render_ood, render_summaries, round_matrix, summarize,
    AggregateCurve, F1Matrix, ForgettingFormula, SessionResult, Summary,
};
use fsied::knowledge::{ingest_frames, parse_curated_map, resolve_all, Frame, FrameStore, Provenance};
use fsied::protocol::{run_session, Ablation, Checkpoint, Session, Trainer, Variant};
use fsied::synthetic::{generate, SyntheticSpec};

use crate::config::ExperimentConfig;
use crate::failure::{Context, Failure, Outcome};
use crate::plot::curves_svg;

pub const CONFIG_FILE: &str = "config.txt";
pub const SESSION_FILE: &str = "session.json";
pub const CHECKSUM_FILE: &str = "session.sha256";

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Outcome<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Failure::data(format!("cannot create {}: {e}", dir.display())))?;
    }
    fs::write(path, contents).map_err(|e| Failure::data(format!("cannot write {}: {e}", path.display())))
}

fn to_json<T: Serialize>(value: &T) -> Outcome<String> {
    serde_json::to_string_pretty(value)
        .map(|s| s + "\n")
        .map_err(|e| Failure::internal(e.to_string()))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes the fully resolved config next to a command's outputs.
fn write_config(dir: &Path, config: &ExperimentConfig) -> Outcome<()> {
    write(&dir.join(CONFIG_FILE), config.materialize())
}

pub fn generate_synthetic(out: &Path, classes: usize, per_class: usize, seed: u64) -> Outcome<String> {
    let spec = if classes == 0 {
        SyntheticSpec::seventy_classes(seed)
    } else {
        SyntheticSpec::small(classes, per_class, seed)
    };
    let corpus = generate(&spec);
    fs::create_dir_all(out).map_err(|e| Failure::data(format!("cannot create {}: {e}", out.display())))?;
    write_jsonl(&out.join("corpus.jsonl"), &corpus.mentions).with("writing corpus")?;
    write_jsonl(&out.join("frames.jsonl"), &corpus.frames).with("writing frames")?;
    let curated: String = corpus.curated.iter().map(|(l, f)| format!("{l}\t{f}\n")).collect();
    write(&out.join("curated_map.tsv"), curated)?;
    Ok(format!(
        "{} mentions, {} classes, {} frames written to {}\n",
        corpus.mentions.len(),
        spec.counts.len(),
        corpus.frames.len(),
        out.display()
    ))
}

fn build(config: &ExperimentConfig) -> Outcome<(DatasetManifest, Splits)> {
    let path = config.require("corpus.path", &config.corpus_path)?;
    let mentions = read_corpus(&path).with(format!("reading {}", path.display()))?;
    let ranked = rank_classes(&mentions);
    let manifest = build_manifest(&ranked, &config.layout, config.seed)?;
    let splits = materialize_splits(&mentions, &manifest)?;
    Ok((manifest, splits))
}

pub fn build_dataset(config: &ExperimentConfig) -> Outcome<String> {
    let (manifest, splits) = build(config)?;
    for w in manifest_warnings(&manifest) {
        eprintln!("warning: {w:?}");
    }
    let dir = &config.dataset_dir;
    write_manifest(&dir.join("manifest.json"), &manifest).with("writing manifest")?;
    write_splits(&dir.join("splits"), &splits).with("writing splits")?;
    let table = manifest.statistics_table();
    write(&dir.join("statistics.txt"), &table)?;
    write_config(dir, config)?;
    Ok(table)
}

fn load_dataset(config: &ExperimentConfig) -> Outcome<(DatasetManifest, Splits)> {
    let dir = &config.dataset_dir;
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Err(Failure::config(format!(
            "no manifest at {}; run build-dataset first",
            manifest_path.display()
        )));
    }
    let manifest = read_manifest(&manifest_path).with("reading manifest")?;
    let splits = read_splits(&dir.join("splits"), &manifest).with("reading splits")?;
    Ok((manifest, splits))
}

fn frame_store(config: &ExperimentConfig) -> Outcome<(FrameStore, BTreeMap<String, String>)> {
    let store = match &config.frames_path {
        Some(_) => {
            let path = config.require("frames.path", &config.frames_path)?;
            ingest_frames(&path).with(format!("reading {}", path.display()))?
        }
        None => FrameStore::default(),
    };
    let curated = match &config.curated_map {
        Some(_) => {
            let path = config.require("frames.curated_map", &config.curated_map)?;
            let text = fs::read_to_string(&path).map_err(|e| Failure::data(e.to_string()))?;
            parse_curated_map(&text).with(format!("reading {}", path.display()))?
        }
        None => BTreeMap::new(),
    };
    Ok((store, curated))
}

/// Frame of every class in the manifest.
fn class_frames(config: &ExperimentConfig, manifest: &DatasetManifest) -> Outcome<BTreeMap<String, Frame>> {
    let (store, curated) = frame_store(config)?;
    let labels: Vec<String> = manifest.rounds.iter().flat_map(|r| r.classes.iter().cloned()).collect();
    let mapping = resolve_all(&labels, &store, &curated);
    let fallbacks = mapping.values().filter(|(_, p)| *p == Provenance::Fallback).count();
    if fallbacks > 0 {
        eprintln!("note: {fallbacks} event types use a frame synthesized from their label");
    }
    Ok(mapping.into_iter().map(|(l, (f, _))| (l, f)).collect())
}

pub fn ingest(config: &ExperimentConfig) -> Outcome<String> {
    config.require("frames.path", &config.frames_path)?;
    let (store, curated) = frame_store(config)?;
    let out = config.output_dir.join("frames");
    let frames: Vec<&Frame> = store.iter().collect();
    write_jsonl(&out.join("frames.jsonl"), &frames).with("writing frames")?;
    let mut summary = format!("{} frames ingested\n", store.len());
    let manifest_path = config.dataset_dir.join("manifest.json");
    if manifest_path.exists() {
        let manifest = read_manifest(&manifest_path).with("reading manifest")?;
        let labels: Vec<String> = manifest.rounds.iter().flat_map(|r| r.classes.iter().cloned()).collect();
        let mapping = resolve_all(&labels, &store, &curated);
        let mut tsv = String::from("event_type\tframe_id\tprovenance\n");
        let mut counts = BTreeMap::new();
        for (label, (frame, provenance)) in &mapping {
            tsv.push_str(&format!("{label}\t{}\t{provenance:?}\n", frame.frame_id));
            *counts.entry(format!("{provenance:?}")).or_insert(0usize) += 1;
        }
        write(&out.join("mapping.tsv"), tsv)?;
        for (p, n) in counts {
            summary.push_str(&format!("{p}: {n} event types\n"));
        }
    }
    write_config(&out, config)?;
    Ok(summary)
}

fn backend(config: &ExperimentConfig) -> Outcome<TextBackend> {
    match config.backend {
        BackendKind::Toy => Ok(TextBackend::toy(config.seed, config.dims.d_ctx)),
        BackendKind::Pretrained => {
            let table = config.require("model.backend_table", &config.backend_table)?;
            Ok(TextBackend::pretrained(config.seed, &table).with("loading embedding table")?)
        }
    }
}

/// Trains one session, writing checkpoints, the session result, its
/// checksum and the resolved config under `out`.
pub fn train_session(
    config: &ExperimentConfig,
    manifest: &DatasetManifest,
    splits: &Splits,
    out: &Path,
    resume: Option<usize>,
) -> Outcome<Session> {
    let training = config.training()?;
    let frames = class_frames(config, manifest)?;
    let trainer = Trainer::new(&training, backend(config)?, &frames)?;
    let checkpoints = out.join("checkpoints");
    let start = match resume {
        Some(round) => {
            let path = checkpoints.join(format!("round_{round}.json"));
            if !path.exists() {
                return Err(Failure::config(format!("no checkpoint at {}", path.display())));
            }
            Some(Checkpoint::load(&path).with(format!("reading {}", path.display()))?)
        }
        None => None,
    };
    write_config(out, config)?;
    fs::create_dir_all(&checkpoints).map_err(|e| Failure::data(e.to_string()))?;
    let session = run_session(&trainer, splits, &manifest.config_name, start, |cp| {
        cp.save(&checkpoints.join(format!("round_{}.json", cp.completed_rounds)))
    })?;
    let json = to_json(&session.result)?;
    write(&out.join(SESSION_FILE), &json)?;
    write(&out.join(CHECKSUM_FILE), sha256_hex(json.as_bytes()) + "\n")?;
    write(&out.join("reports.json"), to_json(&session.reports)?)?;
    Ok(session)
}

pub fn train(config: &ExperimentConfig, ablate: &[String], resume: Option<usize>) -> Outcome<String> {
    let mut config = config.clone();
    apply_ablations(&mut config, ablate)?;
    let (manifest, splits) = load_dataset(&config)?;
    let session = train_session(&config, &manifest, &splits, &config.output_dir, resume)?;
    let report = write_session_reports(&session.result, &config.output_dir.join("report"), config.ood_steps, ForgettingFormula::default())?;
    Ok(format!(
        "trained {} for {} rounds; results in {}\n{report}",
        session.result.variant,
        session.result.rounds.len(),
        config.output_dir.display()
    ))
}

pub fn apply_ablations(config: &mut ExperimentConfig, ablate: &[String]) -> Outcome<()> {
    for a in ablate.iter().flat_map(|a| a.split(',')) {
        match a.trim() {
            "no-ek" => config.ablation.external_knowledge = false,
            "no-ml" => config.ablation.mixture_loss = false,
            "no-ps" => config.ablation.prototype_selection = false,
            "" => {}
            other => return Err(Failure::config(format!("unknown ablation `{other}` (no-ek, no-ml, no-ps)"))),
        }
    }
    Ok(())
}

/// Published-style reference matrices: `{"models": [{"name", "cells"}]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReferenceMatrices {
    pub models: Vec<NamedMatrix>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedMatrix {
    pub name: String,
    pub cells: Vec<Vec<f64>>,
}

fn summaries_for(matrices: &[(String, F1Matrix)], formula: ForgettingFormula) -> Outcome<Vec<Summary>> {
    matrices
        .iter()
        .map(|(name, m)| summarize(name, m, formula).map_err(Failure::from))
        .collect()
}

fn write_tables(out: &Path, matrices: &[(String, F1Matrix)], formula: ForgettingFormula) -> Outcome<String> {
    let summaries = summaries_for(matrices, formula)?;
    let map: BTreeMap<String, F1Matrix> = matrices.iter().cloned().collect();
    let matrix_text = render_matrices(&map);
    let summary_text = render_summaries(&summaries);
    write(&out.join("matrix.txt"), &matrix_text)?;
    write(&out.join("matrix.json"), to_json(&map)?)?;
    write(&out.join("summary.txt"), &summary_text)?;
    write(&out.join("summary.json"), to_json(&summaries)?)?;
    let series: Vec<(String, Vec<f64>)> = summaries.iter().map(|s| (s.model.clone(), s.curve.sequence())).collect();
    write(&out.join("curves.svg"), curves_svg("aged-class F1", &series))?;
    Ok(format!("{matrix_text}\n{summary_text}"))
}

fn write_session_reports(result: &SessionResult, out: &Path, ood_steps: usize, formula: ForgettingFormula) -> Outcome<String> {
    if result.rounds.is_empty() {
        return Err(Failure::data("session result has no rounds"));
    }
    let matrix = round_matrix(result);
    let mut text = write_tables(out, &[(result.variant.clone(), matrix)], formula)?;
    if result.rounds.last().is_some_and(|r| !r.ood_predictions.is_empty()) {
        let reports = ood_sweep(result, &default_thresholds(ood_steps.max(1)))?;
        let ood = render_ood(&reports);
        write(&out.join("ood.txt"), &ood)?;
        write(&out.join("ood.json"), to_json(&reports)?)?;
        text.push('\n');
        text.push_str(&ood);
    }
    Ok(text)
}

/// Accepts a session result or a reference-matrix file.
pub fn evaluate(input: &Path, out: &Path, literal: bool, ood_steps: usize) -> Outcome<String> {
    let formula = if literal { ForgettingFormula::Literal } else { ForgettingFormula::RelativeDrop };
    let text = fs::read_to_string(input)
        .map_err(|e| Failure::data(format!("cannot read {}: {e}", input.display())))?;
    if let Ok(result) = serde_json::from_str::<SessionResult>(&text) {
        return write_session_reports(&result, out, ood_steps, formula);
    }
    let reference: ReferenceMatrices = serde_json::from_str(&text)
        .map_err(|e| Failure::data(format!("{} is neither a session result nor a matrix file: {e}", input.display())))?;
    if reference.models.is_empty() {
        return Err(Failure::data(format!("{} contains no models", input.display())));
    }
    let matrices = reference
        .models
        .into_iter()
        .map(|m| Ok((m.name, F1Matrix::new(m.cells)?)))
        .collect::<Result<Vec<_>, fsied::Error>>()?;
    if matrices.iter().any(|(_, m)| m.rounds() == 0) {
        return Err(Failure::data("empty matrix"));
    }
    write_tables(out, &matrices, formula)
}

/// Mean curve over several sessions, element by element.
fn mean_curve(curves: &[AggregateCurve]) -> AggregateCurve {
    let n = curves.len().max(1) as f64;
    let len = curves.iter().map(|c| c.aged.len()).min().unwrap_or(0);
    AggregateCurve {
        new: curves.iter().map(|c| c.new).sum::<f64>() / n,
        aged: (0..len).map(|i| curves.iter().map(|c| c.aged[i]).sum::<f64>() / n).collect(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SettingResult {
    pub setting: String,
    pub seeds: Vec<u64>,
    pub curve: Option<AggregateCurve>,
    pub failures: Vec<String>,
}

fn run_settings(
    jobs: Vec<(String, ExperimentConfig, PathBuf)>,
    seeds: &[u64],
    build_data: bool,
) -> Vec<SettingResult> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut tasks = Vec::new();
    for (setting, config, dir) in &jobs {
        for &seed in seeds {
            let mut c = config.clone();
            c.seed = seed;
            tasks.push((setting.clone(), c, dir.join(format!("seed-{seed}"))));
        }
    }
    let mut outcomes: Vec<(String, u64, Outcome<AggregateCurve>)> = Vec::new();
    for chunk in tasks.chunks(workers) {
        std::thread::scope(|scope| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|(setting, c, dir)| {
                    scope.spawn(move || {
                        let run = || -> Outcome<AggregateCurve> {
                            let (manifest, splits) = if build_data { build(c)? } else { load_dataset(c)? };
                            let session = train_session(c, &manifest, &splits, dir, None)?;
                            Ok(fsied::evaluation::aggregate_pn(&round_matrix(&session.result)))
                        };
                        (setting.clone(), c.seed, run())
                    })
                })
                .collect();
            for h in handles {
                outcomes.push(h.join().unwrap_or_else(|_| (String::new(), 0, Err(Failure::internal("worker panicked")))));
            }
        });
    }
    jobs.iter()
        .map(|(setting, _, _)| {
            let mine: Vec<_> = outcomes.iter().filter(|(s, _, _)| s == setting).collect();
            let curves: Vec<AggregateCurve> = mine.iter().filter_map(|(_, _, r)| r.as_ref().ok().cloned()).collect();
            SettingResult {
                setting: setting.clone(),
                seeds: mine.iter().filter(|(_, _, r)| r.is_ok()).map(|(_, s, _)| *s).collect(),
                curve: (!curves.is_empty()).then(|| mean_curve(&curves)),
                failures: mine
                    .iter()
                    .filter_map(|(_, s, r)| r.as_ref().err().map(|e| format!("seed {s}: {e}")))
                    .collect(),
            }
        })
        .collect()
}

fn render_settings(axis: &str, results: &[SettingResult]) -> String {
    let aged = results.iter().filter_map(|r| r.curve.as_ref()).map(|c| c.aged.len()).max().unwrap_or(0);
    let width = results.iter().map(|r| r.setting.len()).max().unwrap_or(0).max(axis.len()).max(8);
    let mut out = format!("# mean aged-class curve (macro F1 %) per {axis} setting, averaged over seeds\n");
    out.push_str(&format!("{axis:<width$}{:>7}{:>9}", "seeds", "new"));
    for n in 1..=aged {
        out.push_str(&format!("{:>9}", format!("p-{n}")));
    }
    out.push('\n');
    for r in results {
        out.push_str(&format!("{:<width$}{:>7}", r.setting, r.seeds.len()));
        match &r.curve {
            Some(c) => {
                for v in c.sequence() {
                    out.push_str(&format!("{v:>9.2}"));
                }
            }
            None => out.push_str(&format!("{:>9}", "failed")),
        }
        out.push('\n');
    }
    out
}

fn finish_settings(axis: &str, out: &Path, results: &[SettingResult]) -> Outcome<String> {
    let table = render_settings(axis, results);
    write(&out.join(format!("{axis}.txt")), &table)?;
    write(&out.join(format!("{axis}.json")), to_json(&results)?)?;
    let series: Vec<(String, Vec<f64>)> = results
        .iter()
        .filter_map(|r| r.curve.as_ref().map(|c| (r.setting.clone(), c.sequence())))
        .collect();
    write(&out.join(format!("{axis}.svg")), curves_svg(axis, &series))?;
    let failures: Vec<String> = results
        .iter()
        .flat_map(|r| r.failures.iter().map(move |f| format!("{}: {f}", r.setting)))
        .collect();
    if !failures.is_empty() {
        write(&out.join("failures.txt"), failures.join("\n") + "\n")?;
        eprintln!("{} run(s) failed; see {}", failures.len(), out.join("failures.txt").display());
    }
    if results.iter().all(|r| r.curve.is_none()) {
        return Err(Failure::internal(format!("every {axis} run failed: {}", failures.join("; "))));
    }
    Ok(table)
}

fn seeds_of(config: &ExperimentConfig) -> Vec<u64> {
    if config.sweep_seeds.is_empty() {
        vec![config.seed]
    } else {
        config.sweep_seeds.clone()
    }
}

/// One session per axis value and seed. `shot` and `way` rebuild the
/// dataset from the corpus; `retained` reuses the built dataset.
pub fn sweep(config: &ExperimentConfig, axis: Option<&str>, values: &[usize]) -> Outcome<String> {
    let axis = axis
        .map(str::to_string)
        .or_else(|| config.sweep_axis.clone())
        .ok_or_else(|| Failure::config("no sweep axis given (shot, way or retained)"))?;
    let values = if values.is_empty() { config.sweep_values.clone() } else { values.to_vec() };
    if values.is_empty() {
        return Err(Failure::config("no sweep values given"));
    }
    let out = config.output_dir.join("sweep");
    let rebuild = match axis.as_str() {
        "shot" | "way" => {
            config.require("corpus.path", &config.corpus_path)?;
            true
        }
        "retained" => false,
        other => return Err(Failure::config(format!("unknown sweep axis `{other}`"))),
    };
    let jobs = values
        .iter()
        .map(|&v| {
            let mut c = config.clone();
            match axis.as_str() {
                "shot" => c.layout.shot = v,
                "way" => c.layout.way = v,
                _ => c.exemplars_per_class = v,
            }
            let setting = format!("{axis}={v}");
            let dir = out.join(format!("{axis}-{v}"));
            (setting, c, dir)
        })
        .collect();
    let results = run_settings(jobs, &seeds_of(config), rebuild);
    write_config(&out, config)?;
    finish_settings(&axis, &out, &results)
}

/// Ablation rows for a model: the full model, then each component removed.
pub fn ablation_rows(variant: Variant) -> Vec<(String, Ablation)> {
    let mut rows = vec![("full".to_string(), Ablation::ALL)];
    if variant == Variant::IfsedK {
        rows.push(("w/o EK".into(), Ablation { external_knowledge: false, ..Ablation::ALL }));
    }
    rows.push(("w/o ML".into(), Ablation { mixture_loss: false, ..Ablation::ALL }));
    rows.push(("w/o PS".into(), Ablation { prototype_selection: false, ..Ablation::ALL }));
    rows
}

pub fn ablate(config: &ExperimentConfig, model: Option<&str>) -> Outcome<String> {
    let variant = match model {
        Some(m) => Variant::parse(m).map_err(Failure::from)?,
        None => config.variant,
    };
    if variant == Variant::Finetune {
        return Err(Failure::config("finetune has no components to ablate"));
    }
    let out = config.output_dir.join("ablate").join(variant.name());
    let jobs = ablation_rows(variant)
        .into_iter()
        .map(|(name, flags)| {
            let mut c = config.clone();
            c.variant = variant;
            c.ablation = flags;
            let dir = out.join(name.replace("w/o ", "no-").to_lowercase());
            (name, c, dir)
        })
        .collect();
    let results = run_settings(jobs, &seeds_of(config), false);
    write_config(&out, config)?;
    finish_settings("ablation", &out, &results)
}

/// Combined matrices and summaries over finished run directories.
pub fn report(runs: &[PathBuf], out: &Path, literal: bool) -> Outcome<String> {
    if runs.is_empty() {
        return Err(Failure::config("no run directories given"));
    }
    let formula = if literal { ForgettingFormula::Literal } else { ForgettingFormula::RelativeDrop };
    let mut matrices = Vec::new();
    for dir in runs {
        let path = if dir.is_dir() { dir.join(SESSION_FILE) } else { dir.clone() };
        let text = fs::read_to_string(&path)
            .map_err(|e| Failure::data(format!("cannot read {}: {e}", path.display())))?;
        let result: SessionResult = serde_json::from_str(&text)
            .map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
        if result.rounds.is_empty() {
            return Err(Failure::data(format!("{} has no rounds", path.display())));
        }
        let name = format!("{} (seed {}, {})", result.variant, result.seed, dir.display());
        matrices.push((name, round_matrix(&result)));
    }
    write_tables(out, &matrices, formula)
}
