//! Flat `key = value` experiment configuration with dotted namespaces.
//!
//! Precedence, lowest first: built-in defaults, the config file, environment
//! variables (`FSIED_` followed by the key upper-cased with dots replaced by
//! underscores, e.g. `FSIED_LOSS_ALPHA`), then command-line overrides.
//! Loss weights and epochs default per variant when left unset.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use fsied::corpus::ManifestConfig;
use fsied::encoders::{BackendKind, Dims};
use fsied::objectives::LossWeights;
use fsied::protocol::{Ablation, TrainingConfig, Variant};

use crate::failure::{Failure, Outcome};

pub const ENV_PREFIX: &str = "FSIED_";

/// Every accepted key, in the order they are written out.
pub const KEYS: &[&str] = &[
    "corpus.path",
    "frames.path",
    "frames.curated_map",
    "dataset.dir",
    "dataset.way",
    "dataset.shot",
    "dataset.rounds",
    "dataset.base_classes",
    "dataset.base_train",
    "dataset.base_eval",
    "dataset.round_eval",
    "dataset.ood_classes",
    "dataset.ood_eval",
    "dataset.eligible_classes",
    "seed",
    "model.variant",
    "model.backend",
    "model.backend_table",
    "model.d_ctx",
    "model.d",
    "model.knowledge_mixture",
    "model.freeze_backend",
    "ablation.external_knowledge",
    "ablation.mixture_loss",
    "ablation.prototype_selection",
    "loss.alpha",
    "loss.beta",
    "loss.gamma",
    "loss.temperature",
    "train.epochs",
    "train.batch_size",
    "train.learning_rate",
    "train.include_base",
    "memory.exemplars_per_class",
    "adaptation.map_steps",
    "adaptation.step_size",
    "eval.ood_steps",
    "output.dir",
    "sweep.axis",
    "sweep.values",
    "sweep.seeds",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub corpus_path: Option<PathBuf>,
    pub frames_path: Option<PathBuf>,
    pub curated_map: Option<PathBuf>,
    pub dataset_dir: PathBuf,
    pub layout: ManifestConfig,
    pub seed: u64,
    pub variant: Variant,
    pub backend: BackendKind,
    pub backend_table: Option<PathBuf>,
    pub dims: Dims,
    pub knowledge_mixture: f64,
    pub freeze_backend: bool,
    pub ablation: Ablation,
    temperature: Option<f64>,
    alpha: Option<f64>,
    beta: Option<f64>,
    gamma: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub include_base: bool,
    pub exemplars_per_class: usize,
    pub map_steps: usize,
    pub map_step_size: f64,
    pub ood_steps: usize,
    pub output_dir: PathBuf,
    pub sweep_axis: Option<String>,
    pub sweep_values: Vec<usize>,
    pub sweep_seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let defaults = TrainingConfig::for_variant(Variant::IfsedK, Ablation::ALL);
        Self {
            corpus_path: None,
            frames_path: None,
            curated_map: None,
            dataset_dir: PathBuf::from("dataset"),
            layout: ManifestConfig::five_way_five_shot(),
            seed: 0,
            variant: Variant::IfsedK,
            backend: BackendKind::Toy,
            backend_table: None,
            dims: defaults.dims,
            knowledge_mixture: defaults.knowledge_mixture,
            freeze_backend: defaults.freeze_backend,
            ablation: Ablation::ALL,
            temperature: None,
            alpha: None,
            beta: None,
            gamma: None,
            epochs: None,
            batch_size: defaults.batch_size,
            learning_rate: defaults.learning_rate,
            include_base: defaults.include_base,
            exemplars_per_class: defaults.exemplars_per_class,
            map_steps: defaults.map_steps,
            map_step_size: defaults.map_step_size,
            ood_steps: 10,
            output_dir: PathBuf::from("runs"),
            sweep_axis: None,
            sweep_values: Vec::new(),
            sweep_seeds: Vec::new(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Outcome<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Failure::config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Outcome<bool> {
    match value.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Failure::config(format!("`{key}`: expected a boolean, got `{value}`"))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Outcome<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn opt_path(value: &str) -> Option<PathBuf> {
    let v = value.trim();
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Outcome<()> {
        let v = value.trim();
        match key {
            "corpus.path" => self.corpus_path = opt_path(v),
            "frames.path" => self.frames_path = opt_path(v),
            "frames.curated_map" => self.curated_map = opt_path(v),
            "dataset.dir" => self.dataset_dir = PathBuf::from(v),
            "dataset.way" => self.layout.way = parse(key, v)?,
            "dataset.shot" => self.layout.shot = parse(key, v)?,
            "dataset.rounds" => self.layout.n_rounds = parse(key, v)?,
            "dataset.base_classes" => self.layout.base_classes = parse(key, v)?,
            "dataset.base_train" => self.layout.base_train = parse(key, v)?,
            "dataset.base_eval" => self.layout.base_eval = parse(key, v)?,
            "dataset.round_eval" => self.layout.round_eval = parse(key, v)?,
            "dataset.ood_classes" => self.layout.ood_classes = parse(key, v)?,
            "dataset.ood_eval" => self.layout.ood_eval = parse(key, v)?,
            "dataset.eligible_classes" => self.layout.eligible_classes = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "model.variant" => self.set_variant(v)?,
            "model.backend" => {
                self.backend = match v {
                    "toy" => BackendKind::Toy,
                    "pretrained" => BackendKind::Pretrained,
                    _ => return Err(Failure::config(format!("`{key}`: expected toy or pretrained, got `{v}`"))),
                }
            }
            "model.backend_table" => self.backend_table = opt_path(v),
            "model.d_ctx" => self.dims.d_ctx = parse(key, v)?,
            "model.d" => self.dims.d = parse(key, v)?,
            "model.knowledge_mixture" => self.knowledge_mixture = parse(key, v)?,
            "model.freeze_backend" => self.freeze_backend = parse_bool(key, v)?,
            "ablation.external_knowledge" => self.ablation.external_knowledge = parse_bool(key, v)?,
            "ablation.mixture_loss" => self.ablation.mixture_loss = parse_bool(key, v)?,
            "ablation.prototype_selection" => self.ablation.prototype_selection = parse_bool(key, v)?,
            "loss.alpha" => self.alpha = Some(parse(key, v)?),
            "loss.beta" => self.beta = Some(parse(key, v)?),
            "loss.gamma" => self.gamma = Some(parse(key, v)?),
            "loss.temperature" => self.temperature = Some(parse(key, v)?),
            "train.epochs" => self.epochs = Some(parse(key, v)?),
            "train.batch_size" => self.batch_size = parse(key, v)?,
            "train.learning_rate" => self.learning_rate = parse(key, v)?,
            "train.include_base" => self.include_base = parse_bool(key, v)?,
            "memory.exemplars_per_class" => self.exemplars_per_class = parse(key, v)?,
            "adaptation.map_steps" => self.map_steps = parse(key, v)?,
            "adaptation.step_size" => self.map_step_size = parse(key, v)?,
            "eval.ood_steps" => self.ood_steps = parse(key, v)?,
            "output.dir" => self.output_dir = PathBuf::from(v),
            "sweep.axis" => self.sweep_axis = (!v.is_empty()).then(|| v.to_string()),
            "sweep.values" => self.sweep_values = parse_list(key, v)?,
            "sweep.seeds" => self.sweep_seeds = parse_list(key, v)?,
            _ => return Err(Failure::config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Accepts the three variants plus the baseline presets `kcn`
    /// (`ifsed-k` without external knowledge) and `ake` (`ifsed-kp` without
    /// mixture loss and prototype selection).
    fn set_variant(&mut self, v: &str) -> Outcome<()> {
        match v.to_ascii_lowercase().as_str() {
            "kcn" => {
                self.variant = Variant::IfsedK;
                self.ablation.external_knowledge = false;
            }
            "ake" => {
                self.variant = Variant::IfsedKp;
                self.ablation.mixture_loss = false;
                self.ablation.prototype_selection = false;
            }
            other => self.variant = Variant::parse(other).map_err(|e| Failure::config(e.to_string()))?,
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Outcome<()> {
        let mut seen = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Failure::config(format!("line {}: expected `key = value`", n + 1)))?;
            let key = key.trim();
            if seen.insert(key.to_string(), n + 1).is_some() {
                return Err(Failure::config(format!("line {}: duplicate key `{key}`", n + 1)));
            }
            self.set(key, value).map_err(|e| e.context(format!("line {}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_env(&mut self, vars: impl IntoIterator<Item = (String, String)>) -> Outcome<()> {
        let lookup: BTreeMap<String, &str> = KEYS.iter().map(|k| (env_name(k), *k)).collect();
        for (name, value) in vars {
            if let Some(rest) = name.strip_prefix(ENV_PREFIX) {
                let key = lookup
                    .get(&name)
                    .ok_or_else(|| Failure::config(format!("unknown environment override `{ENV_PREFIX}{rest}`")))?;
                self.set(key, &value)?;
            }
        }
        Ok(())
    }

    /// `key=value` overrides from the command line.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Outcome<()> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Failure::config(format!("override `{o}` is not `key=value`")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Defaults, then `path` (if any), then the process environment, then
    /// `overrides`. Relative paths in the file resolve against its directory,
    /// all others against the working directory, so the materialized config
    /// can be reused from anywhere.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Outcome<Self> {
        let mut config = Self::default();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::config(format!("cannot read config {}: {e}", path.display())))?;
            config.apply_text(&text)?;
            let dir = std::path::absolute(path)
                .map_err(|e| Failure::config(format!("cannot resolve {}: {e}", path.display())))?;
            config.rebase(dir.parent().unwrap_or(Path::new("/")));
        }
        config.apply_env(std::env::vars())?;
        config.apply_overrides(overrides)?;
        let cwd = std::env::current_dir().map_err(|e| Failure::config(format!("no working directory: {e}")))?;
        config.rebase(&cwd);
        Ok(config)
    }

    fn rebase(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        for p in [&mut self.corpus_path, &mut self.frames_path, &mut self.curated_map, &mut self.backend_table]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        fix(&mut self.dataset_dir);
        fix(&mut self.output_dir);
    }

    pub fn loss_weights(&self) -> LossWeights {
        let d = self.variant.default_weights();
        LossWeights {
            alpha: self.alpha.unwrap_or(d.alpha),
            beta: self.beta.unwrap_or(d.beta),
            gamma: self.gamma.unwrap_or(d.gamma),
            temperature: self.temperature.unwrap_or(d.temperature),
        }
    }

    pub fn training(&self) -> Outcome<TrainingConfig> {
        let mut t = TrainingConfig::for_variant(self.variant, self.ablation);
        t.epochs = self.epochs.unwrap_or(t.epochs);
        t.batch_size = self.batch_size;
        t.learning_rate = self.learning_rate;
        t.seed = self.seed;
        t.weights = self.loss_weights();
        t.exemplars_per_class = self.exemplars_per_class;
        t.knowledge_mixture = self.knowledge_mixture;
        t.include_base = self.include_base;
        t.map_steps = self.map_steps;
        t.map_step_size = self.map_step_size;
        t.dims = self.dims;
        t.freeze_backend = self.freeze_backend;
        t.validate().map_err(Failure::from)?;
        Ok(t)
    }

    /// Checks that the paths a command needs exist.
    pub fn require(&self, what: &str, path: &Option<PathBuf>) -> Outcome<PathBuf> {
        let p = path.clone().ok_or_else(|| Failure::config(format!("`{what}` is not set")))?;
        if !p.exists() {
            return Err(Failure::config(format!("`{what}` does not exist: {}", p.display())));
        }
        Ok(p)
    }

    /// Every key with its effective value, defaults included.
    pub fn materialize(&self) -> String {
        let t = TrainingConfig::for_variant(self.variant, self.ablation);
        let flags = t.variant.flags;
        let w = self.loss_weights();
        let l = &self.layout;
        let mut out = String::new();
        let values: Vec<(&str, String)> = vec![
            ("corpus.path", show_path(&self.corpus_path)),
            ("frames.path", show_path(&self.frames_path)),
            ("frames.curated_map", show_path(&self.curated_map)),
            ("dataset.dir", self.dataset_dir.display().to_string()),
            ("dataset.way", l.way.to_string()),
            ("dataset.shot", l.shot.to_string()),
            ("dataset.rounds", l.n_rounds.to_string()),
            ("dataset.base_classes", l.base_classes.to_string()),
            ("dataset.base_train", l.base_train.to_string()),
            ("dataset.base_eval", l.base_eval.to_string()),
            ("dataset.round_eval", l.round_eval.to_string()),
            ("dataset.ood_classes", l.ood_classes.to_string()),
            ("dataset.ood_eval", l.ood_eval.to_string()),
            ("dataset.eligible_classes", l.eligible_classes.to_string()),
            ("seed", self.seed.to_string()),
            ("model.variant", self.variant.name().to_string()),
            (
                "model.backend",
                match self.backend {
                    BackendKind::Toy => "toy",
                    BackendKind::Pretrained => "pretrained",
                }
                .to_string(),
            ),
            ("model.backend_table", show_path(&self.backend_table)),
            ("model.d_ctx", self.dims.d_ctx.to_string()),
            ("model.d", self.dims.d.to_string()),
            ("model.knowledge_mixture", self.knowledge_mixture.to_string()),
            ("model.freeze_backend", self.freeze_backend.to_string()),
            ("ablation.external_knowledge", flags.external_knowledge.to_string()),
            ("ablation.mixture_loss", flags.mixture_loss.to_string()),
            ("ablation.prototype_selection", flags.prototype_selection.to_string()),
            ("loss.alpha", w.alpha.to_string()),
            ("loss.beta", w.beta.to_string()),
            ("loss.gamma", w.gamma.to_string()),
            ("loss.temperature", w.temperature.to_string()),
            ("train.epochs", self.epochs.unwrap_or(t.epochs).to_string()),
            ("train.batch_size", self.batch_size.to_string()),
            ("train.learning_rate", self.learning_rate.to_string()),
            ("train.include_base", self.include_base.to_string()),
            ("memory.exemplars_per_class", self.exemplars_per_class.to_string()),
            ("adaptation.map_steps", self.map_steps.to_string()),
            ("adaptation.step_size", self.map_step_size.to_string()),
            ("eval.ood_steps", self.ood_steps.to_string()),
            ("output.dir", self.output_dir.display().to_string()),
            ("sweep.axis", self.sweep_axis.clone().unwrap_or_default()),
            ("sweep.values", join(&self.sweep_values)),
            ("sweep.seeds", join(&self.sweep_seeds)),
        ];
        debug_assert_eq!(values.len(), KEYS.len());
        for (k, v) in values {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

pub fn env_name(key: &str) -> String {
    format!("{ENV_PREFIX}{}", key.to_ascii_uppercase().replace('.', "_"))
}
