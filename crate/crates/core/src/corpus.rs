//! Mention corpus, deduplication, class ranking and the multi-round
//! benchmark layout (base classes, incremental rounds, out-of-distribution
//! test classes).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One labeled sentence with its trigger span (half-open, token units).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventMention {
    pub id: String,
    pub tokens: Vec<String>,
    pub trigger: (usize, usize),
    pub label: String,
}

impl EventMention {
    pub fn validate(&self) -> Result<()> {
        let (start, end) = self.trigger;
        if !(start < end && end <= self.tokens.len()) {
            return Err(Error::SpanOutOfRange {
                id: self.id.clone(),
                start,
                end,
                len: self.tokens.len(),
            });
        }
        if self.label.is_empty() {
            return Err(Error::Data(format!("mention `{}` has an empty label", self.id)));
        }
        Ok(())
    }

    pub fn trigger_tokens(&self) -> &[String] {
        &self.tokens[self.trigger.0..self.trigger.1]
    }

    /// Whitespace-normalized lowercase sentence, trigger span and label.
    pub fn dedupe_key(&self) -> (String, (usize, usize), String) {
        let sentence = self
            .tokens
            .iter()
            .flat_map(|t| t.split_whitespace())
            .map(str::to_lowercase)
            .collect::<Vec<_>>()
            .join(" ");
        (sentence, self.trigger, self.label.clone())
    }
}

/// Keeps the first occurrence of every duplicate key, in input order.
pub fn dedupe_corpus(mentions: Vec<EventMention>) -> Vec<EventMention> {
    let mut seen = HashSet::new();
    mentions
        .into_iter()
        .filter(|m| seen.insert(m.dedupe_key()))
        .collect()
}

/// Class sizes, largest first; ties broken by label.
pub fn rank_classes(mentions: &[EventMention]) -> Vec<(String, usize)> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for m in mentions {
        *counts.entry(m.label.as_str()).or_default() += 1;
    }
    let mut ranked: Vec<(String, usize)> = counts
        .into_iter()
        .map(|(label, n)| (label.to_string(), n))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundKind {
    Base,
    Incremental,
    Ood,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundSpec {
    pub round_id: usize,
    pub kind: RoundKind,
    pub classes: Vec<String>,
    pub shots_train: usize,
    pub per_class_dev: usize,
    pub per_class_test: usize,
}

impl RoundSpec {
    pub fn per_class_total(&self) -> usize {
        self.shots_train + self.per_class_dev + self.per_class_test
    }
}

/// Layout parameters for [`build_manifest`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestConfig {
    pub way: usize,
    pub shot: usize,
    pub n_rounds: usize,
    pub base_classes: usize,
    pub base_train: usize,
    pub base_eval: usize,
    pub round_eval: usize,
    pub ood_classes: usize,
    pub ood_eval: usize,
    /// Only the largest `eligible_classes` classes may enter the benchmark.
    pub eligible_classes: usize,
}

impl ManifestConfig {
    /// The 5-way-5-shot layout: 10 base classes, five rounds, seven OOD classes.
    pub fn five_way_five_shot() -> Self {
        Self {
            way: 5,
            shot: 5,
            n_rounds: 5,
            base_classes: 10,
            base_train: 100,
            base_eval: 50,
            round_eval: 10,
            ood_classes: 7,
            ood_eval: 15,
            eligible_classes: 67,
        }
    }

    pub fn ten_way_ten_shot() -> Self {
        Self {
            way: 10,
            shot: 10,
            ..Self::five_way_five_shot()
        }
    }

    pub fn config_name(&self) -> String {
        format!("{}-way-{}-shot", self.way, self.shot)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config_name: String,
    pub way: usize,
    pub shot: usize,
    pub rounds: Vec<RoundSpec>,
    /// Eligible classes that no round uses.
    pub unused_classes: Vec<String>,
    pub seed: u64,
}

impl DatasetManifest {
    pub fn base(&self) -> Option<&RoundSpec> {
        self.rounds.iter().find(|r| r.kind == RoundKind::Base)
    }

    pub fn incremental(&self) -> impl Iterator<Item = &RoundSpec> {
        self.rounds.iter().filter(|r| r.kind == RoundKind::Incremental)
    }

    pub fn ood(&self) -> Option<&RoundSpec> {
        self.rounds.iter().find(|r| r.kind == RoundKind::Ood)
    }

    /// Per-round `(classes, train, dev, test)` totals; `train` is `None`
    /// for the OOD round, which has no training split.
    pub fn statistics(&self) -> Vec<(String, usize, Option<usize>, usize, usize)> {
        self.rounds
            .iter()
            .map(|r| {
                let n = r.classes.len();
                let name = match r.kind {
                    RoundKind::Base => "c_b".to_string(),
                    RoundKind::Incremental => format!("c_{}", r.round_id),
                    RoundKind::Ood => "c_ood".to_string(),
                };
                let train = (r.kind != RoundKind::Ood).then_some(n * r.shots_train);
                (name, n, train, n * r.per_class_dev, n * r.per_class_test)
            })
            .collect()
    }

    /// Table-1-shaped text block.
    pub fn statistics_table(&self) -> String {
        let mut out = format!("{}\n", self.config_name);
        out.push_str(&format!(
            "{:<8}{:>8}{:>8}{:>8}{:>8}\n",
            "round", "#class", "#train", "#dev", "#test"
        ));
        for (name, n, train, dev, test) in self.statistics() {
            let train = train.map_or("-".to_string(), |t| t.to_string());
            out.push_str(&format!("{name:<8}{n:>8}{train:>8}{dev:>8}{test:>8}\n"));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ManifestWarning {
    /// The last incremental round has fewer than `way` classes.
    ShortFinalRound { round_id: usize, classes: usize, way: usize },
}

/// Structural checks that are not errors.
pub fn manifest_warnings(manifest: &DatasetManifest) -> Vec<ManifestWarning> {
    manifest
        .incremental()
        .filter(|r| r.classes.len() < manifest.way)
        .map(|r| ManifestWarning::ShortFinalRound {
            round_id: r.round_id,
            classes: r.classes.len(),
            way: manifest.way,
        })
        .collect()
}

/// Assigns ranked classes to rounds in rank order: base classes first, then
/// incremental rounds, then the OOD classes. OOD classes are reserved before
/// the incremental rounds are filled, so the final round may come up short.
pub fn build_manifest(
    ranked: &[(String, usize)],
    config: &ManifestConfig,
    seed: u64,
) -> Result<DatasetManifest> {
    let eligible = &ranked[..ranked.len().min(config.eligible_classes)];
    let fixed = config.base_classes + config.ood_classes;
    let wanted_incremental = config.way * config.n_rounds;
    let needed = fixed + if config.n_rounds > 0 { 1 } else { 0 };
    if eligible.len() < needed {
        return Err(Error::InsufficientClasses {
            needed: fixed + wanted_incremental,
            available: eligible.len(),
        });
    }
    let incremental_available = (eligible.len() - fixed).min(wanted_incremental);

    let mut rounds = Vec::new();
    let mut cursor = 0;
    let mut take = |n: usize, per_class: usize| -> Result<Vec<String>> {
        let slice = &eligible[cursor..cursor + n];
        cursor += n;
        for (label, count) in slice {
            if *count < per_class {
                return Err(Error::InsufficientSamplesPerClass {
                    label: label.clone(),
                    needed: per_class,
                    available: *count,
                });
            }
        }
        Ok(slice.iter().map(|(l, _)| l.clone()).collect())
    };

    if config.base_classes > 0 {
        let classes = take(config.base_classes, config.base_train + 2 * config.base_eval)?;
        rounds.push(RoundSpec {
            round_id: 0,
            kind: RoundKind::Base,
            classes,
            shots_train: config.base_train,
            per_class_dev: config.base_eval,
            per_class_test: config.base_eval,
        });
    }
    let mut remaining = incremental_available;
    let mut round_id = 1;
    while remaining > 0 && round_id <= config.n_rounds {
        let n = remaining.min(config.way);
        let classes = take(n, config.shot + 2 * config.round_eval)?;
        rounds.push(RoundSpec {
            round_id,
            kind: RoundKind::Incremental,
            classes,
            shots_train: config.shot,
            per_class_dev: config.round_eval,
            per_class_test: config.round_eval,
        });
        remaining -= n;
        round_id += 1;
    }
    let ood = take(config.ood_classes, 2 * config.ood_eval)?;
    rounds.push(RoundSpec {
        round_id,
        kind: RoundKind::Ood,
        classes: ood,
        shots_train: 0,
        per_class_dev: config.ood_eval,
        per_class_test: config.ood_eval,
    });
    let unused_classes = eligible[cursor..].iter().map(|(l, _)| l.clone()).collect();

    Ok(DatasetManifest {
        config_name: config.config_name(),
        way: config.way,
        shot: config.shot,
        rounds,
        unused_classes,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

/// Mention id to `(round_id, split)`.
pub type SplitAssignment = BTreeMap<String, (usize, Split)>;

/// The mentions of one round, split three ways.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundSplit {
    pub round_id: usize,
    pub kind: RoundKind,
    pub classes: Vec<String>,
    pub train: Vec<EventMention>,
    pub dev: Vec<EventMention>,
    pub test: Vec<EventMention>,
}

impl RoundSplit {
    pub fn split(&self, split: Split) -> &[EventMention] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub rounds: Vec<RoundSplit>,
}

impl Splits {
    pub fn assignment(&self) -> SplitAssignment {
        let mut out = SplitAssignment::new();
        for r in &self.rounds {
            for split in Split::ALL {
                for m in r.split(split) {
                    out.insert(m.id.clone(), (r.round_id, split));
                }
            }
        }
        out
    }

    pub fn round(&self, round_id: usize) -> Option<&RoundSplit> {
        self.rounds.iter().find(|r| r.round_id == round_id)
    }

    pub fn base(&self) -> Option<&RoundSplit> {
        self.rounds.iter().find(|r| r.kind == RoundKind::Base)
    }

    pub fn incremental(&self) -> impl Iterator<Item = &RoundSplit> {
        self.rounds.iter().filter(|r| r.kind == RoundKind::Incremental)
    }

    pub fn ood(&self) -> Option<&RoundSplit> {
        self.rounds.iter().find(|r| r.kind == RoundKind::Ood)
    }
}

/// Samples each class's train/dev/test mentions without replacement.
/// The corpus is deduplicated first, so no duplicate key can land in two
/// splits.
pub fn materialize_splits(mentions: &[EventMention], manifest: &DatasetManifest) -> Result<Splits> {
    let deduped = dedupe_corpus(mentions.to_vec());
    let mut by_label: HashMap<&str, Vec<&EventMention>> = HashMap::new();
    for m in &deduped {
        by_label.entry(m.label.as_str()).or_default().push(m);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(manifest.seed);
    let mut rounds = Vec::with_capacity(manifest.rounds.len());
    for spec in &manifest.rounds {
        let mut split = RoundSplit {
            round_id: spec.round_id,
            kind: spec.kind,
            classes: spec.classes.clone(),
            train: Vec::new(),
            dev: Vec::new(),
            test: Vec::new(),
        };
        for label in &spec.classes {
            let mut pool: Vec<&EventMention> = by_label.get(label.as_str()).cloned().unwrap_or_default();
            let needed = spec.per_class_total();
            if pool.len() < needed {
                return Err(Error::InsufficientSamplesPerClass {
                    label: label.clone(),
                    needed,
                    available: pool.len(),
                });
            }
            pool.shuffle(&mut rng);
            let mut it = pool.into_iter().cloned();
            split.train.extend(it.by_ref().take(spec.shots_train));
            split.dev.extend(it.by_ref().take(spec.per_class_dev));
            split.test.extend(it.by_ref().take(spec.per_class_test));
        }
        rounds.push(split);
    }
    Ok(Splits { rounds })
}

/// Reads one JSON mention per line; blank lines are skipped.
pub fn read_corpus(path: &Path) -> Result<Vec<EventMention>> {
    let file = fs::File::open(path)?;
    parse_corpus(BufReader::new(file))
}

pub fn parse_corpus(reader: impl BufRead) -> Result<Vec<EventMention>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let m: EventMention = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        m.validate().map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(m);
    }
    Ok(out)
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

/// One JSON object per line; missing parent directories are created.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    create_parent(path)?;
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut f, item)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    create_parent(path)?;
    fs::write(path, text)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

#[derive(Serialize)]
struct AssignmentRecord<'a> {
    id: &'a str,
    round: usize,
    split: Split,
}

/// Writes `round_<id>.<split>.jsonl` for every round and split, plus
/// `assignment.jsonl`.
pub fn write_splits(dir: &Path, splits: &Splits) -> Result<()> {
    fs::create_dir_all(dir)?;
    for r in &splits.rounds {
        for split in Split::ALL {
            let path = dir.join(format!("round_{}.{}.jsonl", r.round_id, split.name()));
            write_jsonl(&path, r.split(split))?;
        }
    }
    let assignment = splits.assignment();
    let records: Vec<AssignmentRecord> = assignment
        .iter()
        .map(|(id, (round, split))| AssignmentRecord { id, round: *round, split: *split })
        .collect();
    write_jsonl(&dir.join("assignment.jsonl"), &records)
}

/// Inverse of [`write_splits`], driven by the manifest's round list.
pub fn read_splits(dir: &Path, manifest: &DatasetManifest) -> Result<Splits> {
    let mut rounds = Vec::new();
    for spec in &manifest.rounds {
        let load = |split: Split| -> Result<Vec<EventMention>> {
            let path = dir.join(format!("round_{}.{}.jsonl", spec.round_id, split.name()));
            read_corpus(&path)
        };
        rounds.push(RoundSplit {
            round_id: spec.round_id,
            kind: spec.kind,
            classes: spec.classes.clone(),
            train: load(Split::Train)?,
            dev: load(Split::Dev)?,
            test: load(Split::Test)?,
        });
    }
    Ok(Splits { rounds })
}
