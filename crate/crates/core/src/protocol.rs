//! Round-based incremental training and the three model variants.
//!
//! * `ifsed-k`: classifier whose class vectors blend a learned head row with
//!   the MAP class vector of the adaptive knowledge layer.
//! * `ifsed-kp`: prototype network; each class prototype is the mean of its
//!   knowledge embedding and its retained samples, scored by negative
//!   squared distance.
//! * `finetune`: plain classifier head, no knowledge, replay or distillation.
//!
//! One round: snapshot the current model, build the training multiset
//! (replayed exemplars plus new samples), precompute snapshot outputs, train,
//! select exemplars for the new classes, and extend the known-class list.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adaptation::{posterior_map, ClassPrior};
use crate::corpus::{EventMention, Splits};
use crate::encoders::{init_params, knowledge_on_tape, sample_on_tape, Dims, TextBackend};
use crate::error::{Error, Result};
use crate::evaluation::{Prediction, RoundEvaluation, SessionResult};
use crate::knowledge::Frame;
use crate::memory::{prototype, replay_union, select_exemplars, Exemplar, ExemplarStore};
use crate::objectives::{hybrid_on_tape, LossWeights, SnapshotOutputs};
use crate::tape::{Gradients, Params, Tape, Var};
use crate::tensor::{softmax, squared_distance, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "ifsed-k")]
    IfsedK,
    #[serde(rename = "ifsed-kp")]
    IfsedKp,
    #[serde(rename = "finetune")]
    Finetune,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::IfsedK => "ifsed-k",
            Variant::IfsedKp => "ifsed-kp",
            Variant::Finetune => "finetune",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "ifsed-k" => Ok(Variant::IfsedK),
            "ifsed-kp" => Ok(Variant::IfsedKp),
            "finetune" => Ok(Variant::Finetune),
            other => Err(Error::Config(format!("unknown variant `{other}`"))),
        }
    }

    pub fn default_weights(self) -> LossWeights {
        match self {
            Variant::IfsedK => LossWeights::ifsed_k(),
            Variant::IfsedKp => LossWeights::ifsed_kp(),
            Variant::Finetune => LossWeights::finetune(),
        }
    }

    /// Epochs for the classifier variants, episodes for the prototype network.
    pub fn default_epochs(self) -> usize {
        match self {
            Variant::IfsedKp => 500,
            _ => 50,
        }
    }
}

/// Ablation switches: external knowledge, mixture (distillation) loss and
/// prototype-based exemplar selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub external_knowledge: bool,
    pub mixture_loss: bool,
    pub prototype_selection: bool,
}

impl Ablation {
    pub const ALL: Ablation = Ablation { external_knowledge: true, mixture_loss: true, prototype_selection: true };
    pub const NONE: Ablation = Ablation { external_knowledge: false, mixture_loss: false, prototype_selection: false };
}

/// A variant with its effective flags: `finetune` turns every flag off and
/// the prototype network always keeps external knowledge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelVariant {
    pub variant: Variant,
    pub flags: Ablation,
}

impl ModelVariant {
    pub fn new(variant: Variant, flags: Ablation) -> Self {
        let flags = match variant {
            Variant::Finetune => Ablation::NONE,
            Variant::IfsedKp => Ablation { external_knowledge: true, ..flags },
            Variant::IfsedK => flags,
        };
        Self { variant, flags }
    }

    pub fn label(&self) -> String {
        let mut name = self.variant.name().to_string();
        let f = self.flags;
        if self.variant != Variant::Finetune {
            for (on, tag) in [(f.external_knowledge, "ek"), (f.mixture_loss, "ml"), (f.prototype_selection, "ps")] {
                if !on {
                    name.push_str(&format!("-no-{tag}"));
                }
            }
        }
        name
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub variant: ModelVariant,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub weights: LossWeights,
    /// Exemplars retained per class.
    pub exemplars_per_class: usize,
    /// Weight of the knowledge-derived vector in a class vector.
    pub knowledge_mixture: f64,
    pub include_base: bool,
    pub map_steps: usize,
    pub map_step_size: f64,
    pub dims: Dims,
    pub freeze_backend: bool,
}

impl TrainingConfig {
    pub fn for_variant(variant: Variant, flags: Ablation) -> Self {
        Self {
            variant: ModelVariant::new(variant, flags),
            epochs: variant.default_epochs(),
            batch_size: 4,
            learning_rate: 0.01,
            seed: 0,
            weights: variant.default_weights(),
            exemplars_per_class: 1,
            knowledge_mixture: 0.2,
            include_base: false,
            map_steps: 20,
            map_step_size: 0.1,
            dims: Dims { d_ctx: 128, d: 128 },
            freeze_backend: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.knowledge_mixture) {
            return Err(Error::Config("knowledge mixture must lie in [0, 1]".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0 && self.map_step_size.is_finite() && self.map_step_size > 0.0) {
            return Err(Error::Config("step sizes must be positive".into()));
        }
        if self.dims.d == 0 || self.dims.d_ctx == 0 {
            return Err(Error::Config("embedding widths must be positive".into()));
        }
        self.weights.validate()
    }

    fn uses_head(&self) -> bool {
        self.variant.variant != Variant::IfsedKp
    }

    fn uses_knowledge(&self) -> bool {
        self.variant.flags.external_knowledge
    }
}

/// Per-class quantities feeding the adaptive knowledge layer: the mean
/// support embedding that drives the gate and the MAP correction
/// `v_t − (k_t + Δh_t)` added on top of the prior mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStat {
    pub support_mean: Vec<f64>,
    pub residual: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub params: Params,
    /// Known classes in arrival order.
    pub classes: Vec<String>,
    pub stats: BTreeMap<String, ClassStat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundState {
    /// Completed training rounds (the base round counts when included).
    pub round: usize,
    pub model: Model,
    /// The model as it was when the previous round finished.
    pub snapshot: Option<Model>,
    pub store: ExemplarStore,
    /// Knowledge embeddings `k_t` under the current model.
    pub knowledge: BTreeMap<String, Vec<f64>>,
}

/// Diagnostics of one training round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub new_samples: usize,
    pub retained_samples: usize,
    /// Full-multiset objective before the first and after the last update.
    pub initial_loss: f64,
    pub final_loss: f64,
}

struct Adam {
    lr: f64,
    t: i32,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(lr: f64) -> Self {
        Self { lr, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    fn step(&mut self, params: &mut Params, grads: &Gradients, trainable: impl Fn(&str) -> bool) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for (name, g) in grads {
            if !trainable(name) {
                continue;
            }
            let p = params.get_mut(name).expect("gradient for unknown parameter");
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
            for k in 0..g.len() {
                let gk = g.data()[k];
                let mk = Self::B1 * m.data()[k] + (1.0 - Self::B1) * gk;
                let vk = Self::B2 * v.data()[k] + (1.0 - Self::B2) * gk * gk;
                m.data_mut()[k] = mk;
                v.data_mut()[k] = vk;
                p.data_mut()[k] -= self.lr * (mk / c1) / ((vk / c2).sqrt() + Self::EPS);
            }
        }
    }
}

fn head_name(class: &str) -> String {
    format!("head.{class}")
}

/// Seed for the randomness of round `round`, so a resumed run draws the same
/// numbers as an uninterrupted one.
fn round_seed(seed: u64, round: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(round as u64 + 1)
}

pub struct Trainer<'a> {
    pub config: &'a TrainingConfig,
    pub backend: TextBackend,
    /// Frame backing each class.
    pub frames: &'a BTreeMap<String, Frame>,
}

/// Exemplar mentions of each retained class.
type Retained = BTreeMap<String, Vec<EventMention>>;

impl<'a> Trainer<'a> {
    pub fn new(config: &'a TrainingConfig, backend: TextBackend, frames: &'a BTreeMap<String, Frame>) -> Result<Self> {
        config.validate()?;
        if backend.d_ctx() != config.dims.d_ctx {
            return Err(Error::DimensionMismatch { expected: config.dims.d_ctx, got: backend.d_ctx() });
        }
        Ok(Self { config, backend, frames })
    }

    pub fn initial_state(&self) -> RoundState {
        RoundState {
            round: 0,
            model: Model {
                params: init_params(self.config.dims, self.config.seed),
                classes: Vec::new(),
                stats: BTreeMap::new(),
            },
            snapshot: None,
            store: ExemplarStore::new(self.config.exemplars_per_class),
            knowledge: BTreeMap::new(),
        }
    }

    fn frame(&self, class: &str) -> Result<&Frame> {
        self.frames.get(class).ok_or_else(|| Error::MissingKnowledge(class.to_string()))
    }

    /// Sample embeddings `s` under `params`.
    pub fn embed(&self, params: &Params, mentions: &[EventMention]) -> Result<Vec<Vec<f64>>> {
        mentions
            .iter()
            .map(|m| {
                let mut tape = Tape::new();
                let v = sample_on_tape(&mut tape, params, &self.backend, m)?;
                Ok(tape.value(v.s).data().to_vec())
            })
            .collect()
    }

    pub fn knowledge_vector(&self, params: &Params, class: &str) -> Result<Vec<f64>> {
        let frame = self.frame(class)?;
        let mut tape = Tape::new();
        let v = knowledge_on_tape(&mut tape, params, &self.backend, frame);
        Ok(tape.value(v.k).data().to_vec())
    }

    /// Recomputes support means and MAP corrections for `classes` from the
    /// labeled `support` set. Classes without support keep their previous
    /// mean, or use `k_t` (zero offset) when they never had one.
    pub fn compute_stats(
        &self,
        params: &Params,
        classes: &[String],
        support: &[EventMention],
        previous: &BTreeMap<String, ClassStat>,
    ) -> Result<BTreeMap<String, ClassStat>> {
        if !self.config.uses_knowledge() {
            return Ok(BTreeMap::new());
        }
        let embeddings = self.embed(params, support)?;
        let mut priors = Vec::with_capacity(classes.len());
        let mut means = Vec::with_capacity(classes.len());
        let gate_w = &params["gate.w"];
        let gate_b = &params["gate.b"];
        for class in classes {
            let k = self.knowledge_vector(params, class)?;
            let members: Vec<&Vec<f64>> = support
                .iter()
                .zip(&embeddings)
                .filter(|(m, _)| &m.label == class)
                .map(|(_, e)| e)
                .collect();
            let mean = if members.is_empty() {
                previous.get(class).map_or_else(|| k.clone(), |s| s.support_mean.clone())
            } else {
                let owned: Vec<Vec<f64>> = members.into_iter().cloned().collect();
                prototype(class, &owned)?.mean
            };
            let lambda = crate::adaptation::gate(&mean, &k, gate_w, gate_b)?;
            let delta = crate::adaptation::offset(&mean, &k, &lambda)?;
            priors.push(ClassPrior {
                class: class.clone(),
                frame_id: self.frame(class)?.frame_id.clone(),
                knowledge: k,
                offset: delta,
            });
            means.push(mean);
        }
        let labeled: Vec<(Vec<f64>, String)> = embeddings
            .into_iter()
            .zip(support)
            .filter(|(_, m)| classes.contains(&m.label))
            .map(|(e, m)| (e, m.label.clone()))
            .collect();
        let posterior = posterior_map(&labeled, &priors, self.config.map_steps, self.config.map_step_size)?;
        Ok(classes
            .iter()
            .zip(priors)
            .zip(means)
            .zip(posterior.vectors)
            .map(|(((class, prior), mean), v)| {
                let residual = v.iter().zip(prior.mean()).map(|(v, mu)| v - mu).collect();
                (class.clone(), ClassStat { support_mean: mean, residual })
            })
            .collect())
    }

    /// Logits (`batch x classes`) and features (`batch x d`) on the tape.
    fn forward(
        &self,
        tape: &mut Tape,
        model: &Model,
        retained: &Retained,
        batch: &[&EventMention],
    ) -> Result<(Var, Var)> {
        let params = &model.params;
        let rows = batch
            .iter()
            .map(|m| sample_on_tape(tape, params, &self.backend, m).map(|v| v.s))
            .collect::<Result<Vec<_>>>()?;
        let features = tape.concat_rows(&rows);
        if model.classes.is_empty() {
            return Err(Error::NoKnownClasses);
        }
        let logits = match self.config.variant.variant {
            Variant::IfsedKp => {
                let mut protos = Vec::with_capacity(model.classes.len());
                for class in &model.classes {
                    let mut members = vec![knowledge_on_tape(tape, params, &self.backend, self.frame(class)?).k];
                    for m in retained.get(class).into_iter().flatten() {
                        members.push(sample_on_tape(tape, params, &self.backend, m)?.s);
                    }
                    let stacked = tape.concat_rows(&members);
                    protos.push(tape.mean_rows(stacked));
                }
                let protos = tape.concat_rows(&protos);
                let dist = tape.sq_dist(features, protos);
                tape.scale(dist, -1.0)
            }
            Variant::IfsedK | Variant::Finetune => {
                let kappa = self.config.knowledge_mixture;
                let mut class_rows = Vec::with_capacity(model.classes.len());
                for class in &model.classes {
                    let head = tape.param(&head_name(class), params);
                    if !self.config.uses_knowledge() {
                        class_rows.push(head);
                        continue;
                    }
                    let stat = model
                        .stats
                        .get(class)
                        .ok_or_else(|| Error::MissingKnowledge(class.clone()))?;
                    let k = knowledge_on_tape(tape, params, &self.backend, self.frame(class)?).k;
                    let s_bar = tape.constant(Tensor::row_vector(stat.support_mean.clone()));
                    let (_, delta) = crate::adaptation::offset_on_tape(tape, params, s_bar, k);
                    let prior_mean = tape.add(k, delta);
                    let correction = tape.constant(Tensor::row_vector(stat.residual.clone()));
                    let v = tape.add(prior_mean, correction);
                    let knowledge_part = tape.scale(v, kappa);
                    let head_part = tape.scale(head, 1.0 - kappa);
                    class_rows.push(tape.add(knowledge_part, head_part));
                }
                let vectors = tape.concat_rows(&class_rows);
                let vt = tape.transpose(vectors);
                tape.matmul(features, vt)
            }
        };
        Ok((logits, features))
    }

    fn resolve_retained(&self, store: &ExemplarStore, index: &HashMap<String, EventMention>) -> Result<Retained> {
        store
            .iter()
            .map(|(class, exemplars)| {
                let mentions = exemplars
                    .iter()
                    .map(|e| {
                        index.get(&e.mention_id).cloned().ok_or_else(|| Error::MissingMention(e.mention_id.clone()))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok((class.to_string(), mentions))
            })
            .collect()
    }

    /// Class probabilities for each mention under `model`, in known-class order.
    pub fn predict_proba(
        &self,
        model: &Model,
        store: &ExemplarStore,
        index: &HashMap<String, EventMention>,
        mentions: &[EventMention],
    ) -> Result<Vec<Vec<f64>>> {
        let logits = self.logits(model, store, index, mentions)?;
        Ok((0..logits.rows()).map(|i| softmax(logits.row(i))).collect())
    }

    pub fn logits(
        &self,
        model: &Model,
        store: &ExemplarStore,
        index: &HashMap<String, EventMention>,
        mentions: &[EventMention],
    ) -> Result<Tensor> {
        if model.classes.is_empty() {
            return Err(Error::NoKnownClasses);
        }
        let retained = self.resolve_retained(store, index)?;
        let mut out = Tensor::zeros(mentions.len(), model.classes.len());
        for (chunk_idx, chunk) in mentions.chunks(64).enumerate() {
            let refs: Vec<&EventMention> = chunk.iter().collect();
            let mut tape = Tape::new();
            let (logits, _) = self.forward(&mut tape, model, &retained, &refs)?;
            let value = tape.value(logits);
            for i in 0..chunk.len() {
                out.row_mut(chunk_idx * 64 + i).copy_from_slice(value.row(i));
            }
        }
        Ok(out)
    }

    pub fn predict(
        &self,
        model: &Model,
        store: &ExemplarStore,
        index: &HashMap<String, EventMention>,
        mentions: &[EventMention],
    ) -> Result<Vec<Prediction>> {
        let probs = self.predict_proba(model, store, index, mentions)?;
        Ok(mentions
            .iter()
            .zip(probs)
            .map(|(m, scores)| {
                let best = argmax(&scores);
                Prediction {
                    mention_id: m.id.clone(),
                    gold: m.label.clone(),
                    predicted: model.classes[best].clone(),
                    scores,
                }
            })
            .collect())
    }

    fn snapshot_outputs(
        &self,
        snapshot: &Model,
        store: &ExemplarStore,
        index: &HashMap<String, EventMention>,
        training: &[EventMention],
    ) -> Result<SnapshotOutputs> {
        let features = Tensor::from_rows(&self.embed(&snapshot.params, training)?);
        let old_logits = self.logits(snapshot, store, index, training)?;
        SnapshotOutputs::new(&features, old_logits)
    }

    fn batch_loss(
        &self,
        tape: &mut Tape,
        model: &Model,
        retained: &Retained,
        training: &[EventMention],
        indices: &[usize],
        snapshot: Option<&SnapshotOutputs>,
    ) -> Result<Var> {
        let batch: Vec<&EventMention> = indices.iter().map(|&i| &training[i]).collect();
        let labels = batch
            .iter()
            .map(|m| {
                model
                    .classes
                    .iter()
                    .position(|c| c == &m.label)
                    .ok_or_else(|| Error::UnknownClass(m.label.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        let (logits, features) = self.forward(tape, model, retained, &batch)?;
        let snap = snapshot.map(|s| SnapshotOutputs {
            features: select_rows(&s.features, indices),
            old_logits: select_rows(&s.old_logits, indices),
        });
        let terms = hybrid_on_tape(
            tape,
            logits,
            &labels,
            features,
            snap.as_ref(),
            &self.config.weights,
            self.config.variant.flags.mixture_loss,
        );
        Ok(terms.total)
    }

    fn full_loss(
        &self,
        model: &Model,
        retained: &Retained,
        training: &[EventMention],
        snapshot: Option<&SnapshotOutputs>,
    ) -> Result<f64> {
        let all: Vec<usize> = (0..training.len()).collect();
        let mut tape = Tape::new();
        let loss = self.batch_loss(&mut tape, model, retained, training, &all, snapshot)?;
        Ok(tape.scalar(loss))
    }

    /// Trains one round of `new_classes` on `new_samples`.
    pub fn run_round(
        &self,
        state: &RoundState,
        new_classes: &[String],
        new_samples: &[EventMention],
        index: &HashMap<String, EventMention>,
    ) -> Result<(RoundState, RoundReport)> {
        let flags = self.config.variant.flags;
        for c in new_classes {
            if state.model.classes.contains(c) || new_classes.iter().filter(|x| *x == c).count() > 1 {
                return Err(Error::DuplicateClass(c.clone()));
            }
        }
        if let Some(m) = new_samples.iter().find(|m| !new_classes.contains(&m.label)) {
            return Err(Error::UnknownClass(m.label.clone()));
        }
        let snapshot = (state.round > 0).then(|| state.model.clone());
        let training = if flags.prototype_selection {
            replay_union(&state.store, index, new_samples)?
        } else {
            new_samples.to_vec()
        };
        let retained = self.resolve_retained(&state.store, index)?;
        let retained_samples = training.len() - new_samples.len();

        let mut model = state.model.clone();
        model.classes.extend(new_classes.iter().cloned());
        if self.config.uses_head() {
            let embeddings = self.embed(&model.params, new_samples)?;
            for class in new_classes {
                let members: Vec<Vec<f64>> = new_samples
                    .iter()
                    .zip(&embeddings)
                    .filter(|(m, _)| &m.label == class)
                    .map(|(_, e)| e.clone())
                    .collect();
                let init = match prototype(class, &members) {
                    Ok(p) => Tensor::row_vector(p.mean),
                    Err(_) => Tensor::zeros(1, self.config.dims.d),
                };
                model.params.insert(head_name(class), init);
            }
        }

        let snapshot_out = match (&snapshot, flags.mixture_loss) {
            (Some(prev), true) if !training.is_empty() => {
                Some(self.snapshot_outputs(prev, &state.store, index, &training)?)
            }
            _ => None,
        };

        model.stats = self.compute_stats(&model.params, &model.classes, &training, &state.model.stats)?;
        let initial_loss = if training.is_empty() {
            0.0
        } else {
            self.full_loss(&model, &retained, &training, snapshot_out.as_ref())?
        };

        let mut rng = ChaCha8Rng::seed_from_u64(round_seed(self.config.seed, state.round));
        let mut adam = Adam::new(self.config.learning_rate);
        let freeze = self.config.freeze_backend;
        let trainable = |name: &str| !(freeze && name.starts_with("backend."));
        let mut step = |model: &mut Model, indices: &[usize]| -> Result<()> {
            let mut tape = Tape::new();
            let loss = self.batch_loss(&mut tape, model, &retained, &training, indices, snapshot_out.as_ref())?;
            let grads = tape.backward(loss);
            if grads.values().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGradient("training step"));
            }
            adam.step(&mut model.params, &grads, trainable);
            Ok(())
        };
        if !training.is_empty() {
            let mut order: Vec<usize> = (0..training.len()).collect();
            match self.config.variant.variant {
                Variant::IfsedKp => {
                    for _ in 0..self.config.epochs {
                        order.shuffle(&mut rng);
                        let episode = &order[..self.config.batch_size.min(order.len())];
                        step(&mut model, episode)?;
                    }
                }
                Variant::IfsedK | Variant::Finetune => {
                    for epoch in 0..self.config.epochs {
                        if epoch > 0 {
                            model.stats =
                                self.compute_stats(&model.params, &model.classes, &training, &state.model.stats)?;
                        }
                        order.shuffle(&mut rng);
                        for batch in order.chunks(self.config.batch_size) {
                            step(&mut model, batch)?;
                        }
                    }
                }
            }
        }

        let mut stats = state.model.stats.clone();
        stats.extend(self.compute_stats(&model.params, &model.classes, &training, &state.model.stats)?);
        model.stats = stats;
        let final_loss = if training.is_empty() {
            0.0
        } else {
            self.full_loss(&model, &retained, &training, snapshot_out.as_ref())?
        };

        let mut store = state.store.clone();
        if flags.prototype_selection {
            let embeddings = self.embed(&model.params, new_samples)?;
            for class in new_classes {
                let members: Vec<(String, Vec<f64>)> = new_samples
                    .iter()
                    .zip(&embeddings)
                    .filter(|(m, _)| &m.label == class)
                    .map(|(m, e)| (m.id.clone(), e.clone()))
                    .collect();
                let exemplars = if members.is_empty() {
                    Vec::new()
                } else {
                    let vectors: Vec<Vec<f64>> = members.iter().map(|(_, e)| e.clone()).collect();
                    let center = prototype(class, &vectors)?.mean;
                    select_exemplars(&members, &center, self.config.exemplars_per_class)
                        .into_iter()
                        .map(|id| {
                            let embedding = members.iter().find(|(m, _)| *m == id).map(|(_, e)| e.clone()).unwrap();
                            Exemplar { mention_id: id, embedding }
                        })
                        .collect()
                };
                store.insert(class, exemplars)?;
            }
        }

        let mut knowledge = BTreeMap::new();
        if self.config.uses_knowledge() {
            for class in &model.classes {
                knowledge.insert(class.clone(), self.knowledge_vector(&model.params, class)?);
            }
        }

        let report = RoundReport {
            round: state.round + 1,
            new_samples: new_samples.len(),
            retained_samples,
            initial_loss,
            final_loss,
        };
        let next = RoundState { round: state.round + 1, model, snapshot, store, knowledge };
        Ok((next, report))
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate() {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}

fn select_rows(t: &Tensor, indices: &[usize]) -> Tensor {
    let rows: Vec<&[f64]> = indices.iter().map(|&i| t.row(i)).collect();
    Tensor::from_rows(&rows)
}

/// `score_t = query · v_t` followed by a softmax.
pub fn classify_by_dot(query: &[f64], class_vectors: &[Vec<f64>]) -> Result<Vec<f64>> {
    if class_vectors.is_empty() {
        return Err(Error::NoKnownClasses);
    }
    Ok(softmax(&class_vectors.iter().map(|v| crate::tensor::dot(query, v)).collect::<Vec<_>>()))
}

/// `score_t = −‖query − prototype_t‖²` followed by a softmax.
pub fn classify_by_prototype(query: &[f64], prototypes: &[Vec<f64>]) -> Result<Vec<f64>> {
    if prototypes.is_empty() {
        return Err(Error::NoKnownClasses);
    }
    Ok(softmax(&prototypes.iter().map(|p| -squared_distance(query, p)).collect::<Vec<_>>()))
}

impl Trainer<'_> {
    /// Effective class vectors of a classifier model (`ifsed-k`, `finetune`).
    pub fn class_vectors(&self, model: &Model) -> Result<Vec<Vec<f64>>> {
        self.class_representations(model, &ExemplarStore::default(), &HashMap::new())
    }

    /// Class vectors (classifier variants) or prototypes (`ifsed-kp`).
    pub fn class_representations(
        &self,
        model: &Model,
        store: &ExemplarStore,
        index: &HashMap<String, EventMention>,
    ) -> Result<Vec<Vec<f64>>> {
        let retained = self.resolve_retained(store, index)?;
        let params = &model.params;
        let mut out = Vec::with_capacity(model.classes.len());
        for class in &model.classes {
            let mut tape = Tape::new();
            let row = match self.config.variant.variant {
                Variant::IfsedKp => {
                    let mut members = vec![knowledge_on_tape(&mut tape, params, &self.backend, self.frame(class)?).k];
                    for m in retained.get(class).into_iter().flatten() {
                        members.push(sample_on_tape(&mut tape, params, &self.backend, m)?.s);
                    }
                    let stacked = tape.concat_rows(&members);
                    tape.mean_rows(stacked)
                }
                _ => {
                    // A one-row forward with an identity-like probe is not
                    // available, so rebuild the class row directly.
                    let head = tape.param(&head_name(class), params);
                    if self.config.uses_knowledge() {
                        let stat = model.stats.get(class).ok_or_else(|| Error::MissingKnowledge(class.clone()))?;
                        let k = knowledge_on_tape(&mut tape, params, &self.backend, self.frame(class)?).k;
                        let s_bar = tape.constant(Tensor::row_vector(stat.support_mean.clone()));
                        let (_, delta) = crate::adaptation::offset_on_tape(&mut tape, params, s_bar, k);
                        let mu = tape.add(k, delta);
                        let r = tape.constant(Tensor::row_vector(stat.residual.clone()));
                        let v = tape.add(mu, r);
                        let kp = tape.scale(v, self.config.knowledge_mixture);
                        let hp = tape.scale(head, 1.0 - self.config.knowledge_mixture);
                        tape.add(kp, hp)
                    } else {
                        head
                    }
                }
            };
            out.push(tape.value(row).data().to_vec());
        }
        Ok(out)
    }
}

/// Per-round training diagnostics plus the evaluation result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub result: SessionResult,
    pub reports: Vec<RoundReport>,
    pub final_state: RoundState,
}

/// Everything needed to continue a session after `completed_rounds`
/// incremental rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub completed_rounds: usize,
    pub state: RoundState,
    pub evaluations: Vec<RoundEvaluation>,
    pub reports: Vec<RoundReport>,
}

impl Checkpoint {
    pub const FORMAT: &'static str = "fsied-checkpoint";
    pub const VERSION: u32 = 1;

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let cp: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if cp.format != Self::FORMAT || cp.version != Self::VERSION {
            return Err(Error::Data(format!(
                "unsupported checkpoint `{}` version {}",
                cp.format, cp.version
            )));
        }
        Ok(cp)
    }
}

/// Index of every training mention, used to re-read retained exemplars.
pub fn training_index(splits: &Splits) -> HashMap<String, EventMention> {
    splits
        .rounds
        .iter()
        .flat_map(|r| r.train.iter())
        .map(|m| (m.id.clone(), m.clone()))
        .collect()
}

/// Runs every incremental round (after the base round when
/// `include_base`), evaluating after each on the cumulative test set and the
/// OOD test split. `resume` continues from a checkpoint; `on_round` sees a
/// checkpoint after every completed incremental round.
pub fn run_session(
    trainer: &Trainer,
    splits: &Splits,
    config_name: &str,
    resume: Option<Checkpoint>,
    mut on_round: impl FnMut(&Checkpoint) -> Result<()>,
) -> Result<Session> {
    let config = trainer.config;
    let index = training_index(splits);
    let incremental: Vec<_> = splits.incremental().collect();
    let ood: Vec<EventMention> = splits.ood().map(|r| r.test.clone()).unwrap_or_default();
    let base = splits.base().filter(|_| config.include_base);

    let (mut state, mut evaluations, mut reports, start) = match resume {
        Some(cp) => (cp.state, cp.evaluations, cp.reports, cp.completed_rounds),
        None => {
            let mut state = trainer.initial_state();
            let mut reports = Vec::new();
            if let Some(base) = base {
                let (next, report) = trainer.run_round(&state, &base.classes, &base.train, &index)?;
                state = next;
                reports.push(report);
            }
            (state, Vec::new(), reports, 0)
        }
    };

    let mut cumulative_test: Vec<EventMention> = base.map(|b| b.test.clone()).unwrap_or_default();
    for r in incremental.iter().take(start) {
        cumulative_test.extend(r.test.iter().cloned());
    }
    for (i, round) in incremental.iter().enumerate().skip(start) {
        let (next, report) = trainer.run_round(&state, &round.classes, &round.train, &index)?;
        state = next;
        reports.push(report);
        cumulative_test.extend(round.test.iter().cloned());
        let predictions = trainer.predict(&state.model, &state.store, &index, &cumulative_test)?;
        let ood_predictions = trainer.predict(&state.model, &state.store, &index, &ood)?;
        evaluations.push(RoundEvaluation {
            round: i + 1,
            new_classes: round.classes.clone(),
            known_classes: state.model.classes.clone(),
            predictions,
            ood_predictions,
        });
        let checkpoint = Checkpoint {
            format: Checkpoint::FORMAT.to_string(),
            version: Checkpoint::VERSION,
            completed_rounds: i + 1,
            state: state.clone(),
            evaluations: evaluations.clone(),
            reports: reports.clone(),
        };
        on_round(&checkpoint)?;
    }

    let result = SessionResult {
        config_name: config_name.to_string(),
        variant: config.variant.label(),
        seed: config.seed,
        base_classes: base.map(|b| b.classes.clone()).unwrap_or_default(),
        rounds: evaluations,
    };
    Ok(Session { result, reports, final_state: state })
}
