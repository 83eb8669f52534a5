//! Knowledge and sample encoders.
//!
//! Both encoders share a contextual text backend and project into the same
//! `d`-dimensional space:
//!
//! ```text
//! knowledge:  D' = ctx(definition)          L' = mean-pooled ctx(lexical unit), one row per unit
//!             A' = ctx(element) + attend(element, D')   (null-entity row when there are no elements)
//!             L* = mean over units of Attn_lex(L', D')
//!             A* = Attn_ent(L*, A')
//!             k  = FFN_k([L*; A*])
//! sample:     X' = ctx(sentence)            T' = mean of X' over the trigger span
//!             A* = Attn_s(T', X')
//!             s  = FFN_s([A*; T'])
//! ```
//!
//! Every attention is single-head scaled dot-product with learned query, key
//! and value projections of width `d`; the element/definition pooling used
//! for `A'` is parameter-free.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::EventMention;
use crate::error::{Error, Result};
use crate::knowledge::Frame;
use crate::tape::{Params, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    /// Seeded hash-projection token vectors.
    Toy,
    /// Token vectors read from an exported embedding table; tokens missing
    /// from the table fall back to the hash projection.
    Pretrained,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    /// Width of the backend's contextual token vectors.
    pub d_ctx: usize,
    /// Width of knowledge and sample embeddings.
    pub d: usize,
}

/// Contextual token encoder: fixed token vectors followed by one mixing
/// layer `tanh([e_i; mean(e)] W + b)` whose parameters live under
/// `backend.*`.
#[derive(Debug, Clone)]
pub struct TextBackend {
    kind: BackendKind,
    seed: u64,
    d_ctx: usize,
    table: Option<Arc<HashMap<String, Vec<f64>>>>,
}

impl TextBackend {
    pub fn toy(seed: u64, d_ctx: usize) -> Self {
        Self { kind: BackendKind::Toy, seed, d_ctx, table: None }
    }

    /// Loads a whitespace-separated `token v_1 … v_d` table.
    pub fn pretrained(seed: u64, table_path: &Path) -> Result<Self> {
        let text = fs::read_to_string(table_path)?;
        let mut table = HashMap::new();
        let mut width = None;
        for (i, line) in text.lines().enumerate() {
            let mut parts = line.split_whitespace();
            let Some(token) = parts.next() else { continue };
            let values: Vec<f64> = parts
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?;
            match width {
                None => width = Some(values.len()),
                Some(w) if w != values.len() => {
                    return Err(Error::DimensionMismatch { expected: w, got: values.len() })
                }
                _ => {}
            }
            table.insert(token.to_lowercase(), values);
        }
        let d_ctx = width.ok_or_else(|| Error::Data("empty embedding table".into()))?;
        Ok(Self { kind: BackendKind::Pretrained, seed, d_ctx, table: Some(Arc::new(table)) })
    }

    pub fn kind(&self) -> BackendKind {
        self.kind
    }

    pub fn d_ctx(&self) -> usize {
        self.d_ctx
    }

    /// Deterministic unit vector for a token.
    pub fn token_vector(&self, token: &str) -> Vec<f64> {
        let token = token.to_lowercase();
        if let Some(v) = self.table.as_ref().and_then(|t| t.get(&token)) {
            return v.clone();
        }
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(token.as_bytes());
        let digest = hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(seed);
        let mut v: Vec<f64> = (0..self.d_ctx).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = crate::tensor::norm(&v).max(1e-12);
        v.iter_mut().for_each(|x| *x /= n);
        v
    }

    /// `n x d_ctx` contextual vectors for `tokens` (non-empty).
    pub fn encode(&self, tape: &mut Tape, params: &Params, tokens: &[String]) -> Var {
        assert!(!tokens.is_empty(), "backend input must be non-empty");
        let rows: Vec<Vec<f64>> = tokens.iter().map(|t| self.token_vector(t)).collect();
        let emb = Tensor::from_rows(&rows);
        let mean = emb.mean_rows();
        let mut mixed_in = Tensor::zeros(emb.rows(), 2 * self.d_ctx);
        for i in 0..emb.rows() {
            mixed_in.row_mut(i)[..self.d_ctx].copy_from_slice(emb.row(i));
            mixed_in.row_mut(i)[self.d_ctx..].copy_from_slice(mean.row(0));
        }
        let x = tape.constant(mixed_in);
        let w = tape.param("backend.mix.w", params);
        let b = tape.param("backend.mix.b", params);
        let h = tape.affine(x, w, b);
        tape.tanh(h)
    }
}

/// Output of one attention block.
pub struct Attended {
    pub output: Var,
    /// `queries x keys` weights; each row is a probability vector.
    pub weights: Var,
}

/// Single-head scaled dot-product attention with parameters
/// `<prefix>.wq`, `<prefix>.wk`, `<prefix>.wv`.
pub fn attention(tape: &mut Tape, params: &Params, prefix: &str, queries: Var, keys: Var) -> Attended {
    let wq = tape.param(&format!("{prefix}.wq"), params);
    let wk = tape.param(&format!("{prefix}.wk"), params);
    let wv = tape.param(&format!("{prefix}.wv"), params);
    let q = tape.matmul(queries, wq);
    let k = tape.matmul(keys, wk);
    let v = tape.matmul(keys, wv);
    let kt = tape.transpose(k);
    let raw = tape.matmul(q, kt);
    let width = tape.value(q).cols() as f64;
    let scores = tape.scale(raw, 1.0 / width.sqrt());
    let weights = tape.softmax_rows(scores);
    let output = tape.matmul(weights, v);
    Attended { output, weights }
}

/// Parameter-free scaled dot-product pooling of `keys` by `query`.
fn pool(tape: &mut Tape, query: Var, keys: Var) -> Var {
    let kt = tape.transpose(keys);
    let raw = tape.matmul(query, kt);
    let width = tape.value(query).cols() as f64;
    let scores = tape.scale(raw, 1.0 / width.sqrt());
    let weights = tape.softmax_rows(scores);
    tape.matmul(weights, keys)
}

/// One tanh hidden layer: `tanh(x W1 + b1) W2 + b2`.
pub fn feed_forward(tape: &mut Tape, params: &Params, prefix: &str, x: Var) -> Var {
    let w1 = tape.param(&format!("{prefix}.w1"), params);
    let b1 = tape.param(&format!("{prefix}.b1"), params);
    let w2 = tape.param(&format!("{prefix}.w2"), params);
    let b2 = tape.param(&format!("{prefix}.b2"), params);
    let h = tape.affine(x, w1, b1);
    let h = tape.tanh(h);
    tape.affine(h, w2, b2)
}

/// Tape handles for a knowledge embedding and its intermediates.
pub struct KnowledgeVars {
    pub k: Var,
    pub lexical_summary: Var,
    pub entity_summary: Var,
    pub lexical_weights: Var,
    pub entity_weights: Var,
}

pub fn knowledge_on_tape(tape: &mut Tape, params: &Params, backend: &TextBackend, frame: &Frame) -> KnowledgeVars {
    let definition = backend.encode(tape, params, &frame.definition);

    let mut lexical_rows = Vec::new();
    for lu in frame.lexical_unit_tokens() {
        let ctx = backend.encode(tape, params, &lu);
        lexical_rows.push(tape.mean_rows(ctx));
    }
    let lexical = tape.concat_rows(&lexical_rows);

    let mut entity_rows = Vec::new();
    for element in frame.frame_elements.iter().filter(|e| !e.is_empty()) {
        let ctx = backend.encode(tape, params, element);
        let name = tape.mean_rows(ctx);
        let context = pool(tape, name, definition);
        entity_rows.push(tape.add(name, context));
    }
    let entities = if entity_rows.is_empty() {
        tape.param("knowledge.null_entity", params)
    } else {
        tape.concat_rows(&entity_rows)
    };

    let lex = attention(tape, params, "knowledge.lex_attn", lexical, definition);
    let lexical_summary = tape.mean_rows(lex.output);
    let ent = attention(tape, params, "knowledge.ent_attn", lexical_summary, entities);
    let joined = tape.concat_cols(&[lexical_summary, ent.output]);
    let k = feed_forward(tape, params, "knowledge.ffn", joined);
    KnowledgeVars {
        k,
        lexical_summary,
        entity_summary: ent.output,
        lexical_weights: lex.weights,
        entity_weights: ent.weights,
    }
}

/// Tape handles for a sample embedding and its intermediates.
pub struct SampleVars {
    pub s: Var,
    pub trigger: Var,
    pub entity_summary: Var,
    pub weights: Var,
}

pub fn sample_on_tape(
    tape: &mut Tape,
    params: &Params,
    backend: &TextBackend,
    mention: &EventMention,
) -> Result<SampleVars> {
    mention.validate()?;
    let sentence = backend.encode(tape, params, &mention.tokens);
    let (start, end) = mention.trigger;
    let span = tape.slice_rows(sentence, start, end);
    let trigger = tape.mean_rows(span);
    let att = attention(tape, params, "sample.attn", trigger, sentence);
    let joined = tape.concat_cols(&[att.output, trigger]);
    let s = feed_forward(tape, params, "sample.ffn", joined);
    Ok(SampleVars { s, trigger, entity_summary: att.output, weights: att.weights })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeEmbedding {
    pub frame_id: String,
    pub vector: Vec<f64>,
    pub lexical_summary: Vec<f64>,
    pub entity_summary: Vec<f64>,
    pub lexical_weights: Tensor,
    pub entity_weights: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEmbedding {
    pub mention_id: String,
    pub vector: Vec<f64>,
    pub trigger: Vec<f64>,
    pub entity_summary: Vec<f64>,
    pub weights: Vec<f64>,
}

fn check_dims(params: &Params, dims: Dims) -> Result<()> {
    let ffn = params
        .get("sample.ffn.w2")
        .ok_or_else(|| Error::Config("parameters are missing `sample.ffn.w2`".into()))?;
    if ffn.cols() != dims.d {
        return Err(Error::DimensionMismatch { expected: dims.d, got: ffn.cols() });
    }
    let mix = params
        .get("backend.mix.w")
        .ok_or_else(|| Error::Config("parameters are missing `backend.mix.w`".into()))?;
    if mix.cols() != dims.d_ctx {
        return Err(Error::DimensionMismatch { expected: dims.d_ctx, got: mix.cols() });
    }
    Ok(())
}

pub fn encode_knowledge(frame: &Frame, backend: &TextBackend, params: &Params, dims: Dims) -> Result<KnowledgeEmbedding> {
    check_dims(params, dims)?;
    if backend.d_ctx() != dims.d_ctx {
        return Err(Error::DimensionMismatch { expected: dims.d_ctx, got: backend.d_ctx() });
    }
    let mut tape = Tape::new();
    let v = knowledge_on_tape(&mut tape, params, backend, frame);
    Ok(KnowledgeEmbedding {
        frame_id: frame.frame_id.clone(),
        vector: tape.value(v.k).data().to_vec(),
        lexical_summary: tape.value(v.lexical_summary).data().to_vec(),
        entity_summary: tape.value(v.entity_summary).data().to_vec(),
        lexical_weights: tape.value(v.lexical_weights).clone(),
        entity_weights: tape.value(v.entity_weights).clone(),
    })
}

pub fn encode_sample(mention: &EventMention, backend: &TextBackend, params: &Params, dims: Dims) -> Result<SampleEmbedding> {
    check_dims(params, dims)?;
    let mut tape = Tape::new();
    let v = sample_on_tape(&mut tape, params, backend, mention)?;
    Ok(SampleEmbedding {
        mention_id: mention.id.clone(),
        vector: tape.value(v.s).data().to_vec(),
        trigger: tape.value(v.trigger).data().to_vec(),
        entity_summary: tape.value(v.entity_summary).data().to_vec(),
        weights: tape.value(v.weights).data().to_vec(),
    })
}

/// Order-preserving element-wise encoding; errors carry the item index.
pub fn encode_batch<T, E>(items: &[T], mut encode: impl FnMut(&T) -> Result<E>) -> Result<Vec<E>> {
    items
        .iter()
        .enumerate()
        .map(|(index, item)| encode(item).map_err(|e| Error::Batch { index, source: Box::new(e) }))
        .collect()
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-limit..limit)).collect())
}

/// Freshly initialized backend, encoder and gate parameters.
pub fn init_params(dims: Dims, seed: u64) -> Params {
    let Dims { d_ctx, d } = dims;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = Params::new();
    let mut put = |name: &str, t: Tensor| {
        p.insert(name.to_string(), t);
    };
    put("backend.mix.w", glorot(&mut rng, 2 * d_ctx, d_ctx));
    put("backend.mix.b", Tensor::zeros(1, d_ctx));
    for (prefix, q_in, kv_in) in [
        ("knowledge.lex_attn", d_ctx, d_ctx),
        ("knowledge.ent_attn", d, d_ctx),
        ("sample.attn", d_ctx, d_ctx),
    ] {
        put(&format!("{prefix}.wq"), glorot(&mut rng, q_in, d));
        put(&format!("{prefix}.wk"), glorot(&mut rng, kv_in, d));
        put(&format!("{prefix}.wv"), glorot(&mut rng, kv_in, d));
    }
    put("knowledge.null_entity", glorot(&mut rng, 1, d_ctx));
    for (prefix, input) in [("knowledge.ffn", 2 * d), ("sample.ffn", d + d_ctx)] {
        put(&format!("{prefix}.w1"), glorot(&mut rng, input, d));
        put(&format!("{prefix}.b1"), Tensor::zeros(1, d));
        put(&format!("{prefix}.w2"), glorot(&mut rng, d, d));
        put(&format!("{prefix}.b2"), Tensor::zeros(1, d));
    }
    put("gate.w", glorot(&mut rng, 3 * d, d));
    put("gate.b", Tensor::zeros(1, d));
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knowledge::parse_frames;

    const DIMS: Dims = Dims { d_ctx: 12, d: 8 };

    fn chatting() -> Frame {
        let line = r#"{"frame_id":"chatting","definition":"A group of people (the Interlocutors or Interlocutor_1 and Interlocutor_2 together) have a conversation.","frame_elements":["Interlocutors","Interlocutor_1","Interlocutor_2"],"lexical_units":["badinage.n","banter.n","chat.v","chit-chat.n","colloquy.n"]}"#;
        parse_frames(line.as_bytes()).unwrap().get("chatting").unwrap().clone()
    }

    fn mention(text: &str, trigger: (usize, usize)) -> EventMention {
        EventMention {
            id: "m".into(),
            tokens: text.split(' ').map(String::from).collect(),
            trigger,
            label: "Chat".into(),
        }
    }

    fn softmax_oracle(scores: &[f64]) -> Vec<f64> {
        let z: f64 = scores.iter().map(|s| s.exp()).sum();
        scores.iter().map(|s| s.exp() / z).collect()
    }

    #[test]
    fn knowledge_encoding_is_deterministic_and_shaped() {
        let backend = TextBackend::toy(3, DIMS.d_ctx);
        let params = init_params(DIMS, 1);
        let a = encode_knowledge(&chatting(), &backend, &params, DIMS).unwrap();
        let b = encode_knowledge(&chatting(), &backend, &params, DIMS).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.vector.len(), DIMS.d);
        assert_eq!(a.lexical_weights.rows(), 5);
        assert_eq!(a.entity_weights.shape(), (1, 3));
    }

    #[test]
    fn empty_frame_elements_use_null_entity() {
        let backend = TextBackend::toy(3, DIMS.d_ctx);
        let params = init_params(DIMS, 1);
        let mut frame = chatting();
        frame.frame_elements.clear();
        let k = encode_knowledge(&frame, &backend, &params, DIMS).unwrap();
        assert!(k.vector.iter().all(|v| v.is_finite()));
        assert_eq!(k.entity_weights.data(), &[1.0]);
    }

    #[test]
    fn attention_rows_match_softmax_recomputation() {
        let backend = TextBackend::toy(3, DIMS.d_ctx);
        let params = init_params(DIMS, 1);
        let frame = chatting();
        let mut tape = Tape::new();
        let defn = backend.encode(&mut tape, &params, &frame.definition);
        let lus: Vec<Var> = frame
            .lexical_unit_tokens()
            .iter()
            .map(|lu| {
                let c = backend.encode(&mut tape, &params, lu);
                tape.mean_rows(c)
            })
            .collect();
        let lexical = tape.concat_rows(&lus);
        let att = attention(&mut tape, &params, "knowledge.lex_attn", lexical, defn);

        // Recompute q k^T / sqrt(d) and the softmax by hand.
        let q = tape.value(lexical).matmul(&params["knowledge.lex_attn.wq"]);
        let k = tape.value(defn).matmul(&params["knowledge.lex_attn.wk"]);
        let weights = tape.value(att.weights);
        for i in 0..q.rows() {
            let scores: Vec<f64> = (0..k.rows())
                .map(|j| crate::tensor::dot(q.row(i), k.row(j)) / (DIMS.d as f64).sqrt())
                .collect();
            let expected = softmax_oracle(&scores);
            for (w, e) in weights.row(i).iter().zip(&expected) {
                assert!((w - e).abs() < 1e-12);
            }
            assert!((weights.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let full = encode_knowledge(&frame, &backend, &params, DIMS).unwrap();
        assert_eq!(&full.lexical_weights, weights);
        for i in 0..full.entity_weights.rows() {
            assert!((full.entity_weights.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn single_token_trigger_attends_with_weight_one() {
        let backend = TextBackend::toy(3, DIMS.d_ctx);
        let params = init_params(DIMS, 1);
        let s = encode_sample(&mention("talked", (0, 1)), &backend, &params, DIMS).unwrap();
        assert_eq!(s.weights, vec![1.0]);
        assert_eq!(s.vector.len(), DIMS.d);
    }

    #[test]
    fn sample_encoding_errors_on_bad_span() {
        let backend = TextBackend::toy(3, DIMS.d_ctx);
        let params = init_params(DIMS, 1);
        let err = encode_sample(&mention("a b", (1, 3)), &backend, &params, DIMS).unwrap_err();
        assert!(matches!(err, Error::SpanOutOfRange { .. }));
    }

    #[test]
    fn dimension_mismatch_detected() {
        let backend = TextBackend::toy(3, DIMS.d_ctx);
        let params = init_params(DIMS, 1);
        let wrong = Dims { d_ctx: 12, d: 9 };
        let err = encode_sample(&mention("a b", (0, 1)), &backend, &params, wrong).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { expected: 9, got: 8 }));
    }

    #[test]
    fn batch_errors_carry_index() {
        let backend = TextBackend::toy(3, DIMS.d_ctx);
        let params = init_params(DIMS, 1);
        let items = vec![mention("a b", (0, 1)), mention("a b", (0, 5))];
        let err = encode_batch(&items, |m| encode_sample(m, &backend, &params, DIMS)).unwrap_err();
        assert!(matches!(err, Error::Batch { index: 1, .. }));
        let empty: Vec<EventMention> = Vec::new();
        assert!(encode_batch(&empty, |m| encode_sample(m, &backend, &params, DIMS)).unwrap().is_empty());
    }

    #[test]
    fn pretrained_table_backend() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vectors.txt");
        std::fs::write(&path, "chat 1 0 0\ntalk 0 1 0\n").unwrap();
        let backend = TextBackend::pretrained(1, &path).unwrap();
        assert_eq!(backend.d_ctx(), 3);
        assert_eq!(backend.token_vector("Chat"), vec![1.0, 0.0, 0.0]);
        let unknown = backend.token_vector("zzz");
        assert_eq!(unknown.len(), 3);
        std::fs::write(&path, "chat 1 0 0\ntalk 0 1\n").unwrap();
        assert!(TextBackend::pretrained(1, &path).is_err());
    }
}
