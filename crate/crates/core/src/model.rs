//! The DHL goal-planning network.
//!
//! Each goal level (type, entity, optional attribute) has its own embedding
//! table, LSTM encoder, and output head. High-level information reaches
//! low-level predictions twice: through adjacency logit fusion, which adds
//! `softmax(high logits) · C` to the low-level logits, and through symmetric
//! type↔entity cross attention, whose distilled vector is concatenated to the
//! hidden state before the head. Training targets are soft labels that shift
//! probability mass toward the dialog's final recommendation goal as the
//! conversation unrolls.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{AdjacencyMatrix, TrainingInstance, DEFAULT_EPSILON};
use crate::tensor::{Tape, Tensor, TensorError};

pub const LEVEL_NAMES: [&str; 3] = ["type", "entity", "attribute"];

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("attention requires a non-empty prefix")]
    EmptyPrefix,
    #[error("goal id {id} out of range for vocabulary of size {n}")]
    IdOutOfRange { id: usize, n: usize },
    #[error("instance has {got} levels but the model expects {expected}")]
    LevelMismatch { got: usize, expected: usize },
}

/// Network hyperparameters and ablation switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// 2 for type+entity corpora, 3 when attributes are present.
    pub levels: usize,
    pub vocab_sizes: Vec<usize>,
    /// Hierarchical representation learning: cross attention and logit fusion.
    pub use_cross_attention: bool,
    /// Learned hierarchical loss weights (ω); when false, ω ≡ 1.
    pub use_hier_weights: bool,
    /// Soft labels toward the final goal; when false, targets are one-hot.
    pub use_soft_label: bool,
    /// Base soft-label strength s₀.
    pub soft_s0: f64,
    /// Adjacency value for unseen goal pairs.
    pub epsilon: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 256,
            hidden_dim: 256,
            levels: 2,
            vocab_sizes: Vec::new(),
            use_cross_attention: true,
            use_hier_weights: true,
            use_soft_label: true,
            soft_s0: 0.02,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.embed_dim == 0 || self.hidden_dim == 0 {
            return fail(format!(
                "embed_dim and hidden_dim must be positive, got {} and {}",
                self.embed_dim, self.hidden_dim
            ));
        }
        if self.levels != 2 && self.levels != 3 {
            return fail(format!("levels must be 2 or 3, got {}", self.levels));
        }
        if self.vocab_sizes.len() != self.levels {
            return fail(format!(
                "expected {} vocab sizes, got {:?}",
                self.levels, self.vocab_sizes
            ));
        }
        if self.vocab_sizes[0] < 2 || self.vocab_sizes[1] < 2 {
            return fail(format!(
                "type and entity vocabularies need at least 2 goals, got {:?}",
                self.vocab_sizes
            ));
        }
        if self.levels == 3 && self.vocab_sizes[2] == 0 {
            return fail("attribute vocabulary is empty".into());
        }
        if !(0.0..1.0).contains(&self.soft_s0) {
            return fail(format!("soft_s0 must be in [0, 1), got {}", self.soft_s0));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.1) {
            return fail(format!("epsilon must be in (0, 0.1), got {}", self.epsilon));
        }
        if self.use_cross_attention && self.embed_dim != self.hidden_dim {
            // the query is an LSTM hidden state and the keys are projected
            // embeddings; their dot product requires matching widths
            return fail(format!(
                "cross attention requires embed_dim == hidden_dim, got {} and {}",
                self.embed_dim, self.hidden_dim
            ));
        }
        Ok(())
    }

    /// Head input width for one level: the hidden state, plus the distilled
    /// attention vector for type and entity levels when attention is on.
    pub fn head_input_dim(&self, level: usize) -> usize {
        if self.use_cross_attention && level < 2 {
            self.hidden_dim + self.embed_dim
        } else {
            self.hidden_dim
        }
    }
}

#[derive(Debug, Clone)]
pub struct LstmParams {
    pub w_input: Tensor,
    pub w_forget: Tensor,
    pub w_cell: Tensor,
    pub w_output: Tensor,
    pub b_input: Tensor,
    pub b_forget: Tensor,
    pub b_cell: Tensor,
    pub b_output: Tensor,
}

#[derive(Debug, Clone)]
pub struct HeadParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Debug, Clone)]
pub struct LevelParams {
    pub embedding: Tensor,
    pub lstm: LstmParams,
    pub head: HeadParams,
}

/// Key/value projections for the two symmetric attention directions. The
/// "entity" pair projects entity embeddings (keys/values for the type query);
/// the "type" pair projects type embeddings (for the entity query).
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub entity_key: Tensor,
    pub entity_value: Tensor,
    pub type_key: Tensor,
    pub type_value: Tensor,
}

/// All learnable arrays of the DHL network.
#[derive(Debug, Clone)]
pub struct DhlModelParams {
    pub levels: Vec<LevelParams>,
    pub attention: Option<AttentionParams>,
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-limit..limit))
        .collect();
    Tensor::from_vec(rows, cols, data)
}

impl DhlModelParams {
    /// Seeded initialization: Xavier-uniform matrices, zero biases, and a
    /// forget-gate bias of 1.0.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, h) = (config.embed_dim, config.hidden_dim);
        let gate_in = d + h;

        let mut levels = Vec::with_capacity(config.levels);
        for level in 0..config.levels {
            let n = config.vocab_sizes[level];
            let head_in = config.head_input_dim(level);
            levels.push(LevelParams {
                embedding: xavier(&mut rng, n, d),
                lstm: LstmParams {
                    w_input: xavier(&mut rng, gate_in, h),
                    w_forget: xavier(&mut rng, gate_in, h),
                    w_cell: xavier(&mut rng, gate_in, h),
                    w_output: xavier(&mut rng, gate_in, h),
                    b_input: Tensor::zeros(1, h),
                    b_forget: Tensor::from_vec(1, h, vec![1.0; h]),
                    b_cell: Tensor::zeros(1, h),
                    b_output: Tensor::zeros(1, h),
                },
                head: HeadParams {
                    w1: xavier(&mut rng, head_in, h),
                    b1: Tensor::zeros(1, h),
                    w2: xavier(&mut rng, h, n),
                    b2: Tensor::zeros(1, n),
                },
            });
        }

        let attention = config.use_cross_attention.then(|| AttentionParams {
            entity_key: xavier(&mut rng, d, d),
            entity_value: xavier(&mut rng, d, d),
            type_key: xavier(&mut rng, d, d),
            type_value: xavier(&mut rng, d, d),
        });

        Ok(DhlModelParams { levels, attention })
    }

    /// Every tensor with its canonical name, in a fixed order. The order is
    /// the contract shared by the optimizer, checkpoints, and gradient checks.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, lp) in self.levels.iter().enumerate() {
            let ln = LEVEL_NAMES[i];
            out.push((format!("{ln}.embedding"), &lp.embedding));
            out.push((format!("{ln}.lstm.w_input"), &lp.lstm.w_input));
            out.push((format!("{ln}.lstm.w_forget"), &lp.lstm.w_forget));
            out.push((format!("{ln}.lstm.w_cell"), &lp.lstm.w_cell));
            out.push((format!("{ln}.lstm.w_output"), &lp.lstm.w_output));
            out.push((format!("{ln}.lstm.b_input"), &lp.lstm.b_input));
            out.push((format!("{ln}.lstm.b_forget"), &lp.lstm.b_forget));
            out.push((format!("{ln}.lstm.b_cell"), &lp.lstm.b_cell));
            out.push((format!("{ln}.lstm.b_output"), &lp.lstm.b_output));
            out.push((format!("{ln}.head.w1"), &lp.head.w1));
            out.push((format!("{ln}.head.b1"), &lp.head.b1));
            out.push((format!("{ln}.head.w2"), &lp.head.w2));
            out.push((format!("{ln}.head.b2"), &lp.head.b2));
        }
        if let Some(att) = &self.attention {
            out.push(("attention.entity_key".into(), &att.entity_key));
            out.push(("attention.entity_value".into(), &att.entity_value));
            out.push(("attention.type_key".into(), &att.type_key));
            out.push(("attention.type_value".into(), &att.type_value));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, lp) in self.levels.iter_mut().enumerate() {
            let ln = LEVEL_NAMES[i];
            out.push((format!("{ln}.embedding"), &mut lp.embedding));
            out.push((format!("{ln}.lstm.w_input"), &mut lp.lstm.w_input));
            out.push((format!("{ln}.lstm.w_forget"), &mut lp.lstm.w_forget));
            out.push((format!("{ln}.lstm.w_cell"), &mut lp.lstm.w_cell));
            out.push((format!("{ln}.lstm.w_output"), &mut lp.lstm.w_output));
            out.push((format!("{ln}.lstm.b_input"), &mut lp.lstm.b_input));
            out.push((format!("{ln}.lstm.b_forget"), &mut lp.lstm.b_forget));
            out.push((format!("{ln}.lstm.b_cell"), &mut lp.lstm.b_cell));
            out.push((format!("{ln}.lstm.b_output"), &mut lp.lstm.b_output));
            out.push((format!("{ln}.head.w1"), &mut lp.head.w1));
            out.push((format!("{ln}.head.b1"), &mut lp.head.b1));
            out.push((format!("{ln}.head.w2"), &mut lp.head.w2));
            out.push((format!("{ln}.head.b2"), &mut lp.head.b2));
        }
        if let Some(att) = &mut self.attention {
            out.push(("attention.entity_key".into(), &mut att.entity_key));
            out.push(("attention.entity_value".into(), &mut att.entity_value));
            out.push(("attention.type_key".into(), &mut att.type_key));
            out.push(("attention.type_value".into(), &mut att.type_value));
        }
        out
    }

    /// Tensor names and shapes implied by a config, for checkpoint validation.
    pub fn expected_shapes(config: &ModelConfig) -> Vec<(String, (usize, usize))> {
        let (d, h) = (config.embed_dim, config.hidden_dim);
        let gate_in = d + h;
        let mut out = Vec::new();
        for level in 0..config.levels {
            let ln = LEVEL_NAMES[level];
            let n = config.vocab_sizes[level];
            let head_in = config.head_input_dim(level);
            out.push((format!("{ln}.embedding"), (n, d)));
            for gate in ["w_input", "w_forget", "w_cell", "w_output"] {
                out.push((format!("{ln}.lstm.{gate}"), (gate_in, h)));
            }
            for gate in ["b_input", "b_forget", "b_cell", "b_output"] {
                out.push((format!("{ln}.lstm.{gate}"), (1, h)));
            }
            out.push((format!("{ln}.head.w1"), (head_in, h)));
            out.push((format!("{ln}.head.b1"), (1, h)));
            out.push((format!("{ln}.head.w2"), (h, n)));
            out.push((format!("{ln}.head.b2"), (1, n)));
        }
        if config.use_cross_attention {
            for name in ["entity_key", "entity_value", "type_key", "type_value"] {
                out.push((format!("attention.{name}"), (d, d)));
            }
        }
        out
    }

    /// Copy with every tensor recorded as a leaf on `tape`.
    pub fn stage(&self, tape: &mut Tape) -> Result<DhlModelParams, ModelError> {
        let mut staged = self.clone();
        for (_, t) in staged.named_tensors_mut() {
            *t = tape.leaf(t.detached())?;
        }
        Ok(staged)
    }
}

/// Per-instance forward artifacts: hidden states, attention weight rows, and
/// pre-/post-fusion logits. Logit tensors stay bound to the tape so losses can
/// be built from them.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Final LSTM hidden state per level.
    pub hidden: Vec<Tensor>,
    /// Attention row (1×t) of the type-query-over-entity-keys direction.
    pub type2entity: Option<Tensor>,
    /// Attention row of the entity-query-over-type-keys direction.
    pub entity2type: Option<Tensor>,
    pub pre_logits: Vec<Tensor>,
    pub post_logits: Vec<Tensor>,
}

/// Standard LSTM recurrence with zero initial hidden and cell state.
/// Returns every hidden state and the final one.
pub fn lstm_encode(
    tape: &mut Tape,
    inputs: &[Tensor],
    lstm: &LstmParams,
) -> Result<(Vec<Tensor>, Tensor), ModelError> {
    if inputs.is_empty() {
        return Err(ModelError::EmptyPrefix);
    }
    let hidden_dim = lstm.w_input.cols();
    let mut h = tape.leaf(Tensor::zeros(1, hidden_dim))?;
    let mut c = tape.leaf(Tensor::zeros(1, hidden_dim))?;
    let mut states = Vec::with_capacity(inputs.len());
    for x in inputs {
        let z = tape.concat_cols(x, &h)?;
        let gate = |tape: &mut Tape, w: &Tensor, b: &Tensor| -> Result<Tensor, TensorError> {
            let a = tape.matmul(&z, w)?;
            tape.add(&a, b)
        };
        let i = {
            let a = gate(tape, &lstm.w_input, &lstm.b_input)?;
            tape.sigmoid(&a)?
        };
        let f = {
            let a = gate(tape, &lstm.w_forget, &lstm.b_forget)?;
            tape.sigmoid(&a)?
        };
        let g = {
            let a = gate(tape, &lstm.w_cell, &lstm.b_cell)?;
            tape.tanh(&a)?
        };
        let o = {
            let a = gate(tape, &lstm.w_output, &lstm.b_output)?;
            tape.sigmoid(&a)?
        };
        let fc = tape.mul(&f, &c)?;
        let ig = tape.mul(&i, &g)?;
        c = tape.add(&fc, &ig)?;
        let tc = tape.tanh(&c)?;
        h = tape.mul(&o, &tc)?;
        states.push(h.clone());
    }
    let last = states.last().unwrap().clone();
    Ok((states, last))
}

/// Exponential-kernel attention: the query is one level's final hidden state,
/// keys and values are projections of the peer level's embedding prefix.
/// Returns the distilled vector and the 1×t weight row.
pub fn cross_attention(
    tape: &mut Tape,
    query: &Tensor,
    peer_embeddings: &Tensor,
    key_proj: &Tensor,
    value_proj: &Tensor,
) -> Result<(Tensor, Tensor), ModelError> {
    if peer_embeddings.rows() == 0 {
        return Err(ModelError::EmptyPrefix);
    }
    let keys = tape.matmul(peer_embeddings, key_proj)?;
    let values = tape.matmul(peer_embeddings, value_proj)?;
    let keys_t = tape.transpose(&keys)?;
    let scores = tape.matmul(query, &keys_t)?;
    let scaled = tape.scale(&scores, 1.0 / (key_proj.cols() as f64).sqrt())?;
    let weights = tape.softmax_rows(&scaled)?;
    let distilled = tape.matmul(&weights, &values)?;
    Ok((distilled, weights))
}

/// Add `softmax(high logits) · C` to the low-level logits.
pub fn fuse_logits(
    tape: &mut Tape,
    low_logits: &Tensor,
    high_logits: &Tensor,
    adjacency: &Tensor,
) -> Result<Tensor, ModelError> {
    let probs = tape.softmax_rows(high_logits)?;
    let contribution = tape.matmul(&probs, adjacency)?;
    Ok(tape.add(low_logits, &contribution)?)
}

/// Soft next-goal target: mass 1−s_p on the true next goal and
/// s_p = s₀·min(L/10, 1) on the final goal. Collapses to one-hot when the
/// target is the final goal or s₀ = 0.
pub fn soft_label(
    target_id: usize,
    final_goal_id: usize,
    vocab_size: usize,
    prefix_len: usize,
    s0: f64,
) -> Result<Tensor, ModelError> {
    for id in [target_id, final_goal_id] {
        if id >= vocab_size {
            return Err(ModelError::IdOutOfRange {
                id,
                n: vocab_size,
            });
        }
    }
    let mut data = vec![0.0; vocab_size];
    if target_id == final_goal_id {
        data[target_id] = 1.0;
    } else {
        let s_p = s0 * (prefix_len as f64 / 10.0).min(1.0);
        data[target_id] = 1.0 - s_p;
        data[final_goal_id] = s_p;
    }
    Ok(Tensor::row(data))
}

/// Model tensors recorded once on a tape, shared across a batch of instances.
pub struct StagedModel {
    pub params: DhlModelParams,
    pub adjacency: Vec<Tensor>,
}

pub fn stage_model(
    tape: &mut Tape,
    params: &DhlModelParams,
    adjacency: &[AdjacencyMatrix],
) -> Result<StagedModel, ModelError> {
    let staged_adj = adjacency
        .iter()
        .map(|a| tape.leaf(a.values().detached()))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(StagedModel {
        params: params.stage(tape)?,
        adjacency: staged_adj,
    })
}

/// Run the network over one instance's per-level prefixes.
pub fn forward_staged(
    tape: &mut Tape,
    staged: &StagedModel,
    config: &ModelConfig,
    prefixes: &[Vec<usize>],
) -> Result<ForwardTrace, ModelError> {
    if prefixes.len() != config.levels {
        return Err(ModelError::LevelMismatch {
            got: prefixes.len(),
            expected: config.levels,
        });
    }
    let params = &staged.params;

    // per-level encoder pass
    let mut hidden = Vec::with_capacity(config.levels);
    let mut prefix_embeds = Vec::with_capacity(config.levels);
    for (level, prefix) in prefixes.iter().enumerate() {
        if prefix.is_empty() {
            return Err(ModelError::EmptyPrefix);
        }
        let lp = &params.levels[level];
        let embeds = prefix
            .iter()
            .map(|&id| tape.select_rows(&lp.embedding, &[id]))
            .collect::<Result<Vec<_>, _>>()?;
        let (_, h_t) = lstm_encode(tape, &embeds, &lp.lstm)?;
        hidden.push(h_t);
        // the attention directions consume the raw embedding prefix
        prefix_embeds.push(if level < 2 && config.use_cross_attention {
            Some(tape.select_rows(&lp.embedding, prefix)?)
        } else {
            None
        });
    }

    // symmetric type<->entity cross attention
    let mut head_inputs: Vec<Tensor> = hidden.clone();
    let (mut type2entity, mut entity2type) = (None, None);
    if config.use_cross_attention {
        let att = params
            .attention
            .as_ref()
            .expect("attention parameters missing with use_cross_attention");
        let (h_pe, w_t2e) = cross_attention(
            tape,
            &hidden[0],
            prefix_embeds[1].as_ref().unwrap(),
            &att.entity_key,
            &att.entity_value,
        )?;
        let (h_ep, w_e2t) = cross_attention(
            tape,
            &hidden[1],
            prefix_embeds[0].as_ref().unwrap(),
            &att.type_key,
            &att.type_value,
        )?;
        head_inputs[0] = tape.concat_cols(&hidden[0], &h_ep)?;
        head_inputs[1] = tape.concat_cols(&hidden[1], &h_pe)?;
        type2entity = Some(w_t2e);
        entity2type = Some(w_e2t);
    }

    // output heads
    let mut pre_logits = Vec::with_capacity(config.levels);
    for level in 0..config.levels {
        let head = &params.levels[level].head;
        let a = tape.matmul(&head_inputs[level], &head.w1)?;
        let a = tape.add(&a, &head.b1)?;
        let a = tape.tanh(&a)?;
        let l = tape.matmul(&a, &head.w2)?;
        pre_logits.push(tape.add(&l, &head.b2)?);
    }

    // hierarchical logit fusion, high to low, consuming fused values in order
    let post_logits = if config.use_cross_attention {
        let mut post = vec![pre_logits[0].clone()];
        let fused_entity = fuse_logits(tape, &pre_logits[1], &post[0], &staged.adjacency[0])?;
        post.push(fused_entity);
        if config.levels == 3 {
            let fused_attr = fuse_logits(tape, &pre_logits[2], &post[1], &staged.adjacency[1])?;
            post.push(fused_attr);
        }
        post
    } else {
        pre_logits.clone()
    };

    Ok(ForwardTrace {
        hidden,
        type2entity,
        entity2type,
        pre_logits,
        post_logits,
    })
}

/// Stage parameters and adjacency on the tape, then run one instance.
pub fn forward(
    tape: &mut Tape,
    params: &DhlModelParams,
    config: &ModelConfig,
    adjacency: &[AdjacencyMatrix],
    instance: &TrainingInstance,
) -> Result<ForwardTrace, ModelError> {
    let staged = stage_model(tape, params, adjacency)?;
    forward_staged(tape, &staged, config, &instance.prefixes)
}

/// Cross entropy between the post-fusion probabilities and the (soft) target
/// for one level.
pub fn level_loss(
    tape: &mut Tape,
    trace: &ForwardTrace,
    instance: &TrainingInstance,
    level: usize,
    config: &ModelConfig,
) -> Result<Tensor, ModelError> {
    let s0 = if config.use_soft_label {
        config.soft_s0
    } else {
        0.0
    };
    let target = soft_label(
        instance.targets[level],
        instance.finals[level],
        config.vocab_sizes[level],
        instance.prefix_len,
        s0,
    )?;
    let probs = tape.softmax_rows(&trace.post_logits[level])?;
    Ok(tape.cross_entropy(&probs, &target)?)
}

/// All per-level losses for one instance.
pub fn level_losses(
    tape: &mut Tape,
    trace: &ForwardTrace,
    instance: &TrainingInstance,
    config: &ModelConfig,
) -> Result<Vec<Tensor>, ModelError> {
    (0..config.levels)
        .map(|level| level_loss(tape, trace, instance, level, config))
        .collect()
}

/// Next-goal prediction: argmax of the post-fusion logits, ties toward the
/// smallest id.
pub fn predict_next(trace: &ForwardTrace, level: usize) -> usize {
    trace.post_logits[level].argmax()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_adjacency;
    use crate::data::DialogRecord;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            embed_dim: 4,
            hidden_dim: 4,
            levels: 3,
            vocab_sizes: vec![3, 5, 4],
            ..ModelConfig::default()
        }
    }

    fn tiny_adjacency(config: &ModelConfig) -> Vec<AdjacencyMatrix> {
        let rec = DialogRecord {
            dialog_id: "d".into(),
            type_seq: vec![0, 1, 2],
            entity_seq: vec![0, 2, 4],
            attribute_seq: Some(vec![0, 1, 3]),
            final_goal: vec![2, 4, 3],
        };
        vec![
            build_adjacency(&[rec.clone()], 0, 1, config.vocab_sizes[0], config.vocab_sizes[1], config.epsilon).unwrap(),
            build_adjacency(&[rec], 1, 2, config.vocab_sizes[1], config.vocab_sizes[2], config.epsilon).unwrap(),
        ]
    }

    fn tiny_instance() -> TrainingInstance {
        TrainingInstance {
            prefix_len: 2,
            prefixes: vec![vec![0, 1], vec![0, 2], vec![0, 1]],
            targets: vec![2, 4, 3],
            finals: vec![2, 4, 3],
        }
    }

    #[test]
    fn zero_lstm_gives_zero_hidden_state() {
        let h = 4;
        let lstm = LstmParams {
            w_input: Tensor::zeros(8, h),
            w_forget: Tensor::zeros(8, h),
            w_cell: Tensor::zeros(8, h),
            w_output: Tensor::zeros(8, h),
            b_input: Tensor::zeros(1, h),
            b_forget: Tensor::zeros(1, h),
            b_cell: Tensor::zeros(1, h),
            b_output: Tensor::zeros(1, h),
        };
        let mut tape = Tape::new();
        let inputs = vec![Tensor::zeros(1, 4), Tensor::zeros(1, 4)];
        let (_, h_t) = lstm_encode(&mut tape, &inputs, &lstm).unwrap();
        assert!(h_t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn length_one_sequence_returns_first_state() {
        let config = tiny_config();
        let params = DhlModelParams::init(&config, 5).unwrap();
        let mut tape = Tape::new();
        let x = vec![Tensor::row(vec![0.3, -0.2, 0.5, 0.1])];
        let (states, h_t) = lstm_encode(&mut tape, &x, &params.levels[0].lstm).unwrap();
        assert_eq!(states.len(), 1);
        assert_eq!(states[0].data(), h_t.data());
    }

    #[test]
    fn single_key_attention_is_identity_weight() {
        let mut tape = Tape::new();
        let q = Tensor::row(vec![0.5, -0.3]);
        let peer = Tensor::from_rows(&[vec![0.2, 0.9]]);
        let proj = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let (out, w) = cross_attention(&mut tape, &q, &peer, &proj, &proj).unwrap();
        assert_eq!(w.data(), &[1.0]);
        assert_eq!(out.data(), peer.data());
    }

    #[test]
    fn identical_keys_average_the_values() {
        let mut tape = Tape::new();
        let q = Tensor::row(vec![1.0, 2.0]);
        let peer = Tensor::from_rows(&[vec![0.7, 0.1], vec![0.7, 0.1], vec![0.7, 0.1]]);
        let key_proj = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let mut value_proj = Tensor::zeros(2, 2);
        value_proj.data_mut().copy_from_slice(&[2.0, 0.0, 0.0, 2.0]);
        let (out, w) = cross_attention(&mut tape, &q, &peer, &key_proj, &value_proj).unwrap();
        for &v in w.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        assert!((out.data()[0] - 1.4).abs() < 1e-12);
        assert!((out.data()[1] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let t = rng.gen_range(1..6);
            let mut tape = Tape::new();
            let q = Tensor::row((0..4).map(|_| rng.gen_range(-3.0..3.0)).collect());
            let peer = Tensor::from_vec(
                t,
                4,
                (0..t * 4).map(|_| rng.gen_range(-3.0..3.0)).collect(),
            );
            let proj = xavier(&mut rng, 4, 4);
            let (_, w) = cross_attention(&mut tape, &q, &peer, &proj, &proj).unwrap();
            let sum: f64 = w.data().iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(w.data().iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn fusion_adds_probability_weighted_rows() {
        let mut tape = Tape::new();
        let low = Tensor::row(vec![0.1, 0.2, 0.3]);
        let high = Tensor::row(vec![1.0, -2.0]);

        let ones = Tensor::from_vec(2, 3, vec![1.0; 6]);
        let fused = fuse_logits(&mut tape, &low, &high, &ones).unwrap();
        for (f, l) in fused.data().iter().zip(low.data()) {
            assert!((f - l - 1.0).abs() < 1e-12);
        }

        let eps = Tensor::from_vec(2, 3, vec![1e-3; 6]);
        let fused = fuse_logits(&mut tape, &low, &high, &eps).unwrap();
        for (f, l) in fused.data().iter().zip(low.data()) {
            assert!((f - l - 1e-3).abs() < 1e-12);
        }
    }

    #[test]
    fn one_hot_high_probs_select_an_adjacency_row() {
        let mut tape = Tape::new();
        let low = Tensor::row(vec![0.0, 0.0, 0.0]);
        // logits so extreme the softmax is numerically one-hot on row 0
        let high = Tensor::row(vec![200.0, -200.0]);
        let adj = Tensor::from_vec(2, 3, vec![1.0, 1e-3, 1e-3, 1.0, 1.0, 1.0]);
        let fused = fuse_logits(&mut tape, &low, &high, &adj).unwrap();
        assert!((fused.data()[0] - 1.0).abs() < 1e-9);
        assert!((fused.data()[1] - 1e-3).abs() < 1e-9);
        assert!((fused.data()[2] - 1e-3).abs() < 1e-9);
    }

    #[test]
    fn soft_label_arithmetic() {
        let l = soft_label(1, 3, 4, 5, 0.02).unwrap();
        assert_eq!(l.data(), &[0.0, 0.99, 0.0, 0.01]);

        // cap at L = 10
        let l = soft_label(1, 3, 4, 20, 0.02).unwrap();
        assert_eq!(l.data()[3], 0.02);

        // mass collapses when target == final
        let l = soft_label(2, 2, 4, 20, 0.02).unwrap();
        assert_eq!(l.data(), &[0.0, 0.0, 1.0, 0.0]);

        assert!(soft_label(4, 0, 4, 1, 0.02).is_err());
    }

    #[test]
    fn soft_label_is_a_distribution() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let n = rng.gen_range(2..30);
            let target = rng.gen_range(0..n);
            let final_goal = rng.gen_range(0..n);
            let len = rng.gen_range(1..25);
            let s0 = rng.gen_range(0.0..0.99);
            let l = soft_label(target, final_goal, n, len, s0).unwrap();
            let sum: f64 = l.data().iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(l.data().iter().all(|&v| v >= 0.0));
            assert!(l.data().iter().filter(|&&v| v != 0.0).count() <= 2);
        }
    }

    #[test]
    fn head_width_depends_on_attention() {
        let mut config = tiny_config();
        assert_eq!(config.head_input_dim(0), 8);
        assert_eq!(config.head_input_dim(2), 4);
        config.use_cross_attention = false;
        assert_eq!(config.head_input_dim(0), 4);

        let with_att = DhlModelParams::init(&tiny_config(), 0).unwrap();
        assert_eq!(with_att.levels[1].head.w1.shape(), (8, 4));
        let without = DhlModelParams::init(&config, 0).unwrap();
        assert_eq!(without.levels[1].head.w1.shape(), (4, 4));
    }

    #[test]
    fn two_level_trace_has_no_attribute_logits() {
        let config = ModelConfig {
            embed_dim: 4,
            hidden_dim: 4,
            levels: 2,
            vocab_sizes: vec![3, 5],
            ..ModelConfig::default()
        };
        let params = DhlModelParams::init(&config, 1).unwrap();
        let adj = tiny_adjacency(&tiny_config());
        let instance = TrainingInstance {
            prefix_len: 2,
            prefixes: vec![vec![0, 1], vec![0, 2]],
            targets: vec![2, 4],
            finals: vec![2, 4],
        };
        let mut tape = Tape::new();
        let trace = forward(&mut tape, &params, &config, &adj[..1], &instance).unwrap();
        assert_eq!(trace.post_logits.len(), 2);
        assert_eq!(trace.post_logits[1].cols(), 5);
    }

    #[test]
    fn instance_level_mismatch_is_rejected() {
        let config = tiny_config();
        let params = DhlModelParams::init(&config, 1).unwrap();
        let adj = tiny_adjacency(&config);
        let mut instance = tiny_instance();
        instance.prefixes.pop();
        let mut tape = Tape::new();
        assert!(matches!(
            forward(&mut tape, &params, &config, &adj, &instance),
            Err(ModelError::LevelMismatch { .. })
        ));
    }

    #[test]
    fn uniform_logits_give_log_vocab_loss() {
        // zeroed heads produce uniform probabilities, so CE = ln N
        let config = ModelConfig {
            use_soft_label: false,
            ..tiny_config()
        };
        let mut params = DhlModelParams::init(&config, 1).unwrap();
        for lp in &mut params.levels {
            for t in [&mut lp.head.w1, &mut lp.head.b1, &mut lp.head.w2, &mut lp.head.b2] {
                t.data_mut().fill(0.0);
            }
        }
        // kill fusion contributions by using a config without attention
        let config = ModelConfig {
            use_cross_attention: false,
            ..config
        };
        let mut params2 = DhlModelParams::init(&config, 1).unwrap();
        for (lp, src) in params2.levels.iter_mut().zip(&params.levels) {
            lp.embedding = src.embedding.detached();
            lp.lstm = src.lstm.clone();
            for t in [&mut lp.head.w1, &mut lp.head.b1, &mut lp.head.w2, &mut lp.head.b2] {
                t.data_mut().fill(0.0);
            }
        }
        let adj = tiny_adjacency(&config);
        let instance = tiny_instance();
        let mut tape = Tape::new();
        let trace = forward(&mut tape, &params2, &config, &adj, &instance).unwrap();
        let loss = level_loss(&mut tape, &trace, &instance, 1, &config).unwrap();
        assert!((loss.item() - (5f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_s0_reduces_to_one_hot_loss() {
        let config_soft = ModelConfig {
            soft_s0: 0.0,
            ..tiny_config()
        };
        let config_onehot = ModelConfig {
            use_soft_label: false,
            ..tiny_config()
        };
        let params = DhlModelParams::init(&config_soft, 3).unwrap();
        let adj = tiny_adjacency(&config_soft);
        let mut instance = tiny_instance();
        instance.targets = vec![1, 1, 1]; // differ from finals so soft mass would show

        let run = |config: &ModelConfig| {
            let mut tape = Tape::new();
            let trace = forward(&mut tape, &params, config, &adj, &instance).unwrap();
            level_losses(&mut tape, &trace, &instance, config)
                .unwrap()
                .iter()
                .map(|l| l.item().to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(&config_soft), run(&config_onehot));
    }

    #[test]
    fn prediction_breaks_ties_toward_smallest_id() {
        let trace = ForwardTrace {
            hidden: vec![],
            type2entity: None,
            entity2type: None,
            pre_logits: vec![],
            post_logits: vec![
                Tensor::row(vec![0.1, 0.9, 0.3]),
                Tensor::row(vec![0.5, 0.5]),
                Tensor::row(vec![0.0, 0.0, 0.0]),
            ],
        };
        assert_eq!(predict_next(&trace, 0), 1);
        assert_eq!(predict_next(&trace, 1), 0);
        assert_eq!(predict_next(&trace, 2), 0);
    }

    #[test]
    fn fused_argmax_is_invariant_to_high_logit_shifts() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let low = Tensor::row((0..6).map(|_| rng.gen_range(-2.0..2.0)).collect());
            let high = Tensor::row((0..4).map(|_| rng.gen_range(-2.0..2.0)).collect());
            let adj = Tensor::from_vec(
                4,
                6,
                (0..24)
                    .map(|_| if rng.gen_bool(0.3) { 1.0 } else { 1e-3 })
                    .collect(),
            );
            let shift = rng.gen_range(-5.0..5.0);
            let shifted =
                Tensor::row(high.data().iter().map(|v| v + shift).collect());

            let mut tape = Tape::new();
            let a = fuse_logits(&mut tape, &low, &high, &adj).unwrap();
            let b = fuse_logits(&mut tape, &low, &shifted, &adj).unwrap();
            assert_eq!(a.argmax(), b.argmax());
        }
    }

    #[test]
    fn fusion_deltas_stay_within_epsilon_and_one() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let eps = 1e-3;
        for _ in 0..100 {
            let low = Tensor::row((0..5).map(|_| rng.gen_range(-2.0..2.0)).collect());
            let high = Tensor::row((0..3).map(|_| rng.gen_range(-2.0..2.0)).collect());
            let adj = Tensor::from_vec(
                3,
                5,
                (0..15)
                    .map(|_| if rng.gen_bool(0.5) { 1.0 } else { eps })
                    .collect(),
            );
            let mut tape = Tape::new();
            let fused = fuse_logits(&mut tape, &low, &high, &adj).unwrap();
            for (f, l) in fused.data().iter().zip(low.data()) {
                let delta = f - l;
                assert!(delta >= eps - 1e-12 && delta <= 1.0 + 1e-12, "delta {delta}");
            }
        }
    }
}
