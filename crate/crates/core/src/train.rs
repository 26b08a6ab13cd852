//! Optimization: Adam with cosine learning-rate decay, the hierarchical
//! weight network ω, the one-step inner parameter update, and the outer
//! hypergradient update of the weight-net parameters.
//!
//! Per batch in bilevel mode: (a) an inner gradient-descent step produces
//! θ*(α) under the ω-weighted loss; (b) the weight net is updated with the
//! hypergradient of the unweighted outer loss through that step; (c) θ* is
//! discarded, ω is recomputed with the updated weight net, and the real Adam
//! step runs on the reweighted loss from the original θ. Joint mode instead
//! treats the weight net as an ordinary parameter of the weighted loss — the
//! configuration whose trivial all-weights-to-zero solution the bilevel
//! formulation exists to avoid. Fixed-weights mode pins ω ≡ 1.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{AdjacencyMatrix, TrainingInstance};
use crate::metrics::{self, Baseline, MetricsReport};
use crate::model::{self, DhlModelParams, ModelConfig, ModelError, StagedModel};
use crate::tensor::{Gradients, Tape, Tensor, TensorError};

/// Hidden width of the weight network.
pub const WEIGHTNET_HIDDEN: usize = 100;

/// Gradient norms below this make the hypergradient perturbation degenerate;
/// the hypergradient is defined as zero there.
pub const DEGENERATE_GRAD_NORM: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
    #[error("non-finite loss at epoch {epoch}, batch {batch}: level losses {losses:?}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        losses: Vec<f64>,
    },
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("training set is empty")]
    EmptyTrainSet,
}

/// The 1→100→1 MLP with tanh hidden activation and sigmoid output that maps a
/// scalar level loss to a hierarchical weight ω ∈ (0, 1).
#[derive(Debug, Clone)]
pub struct WeightNet {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl WeightNet {
    pub fn init(seed: u64) -> Self {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = WEIGHTNET_HIDDEN;
        let l1 = (6.0 / (1 + h) as f64).sqrt();
        let w1 = Tensor::from_vec(1, h, (0..h).map(|_| rng.gen_range(-l1..l1)).collect());
        let w2 = Tensor::from_vec(h, 1, (0..h).map(|_| rng.gen_range(-l1..l1)).collect());
        WeightNet {
            w1,
            b1: Tensor::zeros(1, h),
            w2,
            b2: Tensor::zeros(1, 1),
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("weightnet.w1".into(), &self.w1),
            ("weightnet.b1".into(), &self.b1),
            ("weightnet.w2".into(), &self.w2),
            ("weightnet.b2".into(), &self.b2),
        ]
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("weightnet.w1".into(), &mut self.w1),
            ("weightnet.b1".into(), &mut self.b1),
            ("weightnet.w2".into(), &mut self.w2),
            ("weightnet.b2".into(), &mut self.b2),
        ]
    }

    pub fn expected_shapes() -> Vec<(String, (usize, usize))> {
        let h = WEIGHTNET_HIDDEN;
        vec![
            ("weightnet.w1".into(), (1, h)),
            ("weightnet.b1".into(), (1, h)),
            ("weightnet.w2".into(), (h, 1)),
            ("weightnet.b2".into(), (1, 1)),
        ]
    }

    pub fn stage(&self, tape: &mut Tape) -> Result<WeightNet, TensorError> {
        Ok(WeightNet {
            w1: tape.leaf(self.w1.detached())?,
            b1: tape.leaf(self.b1.detached())?,
            w2: tape.leaf(self.w2.detached())?,
            b2: tape.leaf(self.b2.detached())?,
        })
    }

    /// Forward one column of loss values (B×1) through staged parameters,
    /// producing a B×1 column of weights on the tape.
    pub fn forward_column(&self, tape: &mut Tape, losses: &[f64]) -> Result<Tensor, TensorError> {
        let x = Tensor::from_vec(losses.len(), 1, losses.to_vec());
        let a = tape.matmul(&x, &self.w1)?;
        let a = tape.add(&a, &self.b1)?;
        let a = tape.tanh(&a)?;
        let o = tape.matmul(&a, &self.w2)?;
        let o = tape.add(&o, &self.b2)?;
        tape.sigmoid(&o)
    }
}

/// ω = sigmoid(W₂·tanh(W₁·loss + b₁) + b₂), tape-free. The loss value is a
/// plain scalar, so no gradient can flow from ω back into the model tape.
pub fn weight_forward(net: &WeightNet, loss_value: f64) -> f64 {
    let h = WEIGHTNET_HIDDEN;
    let mut pre = 0.0;
    for j in 0..h {
        let a = (loss_value * net.w1.data()[j] + net.b1.data()[j]).tanh();
        pre += a * net.w2.data()[j];
    }
    crate::tensor::sigmoid(pre + net.b2.data()[0])
}

/// Cosine decay: η₀ · ½(1 + cos(π·step/total)).
pub fn cosine_lr(step: usize, total_steps: usize, eta0: f64) -> f64 {
    if total_steps == 0 {
        return eta0;
    }
    debug_assert!(step <= total_steps);
    let progress = step as f64 / total_steps as f64;
    (eta0 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())).max(0.0)
}

/// Bias-corrected Adam moments for one parameter collection.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(shapes: &[(usize, usize)]) -> Self {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect(),
        }
    }

    pub fn for_params(params: &DhlModelParams) -> Self {
        let shapes: Vec<_> = params
            .named_tensors()
            .iter()
            .map(|(_, t)| t.shape())
            .collect();
        Self::new(&shapes)
    }

    pub fn for_weightnet(net: &WeightNet) -> Self {
        let shapes: Vec<_> = net.named_tensors().iter().map(|(_, t)| t.shape()).collect();
        Self::new(&shapes)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    /// Rebuild from checkpointed moments.
    pub fn from_parts(step: u64, m: Vec<Tensor>, v: Vec<Tensor>) -> Self {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step,
            m,
            v,
        }
    }

    /// One bias-corrected update over parallel parameter/gradient slices.
    /// A missing gradient contributes zero.
    pub fn apply(
        &mut self,
        params: &mut [(String, &mut Tensor)],
        grads: &[Option<Tensor>],
        lr: f64,
    ) -> Result<(), TrainError> {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(params.len(), grads.len());
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, (name, p)) in params.iter_mut().enumerate() {
            if p.shape() != self.m[i].shape() {
                return Err(TrainError::InvalidConfig(format!(
                    "optimizer state shape {:?} does not match parameter {} {:?}",
                    self.m[i].shape(),
                    name,
                    p.shape()
                )));
            }
            let zero;
            let g = match &grads[i] {
                Some(g) => g,
                None => {
                    zero = Tensor::zeros(p.rows(), p.cols());
                    &zero
                }
            };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let pd = p.data_mut();
            for j in 0..pd.len() {
                let gj = g.data()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                pd[j] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Training schedule and mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model_lr: f64,
    /// Outer learning rate η′ for the weight net in bilevel mode.
    pub weightnet_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub mode: TrainMode,
    /// One ω per instance instead of one per batch.
    pub per_instance_omega: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model_lr: 1e-3,
            weightnet_lr: 1e-5,
            epochs: 30,
            batch_size: 128,
            seed: 0,
            mode: TrainMode::Bilevel,
            per_instance_omega: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.model_lr <= 0.0 {
            return Err(TrainError::InvalidConfig(format!(
                "model_lr must be positive, got {}",
                self.model_lr
            )));
        }
        if self.weightnet_lr < 0.0 {
            return Err(TrainError::InvalidConfig(format!(
                "weightnet_lr must be non-negative, got {}",
                self.weightnet_lr
            )));
        }
        if self.epochs == 0 {
            return Err(TrainError::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    Bilevel,
    Joint,
    FixedWeights,
}

/// Per-batch log record. Serialized as one JSONL line per step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BiLevelSnapshot {
    pub step: usize,
    pub loss_type: f64,
    pub loss_entity: f64,
    pub loss_attr: Option<f64>,
    pub omega_e: f64,
    pub omega_r: Option<f64>,
    pub lr: f64,
}

/// One batch's forward graph: staged model, per-instance losses, and
/// batch-mean losses per level, all on one tape.
pub struct BatchGraph {
    pub tape: Tape,
    pub staged: StagedModel,
    pub mean_losses: Vec<Tensor>,
    pub instance_losses: Vec<Vec<Tensor>>,
}

impl BatchGraph {
    pub fn mean_values(&self) -> Vec<f64> {
        self.mean_losses.iter().map(|l| l.item()).collect()
    }
}

/// Run the model over a batch and build per-level mean losses.
pub fn batch_graph(
    params: &DhlModelParams,
    adjacency: &[AdjacencyMatrix],
    config: &ModelConfig,
    batch: &[&TrainingInstance],
) -> Result<BatchGraph, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    let mut tape = Tape::new();
    let staged = model::stage_model(&mut tape, params, adjacency)?;
    let mut instance_losses = Vec::with_capacity(batch.len());
    for inst in batch {
        let trace = model::forward_staged(&mut tape, &staged, config, &inst.prefixes)?;
        instance_losses.push(model::level_losses(&mut tape, &trace, inst, config)?);
    }
    let mut mean_losses = Vec::with_capacity(config.levels);
    for level in 0..config.levels {
        let mut acc = instance_losses[0][level].clone();
        for losses in &instance_losses[1..] {
            acc = tape.add(&acc, &losses[level])?;
        }
        mean_losses.push(tape.scale(&acc, 1.0 / batch.len() as f64)?);
    }
    Ok(BatchGraph {
        tape,
        staged,
        mean_losses,
        instance_losses,
    })
}

/// Hierarchical weights for one batch: either one scalar per level transition
/// or one per instance.
#[derive(Debug, Clone)]
pub enum Omegas {
    Scalar { e: f64, r: Option<f64> },
    PerInstance { e: Vec<f64>, r: Option<Vec<f64>> },
}

impl Omegas {
    pub fn fixed(levels: usize) -> Self {
        Omegas::Scalar {
            e: 1.0,
            r: (levels == 3).then_some(1.0),
        }
    }

    pub fn mean_e(&self) -> f64 {
        match self {
            Omegas::Scalar { e, .. } => *e,
            Omegas::PerInstance { e, .. } => e.iter().sum::<f64>() / e.len() as f64,
        }
    }

    pub fn mean_r(&self) -> Option<f64> {
        match self {
            Omegas::Scalar { r, .. } => *r,
            Omegas::PerInstance { r, .. } => r
                .as_ref()
                .map(|r| r.iter().sum::<f64>() / r.len() as f64),
        }
    }
}

/// Evaluate ω from the weight net for one batch. The entity weight is driven
/// by the type loss and the attribute weight by the entity loss.
pub fn compute_omegas(net: &WeightNet, graph: &BatchGraph, per_instance: bool) -> Omegas {
    let levels = graph.mean_losses.len();
    if per_instance {
        let e = graph
            .instance_losses
            .iter()
            .map(|l| weight_forward(net, l[0].item()))
            .collect();
        let r = (levels == 3).then(|| {
            graph
                .instance_losses
                .iter()
                .map(|l| weight_forward(net, l[1].item()))
                .collect()
        });
        Omegas::PerInstance { e, r }
    } else {
        let means = graph.mean_values();
        Omegas::Scalar {
            e: weight_forward(net, means[0]),
            r: (levels == 3).then(|| weight_forward(net, means[1])),
        }
    }
}

/// Build the ω-weighted training loss L_p + ω_e·L_e + ω_r·L_r on the batch
/// tape. ω values enter as constants: no gradient flows through the weight
/// net's own input here.
pub fn weighted_root(graph: &mut BatchGraph, omegas: &Omegas) -> Result<Tensor, TrainError> {
    let levels = graph.mean_losses.len();
    match omegas {
        Omegas::Scalar { e, r } => {
            let we = graph.tape.scale(&graph.mean_losses[1], *e)?;
            let mut root = graph.tape.add(&graph.mean_losses[0], &we)?;
            if levels == 3 {
                let wr = graph.tape.scale(&graph.mean_losses[2], r.unwrap())?;
                root = graph.tape.add(&root, &wr)?;
            }
            Ok(root)
        }
        Omegas::PerInstance { e, r } => {
            let b = graph.instance_losses.len();
            let mut acc: Option<Tensor> = None;
            for (i, losses) in graph.instance_losses.iter().enumerate() {
                let we = graph.tape.scale(&losses[1], e[i])?;
                let mut term = graph.tape.add(&losses[0], &we)?;
                if levels == 3 {
                    let wr = graph.tape.scale(&losses[2], r.as_ref().unwrap()[i])?;
                    term = graph.tape.add(&term, &wr)?;
                }
                acc = Some(match acc {
                    Some(a) => graph.tape.add(&a, &term)?,
                    None => term,
                });
            }
            Ok(graph.tape.scale(&acc.unwrap(), 1.0 / b as f64)?)
        }
    }
}

/// Gradients in the canonical parameter order of `named_tensors`.
pub fn gradients_of(staged: &DhlModelParams, grads: &Gradients) -> Vec<Option<Tensor>> {
    staged
        .named_tensors()
        .iter()
        .map(|(_, t)| grads.wrt(t).map(|g| g.detached()))
        .collect()
}

pub fn flatten_params(params: &DhlModelParams) -> Vec<f64> {
    let mut out = Vec::new();
    for (_, t) in params.named_tensors() {
        out.extend_from_slice(t.data());
    }
    out
}

pub fn assign_from_flat(params: &mut DhlModelParams, flat: &[f64]) {
    let mut cursor = 0;
    for (_, t) in params.named_tensors_mut() {
        let n = t.len();
        t.data_mut().copy_from_slice(&flat[cursor..cursor + n]);
        cursor += n;
    }
    assert_eq!(cursor, flat.len(), "flat parameter length mismatch");
}

fn flatten_grads(grads: &[Option<Tensor>], shapes: &[(usize, usize)]) -> Vec<f64> {
    let mut out = Vec::new();
    for (g, &(r, c)) in grads.iter().zip(shapes) {
        match g {
            Some(g) => out.extend_from_slice(g.data()),
            None => out.extend(std::iter::repeat(0.0).take(r * c)),
        }
    }
    out
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// θ − η·g as a new parameter set.
fn gd_step(params: &DhlModelParams, grad_flat: &[f64], eta: f64) -> DhlModelParams {
    let mut flat = flatten_params(params);
    for (p, g) in flat.iter_mut().zip(grad_flat) {
        *p -= eta * g;
    }
    let mut out = params.clone();
    assign_from_flat(&mut out, &flat);
    out
}

/// One plain gradient-descent step on the ω-weighted loss, preserving the
/// dependence of the result on the weight net through ω.
pub fn inner_step(
    params: &DhlModelParams,
    weightnet: &WeightNet,
    batch: &[&TrainingInstance],
    adjacency: &[AdjacencyMatrix],
    config: &ModelConfig,
    eta: f64,
    per_instance: bool,
) -> Result<DhlModelParams, TrainError> {
    let mut graph = batch_graph(params, adjacency, config, batch)?;
    let omegas = compute_omegas(weightnet, &graph, per_instance);
    let root = weighted_root(&mut graph, &omegas)?;
    if !root.item().is_finite() {
        return Err(TrainError::NonFiniteLoss {
            epoch: 0,
            batch: 0,
            losses: graph.mean_values(),
        });
    }
    let grads = graph.tape.backward(&root)?;
    let shapes: Vec<_> = params.named_tensors().iter().map(|(_, t)| t.shape()).collect();
    let flat = flatten_grads(&gradients_of(&graph.staged.params, &grads), &shapes);
    Ok(gd_step(params, &flat, eta))
}

/// ∂(ω_e·L_e + ω_r·L_r)/∂α on a fresh weight-net tape. `inputs` are the loss
/// values fed to the net and `scales` the loss values each ω multiplies; both
/// have one entry per level transition, each a column of one (batch mean) or
/// B (per instance) values. Gradients come back in `named_tensors` order.
fn weightnet_alpha_grads(
    net: &WeightNet,
    inputs: &[Vec<f64>],
    scales: &[Vec<f64>],
) -> Result<Vec<Option<Tensor>>, TrainError> {
    let mut tape = Tape::new();
    let staged = net.stage(&mut tape)?;
    let mut root: Option<Tensor> = None;
    for (input, scale) in inputs.iter().zip(scales) {
        let omegas = staged.forward_column(&mut tape, input)?;
        let loss_col = Tensor::from_vec(scale.len(), 1, scale.clone());
        let weighted = tape.mul(&omegas, &loss_col)?;
        let summed = tape.sum(&weighted)?;
        let normalized = tape.scale(&summed, 1.0 / input.len() as f64)?;
        root = Some(match root {
            Some(r) => tape.add(&r, &normalized)?,
            None => normalized,
        });
    }
    let grads = tape.backward(&root.expect("at least one level transition"))?;
    Ok(staged
        .named_tensors()
        .iter()
        .map(|(_, t)| grads.wrt(t).map(|g| g.detached()))
        .collect())
}

fn alpha_grad_inputs(graph: &BatchGraph, per_instance: bool) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let levels = graph.mean_losses.len();
    if per_instance {
        let col = |level: usize| -> Vec<f64> {
            graph
                .instance_losses
                .iter()
                .map(|l| l[level].item())
                .collect()
        };
        let mut inputs = vec![col(0)];
        let mut scales = vec![col(1)];
        if levels == 3 {
            inputs.push(col(1));
            scales.push(col(2));
        }
        (inputs, scales)
    } else {
        let means = graph.mean_values();
        let mut inputs = vec![vec![means[0]]];
        let mut scales = vec![vec![means[1]]];
        if levels == 3 {
            inputs.push(vec![means[1]]);
            scales.push(vec![means[2]]);
        }
        (inputs, scales)
    }
}

/// Directional central-difference hypergradient core.
///
/// Given v = ∇_{θ*}L_out, evaluates ∂L_in/∂α at θ ± r·v with
/// r = 0.01/‖v‖₂ and returns −η·(g⁺ − g⁻)/(2r), the one-step-unroll
/// approximation of ∂L_out(θ*(α))/∂α. Returns zeros when ‖v‖ is degenerate.
pub fn hypergradient_fd<F>(
    theta: &[f64],
    grad_out_at_theta_star: &[f64],
    eta: f64,
    n_alpha: usize,
    mut dlin_dalpha_at: F,
) -> Vec<f64>
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    let norm = l2_norm(grad_out_at_theta_star);
    if norm < DEGENERATE_GRAD_NORM {
        return vec![0.0; n_alpha];
    }
    let r = 0.01 / norm;
    let perturb = |sign: f64| -> Vec<f64> {
        theta
            .iter()
            .zip(grad_out_at_theta_star)
            .map(|(t, v)| t + sign * r * v)
            .collect()
    };
    let g_plus = dlin_dalpha_at(&perturb(1.0));
    let g_minus = dlin_dalpha_at(&perturb(-1.0));
    g_plus
        .iter()
        .zip(&g_minus)
        .map(|(p, m)| -eta * (p - m) / (2.0 * r))
        .collect()
}

/// Gradient of the outer loss L_out(θ*(α)) with respect to the weight-net
/// parameters, via the one-step unroll. The outer loss is the unweighted sum
/// of per-level losses with one-hot targets. Gradients come back in
/// `WeightNet::named_tensors` order.
pub fn hypergradient(
    params: &DhlModelParams,
    weightnet: &WeightNet,
    batch: &[&TrainingInstance],
    adjacency: &[AdjacencyMatrix],
    config: &ModelConfig,
    eta: f64,
    per_instance: bool,
) -> Result<Vec<Tensor>, TrainError> {
    let mut graph = batch_graph(params, adjacency, config, batch)?;
    hypergradient_with_graph(
        &mut graph,
        params,
        weightnet,
        batch,
        adjacency,
        config,
        eta,
        per_instance,
    )
}

/// As [`hypergradient`], reusing an already-built batch graph at θ for the
/// inner step.
#[allow(clippy::too_many_arguments)]
fn hypergradient_with_graph(
    graph: &mut BatchGraph,
    params: &DhlModelParams,
    weightnet: &WeightNet,
    batch: &[&TrainingInstance],
    adjacency: &[AdjacencyMatrix],
    config: &ModelConfig,
    eta: f64,
    per_instance: bool,
) -> Result<Vec<Tensor>, TrainError> {
    let net_shapes: Vec<_> = weightnet
        .named_tensors()
        .iter()
        .map(|(_, t)| t.shape())
        .collect();
    let zeros = || {
        net_shapes
            .iter()
            .map(|&(r, c)| Tensor::zeros(r, c))
            .collect::<Vec<_>>()
    };
    if eta == 0.0 {
        // θ* does not depend on α
        return Ok(zeros());
    }

    // inner step θ*(α) from the provided graph
    let omegas = compute_omegas(weightnet, graph, per_instance);
    let root_in = weighted_root(graph, &omegas)?;
    let in_grads = graph.tape.backward(&root_in)?;
    let shapes: Vec<_> = params.named_tensors().iter().map(|(_, t)| t.shape()).collect();
    let in_flat = flatten_grads(&gradients_of(&graph.staged.params, &in_grads), &shapes);
    let theta_star = gd_step(params, &in_flat, eta);

    // ∇_{θ*} of the unweighted outer loss with one-hot targets
    let out_config = ModelConfig {
        use_soft_label: false,
        ..config.clone()
    };
    let mut out_graph = batch_graph(&theta_star, adjacency, &out_config, batch)?;
    let out_root = weighted_root(&mut out_graph, &Omegas::fixed(config.levels))?;
    let out_grads = out_graph.tape.backward(&out_root)?;
    let v = flatten_grads(&gradients_of(&out_graph.staged.params, &out_grads), &shapes);

    let theta_flat = flatten_params(params);
    let n_alpha: usize = net_shapes.iter().map(|&(r, c)| r * c).sum();
    let mut failure: Option<TrainError> = None;
    let flat_hyper = hypergradient_fd(&theta_flat, &v, eta, n_alpha, |theta_pert| {
        let result = (|| -> Result<Vec<f64>, TrainError> {
            let mut pert = params.clone();
            assign_from_flat(&mut pert, theta_pert);
            let graph = batch_graph(&pert, adjacency, config, batch)?;
            let (inputs, scales) = alpha_grad_inputs(&graph, per_instance);
            let grads = weightnet_alpha_grads(weightnet, &inputs, &scales)?;
            Ok(flatten_grads(&grads, &net_shapes))
        })();
        match result {
            Ok(g) => g,
            Err(e) => {
                failure = Some(e);
                vec![0.0; n_alpha]
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }

    // unflatten into weight-net shapes
    let mut out = Vec::with_capacity(net_shapes.len());
    let mut cursor = 0;
    for &(r, c) in &net_shapes {
        out.push(Tensor::from_vec(
            r,
            c,
            flat_hyper[cursor..cursor + r * c].to_vec(),
        ));
        cursor += r * c;
    }
    Ok(out)
}

/// Everything [`train`] produces: final and best-dev parameters, optimizer
/// state, and the per-batch snapshot log.
pub struct TrainOutput {
    pub params: DhlModelParams,
    pub weightnet: WeightNet,
    pub best_params: DhlModelParams,
    pub best_weightnet: WeightNet,
    pub best_epoch: usize,
    pub best_dev_metrics: Vec<MetricsReport>,
    pub snapshots: Vec<BiLevelSnapshot>,
    pub adam_model: AdamState,
    pub adam_weightnet: AdamState,
}

/// Full training loop. Deterministic given the config seed: the per-epoch
/// shuffle comes from one `ChaCha8Rng::seed_from_u64(config.seed)` stream and
/// everything else is sequential arithmetic.
pub fn train(
    train_set: &[TrainingInstance],
    dev_set: &[TrainingInstance],
    adjacency: &[AdjacencyMatrix],
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    params: DhlModelParams,
    weightnet: WeightNet,
) -> Result<TrainOutput, TrainError> {
    train_config.validate()?;
    model_config.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    let mode = if model_config.use_hier_weights {
        train_config.mode
    } else {
        TrainMode::FixedWeights
    };
    let per_instance = train_config.per_instance_omega;
    let levels = model_config.levels;

    let mut params = params;
    let mut weightnet = weightnet;
    let mut adam_model = AdamState::for_params(&params);
    let mut adam_weightnet = AdamState::for_weightnet(&weightnet);
    let mut rng = ChaCha8Rng::seed_from_u64(train_config.seed);

    let batches_per_epoch = train_set.len().div_ceil(train_config.batch_size);
    let total_steps = train_config.epochs * batches_per_epoch;
    let model_shapes: Vec<_> = params.named_tensors().iter().map(|(_, t)| t.shape()).collect();

    let mut snapshots = Vec::with_capacity(total_steps);
    let mut best_params = params.clone();
    let mut best_weightnet = weightnet.clone();
    let mut best_epoch = 0;
    let mut best_acc = f64::NEG_INFINITY;
    let mut best_dev_metrics = Vec::new();
    let mut step = 0usize;

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..train_config.epochs {
        order.shuffle(&mut rng);
        for (batch_idx, chunk) in order.chunks(train_config.batch_size).enumerate() {
            let batch: Vec<&TrainingInstance> = chunk.iter().map(|&i| &train_set[i]).collect();
            let lr = cosine_lr(step, total_steps, train_config.model_lr);

            let mut graph = batch_graph(&params, adjacency, model_config, &batch)?;
            let mean_values = graph.mean_values();
            if mean_values.iter().any(|v| !v.is_finite()) {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                    losses: mean_values,
                });
            }

            let omegas = match mode {
                TrainMode::FixedWeights => {
                    let omegas = Omegas::fixed(levels);
                    let root = weighted_root(&mut graph, &omegas)?;
                    let grads = graph.tape.backward(&root)?;
                    let g = gradients_of(&graph.staged.params, &grads);
                    adam_model.apply(&mut params.named_tensors_mut(), &g, lr)?;
                    omegas
                }
                TrainMode::Joint => {
                    // single Adam step on the weighted loss, treating the
                    // weight net as an ordinary parameter of the same loss
                    let omegas = compute_omegas(&weightnet, &graph, per_instance);
                    let root = weighted_root(&mut graph, &omegas)?;
                    let grads = graph.tape.backward(&root)?;
                    let g = gradients_of(&graph.staged.params, &grads);
                    adam_model.apply(&mut params.named_tensors_mut(), &g, lr)?;

                    let (inputs, scales) = alpha_grad_inputs(&graph, per_instance);
                    let ag = weightnet_alpha_grads(&weightnet, &inputs, &scales)?;
                    adam_weightnet.apply(&mut weightnet.named_tensors_mut(), &ag, lr)?;
                    omegas
                }
                TrainMode::Bilevel => {
                    // (a) inner step θ*(α) and (b) outer hypergradient update
                    // of α happen inside the unroll; θ* is then discarded
                    let hyper = hypergradient_with_graph(
                        &mut graph,
                        &params,
                        &weightnet,
                        &batch,
                        adjacency,
                        model_config,
                        lr,
                        per_instance,
                    )?;
                    for ((_, t), g) in weightnet.named_tensors_mut().iter_mut().zip(&hyper) {
                        for (p, gv) in t.data_mut().iter_mut().zip(g.data()) {
                            *p -= train_config.weightnet_lr * gv;
                        }
                    }

                    // (c) recompute ω with the updated net and take the real
                    // Adam step from the original θ
                    let omegas = compute_omegas(&weightnet, &graph, per_instance);
                    let root = weighted_root(&mut graph, &omegas)?;
                    let grads = graph.tape.backward(&root)?;
                    let g = gradients_of(&graph.staged.params, &grads);
                    adam_model.apply(&mut params.named_tensors_mut(), &g, lr)?;
                    omegas
                }
            };

            snapshots.push(BiLevelSnapshot {
                step,
                loss_type: mean_values[0],
                loss_entity: mean_values[1],
                loss_attr: (levels == 3).then(|| mean_values[2]),
                omega_e: omegas.mean_e(),
                omega_r: omegas.mean_r(),
                lr,
            });
            step += 1;
            debug_assert_eq!(model_shapes.len(), params.named_tensors().len());
        }

        if !dev_set.is_empty() {
            let reports = metrics::evaluate_model(
                Some(&params),
                model_config,
                dev_set,
                adjacency,
                Baseline::None,
            )?;
            let acc = reports[1].acc;
            if acc > best_acc {
                best_acc = acc;
                best_epoch = epoch;
                best_params = params.clone();
                best_weightnet = weightnet.clone();
                best_dev_metrics = reports;
            }
        }
    }

    if dev_set.is_empty() {
        best_params = params.clone();
        best_weightnet = weightnet.clone();
        best_epoch = train_config.epochs - 1;
    }

    Ok(TrainOutput {
        params,
        weightnet,
        best_params,
        best_weightnet,
        best_epoch,
        best_dev_metrics,
        snapshots,
        adam_model,
        adam_weightnet,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::relative_error;

    #[test]
    fn zero_initialized_net_outputs_half() {
        let net = WeightNet {
            w1: Tensor::zeros(1, WEIGHTNET_HIDDEN),
            b1: Tensor::zeros(1, WEIGHTNET_HIDDEN),
            w2: Tensor::zeros(WEIGHTNET_HIDDEN, 1),
            b2: Tensor::zeros(1, 1),
        };
        assert_eq!(weight_forward(&net, 0.0), 0.5);
        assert_eq!(weight_forward(&net, 37.0), 0.5);
    }

    #[test]
    fn omega_stays_in_open_unit_interval() {
        let net = WeightNet::init(3);
        for i in 0..=100 {
            let w = weight_forward(&net, i as f64);
            assert!(w > 0.0 && w < 1.0, "omega {w} out of (0,1)");
        }
    }

    #[test]
    fn all_ones_net_at_zero_loss_gives_half() {
        let h = WEIGHTNET_HIDDEN;
        let net = WeightNet {
            w1: Tensor::from_vec(1, h, vec![1.0; h]),
            b1: Tensor::zeros(1, h),
            w2: Tensor::from_vec(h, 1, vec![1.0; h]),
            b2: Tensor::zeros(1, 1),
        };
        // tanh(0) = 0 per hidden unit, so the output is sigmoid(0)
        assert_eq!(weight_forward(&net, 0.0), 0.5);
    }

    #[test]
    fn tape_and_closed_form_weight_agree() {
        let net = WeightNet::init(11);
        for &x in &[0.0, 0.3, 2.0, 15.0] {
            let mut tape = Tape::new();
            let staged = net.stage(&mut tape).unwrap();
            let col = staged.forward_column(&mut tape, &[x]).unwrap();
            assert!((col.item() - weight_forward(&net, x)).abs() < 1e-15);
        }
    }

    #[test]
    fn cosine_schedule_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 100, 0.1), 0.1);
        assert!(cosine_lr(100, 100, 0.1).abs() < 1e-17);
        assert!((cosine_lr(50, 100, 0.1) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn cosine_schedule_is_non_increasing() {
        let mut last = f64::INFINITY;
        for step in 0..=200 {
            let lr = cosine_lr(step, 200, 0.3);
            assert!(lr <= last + 1e-15);
            last = lr;
        }
    }

    fn single_param() -> (Vec<(usize, usize)>, Tensor) {
        (vec![(1, 1)], Tensor::scalar(1.0))
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let (shapes, mut p) = single_param();
        let mut adam = AdamState::new(&shapes);
        let g = Tensor::scalar(3.7);
        let mut params = vec![("p".to_string(), &mut p)];
        adam.apply(&mut params, &[Some(g)], 0.1).unwrap();
        assert!((p.item() - (1.0 - 0.1)).abs() < 0.1 * 1e-6);
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let (shapes, mut p) = single_param();
        let mut adam = AdamState::new(&shapes);
        for _ in 0..5 {
            let g = Tensor::scalar(0.0);
            let mut params = vec![("p".to_string(), &mut p)];
            adam.apply(&mut params, &[Some(g)], 0.1).unwrap();
        }
        assert_eq!(p.item(), 1.0);
    }

    #[test]
    fn adam_two_unit_steps_move_two_tenths() {
        // hand-unrolled: with constant g=1 both bias-corrected moments are 1,
        // so each step moves by lr/(1+eps)
        let (shapes, mut p) = single_param();
        let mut adam = AdamState::new(&shapes);
        for _ in 0..2 {
            let g = Tensor::scalar(1.0);
            let mut params = vec![("p".to_string(), &mut p)];
            adam.apply(&mut params, &[Some(g)], 0.1).unwrap();
        }
        assert!((p.item() - 0.8).abs() < 1e-6, "got {}", p.item());
    }

    #[test]
    fn toy_inner_step_arithmetic() {
        // L_in = ω·θ² with ω = 0.5, θ = 1, η = 0.1 → θ* = 1 − 0.1·(2·0.5·1) = 0.9
        let mut tape = Tape::new();
        let theta = tape.leaf(Tensor::scalar(1.0)).unwrap();
        let sq = tape.mul(&theta, &theta).unwrap();
        let loss = tape.scale(&sq, 0.5).unwrap();
        let grads = tape.backward(&loss).unwrap();
        let g = grads.wrt(&theta).unwrap().item();
        let theta_star = 1.0 - 0.1 * g;
        assert!((theta_star - 0.9).abs() < 1e-15);
    }

    #[test]
    fn hypergradient_fd_matches_toy_closed_form() {
        // θ ∈ ℝ, ω(α) = sigmoid(α), L_in = ω·θ², L_out = θ²
        // θ* = θ − η·2ωθ, dL_out/dα = 2θ*·(−η·2θ)·ω′(α)
        let theta = 1.3f64;
        let eta = 0.1f64;
        let alpha = 0.4f64;
        let omega = crate::tensor::sigmoid(alpha);
        let omega_prime = omega * (1.0 - omega);
        let theta_star = theta - eta * 2.0 * omega * theta;
        let expected = 2.0 * theta_star * (-eta * 2.0 * theta) * omega_prime;

        let grad_out = vec![2.0 * theta_star];
        let hyper = hypergradient_fd(&[theta], &grad_out, eta, 1, |t| {
            // ∂L_in/∂α at θ' = θ'²·ω′(α)
            vec![t[0] * t[0] * omega_prime]
        });
        assert!(
            relative_error(hyper[0], expected) < 1e-3,
            "{} vs {expected}",
            hyper[0]
        );

        // brute-force α perturbation of the whole unroll
        let h = 1e-6;
        let unroll = |a: f64| {
            let w = crate::tensor::sigmoid(a);
            let ts = theta - eta * 2.0 * w * theta;
            ts * ts
        };
        let brute = (unroll(alpha + h) - unroll(alpha - h)) / (2.0 * h);
        assert!(relative_error(hyper[0], brute) < 1e-3);
    }

    #[test]
    fn degenerate_outer_gradient_gives_zero_hypergradient() {
        let hyper = hypergradient_fd(&[1.0, 2.0], &[0.0, 0.0], 0.1, 3, |_| vec![1.0, 1.0, 1.0]);
        assert_eq!(hyper, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn hypergradient_sign_favors_useful_weights() {
        // when increasing ω speeds descent of L_out, the gradient on α must
        // push ω up (negative gradient since we minimize)
        let theta = 2.0f64;
        let eta = 0.05f64;
        let alpha = 0.0f64;
        let omega = crate::tensor::sigmoid(alpha);
        let omega_prime = omega * (1.0 - omega);
        let theta_star = theta - eta * 2.0 * omega * theta;
        let grad_out = vec![2.0 * theta_star];
        let hyper = hypergradient_fd(&[theta], &grad_out, eta, 1, |t| {
            vec![t[0] * t[0] * omega_prime]
        });
        assert!(hyper[0] < 0.0, "expected negative hypergradient, got {}", hyper[0]);
    }
}
