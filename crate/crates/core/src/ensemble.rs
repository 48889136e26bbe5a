//! Multi-head ensemble Q-network with variance-based risk terms.
//!
//! A shared dense trunk feeds `k` independent dense heads, each producing a
//! value for every discrete action. Head disagreement (population variance)
//! is the risk signal: the protagonist subtracts `lambda_p * var` from its
//! action values, the adversary adds `lambda_a * var`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Poisson};

use crate::error::{Error, Result};
use crate::nn::{adam_step, clip_global_norm, AdamState, DenseNet, GradientSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AgentRole {
    Protagonist,
    Adversary,
}

impl AgentRole {
    /// `+1` for the protagonist, `-1` for the adversary.
    pub fn reward_sign(self) -> f64 {
        match self {
            AgentRole::Protagonist => 1.0,
            AgentRole::Adversary => -1.0,
        }
    }

    pub fn other(self) -> Self {
        match self {
            AgentRole::Protagonist => AgentRole::Adversary,
            AgentRole::Adversary => AgentRole::Protagonist,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AgentRole::Protagonist => "P",
            AgentRole::Adversary => "A",
        }
    }
}

impl fmt::Display for AgentRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AgentRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "P" | "protagonist" => Ok(AgentRole::Protagonist),
            "A" | "adversary" => Ok(AgentRole::Adversary),
            other => Err(Error::Usage(format!("unknown role {other:?}"))),
        }
    }
}

/// Weights of the variance terms in the modified action values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskConfig {
    pub lambda_p: f64,
    pub lambda_a: f64,
}

impl RiskConfig {
    pub const NEUTRAL: RiskConfig = RiskConfig {
        lambda_p: 0.0,
        lambda_a: 0.0,
    };

    pub fn new(lambda_p: f64, lambda_a: f64) -> Self {
        Self { lambda_p, lambda_a }
    }

    /// Checks sign constraints, and `lambda_a == lambda_p` when the game is
    /// declared zero-sum.
    pub fn validate(&self, zero_sum: bool) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.lambda_p >= 0.0) || !self.lambda_p.is_finite() {
            errs.push(format!("risk.lambda_p must be a finite value >= 0, got {}", self.lambda_p));
        }
        if !(self.lambda_a >= 0.0) || !self.lambda_a.is_finite() {
            errs.push(format!("risk.lambda_a must be a finite value >= 0, got {}", self.lambda_a));
        }
        if zero_sum && self.lambda_a != self.lambda_p {
            errs.push(format!(
                "risk.zero_sum requires lambda_a == lambda_p, got {} vs {}",
                self.lambda_a, self.lambda_p
            ));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

impl Default for RiskConfig {
    fn default() -> Self {
        Self::new(0.1, 0.1)
    }
}

/// Layer sizes of an ensemble network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub input_dim: usize,
    /// Hidden sizes of the shared trunk; the last one is the feature size.
    pub trunk_hidden: Vec<usize>,
    /// Hidden sizes inside each head (empty for a single dense layer).
    pub head_hidden: Vec<usize>,
    pub heads: usize,
    pub num_actions: usize,
}

impl Architecture {
    pub fn trunk_dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim];
        d.extend(&self.trunk_hidden);
        d
    }

    pub fn head_dims(&self) -> Vec<usize> {
        let mut d = vec![*self.trunk_hidden.last().unwrap_or(&self.input_dim)];
        d.extend(&self.head_hidden);
        d.push(self.num_actions);
        d
    }

    fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.num_actions == 0 || self.trunk_hidden.is_empty() {
            return Err(Error::Shape(format!(
                "ensemble needs k >= 1, at least one action and a non-empty trunk, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Shared trunk plus `k` value heads, each with its own Adam state.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleQNetwork {
    trunk: DenseNet,
    heads: Vec<DenseNet>,
    trunk_opt: AdamState,
    head_opts: Vec<AdamState>,
}

impl EnsembleQNetwork {
    /// Initializes the trunk first, then heads `0..k`, all from `rng`.
    pub fn new<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let trunk = DenseNet::new(&arch.trunk_dims(), rng)?;
        let heads = (0..arch.heads)
            .map(|_| DenseNet::new(&arch.head_dims(), rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_parts(trunk, heads))
    }

    /// Assembles a network with fresh optimizer state.
    pub fn from_parts(trunk: DenseNet, heads: Vec<DenseNet>) -> Self {
        let trunk_opt = AdamState::new(&trunk);
        let head_opts = heads.iter().map(AdamState::new).collect();
        Self {
            trunk,
            heads,
            trunk_opt,
            head_opts,
        }
    }

    pub fn from_parts_with_state(
        trunk: DenseNet,
        heads: Vec<DenseNet>,
        trunk_opt: AdamState,
        head_opts: Vec<AdamState>,
    ) -> Result<Self> {
        let feature = trunk.output_dim();
        if heads.is_empty() || head_opts.len() != heads.len() {
            return Err(Error::Shape("ensemble needs k >= 1 heads with one optimizer each".into()));
        }
        let (hin, hout) = (heads[0].input_dim(), heads[0].output_dim());
        if hin != feature || heads.iter().any(|h| h.layer_dims() != heads[0].layer_dims()) {
            return Err(Error::Shape(format!(
                "heads must share dims and consume the {feature}-wide trunk feature"
            )));
        }
        debug_assert!(hout >= 1);
        if !trunk_opt.congruent(&trunk) || head_opts.iter().zip(&heads).any(|(o, h)| !o.congruent(h)) {
            return Err(Error::Shape("optimizer state does not match the network shape".into()));
        }
        Ok(Self {
            trunk,
            heads,
            trunk_opt,
            head_opts,
        })
    }

    pub fn k(&self) -> usize {
        self.heads.len()
    }

    pub fn num_actions(&self) -> usize {
        self.heads[0].output_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.trunk.input_dim()
    }

    pub fn trunk(&self) -> &DenseNet {
        &self.trunk
    }

    pub fn heads(&self) -> &[DenseNet] {
        &self.heads
    }

    pub fn heads_mut(&mut self) -> &mut [DenseNet] {
        &mut self.heads
    }

    pub fn trunk_mut(&mut self) -> &mut DenseNet {
        &mut self.trunk
    }

    pub fn trunk_opt(&self) -> &AdamState {
        &self.trunk_opt
    }

    pub fn head_opts(&self) -> &[AdamState] {
        &self.head_opts
    }

    /// ReLU'd shared feature for one observation.
    pub fn features(&self, obs: &[f64]) -> Result<Vec<f64>> {
        let mut f = self.trunk.predict(obs)?;
        f.iter_mut().for_each(|v| *v = v.max(0.0));
        Ok(f)
    }

    /// Row `i` holds head `i`'s action values.
    pub fn q_all_heads(&self, obs: &[f64]) -> Result<Vec<Vec<f64>>> {
        let f = self.features(obs)?;
        self.heads.iter().map(|h| h.predict(&f)).collect()
    }

    /// Values of a subset of heads (in the given order).
    pub fn q_heads(&self, obs: &[f64], heads: &[usize]) -> Result<Vec<Vec<f64>>> {
        let f = self.features(obs)?;
        heads
            .iter()
            .map(|&i| {
                self.heads
                    .get(i)
                    .ok_or_else(|| Error::Usage(format!("head index {i} out of range")))?
                    .predict(&f)
            })
            .collect()
    }

    fn congruent(&self, other: &EnsembleQNetwork) -> bool {
        self.trunk.layer_dims() == other.trunk.layer_dims()
            && self.heads.len() == other.heads.len()
            && self
                .heads
                .iter()
                .zip(&other.heads)
                .all(|(a, b)| a.layer_dims() == b.layer_dims())
    }

    /// Whether all trainable parameters are bitwise equal (optimizer state ignored).
    pub fn params_equal(&self, other: &EnsembleQNetwork) -> bool {
        self.trunk == other.trunk && self.heads == other.heads
    }
}

/// Column means: `(1/k) sum_i Q^i(s, a)`.
pub fn mean_q(matrix: &[Vec<f64>]) -> Vec<f64> {
    let k = matrix.len();
    assert!(k >= 1, "mean_q needs at least one head");
    let mut sum = matrix[0].clone();
    for row in &matrix[1..] {
        for (s, v) in sum.iter_mut().zip(row) {
            *s += v;
        }
    }
    sum.iter().map(|s| s / k as f64).collect()
}

/// Population variance of each column (divisor `k`). Columns where every
/// head agrees are exactly zero.
pub fn variance_q(matrix: &[Vec<f64>]) -> Vec<f64> {
    let k = matrix.len() as f64;
    let mean = mean_q(matrix);
    let mut acc = vec![0.0; mean.len()];
    for row in matrix {
        for ((a, v), m) in acc.iter_mut().zip(row).zip(&mean) {
            let d = v - m;
            *a += d * d;
        }
    }
    acc.iter()
        .enumerate()
        .map(|(j, a)| {
            if matrix.iter().all(|r| r[j] == matrix[0][j]) {
                0.0
            } else {
                a / k
            }
        })
        .collect()
}

/// Risk-adjusted action values: `q - lambda_p var` for the protagonist,
/// `q + lambda_a var` for the adversary.
pub fn modified_q(role: AgentRole, q: &[f64], var: &[f64], cfg: &RiskConfig) -> Vec<f64> {
    assert_eq!(q.len(), var.len(), "q and variance must have equal length");
    match role {
        AgentRole::Protagonist => q.iter().zip(var).map(|(q, v)| q - cfg.lambda_p * v).collect(),
        AgentRole::Adversary => q.iter().zip(var).map(|(q, v)| q + cfg.lambda_a * v).collect(),
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Outcome of a training-time action choice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision {
    pub action: usize,
    /// Ensemble variance of the chosen action.
    pub variance: f64,
    pub explored: bool,
}

/// Epsilon-greedy choice on the risk-modified values of head `head_index`
/// (0-based); the variance term uses all `k` heads.
pub fn select_action<R: Rng + ?Sized>(
    net: &EnsembleQNetwork,
    obs: &[f64],
    role: AgentRole,
    head_index: usize,
    cfg: &RiskConfig,
    epsilon: f64,
    rng: &mut R,
) -> Result<usize> {
    select_action_detailed(net, obs, role, head_index, cfg, epsilon, rng).map(|d| d.action)
}

pub fn select_action_detailed<R: Rng + ?Sized>(
    net: &EnsembleQNetwork,
    obs: &[f64],
    role: AgentRole,
    head_index: usize,
    cfg: &RiskConfig,
    epsilon: f64,
    rng: &mut R,
) -> Result<Decision> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::Usage(format!("epsilon must lie in [0, 1], got {epsilon}")));
    }
    if head_index >= net.k() {
        return Err(Error::Usage(format!(
            "head index {head_index} out of range for k = {}",
            net.k()
        )));
    }
    let matrix = net.q_all_heads(obs)?;
    let var = variance_q(&matrix);
    let explored = rng.random::<f64>() < epsilon;
    let action = if explored {
        rng.random_range(0..net.num_actions())
    } else {
        argmax(&modified_q(role, &matrix[head_index], &var, cfg))
    };
    Ok(Decision {
        action,
        variance: var[action],
        explored,
    })
}

/// Deterministic test-time choice on the risk-modified ensemble mean.
pub fn select_action_test(
    net: &EnsembleQNetwork,
    obs: &[f64],
    role: AgentRole,
    cfg: &RiskConfig,
) -> Result<usize> {
    let matrix = net.q_all_heads(obs)?;
    Ok(argmax(&modified_q(role, &mean_q(&matrix), &variance_q(&matrix), cfg)))
}

/// Per-head sample weights for one transition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BootstrapMask {
    pub counts: Vec<u32>,
}

impl BootstrapMask {
    pub fn ones(k: usize) -> Self {
        Self { counts: vec![1; k] }
    }

    pub fn zeros(k: usize) -> Self {
        Self { counts: vec![0; k] }
    }

    pub fn active_heads(&self) -> Vec<usize> {
        (0..self.counts.len()).filter(|&i| self.counts[i] > 0).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.iter().all(|c| *c == 0)
    }
}

/// How bootstrap masks are drawn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaskScheme {
    /// `heads_per_update` distinct heads chosen uniformly, each weighted
    /// `1 + Poisson(rate)`; the rest get 0.
    Subset { heads_per_update: usize },
    /// Every head weighted `Poisson(rate)` independently.
    Plain,
}

pub fn sample_mask<R: Rng + ?Sized>(
    k: usize,
    rate: f64,
    scheme: MaskScheme,
    rng: &mut R,
) -> Result<BootstrapMask> {
    if !(rate >= 0.0) || !rate.is_finite() {
        return Err(Error::Usage(format!("mask rate must be finite and >= 0, got {rate}")));
    }
    let poisson = if rate > 0.0 {
        Some(Poisson::new(rate).map_err(|e| Error::Usage(e.to_string()))?)
    } else {
        None
    };
    let draw = |rng: &mut R| -> u32 { poisson.as_ref().map_or(0, |p| p.sample(rng) as u32) };
    let mut counts = vec![0u32; k];
    match scheme {
        MaskScheme::Subset { heads_per_update } => {
            if heads_per_update == 0 || heads_per_update > k {
                return Err(Error::Usage(format!(
                    "heads_per_update must lie in 1..={k}, got {heads_per_update}"
                )));
            }
            for i in rand::seq::index::sample(rng, k, heads_per_update) {
                counts[i] = 1 + draw(rng);
            }
        }
        MaskScheme::Plain => {
            for c in counts.iter_mut() {
                *c = draw(rng);
            }
        }
    }
    Ok(BootstrapMask { counts })
}

/// One regression sample: move `Q^i(obs, action)` toward `target`.
#[derive(Debug, Clone, Copy)]
pub struct TdSample<'a> {
    pub obs: &'a [f64],
    pub action: usize,
    pub target: f64,
}

/// Gradients for the trunk and every head.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleGradients {
    pub trunk: GradientSet,
    pub heads: Vec<GradientSet>,
}

impl EnsembleGradients {
    pub fn zeros_like(net: &EnsembleQNetwork) -> Self {
        Self {
            trunk: GradientSet::zeros_like(&net.trunk),
            heads: net.heads.iter().map(GradientSet::zeros_like).collect(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.trunk.is_zero() && self.heads.iter().all(GradientSet::is_zero)
    }
}

/// Loss `(1/B) sum_b sum_i w_bi (Q^i(s_b, a_b) - y_b)^2` and its gradient.
pub fn td_gradients(
    net: &EnsembleQNetwork,
    batch: &[TdSample<'_>],
    masks: &[BootstrapMask],
) -> Result<(f64, EnsembleGradients)> {
    if batch.is_empty() {
        return Err(Error::Usage("td update needs a non-empty batch".into()));
    }
    if masks.len() != batch.len() {
        return Err(Error::Shape(format!(
            "{} masks for a batch of {}",
            masks.len(),
            batch.len()
        )));
    }
    let k = net.k();
    let n = batch.len() as f64;
    let mut grads = EnsembleGradients::zeros_like(net);
    let mut loss = 0.0;
    for (sample, mask) in batch.iter().zip(masks) {
        if mask.counts.len() != k {
            return Err(Error::Shape(format!("mask of length {} for k = {k}", mask.counts.len())));
        }
        if mask.is_empty() {
            continue;
        }
        if !sample.target.is_finite() {
            return Err(Error::Numeric {
                layer: net.trunk.num_layers(),
                detail: format!("non-finite TD target {}", sample.target),
            });
        }
        if sample.action >= net.num_actions() {
            return Err(Error::Usage(format!("action {} out of range", sample.action)));
        }
        let (z, trunk_cache) = net.trunk.forward(sample.obs)?;
        let feature: Vec<f64> = z.iter().map(|v| v.max(0.0)).collect();
        let mut feature_grad: Option<Vec<f64>> = None;
        for (i, &count) in mask.counts.iter().enumerate() {
            if count == 0 {
                continue;
            }
            let w = count as f64;
            let head = &net.heads[i];
            let (q, cache) = head.forward(&feature)?;
            let diff = q[sample.action] - sample.target;
            loss += w * diff * diff;
            let mut grad_out = vec![0.0; q.len()];
            grad_out[sample.action] = 2.0 * w * diff / n;
            let (hg, input_grad) = head.backward_with_input(&cache, &grad_out)?;
            grads.heads[i].add_assign(&hg);
            feature_grad = Some(match feature_grad {
                None => input_grad,
                Some(mut acc) => {
                    acc.iter_mut().zip(&input_grad).for_each(|(a, g)| *a += g);
                    acc
                }
            });
        }
        let mut fg = feature_grad.expect("non-empty mask");
        for (g, zv) in fg.iter_mut().zip(&z) {
            if *zv <= 0.0 {
                *g = 0.0;
            }
        }
        let tg = net.trunk.backward(&trunk_cache, &fg)?;
        grads.trunk.add_assign(&tg);
    }
    Ok((loss / n, grads))
}

/// Clips (optionally) and applies one Adam step to trunk and heads.
pub fn apply_gradients(
    net: &mut EnsembleQNetwork,
    mut grads: EnsembleGradients,
    lr: f64,
    clip: Option<f64>,
) -> Result<()> {
    if grads.heads.len() != net.k() {
        return Err(Error::Shape("gradient head count differs from network".into()));
    }
    if let Some(max_norm) = clip {
        let mut sets: Vec<&mut GradientSet> = Vec::with_capacity(1 + grads.heads.len());
        sets.push(&mut grads.trunk);
        sets.extend(grads.heads.iter_mut());
        clip_global_norm(&mut sets, max_norm);
    }
    adam_step(&mut net.trunk, &mut net.trunk_opt, &grads.trunk, lr)?;
    for ((head, opt), g) in net.heads.iter_mut().zip(&mut net.head_opts).zip(&grads.heads) {
        adam_step(head, opt, g, lr)?;
    }
    Ok(())
}

/// Mask-weighted squared-TD update; returns the mean weighted loss.
pub fn td_update(
    net: &mut EnsembleQNetwork,
    batch: &[TdSample<'_>],
    masks: &[BootstrapMask],
    lr: f64,
    clip: Option<f64>,
) -> Result<f64> {
    let (loss, grads) = td_gradients(net, batch, masks)?;
    apply_gradients(net, grads, lr, clip)?;
    Ok(loss)
}

/// Makes `target` a bitwise copy of `net`'s parameters.
pub fn sync_target(net: &EnsembleQNetwork, target: &mut EnsembleQNetwork) -> Result<()> {
    if !net.congruent(target) {
        return Err(Error::Shape("target network shape differs from online network".into()));
    }
    target.trunk.copy_params_from(&net.trunk)?;
    for (t, h) in target.heads.iter_mut().zip(&net.heads) {
        t.copy_params_from(h)?;
    }
    Ok(())
}
