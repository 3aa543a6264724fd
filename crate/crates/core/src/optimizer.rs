//! Sparse AdamW with optimizer-level expert routing.
//!
//! Each step runs three phases per module:
//!
//! 1. every expert folds its gradient into its first and second moments and
//!    advances its step counter, whether or not it will be updated;
//! 2. every expert is scored from those moments ([`crate::scoring`]);
//! 3. the Top-K experts take a bias-corrected AdamW step with decoupled
//!    weight decay. Everyone else keeps their weights bit for bit.
//!
//! Routing is local: two modules of the same network may pick different
//! winners at the same step.

use crate::error::{Error, Result};
use crate::harness::schedule::{lr_at, ScheduleSpec};
use crate::harness::trace::RoutingDecision;
use crate::model::{ExpertClass, MolfModule, Network, NetworkGrads};
use crate::numerics::Matrix;
use crate::scoring::{score_experts, select_winners, ScoreRecord, ScoringMode};

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub k_top: usize,
    pub lambda_fft: f64,
    pub lambda_lora: f64,
    pub scoring: ScoringMode,
    pub lr_fft: f64,
    pub lr_lora: f64,
    pub schedule: ScheduleSpec,
    /// Per-module global-norm gradient clipping. Off unless set.
    pub grad_clip: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            k_top: 1,
            lambda_fft: 0.1,
            lambda_lora: 0.01,
            scoring: ScoringMode::Epd,
            lr_fft: 1e-3,
            lr_lora: 5e-3,
            schedule: ScheduleSpec::constant(),
            grad_clip: None,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!(
                "betas ({}, {}) must lie in [0, 1)",
                self.beta1, self.beta2
            ));
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        if self.k_top == 0 {
            return bad("k_top must be at least 1".into());
        }
        for (name, v) in [
            ("lr_fft", self.lr_fft),
            ("lr_lora", self.lr_lora),
            ("lambda_fft", self.lambda_fft),
            ("lambda_lora", self.lambda_lora),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("grad_clip must be positive, got {c}"));
            }
        }
        self.schedule.validate()
    }

    pub fn lr_base(&self, class: ExpertClass) -> f64 {
        match class {
            ExpertClass::Fft => self.lr_fft,
            ExpertClass::Lora => self.lr_lora,
        }
    }

    pub fn weight_decay(&self, class: ExpertClass) -> f64 {
        match class {
            ExpertClass::Fft => self.lambda_fft,
            ExpertClass::Lora => self.lambda_lora,
        }
    }
}

/// AdamW state for one routable expert.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertState {
    pub class: ExpertClass,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub t: u64,
    pub n_params: usize,
    pub lr_base: f64,
    pub weight_decay: f64,
}

impl ExpertState {
    pub fn new(
        class: ExpertClass,
        shapes: &[(usize, usize)],
        lr_base: f64,
        weight_decay: f64,
    ) -> Self {
        let zeros = || {
            shapes
                .iter()
                .map(|&(r, c)| Matrix::zeros(r, c))
                .collect::<Vec<_>>()
        };
        ExpertState {
            class,
            m: zeros(),
            v: zeros(),
            t: 0,
            n_params: shapes.iter().map(|(r, c)| r * c).sum(),
            lr_base,
            weight_decay,
        }
    }

    pub fn for_module(module: &MolfModule, cfg: &OptimizerConfig) -> Vec<ExpertState> {
        (0..module.routable_count())
            .map(|i| {
                let class = module.expert_class(i);
                let shapes: Vec<_> = module.expert_params(i).iter().map(|p| p.shape()).collect();
                ExpertState::new(class, &shapes, cfg.lr_base(class), cfg.weight_decay(class))
            })
            .collect()
    }
}

/// Folds one batch-averaged gradient into the moments and advances `t`.
/// Parameters are not touched.
pub fn track_moments(
    state: &mut ExpertState,
    grads: &[Matrix],
    cfg: &OptimizerConfig,
) -> Result<()> {
    if grads.len() != state.m.len() {
        return Err(Error::contract(format!(
            "expected {} gradient tensors, got {}",
            state.m.len(),
            grads.len()
        )));
    }
    for (j, (g, m)) in grads.iter().zip(&state.m).enumerate() {
        if g.shape() != m.shape() {
            return Err(Error::Dimension {
                op: "track_moments",
                lhs: m.shape(),
                rhs: g.shape(),
            });
        }
        g.ensure_finite(&format!("grad[{j}]"))?;
    }
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    for ((g, m), v) in grads.iter().zip(&mut state.m).zip(&mut state.v) {
        for ((&gi, mi), vi) in g.data().iter().zip(m.data_mut()).zip(v.data_mut()) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
        }
    }
    state.t += 1;
    Ok(())
}

/// Bias-corrected AdamW step with decoupled weight decay, using the moments
/// already tracked for this step:
/// `theta <- theta (1 - lr lambda) - lr / (1 - b1^t) * m / (sqrt(v / (1 - b2^t)) + eps)`.
pub fn adamw_update(
    params: &mut [&mut Matrix],
    state: &ExpertState,
    lr: f64,
    cfg: &OptimizerConfig,
) -> Result<()> {
    if state.t == 0 {
        return Err(Error::contract("AdamW update before any moment tracking"));
    }
    if params.len() != state.m.len() {
        return Err(Error::contract(format!(
            "expected {} parameter tensors, got {}",
            state.m.len(),
            params.len()
        )));
    }
    let t = i32::try_from(state.t).unwrap_or(i32::MAX);
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - lr * state.weight_decay;
    let step = lr / bc1;
    for ((p, m), v) in params.iter_mut().zip(&state.m).zip(&state.v) {
        for ((theta, &mi), &vi) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
            *theta = *theta * decay - step * (mi / ((vi / bc2).sqrt() + cfg.eps));
        }
    }
    Ok(())
}

/// Applies [`adamw_update`] to every winner of `module`. Losers are left
/// untouched.
pub fn apply_topk_update(
    module: &mut MolfModule,
    states: &[ExpertState],
    winners: &[usize],
    lrs: &[f64],
    cfg: &OptimizerConfig,
) -> Result<()> {
    let n = module.routable_count();
    if states.len() != n || lrs.len() != n {
        return Err(Error::contract(format!(
            "module {} has {n} experts but {} states / {} rates",
            module.name,
            states.len(),
            lrs.len()
        )));
    }
    for &w in winners {
        if w >= n {
            return Err(Error::contract(format!(
                "winner {w} out of range for module {} with {n} experts",
                module.name
            )));
        }
    }
    for &w in winners {
        let mut params = module.expert_params_mut(w);
        adamw_update(&mut params, &states[w], lrs[w], cfg)?;
    }
    Ok(())
}

fn clip_module_grads(grads: &mut [Vec<Matrix>], max_norm: f64) {
    let norm = grads
        .iter()
        .flatten()
        .map(Matrix::frobenius_sq)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            *g = g.scale(s);
        }
    }
}

/// The routing optimizer. Holds one [`ExpertState`] per routable expert of
/// every module, in network order.
#[derive(Clone, Debug)]
pub struct SparseAdamW {
    pub config: OptimizerConfig,
    pub states: Vec<Vec<ExpertState>>,
}

impl SparseAdamW {
    pub fn new(config: OptimizerConfig, net: &Network) -> Result<Self> {
        config.validate()?;
        if config.scoring != ScoringMode::Dense {
            for m in &net.modules {
                if config.k_top > m.routable_count() {
                    return Err(Error::Config(format!(
                        "k_top = {} exceeds the {} experts of module {}",
                        config.k_top,
                        m.routable_count(),
                        m.name
                    )));
                }
            }
        }
        let states = net
            .modules
            .iter()
            .map(|m| ExpertState::for_module(m, &config))
            .collect();
        Ok(SparseAdamW { config, states })
    }

    /// Learning rate of each expert of module `module` at schedule step `step`.
    pub fn learning_rates(&self, module: usize, step: usize) -> Vec<f64> {
        let mult = lr_at(&self.config.schedule, step);
        self.states[module]
            .iter()
            .map(|s| s.lr_base * mult)
            .collect()
    }

    /// One optimizer step with routing decided by the configured scores.
    pub fn step(
        &mut self,
        net: &mut Network,
        grads: NetworkGrads,
        step: usize,
    ) -> Result<Vec<RoutingDecision>> {
        let k = self.config.k_top;
        let dense = self.config.scoring == ScoringMode::Dense;
        self.step_routed(net, grads, step, |_, scores| {
            if dense {
                select_winners(scores, scores.len())
            } else {
                select_winners(scores, k)
            }
        })
    }

    /// One optimizer step where `route(module_index, scores)` picks the
    /// winners. Moments are tracked for every expert regardless of the
    /// choice.
    pub fn step_routed(
        &mut self,
        net: &mut Network,
        mut grads: NetworkGrads,
        step: usize,
        mut route: impl FnMut(usize, &[ScoreRecord]) -> Result<Vec<usize>>,
    ) -> Result<Vec<RoutingDecision>> {
        if grads.len() != net.modules.len() || self.states.len() != net.modules.len() {
            return Err(Error::contract(format!(
                "network has {} modules, got {} gradient sets and {} state sets",
                net.modules.len(),
                grads.len(),
                self.states.len()
            )));
        }
        let cfg = &self.config;
        let mut decisions = Vec::with_capacity(net.modules.len());
        for (mi, ((module, states), module_grads)) in net
            .modules
            .iter_mut()
            .zip(&mut self.states)
            .zip(&mut grads)
            .enumerate()
        {
            let name = module.name.clone();
            let ctx = |e: Error| e.context(&format!("module {name}"));
            if module_grads.len() != states.len() {
                return Err(ctx(Error::contract(format!(
                    "{} experts but {} gradient sets",
                    states.len(),
                    module_grads.len()
                ))));
            }
            if let Some(max_norm) = cfg.grad_clip {
                clip_module_grads(module_grads, max_norm);
            }

            for (ei, (state, g)) in states.iter_mut().zip(module_grads.iter()).enumerate() {
                track_moments(state, g, cfg)
                    .map_err(|e| ctx(e.context(&format!("expert {ei}"))))?;
            }

            let mult = lr_at(&cfg.schedule, step);
            let lrs: Vec<f64> = states.iter().map(|s| s.lr_base * mult).collect();
            let scores = score_experts(states, &lrs, cfg.scoring, cfg.eps);
            let winners = route(mi, &scores).map_err(ctx)?;
            apply_topk_update(module, states, &winners, &lrs, cfg).map_err(ctx)?;

            decisions.push(RoutingDecision {
                step,
                module_name: name,
                scores: scores.iter().map(|s| s.score).collect(),
                winners,
                lr_used: lrs,
                scoring_mode: cfg.scoring,
            });
        }
        Ok(decisions)
    }
}
