//! Built-in self checks: gradients against finite differences, the
//! first-order loss-drop prediction, fusion exactness, moment tracking for
//! losing experts and equivalence with plain AdamW.

use crate::error::Result;
use crate::fusion::verify_fusion;
use crate::model::{
    build_mlp, ExpertClass, ExpertLayout, ExpertSpec, LoraExpert, Mode, MolfModule, Network,
    NetworkSpec, Target,
};
use crate::numerics::{finite_diff_grad, relative_error, Graph, Matrix, NodeId, Rng, DEFAULT_STEP};
use crate::optimizer::{adamw_update, track_moments, ExpertState, OptimizerConfig, SparseAdamW};
use crate::scoring::{predicted_loss_drop, select_winners};

pub const GRADIENT_TOLERANCE: f64 = 1e-4;
pub const FUSION_TOLERANCE: f64 = 1e-9;
pub const EPD_TOLERANCE: f64 = 0.10;

const FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Keeps entries clear of the ReLU kink so central differences stay valid.
fn away_from_zero(m: Matrix) -> Matrix {
    m.map(|v| if v.abs() < 1e-2 { 0.5 } else { v })
}

/// Largest relative error of one graph's leaf gradients.
fn graph_error(
    leaves: &[Matrix],
    build: impl Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
) -> Result<f64> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = leaves.iter().map(|l| g.leaf(l.clone())).collect();
    let loss = build(&mut g, &ids)?;
    let grads = g.backward(loss, &ids)?;
    let mut worst = 0.0_f64;
    for (i, id) in ids.iter().enumerate() {
        let numeric = finite_diff_grad(
            |x| {
                let mut g = Graph::new();
                let ids: Vec<NodeId> = leaves
                    .iter()
                    .enumerate()
                    .map(|(j, l)| g.leaf(if j == i { x.clone() } else { l.clone() }))
                    .collect();
                let loss = build(&mut g, &ids)?;
                Ok(g.value(loss).get(0, 0))
            },
            &leaves[i],
            DEFAULT_STEP,
        )?;
        worst = worst.max(relative_error(&grads[id], &numeric, FLOOR));
    }
    Ok(worst)
}

/// Worst relative gradient error over every primitive op for one seed.
/// Non-scalar ops are reduced through a mean squared error to a random target.
pub fn op_gradient_error(seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let mut gm = |r, c| rng.gaussian_matrix(r, c, 1.0);
    let (a, b, c, bias, t34, t32) = (gm(3, 4), gm(4, 2), gm(3, 4), gm(3, 1), gm(3, 4), gm(3, 2));
    let logits = gm(4, 5);
    let mut rng = Rng::new(seed ^ 0x5eed);
    let mask = Matrix::from_fn(
        3,
        4,
        |_, _| if rng.uniform() < 0.3 { 0.0 } else { 1.0 / 0.7 },
    );
    let labels: Vec<usize> = (0..5).map(|_| (rng.next_u64() % 4) as usize).collect();

    let errors = [
        graph_error(&[a.clone(), b, t32], |g, id| {
            let y = g.matmul(id[0], id[1])?;
            g.mse(y, id[2])
        })?,
        graph_error(&[a.clone(), c.clone(), t34.clone()], |g, id| {
            let y = g.add(id[0], id[1])?;
            g.mse(y, id[2])
        })?,
        graph_error(&[a.clone(), bias, t34.clone()], |g, id| {
            let y = g.add_bias(id[0], id[1])?;
            g.mse(y, id[2])
        })?,
        graph_error(&[a.clone(), t34.clone()], |g, id| {
            let y = g.scale(id[0], -1.7)?;
            g.mse(y, id[1])
        })?,
        graph_error(&[away_from_zero(c), t34.clone()], |g, id| {
            let y = g.relu(id[0])?;
            g.mse(y, id[1])
        })?,
        graph_error(&[a, t34], |g, id| {
            let y = g.dropout_with_mask(id[0], mask.clone())?;
            g.mse(y, id[1])
        })?,
        graph_error(&[logits], |g, id| g.softmax_cross_entropy(id[0], &labels))?,
    ];
    Ok(errors.into_iter().fold(0.0, f64::max))
}

fn random_network(seed: u64) -> Result<Network> {
    let mode = if seed.is_multiple_of(2) {
        Mode::Molf
    } else {
        Mode::MolfE
    };
    let mut spec = NetworkSpec::new(
        vec![6, 5, 4],
        ExpertLayout::Uniform(vec![
            ExpertSpec::new(1),
            ExpertSpec {
                rank: 3,
                alpha: 4.0,
            },
        ]),
        mode,
    );
    spec.dropout_rate = 0.25;
    let mut rng = Rng::new(seed);
    let mut net = build_mlp(&spec, &mut rng)?;
    for m in &mut net.modules {
        for e in &mut m.experts {
            e.b = rng.gaussian_matrix(e.b.rows(), e.b.cols(), 0.3);
        }
        if let Some(b) = &mut m.bias {
            *b = rng.gaussian_matrix(b.rows(), 1, 0.1);
        }
    }
    Ok(net)
}

/// Worst relative error of the full network gradient (every routable expert,
/// both loss kinds, dropout active) for one seed.
pub fn network_gradient_error(seed: u64) -> Result<f64> {
    let net = random_network(seed)?;
    let mut rng = Rng::new(seed.wrapping_add(1));
    let x = rng.gaussian_matrix(6, 4, 1.0);
    let targets = [
        Target::Regression(rng.gaussian_matrix(4, 4, 1.0)),
        Target::Classes(vec![0, 3, 1, 2]),
    ];
    let mask_seed = seed.wrapping_add(2);
    let mut worst = 0.0_f64;
    for target in &targets {
        let (_, grads) = net.loss_and_grads(&x, target, true, &mut Rng::new(mask_seed))?;
        for (mi, module) in net.modules.iter().enumerate() {
            for e in 0..module.routable_count() {
                for (j, p) in module.expert_params(e).into_iter().enumerate() {
                    let numeric = finite_diff_grad(
                        |v| {
                            let mut probe = net.clone();
                            *probe.modules[mi].expert_params_mut(e)[j] = v.clone();
                            probe.loss(&x, target, true, &mut Rng::new(mask_seed))
                        },
                        p,
                        DEFAULT_STEP,
                    )?;
                    worst = worst.max(relative_error(&grads[mi][e][j], &numeric, FLOOR));
                }
            }
        }
    }
    Ok(worst)
}

/// Setup for comparing `predicted_loss_drop` with the loss drop a step
/// actually achieves on `L = 1/2 sum c_i (theta_i - theta*_i)^2`.
#[derive(Clone, Debug)]
pub struct EpdProbe {
    pub dim: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub window: usize,
    /// Scale of `theta*`; the start point is the origin.
    pub target_scale: f64,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct EpdFidelity {
    /// Mean of `|measured - predicted| / measured` over the window.
    pub mean_relative_error: f64,
    /// Mean of `measured / predicted`.
    pub mean_ratio: f64,
    /// Mean of `sqrt(1 - b2^t) / (1 - b1^t)`, the factor separating the
    /// bias-corrected step from the raw-moment prediction.
    pub mean_bias_factor: f64,
}

pub fn epd_fidelity(probe: &EpdProbe) -> Result<EpdFidelity> {
    let cfg = OptimizerConfig {
        lambda_fft: 0.0,
        lr_fft: probe.lr,
        ..OptimizerConfig::default()
    };
    let mut rng = Rng::new(probe.seed);
    let curv = Matrix::from_fn(probe.dim, 1, |_, _| 0.5 + 1.5 * rng.uniform());
    let target = rng.gaussian_matrix(probe.dim, 1, probe.target_scale);
    let loss = |theta: &Matrix| -> f64 {
        theta
            .data()
            .iter()
            .zip(target.data())
            .zip(curv.data())
            .map(|((t, s), c)| 0.5 * c * (t - s) * (t - s))
            .sum()
    };
    let mut theta = Matrix::zeros(probe.dim, 1);
    let mut state = ExpertState::new(ExpertClass::Fft, &[(probe.dim, 1)], probe.lr, 0.0);
    let (mut err, mut ratio, mut factor) = (0.0, 0.0, 0.0);
    for step in 0..probe.warmup_steps + probe.window {
        let grad = theta.sub(&target)?.hadamard(&curv)?;
        track_moments(&mut state, &[grad], &cfg)?;
        let predicted = predicted_loss_drop(&state, probe.lr, cfg.eps);
        let before = loss(&theta);
        adamw_update(&mut [&mut theta], &state, probe.lr, &cfg)?;
        let measured = before - loss(&theta);
        if step >= probe.warmup_steps {
            let t = state.t as i32;
            err += (measured - predicted).abs() / measured;
            ratio += measured / predicted;
            factor += (1.0 - cfg.beta2.powi(t)).sqrt() / (1.0 - cfg.beta1.powi(t));
        }
    }
    let n = probe.window.max(1) as f64;
    Ok(EpdFidelity {
        mean_relative_error: err / n,
        mean_ratio: ratio / n,
        mean_bias_factor: factor / n,
    })
}

/// Largest superposed-versus-fused deviation over 1 to 3 experts of ranks
/// 1, 8, 64 and 128, with 100 probes each.
pub fn fusion_deviation(seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let (d_out, d_in) = (96, 128);
    let mut worst = 0.0_f64;
    for count in 1..=3 {
        for rank in [1, 8, 64, 128] {
            let experts = (0..count)
                .map(|i| {
                    let mut e = LoraExpert::new(rank, 16.0 / (i + 1) as f64, d_in, d_out)?;
                    e.a = rng.gaussian_matrix(rank, d_in, (1.0 / d_in as f64).sqrt());
                    e.b = rng.gaussian_matrix(d_out, rank, 0.1);
                    Ok(e)
                })
                .collect::<Result<Vec<_>>>()?;
            let base = rng.gaussian_matrix(d_out, d_in, (1.0 / d_in as f64).sqrt());
            let bias = Some(rng.gaussian_matrix(d_out, 1, 0.1));
            let module =
                MolfModule::new(format!("r{rank}x{count}"), base, bias, experts, 0.0, true)?;
            let report = verify_fusion(&module, 100, &mut rng, FUSION_TOLERANCE, false)?;
            worst = worst.max(report.max_relative_deviation);
        }
    }
    Ok(worst)
}

fn two_expert_module(rng: &mut Rng) -> Result<MolfModule> {
    let mut module = MolfModule::new(
        "m",
        rng.gaussian_matrix(4, 5, 0.5),
        Some(Matrix::zeros(4, 1)),
        vec![LoraExpert::new(2, 16.0, 5, 4)?],
        0.0,
        true,
    )?;
    module.init_experts(rng, 1.0);
    Ok(module)
}

/// Trains with expert 0 always winning and replays the EMA of the losing
/// adapter from the recorded gradients. True when `(m, v, t)` agree bitwise.
pub fn loser_moments_match_replay(steps: usize, seed: u64) -> Result<bool> {
    let mut rng = Rng::new(seed);
    let mut net = Network::single(two_expert_module(&mut rng)?);
    let cfg = OptimizerConfig::default();
    let mut opt = SparseAdamW::new(cfg.clone(), &net)?;
    let shapes: Vec<_> = net.modules[0]
        .expert_params(1)
        .iter()
        .map(|p| p.shape())
        .collect();
    let mut m: Vec<Matrix> = shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect();
    let mut v = m.clone();
    for step in 0..steps {
        let x = rng.gaussian_matrix(5, 8, 1.0);
        let y = rng.gaussian_matrix(4, 8, 1.0);
        let (_, grads) = net.loss_and_grads(&x, &Target::Regression(y), true, &mut rng)?;
        for ((g, mm), vv) in grads[0][1].iter().zip(&mut m).zip(&mut v) {
            for ((&gi, mi), vi) in g.data().iter().zip(mm.data_mut()).zip(vv.data_mut()) {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            }
        }
        opt.step_routed(&mut net, grads, step, |_, _| Ok(vec![0]))?;
    }
    let s = &opt.states[0][1];
    Ok(s.t == steps as u64
        && s.m.iter().zip(&m).all(|(a, b)| a.bitwise_eq(b))
        && s.v.iter().zip(&v).all(|(a, b)| a.bitwise_eq(b)))
}

/// Runs a single dense expert through the routing optimizer and through a
/// direct bias-corrected AdamW loop. True when the weights agree bitwise.
pub fn single_expert_matches_adamw(steps: usize, seed: u64) -> Result<bool> {
    let mut rng = Rng::new(seed);
    let base = rng.gaussian_matrix(4, 5, 0.5);
    let mut net = Network::single(MolfModule::new("m", base.clone(), None, vec![], 0.0, true)?);
    let cfg = OptimizerConfig::default();
    let mut opt = SparseAdamW::new(cfg.clone(), &net)?;
    let (b1, b2, eps, lr, wd) = (cfg.beta1, cfg.beta2, cfg.eps, cfg.lr_fft, cfg.lambda_fft);
    let mut w = base;
    let mut m = Matrix::zeros(4, 5);
    let mut v = Matrix::zeros(4, 5);
    for step in 0..steps {
        let x = rng.gaussian_matrix(5, 8, 1.0);
        let y = rng.gaussian_matrix(4, 8, 1.0);
        let (_, grads) = net.loss_and_grads(&x, &Target::Regression(y), true, &mut rng)?;
        let g = grads[0][0][0].clone();
        let t = (step + 1) as i32;
        for ((wi, mi), (vi, &gi)) in w
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut().iter_mut().zip(g.data()))
        {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            *wi = *wi * (1.0 - lr * wd)
                - lr / (1.0 - b1.powi(t)) * (*mi / ((*vi / (1.0 - b2.powi(t))).sqrt() + eps));
        }
        opt.step(&mut net, grads, step)?;
    }
    Ok(net.modules[0].base.bitwise_eq(&w))
}

/// Top-1 with every candidate tied goes to the lowest index.
fn tie_break_holds() -> Result<bool> {
    let scores: Vec<_> = (0..3)
        .map(|i| crate::scoring::ScoreRecord {
            expert_index: i,
            score: 0.25,
            n_params: 1,
            lr_used: 1e-3,
        })
        .collect();
    Ok(select_winners(&scores, 1)? == vec![0])
}

fn outcome(name: &str, result: Result<(bool, String)>) -> CheckOutcome {
    match result {
        Ok((passed, detail)) => CheckOutcome {
            name: name.into(),
            passed,
            detail,
        },
        Err(e) => CheckOutcome {
            name: name.into(),
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

/// The suite behind `molf check`.
pub fn run_all() -> Vec<CheckOutcome> {
    vec![
        outcome(
            "op gradients",
            (|| {
                let worst = (0..20)
                    .map(op_gradient_error)
                    .try_fold(0.0_f64, |w, e| e.map(|e| w.max(e)))?;
                Ok((
                    worst <= GRADIENT_TOLERANCE,
                    format!("max relative error {worst:.2e} over 20 seeds"),
                ))
            })(),
        ),
        outcome(
            "network gradients",
            (|| {
                let worst = (0..20)
                    .map(network_gradient_error)
                    .try_fold(0.0_f64, |w, e| e.map(|e| w.max(e)))?;
                Ok((
                    worst <= GRADIENT_TOLERANCE,
                    format!("max relative error {worst:.2e} over 20 seeds"),
                ))
            })(),
        ),
        outcome(
            "predicted loss drop",
            (|| {
                let fid = epd_fidelity(&EpdProbe {
                    dim: 32,
                    lr: 1e-3,
                    warmup_steps: 5000,
                    window: 100,
                    target_scale: 100.0,
                    seed: 7,
                })?;
                Ok((
                    fid.mean_relative_error <= EPD_TOLERANCE,
                    format!(
                        "mean relative error {:.3} with mature moments (measured/predicted {:.3})",
                        fid.mean_relative_error, fid.mean_ratio
                    ),
                ))
            })(),
        ),
        outcome(
            "fusion exactness",
            (|| {
                let worst = fusion_deviation(3)?;
                Ok((
                    worst <= FUSION_TOLERANCE,
                    format!("max relative deviation {worst:.2e}"),
                ))
            })(),
        ),
        outcome(
            "loser moments",
            (|| {
                let ok = loser_moments_match_replay(500, 5)?;
                Ok((ok, "500 steps, replayed EMA compared bitwise".into()))
            })(),
        ),
        outcome(
            "single-expert AdamW",
            (|| {
                let ok = single_expert_matches_adamw(200, 9)?;
                Ok((ok, "200 steps compared bitwise".into()))
            })(),
        ),
        outcome(
            "tie break",
            tie_break_holds().map(|ok| (ok, "lowest index wins".into())),
        ),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        for c in run_all() {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
