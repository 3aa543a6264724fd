//! Folding trained adapters back into the dense weight.

use crate::error::{Error, Result};
use crate::model::{MolfModule, Network};
use crate::numerics::{Matrix, Rng};

/// `W + sum_i (alpha_i / sqrt(r_i)) B_i A_i`. The module is not modified.
pub fn fuse(module: &MolfModule) -> Result<Matrix> {
    module.validate()?;
    let mut fused = module.base.clone();
    for (i, e) in module.experts.iter().enumerate() {
        let delta = e
            .b
            .matmul(&e.a)
            .map_err(|err| Error::contract(format!("module {} expert {i}: {err}", module.name)))?;
        fused.add_assign(&delta.scale(e.scale()))?;
    }
    Ok(fused)
}

/// Replaces the base weight with the fused weight and drops every adapter.
/// The result is a plain dense layer; a MoLF-E module becomes trainable
/// again since it no longer has anything else to route to.
pub fn collapse(module: &mut MolfModule) -> Result<()> {
    module.base = fuse(module)?;
    module.experts.clear();
    module.base_trainable = true;
    Ok(())
}

/// Fuses every module of a network into a copy with no adapters.
pub fn fuse_network(net: &Network) -> Result<Network> {
    let mut fused = net.clone();
    for m in &mut fused.modules {
        collapse(m)?;
    }
    fused.mode = crate::model::Mode::Molf;
    Ok(fused)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionReport {
    pub module: String,
    pub probes: usize,
    /// Largest `||y_superposed - y_fused|| / ||y_fused||` over the probes.
    pub max_relative_deviation: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares the superposed forward pass with `W_final x + b` on `probes`
/// random Gaussian inputs. Dropout makes the comparison meaningless, so
/// `training = true` is rejected.
pub fn verify_fusion(
    module: &MolfModule,
    probes: usize,
    rng: &mut Rng,
    tol: f64,
    training: bool,
) -> Result<FusionReport> {
    if training {
        return Err(Error::contract(
            "fusion can only be verified in inference mode",
        ));
    }
    if !(tol > 0.0) {
        return Err(Error::contract(format!(
            "tolerance must be positive, got {tol}"
        )));
    }
    let fused = fuse(module)?;
    let mut worst = 0.0_f64;
    for _ in 0..probes {
        let x = rng.gaussian_matrix(module.d_in(), 1, 1.0);
        let superposed = module.forward(&x, false, rng)?;
        let mut direct = fused.matmul(&x)?;
        if let Some(b) = &module.bias {
            direct = direct.add_column(b)?;
        }
        let diff = superposed.sub(&direct)?.frobenius_norm();
        let scale = direct.frobenius_norm();
        let dev = if scale > 0.0 { diff / scale } else { diff };
        worst = worst.max(dev);
    }
    Ok(FusionReport {
        module: module.name.clone(),
        probes,
        max_relative_deviation: worst,
        tolerance: tol,
        passed: worst <= tol,
    })
}
