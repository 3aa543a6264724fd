//! Linear regression tasks whose optimal update has a prescribed singular
//! spectrum.
//!
//! The teacher is `W* = W_base + dW*` with `dW* = U diag(sigma) V^T`. Inputs
//! are whitened Gaussians, so the expected loss of a student `W_hat` (on the
//! `1/2 ||.||^2` scale used for training) is `1/2 ||W* - W_hat||_F^2` plus
//! label noise. A rank-r student can therefore never go below half the tail
//! energy `sum_{i > r} sigma_i^2`.

use std::fmt;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

pub const DEFAULT_HEAVY_TAIL_EXPONENT: f64 = 0.1;
pub const DEFAULT_CONCENTRATED_RANK: usize = 8;
pub const DEFAULT_DIM: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub enum Regime {
    /// `sigma_i = i^(-exponent)`.
    HeavyTail { exponent: f64 },
    /// `sigma_i = 1` for `i <= rank`, else 0.
    Concentrated { rank: usize },
    /// Explicit descending spectrum, zero-padded to `min(d_out, d_in)`.
    Custom(Vec<f64>),
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Regime::HeavyTail { exponent } => write!(f, "heavy_tail(p={exponent})"),
            Regime::Concentrated { rank } => write!(f, "concentrated(r={rank})"),
            Regime::Custom(s) => write!(f, "custom({} values)", s.len()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SpectralTask {
    pub d_out: usize,
    pub d_in: usize,
    pub base: Matrix,
    pub delta_star: Matrix,
    /// Descending, length `min(d_out, d_in)`.
    pub spectrum: Vec<f64>,
    pub regime: Regime,
    pub noise_std: f64,
    /// `d_out x k`, orthonormal columns.
    pub left: Matrix,
    /// `d_in x k`, orthonormal columns.
    pub right: Matrix,
}

impl SpectralTask {
    pub fn teacher(&self) -> Matrix {
        self.base
            .add(&self.delta_star)
            .expect("shapes fixed at construction")
    }

    /// `sum_{i <= r} sigma_i u_i v_i^T`, the Eckart–Young optimal rank-r
    /// approximation of `dW*`.
    pub fn best_rank_approx(&self, rank: usize) -> Matrix {
        let r = rank.min(self.spectrum.len());
        let u = Matrix::from_fn(self.d_out, r, |i, j| self.left.get(i, j) * self.spectrum[j]);
        let vt = Matrix::from_fn(r, self.d_in, |i, j| self.right.get(j, i));
        u.matmul(&vt).expect("factor shapes agree")
    }

    /// Expected excess loss of the affine student `x -> W x + b` under
    /// whitened inputs: `1/2 ||W* - W||_F^2 + 1/2 ||b||^2`.
    pub fn population_loss(&self, weight: &Matrix, bias: Option<&Matrix>) -> Result<f64> {
        let gap = self.teacher().sub(weight)?;
        let bias_sq = bias.map_or(0.0, Matrix::frobenius_sq);
        Ok(0.5 * (gap.frobenius_sq() + bias_sq))
    }

    /// Floor on the population loss of any student whose update over the base is rank `r`.
    pub fn rank_floor(&self, rank: usize) -> f64 {
        0.5 * tail_energy(&self.spectrum, rank as i64).expect("spectrum is descending")
    }
}

fn spectrum_for(regime: &Regime, k: usize) -> Result<Vec<f64>> {
    match regime {
        Regime::HeavyTail { exponent } => {
            if !exponent.is_finite() || *exponent < 0.0 {
                return Err(Error::contract(format!(
                    "power-law exponent must be >= 0, got {exponent}"
                )));
            }
            Ok((1..=k).map(|i| (i as f64).powf(-exponent)).collect())
        }
        Regime::Concentrated { rank } => {
            if *rank > k {
                return Err(Error::contract(format!(
                    "concentrated rank {rank} exceeds min dimension {k}"
                )));
            }
            Ok((0..k).map(|i| if i < *rank { 1.0 } else { 0.0 }).collect())
        }
        Regime::Custom(values) => {
            if values.len() > k {
                return Err(Error::contract(format!(
                    "{} singular values for min dimension {k}",
                    values.len()
                )));
            }
            if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::contract("singular values must be finite and >= 0"));
            }
            if values.windows(2).any(|w| w[1] > w[0]) {
                return Err(Error::contract("singular values must be descending"));
            }
            let mut s = values.clone();
            s.resize(k, 0.0);
            Ok(s)
        }
    }
}

/// Orthonormal `d x k` factor from the thin QR of a Gaussian matrix, with
/// column signs fixed so that `R` has a non-negative diagonal.
fn orthonormal_factor(d: usize, k: usize, rng: &mut Rng) -> Matrix {
    let g = rng.gaussian_matrix(d, k, 1.0);
    let qr = DMatrix::from_row_slice(d, k, g.data()).qr();
    let q = qr.q();
    let r = qr.r();
    Matrix::from_fn(d, k, |i, j| {
        let sign = if r[(j, j)] < 0.0 { -1.0 } else { 1.0 };
        sign * q[(i, j)]
    })
}

/// Draws `W_base ~ N(0, 1/d_in)`, then orthonormal `U`, `V`, and builds
/// `dW* = U diag(sigma) V^T` for the given regime.
pub fn gen_spectral_target(
    d_out: usize,
    d_in: usize,
    regime: Regime,
    noise_std: f64,
    rng: &mut Rng,
) -> Result<SpectralTask> {
    if d_out == 0 || d_in == 0 {
        return Err(Error::contract("task dimensions must be positive"));
    }
    if !(noise_std >= 0.0) {
        return Err(Error::contract(format!(
            "noise_std must be >= 0, got {noise_std}"
        )));
    }
    let k = d_out.min(d_in);
    let spectrum = spectrum_for(&regime, k)?;
    let base = rng.gaussian_matrix(d_out, d_in, 1.0 / (d_in as f64).sqrt());
    let left = orthonormal_factor(d_out, k, rng);
    let right = orthonormal_factor(d_in, k, rng);
    let scaled = Matrix::from_fn(d_out, k, |i, j| left.get(i, j) * spectrum[j]);
    let delta_star = scaled.matmul(&right.transpose())?;
    Ok(SpectralTask {
        d_out,
        d_in,
        base,
        delta_star,
        spectrum,
        regime,
        noise_std,
        left,
        right,
    })
}

/// `sum_{i > rank} sigma_i^2`.
pub fn tail_energy(spectrum: &[f64], rank: i64) -> Result<f64> {
    if rank < 0 {
        return Err(Error::contract(format!("rank must be >= 0, got {rank}")));
    }
    if spectrum.windows(2).any(|w| w[1] > w[0]) {
        return Err(Error::contract("spectrum must be descending"));
    }
    let skip = usize::try_from(rank).unwrap_or(usize::MAX);
    Ok(spectrum.iter().skip(skip).map(|s| s * s).sum())
}

/// Whitened inputs `X ~ N(0, I)` (`d_in x batch`) and labels
/// `Y = W* X + noise_std * N(0, I)`.
pub fn sample_batch(task: &SpectralTask, batch: usize, rng: &mut Rng) -> Result<(Matrix, Matrix)> {
    if batch == 0 {
        return Err(Error::contract("batch size must be >= 1"));
    }
    let x = rng.gaussian_matrix(task.d_in, batch, 1.0);
    let mut y = task.teacher().matmul(&x)?;
    if task.noise_std > 0.0 {
        y.add_assign(&rng.gaussian_matrix(task.d_out, batch, task.noise_std))?;
    }
    Ok((x, y))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tail_energy_hand_sum() {
        assert_eq!(tail_energy(&[3.0, 2.0, 1.0], 2).unwrap(), 1.0);
        assert_eq!(tail_energy(&[3.0, 2.0, 1.0], 3).unwrap(), 0.0);
        assert_eq!(tail_energy(&[3.0, 2.0, 1.0], 10).unwrap(), 0.0);
        assert_eq!(tail_energy(&[3.0, 2.0, 1.0], 0).unwrap(), 14.0);
    }

    #[test]
    fn negative_rank_is_rejected() {
        assert!(matches!(tail_energy(&[1.0], -1), Err(Error::Contract(_))));
    }

    #[test]
    fn concentrated_rank_too_large() {
        let err = gen_spectral_target(
            4,
            6,
            Regime::Concentrated { rank: 5 },
            0.0,
            &mut Rng::new(0),
        );
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn concentrated_has_exact_rank() {
        let t = gen_spectral_target(
            16,
            16,
            Regime::Concentrated { rank: 4 },
            0.0,
            &mut Rng::new(3),
        )
        .unwrap();
        assert_eq!(t.spectrum.iter().filter(|&&s| s != 0.0).count(), 4);
        assert_eq!(tail_energy(&t.spectrum, 4).unwrap(), 0.0);
        assert_eq!(tail_energy(&t.spectrum, 9).unwrap(), 0.0);
    }

    #[test]
    fn heavy_tail_closed_form() {
        let t = gen_spectral_target(
            32,
            32,
            Regime::HeavyTail { exponent: 0.1 },
            0.0,
            &mut Rng::new(3),
        )
        .unwrap();
        let expected: f64 = (9..=32).map(|i| (i as f64).powf(-0.2)).sum();
        let got = tail_energy(&t.spectrum, 8).unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn factors_are_orthonormal() {
        let t = gen_spectral_target(
            12,
            9,
            Regime::HeavyTail { exponent: 0.5 },
            0.0,
            &mut Rng::new(8),
        )
        .unwrap();
        for f in [&t.left, &t.right] {
            let gram = f.transpose().matmul(f).unwrap();
            let err = gram.sub(&Matrix::identity(f.cols())).unwrap().max_abs();
            assert!(err < 1e-10, "{err}");
        }
    }

    #[test]
    fn custom_spectrum_validation() {
        let mut rng = Rng::new(0);
        assert!(gen_spectral_target(3, 3, Regime::Custom(vec![1.0, 2.0]), 0.0, &mut rng).is_err());
        assert!(gen_spectral_target(3, 3, Regime::Custom(vec![1.0; 4]), 0.0, &mut rng).is_err());
        let t = gen_spectral_target(3, 3, Regime::Custom(vec![2.0, 1.0]), 0.0, &mut rng).unwrap();
        assert_eq!(t.spectrum, vec![2.0, 1.0, 0.0]);
    }

    #[test]
    fn noiseless_teacher_has_zero_batch_loss() {
        let mut rng = Rng::new(4);
        let t = gen_spectral_target(5, 7, Regime::Concentrated { rank: 2 }, 0.0, &mut rng).unwrap();
        let (x, y) = sample_batch(&t, 16, &mut rng).unwrap();
        let pred = t.teacher().matmul(&x).unwrap();
        assert_eq!(pred.sub(&y).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn zero_batch_is_rejected() {
        let mut rng = Rng::new(4);
        let t = gen_spectral_target(2, 2, Regime::Concentrated { rank: 1 }, 0.0, &mut rng).unwrap();
        assert!(sample_batch(&t, 0, &mut rng).is_err());
    }

    #[test]
    fn best_rank_student_sits_on_the_floor() {
        let mut rng = Rng::new(21);
        let t = gen_spectral_target(20, 16, Regime::HeavyTail { exponent: 0.3 }, 0.0, &mut rng)
            .unwrap();
        for r in [0, 1, 4, 8, 16] {
            let student = t.base.add(&t.best_rank_approx(r)).unwrap();
            let loss = t.population_loss(&student, None).unwrap();
            let floor = t.rank_floor(r);
            assert!((loss - floor).abs() < 1e-10, "r={r}: {loss} vs {floor}");
        }
    }
}
