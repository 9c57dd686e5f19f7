//! Dirichlet density and sampling over the probability simplex.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};
use crate::special::lgamma_unchecked;

const SIMPLEX_TOL: f64 = 1e-9;

fn check_alpha(alpha: &[f64]) -> Result<()> {
    if alpha.is_empty() {
        return Err(Error::Empty("dirichlet concentration".into()));
    }
    if let Some(a) = alpha.iter().find(|a| !(**a > 0.0 && a.is_finite())) {
        return Err(Error::Domain(format!("concentration must be finite and > 0, got {a}")));
    }
    Ok(())
}

/// ln B(α) = Σ ln Γ(α_k) − ln Γ(Σ α_k).
pub fn log_multivariate_beta(alpha: &[f64]) -> Result<f64> {
    check_alpha(alpha)?;
    let total: f64 = alpha.iter().sum();
    Ok(alpha.iter().map(|&a| lgamma_unchecked(a)).sum::<f64>() - lgamma_unchecked(total))
}

/// ln D(p | α) = −ln B(α) + Σ (α_k − 1) ln p_k.
pub fn log_density(p: &[f64], alpha: &[f64]) -> Result<f64> {
    check_alpha(alpha)?;
    if p.len() != alpha.len() {
        return Err(Error::Dimension(format!("simplex point has {} entries, concentration has {}", p.len(), alpha.len())));
    }
    let sum: f64 = p.iter().sum();
    if p.iter().any(|&x| !(x > 0.0)) || (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::Domain(format!("point is not strictly inside the simplex (sum {sum})")));
    }
    let kernel: f64 = p.iter().zip(alpha).map(|(&pk, &ak)| (ak - 1.0) * pk.ln()).sum();
    Ok(kernel - log_multivariate_beta(alpha)?)
}

/// Draws one simplex point by normalizing independent Gamma(α_k, 1) draws.
pub fn sample_with<R: Rng + ?Sized>(rng: &mut R, alpha: &[f64]) -> Result<Vec<f64>> {
    check_alpha(alpha)?;
    let mut draws = Vec::with_capacity(alpha.len());
    for &a in alpha {
        let gamma = Gamma::new(a, 1.0).map_err(|e| Error::Domain(e.to_string()))?;
        draws.push(gamma.sample(rng));
    }
    let total: f64 = draws.iter().sum();
    if total <= 0.0 {
        // Every draw underflowed; only reachable for tiny concentrations.
        let k = alpha.len() as f64;
        return Ok(vec![1.0 / k; alpha.len()]);
    }
    draws.iter_mut().for_each(|d| *d /= total);
    Ok(draws)
}

pub fn sample(alpha: &[f64], seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_with(&mut rng, alpha)
}
