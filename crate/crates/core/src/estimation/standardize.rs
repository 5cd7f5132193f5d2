//! Rescaling and recentering of the latent mixture to zero mean and identity
//! covariance, with compensating changes to intercepts and loadings.

use crate::error::Result;
use crate::linalg;
use crate::model::{Loadings, MixtureParams, ModelParams};

/// Maps `z → L⁻¹(z − m)`, where `m` and `V = L Lᵀ` are the overall mixture
/// mean and covariance, and sets `λ_0 → λ_0 + Λ m`, `Λ → Λ L` so `f(y)` is
/// unchanged. `L` is lower triangular, so masked loadings stay zero.
pub fn standardize(params: &ModelParams) -> Result<ModelParams> {
    let mix = &params.mixture;
    let q = mix.q();
    let m = mix.overall_mean();
    let v = mix.overall_covariance();
    let l = linalg::cholesky_lower(&v)?;
    let l_inv = linalg::invert_lower(&l)?;

    let old = &params.loadings;
    let intercepts = &old.intercepts + &old.matrix * &m;
    let mut loadings = Loadings {
        intercepts,
        matrix: &old.matrix * &l,
    };
    loadings.enforce_mask();

    let mixture = if mix.k() == 1 {
        MixtureParams::standard(q)
    } else {
        let means = mix.means.iter().map(|mu| &l_inv * (mu - &m)).collect();
        let covariances = mix
            .covariances
            .iter()
            .map(|s| {
                let mut c = &l_inv * s * l_inv.transpose();
                linalg::symmetrize(&mut c);
                c
            })
            .collect();
        MixtureParams {
            weights: mix.weights.clone(),
            means,
            covariances,
        }
    };
    Ok(ModelParams {
        spec: params.spec,
        loadings,
        mixture,
    })
}
