//! The exploitability functional `J`, its per-state decomposition `J_k`, the
//! population-weighted variant `J'`, and the equilibrium certificate.
//!
//! `J` is the gap between the Bellman value at the initial time and the
//! reward actually collected by a representative player with law `mu`:
//!
//! ```text
//! J = mu0 . phi(t0) - mu(T) . sigma(m(T)) - int mu(t) . g(t) dt
//! ```
//!
//! It is nonnegative for every admissible trajectory and zero exactly at
//! equilibria, which makes it a sound certificate no matter how a candidate
//! was produced. The certificate additionally checks finite-difference
//! residuals of the two differential equations (an independent check on the
//! stored trajectories, not a readback of integrator internals) and the
//! support condition of the strategy.

use serde::Serialize;

use crate::dynamics::{integrate_forward_mu, TrajectoryBundle};
use crate::model::{GameModel, SimplexVector};
use crate::relaxed::{hamiltonian, mixed_generator, mixed_reward, support_violation};
use crate::Result;

/// Default certification tolerances.
#[derive(Debug, Clone, Copy, Serialize, PartialEq)]
pub struct Tolerances {
    /// Bound on |J| for the certified verdict.
    pub tol_j: f64,
    /// Bound on the Bellman and Kolmogorov finite-difference residuals.
    pub tol_residual: f64,
    /// Bound on the mass-weighted support violation.
    pub tol_support: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            tol_j: 1e-4,
            tol_residual: 1e-6,
            tol_support: 1e-6,
        }
    }
}

/// Outcome of a certification run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Certified,
    NotCertified,
}

/// Certificate of (approximate) equilibrium for one trajectory bundle.
#[derive(Debug, Clone, Serialize)]
pub struct CertificateReport {
    pub j: f64,
    pub j_k: Vec<f64>,
    pub bellman_residual: f64,
    pub kolmogorov_residual: f64,
    pub support_violation: f64,
    pub verdict: Verdict,
    pub tolerances: Tolerances,
    /// True when the initial population has a zero coordinate; the
    /// equivalence between `J = 0` and the equilibrium property needs a
    /// fully supported tagged law, so boundary starts are flagged rather
    /// than silently asserted.
    pub boundary_m0: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Trapezoid quadrature of `t -> mu(t) . g(m(t), nu(t))` on the bundle grid.
fn mu_g_integral(model: &GameModel, bundle: &TrajectoryBundle, lo: usize, hi: usize) -> f64 {
    let mut acc = 0.0;
    for node in lo..hi {
        let h = bundle.time[node + 1] - bundle.time[node];
        let nu = bundle.profile.slice(node);
        let g_l = mixed_reward(model, bundle.m[node].as_slice(), nu);
        let g_r = mixed_reward(model, bundle.m[node + 1].as_slice(), nu);
        let f_l = dot(bundle.mu[node].as_slice(), &g_l);
        let f_r = dot(bundle.mu[node + 1].as_slice(), &g_r);
        acc += 0.5 * h * (f_l + f_r);
    }
    acc
}

/// The exploitability functional `J` of a complete bundle.
pub fn cost_j(model: &GameModel, bundle: &TrajectoryBundle) -> f64 {
    let last = bundle.num_nodes() - 1;
    let sigma = model.eval_sigma(bundle.m[last].as_slice());
    dot(bundle.mu[0].as_slice(), &bundle.phi[0])
        - dot(bundle.mu[last].as_slice(), &sigma)
        - mu_g_integral(model, bundle, 0, last)
}

/// `J_k`: the exploitability seen by a representative player starting from
/// state `k`. Re-integrates the tagged law from the `k`-th vertex along the
/// bundle's own flow and strategy.
pub fn cost_jk(model: &GameModel, bundle: &TrajectoryBundle, k: usize) -> Result<f64> {
    let d = model.num_states();
    let mu_k = integrate_forward_mu(
        model,
        &bundle.profile,
        &bundle.m,
        &SimplexVector::vertex(d, k),
    )?;
    let last = bundle.num_nodes() - 1;
    let sigma = model.eval_sigma(bundle.m[last].as_slice());
    let shadow = TrajectoryBundle {
        time: bundle.time.clone(),
        m: bundle.m.clone(),
        phi: bundle.phi.clone(),
        mu: mu_k,
        z: bundle.z.clone(),
        profile: bundle.profile.clone(),
    };
    Ok(bundle.phi[0][k]
        - dot(shadow.mu[last].as_slice(), &sigma)
        - mu_g_integral(model, &shadow, 0, last))
}

/// The population-weighted variant `J'` with `m` in place of `mu`.
///
/// Meaningful when the bundle was rolled with `mu0 = m0`; otherwise a
/// warning is logged and the value still refers to the `m`-trajectory.
pub fn cost_jprime(model: &GameModel, bundle: &TrajectoryBundle) -> f64 {
    let mu0 = bundle.mu[0].as_slice();
    let m0 = bundle.m[0].as_slice();
    if mu0
        .iter()
        .zip(m0)
        .any(|(a, b)| (a - b).abs() > crate::model::SIMPLEX_SLACK)
    {
        log::warn!("cost_jprime called on a bundle with mu0 != m0; the corollary regime needs mu0 = m0");
    }
    let last = bundle.num_nodes() - 1;
    let sigma = model.eval_sigma(bundle.m[last].as_slice());
    let shadow = TrajectoryBundle {
        time: bundle.time.clone(),
        m: bundle.m.clone(),
        phi: bundle.phi.clone(),
        mu: bundle.m.clone(),
        z: bundle.z.clone(),
        profile: bundle.profile.clone(),
    };
    dot(m0, &bundle.phi[0]) - dot(shadow.mu[last].as_slice(), &sigma)
        - mu_g_integral(model, &shadow, 0, last)
}

/// Max-norm Bellman residual `|| dphi/dt + H ||` by centered differences at
/// interior nodes.
pub fn bellman_residual(model: &GameModel, bundle: &TrajectoryBundle) -> f64 {
    let d = model.num_states();
    let n = bundle.num_nodes() - 1;
    let mut worst = 0.0f64;
    for node in 1..n {
        let h2 = bundle.time[node + 1] - bundle.time[node - 1];
        let ham = hamiltonian(model, bundle.m[node].as_slice(), &bundle.phi[node]);
        for i in 0..d {
            let deriv = (bundle.phi[node + 1][i] - bundle.phi[node - 1][i]) / h2;
            worst = worst.max((deriv + ham.values[i]).abs());
        }
    }
    worst
}

/// Max-norm Kolmogorov residual `|| dm/dt - m Q(m, nu) ||` by centered
/// differences. The strategy straddling an interior node is the average of
/// the two adjacent slices, matching the centered stencil for a
/// piecewise-constant control.
pub fn kolmogorov_residual(model: &GameModel, bundle: &TrajectoryBundle) -> f64 {
    let d = model.num_states();
    let k = model.num_controls();
    let n = bundle.num_nodes() - 1;
    let mut worst = 0.0f64;
    for node in 1..n {
        let h2 = bundle.time[node + 1] - bundle.time[node - 1];
        let left = bundle.profile.slice(node - 1);
        let right = bundle.profile.slice(node);
        let avg: Vec<f64> = (0..d * k).map(|x| 0.5 * (left[x] + right[x])).collect();
        let q = mixed_generator(model, bundle.m[node].as_slice(), &avg);
        for j in 0..d {
            let deriv = (bundle.m[node + 1].get(j) - bundle.m[node - 1].get(j)) / h2;
            let rhs: f64 = (0..d).map(|i| bundle.m[node].get(i) * q[i * d + j]).sum();
            worst = worst.max((deriv - rhs).abs());
        }
    }
    worst
}

/// Gaps of the bundle's strategy along its own trajectory, one block per
/// interval, evaluated at the interval's left node.
pub fn bundle_gaps(model: &GameModel, bundle: &TrajectoryBundle) -> Vec<Vec<Vec<f64>>> {
    (0..bundle.num_nodes() - 1)
        .map(|node| hamiltonian(model, bundle.m[node].as_slice(), &bundle.phi[node]).gap)
        .collect()
}

/// Computes the full certificate for a candidate bundle.
pub fn verify_solution(
    model: &GameModel,
    bundle: &TrajectoryBundle,
    tolerances: Tolerances,
) -> Result<CertificateReport> {
    let d = model.num_states();
    let j = cost_j(model, bundle);
    let mut j_k = Vec::with_capacity(d);
    for k in 0..d {
        j_k.push(cost_jk(model, bundle, k)?);
    }
    let bell = bellman_residual(model, bundle);
    let kolm = kolmogorov_residual(model, bundle);
    let gaps = bundle_gaps(model, bundle);
    let support = support_violation(&bundle.profile, &gaps);
    let certified = j.abs() <= tolerances.tol_j
        && bell <= tolerances.tol_residual
        && kolm <= tolerances.tol_residual
        && support <= tolerances.tol_support;
    let boundary_m0 = bundle.m[0].as_slice().iter().any(|&x| x <= 0.0);
    Ok(CertificateReport {
        j,
        j_k,
        bellman_residual: bell,
        kolmogorov_residual: kolm,
        support_violation: support,
        verdict: if certified {
            Verdict::Certified
        } else {
            Verdict::NotCertified
        },
        tolerances,
        boundary_m0,
    })
}
