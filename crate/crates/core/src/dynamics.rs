//! Integrators for the four coupled trajectories on a shared uniform grid:
//! the population flow `m` (forward), the tagged player's law `mu` (forward,
//! riding on the frozen `m`), the value vector `phi` (backward Bellman), and
//! the scalar `z` (quadrature over the other three).
//!
//! All integrators are classical RK4 with the relaxed strategy held constant
//! on each grid interval, so the right-hand sides are smooth where RK4
//! samples them and the full order is retained across control switches.
//! `m` is renormalized after every full step (never after sub-stages, which
//! would break the order-4 cancellation); `mu` is left raw so that the flow
//! stays exactly linear in its initial condition — the decomposition
//! identity `J = sum_k mu_0k J_k` is checked to 1e-10 and survives only if
//! no clipping sneaks in.
//!
//! The sign convention for `z` is fixed by the product-rule identity
//! `z(r) - z(s) = mu(s) phi(s) - mu(r) phi(r) - int mu g`, which forces
//! `dz/dt = -mu Q phi + mu H - mu g`. With it, `z` is nondecreasing along
//! any admissible trajectory and constant exactly at equilibrium.

use crate::model::{renormalize, GameModel, SimplexVector};
use crate::relaxed::{
    hamiltonian_values, mixed_generator_into, mixed_reward_into, RelaxedStrategyProfile,
};
use crate::{Error, Result};

/// Discretized `(m, phi, mu, z)` trajectories on a shared time grid,
/// together with the strategy profile that generated them.
#[derive(Debug, Clone)]
pub struct TrajectoryBundle {
    pub time: Vec<f64>,
    pub m: Vec<SimplexVector>,
    pub phi: Vec<Vec<f64>>,
    pub mu: Vec<SimplexVector>,
    pub z: Vec<f64>,
    pub profile: RelaxedStrategyProfile,
}

impl TrajectoryBundle {
    pub fn num_nodes(&self) -> usize {
        self.time.len()
    }

    pub fn t0(&self) -> f64 {
        self.time[0]
    }

    pub fn t_end(&self) -> f64 {
        *self.time.last().unwrap()
    }

    /// Initial value of `phi` — the equilibrium candidate's value vector.
    pub fn phi0(&self) -> &[f64] {
        &self.phi[0]
    }
}

/// Where the scalar `z` is pinned to zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZAnchor {
    /// `z(t0) = 0`: forward bookkeeping, `z(T)` reproduces `J`.
    ForwardZero,
    /// `z(T) = 0`: terminal anchoring for attainability membership.
    TerminalZero,
}

fn check_grid(model: &GameModel, profile: &RelaxedStrategyProfile, t0: f64) -> Result<()> {
    let t_end = profile.t_end();
    if (profile.t0() - t0).abs() > 1e-12 {
        return Err(Error::GridMismatch(format!(
            "profile starts at {} but t0 = {t0} was requested",
            profile.t0()
        )));
    }
    if (t_end - model.horizon()).abs() > 1e-12 {
        return Err(Error::GridMismatch(format!(
            "profile ends at {t_end} but the model horizon is {}",
            model.horizon()
        )));
    }
    if t0 >= t_end {
        return Err(Error::GridMismatch(format!(
            "need t0 < T, got t0 = {t0}, T = {t_end}"
        )));
    }
    Ok(())
}

/// `out = x * Q(x, nu)` — the Kolmogorov right-hand side at distribution `x`.
#[inline]
fn m_rhs(model: &GameModel, nu: &[f64], x: &[f64], out: &mut [f64], q: &mut [f64], row: &mut [f64]) {
    mixed_generator_into(model, x, nu, q, row);
    let d = x.len();
    for j in 0..d {
        let mut acc = 0.0;
        for i in 0..d {
            acc += x[i] * q[i * d + j];
        }
        out[j] = acc;
    }
}

/// `out = mu * q` for a precomputed generator matrix `q` (row-major d x d).
#[inline]
fn mu_rhs(mu: &[f64], q: &[f64], out: &mut [f64]) {
    let d = mu.len();
    for j in 0..d {
        let mut acc = 0.0;
        for i in 0..d {
            acc += mu[i] * q[i * d + j];
        }
        out[j] = acc;
    }
}

#[inline]
fn axpy(y: &mut [f64], x: &[f64], base: &[f64], a: f64) {
    for i in 0..y.len() {
        y[i] = base[i] + a * x[i];
    }
}

/// Integrates `dm/dt = m Q(m, nu(t))` forward from `m0` with RK4 and a
/// renormalization after each full step.
pub fn integrate_forward_m(
    model: &GameModel,
    profile: &RelaxedStrategyProfile,
    t0: f64,
    m0: &SimplexVector,
) -> Result<Vec<SimplexVector>> {
    check_grid(model, profile, t0)?;
    let d = model.num_states();
    let n = profile.num_intervals();
    let grid = profile.time_grid();
    let mut out = Vec::with_capacity(n + 1);
    out.push(m0.clone());

    let mut q = vec![0.0; d * d];
    let mut row = vec![0.0; d];
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    let mut stage = vec![0.0; d];
    let mut next = vec![0.0; d];

    for step in 0..n {
        let h = grid[step + 1] - grid[step];
        let nu = profile.slice(step);
        let m = out[step].as_slice();
        m_rhs(model, nu, m, &mut k1, &mut q, &mut row);
        axpy(&mut stage, &k1, m, h / 2.0);
        m_rhs(model, nu, &stage, &mut k2, &mut q, &mut row);
        axpy(&mut stage, &k2, m, h / 2.0);
        m_rhs(model, nu, &stage, &mut k3, &mut q, &mut row);
        axpy(&mut stage, &k3, m, h);
        m_rhs(model, nu, &stage, &mut k4, &mut q, &mut row);
        for j in 0..d {
            next[j] = m[j] + h / 6.0 * (k1[j] + 2.0 * (k2[j] + k3[j]) + k4[j]);
        }
        out.push(renormalize(&next)?);
    }
    Ok(out)
}

/// Integrates `dmu/dt = mu Q(m(t), nu(t))` forward from `mu0`.
///
/// The generator is evaluated at the same RK4 stage points the `m`
/// integration used, reconstructed from the stored nodes, so the pair
/// behaves exactly like one jointly integrated system. No renormalization:
/// the map `mu0 -> mu(t)` stays linear to machine precision.
pub fn integrate_forward_mu(
    model: &GameModel,
    profile: &RelaxedStrategyProfile,
    m_traj: &[SimplexVector],
    mu0: &SimplexVector,
) -> Result<Vec<SimplexVector>> {
    let d = model.num_states();
    let n = profile.num_intervals();
    if m_traj.len() != n + 1 {
        return Err(Error::GridMismatch(format!(
            "m trajectory has {} nodes, profile grid has {}",
            m_traj.len(),
            n + 1
        )));
    }
    let grid = profile.time_grid();
    let mut raw = vec![mu0.as_slice().to_vec()];

    let mut row = vec![0.0; d];
    let mut km = vec![0.0; d];
    let mut m_stage = vec![0.0; d];
    // Generator matrices at the four stage points of the current step.
    let (mut q1, mut q2, mut q3, mut q4) = (
        vec![0.0; d * d],
        vec![0.0; d * d],
        vec![0.0; d * d],
        vec![0.0; d * d],
    );
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    let mut stage = vec![0.0; d];

    for step in 0..n {
        let h = grid[step + 1] - grid[step];
        let nu = profile.slice(step);
        let m = m_traj[step].as_slice();

        // Reconstruct the m stage points (and their generators).
        mixed_generator_into(model, m, nu, &mut q1, &mut row);
        mu_rhs(m, &q1, &mut km);
        axpy(&mut m_stage, &km, m, h / 2.0);
        mixed_generator_into(model, &m_stage, nu, &mut q2, &mut row);
        mu_rhs(&m_stage, &q2, &mut km);
        axpy(&mut m_stage, &km, m, h / 2.0);
        mixed_generator_into(model, &m_stage, nu, &mut q3, &mut row);
        mu_rhs(&m_stage, &q3, &mut km);
        axpy(&mut m_stage, &km, m, h);
        mixed_generator_into(model, &m_stage, nu, &mut q4, &mut row);

        let mu = raw[step].as_slice();
        mu_rhs(mu, &q1, &mut k1);
        axpy(&mut stage, &k1, mu, h / 2.0);
        mu_rhs(&stage, &q2, &mut k2);
        axpy(&mut stage, &k2, mu, h / 2.0);
        mu_rhs(&stage, &q3, &mut k3);
        axpy(&mut stage, &k3, mu, h);
        mu_rhs(&stage, &q4, &mut k4);

        let mut next = vec![0.0; d];
        for j in 0..d {
            next[j] = mu[j] + h / 6.0 * (k1[j] + 2.0 * (k2[j] + k3[j]) + k4[j]);
        }
        raw.push(next);
    }
    raw.into_iter().map(SimplexVector::new).collect()
}

/// Cubic-Hermite value at the interval midpoint from endpoint values and
/// one-sided slopes.
#[inline]
fn hermite_mid(out: &mut [f64], left: &[f64], right: &[f64], f_left: &[f64], f_right: &[f64], h: f64) {
    for i in 0..out.len() {
        out[i] = 0.5 * (left[i] + right[i]) + h / 8.0 * (f_left[i] - f_right[i]);
    }
}

/// Integrates the Bellman equation `dphi/dt = -H(m(t), phi)` backward from
/// `phi(T) = sigma(m(T))` against the frozen `m` trajectory.
///
/// Midpoint values of `m` are reconstructed per interval by cubic Hermite
/// interpolation with one-sided slopes, which keeps full RK4 order across
/// control switches.
pub fn integrate_backward_phi(
    model: &GameModel,
    profile: &RelaxedStrategyProfile,
    m_traj: &[SimplexVector],
) -> Result<Vec<Vec<f64>>> {
    let d = model.num_states();
    let n = profile.num_intervals();
    if m_traj.len() != n + 1 {
        return Err(Error::GridMismatch(format!(
            "m trajectory has {} nodes, profile grid has {}",
            m_traj.len(),
            n + 1
        )));
    }
    let grid = profile.time_grid();
    let mut phi = vec![vec![0.0; d]; n + 1];
    phi[n] = model.eval_sigma(m_traj[n].as_slice());

    let mut q = vec![0.0; d * d];
    let mut row = vec![0.0; d];
    let mut f_left = vec![0.0; d];
    let mut f_right = vec![0.0; d];
    let mut m_mid = vec![0.0; d];
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    let mut stage = vec![0.0; d];

    for step in (0..n).rev() {
        let h = grid[step + 1] - grid[step];
        let nu = profile.slice(step);
        let m_left = m_traj[step].as_slice();
        let m_right = m_traj[step + 1].as_slice();
        m_rhs(model, nu, m_left, &mut f_left, &mut q, &mut row);
        m_rhs(model, nu, m_right, &mut f_right, &mut q, &mut row);
        hermite_mid(&mut m_mid, m_left, m_right, &f_left, &f_right, h);

        let p = phi[step + 1].clone();
        // Backward RK4: stages at t_right, t_mid, t_mid, t_left.
        hamiltonian_values(model, m_right, &p, &mut k1);
        neg(&mut k1);
        axpy(&mut stage, &k1, &p, -h / 2.0);
        hamiltonian_values(model, &m_mid, &stage, &mut k2);
        neg(&mut k2);
        axpy(&mut stage, &k2, &p, -h / 2.0);
        hamiltonian_values(model, &m_mid, &stage, &mut k3);
        neg(&mut k3);
        axpy(&mut stage, &k3, &p, -h);
        hamiltonian_values(model, m_left, &stage, &mut k4);
        neg(&mut k4);

        for j in 0..d {
            phi[step][j] = p[j] - h / 6.0 * (k1[j] + 2.0 * (k2[j] + k3[j]) + k4[j]);
        }
    }
    Ok(phi)
}

#[inline]
fn neg(v: &mut [f64]) {
    for x in v.iter_mut() {
        *x = -*x;
    }
}

/// The `z` right-hand side `-mu Q phi + mu H - mu g` at one time point.
fn z_rhs(
    model: &GameModel,
    nu: &[f64],
    m: &[f64],
    phi: &[f64],
    mu: &[f64],
    q: &mut [f64],
    row: &mut [f64],
    h_vals: &mut [f64],
    g_vals: &mut [f64],
) -> f64 {
    let d = m.len();
    mixed_generator_into(model, m, nu, q, row);
    hamiltonian_values(model, m, phi, h_vals);
    mixed_reward_into(model, m, nu, g_vals);
    let mut acc = 0.0;
    for i in 0..d {
        let mut q_phi = 0.0;
        for j in 0..d {
            q_phi += q[i * d + j] * phi[j];
        }
        acc += mu[i] * (-q_phi + h_vals[i] - g_vals[i]);
    }
    acc
}

/// Integrates the scalar `z` as an RK4 (Simpson) quadrature over the already
/// computed trajectories, anchored at zero on the requested end.
pub fn integrate_z(
    model: &GameModel,
    profile: &RelaxedStrategyProfile,
    m_traj: &[SimplexVector],
    phi_traj: &[Vec<f64>],
    mu_traj: &[SimplexVector],
    anchor: ZAnchor,
) -> Vec<f64> {
    let d = model.num_states();
    let n = profile.num_intervals();
    let grid = profile.time_grid();

    let mut q = vec![0.0; d * d];
    let mut row = vec![0.0; d];
    let mut h_vals = vec![0.0; d];
    let mut g_vals = vec![0.0; d];
    let mut slope_l = vec![0.0; d];
    let mut slope_r = vec![0.0; d];
    let (mut m_mid, mut mu_mid, mut phi_mid) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);

    let mut w = vec![0.0; n + 1];
    for step in 0..n {
        let h = grid[step + 1] - grid[step];
        let nu = profile.slice(step);
        let m_l = m_traj[step].as_slice();
        let m_r = m_traj[step + 1].as_slice();
        let mu_l = mu_traj[step].as_slice();
        let mu_r = mu_traj[step + 1].as_slice();
        let phi_l = &phi_traj[step];
        let phi_r = &phi_traj[step + 1];

        m_rhs(model, nu, m_l, &mut slope_l, &mut q, &mut row);
        m_rhs(model, nu, m_r, &mut slope_r, &mut q, &mut row);
        hermite_mid(&mut m_mid, m_l, m_r, &slope_l, &slope_r, h);

        mixed_generator_into(model, m_l, nu, &mut q, &mut row);
        mu_rhs(mu_l, &q, &mut slope_l);
        mixed_generator_into(model, m_r, nu, &mut q, &mut row);
        mu_rhs(mu_r, &q, &mut slope_r);
        hermite_mid(&mut mu_mid, mu_l, mu_r, &slope_l, &slope_r, h);

        hamiltonian_values(model, m_l, phi_l, &mut slope_l);
        neg(&mut slope_l);
        hamiltonian_values(model, m_r, phi_r, &mut slope_r);
        neg(&mut slope_r);
        hermite_mid(&mut phi_mid, phi_l, phi_r, &slope_l, &slope_r, h);

        let f_l = z_rhs(model, nu, m_l, phi_l, mu_l, &mut q, &mut row, &mut h_vals, &mut g_vals);
        let f_m = z_rhs(
            model, nu, &m_mid, &phi_mid, &mu_mid, &mut q, &mut row, &mut h_vals, &mut g_vals,
        );
        let f_r = z_rhs(model, nu, m_r, phi_r, mu_r, &mut q, &mut row, &mut h_vals, &mut g_vals);
        w[step + 1] = w[step] + h / 6.0 * (f_l + 4.0 * f_m + f_r);
    }

    match anchor {
        ZAnchor::ForwardZero => w,
        ZAnchor::TerminalZero => {
            let w_end = w[n];
            w.into_iter().map(|x| x - w_end).collect()
        }
    }
}

/// Composes the four integrations in dependency order `m -> phi -> mu -> z`,
/// with `z` anchored forward at zero.
pub fn roll_bundle(
    model: &GameModel,
    profile: &RelaxedStrategyProfile,
    t0: f64,
    m0: &SimplexVector,
    mu0: &SimplexVector,
) -> Result<TrajectoryBundle> {
    let m = integrate_forward_m(model, profile, t0, m0)?;
    let phi = integrate_backward_phi(model, profile, &m)?;
    let mu = integrate_forward_mu(model, profile, &m, mu0)?;
    let z = integrate_z(model, profile, &m, &phi, &mu, ZAnchor::ForwardZero);
    Ok(TrajectoryBundle {
        time: profile.time_grid().to_vec(),
        m,
        phi,
        mu,
        z,
        profile: profile.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{builtin_model, load_model_str};
    use crate::relaxed::RelaxedStrategyProfile;

    /// Matrix exponential by scaling-and-squaring on a Taylor series.
    /// Test-only oracle, independent of the integrators.
    fn expm(a: &[f64], d: usize, t: f64) -> Vec<f64> {
        let norm: f64 = a.iter().map(|x| x.abs()).sum::<f64>() * t.abs();
        let s = norm.log2().ceil().max(0.0) as u32 + 1;
        let scale = t / f64::powi(2.0, s as i32);
        let mut term: Vec<f64> = (0..d * d).map(|i| if i % (d + 1) == 0 { 1.0 } else { 0.0 }).collect();
        let mut result = term.clone();
        for order in 1..=20 {
            let mut next = vec![0.0; d * d];
            for i in 0..d {
                for kk in 0..d {
                    let v = term[i * d + kk];
                    if v != 0.0 {
                        for j in 0..d {
                            next[i * d + j] += v * a[kk * d + j] * scale / order as f64;
                        }
                    }
                }
            }
            for i in 0..d * d {
                result[i] += next[i];
            }
            term = next;
        }
        for _ in 0..s {
            let mut sq = vec![0.0; d * d];
            for i in 0..d {
                for kk in 0..d {
                    let v = result[i * d + kk];
                    if v != 0.0 {
                        for j in 0..d {
                            sq[i * d + j] += v * result[kk * d + j];
                        }
                    }
                }
            }
            result = sq;
        }
        result
    }

    fn two_state() -> crate::model::GameModel {
        builtin_model("two-state-switch").unwrap()
    }

    #[test]
    fn frozen_dynamics_under_all_stay() {
        let model = two_state();
        let profile = RelaxedStrategyProfile::dirac(&model, 0.0, 1.0, 100, &[0, 0]);
        let m0 = SimplexVector::new(vec![0.3, 0.7]).unwrap();
        let m = integrate_forward_m(&model, &profile, 0.0, &m0).unwrap();
        for node in &m {
            assert_eq!(node.as_slice(), m0.as_slice());
        }
    }

    #[test]
    fn forward_m_matches_matrix_exponential() {
        let model = two_state();
        let profile = RelaxedStrategyProfile::dirac(&model, 0.0, 1.0, 1000, &[1, 1]);
        let m0 = SimplexVector::new(vec![1.0, 0.0]).unwrap();
        let m = integrate_forward_m(&model, &profile, 0.0, &m0).unwrap();
        let q = [-1.0, 1.0, 1.0, -1.0];
        let e = expm(&q, 2, 1.0);
        // Row vector times exp(tQ): start (1, 0) picks the first row.
        let expect = [e[0], e[1]];
        let got = m.last().unwrap().as_slice();
        assert!((got[0] - expect[0]).abs() < 1e-6, "{got:?} vs {expect:?}");
        assert!((got[1] - expect[1]).abs() < 1e-6);
        // Spec's quoted digits for this flow.
        assert!((got[0] - 0.567_668).abs() < 1e-6);
        assert!((got[1] - 0.432_332).abs() < 1e-6);
    }

    #[test]
    fn symmetric_point_is_stationary() {
        let model = two_state();
        let profile = RelaxedStrategyProfile::dirac(&model, 0.0, 1.0, 50, &[1, 1]);
        let m0 = SimplexVector::new(vec![0.5, 0.5]).unwrap();
        let m = integrate_forward_m(&model, &profile, 0.0, &m0).unwrap();
        for node in &m {
            assert!((node.get(0) - 0.5).abs() < 1e-14);
        }
    }

    #[test]
    fn mu_with_same_start_tracks_m() {
        let model = builtin_model("crowd-aversion-d3").unwrap();
        let profile = RelaxedStrategyProfile::uniform(&model, 0.0, 1.0, 1000);
        let m0 = SimplexVector::new(vec![0.6, 0.3, 0.1]).unwrap();
        let m = integrate_forward_m(&model, &profile, 0.0, &m0).unwrap();
        let mu = integrate_forward_mu(&model, &profile, &m, &m0).unwrap();
        for (a, b) in m.iter().zip(mu.iter()) {
            for j in 0..3 {
                assert!((a.get(j) - b.get(j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mu_constant_under_zero_generator() {
        let model = two_state();
        let profile = RelaxedStrategyProfile::dirac(&model, 0.0, 1.0, 20, &[0, 0]);
        let m0 = SimplexVector::new(vec![1.0, 0.0]).unwrap();
        let m = integrate_forward_m(&model, &profile, 0.0, &m0).unwrap();
        let mu0 = SimplexVector::new(vec![0.25, 0.75]).unwrap();
        let mu = integrate_forward_mu(&model, &profile, &m, &mu0).unwrap();
        for node in &mu {
            assert_eq!(node.as_slice(), mu0.as_slice());
        }
    }

    #[test]
    fn mu_superposition() {
        let model = builtin_model("crowd-aversion-d3").unwrap();
        let profile = RelaxedStrategyProfile::uniform(&model, 0.0, 1.0, 200);
        let m0 = SimplexVector::new(vec![0.5, 0.2, 0.3]).unwrap();
        let m = integrate_forward_m(&model, &profile, 0.0, &m0).unwrap();
        let mu0 = SimplexVector::new(vec![0.2, 0.5, 0.3]).unwrap();
        let mu = integrate_forward_mu(&model, &profile, &m, &mu0).unwrap();
        let parts: Vec<_> = (0..3)
            .map(|k| {
                integrate_forward_mu(&model, &profile, &m, &SimplexVector::vertex(3, k)).unwrap()
            })
            .collect();
        for node in 0..=200 {
            for j in 0..3 {
                let combo: f64 = (0..3).map(|k| mu0.get(k) * parts[k][node].get(j)).sum();
                assert!((combo - mu[node].get(j)).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn phi_constant_when_hamiltonian_vanishes() {
        // Single control, zero rates, zero rewards, sigma = (1, 2).
        let text = r#"{
          "d": 2, "T": 1.0, "controls": ["stay"],
          "Q": {"stay": [[{"c": 0.0}, {"c": 0.0}], [{"c": 0.0}, {"c": 0.0}]]},
          "g": {"stay": [{"c": 0.0}, {"c": 0.0}]},
          "sigma": [{"c": 1.0}, {"c": 2.0}]
        }"#;
        let model = load_model_str(text).unwrap();
        let profile = RelaxedStrategyProfile::uniform(&model, 0.0, 1.0, 50);
        let m0 = SimplexVector::new(vec![0.5, 0.5]).unwrap();
        let m = integrate_forward_m(&model, &profile, 0.0, &m0).unwrap();
        let phi = integrate_backward_phi(&model, &profile, &m).unwrap();
        for node in &phi {
            assert_eq!(node.as_slice(), &[1.0, 2.0]);
        }
    }

    #[test]
    fn phi_linear_quadrature_for_constant_reward() {
        let text = r#"{
          "d": 2, "T": 1.0, "controls": ["stay"],
          "Q": {"stay": [[{"c": 0.0}, {"c": 0.0}], [{"c": 0.0}, {"c": 0.0}]]},
          "g": {"stay": [{"c": 0.7}, {"c": 0.7}]},
          "sigma": [{"c": 1.0}, {"c": 2.0}]
        }"#;
        let model = load_model_str(text).unwrap();
        let profile = RelaxedStrategyProfile::uniform(&model, 0.0, 1.0, 64);
        let m0 = SimplexVector::new(vec![0.5, 0.5]).unwrap();
        let m = integrate_forward_m(&model, &profile, 0.0, &m0).unwrap();
        let phi = integrate_backward_phi(&model, &profile, &m).unwrap();
        let grid = profile.time_grid();
        for (node, p) in phi.iter().enumerate() {
            let remain = 1.0 - grid[node];
            assert!((p[0] - (1.0 + 0.7 * remain)).abs() < 1e-10);
            assert!((p[1] - (2.0 + 0.7 * remain)).abs() < 1e-10);
        }
    }

    #[test]
    fn phi_matches_discrete_dynamic_programming() {
        // Constant-sigma variant of the switch model; rates do not depend on
        // m, so the discrete-time oracle needs no population flow.
        let text = r#"{
          "d": 2, "T": 1.0, "controls": ["stay", "switch"],
          "Q": {
            "stay": [[{"c": 0.0}, {"c": 0.0}], [{"c": 0.0}, {"c": 0.0}]],
            "switch": [[{"c": -1.0}, {"c": 1.0}], [{"c": 1.0}, {"c": -1.0}]]
          },
          "g": {"stay": [{"c": 0.0}, {"c": 0.0}], "switch": [{"c": 0.0}, {"c": 0.0}]},
          "sigma": [{"c": 1.0}, {"c": 0.0}]
        }"#;
        let model = load_model_str(text).unwrap();
        let n = 1000;
        let profile = RelaxedStrategyProfile::dirac(&model, 0.0, 1.0, n, &[0, 0]);
        let m0 = SimplexVector::new(vec![1.0, 0.0]).unwrap();
        let m = integrate_forward_m(&model, &profile, 0.0, &m0).unwrap();
        let phi = integrate_backward_phi(&model, &profile, &m).unwrap();

        // Value iteration on the time-discretized decision problem, 10x finer.
        let fine = 10 * n;
        let delta = 1.0 / fine as f64;
        let mut v = [1.0, 0.0];
        let q: [[f64; 4]; 2] = [[0.0, 0.0, 0.0, 0.0], [-1.0, 1.0, 1.0, -1.0]];
        for _ in 0..fine {
            let mut next = [0.0, 0.0];
            for i in 0..2 {
                let mut best = f64::NEG_INFINITY;
                for qu in &q {
                    let mut val = v[i];
                    for j in 0..2 {
                        val += delta * qu[i * 2 + j] * v[j];
                    }
                    best = best.max(val);
                }
                next[i] = best;
            }
            v = next;
        }
        assert!((phi[0][0] - v[0]).abs() < 1e-4, "{} vs {}", phi[0][0], v[0]);
        assert!((phi[0][1] - v[1]).abs() < 1e-4, "{} vs {}", phi[0][1], v[1]);
        // Closed form for the bottom state: 1 - exp(-(T - t)).
        assert!((phi[0][1] - (1.0 - (-1.0f64).exp())).abs() < 1e-6);
    }

    #[test]
    fn z_vanishes_when_phi_vanishes() {
        let text = r#"{
          "d": 2, "T": 1.0, "controls": ["stay", "switch"],
          "Q": {
            "stay": [[{"c": 0.0}, {"c": 0.0}], [{"c": 0.0}, {"c": 0.0}]],
            "switch": [[{"c": -1.0}, {"c": 1.0}], [{"c": 1.0}, {"c": -1.0}]]
          },
          "g": {"stay": [{"c": 0.0}, {"c": 0.0}], "switch": [{"c": 0.0}, {"c": 0.0}]},
          "sigma": [{"c": 0.0}, {"c": 0.0}]
        }"#;
        let model = load_model_str(text).unwrap();
        let profile = RelaxedStrategyProfile::uniform(&model, 0.0, 1.0, 100);
        let m0 = SimplexVector::new(vec![0.8, 0.2]).unwrap();
        let bundle = roll_bundle(&model, &profile, 0.0, &m0, &SimplexVector::uniform(2)).unwrap();
        for &z in &bundle.z {
            assert_eq!(z, 0.0);
        }
    }

    #[test]
    fn z_identity_against_trapezoid_quadrature() {
        let model = builtin_model("crowd-aversion-d3").unwrap();
        let profile = RelaxedStrategyProfile::uniform(&model, 0.0, 1.0, 400);
        let m0 = SimplexVector::new(vec![0.7, 0.2, 0.1]).unwrap();
        let bundle = roll_bundle(&model, &profile, 0.0, &m0, &SimplexVector::uniform(3)).unwrap();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let h = bundle.time[1] - bundle.time[0];
        for &(s, r) in &[(0usize, 400usize), (50, 300), (123, 321), (0, 1)] {
            let mut integral = 0.0;
            for node in s..r {
                let g_l = crate::relaxed::mixed_reward(
                    &model,
                    bundle.m[node].as_slice(),
                    bundle.profile.slice(node),
                );
                let g_r = crate::relaxed::mixed_reward(
                    &model,
                    bundle.m[node + 1].as_slice(),
                    bundle.profile.slice(node),
                );
                let f_l = dot(bundle.mu[node].as_slice(), &g_l);
                let f_r = dot(bundle.mu[node + 1].as_slice(), &g_r);
                integral += 0.5 * h * (f_l + f_r);
            }
            let lhs = bundle.z[r] - bundle.z[s];
            let rhs = dot(bundle.mu[s].as_slice(), &bundle.phi[s])
                - dot(bundle.mu[r].as_slice(), &bundle.phi[r])
                - integral;
            assert!(
                (lhs - rhs).abs() <= 1e-7,
                "z identity off by {} on ({s},{r})",
                (lhs - rhs).abs()
            );
        }
    }

    #[test]
    fn z_is_nondecreasing_along_bellman_bundles() {
        let model = two_state();
        let profile = RelaxedStrategyProfile::uniform(&model, 0.0, 1.0, 300);
        let m0 = SimplexVector::new(vec![1.0, 0.0]).unwrap();
        let bundle = roll_bundle(&model, &profile, 0.0, &m0, &SimplexVector::uniform(2)).unwrap();
        for w in bundle.z.windows(2) {
            assert!(w[1] >= w[0] - 1e-7);
        }
    }

    #[test]
    fn terminal_anchor_pins_z_at_the_end() {
        let model = two_state();
        let profile = RelaxedStrategyProfile::uniform(&model, 0.0, 1.0, 50);
        let m0 = SimplexVector::new(vec![0.9, 0.1]).unwrap();
        let m = integrate_forward_m(&model, &profile, 0.0, &m0).unwrap();
        let phi = integrate_backward_phi(&model, &profile, &m).unwrap();
        let mu = integrate_forward_mu(&model, &profile, &m, &SimplexVector::uniform(2)).unwrap();
        let z = integrate_z(&model, &profile, &m, &phi, &mu, ZAnchor::TerminalZero);
        assert_eq!(*z.last().unwrap(), 0.0);
    }

    #[test]
    fn roll_bundle_on_trivial_model_is_constant() {
        let text = r#"{
          "d": 2, "T": 1.0, "controls": ["stay"],
          "Q": {"stay": [[{"c": 0.0}, {"c": 0.0}], [{"c": 0.0}, {"c": 0.0}]]},
          "g": {"stay": [{"c": 0.0}, {"c": 0.0}]},
          "sigma": [{"c": 0.0}, {"c": 0.0}]
        }"#;
        let model = load_model_str(text).unwrap();
        let profile = RelaxedStrategyProfile::uniform(&model, 0.0, 1.0, 10);
        let m0 = SimplexVector::new(vec![0.4, 0.6]).unwrap();
        let bundle = roll_bundle(&model, &profile, 0.0, &m0, &SimplexVector::uniform(2)).unwrap();
        for node in 0..=10 {
            assert_eq!(bundle.m[node].as_slice(), m0.as_slice());
            assert_eq!(bundle.phi[node], vec![0.0, 0.0]);
            assert_eq!(bundle.z[node], 0.0);
        }
        // Terminal condition is pinned bitwise.
        let sigma = model.eval_sigma(bundle.m[10].as_slice());
        assert_eq!(bundle.phi[10], sigma);
    }

    #[test]
    fn roll_bundle_rejects_grid_mismatch() {
        let model = two_state();
        let profile = RelaxedStrategyProfile::uniform(&model, 0.2, 1.0, 10);
        let m0 = SimplexVector::new(vec![0.4, 0.6]).unwrap();
        let err = roll_bundle(&model, &profile, 0.0, &m0, &SimplexVector::uniform(2)).unwrap_err();
        assert!(matches!(err, Error::GridMismatch(_)));

        let short = RelaxedStrategyProfile::uniform(&model, 0.0, 0.9, 10);
        let err = roll_bundle(&model, &short, 0.0, &m0, &SimplexVector::uniform(2)).unwrap_err();
        assert!(matches!(err, Error::GridMismatch(_)));
    }

    #[test]
    fn mass_is_conserved() {
        let model = builtin_model("crowd-aversion-d3").unwrap();
        let profile = RelaxedStrategyProfile::uniform(&model, 0.0, 1.0, 500);
        let m0 = SimplexVector::new(vec![1.0, 0.0, 0.0]).unwrap();
        let bundle = roll_bundle(&model, &profile, 0.0, &m0, &SimplexVector::uniform(3)).unwrap();
        for node in 0..=500 {
            let sm: f64 = bundle.m[node].as_slice().iter().sum();
            let smu: f64 = bundle.mu[node].as_slice().iter().sum();
            assert!((sm - 1.0).abs() <= 1e-9);
            assert!((smu - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn halving_steps_gains_at_least_eight_fold() {
        // Constant-in-time mixture so every grid represents the same
        // control, and a flow that keeps the argmax branch fixed so the
        // Bellman right-hand side has no kink to spoil the order study.
        let model = two_state();
        let m0 = SimplexVector::new(vec![0.9, 0.1]).unwrap();
        let mu0 = SimplexVector::new(vec![0.2, 0.8]).unwrap();
        let run = |n: usize| {
            let p = RelaxedStrategyProfile::from_slices(&model, 0.0, 1.0, n, |_| {
                vec![
                    0.9, 0.1, //
                    0.5, 0.5,
                ]
            });
            roll_bundle(&model, &p, 0.0, &m0, &mu0).unwrap()
        };
        let coarse = run(40);
        let half = run(80);
        let reference = run(400);

        let err = |b: &TrajectoryBundle| {
            let last = b.num_nodes() - 1;
            let rl = reference.num_nodes() - 1;
            let mut e = 0.0f64;
            for j in 0..2 {
                e = e.max((b.m[last].get(j) - reference.m[rl].get(j)).abs());
                e = e.max((b.mu[last].get(j) - reference.mu[rl].get(j)).abs());
                e = e.max((b.phi[0][j] - reference.phi[0][j]).abs());
            }
            e
        };
        let e1 = err(&coarse);
        let e2 = err(&half);
        assert!(
            e1 >= 8.0 * e2,
            "expected >= 8x error reduction, got {e1:.3e} -> {e2:.3e}"
        );
    }
}
