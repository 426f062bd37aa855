//! Relaxed feedback strategies, the mixed generator and reward, the
//! Hamiltonian with its argmax sets, and profile mixing for fictitious play.
//!
//! A relaxed strategy assigns each state a probability distribution over the
//! control grid, piecewise constant on the integrator's time grid. Players
//! in a state randomize their instantaneous control according to it; the
//! population then moves under the control-averaged (mixed) generator.

use crate::model::GameModel;
use crate::{Error, Result};

/// Absolute tolerance for argmax ties in the Hamiltonian.
///
/// Below the integrator's error, above rounding noise.
pub const TIE_TOL: f64 = 1e-10;

/// Tolerance for the per-state weight rows summing to one.
pub const WEIGHT_TOL: f64 = 1e-12;

/// Time- and state-indexed probability weights over controls, piecewise
/// constant on `[t[n], t[n+1])`.
#[derive(Debug, Clone, PartialEq)]
pub struct RelaxedStrategyProfile {
    /// Strictly increasing nodes `t[0] < ... < t[N]`; `N` intervals.
    time_grid: Vec<f64>,
    d: usize,
    k: usize,
    /// Flattened `[n][i][k]` as `(n * d + i) * k + k_idx`.
    weights: Vec<f64>,
}

impl RelaxedStrategyProfile {
    pub fn new(time_grid: Vec<f64>, d: usize, k: usize, weights: Vec<f64>) -> Result<Self> {
        if time_grid.len() < 2 {
            return Err(Error::InvalidInput("profile needs N >= 1 intervals".into()));
        }
        let n = time_grid.len() - 1;
        if time_grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidInput(
                "profile time grid must be strictly increasing".into(),
            ));
        }
        if weights.len() != n * d * k {
            return Err(Error::InvalidInput(format!(
                "profile weights have {} entries, expected {}",
                weights.len(),
                n * d * k
            )));
        }
        for slot in 0..n * d {
            let row = &weights[slot * k..(slot + 1) * k];
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > WEIGHT_TOL || row.iter().any(|&w| w < 0.0) {
                return Err(Error::InvalidInput(format!(
                    "profile weights at interval {} state {} are not a probability vector",
                    slot / d,
                    slot % d + 1
                )));
            }
        }
        Ok(Self {
            time_grid,
            d,
            k,
            weights,
        })
    }

    /// Uniform weights on a uniform grid of `n` intervals over `[t0, t1]`.
    pub fn uniform(model: &GameModel, t0: f64, t1: f64, n: usize) -> Self {
        let d = model.num_states();
        let k = model.num_controls();
        Self {
            time_grid: uniform_grid(t0, t1, n),
            d,
            k,
            weights: vec![1.0 / k as f64; n * d * k],
        }
    }

    /// Dirac weights on `control[i]` for every state `i`, constant in time.
    pub fn dirac(model: &GameModel, t0: f64, t1: f64, n: usize, controls: &[usize]) -> Self {
        let d = model.num_states();
        let k = model.num_controls();
        let mut weights = vec![0.0; n * d * k];
        for step in 0..n {
            for i in 0..d {
                weights[(step * d + i) * k + controls[i]] = 1.0;
            }
        }
        Self {
            time_grid: uniform_grid(t0, t1, n),
            d,
            k,
            weights,
        }
    }

    /// Builds a profile from per-interval slices produced by a closure.
    pub fn from_slices<F>(model: &GameModel, t0: f64, t1: f64, n: usize, mut f: F) -> Self
    where
        F: FnMut(usize) -> Vec<f64>,
    {
        let d = model.num_states();
        let k = model.num_controls();
        let mut weights = Vec::with_capacity(n * d * k);
        for step in 0..n {
            let slice = f(step);
            debug_assert_eq!(slice.len(), d * k);
            weights.extend_from_slice(&slice);
        }
        Self {
            time_grid: uniform_grid(t0, t1, n),
            d,
            k,
            weights,
        }
    }

    pub fn num_intervals(&self) -> usize {
        self.time_grid.len() - 1
    }

    pub fn num_states(&self) -> usize {
        self.d
    }

    pub fn num_controls(&self) -> usize {
        self.k
    }

    pub fn time_grid(&self) -> &[f64] {
        &self.time_grid
    }

    pub fn t0(&self) -> f64 {
        self.time_grid[0]
    }

    pub fn t_end(&self) -> f64 {
        *self.time_grid.last().unwrap()
    }

    /// The `[d][k]` weight slice active on interval `n`.
    pub fn slice(&self, n: usize) -> &[f64] {
        &self.weights[n * self.d * self.k..(n + 1) * self.d * self.k]
    }

    pub fn weight(&self, n: usize, i: usize, k_idx: usize) -> f64 {
        self.weights[(n * self.d + i) * self.k + k_idx]
    }
}

fn uniform_grid(t0: f64, t1: f64, n: usize) -> Vec<f64> {
    let h = (t1 - t0) / n as f64;
    let mut grid: Vec<f64> = (0..=n).map(|i| t0 + i as f64 * h).collect();
    grid[n] = t1;
    grid
}

/// Per-state Hamiltonian values with argmax sets and optimality gaps.
#[derive(Debug, Clone)]
pub struct HamiltonianValue {
    /// `H_i`, the best score per state.
    pub values: Vec<f64>,
    /// Control indices within `TIE_TOL` of the best score, per state.
    pub argmax_sets: Vec<Vec<usize>>,
    /// `values[i] - score(i, k)`, clamped to exactly 0 on argmax members.
    pub gap: Vec<Vec<f64>>,
}

/// Control-averaged generator: `Q_ij(m, nu) = sum_k nu[i][k] q(i,j,m,u_k)`.
///
/// Returns the row-major `d x d` matrix; a convex combination of Q-matrices,
/// hence itself a Q-matrix.
pub fn mixed_generator(model: &GameModel, m: &[f64], nu_slice: &[f64]) -> Vec<f64> {
    let d = model.num_states();
    let mut out = vec![0.0; d * d];
    let mut row = vec![0.0; d];
    mixed_generator_into(model, m, nu_slice, &mut out, &mut row);
    out
}

/// Allocation-free form of [`mixed_generator`]; `row` is d-sized scratch.
pub(crate) fn mixed_generator_into(
    model: &GameModel,
    m: &[f64],
    nu_slice: &[f64],
    out: &mut [f64],
    row: &mut [f64],
) {
    let d = model.num_states();
    let k = model.num_controls();
    out.fill(0.0);
    for i in 0..d {
        for u in 0..k {
            let w = nu_slice[i * k + u];
            if w == 0.0 {
                continue;
            }
            model.q_row(i, m, u, row);
            for j in 0..d {
                out[i * d + j] += w * row[j];
            }
        }
    }
}

/// Control-averaged reward rate per state.
pub fn mixed_reward(model: &GameModel, m: &[f64], nu_slice: &[f64]) -> Vec<f64> {
    let d = model.num_states();
    let mut out = vec![0.0; d];
    mixed_reward_into(model, m, nu_slice, &mut out);
    out
}

pub(crate) fn mixed_reward_into(model: &GameModel, m: &[f64], nu_slice: &[f64], out: &mut [f64]) {
    let d = model.num_states();
    let k = model.num_controls();
    for i in 0..d {
        let mut acc = 0.0;
        for u in 0..k {
            let w = nu_slice[i * k + u];
            if w != 0.0 {
                acc += w * model.eval_g(i, m, u);
            }
        }
        out[i] = acc;
    }
}

/// Per-state maximum of `Q(u) phi + g(u)` over the control grid.
///
/// Maximizing over relaxed controls reduces to the grid maximum: mixtures
/// never beat their best pure component.
pub fn hamiltonian(model: &GameModel, m: &[f64], phi: &[f64]) -> HamiltonianValue {
    let d = model.num_states();
    let k = model.num_controls();
    let mut values = Vec::with_capacity(d);
    let mut argmax_sets = Vec::with_capacity(d);
    let mut gap = Vec::with_capacity(d);
    let mut row = vec![0.0; d];
    let mut scores = vec![0.0; k];
    for i in 0..d {
        let mut best = f64::NEG_INFINITY;
        for (u, score) in scores.iter_mut().enumerate() {
            model.q_row(i, m, u, &mut row);
            let mut s = model.eval_g(i, m, u);
            for j in 0..d {
                s += row[j] * phi[j];
            }
            *score = s;
            if s > best {
                best = s;
            }
        }
        let mut members = Vec::new();
        let mut gaps = Vec::with_capacity(k);
        for (u, &s) in scores.iter().enumerate() {
            if best - s <= TIE_TOL {
                members.push(u);
                gaps.push(0.0);
            } else {
                gaps.push(best - s);
            }
        }
        values.push(best);
        argmax_sets.push(members);
        gap.push(gaps);
    }
    HamiltonianValue {
        values,
        argmax_sets,
        gap,
    }
}

/// Convenience: only the Hamiltonian values, written into `out`.
pub fn hamiltonian_values(model: &GameModel, m: &[f64], phi: &[f64], out: &mut [f64]) {
    let d = model.num_states();
    let k = model.num_controls();
    let mut row = vec![0.0; d];
    for i in 0..d {
        let mut best = f64::NEG_INFINITY;
        for u in 0..k {
            model.q_row(i, m, u, &mut row);
            let mut s = model.eval_g(i, m, u);
            for j in 0..d {
                s += row[j] * phi[j];
            }
            if s > best {
                best = s;
            }
        }
        out[i] = best;
    }
}

/// Dirac weights on the lowest-index argmax control of each state.
///
/// The deterministic tie-break keeps runs reproducible.
pub fn best_response_slice(model: &GameModel, m: &[f64], phi: &[f64]) -> Vec<f64> {
    let d = model.num_states();
    let k = model.num_controls();
    let ham = hamiltonian(model, m, phi);
    let mut slice = vec![0.0; d * k];
    for i in 0..d {
        slice[i * k + ham.argmax_sets[i][0]] = 1.0;
    }
    slice
}

/// Elementwise convex combination `(1 - lambda) a + lambda b`.
pub fn mix_profiles(
    a: &RelaxedStrategyProfile,
    b: &RelaxedStrategyProfile,
    lambda: f64,
) -> Result<RelaxedStrategyProfile> {
    if a.time_grid != b.time_grid || a.d != b.d || a.k != b.k {
        return Err(Error::GridMismatch(
            "mix_profiles requires identical time grids and shapes".into(),
        ));
    }
    if lambda == 0.0 {
        return Ok(a.clone());
    }
    if lambda == 1.0 {
        return Ok(b.clone());
    }
    let weights = a
        .weights
        .iter()
        .zip(b.weights.iter())
        .map(|(&wa, &wb)| (1.0 - lambda) * wa + lambda * wb)
        .collect();
    Ok(RelaxedStrategyProfile {
        time_grid: a.time_grid.clone(),
        d: a.d,
        k: a.k,
        weights,
    })
}

/// Maximum over intervals and states of the mass-weighted optimality gap.
///
/// Zero exactly when the profile's support lies in the argmax sets (within
/// the tie tolerance) at every grid node; `gaps` must have been computed
/// along the profile's own induced trajectory, one `[d][k]` block per
/// interval.
pub fn support_violation(profile: &RelaxedStrategyProfile, gaps: &[Vec<Vec<f64>>]) -> f64 {
    let d = profile.d;
    let k = profile.k;
    let mut worst = 0.0f64;
    for (n, gap_n) in gaps.iter().enumerate() {
        for i in 0..d {
            let mut acc = 0.0;
            for u in 0..k {
                acc += profile.weight(n, i, u) * gap_n[i][u];
            }
            worst = worst.max(acc);
        }
    }
    worst
}
