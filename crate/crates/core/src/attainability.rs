//! Approximation of the set of equilibrium values reachable from an initial
//! condition, by backward sampling of the coupled dynamics and by merging
//! certified forward solves.
//!
//! A backward sample draws a terminal population `m_T`, a terminal tagged
//! law `mu_T`, and a random piecewise-constant strategy on a coarse macro
//! grid, then integrates the full `(m, phi, mu, z)` system backward from
//! `(m_T, sigma(m_T), mu_T, 0)`. The sample witnesses a value point when it
//! lands near the queried initial data: population near `m0`, tagged law
//! near uniform, and `z` near zero — the last condition is the optimality
//! filter, since `z` is nondecreasing and vanishes only along equilibrium
//! behavior.
//!
//! No renormalization is applied during backward integration: trajectories
//! that wander off the simplex simply fail the filters, and accepted ones
//! coincide with forward flows from their own initial point, which stay on
//! the simplex on their own.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::dynamics::integrate_forward_m;
use crate::model::{renormalize, sample_simplex, GameModel, SimplexVector};
use crate::relaxed::{hamiltonian_values, mixed_generator_into, mixed_reward_into, RelaxedStrategyProfile};
use crate::reformulation::{CertificateReport, Verdict};
use crate::solver::{multi_start_solve, sup_dist, SolveOptions};
use crate::{Error, Result};

/// Options for backward sampling.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SampleOptions {
    pub samples: usize,
    /// Macro cells of the random piecewise-constant strategies.
    pub macro_k: usize,
    /// Fine integration intervals on `[t0, T]`.
    pub steps: usize,
    pub seed: u64,
    pub tol_m: f64,
    pub tol_mu: f64,
    pub tol_z: f64,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            samples: 100_000,
            macro_k: 8,
            steps: 400,
            seed: 42,
            tol_m: 5e-2,
            tol_mu: 5e-2,
            tol_z: 1e-3,
        }
    }
}

/// How a cloud point was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PointSource {
    BackwardSample,
    ForwardSolve,
}

/// Recreates the generating object of a point: the sample index for
/// backward points, the start index for forward solves.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ProfileRef {
    pub seed: u64,
    pub index: u64,
}

/// Residual breakdown of an accepted point.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct PointResiduals {
    pub dist_m: f64,
    pub dist_mu: f64,
    pub z_abs: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CloudPoint {
    pub phi0: Vec<f64>,
    pub residuals: PointResiduals,
    pub source: PointSource,
    pub profile_ref: ProfileRef,
    /// Certified certificate of the generating solve; forward-solve points
    /// always carry one, backward samples none.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub certificate: Option<CertificateReport>,
}

/// A near-miss record kept for diagnosing empty clouds.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct NearMiss {
    pub sample_index: u64,
    pub dist_m: f64,
    pub dist_mu: f64,
    pub z_abs: f64,
    /// max of the three residuals, each normalized by its tolerance.
    pub score: f64,
}

/// Finite approximation of the value set at one query.
#[derive(Debug, Clone, Serialize)]
pub struct ValueCloud {
    pub t0: f64,
    pub m0: Vec<f64>,
    pub points: Vec<CloudPoint>,
    pub options: SampleOptions,
    pub samples_run: usize,
    pub accepted_before_dedup: usize,
    /// Samples whose `m` or `mu` left the simplex during the backward pass.
    pub samples_off_simplex: usize,
    /// Largest `z(t0)` over the on-simplex samples; nonpositive up to
    /// integrator error since `phi` is Bellman-anchored along the sampled
    /// flow and `z` is nondecreasing for nonnegative `mu`.
    pub max_z_t0: f64,
    pub nearest_misses: Vec<NearMiss>,
}

/// Everything a single backward pass produces at `t0`.
#[derive(Debug, Clone)]
pub struct BackwardSample {
    pub index: u64,
    pub m_terminal: Vec<f64>,
    pub mu_terminal: Vec<f64>,
    pub m_t0: Vec<f64>,
    pub mu_t0: Vec<f64>,
    pub phi_t0: Vec<f64>,
    pub z_t0: f64,
    /// Whether `m` and `mu` stayed on the simplex along the whole backward
    /// path. Only such paths are trajectories of the constrained dynamics;
    /// the monotonicity of `z` (hence the one-sided bound `z(t0) <= 0`)
    /// needs `mu >= 0` and fails off the simplex.
    pub in_simplex: bool,
    pub profile: RelaxedStrategyProfile,
}

impl BackwardSample {
    pub fn dist_m(&self, m0: &SimplexVector) -> f64 {
        euclid(&self.m_t0, m0.as_slice())
    }

    pub fn dist_mu(&self, d: usize) -> f64 {
        euclid(&self.mu_t0, SimplexVector::uniform(d).as_slice())
    }
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Draws the random inputs of sample `index` and runs the backward pass.
pub fn reconstruct_sample(
    model: &GameModel,
    t0: f64,
    opts: &SampleOptions,
    index: u64,
) -> BackwardSample {
    let d = model.num_states();
    let k = model.num_controls();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    ChaCha8Rng::set_stream(&mut rng, index);
    let m_terminal = sample_simplex(&mut rng, d).as_slice().to_vec();
    let mu_terminal = sample_simplex(&mut rng, d).as_slice().to_vec();
    let macro_cells = opts.macro_k.min(opts.steps).max(1);
    let mut cells: Vec<Vec<f64>> = Vec::with_capacity(macro_cells);
    for _ in 0..macro_cells {
        let mut slice = Vec::with_capacity(d * k);
        for _ in 0..d {
            if rng.gen_bool(0.75) {
                let mut row = vec![0.0; k];
                row[rng.gen_range(0..k)] = 1.0;
                slice.extend_from_slice(&row);
            } else {
                slice.extend_from_slice(&vec![1.0 / k as f64; k]);
            }
        }
        cells.push(slice);
    }
    let profile = RelaxedStrategyProfile::from_slices(model, t0, model.horizon(), opts.steps, |step| {
        cells[step * macro_cells / opts.steps].clone()
    });

    let (m_t0, phi_t0, mu_t0, z_t0, in_simplex) =
        backward_pass(model, &profile, &m_terminal, &mu_terminal);
    BackwardSample {
        index,
        m_terminal,
        mu_terminal,
        m_t0,
        mu_t0,
        phi_t0,
        z_t0,
        in_simplex,
        profile,
    }
}

/// Joint backward RK4 of `(m, phi, mu, z)` from the terminal manifold.
///
/// No renormalization: the pass reports whether the path stayed on the
/// simplex instead of forcing it there.
fn backward_pass(
    model: &GameModel,
    profile: &RelaxedStrategyProfile,
    m_terminal: &[f64],
    mu_terminal: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>, f64, bool) {
    let d = model.num_states();
    let n = profile.num_intervals();
    let grid = profile.time_grid();
    let len = 3 * d + 1;

    let mut y = vec![0.0; len];
    y[..d].copy_from_slice(m_terminal);
    let sigma = model.eval_sigma(m_terminal);
    y[d..2 * d].copy_from_slice(&sigma);
    y[2 * d..3 * d].copy_from_slice(mu_terminal);
    y[3 * d] = 0.0;

    let mut q = vec![0.0; d * d];
    let mut row = vec![0.0; d];
    let mut hv = vec![0.0; d];
    let mut gv = vec![0.0; d];
    let (mut k1, mut k2, mut k3, mut k4) =
        (vec![0.0; len], vec![0.0; len], vec![0.0; len], vec![0.0; len]);
    let mut stage = vec![0.0; len];

    let rhs = |nu: &[f64], y: &[f64], out: &mut [f64], q: &mut [f64], row: &mut [f64], hv: &mut [f64], gv: &mut [f64]| {
        let (m, rest) = y.split_at(d);
        let (phi, rest) = rest.split_at(d);
        let (mu, _) = rest.split_at(d);
        mixed_generator_into(model, m, nu, q, row);
        hamiltonian_values(model, m, phi, hv);
        mixed_reward_into(model, m, nu, gv);
        for j in 0..d {
            let mut dm = 0.0;
            let mut dmu = 0.0;
            for i in 0..d {
                dm += m[i] * q[i * d + j];
                dmu += mu[i] * q[i * d + j];
            }
            out[j] = dm;
            out[2 * d + j] = dmu;
            out[d + j] = -hv[j];
        }
        let mut dz = 0.0;
        for i in 0..d {
            let mut q_phi = 0.0;
            for j in 0..d {
                q_phi += q[i * d + j] * phi[j];
            }
            dz += mu[i] * (-q_phi + hv[i] - gv[i]);
        }
        out[3 * d] = dz;
    };

    let mut in_simplex = true;
    for step in (0..n).rev() {
        let h = grid[step + 1] - grid[step];
        let nu = profile.slice(step);
        rhs(nu, &y, &mut k1, &mut q, &mut row, &mut hv, &mut gv);
        for i in 0..len {
            stage[i] = y[i] - h / 2.0 * k1[i];
        }
        rhs(nu, &stage, &mut k2, &mut q, &mut row, &mut hv, &mut gv);
        for i in 0..len {
            stage[i] = y[i] - h / 2.0 * k2[i];
        }
        rhs(nu, &stage, &mut k3, &mut q, &mut row, &mut hv, &mut gv);
        for i in 0..len {
            stage[i] = y[i] - h * k3[i];
        }
        rhs(nu, &stage, &mut k4, &mut q, &mut row, &mut hv, &mut gv);
        for i in 0..len {
            y[i] -= h / 6.0 * (k1[i] + 2.0 * (k2[i] + k3[i]) + k4[i]);
        }
        if in_simplex {
            in_simplex = y[..d]
                .iter()
                .chain(&y[2 * d..3 * d])
                .all(|&x| x >= -crate::model::SIMPLEX_SLACK);
        }
    }

    (
        y[..d].to_vec(),
        y[d..2 * d].to_vec(),
        y[2 * d..3 * d].to_vec(),
        y[3 * d],
        in_simplex,
    )
}

struct SampleStats {
    dist_m: f64,
    dist_mu: f64,
    z_t0: f64,
    phi_t0: Vec<f64>,
    in_simplex: bool,
}

fn run_samples(model: &GameModel, t0: f64, m0: &SimplexVector, opts: &SampleOptions) -> Vec<SampleStats> {
    let d = model.num_states();
    let uniform = SimplexVector::uniform(d);
    (0..opts.samples as u64)
        .into_par_iter()
        .map(|index| {
            let sample = reconstruct_sample(model, t0, opts, index);
            SampleStats {
                dist_m: euclid(&sample.m_t0, m0.as_slice()),
                dist_mu: euclid(&sample.mu_t0, uniform.as_slice()),
                z_t0: sample.z_t0,
                phi_t0: sample.phi_t0,
                in_simplex: sample.in_simplex,
            }
        })
        .collect()
}

/// Samples the backward attainability set and collects accepted values.
///
/// Empty clouds are valid results; the ten nearest misses ship with the
/// cloud so an empty result can be told apart from an under-sampled one.
pub fn backward_sample(
    model: &GameModel,
    t0: f64,
    m0: &SimplexVector,
    opts: &SampleOptions,
) -> Result<ValueCloud> {
    if !(t0 < model.horizon()) {
        return Err(Error::InvalidInput(format!(
            "need t0 < T, got t0 = {t0}, T = {}",
            model.horizon()
        )));
    }
    let stats = run_samples(model, t0, m0, opts);

    let mut accepted: Vec<(u64, &SampleStats)> = Vec::new();
    let mut misses: Vec<NearMiss> = Vec::new();
    let mut max_z_t0 = f64::NEG_INFINITY;
    let mut off_simplex = 0usize;
    for (index, s) in stats.iter().enumerate() {
        if !s.in_simplex {
            // Not a trajectory of the constrained dynamics; neither
            // acceptable nor a meaningful near miss.
            off_simplex += 1;
            continue;
        }
        max_z_t0 = max_z_t0.max(s.z_t0);
        let ok = s.dist_m <= opts.tol_m && s.dist_mu <= opts.tol_mu && s.z_t0.abs() <= opts.tol_z;
        if ok {
            accepted.push((index as u64, s));
        } else {
            let score = (s.dist_m / opts.tol_m)
                .max(s.dist_mu / opts.tol_mu)
                .max(s.z_t0.abs() / opts.tol_z);
            misses.push(NearMiss {
                sample_index: index as u64,
                dist_m: s.dist_m,
                dist_mu: s.dist_mu,
                z_abs: s.z_t0.abs(),
                score,
            });
        }
    }
    misses.sort_by(|a, b| {
        a.score
            .partial_cmp(&b.score)
            .unwrap()
            .then(a.sample_index.cmp(&b.sample_index))
    });
    misses.truncate(10);

    // Deduplicate accepted values at 1e-4 sup-norm; the representative with
    // the smallest worst residual wins.
    let mut points: Vec<CloudPoint> = Vec::new();
    let accepted_before_dedup = accepted.len();
    for (index, s) in accepted {
        let candidate = CloudPoint {
            phi0: s.phi_t0.clone(),
            residuals: PointResiduals {
                dist_m: s.dist_m,
                dist_mu: s.dist_mu,
                z_abs: s.z_t0.abs(),
            },
            source: PointSource::BackwardSample,
            profile_ref: ProfileRef {
                seed: opts.seed,
                index,
            },
            certificate: None,
        };
        match points
            .iter_mut()
            .find(|p| sup_dist(&p.phi0, &candidate.phi0) < 1e-4)
        {
            Some(existing) => {
                let w_new = s.dist_m.max(s.dist_mu).max(s.z_t0.abs());
                let w_old = existing
                    .residuals
                    .dist_m
                    .max(existing.residuals.dist_mu)
                    .max(existing.residuals.z_abs);
                if w_new < w_old {
                    *existing = candidate;
                }
            }
            None => points.push(candidate),
        }
    }
    points.sort_by(|a, b| a.phi0[0].partial_cmp(&b.phi0[0]).unwrap());

    Ok(ValueCloud {
        t0,
        m0: m0.as_slice().to_vec(),
        points,
        options: *opts,
        samples_run: opts.samples,
        accepted_before_dedup,
        samples_off_simplex: off_simplex,
        max_z_t0,
        nearest_misses: misses,
    })
}

/// Merges certified multi-start solver values into the cloud (the forward
/// direction: every certified equilibrium value belongs to the value set).
pub fn forward_enrich(
    model: &GameModel,
    mut cloud: ValueCloud,
    solve_opts: &SolveOptions,
) -> Result<ValueCloud> {
    if solve_opts.starts == 0 {
        return Ok(cloud);
    }
    let m0 = SimplexVector::new(cloud.m0.clone())?;
    let reports = multi_start_solve(model, cloud.t0, &m0, solve_opts)?;
    for (start, report) in reports.iter().enumerate() {
        if report.certificate.verdict != Verdict::Certified {
            continue;
        }
        let phi0 = report.phi0().to_vec();
        if cloud.points.iter().any(|p| sup_dist(&p.phi0, &phi0) < 1e-4) {
            continue;
        }
        cloud.points.push(CloudPoint {
            phi0,
            residuals: PointResiduals {
                dist_m: 0.0,
                dist_mu: 0.0,
                z_abs: report.certificate.j.abs(),
            },
            source: PointSource::ForwardSolve,
            profile_ref: ProfileRef {
                seed: solve_opts.seed,
                index: start as u64,
            },
            certificate: Some(report.certificate.clone()),
        });
    }
    cloud
        .points
        .sort_by(|a, b| a.phi0[0].partial_cmp(&b.phi0[0]).unwrap());
    Ok(cloud)
}

/// Numerical membership evidence for `phi0` at the query `(t0, m0)`: the
/// minimum over sampled backward trajectories of the worst residual,
/// including the sup-distance of the sampled value to `phi0`. Zero is exact
/// membership on the sample set.
pub fn membership_residual(
    model: &GameModel,
    t0: f64,
    m0: &SimplexVector,
    phi0: &[f64],
    opts: &SampleOptions,
) -> f64 {
    let stats = run_samples(model, t0, m0, opts);
    stats
        .iter()
        .filter(|s| s.in_simplex)
        .map(|s| {
            s.dist_m
                .max(s.dist_mu)
                .max(s.z_t0.abs())
                .max(sup_dist(&s.phi_t0, phi0))
        })
        .fold(f64::INFINITY, f64::min)
}

/// Re-validates an accepted backward point: re-runs its backward pass,
/// integrates the same strategy forward from the landed initial point, and
/// returns the sup-distance between the reproduced terminal population and
/// the originally drawn one.
pub fn revalidate_backward_point(
    model: &GameModel,
    t0: f64,
    opts: &SampleOptions,
    index: u64,
) -> Result<f64> {
    let sample = reconstruct_sample(model, t0, opts, index);
    let start = renormalize(&sample.m_t0)?;
    let forward = integrate_forward_m(model, &sample.profile, t0, &start)?;
    Ok(sup_dist(
        forward.last().unwrap().as_slice(),
        &sample.m_terminal,
    ))
}

use rand::SeedableRng;
