//! Game data: state space, control grid, coefficient tables, and the simplex
//! arithmetic every other module consumes.
//!
//! A model fixes `d` states, a finite control grid of `K` labeled controls,
//! and three coefficient tables, each a polynomial of degree <= 2 in the
//! population distribution `m`:
//!
//! - `Q[u][i][j]`: transition rate from state `i` to `j` under control `u`
//!   (1/time). Every evaluated matrix must be a Kolmogorov matrix:
//!   nonnegative off-diagonal entries, zero row sums.
//! - `g[u][i]`: running reward rate in state `i` under control `u`.
//! - `sigma[i]`: terminal reward in state `i`.
//!
//! Rewards are maximized. Coefficients are time-independent; polynomial
//! dependence on `m` keeps Lipschitz continuity automatic on the compact
//! simplex and makes evaluation exact.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::Deserialize;

use crate::{Error, Result};

/// Numerical slack for simplex membership checks.
pub const SIMPLEX_SLACK: f64 = 1e-9;

/// A probability vector over the `d` states.
///
/// Entries may dip to `-SIMPLEX_SLACK` and the total mass may deviate from 1
/// by the same slack; anything worse is rejected at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexVector {
    entries: Vec<f64>,
}

impl SimplexVector {
    /// Validates and wraps a raw vector.
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidInput("simplex vector needs d >= 1".into()));
        }
        let sum: f64 = entries.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_SLACK {
            return Err(Error::InvalidInput(format!(
                "simplex vector entries sum to {sum:.12}, expected 1 within {SIMPLEX_SLACK:e}"
            )));
        }
        for (i, &v) in entries.iter().enumerate() {
            if !v.is_finite() || v < -SIMPLEX_SLACK {
                return Err(Error::InvalidInput(format!(
                    "simplex entry {} is {v}, below -{SIMPLEX_SLACK:e}",
                    i + 1
                )));
            }
        }
        Ok(Self { entries })
    }

    /// The uniform distribution `(1/d, ..., 1/d)`.
    ///
    /// Also serves as the anchor vector for attainability queries: the
    /// direction `(1,...,1)/sqrt(d)` rescaled to unit mass, so the tagged
    /// player's law stays on the simplex.
    pub fn uniform(d: usize) -> Self {
        Self {
            entries: vec![1.0 / d as f64; d],
        }
    }

    /// The `k`-th coordinate vector (0-indexed).
    pub fn vertex(d: usize, k: usize) -> Self {
        let mut entries = vec![0.0; d];
        entries[k] = 1.0;
        Self { entries }
    }

    pub fn dim(&self) -> usize {
        self.entries.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.entries
    }

    pub fn get(&self, i: usize) -> f64 {
        self.entries[i]
    }

    /// Euclidean distance to another vector of the same dimension.
    pub fn dist(&self, other: &Self) -> f64 {
        self.entries
            .iter()
            .zip(other.entries.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// Clips negative entries to zero and rescales to unit mass.
///
/// Rejects inputs whose mass has collapsed below 0.5 — that signals an
/// integrator blow-up rather than rounding drift. Idempotent.
pub fn renormalize(v: &[f64]) -> Result<SimplexVector> {
    let total: f64 = v.iter().sum();
    if !(total > 0.5) {
        return Err(Error::DegenerateMass { total });
    }
    // Already clean up to a few ulps: return unchanged. This is what makes
    // the operation exactly idempotent — the rescaled output lands in this
    // band, so a second pass is the identity.
    if (total - 1.0).abs() <= 1e-13 && v.iter().all(|&x| x >= 0.0) {
        return Ok(SimplexVector {
            entries: v.to_vec(),
        });
    }
    let clipped: Vec<f64> = v.iter().map(|&x| x.max(0.0)).collect();
    let sum: f64 = clipped.iter().sum();
    Ok(SimplexVector {
        entries: clipped.into_iter().map(|x| x / sum).collect(),
    })
}

/// Draws a uniform sample from the simplex by stick-breaking: `d - 1`
/// uniform cuts, sorted, segment lengths.
pub fn sample_simplex<R: Rng>(rng: &mut R, d: usize) -> SimplexVector {
    if d == 1 {
        return SimplexVector::uniform(1);
    }
    let mut cuts: Vec<f64> = (0..d - 1).map(|_| rng.gen::<f64>()).collect();
    cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut entries = Vec::with_capacity(d);
    let mut prev = 0.0;
    for &c in &cuts {
        entries.push(c - prev);
        prev = c;
    }
    entries.push(1.0 - prev);
    SimplexVector { entries }
}

/// The finite labeled control grid.
#[derive(Debug, Clone)]
pub struct ControlGrid {
    labels: Vec<String>,
}

impl ControlGrid {
    pub fn new(labels: Vec<String>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Validation("control grid needs K >= 1".into()));
        }
        for (a, label) in labels.iter().enumerate() {
            if labels[..a].contains(label) {
                return Err(Error::Validation(format!(
                    "duplicate control label '{label}'"
                )));
            }
        }
        Ok(Self { labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, k: usize) -> &str {
        &self.labels[k]
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}

/// Polynomial in `m` of degree <= 2: `c + lin . m + m^T quad m`.
#[derive(Debug, Clone, Default)]
pub struct Poly {
    pub c: f64,
    /// Length-d linear coefficients; empty means zero.
    pub lin: Vec<f64>,
    /// Row-major d*d quadratic coefficients; empty means zero.
    pub quad: Vec<f64>,
}

impl Poly {
    pub fn constant(c: f64) -> Self {
        Self {
            c,
            lin: Vec::new(),
            quad: Vec::new(),
        }
    }

    pub fn eval(&self, m: &[f64]) -> f64 {
        let mut v = self.c;
        if !self.lin.is_empty() {
            for (a, &mi) in self.lin.iter().zip(m.iter()) {
                v += a * mi;
            }
        }
        if !self.quad.is_empty() {
            let d = m.len();
            for k in 0..d {
                let row = &self.quad[k * d..(k + 1) * d];
                let mk = m[k];
                if mk != 0.0 {
                    for (l, &q) in row.iter().enumerate() {
                        v += q * mk * m[l];
                    }
                }
            }
        }
        v
    }

    fn is_finite(&self) -> bool {
        self.c.is_finite()
            && self.lin.iter().all(|x| x.is_finite())
            && self.quad.iter().all(|x| x.is_finite())
    }

    /// Crude Lipschitz bound on the simplex: sum of |lin| plus twice sum of
    /// |quad| dominates the gradient norm for m in the simplex.
    pub fn lipschitz_bound(&self) -> f64 {
        let lin: f64 = self.lin.iter().map(|x| x.abs()).sum();
        let quad: f64 = self.quad.iter().map(|x| x.abs()).sum();
        lin + 2.0 * quad
    }
}

/// Immutable game specification. Safe to share across workers.
#[derive(Debug, Clone)]
pub struct GameModel {
    d: usize,
    horizon: f64,
    controls: ControlGrid,
    /// Indexed `[u][i][j]` flattened as `(u * d + i) * d + j`.
    q: Vec<Poly>,
    /// Indexed `[u][i]` flattened as `u * d + i`.
    g: Vec<Poly>,
    /// Indexed `[i]`.
    sigma: Vec<Poly>,
}

impl GameModel {
    pub fn new(
        d: usize,
        horizon: f64,
        controls: ControlGrid,
        q: Vec<Poly>,
        g: Vec<Poly>,
        sigma: Vec<Poly>,
    ) -> Result<Self> {
        let model = Self {
            d,
            horizon,
            controls,
            q,
            g,
            sigma,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn num_states(&self) -> usize {
        self.d
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn controls(&self) -> &ControlGrid {
        &self.controls
    }

    pub fn num_controls(&self) -> usize {
        self.controls.len()
    }

    /// Transition rate `i -> j` at distribution `m` under control `u`.
    pub fn eval_q(&self, i: usize, j: usize, m: &[f64], u: usize) -> f64 {
        self.q[(u * self.d + i) * self.d + j].eval(m)
    }

    /// Running reward rate in state `i` at distribution `m` under control `u`.
    pub fn eval_g(&self, i: usize, m: &[f64], u: usize) -> f64 {
        self.g[u * self.d + i].eval(m)
    }

    /// Terminal reward vector, all `d` components.
    pub fn eval_sigma(&self, m: &[f64]) -> Vec<f64> {
        self.sigma.iter().map(|p| p.eval(m)).collect()
    }

    /// Writes the `i`-th row of `Q(m, u)` into `row`.
    pub fn q_row(&self, i: usize, m: &[f64], u: usize, row: &mut [f64]) {
        let base = (u * self.d + i) * self.d;
        for j in 0..self.d {
            row[j] = self.q[base + j].eval(m);
        }
    }

    /// Lipschitz bound of the terminal reward, from its coefficients.
    pub fn sigma_lipschitz_bound(&self) -> f64 {
        self.sigma
            .iter()
            .map(|p| p.lipschitz_bound())
            .fold(0.0, f64::max)
    }

    fn validate(&self) -> Result<()> {
        let d = self.d;
        if d < 1 {
            return Err(Error::Validation("d must be >= 1".into()));
        }
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(Error::Validation(format!(
                "horizon T = {} must be positive and finite",
                self.horizon
            )));
        }
        let k = self.controls.len();
        if self.q.len() != k * d * d {
            return Err(Error::Validation(format!(
                "Q table has {} entries, expected {}",
                self.q.len(),
                k * d * d
            )));
        }
        if self.g.len() != k * d {
            return Err(Error::Validation(format!(
                "g table has {} entries, expected {}",
                self.g.len(),
                k * d
            )));
        }
        if self.sigma.len() != d {
            return Err(Error::Validation(format!(
                "sigma table has {} entries, expected {d}",
                self.sigma.len()
            )));
        }
        for (idx, p) in self.q.iter().chain(&self.g).chain(&self.sigma).enumerate() {
            if !p.is_finite() {
                return Err(Error::Validation(format!(
                    "non-finite polynomial coefficient (table slot {idx})"
                )));
            }
            if (!p.lin.is_empty() && p.lin.len() != d) || (!p.quad.is_empty() && p.quad.len() != d * d)
            {
                return Err(Error::Validation(format!(
                    "polynomial coefficient arrays do not match d = {d} (table slot {idx})"
                )));
            }
        }

        // Kolmogorov property scanned on the quarter grid crossed with all
        // controls. Degree-2 polynomials that go negative inside the simplex
        // are caught here at desk cost; exactness is not attempted.
        for m in validation_grid(d) {
            for u in 0..k {
                for i in 0..d {
                    let mut row_sum = 0.0;
                    for j in 0..d {
                        let rate = self.eval_q(i, j, &m, u);
                        row_sum += rate;
                        if i != j && rate < -1e-12 {
                            return Err(Error::Validation(format!(
                                "negative off-diagonal rate Q[{},{}] = {rate:.3e} under control \
                                 '{}' at m = {m:?}",
                                i + 1,
                                j + 1,
                                self.controls.label(u)
                            )));
                        }
                    }
                    if row_sum.abs() > 1e-10 {
                        return Err(Error::Validation(format!(
                            "row {} of Q sums to {row_sum:.3e} under control '{}' at m = {m:?}; \
                             rows must sum to 0",
                            i + 1,
                            self.controls.label(u)
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// All simplex points with coordinates in {0, 1/4, 1/2, 3/4, 1}.
fn validation_grid(d: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    let mut stack = vec![(Vec::<u32>::new(), 4u32)];
    while let Some((prefix, left)) = stack.pop() {
        if prefix.len() == d - 1 {
            let mut point: Vec<f64> = prefix.iter().map(|&q| q as f64 / 4.0).collect();
            point.push(left as f64 / 4.0);
            out.push(point);
            continue;
        }
        for take in 0..=left {
            let mut next = prefix.clone();
            next.push(take);
            stack.push((next, left - take));
        }
    }
    out
}

// ── Model file format ───────────────────────────────────────────────

#[derive(Deserialize)]
struct PolyFile {
    #[serde(default)]
    c: f64,
    #[serde(default)]
    lin: Vec<f64>,
    #[serde(default)]
    quad: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
struct ModelFile {
    d: usize,
    #[serde(rename = "T")]
    horizon: f64,
    controls: Vec<String>,
    #[serde(rename = "Q")]
    q: BTreeMap<String, Vec<Vec<PolyFile>>>,
    g: BTreeMap<String, Vec<PolyFile>>,
    sigma: Vec<PolyFile>,
}

fn convert_poly(p: &PolyFile, d: usize, what: &str) -> Result<Poly> {
    if !p.lin.is_empty() && p.lin.len() != d {
        return Err(Error::Parse(format!(
            "{what}: lin has {} entries, expected {d}",
            p.lin.len()
        )));
    }
    if !p.quad.is_empty() && (p.quad.len() != d || p.quad.iter().any(|row| row.len() != d)) {
        return Err(Error::Parse(format!("{what}: quad must be {d}x{d}")));
    }
    Ok(Poly {
        c: p.c,
        lin: p.lin.clone(),
        quad: p.quad.iter().flatten().copied().collect(),
    })
}

/// Loads and validates a model from its JSON file format.
pub fn load_model(path: &Path) -> Result<GameModel> {
    let text = std::fs::read_to_string(path)?;
    load_model_str(&text)
}

/// Parses a model from JSON text. See the README for the schema.
pub fn load_model_str(text: &str) -> Result<GameModel> {
    let file: ModelFile =
        serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    let d = file.d;
    let controls = ControlGrid::new(file.controls.clone())?;
    let k = controls.len();

    let mut q = Vec::with_capacity(k * d * d);
    let mut g = Vec::with_capacity(k * d);
    for u in 0..k {
        let label = controls.label(u);
        let q_mat = file
            .q
            .get(label)
            .ok_or_else(|| Error::Parse(format!("Q table missing control '{label}'")))?;
        if q_mat.len() != d || q_mat.iter().any(|row| row.len() != d) {
            return Err(Error::Parse(format!(
                "Q['{label}'] must be a {d}x{d} array of polynomial objects"
            )));
        }
        for (i, row) in q_mat.iter().enumerate() {
            for (j, p) in row.iter().enumerate() {
                q.push(convert_poly(
                    p,
                    d,
                    &format!("Q['{label}'][{},{}]", i + 1, j + 1),
                )?);
            }
        }
        let g_row = file
            .g
            .get(label)
            .ok_or_else(|| Error::Parse(format!("g table missing control '{label}'")))?;
        if g_row.len() != d {
            return Err(Error::Parse(format!(
                "g['{label}'] must be a length-{d} array of polynomial objects"
            )));
        }
        for (i, p) in g_row.iter().enumerate() {
            g.push(convert_poly(p, d, &format!("g['{label}'][{}]", i + 1))?);
        }
    }
    if file.sigma.len() != d {
        return Err(Error::Parse(format!(
            "sigma must be a length-{d} array of polynomial objects"
        )));
    }
    let mut sigma = Vec::with_capacity(d);
    for (i, p) in file.sigma.iter().enumerate() {
        sigma.push(convert_poly(p, d, &format!("sigma[{}]", i + 1))?);
    }

    GameModel::new(d, file.horizon, controls, q, g, sigma)
}

// ── Builtin registry ────────────────────────────────────────────────

/// Two states, controls `stay`/`switch`. Switching moves mass between the
/// states at rate 1; there is no running reward and the terminal reward in a
/// state equals that state's final mass (a coordination game).
pub const TWO_STATE_SWITCH: &str = r#"{
  "d": 2,
  "T": 1.0,
  "controls": ["stay", "switch"],
  "Q": {
    "stay": [[{"c": 0.0}, {"c": 0.0}], [{"c": 0.0}, {"c": 0.0}]],
    "switch": [[{"c": -1.0}, {"c": 1.0}], [{"c": 1.0}, {"c": -1.0}]]
  },
  "g": {
    "stay": [{"c": 0.0}, {"c": 0.0}],
    "switch": [{"c": 0.0}, {"c": 0.0}]
  },
  "sigma": [{"lin": [1.0, 0.0]}, {"lin": [0.0, 1.0]}]
}"#;

/// Three states on a ring, controls `stay`/`cw`/`ccw` moving at rate 1.
/// Running and terminal rewards are `-m_i` (players avoid crowded states)
/// and moving costs an extra 0.35 per unit time, so mild imbalances are
/// tolerated and the equilibrium stays strict.
pub const CROWD_AVERSION_D3: &str = r#"{
  "d": 3,
  "T": 1.0,
  "controls": ["stay", "cw", "ccw"],
  "Q": {
    "stay": [
      [{"c": 0.0}, {"c": 0.0}, {"c": 0.0}],
      [{"c": 0.0}, {"c": 0.0}, {"c": 0.0}],
      [{"c": 0.0}, {"c": 0.0}, {"c": 0.0}]
    ],
    "cw": [
      [{"c": -1.0}, {"c": 1.0}, {"c": 0.0}],
      [{"c": 0.0}, {"c": -1.0}, {"c": 1.0}],
      [{"c": 1.0}, {"c": 0.0}, {"c": -1.0}]
    ],
    "ccw": [
      [{"c": -1.0}, {"c": 0.0}, {"c": 1.0}],
      [{"c": 1.0}, {"c": -1.0}, {"c": 0.0}],
      [{"c": 0.0}, {"c": 1.0}, {"c": -1.0}]
    ]
  },
  "g": {
    "stay": [{"lin": [-1.0, 0.0, 0.0]}, {"lin": [0.0, -1.0, 0.0]}, {"lin": [0.0, 0.0, -1.0]}],
    "cw": [
      {"c": -0.35, "lin": [-1.0, 0.0, 0.0]},
      {"c": -0.35, "lin": [0.0, -1.0, 0.0]},
      {"c": -0.35, "lin": [0.0, 0.0, -1.0]}
    ],
    "ccw": [
      {"c": -0.35, "lin": [-1.0, 0.0, 0.0]},
      {"c": -0.35, "lin": [0.0, -1.0, 0.0]},
      {"c": -0.35, "lin": [0.0, 0.0, -1.0]}
    ]
  },
  "sigma": [{"lin": [-1.0, 0.0, 0.0]}, {"lin": [0.0, -1.0, 0.0]}, {"lin": [0.0, 0.0, -1.0]}]
}"#;

/// Resolves `builtin:<name>` model references.
pub fn builtin_model(name: &str) -> Result<GameModel> {
    match name {
        "two-state-switch" => load_model_str(TWO_STATE_SWITCH),
        "crowd-aversion-d3" => load_model_str(CROWD_AVERSION_D3),
        other => Err(Error::InvalidInput(format!(
            "unknown builtin model '{other}'; available: two-state-switch, crowd-aversion-d3"
        ))),
    }
}

/// Loads a model from a path or a `builtin:<name>` reference.
pub fn resolve_model(spec: &str) -> Result<GameModel> {
    match spec.strip_prefix("builtin:") {
        Some(name) => builtin_model(name),
        None => load_model(Path::new(spec)),
    }
}

/// Generates a random validated model for property testing: off-diagonal
/// rates are polynomials with nonnegative coefficients (hence nonnegative on
/// the simplex), diagonals are exact negative row sums, rewards are signed.
///
/// Rates are kept modest so that the trapezoid quadrature of the certificate
/// stays well inside its tolerances on the default grids; the identities
/// under test are scale-invariant.
pub fn random_model<R: Rng>(rng: &mut R, d: usize, k: usize) -> GameModel {
    let rate = 0.2;
    let labels: Vec<String> = (0..k).map(|u| format!("u{u}")).collect();
    let controls = ControlGrid::new(labels).unwrap();
    let mut q = vec![Poly::default(); k * d * d];
    for u in 0..k {
        for i in 0..d {
            let mut diag = Poly {
                c: 0.0,
                lin: vec![0.0; d],
                quad: vec![0.0; d * d],
            };
            for j in 0..d {
                if j == i {
                    continue;
                }
                let mut p = Poly {
                    c: rng.gen_range(0.0..rate),
                    lin: vec![0.0; d],
                    quad: vec![0.0; d * d],
                };
                if rng.gen_bool(0.5) {
                    p.lin[rng.gen_range(0..d)] = rng.gen_range(0.0..rate);
                }
                if rng.gen_bool(0.3) {
                    p.quad[rng.gen_range(0..d * d)] = rng.gen_range(0.0..rate / 2.0);
                }
                diag.c -= p.c;
                for a in 0..d {
                    diag.lin[a] -= p.lin[a];
                }
                for a in 0..d * d {
                    diag.quad[a] -= p.quad[a];
                }
                q[(u * d + i) * d + j] = p;
            }
            q[(u * d + i) * d + i] = diag;
        }
    }
    let mut g = Vec::with_capacity(k * d);
    for _ in 0..k * d {
        let mut p = Poly::constant(rng.gen_range(-1.0..1.0));
        if rng.gen_bool(0.5) {
            p.lin = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        }
        g.push(p);
    }
    let mut sigma = Vec::with_capacity(d);
    for _ in 0..d {
        let mut p = Poly::constant(rng.gen_range(-1.0..1.0));
        if rng.gen_bool(0.5) {
            p.lin = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        }
        sigma.push(p);
    }
    GameModel::new(d, 1.0, controls, q, g, sigma).expect("construction guarantees validity")
}
