//! Value fields on a simplex grid: building them from solver sweeps,
//! checking the residual of the relaxed master inclusion at grid nodes, and
//! constructing equilibrium candidates from a field.
//!
//! The field stores one value vector per (time node, simplex node). The
//! residual at an interior node measures how far `-(dPhi/ds + H)` is from
//! the set `{xi . dPhi/dmu : xi in co O}`, where `co O` is the polytope of
//! population drifts generated by per-state argmax selections. The measure
//! derivative is tangential: only differences along the directions
//! `e_j - e_1` are defined, and the matrix is reconstructed with its first
//! row anchored at zero — the pairing with zero-sum row vectors `xi` makes
//! the anchor immaterial.
//!
//! Nodes where the solver sweep found no value or several distinct values
//! are flagged and excluded from residual checks; averaging selections
//! would fabricate a field no statement covers.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::roll_bundle;
use crate::model::{GameModel, SimplexVector};
use crate::reformulation::{verify_solution, Tolerances, Verdict};
use crate::relaxed::{hamiltonian, RelaxedStrategyProfile};
use crate::solver::{multi_start_solve, Scheme, SolveOptions, SolveReport};
use crate::{Error, Result};

/// Cap on the number of argmax-selection vertices; ties beyond it abort
/// rather than silently subsample.
pub const VERTEX_CAP: usize = 4096;

/// Regular barycentric lattice `{k/M : k in N^d, sum k = M}` with
/// lexicographically ordered nodes and piecewise-linear interpolation.
#[derive(Debug, Clone)]
pub struct SimplexGrid {
    d: usize,
    denominator: usize,
    nodes: Vec<Vec<u16>>,
    lookup: HashMap<Vec<u16>, usize>,
}

impl SimplexGrid {
    pub fn new(d: usize, denominator: usize) -> Result<Self> {
        if d < 1 || denominator < 1 {
            return Err(Error::InvalidInput(
                "simplex grid needs d >= 1 and a positive denominator".into(),
            ));
        }
        let mut nodes = Vec::new();
        let mut prefix = Vec::with_capacity(d);
        enumerate_lattice(d, denominator as u16, &mut prefix, &mut nodes);
        let lookup = nodes
            .iter()
            .enumerate()
            .map(|(i, k)| (k.clone(), i))
            .collect();
        Ok(Self {
            d,
            denominator,
            nodes,
            lookup,
        })
    }

    pub fn mesh(&self) -> f64 {
        1.0 / self.denominator as f64
    }

    pub fn denominator(&self) -> usize {
        self.denominator
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node_lattice(&self, idx: usize) -> &[u16] {
        &self.nodes[idx]
    }

    pub fn node_point(&self, idx: usize) -> Vec<f64> {
        let m = self.denominator as f64;
        self.nodes[idx].iter().map(|&k| k as f64 / m).collect()
    }

    pub fn index_of(&self, lattice: &[u16]) -> Option<usize> {
        self.lookup.get(lattice).copied()
    }

    /// Offsets a lattice point by `+1` in `plus` and `-1` in `minus`;
    /// `None` when the result leaves the lattice.
    pub fn neighbor(&self, idx: usize, plus: usize, minus: usize) -> Option<usize> {
        let k = &self.nodes[idx];
        if k[minus] == 0 {
            return None;
        }
        let mut shifted = k.clone();
        shifted[plus] += 1;
        shifted[minus] -= 1;
        self.index_of(&shifted)
    }

    /// Piecewise-linear interpolation weights: at most `d` lattice vertices
    /// with nonnegative weights summing to one, exact on linear functions.
    ///
    /// Works in partial-sum coordinates `z_i = M (m_1 + ... + m_i)`, where
    /// the lattice becomes the set of monotone integer vectors and the Kuhn
    /// (sorted fractional part) cell of a point stays inside it.
    pub fn interpolate(&self, m: &[f64]) -> Vec<(usize, f64)> {
        let d = self.d;
        let big_m = self.denominator as f64;
        if d == 1 {
            return vec![(0, 1.0)];
        }
        let mut z = Vec::with_capacity(d - 1);
        let mut acc = 0.0;
        for &mi in &m[..d - 1] {
            acc += mi;
            z.push((acc * big_m).clamp(0.0, big_m));
        }
        let mut base: Vec<u16> = Vec::with_capacity(d - 1);
        let mut frac: Vec<f64> = Vec::with_capacity(d - 1);
        for &zi in &z {
            let f = zi.floor().min(big_m - 1.0).max(0.0);
            base.push(f as u16);
            frac.push((zi - f).clamp(0.0, 1.0));
        }
        // Descending fractional part; ties resolved toward the higher index
        // so each +1 keeps the partial-sum vector monotone.
        let mut order: Vec<usize> = (0..d - 1).collect();
        order.sort_by(|&a, &b| frac[b].partial_cmp(&frac[a]).unwrap().then(b.cmp(&a)));

        let lattice_of = |zv: &[u16]| -> Vec<u16> {
            let mut k = Vec::with_capacity(d);
            k.push(zv[0]);
            for i in 1..d - 1 {
                k.push(zv[i] - zv[i - 1]);
            }
            k.push(self.denominator as u16 - zv[d - 2]);
            k
        };

        let mut result = Vec::with_capacity(d);
        let mut current = base.clone();
        let w0 = 1.0 - frac[order[0]];
        if w0 > 0.0 {
            if let Some(idx) = self.index_of(&lattice_of(&current)) {
                result.push((idx, w0));
            }
        }
        for (rank, &coord) in order.iter().enumerate() {
            current[coord] += 1;
            let w = if rank + 1 < order.len() {
                frac[coord] - frac[order[rank + 1]]
            } else {
                frac[coord]
            };
            if w > 0.0 {
                if let Some(idx) = self.index_of(&lattice_of(&current)) {
                    result.push((idx, w));
                }
            }
        }
        // Guard against clamping losses right at the boundary.
        let total: f64 = result.iter().map(|(_, w)| w).sum();
        if total > 0.0 {
            for entry in &mut result {
                entry.1 /= total;
            }
        }
        result
    }
}

fn enumerate_lattice(d: usize, left: u16, prefix: &mut Vec<u16>, out: &mut Vec<Vec<u16>>) {
    if prefix.len() == d - 1 {
        let mut node = prefix.clone();
        node.push(left);
        out.push(node);
        return;
    }
    for take in (0..=left).rev() {
        prefix.push(take);
        enumerate_lattice(d, left - take, prefix, out);
        prefix.pop();
    }
}

/// Grid value field with a multivalued-node mask.
#[derive(Debug, Clone)]
pub struct MasterField {
    pub time_nodes: Vec<f64>,
    pub grid: SimplexGrid,
    /// Flattened `[t][node][state]`.
    pub values: Vec<f64>,
    /// True where the node carries no usable value (unsolved or several
    /// deduplicated values).
    pub excluded: Vec<bool>,
}

impl MasterField {
    pub fn num_time_nodes(&self) -> usize {
        self.time_nodes.len()
    }

    pub fn d(&self) -> usize {
        self.grid.d
    }

    pub fn value(&self, ti: usize, ni: usize) -> &[f64] {
        let d = self.grid.d;
        let base = (ti * self.grid.len() + ni) * d;
        &self.values[base..base + d]
    }

    pub fn is_excluded(&self, ti: usize, ni: usize) -> bool {
        self.excluded[ti * self.grid.len() + ni]
    }

    pub fn num_excluded(&self) -> usize {
        self.excluded.iter().filter(|&&x| x).count()
    }
}

#[derive(Serialize, Deserialize)]
struct FieldFile {
    d: usize,
    horizon: f64,
    time_nodes: Vec<f64>,
    mesh_denominator: usize,
    values: Vec<f64>,
    excluded_mask: Vec<bool>,
}

impl MasterField {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(FieldFile {
            d: self.grid.d,
            horizon: *self.time_nodes.last().unwrap(),
            time_nodes: self.time_nodes.clone(),
            mesh_denominator: self.grid.denominator,
            values: self.values.clone(),
            excluded_mask: self.excluded.clone(),
        })
        .expect("field serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: FieldFile =
            serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        if file.mesh_denominator < 4 {
            return Err(Error::Parse(
                "field mesh denominator must be >= 4 (h <= 1/4)".into(),
            ));
        }
        let grid = SimplexGrid::new(file.d, file.mesh_denominator)?;
        if file.values.len() != file.time_nodes.len() * grid.len() * file.d
            || file.excluded_mask.len() != file.time_nodes.len() * grid.len()
        {
            return Err(Error::Parse("field arrays do not match grid shape".into()));
        }
        if file.time_nodes.len() < 3 {
            return Err(Error::Parse("field needs at least 3 time nodes".into()));
        }
        if file.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse("field values must be finite".into()));
        }
        Ok(Self {
            time_nodes: file.time_nodes,
            grid,
            values: file.values,
            excluded: file.excluded_mask,
        })
    }
}

/// Drift polytope of per-state argmax selections at `(m, phi)`.
#[derive(Debug, Clone)]
pub struct OptimalityPolytope {
    /// Row vectors `m Q(m, selection)`, entries summing to zero.
    pub vertices: Vec<Vec<f64>>,
    /// `selections[r][i]` = control chosen for state `i` in vertex `r`.
    pub selections: Vec<Vec<usize>>,
}

/// Enumerates all per-state argmax Dirac selections and their population
/// drifts. Errors past [`VERTEX_CAP`].
pub fn optimality_polytope(
    model: &GameModel,
    m: &[f64],
    phi: &[f64],
) -> Result<OptimalityPolytope> {
    let d = model.num_states();
    let ham = hamiltonian(model, m, phi);
    let count: usize = ham.argmax_sets.iter().map(|s| s.len()).product();
    if count > VERTEX_CAP {
        return Err(Error::CapExceeded(format!(
            "{count} selections (per-state argmax sizes {:?}), cap {VERTEX_CAP}",
            ham.argmax_sets.iter().map(|s| s.len()).collect::<Vec<_>>()
        )));
    }

    // Per-state drift contributions m_i * Q_i.(m, u) over argmax controls.
    let mut contributions: Vec<Vec<Vec<f64>>> = Vec::with_capacity(d);
    let mut row = vec![0.0; d];
    for i in 0..d {
        let mut per_control = Vec::with_capacity(ham.argmax_sets[i].len());
        for &u in &ham.argmax_sets[i] {
            model.q_row(i, m, u, &mut row);
            per_control.push(row.iter().map(|&q| m[i] * q).collect::<Vec<f64>>());
        }
        contributions.push(per_control);
    }

    let mut vertices = Vec::with_capacity(count);
    let mut selections = Vec::with_capacity(count);
    let mut pick = vec![0usize; d];
    loop {
        let mut vertex = vec![0.0; d];
        let mut selection = Vec::with_capacity(d);
        for i in 0..d {
            for (j, v) in contributions[i][pick[i]].iter().enumerate() {
                vertex[j] += v;
            }
            selection.push(ham.argmax_sets[i][pick[i]]);
        }
        vertices.push(vertex);
        selections.push(selection);
        // Odometer over the per-state argmax sets.
        let mut carry = 0;
        loop {
            if carry == d {
                return Ok(OptimalityPolytope {
                    vertices,
                    selections,
                });
            }
            pick[carry] += 1;
            if pick[carry] < ham.argmax_sets[carry].len() {
                break;
            }
            pick[carry] = 0;
            carry += 1;
        }
    }
}

/// Frank-Wolfe result for the distance from a point to a vertex hull.
#[derive(Debug, Clone)]
pub struct HullProjection {
    pub distance: f64,
    pub duality_gap: f64,
    /// Convex weights over the vertices at termination.
    pub weights: Vec<f64>,
}

/// Euclidean distance from `target` to `conv(vertices)` by pairwise
/// Frank-Wolfe with exact line search; stops at 200 iterations or duality
/// gap <= 1e-10. The pairwise direction (toward the best vertex, away from
/// the worst active one) converges linearly on polytopes, so the budget is
/// ample and the result does not depend on vertex ordering beyond the gap
/// tolerance.
pub fn distance_to_hull(target: &[f64], vertices: &[Vec<f64>]) -> HullProjection {
    let dim = target.len();
    let r = vertices.len();
    let mut weights = vec![0.0; r];
    weights[0] = 1.0;
    let mut x = vertices[0].clone();
    let mut gap = f64::INFINITY;
    for _ in 0..200 {
        let grad: Vec<f64> = (0..dim).map(|c| x[c] - target[c]).collect();
        let mut toward = 0usize;
        let mut toward_score = f64::INFINITY;
        let mut away = 0usize;
        let mut away_score = f64::NEG_INFINITY;
        for (idx, v) in vertices.iter().enumerate() {
            let score: f64 = (0..dim).map(|c| v[c] * grad[c]).sum();
            if score < toward_score {
                toward_score = score;
                toward = idx;
            }
            if weights[idx] > 0.0 && score > away_score {
                away_score = score;
                away = idx;
            }
        }
        let s = &vertices[toward];
        gap = (0..dim).map(|c| (x[c] - s[c]) * grad[c]).sum();
        if gap <= 1e-10 {
            break;
        }
        let a = &vertices[away];
        let dir: Vec<f64> = (0..dim).map(|c| s[c] - a[c]).collect();
        let denom: f64 = dir.iter().map(|v| v * v).sum();
        if denom == 0.0 {
            break;
        }
        let descent: f64 = (0..dim).map(|c| -grad[c] * dir[c]).sum();
        let gamma = (descent / denom).clamp(0.0, weights[away]);
        if gamma == 0.0 {
            break;
        }
        for c in 0..dim {
            x[c] += gamma * dir[c];
        }
        weights[toward] += gamma;
        weights[away] -= gamma;
    }
    let distance = (0..dim)
        .map(|c| (x[c] - target[c]) * (x[c] - target[c]))
        .sum::<f64>()
        .sqrt();
    HullProjection {
        distance,
        duality_gap: gap.max(0.0),
        weights,
    }
}

/// Tangential measure derivative at a node: rows `j >= 1` hold the centered
/// (or one-sided) difference of the field along `e_j - e_0`; row 0 is the
/// anchor and stays zero.
fn measure_derivative(field: &MasterField, ti: usize, ni: usize) -> Result<Vec<Vec<f64>>> {
    let d = field.d();
    let h = field.grid.mesh();
    // An off-lattice neighbor falls back to a one-sided stencil (the field
    // is still smooth at the simplex boundary); an excluded neighbor blocks
    // the stencil outright — a one-sided difference leaning away from a
    // multivalued region would silently poison the residual.
    let usable = |n: Option<usize>| -> Result<Option<usize>> {
        match n {
            Some(idx) if field.is_excluded(ti, idx) => Err(Error::InvalidInput(format!(
                "stencil blocked by excluded node {idx}"
            ))),
            other => Ok(other),
        }
    };
    let mut rows = vec![vec![0.0; d]; d];
    for j in 1..d {
        let plus = usable(field.grid.neighbor(ni, j, 0))?;
        let minus = usable(field.grid.neighbor(ni, 0, j))?;
        let row = match (plus, minus) {
            (Some(p), Some(q)) => {
                let vp = field.value(ti, p);
                let vq = field.value(ti, q);
                (0..d).map(|c| (vp[c] - vq[c]) / (2.0 * h)).collect()
            }
            (Some(p), None) => {
                let vp = field.value(ti, p);
                let v0 = field.value(ti, ni);
                (0..d).map(|c| (vp[c] - v0[c]) / h).collect()
            }
            (None, Some(q)) => {
                let vq = field.value(ti, q);
                let v0 = field.value(ti, ni);
                (0..d).map(|c| (v0[c] - vq[c]) / h).collect()
            }
            (None, None) => composed_derivative(field, ti, ni, j)?,
        };
        rows[j] = row;
    }
    Ok(rows)
}

/// Fallback through an intermediate coordinate when both direct neighbors
/// along `e_j - e_0` are off-lattice (the node has `k_0 = k_j = 0`).
fn composed_derivative(field: &MasterField, ti: usize, ni: usize, j: usize) -> Result<Vec<f64>> {
    let d = field.d();
    let h = field.grid.mesh();
    let lattice = field.grid.node_lattice(ni);
    let mid = (0..d)
        .filter(|&i| i != 0 && i != j && lattice[i] > 0)
        .max_by_key(|&i| lattice[i])
        .ok_or_else(|| {
            Error::InvalidInput(format!(
                "no usable stencil for the measure derivative at node {ni}"
            ))
        })?;
    let reachable = |n: Option<usize>| {
        n.filter(|&idx| !field.is_excluded(ti, idx))
            .ok_or_else(|| Error::InvalidInput(format!("blocked stencil at node {ni}")))
    };
    let p1 = reachable(field.grid.neighbor(ni, j, mid))?;
    let p2 = reachable(field.grid.neighbor(ni, 0, mid))?;
    let v1 = field.value(ti, p1);
    let v2 = field.value(ti, p2);
    let v0 = field.value(ti, ni);
    // (e_j - e_0) = (e_j - e_mid) + (e_mid - e_0), both one-sided.
    Ok((0..d)
        .map(|c| (v1[c] - v0[c]) / h + (v0[c] - v2[c]) / h)
        .collect())
}

fn time_derivative(field: &MasterField, ti: usize, ni: usize) -> Result<Vec<f64>> {
    let nt = field.num_time_nodes();
    let d = field.d();
    let (lo, hi) = if ti == 0 {
        (0, 1)
    } else if ti == nt - 1 {
        (nt - 2, nt - 1)
    } else {
        (ti - 1, ti + 1)
    };
    if field.is_excluded(lo, ni) || field.is_excluded(hi, ni) {
        return Err(Error::InvalidInput(format!(
            "time stencil blocked at node {ni}"
        )));
    }
    let dt = field.time_nodes[hi] - field.time_nodes[lo];
    let vl = field.value(lo, ni);
    let vh = field.value(hi, ni);
    Ok((0..d).map(|c| (vh[c] - vl[c]) / dt).collect())
}

/// Residual detail at one grid node.
#[derive(Debug, Clone)]
pub struct ResidualDetail {
    pub distance: f64,
    pub duality_gap: f64,
    pub vertex_count: usize,
}

/// Distance from `-(dPhi/ds + H)` to the polytope image `{xi . dPhi/dmu}`
/// at an interior grid node.
pub fn master_residual(model: &GameModel, field: &MasterField, ti: usize, ni: usize) -> Result<f64> {
    master_residual_detail(model, field, ti, ni).map(|r| r.distance)
}

pub fn master_residual_detail(
    model: &GameModel,
    field: &MasterField,
    ti: usize,
    ni: usize,
) -> Result<ResidualDetail> {
    let nt = field.num_time_nodes();
    if ti == 0 || ti + 1 >= nt {
        return Err(Error::InvalidInput(
            "master residual needs an interior time node".into(),
        ));
    }
    if field.is_excluded(ti, ni) {
        return Err(Error::MultivaluedNode(format!(
            "t index {ti}, node index {ni}"
        )));
    }
    let d = field.d();
    let ds = time_derivative(field, ti, ni)?;
    let dmu = measure_derivative(field, ti, ni)?;
    let m = field.grid.node_point(ni);
    let phi = field.value(ti, ni);
    let ham = hamiltonian(model, &m, phi);
    let target: Vec<f64> = (0..d).map(|c| -(ds[c] + ham.values[c])).collect();
    let polytope = optimality_polytope(model, &m, phi)?;
    let images: Vec<Vec<f64>> = polytope
        .vertices
        .iter()
        .map(|xi| apply_row_to_matrix(xi, &dmu))
        .collect();
    let projection = distance_to_hull(&target, &images);
    Ok(ResidualDetail {
        distance: projection.distance,
        duality_gap: projection.duality_gap,
        vertex_count: polytope.vertices.len(),
    })
}

fn apply_row_to_matrix(xi: &[f64], rows: &[Vec<f64>]) -> Vec<f64> {
    let d = xi.len();
    let mut out = vec![0.0; d];
    for (i, &w) in xi.iter().enumerate() {
        if w != 0.0 {
            for c in 0..d {
                out[c] += w * rows[i][c];
            }
        }
    }
    out
}

/// One row of the residual report.
#[derive(Debug, Clone)]
pub struct ResidualRow {
    pub t_index: usize,
    pub node_index: usize,
    /// None when the node is flagged (excluded or blocked stencil).
    pub residual: Option<f64>,
    pub flagged: bool,
}

/// Residuals at every interior (time, node) pair; flagged nodes are
/// reported without a value.
pub fn residual_sweep(model: &GameModel, field: &MasterField) -> Vec<ResidualRow> {
    let mut rows = Vec::new();
    for ti in 1..field.num_time_nodes() - 1 {
        for ni in 0..field.grid.len() {
            let residual = master_residual(model, field, ti, ni).ok();
            rows.push(ResidualRow {
                t_index: ti,
                node_index: ni,
                flagged: residual.is_none(),
                residual,
            });
        }
    }
    rows
}

/// Options for building a field from solver sweeps.
#[derive(Debug, Clone, Copy)]
pub struct FieldBuildOptions {
    /// Time nodes (>= 3).
    pub nt: usize,
    /// Mesh denominator `M`; mesh `h = 1/M <= 1/4`.
    pub mesh: usize,
    /// Multi-start runs per node.
    pub starts: usize,
    pub seed: u64,
    /// Integration steps for a full-horizon solve; shorter horizons scale
    /// proportionally.
    pub steps: usize,
    pub max_iters: usize,
    pub tolerances: Tolerances,
}

impl Default for FieldBuildOptions {
    fn default() -> Self {
        Self {
            nt: 5,
            mesh: 4,
            starts: 4,
            seed: 42,
            steps: 400,
            max_iters: 400,
            // Looser than the headline certificate: node solves run on
            // horizon-scaled grids where the finite-difference residual
            // floor sits near 1e-5, and near-tie nodes shed strategy mass
            // only at the fictitious-play 1/n rate.
            tolerances: Tolerances {
                tol_j: 1e-4,
                tol_residual: 1e-4,
                tol_support: 1e-4,
            },
        }
    }
}

/// Builds a field by running the multi-start solver at every grid node.
/// Nodes whose certified value set is not a singleton are flagged.
pub fn build_field_from_solver(model: &GameModel, opts: &FieldBuildOptions) -> Result<MasterField> {
    if opts.nt < 3 {
        return Err(Error::InvalidInput("field needs nt >= 3".into()));
    }
    if opts.mesh < 4 {
        return Err(Error::InvalidInput(
            "field mesh denominator must be >= 4 (h <= 1/4)".into(),
        ));
    }
    let d = model.num_states();
    let horizon = model.horizon();
    let grid = SimplexGrid::new(d, opts.mesh)?;
    let nt = opts.nt;
    let time_nodes: Vec<f64> = (0..nt)
        .map(|i| horizon * i as f64 / (nt - 1) as f64)
        .collect();

    let cells: Vec<(usize, usize)> = (0..nt)
        .flat_map(|ti| (0..grid.len()).map(move |ni| (ti, ni)))
        .collect();
    let solved: Vec<Result<(Vec<f64>, bool)>> = cells
        .par_iter()
        .map(|&(ti, ni)| {
            let t = time_nodes[ti];
            let m_node = SimplexVector::new(grid.node_point(ni))?;
            if ti == nt - 1 {
                // Zero remaining horizon: the value is the terminal reward.
                return Ok((model.eval_sigma(m_node.as_slice()), false));
            }
            let remaining = horizon - t;
            let steps = ((opts.steps as f64 * remaining / horizon).ceil() as usize).max(16);
            let solve_opts = SolveOptions {
                steps,
                max_iters: opts.max_iters,
                tolerances: opts.tolerances,
                seed: opts.seed,
                starts: opts.starts,
            };
            let reports = multi_start_solve(model, t, &m_node, &solve_opts)?;
            let certified: Vec<&SolveReport> = reports
                .iter()
                .filter(|r| r.certificate.verdict == Verdict::Certified)
                .collect();
            match certified.len() {
                1 => Ok((certified[0].phi0().to_vec(), false)),
                _ => Ok((vec![0.0; d], true)),
            }
        })
        .collect();

    let mut values = vec![0.0; nt * grid.len() * d];
    let mut excluded = vec![false; nt * grid.len()];
    for (&(ti, ni), cell) in cells.iter().zip(solved) {
        let (value, excl) = cell?;
        excluded[ti * grid.len() + ni] = excl;
        let base = (ti * grid.len() + ni) * d;
        values[base..base + d].copy_from_slice(&value);
    }
    Ok(MasterField {
        time_nodes,
        grid,
        values,
        excluded,
    })
}

/// Options for constructing a trajectory from a field.
#[derive(Debug, Clone, Copy)]
pub struct ConstructOptions {
    pub steps: usize,
    pub tolerances: Tolerances,
}

impl Default for ConstructOptions {
    fn default() -> Self {
        Self {
            steps: 1000,
            tolerances: Tolerances::default(),
        }
    }
}

struct FieldView<'a> {
    field: &'a MasterField,
    /// Time derivative per (t, node), one-sided at the time boundary.
    ds: Vec<Option<Vec<f64>>>,
    /// Measure derivative rows per (t, node).
    dmu: Vec<Option<Vec<Vec<f64>>>>,
}

impl<'a> FieldView<'a> {
    fn new(field: &'a MasterField) -> Self {
        let nt = field.num_time_nodes();
        let ns = field.grid.len();
        let mut ds = Vec::with_capacity(nt * ns);
        let mut dmu = Vec::with_capacity(nt * ns);
        for ti in 0..nt {
            for ni in 0..ns {
                if field.is_excluded(ti, ni) {
                    ds.push(None);
                    dmu.push(None);
                } else {
                    ds.push(time_derivative(field, ti, ni).ok());
                    dmu.push(measure_derivative(field, ti, ni).ok());
                }
            }
        }
        Self { field, ds, dmu }
    }

    fn time_bracket(&self, t: f64) -> (usize, usize, f64) {
        let nodes = &self.field.time_nodes;
        let nt = nodes.len();
        let mut hi = 1;
        while hi < nt - 1 && nodes[hi] < t {
            hi += 1;
        }
        let lo = hi - 1;
        let span = nodes[hi] - nodes[lo];
        let theta = ((t - nodes[lo]) / span).clamp(0.0, 1.0);
        (lo, hi, theta)
    }

    /// Interpolates the value, time derivative, and measure derivative at
    /// `(t, m)`. Errors when a contributing node is flagged.
    fn sample(&self, t: f64, m: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Vec<Vec<f64>>)> {
        let d = self.field.d();
        let ns = self.field.grid.len();
        let (lo, hi, theta) = self.time_bracket(t);
        let nodes = self.field.grid.interpolate(m);
        let mut value = vec![0.0; d];
        let mut ds = vec![0.0; d];
        let mut dmu = vec![vec![0.0; d]; d];
        for &(ni, w) in &nodes {
            for (ti, tw) in [(lo, 1.0 - theta), (hi, theta)] {
                if tw == 0.0 {
                    continue;
                }
                if self.field.is_excluded(ti, ni) {
                    return Err(Error::MultivaluedNode(format!(
                        "t index {ti}, node index {ni} under the trajectory"
                    )));
                }
                let flat = ti * ns + ni;
                let v = self.field.value(ti, ni);
                let dsv = self.ds[flat].as_ref().ok_or_else(|| {
                    Error::InvalidInput(format!("time stencil blocked at node {ni}"))
                })?;
                let dmuv = self.dmu[flat].as_ref().ok_or_else(|| {
                    Error::InvalidInput(format!("measure stencil blocked at node {ni}"))
                })?;
                let ww = w * tw;
                for c in 0..d {
                    value[c] += ww * v[c];
                    ds[c] += ww * dsv[c];
                    for r in 0..d {
                        dmu[r][c] += ww * dmuv[r][c];
                    }
                }
            }
        }
        Ok((value, ds, dmu))
    }
}

/// Report from a field construction: the certified bundle plus how far the
/// rolled value trajectory sits from the interpolated field.
#[derive(Debug)]
pub struct FieldConstruction {
    pub report: SolveReport,
    /// Sup over grid nodes of |Phi(t, m(t)) - phi(t)|.
    pub phi_deviation: f64,
    /// Interpolated field value along the trajectory at the terminal time.
    pub phi_terminal_interpolated: Vec<f64>,
}

/// Forward-constructs a trajectory from a field: at each step the drift is
/// the convex combination of argmax selections whose image best matches
/// `-(dPhi/ds + H)`, the matching weights define the relaxed strategy, and
/// the assembled profile is rolled and certified like any other candidate.
pub fn construct_from_field(
    model: &GameModel,
    field: &MasterField,
    t0: f64,
    m0: &SimplexVector,
    opts: &ConstructOptions,
) -> Result<FieldConstruction> {
    let d = model.num_states();
    let k = model.num_controls();
    let horizon = model.horizon();
    if !(t0 < horizon) {
        return Err(Error::InvalidInput(format!(
            "need t0 < T, got t0 = {t0}, T = {horizon}"
        )));
    }
    let view = FieldView::new(field);
    let n = opts.steps;
    let h = (horizon - t0) / n as f64;
    let mesh = field.grid.mesh();
    let mut residual_cache: HashMap<(usize, usize), f64> = HashMap::new();
    let nt = field.num_time_nodes();

    let mut m = m0.clone();
    let mut slices: Vec<Vec<f64>> = Vec::with_capacity(n);
    for step in 0..n {
        let t = t0 + step as f64 * h;
        let (phi, ds, dmu) = view.sample(t, m.as_slice())?;
        let ham = hamiltonian(model, m.as_slice(), &phi);
        let target: Vec<f64> = (0..d).map(|c| -(ds[c] + ham.values[c])).collect();
        let polytope = optimality_polytope(model, m.as_slice(), &phi)?;
        let images: Vec<Vec<f64>> = polytope
            .vertices
            .iter()
            .map(|xi| apply_row_to_matrix(xi, &dmu))
            .collect();
        let projection = distance_to_hull(&target, &images);

        // Selector guard against the residual level of the nearest node.
        let ti_near = nearest_interior_time(field, t, nt);
        let ni_near = nearest_node(field, m.as_slice());
        if field.is_excluded(ti_near, ni_near) {
            return Err(Error::MultivaluedNode(format!(
                "t index {ti_near}, node index {ni_near} near the trajectory"
            )));
        }
        let node_residual = *residual_cache
            .entry((ti_near, ni_near))
            .or_insert_with(|| master_residual(model, field, ti_near, ni_near).unwrap_or(mesh));
        let guard = 10.0 * (node_residual + mesh);
        if projection.distance > guard {
            return Err(Error::SelectorResidual {
                residual: projection.distance,
                guard,
                t,
            });
        }

        // Convex weights over selections become the relaxed strategy slice.
        let mut slice = vec![0.0; d * k];
        for (r, &w) in projection.weights.iter().enumerate() {
            if w > 0.0 {
                for i in 0..d {
                    slice[i * k + polytope.selections[r][i]] += w;
                }
            }
        }
        for i in 0..d {
            let row = &mut slice[i * k..(i + 1) * k];
            let sum: f64 = row.iter().sum();
            for w in row.iter_mut() {
                *w /= sum;
            }
        }
        slices.push(slice.clone());

        // Advance the population under the chosen slice.
        m = rk4_m_step(model, &slice, m.as_slice(), h)?;
    }

    let profile = RelaxedStrategyProfile::from_slices(model, t0, horizon, n, |s| slices[s].clone());
    let mu0 = SimplexVector::uniform(d);
    let bundle = roll_bundle(model, &profile, t0, m0, &mu0)?;
    let certificate = verify_solution(model, &bundle, opts.tolerances)?;

    let mut phi_deviation = 0.0f64;
    for node in 0..=n {
        let t = bundle.time[node];
        if let Ok((phi_f, _, _)) = view.sample(t, bundle.m[node].as_slice()) {
            for c in 0..d {
                phi_deviation = phi_deviation.max((phi_f[c] - bundle.phi[node][c]).abs());
            }
        }
    }
    let (phi_terminal_interpolated, _, _) = view.sample(horizon, bundle.m[n].as_slice())?;

    let converged = certificate.verdict == Verdict::Certified;
    Ok(FieldConstruction {
        report: SolveReport {
            bundle,
            certificate,
            iterations: 0,
            j_history: Vec::new(),
            scheme: Scheme::FieldConstruction,
            seed: 0,
            converged,
        },
        phi_deviation,
        phi_terminal_interpolated,
    })
}

fn nearest_interior_time(field: &MasterField, t: f64, nt: usize) -> usize {
    let nodes = &field.time_nodes;
    let mut best = 1;
    let mut best_dist = f64::INFINITY;
    for ti in 1..nt - 1 {
        let dist = (nodes[ti] - t).abs();
        if dist < best_dist {
            best_dist = dist;
            best = ti;
        }
    }
    best
}

fn nearest_node(field: &MasterField, m: &[f64]) -> usize {
    field
        .grid
        .interpolate(m)
        .into_iter()
        .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
        .map(|(ni, _)| ni)
        .unwrap_or(0)
}

/// Single RK4 step of the population equation with terminal renormalization.
fn rk4_m_step(model: &GameModel, nu: &[f64], m: &[f64], h: f64) -> Result<SimplexVector> {
    let d = m.len();
    let mut q = vec![0.0; d * d];
    let mut row = vec![0.0; d];
    let rhs = |x: &[f64], out: &mut [f64], q: &mut [f64], row: &mut [f64]| {
        crate::relaxed::mixed_generator_into(model, x, nu, q, row);
        for j in 0..d {
            out[j] = (0..d).map(|i| x[i] * q[i * d + j]).sum();
        }
    };
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    let mut stage = vec![0.0; d];
    rhs(m, &mut k1, &mut q, &mut row);
    for j in 0..d {
        stage[j] = m[j] + h / 2.0 * k1[j];
    }
    rhs(&stage, &mut k2, &mut q, &mut row);
    for j in 0..d {
        stage[j] = m[j] + h / 2.0 * k2[j];
    }
    rhs(&stage, &mut k3, &mut q, &mut row);
    for j in 0..d {
        stage[j] = m[j] + h * k3[j];
    }
    rhs(&stage, &mut k4, &mut q, &mut row);
    let next: Vec<f64> = (0..d)
        .map(|j| m[j] + h / 6.0 * (k1[j] + 2.0 * (k2[j] + k3[j]) + k4[j]))
        .collect();
    crate::model::renormalize(&next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{builtin_model, load_model_str};

    fn trivial_model() -> GameModel {
        load_model_str(
            r#"{
          "d": 2, "T": 1.0, "controls": ["stay"],
          "Q": {"stay": [[{"c": 0.0}, {"c": 0.0}], [{"c": 0.0}, {"c": 0.0}]]},
          "g": {"stay": [{"c": 0.0}, {"c": 0.0}]},
          "sigma": [{"c": 0.0}, {"c": 0.0}]
        }"#,
        )
        .unwrap()
    }

    #[test]
    fn lattice_enumeration_counts() {
        let grid = SimplexGrid::new(2, 4).unwrap();
        assert_eq!(grid.len(), 5);
        let grid = SimplexGrid::new(3, 4).unwrap();
        assert_eq!(grid.len(), 15);
        for i in 0..grid.len() {
            let sum: u16 = grid.node_lattice(i).iter().sum();
            assert_eq!(sum, 4);
        }
    }

    #[test]
    fn interpolation_weights_are_convex_and_exact_on_linear() {
        let grid = SimplexGrid::new(3, 4).unwrap();
        let probes = [
            vec![0.4, 0.3, 0.3],
            vec![1.0, 0.0, 0.0],
            vec![0.0, 0.5, 0.5],
            vec![0.17, 0.58, 0.25],
            vec![0.25, 0.25, 0.5],
        ];
        let linear = |m: &[f64]| 2.0 * m[0] - 1.5 * m[1] + 0.25 * m[2];
        for m in &probes {
            let weights = grid.interpolate(m);
            let total: f64 = weights.iter().map(|(_, w)| w).sum();
            assert!((total - 1.0).abs() < 1e-12);
            let mut recon = vec![0.0; 3];
            let mut interp = 0.0;
            for &(ni, w) in &weights {
                assert!(w >= 0.0);
                let p = grid.node_point(ni);
                for c in 0..3 {
                    recon[c] += w * p[c];
                }
                interp += w * linear(&p);
            }
            for c in 0..3 {
                assert!(
                    (recon[c] - m[c]).abs() < 1e-12,
                    "reconstruction failed at {m:?}: {recon:?}"
                );
            }
            assert!((interp - linear(m)).abs() < 1e-12);
        }
    }

    #[test]
    fn polytope_strict_argmax_is_single_vertex() {
        let model = builtin_model("two-state-switch").unwrap();
        let p = optimality_polytope(&model, &[0.7, 0.3], &[1.0, 0.0]).unwrap();
        assert_eq!(p.vertices.len(), 1);
        // State 1 stays, state 2 switches: drift = m_2 * (1, -1).
        assert!((p.vertices[0][0] - 0.3).abs() < 1e-12);
        assert!((p.vertices[0][1] + 0.3).abs() < 1e-12);
    }

    #[test]
    fn polytope_full_tie_enumerates_products() {
        let model = builtin_model("two-state-switch").unwrap();
        // Constant phi: both controls tie in both states -> 4 selections.
        let p = optimality_polytope(&model, &[0.5, 0.5], &[0.3, 0.3]).unwrap();
        assert_eq!(p.vertices.len(), 4);
        for v in &p.vertices {
            let sum: f64 = v.iter().sum();
            assert!(sum.abs() <= 1e-10);
        }
    }

    #[test]
    fn polytope_single_control_zero_vertex() {
        let model = trivial_model();
        let p = optimality_polytope(&model, &[0.5, 0.5], &[1.0, 2.0]).unwrap();
        assert_eq!(p.vertices.len(), 1);
        assert_eq!(p.vertices[0], vec![0.0, 0.0]);
    }

    #[test]
    fn polytope_vertices_attain_hamiltonian() {
        let model = builtin_model("crowd-aversion-d3").unwrap();
        let m = [0.5, 0.3, 0.2];
        let phi = [-0.4, -0.1, -0.2];
        let ham = hamiltonian(&model, &m, &phi);
        let p = optimality_polytope(&model, &m, &phi).unwrap();
        for sel in &p.selections {
            for i in 0..3 {
                let mut score = model.eval_g(i, &m, sel[i]);
                for j in 0..3 {
                    score += model.eval_q(i, j, &m, sel[i]) * phi[j];
                }
                assert!((score - ham.values[i]).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn distance_to_hull_basics() {
        // Target inside the hull of (0,0), (1,0), (0,1): distance 0.
        let vertices = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]];
        let proj = distance_to_hull(&[0.2, 0.2], &vertices);
        assert!(proj.distance <= 1e-7, "distance {}", proj.distance);
        // Target straight above a segment: distance 1.
        let seg = vec![vec![0.0, 0.0], vec![1.0, 0.0]];
        let proj = distance_to_hull(&[0.5, 1.0], &seg);
        assert!((proj.distance - 1.0).abs() <= 1e-9);
        let total: f64 = proj.weights.iter().sum();
        assert!((total - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn residual_invariant_under_vertex_reordering() {
        let target = [0.3, -0.4, 0.25];
        let vertices = vec![
            vec![0.0, 0.1, -0.1],
            vec![0.5, -0.5, 0.0],
            vec![-0.2, 0.0, 0.2],
            vec![0.1, -0.3, 0.2],
        ];
        let a = distance_to_hull(&target, &vertices);
        let mut reordered = vertices.clone();
        reordered.reverse();
        let b = distance_to_hull(&target, &reordered);
        // Set semantics up to the duality-gap tolerance of the solver.
        assert!(
            (a.distance - b.distance).abs() <= 1e-9,
            "{} vs {}",
            a.distance,
            b.distance
        );
        assert!(a.duality_gap <= 1e-10);
        assert!(b.duality_gap <= 1e-10);
    }

    fn constant_zero_field(model: &GameModel, nt: usize, mesh: usize) -> MasterField {
        let grid = SimplexGrid::new(model.num_states(), mesh).unwrap();
        let ns = grid.len();
        let d = model.num_states();
        MasterField {
            time_nodes: (0..nt).map(|i| i as f64 / (nt - 1) as f64).collect(),
            grid,
            values: vec![0.0; nt * ns * d],
            excluded: vec![false; nt * ns],
        }
    }

    #[test]
    fn trivial_field_has_zero_residual() {
        let model = trivial_model();
        let field = constant_zero_field(&model, 5, 4);
        for ti in 1..4 {
            for ni in 0..field.grid.len() {
                let r = master_residual(&model, &field, ti, ni).unwrap();
                assert_eq!(r, 0.0);
            }
        }
    }

    #[test]
    fn field_roundtrips_through_json() {
        let model = trivial_model();
        let field = constant_zero_field(&model, 4, 4);
        let text = serde_json::to_string(&field.to_json()).unwrap();
        let loaded = MasterField::from_json(&text).unwrap();
        assert_eq!(loaded.values, field.values);
        assert_eq!(loaded.time_nodes, field.time_nodes);
        assert_eq!(loaded.grid.len(), field.grid.len());
    }

    #[test]
    fn build_field_on_trivial_model_is_all_zero() {
        let model = trivial_model();
        let opts = FieldBuildOptions {
            nt: 3,
            mesh: 4,
            starts: 2,
            steps: 40,
            max_iters: 20,
            ..Default::default()
        };
        let field = build_field_from_solver(&model, &opts).unwrap();
        assert_eq!(field.num_excluded(), 0);
        assert!(field.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn construct_on_trivial_model_certifies() {
        let model = trivial_model();
        let field = constant_zero_field(&model, 5, 4);
        let m0 = SimplexVector::new(vec![0.5, 0.5]).unwrap();
        let out = construct_from_field(
            &model,
            &field,
            0.0,
            &m0,
            &ConstructOptions {
                steps: 100,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(out.report.converged);
        assert_eq!(out.report.certificate.j, 0.0);
        assert!(out.phi_deviation <= 1e-12);
        // Terminal interpolation consistency against the Lipschitz bound.
        let lip = model.sigma_lipschitz_bound();
        let sigma = model.eval_sigma(out.report.bundle.m.last().unwrap().as_slice());
        for c in 0..2 {
            assert!(
                (out.phi_terminal_interpolated[c] - sigma[c]).abs()
                    <= 2.0 * field.grid.mesh() * lip + 1e-12
            );
        }
    }

    /// Strictly-dominant-control model: smooth value field, unique
    /// equilibria at every node.
    fn dominant_model() -> GameModel {
        load_model_str(
            r#"{
          "d": 2, "T": 0.3, "controls": ["act", "idle"],
          "Q": {
            "act": [[{"c": -1.0}, {"c": 1.0}], [{"c": 1.0}, {"c": -1.0}]],
            "idle": [[{"c": -0.9}, {"c": 0.9}], [{"c": 0.9}, {"c": -0.9}]]
          },
          "g": {
            "act": [{"c": 0.2, "lin": [-1.0, 0.0]}, {"c": 0.2, "lin": [0.0, -1.0]}],
            "idle": [{"lin": [-1.0, 0.0]}, {"lin": [0.0, -1.0]}]
          },
          "sigma": [{"lin": [-1.0, 0.0]}, {"lin": [0.0, -1.0]}]
        }"#,
        )
        .unwrap()
    }

    #[test]
    fn short_horizon_field_is_fully_single_valued() {
        let model = dominant_model();
        let opts = FieldBuildOptions {
            nt: 3,
            mesh: 4,
            starts: 3,
            steps: 100,
            max_iters: 200,
            ..Default::default()
        };
        let field = build_field_from_solver(&model, &opts).unwrap();
        assert_eq!(field.num_excluded(), 0);
        // Terminal column is the terminal reward exactly.
        for ni in 0..field.grid.len() {
            let m = field.grid.node_point(ni);
            assert_eq!(field.value(2, ni), model.eval_sigma(&m).as_slice());
        }
    }

    #[test]
    fn coordination_game_flags_multivalued_nodes() {
        // The symmetric node of the coordination game supports mirrored
        // equilibria with values well apart; multi-start finds both and the
        // node is excluded rather than averaged.
        let model = builtin_model("two-state-switch").unwrap();
        let opts = FieldBuildOptions {
            nt: 3,
            mesh: 4,
            starts: 6,
            steps: 300,
            max_iters: 300,
            tolerances: Tolerances {
                tol_residual: 1e-5,
                ..Default::default()
            },
            ..Default::default()
        };
        let field = build_field_from_solver(&model, &opts).unwrap();
        assert!(
            field.num_excluded() >= 1,
            "expected at least one multivalued node"
        );
        // The symmetric node at t = 0 is among them.
        let ni = field
            .grid
            .index_of(&[2, 2])
            .expect("mesh 4 contains the symmetric node");
        assert!(field.is_excluded(0, ni));
    }

    #[test]
    fn perturbing_a_value_raises_neighbor_residuals() {
        let model = dominant_model();
        let opts = FieldBuildOptions {
            nt: 5,
            mesh: 4,
            starts: 2,
            steps: 150,
            max_iters: 300,
            ..Default::default()
        };
        let mut field = build_field_from_solver(&model, &opts).unwrap();
        let h = field.grid.mesh();
        // Perturb the value at the symmetric node; check the residual at
        // its lattice neighbor (0.75, 0.25), whose centered measure stencil
        // uses the perturbed node.
        let ni = field.grid.index_of(&[3, 1]).unwrap();
        let nj = field.grid.index_of(&[2, 2]).unwrap();
        let ti = 2;
        let before = master_residual(&model, &field, ti, ni).unwrap();
        let ns = field.grid.len();
        let d = field.d();
        field.values[(ti * ns + nj) * d] += 1.0;
        let after = master_residual(&model, &field, ti, ni).unwrap();
        assert!(
            after - before >= 0.1 / h,
            "residual moved {before:.3e} -> {after:.3e}, expected at least {}",
            0.1 / h
        );
    }

    #[test]
    fn construct_errors_on_flagged_node() {
        let model = trivial_model();
        let mut field = constant_zero_field(&model, 5, 4);
        // Flag the node the trajectory starts on.
        let ni = nearest_node(&field, &[0.5, 0.5]);
        let ns = field.grid.len();
        for ti in 0..5 {
            field.excluded[ti * ns + ni] = true;
        }
        let m0 = SimplexVector::new(vec![0.5, 0.5]).unwrap();
        let err = construct_from_field(&model, &field, 0.0, &m0, &ConstructOptions::default())
            .unwrap_err();
        assert!(matches!(
            err,
            Error::MultivaluedNode(_) | Error::SelectorResidual { .. }
        ));
    }

    #[test]
    fn vertex_cap_is_enforced() {
        // 13 tied controls in each of 4 states: 13^4 > 4096.
        let mut controls = Vec::new();
        let mut q_entries = String::new();
        let mut g_entries = String::new();
        for u in 0..13 {
            controls.push(format!("\"u{u}\""));
            let zero_row = "[{\"c\": 0.0}, {\"c\": 0.0}, {\"c\": 0.0}, {\"c\": 0.0}]";
            q_entries.push_str(&format!(
                "\"u{u}\": [{zero_row}, {zero_row}, {zero_row}, {zero_row}],"
            ));
            g_entries.push_str(&format!(
                "\"u{u}\": [{{\"c\": 0.0}}, {{\"c\": 0.0}}, {{\"c\": 0.0}}, {{\"c\": 0.0}}],"
            ));
        }
        q_entries.pop();
        g_entries.pop();
        let text = format!(
            r#"{{
              "d": 4, "T": 1.0, "controls": [{}],
              "Q": {{{}}}, "g": {{{}}},
              "sigma": [{{"c": 0.0}}, {{"c": 0.0}}, {{"c": 0.0}}, {{"c": 0.0}}]
            }}"#,
            controls.join(", "),
            q_entries,
            g_entries
        );
        let model = load_model_str(&text).unwrap();
        let err = optimality_polytope(&model, &[0.25, 0.25, 0.25, 0.25], &[0.0; 4]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("cap"), "{msg}");
        assert!(msg.contains("13"), "should list argmax sizes: {msg}");
    }
}
