//! Artifact serialization: JSON documents with fixed-width floats and the
//! CSV formats for profiles, trajectories, value clouds, and residual
//! sweeps.
//!
//! Every float is written with 17 significant digits so artifacts
//! round-trip doubles bit-exactly and byte-compare across runs. The only
//! nondeterministic field an artifact carries is a `timestamp` entry in its
//! metadata block.

use std::io;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::ser::{Formatter, PrettyFormatter, Serializer};
use serde_json::Value;

use crate::attainability::{PointSource, ValueCloud};
use crate::dynamics::TrajectoryBundle;
use crate::master::ResidualRow;
use crate::model::GameModel;
use crate::relaxed::RelaxedStrategyProfile;
use crate::solver::SolveReport;
use crate::{Error, Result};

/// 17 significant digits: exact round trip for IEEE doubles.
pub fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

struct SigDigits<'a> {
    inner: PrettyFormatter<'a>,
}

impl Formatter for SigDigits<'_> {
    fn write_f64<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{value:.16e}")
    }

    fn begin_array<W: ?Sized + io::Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.inner.begin_array(writer)
    }

    fn end_array<W: ?Sized + io::Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.inner.end_array(writer)
    }

    fn begin_array_value<W: ?Sized + io::Write>(
        &mut self,
        writer: &mut W,
        first: bool,
    ) -> io::Result<()> {
        self.inner.begin_array_value(writer, first)
    }

    fn end_array_value<W: ?Sized + io::Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.inner.end_array_value(writer)
    }

    fn begin_object<W: ?Sized + io::Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.inner.begin_object(writer)
    }

    fn end_object<W: ?Sized + io::Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.inner.end_object(writer)
    }

    fn begin_object_key<W: ?Sized + io::Write>(
        &mut self,
        writer: &mut W,
        first: bool,
    ) -> io::Result<()> {
        self.inner.begin_object_key(writer, first)
    }

    fn begin_object_value<W: ?Sized + io::Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.inner.begin_object_value(writer)
    }

    fn end_object_value<W: ?Sized + io::Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.inner.end_object_value(writer)
    }
}

/// Pretty-prints any serializable value with 17-significant-digit floats.
pub fn to_json_string<T: Serialize>(value: &T) -> String {
    let mut out = Vec::new();
    let mut ser = Serializer::with_formatter(
        &mut out,
        SigDigits {
            inner: PrettyFormatter::new(),
        },
    );
    value
        .serialize(&mut ser)
        .expect("in-memory serialization cannot fail");
    let mut text = String::from_utf8(out).expect("serde_json emits UTF-8");
    text.push('\n');
    text
}

/// Metadata block embedded in every artifact: tool, version, resolved
/// configuration, and the one nondeterministic field, a timestamp.
pub fn metadata(config: Value) -> Value {
    let timestamp = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    serde_json::json!({
        "tool": "mfg-fsolve",
        "version": env!("CARGO_PKG_VERSION"),
        "timestamp": timestamp,
        "config": config,
    })
}

/// JSON document for one solve report (bundle omitted; trajectories are
/// exported separately as CSV).
pub fn solve_report_doc(report: &SolveReport, t0: f64, m0: &[f64]) -> Value {
    serde_json::json!({
        "scheme": report.scheme,
        "seed": report.seed,
        "converged": report.converged,
        "iterations": report.iterations,
        "t0": t0,
        "m0": m0,
        "steps": report.bundle.num_nodes() - 1,
        "phi0": report.phi0(),
        "j_history": report.j_history,
        "certificate": report.certificate,
    })
}

/// CSV of a relaxed strategy profile: one row per (interval, state,
/// control). States are 0-indexed in files.
pub fn profile_csv(profile: &RelaxedStrategyProfile, labels: &[String]) -> String {
    let mut out = String::from("t_index,state,control_label,weight\n");
    for n in 0..profile.num_intervals() {
        for i in 0..profile.num_states() {
            for (k, label) in labels.iter().enumerate() {
                out.push_str(&format!(
                    "{n},{i},{label},{}\n",
                    fmt_float(profile.weight(n, i, k))
                ));
            }
        }
    }
    out
}

/// Parses a profile CSV back into a profile on a uniform grid over
/// `[t0, T]`; the interval count is inferred from the data.
pub fn parse_profile_csv(text: &str, model: &GameModel, t0: f64) -> Result<RelaxedStrategyProfile> {
    let d = model.num_states();
    let k = model.num_controls();
    let mut rows = Vec::new();
    let mut max_index = 0usize;
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 {
            if line.trim() != "t_index,state,control_label,weight" {
                return Err(Error::Parse(format!(
                    "unexpected profile CSV header: '{line}'"
                )));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::Parse(format!(
                "profile CSV line {} has {} fields, expected 4",
                lineno + 1,
                fields.len()
            )));
        }
        let n: usize = fields[0]
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("bad t_index on line {}", lineno + 1)))?;
        let state: usize = fields[1]
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("bad state on line {}", lineno + 1)))?;
        let control = model.controls().index_of(fields[2].trim()).ok_or_else(|| {
            Error::Parse(format!(
                "unknown control label '{}' on line {}",
                fields[2].trim(),
                lineno + 1
            ))
        })?;
        let weight: f64 = fields[3]
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("bad weight on line {}", lineno + 1)))?;
        if state >= d {
            return Err(Error::Parse(format!(
                "state {state} out of range on line {}",
                lineno + 1
            )));
        }
        max_index = max_index.max(n);
        rows.push((n, state, control, weight));
    }
    if rows.is_empty() {
        return Err(Error::Parse("profile CSV has no data rows".into()));
    }
    let intervals = max_index + 1;
    let mut weights = vec![0.0; intervals * d * k];
    for (n, state, control, weight) in rows {
        weights[(n * d + state) * k + control] = weight;
    }
    let h = (model.horizon() - t0) / intervals as f64;
    let mut grid: Vec<f64> = (0..=intervals).map(|i| t0 + i as f64 * h).collect();
    grid[intervals] = model.horizon();
    RelaxedStrategyProfile::new(grid, d, k, weights)
}

/// Trajectory CSV: one row per grid node.
pub fn trajectory_csv(bundle: &TrajectoryBundle) -> String {
    let d = bundle.m[0].dim();
    let mut header = String::from("t");
    for part in ["m", "phi", "mu"] {
        for i in 1..=d {
            header.push_str(&format!(",{part}_{i}"));
        }
    }
    header.push_str(",z\n");
    let mut out = header;
    for node in 0..bundle.num_nodes() {
        out.push_str(&fmt_float(bundle.time[node]));
        for i in 0..d {
            out.push_str(&format!(",{}", fmt_float(bundle.m[node].get(i))));
        }
        for i in 0..d {
            out.push_str(&format!(",{}", fmt_float(bundle.phi[node][i])));
        }
        for i in 0..d {
            out.push_str(&format!(",{}", fmt_float(bundle.mu[node].get(i))));
        }
        out.push_str(&format!(",{}\n", fmt_float(bundle.z[node])));
    }
    out
}

/// Value-cloud CSV: accepted points with their residual breakdown.
pub fn cloud_csv(cloud: &ValueCloud) -> String {
    let d = cloud.m0.len();
    let mut header = String::new();
    for i in 1..=d {
        header.push_str(&format!("phi_{i},"));
    }
    header.push_str("dist_m,dist_mu,z_abs,source\n");
    let mut out = header;
    for p in &cloud.points {
        for v in &p.phi0 {
            out.push_str(&format!("{},", fmt_float(*v)));
        }
        let source = match p.source {
            PointSource::BackwardSample => "backward-sample",
            PointSource::ForwardSolve => "forward-solve",
        };
        out.push_str(&format!(
            "{},{},{},{source}\n",
            fmt_float(p.residuals.dist_m),
            fmt_float(p.residuals.dist_mu),
            fmt_float(p.residuals.z_abs)
        ));
    }
    out
}

/// Sidecar JSON for a value cloud: query, tolerances, acceptance counters,
/// and the nearest misses.
pub fn cloud_sidecar_doc(cloud: &ValueCloud) -> Value {
    serde_json::json!({
        "query": { "t0": cloud.t0, "m0": cloud.m0 },
        "options": cloud.options,
        "samples_run": cloud.samples_run,
        "accepted_before_dedup": cloud.accepted_before_dedup,
        "samples_off_simplex": cloud.samples_off_simplex,
        "max_z_t0": cloud.max_z_t0,
        "points": cloud.points,
        "nearest_misses": cloud.nearest_misses,
    })
}

/// Residual-report CSV: `t_index, node_index, residual, flagged`.
pub fn residual_csv(rows: &[ResidualRow]) -> String {
    let mut out = String::from("t_index,node_index,residual,flagged\n");
    for row in rows {
        let value = match row.residual {
            Some(r) => fmt_float(r),
            None => "nan".to_string(),
        };
        out.push_str(&format!(
            "{},{},{value},{}\n",
            row.t_index, row.node_index, row.flagged
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::builtin_model;

    #[test]
    fn floats_render_with_17_significant_digits() {
        assert_eq!(fmt_float(1.0), "1.0000000000000000e0");
        assert_eq!(fmt_float(0.1), "1.0000000000000001e-1");
        let x = 0.567_668_123_456_789_4_f64;
        let parsed: f64 = fmt_float(x).parse().unwrap();
        assert_eq!(parsed.to_bits(), x.to_bits());
    }

    #[test]
    fn json_floats_round_trip() {
        let doc = serde_json::json!({ "a": 0.1, "b": [1.0 / 3.0, 2.0] });
        let text = to_json_string(&doc);
        assert!(text.contains("3.3333333333333331e-1"), "{text}");
        let back: Value = serde_json::from_str(&text).unwrap();
        assert_eq!(back["b"][0].as_f64().unwrap(), 1.0 / 3.0);
    }

    #[test]
    fn profile_csv_round_trips() {
        let model = builtin_model("two-state-switch").unwrap();
        let profile = RelaxedStrategyProfile::from_slices(&model, 0.0, 1.0, 8, |n| {
            let w = n as f64 / 16.0;
            vec![1.0 - w, w, 0.25, 0.75]
        });
        let text = profile_csv(&profile, model.controls().labels());
        let parsed = parse_profile_csv(&text, &model, 0.0).unwrap();
        assert_eq!(parsed, profile);
    }

    #[test]
    fn profile_csv_rejects_unknown_labels() {
        let model = builtin_model("two-state-switch").unwrap();
        let text = "t_index,state,control_label,weight\n0,0,warp,1.0\n";
        assert!(parse_profile_csv(text, &model, 0.0).is_err());
    }

    #[test]
    fn trajectory_csv_shape() {
        let model = builtin_model("two-state-switch").unwrap();
        let profile = RelaxedStrategyProfile::uniform(&model, 0.0, 1.0, 4);
        let m0 = crate::model::SimplexVector::new(vec![0.5, 0.5]).unwrap();
        let bundle = crate::dynamics::roll_bundle(
            &model,
            &profile,
            0.0,
            &m0,
            &crate::model::SimplexVector::uniform(2),
        )
        .unwrap();
        let text = trajectory_csv(&bundle);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,m_1,m_2,phi_1,phi_2,mu_1,mu_2,z");
        assert_eq!(lines.len(), 1 + 5);
    }
}
