//! Run records and their serialized forms: CSV, JSON, SVG.

use crate::error::{Error, Result};
use crate::guidance::EstimatorKind;
use crate::harness::config::ExperimentConfig;
use crate::scheduler::Phase;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::Path;

/// One logged step: one particle at one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterRow {
    pub iter: usize,
    pub particle: usize,
    pub phase: Phase,
    pub s: usize,
    pub t: usize,
    pub estimator: EstimatorKind,
    pub grad_norm: f64,
    /// Distance between the predicted origin and the rendered sample.
    pub x0_drift: f64,
    /// Particle distance to the nearest selected component mean.
    pub mode_dist: f64,
    /// Predicted origin pulled back to the parameter frame.
    pub x0_hat: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub mode_distance: f64,
    pub guidance_variance: Option<f64>,
    /// Mean origin drift over the final 10% of iterations.
    pub consistency_gap: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub rows: Vec<IterRow>,
    pub metrics: FinalMetrics,
    pub failure: Option<String>,
}

impl RunRecord {
    /// Equality of everything deterministic (wall time excluded).
    pub fn same_outcome(&self, other: &RunRecord) -> bool {
        self.config == other.config
            && self.config_hash == other.config_hash
            && self.rows == other.rows
            && self.failure == other.failure
            && self.metrics.mode_distance == other.metrics.mode_distance
            && self.metrics.guidance_variance == other.metrics.guidance_variance
            && self.metrics.consistency_gap == other.metrics.consistency_gap
    }
}

pub fn config_hash(config: &ExperimentConfig) -> Result<String> {
    let json = serde_json::to_string(config).map_err(|e| Error::Serialize(e.to_string()))?;
    let mut hasher = Sha256::new();
    hasher.update(json.as_bytes());
    Ok(format!("{:x}", hasher.finalize()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmitFormat {
    Csv,
    Json,
    Svg,
}

pub fn emit(record: &RunRecord, format: EmitFormat, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let text = match format {
        EmitFormat::Csv => to_csv(record),
        EmitFormat::Json => to_json(record)?,
        EmitFormat::Svg => to_svg(record),
    };
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn fmt_float(v: f64) -> String {
    // 17 significant digits round-trip any f64
    format!("{v:.16e}")
}

/// Column order is frozen: iter, particle, phase, s, t, estimator, grad_norm,
/// x0_drift, mode_dist, then one x0_hat column per dimension.
pub fn to_csv(record: &RunRecord) -> String {
    let dim = record.config.target.dim;
    let mut out = String::new();
    out.push_str("iter,particle,phase,s,t,estimator,grad_norm,x0_drift,mode_dist");
    for d in 0..dim {
        out.push_str(&format!(",x0_hat_{d}"));
    }
    out.push('\n');
    for r in &record.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}",
            r.iter,
            r.particle,
            r.phase,
            r.s,
            r.t,
            r.estimator,
            fmt_float(r.grad_norm),
            fmt_float(r.x0_drift),
            fmt_float(r.mode_dist),
        ));
        for d in 0..dim {
            out.push(',');
            out.push_str(&fmt_float(r.x0_hat.get(d).copied().unwrap_or(f64::NAN)));
        }
        out.push('\n');
    }
    out
}

pub fn to_json(record: &RunRecord) -> Result<String> {
    serde_json::to_string_pretty(record).map_err(|e| Error::Serialize(e.to_string()))
}

pub fn load_record(path: impl AsRef<Path>) -> Result<RunRecord> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Serialize(e.to_string()))
}

/// Per-iteration mean of a row field.
fn per_iter_mean(record: &RunRecord, field: impl Fn(&IterRow) -> f64) -> Vec<(usize, f64)> {
    let mut sums: std::collections::BTreeMap<usize, (f64, usize)> = Default::default();
    for r in &record.rows {
        let e = sums.entry(r.iter).or_insert((0.0, 0));
        e.0 += field(r);
        e.1 += 1;
    }
    sums.into_iter()
        .map(|(iter, (sum, n))| (iter, sum / n as f64))
        .collect()
}

/// Convergence curve plus a rolling guidance-variance curve as a small SVG.
pub fn to_svg(record: &RunRecord) -> String {
    let width = 720.0;
    let height = 380.0;
    let pad = 50.0;
    let mode = per_iter_mean(record, |r| r.mode_dist);
    // rolling trace variance of particle 0's origin predictions
    let window = record.config.run.variance_window.max(2);
    let series0: Vec<&IterRow> = record.rows.iter().filter(|r| r.particle == 0).collect();
    let mut rolling: Vec<(usize, f64)> = Vec::new();
    if series0.len() >= window {
        for end in window..=series0.len() {
            let chunk: Vec<Vec<f64>> = series0[end - window..end]
                .iter()
                .map(|r| r.x0_hat.clone())
                .collect();
            if let Some(v) = crate::stats::sliding_window_trace_variance(&chunk, window) {
                rolling.push((series0[end - 1].iter, v));
            }
        }
    }
    let polyline = |pts: &[(usize, f64)], color: &str| -> String {
        if pts.is_empty() {
            return String::new();
        }
        let x_max = pts.iter().map(|p| p.0).max().unwrap_or(1).max(1) as f64;
        let y_max = pts.iter().map(|p| p.1).fold(0.0f64, f64::max).max(1e-12);
        let coords: Vec<String> = pts
            .iter()
            .map(|(x, y)| {
                let px = pad + (*x as f64 / x_max) * (width - 2.0 * pad);
                let py = height - pad - (y / y_max) * (height - 2.0 * pad);
                format!("{px:.2},{py:.2}")
            })
            .collect();
        format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
            coords.join(" ")
        )
    };
    format!(
        concat!(
            "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n",
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n",
            "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n",
            "<line x1=\"{pad}\" y1=\"{ybase}\" x2=\"{xend}\" y2=\"{ybase}\" stroke=\"black\"/>\n",
            "<line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{ybase}\" stroke=\"black\"/>\n",
            "<text x=\"{xmid}\" y=\"{h2}\" text-anchor=\"middle\" font-size=\"12\">iteration</text>\n",
            "<g id=\"mode_distance\">{p1}</g>\n",
            "<g id=\"guidance_variance\">{p2}</g>\n",
            "<text x=\"{lx}\" y=\"30\" font-size=\"12\" fill=\"#1f77b4\">mode_distance (normalized)</text>\n",
            "<text x=\"{lx}\" y=\"46\" font-size=\"12\" fill=\"#d62728\">guidance_variance (normalized)</text>\n",
            "</svg>\n"
        ),
        w = width,
        h = height,
        pad = pad,
        ybase = height - pad,
        xend = width - pad,
        xmid = width / 2.0,
        h2 = height - 14.0,
        p1 = polyline(&mode, "#1f77b4"),
        p2 = polyline(&rolling, "#d62728"),
        lx = pad + 6.0,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn empty_record() -> RunRecord {
        let config = ExperimentConfig::desk();
        RunRecord {
            config_hash: config_hash(&config).unwrap(),
            config,
            rows: vec![],
            metrics: FinalMetrics {
                mode_distance: 1.0,
                guidance_variance: None,
                consistency_gap: 0.0,
                wall_time_s: 0.0,
            },
            failure: None,
        }
    }

    #[test]
    fn empty_record_gives_header_only_csv() {
        let csv = to_csv(&empty_record());
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 1);
        assert!(lines[0].starts_with("iter,particle,phase,s,t,estimator"));
        assert!(lines[0].ends_with("x0_hat_1"));
    }

    #[test]
    fn json_round_trips() {
        let mut rec = empty_record();
        rec.rows.push(IterRow {
            iter: 0,
            particle: 0,
            phase: Phase::Geometry,
            s: 980,
            t: 1000,
            estimator: EstimatorKind::SdsLcmGc,
            grad_norm: 0.125,
            x0_drift: 2.5e-17,
            mode_dist: 3.0,
            x0_hat: vec![0.1, -0.2],
        });
        let json = to_json(&rec).unwrap();
        let back: RunRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(rec, back);
    }

    #[test]
    fn svg_is_well_formed_with_two_series() {
        let mut rec = empty_record();
        for i in 0..120usize {
            rec.rows.push(IterRow {
                iter: i,
                particle: 0,
                phase: Phase::Appearance,
                s: 100,
                t: 200,
                estimator: EstimatorKind::SdsLcm,
                grad_norm: 1.0,
                x0_drift: 0.1,
                mode_dist: 3.0 / (i + 1) as f64,
                x0_hat: vec![i as f64 * 0.01, 0.0],
            });
        }
        let svg = to_svg(&rec);
        assert!(svg.starts_with("<?xml"));
        assert!(svg.contains("<svg"));
        assert!(svg.ends_with("</svg>\n"));
        assert!(svg.contains("id=\"mode_distance\""));
        assert!(svg.contains("id=\"guidance_variance\""));
        assert_eq!(svg.matches("<polyline").count(), 2);
    }

    #[test]
    fn csv_floats_carry_17_significant_digits() {
        assert_eq!(fmt_float(1.0 / 3.0), "3.3333333333333331e-1");
    }

    #[test]
    fn hash_is_stable_and_config_sensitive() {
        let a = ExperimentConfig::desk();
        let mut b = ExperimentConfig::desk();
        assert_eq!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
        b.run.seed += 1;
        assert_ne!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
    }
}
