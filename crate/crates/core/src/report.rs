//! CSV tables, JSON-lines episode logs and SVG snapshots.
//!
//! Result files contain no wall-clock values so byte-identical outputs are
//! reproducible for a fixed (config, seed); timings go to separate
//! `*_timing.csv` files.

use crate::pdf::{ObstacleField, PdfModel};
use crate::planner::EpisodeLog;
use crate::reach::WorldTube;
use crate::risk::RiskEvaluator;
use crate::scenario::{HighwayReport, SweepReport, TightnessReport};
use nalgebra::{DVector, Vector2};
use std::fmt::Write as _;
use std::path::Path;

/// Benchmark rows: one line per case, no timing columns.
pub fn tightness_csv(report: &TightnessReport) -> String {
    let mut out = String::from(
        "case_id,kind,closed_form,lower_variant,mc_value,mc_std_error,cantelli,negative_terms\n",
    );
    for r in &report.rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.case_id,
            r.kind,
            r.closed_form,
            r.lower_variant,
            r.mc_value,
            r.mc_std_error,
            r.cantelli,
            r.negative_terms
        )
        .expect("write to string");
    }
    out
}

/// Machine-dependent wall times for the benchmark rows.
pub fn tightness_timing_csv(report: &TightnessReport) -> String {
    let mut out = String::from("case_id,kind,closed_wall,mc_wall,cantelli_wall\n");
    for r in &report.rows {
        writeln!(out, "{},{},{},{},{}", r.case_id, r.kind, r.closed_wall, r.mc_wall, r.cantelli_wall)
            .expect("write to string");
    }
    out
}

pub fn tightness_summary_csv(report: &TightnessReport) -> String {
    let mut out = String::from(
        "kind,cases,mean_error,max_error,cantelli_mean_error,cantelli_max_error,conservatism_violations,cantelli_violations,negative_term_cases\n",
    );
    for s in &report.summaries {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            s.kind,
            s.cases,
            s.mean_error,
            s.max_error,
            s.cantelli_mean_error,
            s.cantelli_max_error,
            s.conservatism_violations,
            s.cantelli_violations,
            s.negative_term_cases
        )
        .expect("write to string");
    }
    out
}

pub fn sweep_csv(report: &SweepReport) -> String {
    let mut out = String::from(
        "epsilon,trials,success,crash,safe_stop,other,never_started,success_pct,crash_pct,avg_time_to_goal,max_time_to_goal,audit_violations,max_certified_risk\n",
    );
    for r in &report.rows {
        let n = r.outcomes.total().max(1) as f64;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.epsilon,
            r.outcomes.total(),
            r.outcomes.success,
            r.outcomes.crash,
            r.outcomes.safe_stop,
            r.outcomes.other,
            r.outcomes.never_started,
            100.0 * r.outcomes.success as f64 / n,
            100.0 * r.outcomes.crash as f64 / n,
            r.avg_time_to_goal,
            r.max_time_to_goal,
            r.audit_violations,
            r.max_certified_risk
        )
        .expect("write to string");
    }
    out
}

pub fn sweep_timing_csv(report: &SweepReport) -> String {
    let mut out = String::from("epsilon,solve_wall_mean,solve_wall_max\n");
    for r in &report.rows {
        writeln!(out, "{},{},{}", r.epsilon, r.solve_wall_mean, r.solve_wall_max)
            .expect("write to string");
    }
    out
}

pub fn highway_csv(report: &HighwayReport) -> String {
    let mut out = String::from(
        "mode,epsilon,trials,success,crash,safe_stop,other,never_started,success_pct,crash_pct,audit_violations\n",
    );
    for r in &report.rows {
        let n = r.outcomes.total().max(1) as f64;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.mode,
            r.epsilon,
            r.outcomes.total(),
            r.outcomes.success,
            r.outcomes.crash,
            r.outcomes.safe_stop,
            r.outcomes.other,
            r.outcomes.never_started,
            100.0 * r.outcomes.success as f64 / n,
            100.0 * r.outcomes.crash as f64 / n,
            r.audit_violations
        )
        .expect("write to string");
    }
    out
}

pub fn highway_timing_csv(report: &HighwayReport) -> String {
    let mut out = String::from("mode,solve_wall_mean,solve_wall_max\n");
    for r in &report.rows {
        writeln!(out, "{},{},{}", r.mode, r.solve_wall_mean, r.solve_wall_max)
            .expect("write to string");
    }
    out
}

/// JSON-lines episode log (one iteration record per line, then the outcome).
pub fn episode_jsonl(log: &EpisodeLog) -> String {
    let mut out = String::new();
    for it in &log.iterations {
        writeln!(out, "{}", serde_json::to_string(it).expect("serializable")).expect("write");
    }
    let tail = serde_json::json!({
        "end": log.end,
        "time_to_goal": log.time_to_goal,
        "distance_traveled": log.distance_traveled,
        "max_certified_risk": log.max_certified_risk,
        "executed_plans": log.executed_plans,
    });
    writeln!(out, "{tail}").expect("write");
    out
}

fn svg_polygon(points: &[Vector2<f64>], style: &str, to_px: impl Fn(Vector2<f64>) -> (f64, f64)) -> String {
    let coords: Vec<String> = points
        .iter()
        .map(|p| {
            let (x, y) = to_px(*p);
            format!("{x:.1},{y:.1}")
        })
        .collect();
    format!("<polygon points=\"{}\" style=\"{}\"/>\n", coords.join(" "), style)
}

/// Static snapshot of one planning scene: reach sets with their triangle
/// covers and the per-interval 3-sigma density ellipses.
pub fn scene_svg(tube: &WorldTube, field: &ObstacleField, p: &DVector<f64>, grid_k: usize) -> String {
    let evaluator = RiskEvaluator::new(tube, field, grid_k).expect("well-formed scene");
    // World bounds over reach sets and density means.
    let mut lo = Vector2::new(f64::INFINITY, f64::INFINITY);
    let mut hi = Vector2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
    for j in 0..tube.n_intervals() {
        let (a, b) = tube.zonotope_at(j, p).bounding_box();
        lo = lo.inf(&a);
        hi = hi.sup(&b);
    }
    for i in 0..field.n_obstacles() {
        for j in 0..field.n_intervals() {
            let m = field.pdf(i, j).mean();
            lo = lo.inf(&(m - Vector2::repeat(6.0)));
            hi = hi.sup(&(m + Vector2::repeat(6.0)));
        }
    }
    let margin = 4.0;
    lo -= Vector2::repeat(margin);
    hi += Vector2::repeat(margin);
    let scale = 900.0 / (hi.x - lo.x).max(1.0);
    let height = ((hi.y - lo.y) * scale).ceil();
    let to_px = |w: Vector2<f64>| ((w.x - lo.x) * scale, height - (w.y - lo.y) * scale);

    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"900\" height=\"{height:.0}\" viewBox=\"0 0 900 {height:.0}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n",
    );
    // Covers (retained triangles), then the reach sets at p.
    for cover in &evaluator.covers {
        for t in &cover.triangles {
            out += &svg_polygon(
                &t.vertices(),
                "fill:none;stroke:#bbbbbb;stroke-width:0.4",
                to_px,
            );
        }
    }
    for j in 0..tube.n_intervals() {
        let z = tube.zonotope_at(j, p);
        out += &svg_polygon(
            &z.vertices(),
            "fill:#2e8b5733;stroke:#2e8b57;stroke-width:1.0",
            to_px,
        );
    }
    // 3-sigma ellipses of each (obstacle, interval) density.
    for i in 0..field.n_obstacles() {
        for j in 0..field.n_intervals() {
            out += &pdf_ellipse_svg(field.pdf(i, j), to_px);
        }
    }
    out += "</svg>\n";
    out
}

fn pdf_ellipse_svg(model: &PdfModel, to_px: impl Fn(Vector2<f64>) -> (f64, f64)) -> String {
    let mean = model.mean();
    let cov = model.cov();
    let eig = nalgebra::SymmetricEigen::new(cov);
    let (r1, r2) = (
        3.0 * eig.eigenvalues[0].max(0.0).sqrt(),
        3.0 * eig.eigenvalues[1].max(0.0).sqrt(),
    );
    let v: Vector2<f64> = eig.eigenvectors.column(0).into();
    // Approximate the ellipse with a polygon; keeps the writer dependency-free.
    let mut pts = Vec::with_capacity(24);
    for k in 0..24 {
        let ang = k as f64 * std::f64::consts::TAU / 24.0;
        let local = Vector2::new(r1 * ang.cos(), r2 * ang.sin());
        let rot = nalgebra::Matrix2::new(v.x, -v.y, v.y, v.x);
        pts.push(mean + rot * local);
    }
    svg_polygon(&pts, "fill:#6a5acd22;stroke:#6a5acd;stroke-width:0.8", to_px)
}

pub fn write_text(path: &Path, text: &str) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, text)
}
