use riskreach::scenario::*;

fn main() {
    let t0 = std::time::Instant::now();
    let report = run_tightness_benchmark(500, &PdfKind::ALL, 24, 100_000, 2026);
    for s in &report.summaries {
        println!(
            "{}: n={} mean {:.4} max {:.4} | cant mean {:.4} | viol {} | ratio {:.1}x",
            s.kind, s.cases, s.mean_error, s.max_error, s.cantelli_mean_error,
            s.conservatism_violations, s.cantelli_mean_error / s.mean_error
        );
    }
    println!("wall: {:.1}s", t0.elapsed().as_secs_f64());
}
