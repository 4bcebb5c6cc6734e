use riskreach::scenario::*;

fn main() {
    let t0 = std::time::Instant::now();
    let report = run_tightness_benchmark(60, &PdfKind::ALL, 24, 100_000, 99);
    for s in &report.summaries {
        println!(
            "{}: mean {:.4} max {:.4} | cantelli mean {:.4} max {:.4} | cons viol {} cant viol {} negative-cases {}",
            s.kind, s.mean_error, s.max_error, s.cantelli_mean_error, s.cantelli_max_error,
            s.conservatism_violations, s.cantelli_violations, s.negative_term_cases
        );
    }
    println!("tightness wall: {:.1}s", t0.elapsed().as_secs_f64());
}
