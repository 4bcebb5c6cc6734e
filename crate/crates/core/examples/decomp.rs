use nalgebra::DVector;
use riskreach::risk::{risk_and_grad, RiskEvaluator};
use riskreach::scenario::*;
use riskreach::baselines::mc_risk;
use rand::SeedableRng;
use rand::Rng;

fn main() {
    for kind in [PdfKind::Gaussian, PdfKind::Beta] {
        let mut ring_tot = 0.0;
        let mut quad_tot = 0.0;
        let mut n = 0.0;
        let mut worst = (0.0f64, 0.0f64, 0u64);
        for c in 0..60u64 {
            let tc = random_tightness_case(kind, 5000 + c);
            let report = risk_and_grad(&tc.tube, &tc.field, &tc.p, 24).unwrap();
            let mut region = tc.tube.zonotope_at(0, &tc.p);
            region.generators.extend_from_slice(&tc.field.obstacle_generators);
            let model = tc.field.pdf(0, 0);
            let mc = mc_risk(&region, model, 200_000, c);
            // Mass over the shifted triangle union (cover translated by A p).
            let ev = RiskEvaluator::new(&tc.tube, &tc.field, 24).unwrap();
            let cover = &ev.covers[0];
            let shift = {
                let s = &tc.tube.intervals[0].a * &tc.p;
                nalgebra::Vector2::new(s[0], s[1])
            };
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(c ^ 777);
            let m = 200_000;
            let mut hits = 0usize;
            for _ in 0..m {
                let w = model.sample(&mut rng);
                if cover.contains_point(w - shift, 1e-9) {
                    hits += 1;
                }
            }
            let union_mass = hits as f64 / m as f64;
            let ring = union_mass - mc.value;      // cover ring mass
            let quad = report.total - union_mass;  // integrand relaxation overshoot
            ring_tot += ring;
            quad_tot += quad;
            n += 1.0;
            if quad > worst.1 {
                worst = (ring, quad, c);
            }
            let _ = DVector::<f64>::zeros(1);
        }
        println!(
            "{:?}: mean ring error {:.4}, mean integrand error {:.4}, worst integrand {:.3} (case {})",
            kind, ring_tot / n, quad_tot / n, worst.1, worst.2
        );
    }
}
