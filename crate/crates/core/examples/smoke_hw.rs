use riskreach::planner::*;
use riskreach::scenario::*;
use riskreach::vehicle::*;

fn main() {
    let t0 = std::time::Instant::now();
    let lib = highway_library();
    println!("highway library: {} tubes in {:.1}s", lib.tubes.len(), t0.elapsed().as_secs_f64());
    let params = VehicleParams::default();
    for seed in [1u64, 2, 3, 4, 5] {
        let scenario = generate_highway(seed, &HighwayConfig::default());
        let mut line = format!(
            "seed {seed} ({} obs):",
            scenario.obstacles.len()
        );
        for det in [false, true] {
            let env = scenario.trial(seed ^ 0xF00D);
            let cfg = EpisodeConfig {
                epsilon: 0.05,
                deterministic: det,
                families: vec![FamilyKind::LaneChange, FamilyKind::SpeedChange],
                max_time: 55.0,
                ..EpisodeConfig::default()
            };
            let t1 = std::time::Instant::now();
            let log = run_receding_horizon(&scenario.ego, &env, lib, &params, &cfg).unwrap();
            let tag = match log.end {
                EpisodeEnd::Success => format!("OK@{:.0}", log.time_to_goal.unwrap()),
                EpisodeEnd::Crash => "CRASH".into(),
                EpisodeEnd::SafeStop => format!("STOP@{:.0}m", log.distance_traveled),
                EpisodeEnd::Other => format!("OTHER@{:.0}m", log.distance_traveled),
            };
            line += &format!(
                " {}={tag} ({} solves, {:.1}s)",
                if det { "det" } else { "sto" },
                log.iterations.len(),
                t1.elapsed().as_secs_f64()
            );
        }
        println!("{line}");
    }
}
