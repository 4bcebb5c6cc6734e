use riskreach::planner::*;
use riskreach::scenario::*;
use riskreach::vehicle::*;

fn main() {
    let lib = left_turn_library();
    let params = VehicleParams::default();
    for seed in [1u64, 2, 3, 4, 5, 6, 7, 8] {
        let scenario = generate_left_turn(seed, &LeftTurnConfig::default());
        let mut line = format!("seed {seed} (dyn {}):", scenario.obstacles.iter().filter(|o| !o.is_static).count());
        for eps in [0.5, 0.2, 0.1, 0.05, 0.01] {
            let env = scenario.trial(seed ^ 0xABC);
            let cfg = EpisodeConfig {
                epsilon: eps,
                wait_at_start: true,
                families: vec![FamilyKind::LeftTurn],
                max_time: 45.0,
                ..EpisodeConfig::default()
            };
            let log = run_receding_horizon(&scenario.ego, &env, lib, &params, &cfg).unwrap();
            let tag = match log.end {
                EpisodeEnd::Success => format!("{:.1}", log.time_to_goal.unwrap()),
                EpisodeEnd::Crash => "CRASH".into(),
                EpisodeEnd::SafeStop => "STOP".into(),
                EpisodeEnd::Other => "OTHER".into(),
            };
            line += &format!(" e{eps}={tag}");
        }
        println!("{line}");
    }
}
