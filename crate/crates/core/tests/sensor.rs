use proptest::prelude::*;

use sigctl_core::microsim::{DemandProfile, MicrosimConfig, SimStreams, TrueState};
use sigctl_core::model::{Intersection, MovementId, PhaseId, PhaseState};
use sigctl_core::rng::{stream, Stream};
use sigctl_core::sensor::{
    detection_probability, observe, step_occlusion, OcclusionMode, OcclusionParams, OcclusionState, ScenarioClass,
    SensorConfig,
};

/// Runs a fixed-cycle plant and yields (true state, occlusion) per step.
fn fixed_cycle_states(class: ScenarioClass, rate: f64, steps: usize, seed: u64) -> Vec<(TrueState, OcclusionState)> {
    let ix = Intersection::standard_cross();
    let demand = DemandProfile::uniform(8, rate);
    let cfg = MicrosimConfig::default();
    let mut x = TrueState::new(&ix, &demand, &cfg);
    let mut s = SimStreams {
        arrivals: stream(seed, Stream::Arrivals),
        speeds: stream(seed, Stream::Speeds),
    };
    let mut occ_rng = stream(seed, Stream::Occlusion);
    let mut occ = OcclusionState::clear();
    let mut out = Vec::with_capacity(steps);
    for k in 0..steps {
        let ps = PhaseState::green(PhaseId((k / 20) % 4));
        occ = step_occlusion(&occ, class, x.total_queue(), None, 1.0, &mut occ_rng);
        out.push((x.clone(), occ));
        x.step(&ps, &ix, &demand, &cfg, 1.0, &mut s);
    }
    out
}

#[test]
fn sustained_episode_counts_down_without_mode_change() {
    let occ = OcclusionState {
        mode: OcclusionMode::Sustained,
        episode_remaining: 10.0,
        severity: 0.1,
    };
    let mut rng = stream(1, Stream::Occlusion);
    let next = step_occlusion(&occ, ScenarioClass::S3, 4, None, 1.0, &mut rng);
    assert_eq!(next.mode, OcclusionMode::Sustained);
    assert!((next.episode_remaining - 9.0).abs() < 1e-12);
}

#[test]
fn count_error_stays_in_envelope() {
    // Envelope delta_s = 4 vehicles, tolerated exceedance eta = 0.1.
    let cfg = SensorConfig {
        occlusion: OcclusionParams::for_class(ScenarioClass::S2),
        ..SensorConfig::default()
    };
    let mut rng = stream(5, Stream::Sensor);
    let states = fixed_cycle_states(ScenarioClass::S2, 3.0, 10_000, 5);
    let mut outside = 0usize;
    for (x, occ) in &states {
        let z = observe(x, occ, &cfg, &mut rng);
        let worst = (0..8)
            .map(|m| x.queues[m] as usize + x.tracked_on(MovementId(m)) - z.detected_count[m] as usize)
            .max()
            .unwrap();
        outside += usize::from(worst > 4);
    }
    let frac = outside as f64 / states.len() as f64;
    assert!(frac <= 0.1, "outside fraction {frac}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn detection_probability_is_clamped_and_monotone(
        count in 0usize..400,
        extra in 0usize..50,
        sev in 0.0f64..1.0,
        bump in 0.0f64..0.5,
    ) {
        let cfg = SensorConfig::default();
        let occ = |s: f64| OcclusionState {
            mode: if s > 0.0 { OcclusionMode::Intermittent } else { OcclusionMode::Clear },
            episode_remaining: 1.0,
            severity: s,
        };
        let p = detection_probability(count, &occ(sev), &cfg);
        prop_assert!((cfg.p_floor..=1.0).contains(&p));
        prop_assert!(detection_probability(count + extra, &occ(sev), &cfg) <= p);
        prop_assert!(detection_probability(count, &occ((sev + bump).min(1.0)), &cfg) <= p);
    }

    #[test]
    fn observations_never_exceed_truth(seed in any::<u64>(), class_idx in 0usize..4) {
        let class = [ScenarioClass::S1, ScenarioClass::S2, ScenarioClass::S3, ScenarioClass::S4][class_idx];
        let cfg = SensorConfig { occlusion: OcclusionParams::for_class(class), ..SensorConfig::default() };
        let mut rng = stream(seed, Stream::Sensor);
        for (x, occ) in fixed_cycle_states(class, 4.0, 120, seed) {
            prop_assert_eq!(occ.severity == 0.0, occ.mode == OcclusionMode::Clear);
            let z = observe(&x, &occ, &cfg, &mut rng);
            prop_assert!((0.0..=1.0).contains(&z.p_det));
            prop_assert!((z.occlusion_proxy() - (1.0 - z.p_det)).abs() < 1e-15);
            for m in 0..8 {
                let truth = x.queues[m] + x.tracked_on(MovementId(m)) as u32;
                prop_assert!(z.detected_count[m] <= truth);
                prop_assert!(z.stopped_count[m] <= z.detected_count[m]);
            }
            for t in &z.detected_tracks {
                prop_assert!(t.speed >= 0.0 && t.distance >= 0.0);
                prop_assert!(t.sigma_v > 0.0 && t.sigma_d > 0.0);
                prop_assert!((0.0..=1.0).contains(&t.confidence));
            }
        }
    }
}
