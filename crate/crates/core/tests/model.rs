use proptest::prelude::*;

use sigctl_core::model::{
    admissible_actions, apply_action, validate_config, Approach, ConfigViolation, Interval, Intersection, Movement,
    MovementId, Phase, PhaseId, PhaseState, SignalAction, TimingConfig, Turn,
};

fn timing() -> TimingConfig {
    Intersection::standard_cross().timing
}

fn through_only_cross() -> (Vec<Movement>, Vec<Phase>, Vec<(MovementId, MovementId)>) {
    let movements = [Approach::North, Approach::East, Approach::South, Approach::West]
        .into_iter()
        .enumerate()
        .map(|(i, approach)| Movement {
            id: MovementId(i),
            approach,
            turn: Turn::Through,
        })
        .collect();
    let phases = vec![
        Phase {
            id: PhaseId(0),
            movements: vec![MovementId(0), MovementId(2)],
        },
        Phase {
            id: PhaseId(1),
            movements: vec![MovementId(1), MovementId(3)],
        },
    ];
    let conflicts = [(0, 1), (0, 3), (2, 1), (2, 3)]
        .into_iter()
        .map(|(a, b)| (MovementId(a), MovementId(b)))
        .collect();
    (movements, phases, conflicts)
}

#[test]
fn mid_green_two_phase_rule_table() {
    let ps = PhaseState {
        elapsed: 10.0,
        ..PhaseState::green(PhaseId(0))
    };
    let adm = admissible_actions(&ps, &timing(), 2).unwrap();
    assert_eq!(adm, vec![SignalAction::Extend, SignalAction::TerminateTo(PhaseId(1))]);
}

#[test]
fn max_green_three_phases() {
    let ps = PhaseState {
        elapsed: 60.0,
        ..PhaseState::green(PhaseId(0))
    };
    let adm = admissible_actions(&ps, &timing(), 3).unwrap();
    assert_eq!(
        adm,
        vec![SignalAction::TerminateTo(PhaseId(1)), SignalAction::TerminateTo(PhaseId(2))]
    );
}

#[test]
fn last_yellow_step_rolls_to_all_red() {
    let t = timing();
    let ps = PhaseState {
        active: PhaseId(0),
        interval: Interval::Yellow,
        elapsed: t.yellow - t.step,
        next: Some(PhaseId(1)),
    };
    let next = apply_action(&ps, SignalAction::Extend, &t, 4).unwrap();
    assert_eq!(next.interval, Interval::AllRed);
    assert_eq!(next.elapsed, 0.0);
    assert_eq!(next.next, Some(PhaseId(1)));
}

#[test]
fn through_only_two_phase_cross_is_valid() {
    let (m, p, c) = through_only_cross();
    assert!(validate_config(&m, &p, &c, &timing()).is_empty());
}

#[test]
fn all_violations_are_reported_together() {
    let (m, mut p, c) = through_only_cross();
    p[0].movements.push(MovementId(1));
    let bad = TimingConfig {
        g_min: 70.0,
        ..timing()
    };
    let v = validate_config(&m, &p, &c, &bad);
    assert!(v.iter().any(|e| matches!(e, ConfigViolation::ConflictWithinPhase { .. })));
    assert!(v.iter().any(|e| matches!(e, ConfigViolation::Timing(_))));
}

#[test]
fn shipped_intersection_file_matches_builtin() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/cross_4phase.json");
    let ix = Intersection::load(std::path::Path::new(path)).unwrap();
    assert_eq!(ix, Intersection::standard_cross());
}

fn any_intersection() -> impl Strategy<Value = Intersection> {
    prop_oneof![
        Just(Intersection::standard_cross()),
        Just(Intersection::standard_cross_two_phase())
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Random legal walks stay live, never show conflicting greens, keep every
    /// intergreen at its exact length and never revoke a termination.
    #[test]
    fn random_walks_respect_the_interval_machine(
        ix in any_intersection(),
        choices in prop::collection::vec(0usize..16, 1..400),
    ) {
        let t = ix.timing;
        let mut ps = PhaseState::green(PhaseId(0));
        let mut yellow_run = 0usize;
        let mut red_run = 0usize;
        let mut committed: Option<PhaseId> = None;
        for c in choices {
            let adm = ix.admissible_actions(&ps).unwrap();
            prop_assert!(!adm.is_empty());
            if ps.is_green() {
                prop_assert!(ps.elapsed <= t.g_max + 1e-9);
                let g = &ix.phase(ps.active).movements;
                for (i, &a) in g.iter().enumerate() {
                    for &b in &g[i + 1..] {
                        prop_assert!(!ix.conflicting(a, b));
                    }
                }
            }
            let u = adm[c % adm.len()];
            let next = ix.apply_action(&ps, u).unwrap();
            match ps.interval {
                Interval::Yellow => yellow_run += 1,
                Interval::AllRed => red_run += 1,
                Interval::Green => {}
            }
            if next.is_yellow_onset() {
                committed = next.next;
            }
            if next.is_green_onset() && !ps.is_green() {
                prop_assert_eq!(yellow_run as f64 * t.step, t.yellow);
                prop_assert_eq!(red_run as f64 * t.step, t.all_red);
                prop_assert_eq!(Some(next.active), committed);
                yellow_run = 0;
                red_run = 0;
            }
            prop_assert_eq!(next.next.is_some(), next.interval != Interval::Green);
            ps = next;
        }
    }

    #[test]
    fn inadmissible_actions_never_apply(elapsed in 0u32..=60, target in 0usize..6) {
        let ix = Intersection::standard_cross();
        let ps = PhaseState { elapsed: f64::from(elapsed), ..PhaseState::green(PhaseId(0)) };
        let u = SignalAction::TerminateTo(PhaseId(target));
        let legal = ix.admissible_actions(&ps).unwrap().contains(&u);
        prop_assert_eq!(ix.apply_action(&ps, u).is_ok(), legal);
        prop_assert_eq!(legal, target != 0 && target < 4 && elapsed >= 5);
    }
}
