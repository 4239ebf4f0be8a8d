use geoshield::bench::random_state;
use geoshield::harness::run_scripted;
use geoshield::scenario::{PilotConfig, QuadScenario, Scenario, Segment};
use geoshield::shield::{mix_commands, regulation_lambda, LambdaForm};
use geoshield::telemetry::TelemetryLog;
use geoshield::{GeofenceShield, QuadCommand};
use nalgebra::Vector3;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn arena() -> QuadScenario {
    match Scenario::builtin("cockpit_arena").unwrap() {
        Scenario::Quad(q) => q,
        Scenario::Pendulum(_) => unreachable!(),
    }
}

fn assert_safe(s: &QuadScenario, log: &TelemetryLog) {
    assert!(log.violation.is_none(), "violation {:?}", log.violation);
    for row in &log.rows {
        let h = s.geofence.h(&row.state.position);
        assert!(h >= 0.0, "h {h} at t {}", row.t);
        assert!((0.0..=1.0).contains(&row.lambda));
        assert_eq!(
            row.lambda == 0.0,
            row.h_i <= 0.0,
            "lambda {} h_I {}",
            row.lambda,
            row.h_i
        );
        assert!(row.u_cmd.within_bounds(s.quad.rate_limit));
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, ..ProptestConfig::default() })]

    #[test]
    fn fuzzed_sticks_never_leave_the_box(seed in any::<u64>(), hold in 0.05f64..0.6, x0 in -15.0f64..15.0, z0 in 3.0f64..25.0) {
        let mut s = arena();
        s.duration = 6.0;
        s.initial.position = [x0, -x0 / 2.0, z0];
        s.pilot = PilotConfig::Scripted {
            segments: vec![Segment::Fuzz { duration: 6.0, hold, seed }],
        };
        let log = run_scripted(&s).unwrap();
        assert_safe(&s, &log);
    }

    #[test]
    fn full_speed_dashes_at_faces_and_corners_are_stopped(
        dir in prop::array::uniform3(-1.0f64..1.0),
        speed in 10.0f64..30.0,
        corner in any::<bool>(),
    ) {
        let mut s = arena();
        s.duration = 5.0;
        s.initial.position = [0.0, 0.0, 15.0];
        let mut d = Vector3::from(dir);
        if corner {
            d = d.map(|c| if c < 0.0 { -1.0 } else { 1.0 });
        }
        let v = d.try_normalize(1e-6).unwrap_or_else(Vector3::x) * speed;
        s.pilot = PilotConfig::Scripted {
            segments: vec![Segment::Velocity {
                duration: 5.0,
                velocity: v.into(),
                gain: 3.0,
                attitude_gain: 12.0,
                ramp: 0.0,
            }],
        };
        let log = run_scripted(&s).unwrap();
        assert_safe(&s, &log);
    }

    #[test]
    fn mix_is_affine_in_lambda(
        lambda in 0.0f64..=1.0,
        a in 0.0f64..=1.0,
        b in 0.0f64..=1.0,
        ra in prop::array::uniform3(-10.0f64..10.0),
        rb in prop::array::uniform3(-10.0f64..10.0),
    ) {
        let u = QuadCommand::new(a, Vector3::from(ra));
        let k = QuadCommand::new(b, Vector3::from(rb));
        let m = mix_commands(&u, &k, lambda);
        prop_assert!((m.throttle - (b + lambda * (a - b))).abs() <= 1e-12);
        for i in 0..3 {
            prop_assert!((m.rates[i] - (rb[i] + lambda * (ra[i] - rb[i]))).abs() <= 1e-12);
        }
    }

    #[test]
    fn lambda_stays_in_unit_interval(h in -1e6f64..1e6, v in 0.0f64..100.0, beta in 1e-3f64..1e3) {
        for form in [LambdaForm::Plain, LambdaForm::Scaled] {
            let l = regulation_lambda(h, v, beta, 1.0, form);
            prop_assert!((0.0..=1.0).contains(&l));
            prop_assert_eq!(l == 0.0, h <= 0.0);
        }
        prop_assert_eq!(regulation_lambda(f64::NEG_INFINITY, v, beta, 1.0, LambdaForm::Scaled), 0.0);
    }
}

#[test]
fn fuzzed_runs_are_reproducible() {
    let mut s = arena();
    s.duration = 3.0;
    s.pilot = PilotConfig::Scripted {
        segments: vec![Segment::Fuzz {
            duration: 3.0,
            hold: 0.1,
            seed: 42,
        }],
    };
    let a = run_scripted(&s).unwrap();
    let b = run_scripted(&s).unwrap();
    assert_eq!(a, b);
}

#[test]
fn filter_output_is_bounded_on_random_states() {
    let s = arena();
    let mut shield = GeofenceShield::new(s.geofence, s.filter, s.quad, s.flow).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let limit = s.quad.rate_limit;
    for _ in 0..300 {
        let x = random_state(&mut rng, &shield, 30.0, 3.0);
        let u = QuadCommand::new(1.0, Vector3::new(limit, -limit, limit));
        let out = shield.filter(&x, &u);
        assert!((0.0..=1.0).contains(&out.lambda));
        assert!(out.u_cmd.within_bounds(limit));
        assert!(out.backup_cmd.within_bounds(limit));
    }
}

#[test]
fn transparent_where_the_barrier_is_large() {
    let mut s = arena();
    s.geofence.half_extents = Vector3::new(80.0, 80.0, 80.0);
    s.geofence.center = Vector3::new(0.0, 0.0, 0.0);
    let mut shield = GeofenceShield::new(s.geofence, s.filter, s.quad, s.flow).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut checked = 0;
    for _ in 0..200 {
        let x = random_state(&mut rng, &shield, 3.0, 0.3);
        let u = QuadCommand::new(0.7, Vector3::new(1.0, -2.0, 0.5));
        let out = shield.filter(&x, &u);
        let p = shield.params();
        if p.beta * out.h_i.max(0.0) / out.v_perp.max(p.v_floor) >= 30.0 {
            checked += 1;
            assert!(out.u_cmd.distance(&u, s.quad.rate_limit) <= 1e-9);
        }
    }
    assert!(checked > 50, "only {checked} states deep enough");
}
