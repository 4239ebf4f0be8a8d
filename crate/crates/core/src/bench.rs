//! Per-call latency of the quadrotor filter over randomized states.

use std::time::Instant;

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alloc_count;
use crate::error::ConfigError;
use crate::qp::TimingStats;
use crate::scenario::QuadScenario;
use crate::shield::GeofenceShield;
use crate::vehicle::{QuadCommand, QuadState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub timing: TimingStats,
    pub flow_steps: usize,
    /// Allocations made inside the timed calls; `None` without a counting allocator.
    pub allocations: Option<u64>,
}

/// A random flight state inside `shield`'s geofence: any attitude up to
/// `max_tilt` radians off level, speed up to `max_speed`.
pub fn random_state(
    rng: &mut ChaCha8Rng,
    shield: &GeofenceShield,
    max_speed: f64,
    max_tilt: f64,
) -> QuadState {
    let fence = shield.fence();
    let p = Vector3::from_fn(|i, _| {
        fence.center[i] + fence.half_extents[i] * rng.random_range(-0.95..0.95)
    });
    let dir = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0f64));
    let v = dir.try_normalize(1e-9).unwrap_or_else(Vector3::x) * rng.random_range(0.0..=max_speed);
    let axis = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0f64));
    let q = UnitQuaternion::from_scaled_axis(
        axis.try_normalize(1e-9).unwrap_or_else(Vector3::x) * rng.random_range(0.0..=max_tilt),
    );
    let w = Vector3::from_fn(|_, _| rng.random_range(-2.0..2.0));
    QuadState {
        position: p,
        attitude: *q.quaternion(),
        velocity: v,
        body_rates: w,
    }
}

/// Time `calls` filter invocations on states drawn from `seed`.
///
/// States and desired commands are generated before timing starts, so the
/// allocation count covers only the filter itself.
pub fn bench_filter(s: &QuadScenario, calls: usize, seed: u64) -> Result<BenchReport, ConfigError> {
    s.validate()?;
    let mut shield = GeofenceShield::new(s.geofence, s.filter, s.quad, s.flow)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rate_limit = s.quad.rate_limit;
    let inputs: Vec<(QuadState, QuadCommand)> = (0..calls)
        .map(|_| {
            let x = random_state(&mut rng, &shield, 30.0, 1.0);
            let u = QuadCommand::new(
                rng.random_range(0.0..=1.0),
                Vector3::from_fn(|_, _| rng.random_range(-rate_limit..=rate_limit)),
            );
            (x, u)
        })
        .collect();
    let mut samples = vec![0.0; calls];
    // Warm up caches and branch predictors.
    for (x, u) in inputs.iter().take(16) {
        std::hint::black_box(shield.filter(x, u));
    }
    let before = alloc_count::allocation_count();
    for ((x, u), slot) in inputs.iter().zip(samples.iter_mut()) {
        let start = Instant::now();
        std::hint::black_box(shield.filter(std::hint::black_box(x), u));
        *slot = start.elapsed().as_nanos() as f64;
    }
    let allocations = alloc_count::allocation_count() - before;
    Ok(BenchReport {
        timing: TimingStats::from_samples(&mut samples),
        flow_steps: s.flow.n_steps(),
        allocations: alloc_count::is_installed().then_some(allocations),
    })
}
