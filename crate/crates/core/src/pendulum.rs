//! The inverted-pendulum instance of the regulation filter.

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::flow::{h_implicit, FlowConfig, TrajectoryBuffer};
use crate::shield::{regulation_lambda, LambdaForm};
use crate::vehicle::{pendulum_deriv, PendulumState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PendulumFilterParams {
    /// Backup law `u = -gain · x`.
    pub gain: [f64; 2],
    pub beta: f64,
    /// Backup-set angular-rate bound, rad/s.
    pub delta: f64,
    /// Backup-set angle bound, rad.
    pub theta_backup: f64,
    /// Positive weight on the backup-set term at the rollout horizon.
    pub backup_weight: f64,
    #[serde(rename = "flow")]
    pub flow: FlowConfig,
}

impl Default for PendulumFilterParams {
    fn default() -> Self {
        Self {
            gain: [6.0, 5.0],
            beta: 5.0,
            delta: 0.1,
            theta_backup: std::f64::consts::PI / 12.0,
            backup_weight: 100.0,
            flow: FlowConfig::pendulum_default(),
        }
    }
}

impl PendulumFilterParams {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.beta > 0.0
            && self.delta > 0.0
            && self.theta_backup > 0.0
            && self.backup_weight > 0.0)
        {
            return Err(ConfigError::invalid(
                "pendulum",
                "beta, delta, theta_backup and backup_weight must be positive",
            ));
        }
        if !self.gain.iter().all(|g| g.is_finite()) {
            return Err(ConfigError::invalid("pendulum", "gain must be finite"));
        }
        Ok(())
    }

    #[inline]
    pub fn backup(&self, x: &PendulumState) -> f64 {
        -self.gain[0] * x.theta - self.gain[1] * x.theta_dot
    }

    /// Backup set `min{θ_B² - θ², δ² - θ̇²}`.
    #[inline]
    pub fn h_backup(&self, x: &PendulumState) -> f64 {
        (self.theta_backup * self.theta_backup - x.theta * x.theta)
            .min(self.delta * self.delta - x.theta_dot * x.theta_dot)
    }
}

/// Safe set `min{1 - θ², 2 - θ̇²}`.
#[inline]
pub fn pendulum_h(x: &PendulumState) -> f64 {
    (1.0 - x.theta * x.theta).min(2.0 - x.theta_dot * x.theta_dot)
}

pub fn pendulum_h_implicit(
    x: &PendulumState,
    params: &PendulumFilterParams,
    scratch: &mut TrajectoryBuffer<PendulumState>,
) -> f64 {
    h_implicit(
        x,
        |s| params.backup(s),
        |s, u| pendulum_deriv(s, *u),
        &params.flow,
        pendulum_h,
        |s| params.backup_weight * params.h_backup(s),
        scratch,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PendulumFilterOutput {
    pub u: f64,
    pub lambda: f64,
    pub h_i: f64,
    pub backup: f64,
}

/// Regulation filter for the pendulum, plain λ form.
pub fn pendulum_filter(
    x: &PendulumState,
    u_des: f64,
    params: &PendulumFilterParams,
    scratch: &mut TrajectoryBuffer<PendulumState>,
) -> PendulumFilterOutput {
    let h_i = pendulum_h_implicit(x, params, scratch);
    let lambda = regulation_lambda(h_i, 0.0, params.beta, 1.0, LambdaForm::Plain);
    let backup = params.backup(x);
    PendulumFilterOutput {
        u: backup + lambda * (u_des - backup),
        lambda,
        h_i,
        backup,
    }
}
