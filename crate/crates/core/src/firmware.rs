//! 100 Hz device control loop: AA smoothing, velocity estimation, gain
//! scheduling and one-sided (virtual wall) force rendering on the five FE
//! channels.
//!
//! Gain schedule:
//!
//! ```plain
//! K(v) = k_nominal          if |v| <= v_th   (Contact)
//!        gamma * k_nominal  if |v| >  v_th   (FreeMotion)
//! ```
//!
//! Force, with `d = q_robot - q_operator`:
//!
//! ```plain
//! tau = clamp(K(v) * d, 0, tau_max)   if d > epsilon
//!       0                             otherwise
//! ```

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::units::{Ticks, AA_RAW_MAX, FE_COUNT, LOOP_HZ};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FirmwareError {
    #[error("invalid parameter {name}: {reason}")]
    Param { name: &'static str, reason: String },
    #[error("expected {expected} FE channels, got {actual}")]
    ChannelCount { expected: usize, actual: usize },
    #[error("AA raw reading {0} outside 0..=4095")]
    AaOutOfRange(u16),
}

fn param_err(name: &'static str, reason: impl Into<String>) -> FirmwareError {
    FirmwareError::Param { name, reason: reason.into() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForceFeedbackParams {
    pub k_nominal: f64,
    /// Free-motion stiffness reduction ratio, in `[0, 1]`.
    pub gamma: f64,
    /// Speed threshold in ticks per cycle.
    pub v_th: Ticks,
    /// Dead zone on penetration depth.
    pub epsilon: Ticks,
    /// Command saturation.
    pub tau_max: f64,
    pub loop_hz: u32,
    /// EMA smoothing factor on the thumb AA encoder.
    pub ema_alpha: f64,
    /// Consecutive penetrating cycles required before force is rendered
    /// beyond the first; 0 disables debouncing.
    pub debounce_cycles: u32,
}

impl Default for ForceFeedbackParams {
    fn default() -> Self {
        ForceFeedbackParams {
            k_nominal: 5.0,
            gamma: 0.1,
            v_th: Ticks(20),
            epsilon: Ticks(100),
            tau_max: 1000.0,
            loop_hz: LOOP_HZ,
            ema_alpha: 0.1,
            debounce_cycles: 0,
        }
    }
}

impl ForceFeedbackParams {
    pub fn validate(&self) -> Result<(), FirmwareError> {
        if !(self.k_nominal.is_finite() && self.k_nominal >= 0.0) {
            return Err(param_err("k_nominal", "must be finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(param_err("gamma", format!("{} outside [0,1]", self.gamma)));
        }
        if self.v_th.0 <= 0 {
            return Err(param_err("v_th", "must be > 0"));
        }
        if self.epsilon.0 < 0 {
            return Err(param_err("epsilon", "must be >= 0"));
        }
        if !(self.tau_max.is_finite() && self.tau_max > 0.0) {
            return Err(param_err("tau_max", "must be finite and > 0"));
        }
        if self.loop_hz == 0 {
            return Err(param_err("loop_hz", "must be > 0"));
        }
        Ema::new(self.ema_alpha)?;
        Ok(())
    }
}

/// Partial parameter update; absent fields keep their current value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_nominal: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_th: Option<Ticks>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<Ticks>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ema_alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub debounce_cycles: Option<u32>,
}

impl ParamOverrides {
    /// Returns the merged parameters, validated.
    pub fn apply(&self, base: &ForceFeedbackParams) -> Result<ForceFeedbackParams, FirmwareError> {
        let mut p = base.clone();
        if let Some(v) = self.k_nominal {
            p.k_nominal = v;
        }
        if let Some(v) = self.gamma {
            p.gamma = v;
        }
        if let Some(v) = self.v_th {
            p.v_th = v;
        }
        if let Some(v) = self.epsilon {
            p.epsilon = v;
        }
        if let Some(v) = self.tau_max {
            p.tau_max = v;
        }
        if let Some(v) = self.ema_alpha {
            p.ema_alpha = v;
        }
        if let Some(v) = self.debounce_cycles {
            p.debounce_cycles = v;
        }
        p.validate()?;
        Ok(p)
    }
}

/// `alpha * x + (1 - alpha) * y_prev`, evaluated as `y_prev + alpha * (x - y_prev)`
/// so that a constant input is an exact fixed point.
pub fn ema_step(y_prev: f64, x: f64, alpha: f64) -> f64 {
    y_prev + alpha * (x - y_prev)
}

/// EMA filter with its smoothing factor checked once at construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ema {
    alpha: f64,
}

impl Ema {
    pub fn new(alpha: f64) -> Result<Ema, FirmwareError> {
        if alpha > 0.0 && alpha <= 1.0 {
            Ok(Ema { alpha })
        } else {
            Err(param_err("ema_alpha", format!("{alpha} outside (0,1]")))
        }
    }

    pub fn alpha(self) -> f64 {
        self.alpha
    }

    pub fn step(self, y_prev: f64, x: f64) -> f64 {
        ema_step(y_prev, x, self.alpha)
    }
}

/// One-cycle backward difference.
pub fn estimate_velocity(q_now: Ticks, q_prev: Ticks) -> Ticks {
    q_now - q_prev
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GainMode {
    #[default]
    Contact,
    FreeMotion,
}

pub fn scheduled_gain(v: Ticks, p: &ForceFeedbackParams) -> (f64, GainMode) {
    if v.abs() <= p.v_th {
        (p.k_nominal, GainMode::Contact)
    } else {
        (p.gamma * p.k_nominal, GainMode::FreeMotion)
    }
}

/// Renders the one-sided wall force for one channel. `gain` must be >= 0.
pub fn render_force(q_robot: Ticks, q_operator: Ticks, gain: f64, p: &ForceFeedbackParams) -> f64 {
    let depth = q_robot - q_operator;
    if depth > p.epsilon {
        (gain * depth.0 as f64).clamp(0.0, p.tau_max)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FeChannelState {
    pub q_operator: Ticks,
    pub v: Ticks,
    pub gain_mode: GainMode,
    pub tau_cmd: f64,
    /// Consecutive cycles with penetration beyond the dead zone.
    #[serde(default)]
    pub penetrating_cycles: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AaState {
    pub raw: u16,
    pub filtered: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DeviceState {
    pub fe: [FeChannelState; FE_COUNT],
    pub aa: AaState,
    pub cycle_count: u64,
}

impl DeviceState {
    pub fn new() -> DeviceState {
        DeviceState::default()
    }

    pub fn q_operator(&self) -> [Ticks; FE_COUNT] {
        self.fe.map(|c| c.q_operator)
    }

    pub fn tau(&self) -> [f64; FE_COUNT] {
        self.fe.map(|c| c.tau_cmd)
    }

    pub fn gain_modes(&self) -> [GainMode; FE_COUNT] {
        self.fe.map(|c| c.gain_mode)
    }
}

/// Robot finger positions expressed in device tick space (zero-order hold).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RobotShadow {
    pub q_robot: [Ticks; FE_COUNT],
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FirmwareOutputs {
    pub tau_cmd: [f64; FE_COUNT],
    pub gain_mode: [GainMode; FE_COUNT],
    pub aa_filtered: f64,
}

/// One control cycle: sense, filter, velocity, gain, force.
///
/// On the very first cycle (`cycle_count == 0`) the velocity history and AA
/// filter are seeded from the inputs, so start-up produces no velocity spike.
pub fn firmware_step(
    state: &DeviceState,
    shadow: &RobotShadow,
    fe_ticks: &[Ticks],
    aa_raw: u16,
    p: &ForceFeedbackParams,
) -> Result<(DeviceState, FirmwareOutputs), FirmwareError> {
    if fe_ticks.len() != FE_COUNT {
        return Err(FirmwareError::ChannelCount { expected: FE_COUNT, actual: fe_ticks.len() });
    }
    if aa_raw > AA_RAW_MAX {
        return Err(FirmwareError::AaOutOfRange(aa_raw));
    }
    let ema = Ema::new(p.ema_alpha)?;
    let first = state.cycle_count == 0;
    let mut next = state.clone();

    for (i, ch) in next.fe.iter_mut().enumerate() {
        let q_prev = if first { fe_ticks[i] } else { ch.q_operator };
        ch.q_operator = fe_ticks[i];
        ch.v = estimate_velocity(ch.q_operator, q_prev);
        let (gain, mode) = scheduled_gain(ch.v, p);
        ch.gain_mode = mode;

        let depth = shadow.q_robot[i] - ch.q_operator;
        ch.penetrating_cycles = if depth > p.epsilon { ch.penetrating_cycles.saturating_add(1) } else { 0 };
        ch.tau_cmd = if ch.penetrating_cycles > p.debounce_cycles { render_force(shadow.q_robot[i], ch.q_operator, gain, p) } else { 0.0 };
    }

    let x = f64::from(aa_raw);
    next.aa.raw = aa_raw;
    next.aa.filtered = if first { x } else { ema.step(state.aa.filtered, x) };
    next.cycle_count = state.cycle_count + 1;

    let outputs = FirmwareOutputs { tau_cmd: next.tau(), gain_mode: next.gain_modes(), aa_filtered: next.aa.filtered };
    Ok((next, outputs))
}
