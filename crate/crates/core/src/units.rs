//! Ticks, channel identifiers and time stamps shared by every subsystem.
//!
//! Encoder resolution is 4096 ticks per revolution. Flexion *decreases* the
//! tick value on FE channels (tendon winding shortens), which is the
//! convention the force renderer relies on.

use std::fmt;
use std::num::NonZeroU32;
use std::ops::{Add, Neg, Sub};

use serde::{Deserialize, Serialize};

/// Encoder counts per full revolution.
pub const TICKS_PER_REV: i64 = 4096;

/// Degrees per encoder tick (exactly 45/512, representable in binary).
pub const DEGREES_PER_TICK: f64 = 360.0 / TICKS_PER_REV as f64;

/// Nominal control loop rate.
pub const LOOP_HZ: u32 = 100;

/// Control period in nanoseconds at [`LOOP_HZ`].
pub const CYCLE_NS: u64 = 1_000_000_000 / LOOP_HZ as u64;

/// Number of device channels (5 FE + thumb AA).
pub const CHANNEL_COUNT: usize = 6;

/// Number of actuated (FE) channels.
pub const FE_COUNT: usize = 5;

/// Raw range of the 12-bit thumb AA magnetic encoder.
pub const AA_RAW_MAX: u16 = 4095;

/// Signed encoder position or displacement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Ticks(pub i64);

impl Ticks {
    pub const ZERO: Ticks = Ticks(0);

    pub fn abs(self) -> Ticks {
        Ticks(self.0.abs())
    }

    pub fn degrees(self) -> f64 {
        ticks_to_degrees(self)
    }
}

impl Add for Ticks {
    type Output = Ticks;
    fn add(self, rhs: Ticks) -> Ticks {
        Ticks(self.0 + rhs.0)
    }
}

impl Sub for Ticks {
    type Output = Ticks;
    fn sub(self, rhs: Ticks) -> Ticks {
        Ticks(self.0 - rhs.0)
    }
}

impl Neg for Ticks {
    type Output = Ticks;
    fn neg(self) -> Ticks {
        Ticks(-self.0)
    }
}

impl fmt::Display for Ticks {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} tick", self.0)
    }
}

/// `t · 360 / 4096`, with no intermediate rounding.
pub fn ticks_to_degrees(t: Ticks) -> f64 {
    t.0 as f64 * DEGREES_PER_TICK
}

/// Nearest tick for an angle in degrees.
pub fn degrees_to_ticks(deg: f64) -> Ticks {
    Ticks((deg / DEGREES_PER_TICK).round() as i64)
}

/// Converts a per-cycle tick velocity into degrees per second.
pub fn ticks_per_cycle_to_deg_per_s(v: Ticks, loop_hz: NonZeroU32) -> f64 {
    ticks_to_degrees(v) * f64::from(loop_hz.get())
}

/// Kind of a device channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ChannelKind {
    /// Finger flexion/extension; `0` = index .. `3` = little.
    FingerFe(u8),
    ThumbFe,
    /// Passive, sense-only thumb abduction/adduction.
    ThumbAa,
}

/// One of the six device channels, indexed 0..=5.
///
/// Indices 0-3 are the finger FE channels, 4 is thumb FE and 5 is thumb AA.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct ChannelId(u8);

impl ChannelId {
    pub const THUMB_FE: ChannelId = ChannelId(4);
    pub const THUMB_AA: ChannelId = ChannelId(5);

    pub fn new(index: u8) -> Option<ChannelId> {
        (usize::from(index) < CHANNEL_COUNT).then_some(ChannelId(index))
    }

    pub fn index(self) -> usize {
        usize::from(self.0)
    }

    pub fn kind(self) -> ChannelKind {
        match self.0 {
            0..=3 => ChannelKind::FingerFe(self.0),
            4 => ChannelKind::ThumbFe,
            _ => ChannelKind::ThumbAa,
        }
    }

    /// FE channels carry an actuator; thumb AA is sense-only.
    pub fn is_actuated(self) -> bool {
        !matches!(self.kind(), ChannelKind::ThumbAa)
    }

    pub fn all() -> impl Iterator<Item = ChannelId> {
        (0..CHANNEL_COUNT as u8).map(ChannelId)
    }

    pub fn actuated() -> impl Iterator<Item = ChannelId> {
        (0..FE_COUNT as u8).map(ChannelId)
    }

    pub fn name(self) -> &'static str {
        match self.0 {
            0 => "index",
            1 => "middle",
            2 => "ring",
            3 => "little",
            4 => "thumb_fe",
            _ => "thumb_aa",
        }
    }
}

impl TryFrom<u8> for ChannelId {
    type Error = String;

    fn try_from(value: u8) -> Result<Self, Self::Error> {
        ChannelId::new(value).ok_or_else(|| format!("channel index {value} outside 0..=5"))
    }
}

impl From<ChannelId> for u8 {
    fn from(c: ChannelId) -> u8 {
        c.0
    }
}

impl fmt::Display for ChannelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({})", self.name(), self.0)
    }
}

/// Nanoseconds since session start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Timestamp(pub u64);

impl Timestamp {
    pub const ZERO: Timestamp = Timestamp(0);

    pub fn from_cycle(cycle: u64) -> Timestamp {
        Timestamp(cycle * CYCLE_NS)
    }

    pub fn from_secs_f64(s: f64) -> Timestamp {
        Timestamp((s * 1e9).round().max(0.0) as u64)
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 * 1e-9
    }

    pub fn nanos(self) -> u64 {
        self.0
    }
}

/// Flexion normalized to `[0, 1]` (0 = fully extended, 1 = fully flexed).
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default, Serialize, Deserialize)]
#[serde(from = "f64", into = "f64")]
pub struct NormalizedFlexion(f64);

impl NormalizedFlexion {
    pub const EXTENDED: NormalizedFlexion = NormalizedFlexion(0.0);
    pub const FLEXED: NormalizedFlexion = NormalizedFlexion(1.0);

    /// Clamps into `[0, 1]`; NaN maps to 0.
    pub fn new(u: f64) -> NormalizedFlexion {
        if u.is_nan() {
            NormalizedFlexion(0.0)
        } else {
            NormalizedFlexion(u.clamp(0.0, 1.0))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl From<f64> for NormalizedFlexion {
    fn from(u: f64) -> Self {
        NormalizedFlexion::new(u)
    }
}

impl From<NormalizedFlexion> for f64 {
    fn from(u: NormalizedFlexion) -> f64 {
        u.0
    }
}
