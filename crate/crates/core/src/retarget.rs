//! Proportional retargeting from device channels to target-hand joints.
//!
//! Device ticks are normalized to a flexion value `u` per channel, then
//! linearly interpolated onto each mapped joint's limits. A profile is
//! written once per robot hand; nothing here depends on who operates the
//! device.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::firmware::DeviceState;
use crate::units::{ChannelId, NormalizedFlexion, Ticks, Timestamp, CHANNEL_COUNT, FE_COUNT};

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("reading profile: {0}")]
    Io(#[from] std::io::Error),
    #[error("no shipped profile or file named {0:?}")]
    Unknown(String),
    #[error("parsing profile: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid profile {profile:?}: {reason}")]
    Invalid { profile: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceRange {
    pub q_min: Ticks,
    pub q_max: Ticks,
    /// True when flexing the finger lowers the tick value.
    pub flexion_decreases: bool,
}

impl DeviceRange {
    pub fn span(&self) -> i64 {
        self.q_max.0 - self.q_min.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointMap {
    pub joint_id: String,
    pub theta_min: f64,
    pub theta_max: f64,
    #[serde(default = "unit_weight")]
    pub weight: f64,
    #[serde(default)]
    pub invert: bool,
}

fn unit_weight() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelProfile {
    pub channel: ChannelId,
    pub range: DeviceRange,
    #[serde(default)]
    pub joints: Vec<JointMap>,
    /// Channel is recorded but drives no joint (e.g. a device finger the
    /// target hand does not have).
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub log_only: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeutralJoint {
    pub joint_id: String,
    pub angle: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandProfile {
    pub name: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    /// Virtual hand tracking speed override (flexion units per cycle).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate_limit: Option<f64>,
    pub channels: Vec<ChannelProfile>,
    /// Robot joints with no device counterpart, held at a fixed angle.
    #[serde(default)]
    pub neutral: Vec<NeutralJoint>,
}

pub const BUILTIN_PROFILES: &[(&str, &str)] = &[
    ("bluerobin-8dof", include_str!("../fixtures/profiles/bluerobin-8dof.json")),
    ("igrisc-11dof", include_str!("../fixtures/profiles/igrisc-11dof.json")),
    ("adroit-30dof", include_str!("../fixtures/profiles/adroit-30dof.json")),
];

impl HandProfile {
    pub fn from_json(text: &str) -> Result<HandProfile, ProfileError> {
        let profile: HandProfile = serde_json::from_str(text)?;
        profile.validate()?;
        Ok(profile)
    }

    pub fn load(path: &Path) -> Result<HandProfile, ProfileError> {
        HandProfile::from_json(&fs::read_to_string(path)?)
    }

    /// A shipped fixture by name, or a file path.
    pub fn resolve(name_or_path: &str) -> Result<HandProfile, ProfileError> {
        match BUILTIN_PROFILES.iter().find(|(n, _)| *n == name_or_path) {
            Some((_, text)) => HandProfile::from_json(text),
            None if !Path::new(name_or_path).exists() => Err(ProfileError::Unknown(name_or_path.into())),
            None => HandProfile::load(Path::new(name_or_path)),
        }
    }

    pub fn builtin(name: &str) -> Option<HandProfile> {
        BUILTIN_PROFILES.iter().find(|(n, _)| *n == name).map(|(_, t)| HandProfile::from_json(t).expect("shipped profile is valid"))
    }

    fn invalid(&self, reason: impl Into<String>) -> ProfileError {
        ProfileError::Invalid { profile: self.name.clone(), reason: reason.into() }
    }

    pub fn validate(&self) -> Result<(), ProfileError> {
        if self.name.trim().is_empty() {
            return Err(self.invalid("empty name"));
        }
        if let Some(r) = self.rate_limit {
            if !(r > 0.0 && r <= 1.0) {
                return Err(self.invalid(format!("rate_limit {r} outside (0,1]")));
            }
        }
        let mut seen_channels = [false; CHANNEL_COUNT];
        let mut seen_joints = HashSet::new();
        for ch in &self.channels {
            let idx = ch.channel.index();
            if std::mem::replace(&mut seen_channels[idx], true) {
                return Err(self.invalid(format!("channel {} declared twice", ch.channel)));
            }
            if ch.range.q_min >= ch.range.q_max {
                return Err(self.invalid(format!("channel {}: q_min must be < q_max", ch.channel)));
            }
            if ch.channel.is_actuated() && ch.joints.is_empty() && !ch.log_only {
                return Err(self.invalid(format!("FE channel {} maps no joint", ch.channel)));
            }
            if ch.log_only && !ch.joints.is_empty() {
                return Err(self.invalid(format!("log-only channel {} has joint maps", ch.channel)));
            }
            for j in &ch.joints {
                if !(j.theta_min.is_finite() && j.theta_max.is_finite() && j.theta_min < j.theta_max) {
                    return Err(self.invalid(format!("joint {}: theta_min must be < theta_max", j.joint_id)));
                }
                if !(j.weight > 0.0 && j.weight <= 1.0) {
                    return Err(self.invalid(format!("joint {}: weight {} outside (0,1]", j.joint_id, j.weight)));
                }
                if !seen_joints.insert(j.joint_id.as_str()) {
                    return Err(self.invalid(format!("joint {} mapped more than once", j.joint_id)));
                }
            }
        }
        if let Some(missing) = seen_channels.iter().position(|s| !s) {
            return Err(self.invalid(format!("channel {missing} missing; all 6 device channels must be declared")));
        }
        for n in &self.neutral {
            if !n.angle.is_finite() {
                return Err(self.invalid(format!("neutral joint {} has non-finite angle", n.joint_id)));
            }
            if !seen_joints.insert(n.joint_id.as_str()) {
                return Err(self.invalid(format!("joint {} declared more than once", n.joint_id)));
            }
        }
        Ok(())
    }

    pub fn channel(&self, id: ChannelId) -> &ChannelProfile {
        self.channels.iter().find(|c| c.channel == id).expect("validated profile covers every channel")
    }

    pub fn range(&self, id: ChannelId) -> DeviceRange {
        self.channel(id).range
    }

    /// Joint names in output order: channel declaration order, then neutral joints.
    pub fn joint_names(&self) -> Vec<String> {
        self.channels
            .iter()
            .flat_map(|c| c.joints.iter().map(|j| j.joint_id.clone()))
            .chain(self.neutral.iter().map(|n| n.joint_id.clone()))
            .collect()
    }

    pub fn joint_count(&self) -> usize {
        self.channels.iter().map(|c| c.joints.len()).sum::<usize>() + self.neutral.len()
    }

    /// Hex SHA-256 of the canonical JSON serialization.
    pub fn content_hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("profile serializes");
        hex::encode(Sha256::digest(&canonical))
    }
}

fn normalize_value(x: f64, range: &DeviceRange) -> (NormalizedFlexion, bool) {
    let span = range.span() as f64;
    let raw = if range.flexion_decreases { (range.q_max.0 as f64 - x) / span } else { (x - range.q_min.0 as f64) / span };
    (NormalizedFlexion::new(raw), !(0.0..=1.0).contains(&raw))
}

pub fn normalize(q: Ticks, range: &DeviceRange) -> NormalizedFlexion {
    normalize_value(q.0 as f64, range).0
}

/// Like [`normalize`], also reporting whether the input had to be clamped.
pub fn normalize_checked(q: Ticks, range: &DeviceRange) -> (NormalizedFlexion, bool) {
    normalize_value(q.0 as f64, range)
}

/// Interpolates one joint; endpoints are hit exactly and the result never
/// leaves `[theta_min, theta_max]`.
pub fn map_joint(u: NormalizedFlexion, map: &JointMap) -> f64 {
    let u = if map.invert { 1.0 - u.get() } else { u.get() };
    let s = map.weight * u;
    if s >= 1.0 {
        return map.theta_max;
    }
    (map.theta_min + s * (map.theta_max - map.theta_min)).clamp(map.theta_min, map.theta_max)
}

pub fn map_channel(u: NormalizedFlexion, maps: &[JointMap]) -> Vec<f64> {
    maps.iter().map(|m| map_joint(u, m)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointTarget {
    pub joint_id: String,
    pub angle: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotJointTargets {
    pub t: Timestamp,
    pub joints: Vec<JointTarget>,
    /// Channels whose input fell outside the device range this cycle.
    #[serde(default)]
    pub clamped: u32,
}

impl RobotJointTargets {
    pub fn angles(&self) -> Vec<f64> {
        self.joints.iter().map(|j| j.angle).collect()
    }
}

/// Normalized flexion of every channel: FE from raw ticks, thumb AA from
/// the filtered encoder value. Second element counts clamped channels.
pub fn device_flexion(state: &DeviceState, profile: &HandProfile) -> ([NormalizedFlexion; 6], u32) {
    let mut out = [NormalizedFlexion::EXTENDED; CHANNEL_COUNT];
    let mut clamped = 0;
    for id in ChannelId::all() {
        let range = profile.range(id);
        let x = if id.is_actuated() { state.fe[id.index()].q_operator.0 as f64 } else { state.aa.filtered };
        let (u, c) = normalize_value(x, &range);
        out[id.index()] = u;
        clamped += u32::from(c);
    }
    (out, clamped)
}

/// Operator flexion on the FE channels, the virtual hand's targets.
pub fn operator_flexion(state: &DeviceState, profile: &HandProfile) -> [NormalizedFlexion; FE_COUNT] {
    let (all, _) = device_flexion(state, profile);
    std::array::from_fn(|i| all[i])
}

pub fn retarget_all(state: &DeviceState, profile: &HandProfile, t: Timestamp) -> RobotJointTargets {
    let (u, clamped) = device_flexion(state, profile);
    let mut joints = Vec::with_capacity(profile.joint_count());
    for ch in &profile.channels {
        let u = u[ch.channel.index()];
        joints.extend(ch.joints.iter().map(|m| JointTarget { joint_id: m.joint_id.clone(), angle: map_joint(u, m) }));
    }
    joints.extend(profile.neutral.iter().map(|n| JointTarget { joint_id: n.joint_id.clone(), angle: n.angle }));
    RobotJointTargets { t, joints, clamped }
}

/// Inverse of [`normalize`] on one range, rounded to the nearest tick.
pub fn denormalize(u: NormalizedFlexion, range: &DeviceRange) -> Ticks {
    let offset = (u.get() * range.span() as f64).round() as i64;
    if range.flexion_decreases {
        Ticks(range.q_max.0 - offset)
    } else {
        Ticks(range.q_min.0 + offset)
    }
}

/// Expresses robot flexion on the FE channels in device tick space.
pub fn inverse_map(u_robot: &[NormalizedFlexion; FE_COUNT], profile: &HandProfile) -> [Ticks; FE_COUNT] {
    std::array::from_fn(|i| {
        let id = ChannelId::new(i as u8).expect("FE index");
        denormalize(u_robot[i], &profile.range(id))
    })
}
