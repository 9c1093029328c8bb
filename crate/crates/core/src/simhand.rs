//! Virtual target hand: rate-limited flexion tracking in normalized space,
//! with per-channel contact blocks standing in for grasped objects.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::units::{NormalizedFlexion, FE_COUNT};

pub const DEFAULT_RATE_LIMIT: f64 = 0.05;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("reading scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("no shipped scenario or file named {0:?}")]
    Unknown(String),
    #[error("parsing scenario: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid scenario {scenario:?}: {reason}")]
    Invalid { scenario: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct HandChannel {
    pub u_actual: f64,
    pub block: Option<f64>,
    pub contact: bool,
}

impl HandChannel {
    fn ceiling(&self) -> f64 {
        self.block.map_or(1.0, |b| b.min(1.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VirtualHand {
    pub channels: [HandChannel; FE_COUNT],
    /// Maximum flexion change per cycle.
    pub rate_limit: f64,
}

impl Default for VirtualHand {
    fn default() -> Self {
        VirtualHand::new(DEFAULT_RATE_LIMIT)
    }
}

impl VirtualHand {
    pub fn new(rate_limit: f64) -> VirtualHand {
        VirtualHand { channels: [HandChannel::default(); FE_COUNT], rate_limit }
    }

    pub fn u_actual(&self) -> [NormalizedFlexion; FE_COUNT] {
        self.channels.map(|c| NormalizedFlexion::new(c.u_actual))
    }

    pub fn contacts(&self) -> [bool; FE_COUNT] {
        self.channels.map(|c| c.contact)
    }

    /// Places or removes a block. A block below the current flexion pushes
    /// the finger back to it immediately.
    pub fn set_block(&mut self, channel: usize, block: Option<f64>) {
        let ch = &mut self.channels[channel];
        ch.block = block.map(|b| b.clamp(0.0, 1.0));
        ch.u_actual = ch.u_actual.min(ch.ceiling());
    }
}

/// Advances every channel one cycle toward its target.
pub fn hand_step(hand: &VirtualHand, u_target: &[NormalizedFlexion; FE_COUNT]) -> (VirtualHand, [bool; FE_COUNT]) {
    let mut next = hand.clone();
    let r = hand.rate_limit;
    for (ch, target) in next.channels.iter_mut().zip(u_target) {
        let desired = ch.u_actual + (target.get() - ch.u_actual).clamp(-r, r);
        let ceiling = ch.ceiling();
        ch.contact = desired > ceiling;
        ch.u_actual = desired.clamp(0.0, ceiling);
    }
    let contacts = next.contacts();
    (next, contacts)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioEvent {
    pub cycle: u64,
    pub channel: usize,
    pub block: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    #[serde(default)]
    pub initial_blocks: [Option<f64>; FE_COUNT],
    #[serde(default)]
    pub events: Vec<ScenarioEvent>,
}

pub const BUILTIN_SCENARIOS: &[(&str, &str)] = &[
    ("pick_place", include_str!("../fixtures/scenarios/pick_place.json")),
    ("peg_in_hole", include_str!("../fixtures/scenarios/peg_in_hole.json")),
    ("hammering", include_str!("../fixtures/scenarios/hammering.json")),
];

impl Scenario {
    pub fn empty(name: &str) -> Scenario {
        Scenario { name: name.into(), description: String::new(), initial_blocks: [None; FE_COUNT], events: Vec::new() }
    }

    pub fn from_json(text: &str) -> Result<Scenario, ScenarioError> {
        let s: Scenario = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Scenario, ScenarioError> {
        Scenario::from_json(&fs::read_to_string(path)?)
    }

    pub fn resolve(name_or_path: &str) -> Result<Scenario, ScenarioError> {
        match BUILTIN_SCENARIOS.iter().find(|(n, _)| *n == name_or_path) {
            Some((_, text)) => Scenario::from_json(text),
            None if !Path::new(name_or_path).exists() => Err(ScenarioError::Unknown(name_or_path.into())),
            None => Scenario::load(Path::new(name_or_path)),
        }
    }

    pub fn builtin(name: &str) -> Option<Scenario> {
        BUILTIN_SCENARIOS.iter().find(|(n, _)| *n == name).map(|(_, t)| Scenario::from_json(t).expect("shipped scenario is valid"))
    }

    fn invalid(&self, reason: impl Into<String>) -> ScenarioError {
        ScenarioError::Invalid { scenario: self.name.clone(), reason: reason.into() }
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let valid_block = |b: &Option<f64>| b.is_none_or(|v| (0.0..=1.0).contains(&v));
        if !self.initial_blocks.iter().all(valid_block) {
            return Err(self.invalid("initial block outside [0,1]"));
        }
        let mut seen = HashSet::new();
        let mut last = 0;
        for e in &self.events {
            if e.cycle < last {
                return Err(self.invalid(format!("events not sorted by cycle at cycle {}", e.cycle)));
            }
            last = e.cycle;
            if e.channel >= FE_COUNT {
                return Err(self.invalid(format!("event channel {} outside 0..5", e.channel)));
            }
            if !valid_block(&e.block) {
                return Err(self.invalid(format!("event block at cycle {} outside [0,1]", e.cycle)));
            }
            if !seen.insert((e.cycle, e.channel)) {
                return Err(self.invalid(format!("duplicate event for channel {} at cycle {}", e.channel, e.cycle)));
            }
        }
        Ok(())
    }

    pub fn events_at(&self, cycle: u64) -> impl Iterator<Item = &ScenarioEvent> {
        let start = self.events.partition_point(|e| e.cycle < cycle);
        self.events[start..].iter().take_while(move |e| e.cycle == cycle)
    }

    /// Fresh hand with the scenario's initial blocks.
    pub fn initial_hand(&self, rate_limit: f64) -> VirtualHand {
        let mut hand = VirtualHand::new(rate_limit);
        for (i, b) in self.initial_blocks.iter().enumerate() {
            hand.set_block(i, *b);
        }
        hand
    }
}

/// Applies every event scheduled for `cycle`; call before [`hand_step`].
pub fn apply_scenario_events(hand: &VirtualHand, scenario: &Scenario, cycle: u64) -> VirtualHand {
    let mut next = hand.clone();
    for e in scenario.events_at(cycle) {
        next.set_block(e.channel, e.block);
    }
    next
}
