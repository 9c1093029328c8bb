//! Simulated half-duplex multi-drop bus hosting virtual devices.
//!
//! Exactly one transaction is in flight at a time (`&mut self`). Requests and
//! replies travel as encoded bytes and are decoded on the other side, so byte
//! corruption exercises the same codec paths as a real link.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::frame::{self, DecodeError, EncodeError, Frame, Instruction, BROADCAST_ID};
use super::registers::{
    DeviceKind, RegisterError, RegisterFile, GOAL_CURRENT, PRESENT_CURRENT, PRESENT_POSITION, PRESENT_VELOCITY, RAW_ANGLE,
};

pub const ERR_NONE: u8 = 0x00;
pub const ERR_INSTRUCTION: u8 = 0x02;
pub const ERR_DATA_LENGTH: u8 = 0x05;
pub const ERR_ACCESS: u8 = 0x07;

/// Firmware version reported in PING replies.
const FIRMWARE_VERSION: u8 = 0x2E;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BusConfig {
    /// One-way latency per frame.
    pub latency_us: u32,
    /// Extra uniform jitter per frame, drawn from the seeded generator.
    pub jitter_us: u32,
    /// Host-side wait for a reply before reporting a timeout.
    pub timeout_us: u32,
    /// Per-byte probability of a single bit flip. Test use only.
    pub corruption_rate: f64,
    pub seed: u64,
}

impl Default for BusConfig {
    fn default() -> Self {
        BusConfig { latency_us: 100, jitter_us: 0, timeout_us: 1000, corruption_rate: 0.0, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BusError {
    #[error("no reply from id {id} within {waited_us} us")]
    Timeout { id: u8, waited_us: u64 },
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error("invalid bus config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Transaction {
    /// STATUS replies in bus order.
    pub responses: Vec<Frame>,
    /// Host-side decode diagnostics (only non-empty with corruption).
    pub diagnostics: Vec<DecodeError>,
    /// Addressed ids that did not produce a decodable reply.
    pub missing: Vec<u8>,
    pub elapsed_us: u64,
}

#[derive(Debug, Clone)]
pub struct Bus {
    config: BusConfig,
    devices: BTreeMap<u8, RegisterFile>,
    rng: ChaCha8Rng,
    clock_us: u64,
    transactions: u64,
}

impl Bus {
    pub fn new(config: BusConfig) -> Result<Bus, BusError> {
        if !(0.0..=1.0).contains(&config.corruption_rate) {
            return Err(BusError::Config(format!("corruption_rate {} outside [0,1]", config.corruption_rate)));
        }
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Bus { config, devices: BTreeMap::new(), rng, clock_us: 0, transactions: 0 })
    }

    /// Bus populated with actuators on ids `1..=5` and the thumb AA encoder on id 6.
    pub fn device_bus(config: BusConfig) -> Result<Bus, BusError> {
        let mut bus = Bus::new(config)?;
        for id in ACTUATOR_IDS {
            bus.attach(id, DeviceKind::Actuator);
        }
        bus.attach(ENCODER_ID, DeviceKind::Encoder);
        Ok(bus)
    }

    pub fn attach(&mut self, id: u8, kind: DeviceKind) {
        self.devices.insert(id, RegisterFile::new(kind));
    }

    pub fn device(&self, id: u8) -> Option<&RegisterFile> {
        self.devices.get(&id)
    }

    pub fn device_mut(&mut self, id: u8) -> Option<&mut RegisterFile> {
        self.devices.get_mut(&id)
    }

    /// Physical side: the operator moved the finger on actuator `id`.
    pub fn set_present_position(&mut self, id: u8, ticks: i64) {
        if let Some(dev) = self.devices.get_mut(&id) {
            let prev = dev.value(PRESENT_POSITION);
            dev.poke(PRESENT_VELOCITY, ticks - prev);
            dev.poke(PRESENT_POSITION, ticks);
        }
    }

    /// Physical side: new magnetic encoder reading.
    pub fn set_raw_angle(&mut self, id: u8, raw: u16) {
        if let Some(dev) = self.devices.get_mut(&id) {
            dev.poke(RAW_ANGLE, i64::from(raw & 0x0FFF));
        }
    }

    /// Accumulated simulated bus time.
    pub fn clock_us(&self) -> u64 {
        self.clock_us
    }

    pub fn transactions(&self) -> u64 {
        self.transactions
    }

    fn link_delay(&mut self) -> u64 {
        let jitter = if self.config.jitter_us > 0 { self.rng.gen_range(0..=self.config.jitter_us) } else { 0 };
        u64::from(self.config.latency_us + jitter)
    }

    fn corrupt(&mut self, bytes: &mut [u8]) {
        if self.config.corruption_rate <= 0.0 {
            return;
        }
        for b in bytes.iter_mut() {
            if self.rng.gen_bool(self.config.corruption_rate) {
                *b ^= 1 << self.rng.gen_range(0..8);
            }
        }
    }

    /// Runs one request/reply exchange.
    pub fn transact(&mut self, request: &Frame) -> Result<Transaction, BusError> {
        self.transactions += 1;
        let mut wire = frame::encode(request)?;
        self.corrupt(&mut wire);
        let mut elapsed = self.link_delay();

        // Devices see the (possibly corrupted) request.
        let delivered = frame::decode(&wire).frames.into_iter().next();
        let expected = expected_responders(request, &self.devices);
        let replies = match delivered {
            Some(req) => self.dispatch(&req),
            None => Vec::new(),
        };

        let mut reply_bytes = Vec::new();
        for reply in &replies {
            let mut b = frame::encode(reply)?;
            self.corrupt(&mut b);
            reply_bytes.extend_from_slice(&b);
            elapsed += self.link_delay();
        }
        let decoded = frame::decode(&reply_bytes);
        let responses = decoded.frames;
        let missing: Vec<u8> = expected.iter().copied().filter(|id| !responses.iter().any(|f| f.id == *id)).collect();

        if !missing.is_empty() {
            elapsed = elapsed.max(u64::from(self.config.timeout_us));
        }
        self.clock_us += elapsed;

        if request.id != BROADCAST_ID && expected.len() <= 1 && responses.is_empty() {
            return Err(BusError::Timeout { id: request.id, waited_us: elapsed });
        }
        Ok(Transaction { responses, diagnostics: decoded.diagnostics, missing, elapsed_us: elapsed })
    }

    fn dispatch(&mut self, req: &Frame) -> Vec<Frame> {
        match req.instruction {
            Instruction::Ping => self.targets(req.id).into_iter().map(|id| self.ping_reply(id)).collect(),
            Instruction::Read => match (self.devices.get(&req.id), parse_addr_len(&req.params)) {
                (None, _) => Vec::new(),
                (Some(_), None) => vec![Frame::status(req.id, ERR_DATA_LENGTH, &[])],
                (Some(dev), Some((addr, len))) => vec![read_reply(req.id, dev, addr, len)],
            },
            Instruction::Write => {
                if req.params.len() < 3 {
                    return if self.devices.contains_key(&req.id) { vec![Frame::status(req.id, ERR_DATA_LENGTH, &[])] } else { Vec::new() };
                }
                let addr = u16::from_le_bytes([req.params[0], req.params[1]]);
                let data = &req.params[2..];
                let mut replies = Vec::new();
                for id in self.targets(req.id) {
                    let err = match self.devices.get_mut(&id).map(|d| device_write(d, addr, data)) {
                        Some(Ok(())) => ERR_NONE,
                        _ => ERR_ACCESS,
                    };
                    if req.id != BROADCAST_ID {
                        replies.push(Frame::status(id, err, &[]));
                    }
                }
                replies
            }
            Instruction::SyncRead => {
                let Some((addr, len)) = parse_addr_len(&req.params) else { return Vec::new() };
                let mut ids: Vec<u8> = req.params[4..].to_vec();
                ids.sort_unstable();
                ids.dedup();
                ids.into_iter().filter_map(|id| self.devices.get(&id).map(|dev| read_reply(id, dev, addr, len))).collect()
            }
            Instruction::SyncWrite => {
                let Some((addr, len)) = parse_addr_len(&req.params) else { return Vec::new() };
                let stride = 1 + usize::from(len);
                let body = &req.params[4..];
                if len == 0 || !body.len().is_multiple_of(stride) {
                    return Vec::new();
                }
                for chunk in body.chunks(stride) {
                    if let Some(dev) = self.devices.get_mut(&chunk[0]) {
                        // Sync writes have no reply; errors are silent on the wire.
                        let _ = device_write(dev, addr, &chunk[1..]);
                    }
                }
                Vec::new()
            }
            Instruction::Status => Vec::new(),
        }
    }

    fn targets(&self, id: u8) -> Vec<u8> {
        if id == BROADCAST_ID {
            self.devices.keys().copied().collect()
        } else if self.devices.contains_key(&id) {
            vec![id]
        } else {
            Vec::new()
        }
    }

    fn ping_reply(&self, id: u8) -> Frame {
        let model = self.devices[&id].kind().model_number().to_le_bytes();
        Frame::status(id, ERR_NONE, &[model[0], model[1], FIRMWARE_VERSION])
    }
}

pub const ACTUATOR_IDS: [u8; 5] = [1, 2, 3, 4, 5];
pub const ENCODER_ID: u8 = 6;

fn parse_addr_len(params: &[u8]) -> Option<(u16, u16)> {
    (params.len() >= 4).then(|| (u16::from_le_bytes([params[0], params[1]]), u16::from_le_bytes([params[2], params[3]])))
}

fn read_reply(id: u8, dev: &RegisterFile, addr: u16, len: u16) -> Frame {
    match dev.read(addr, len) {
        Ok(data) => Frame::status(id, ERR_NONE, data),
        Err(_) => Frame::status(id, ERR_ACCESS, &[]),
    }
}

fn device_write(dev: &mut RegisterFile, addr: u16, data: &[u8]) -> Result<(), RegisterError> {
    dev.write(addr, data)?;
    if dev.kind() == DeviceKind::Actuator {
        // The current loop tracks its goal instantly in this model.
        let goal = dev.value(GOAL_CURRENT);
        dev.poke(PRESENT_CURRENT, goal);
    }
    Ok(())
}

/// Ids whose replies the host will wait for.
fn expected_responders(req: &Frame, devices: &BTreeMap<u8, RegisterFile>) -> Vec<u8> {
    match req.instruction {
        Instruction::Ping if req.id == BROADCAST_ID => devices.keys().copied().collect(),
        Instruction::Ping | Instruction::Read | Instruction::Write if req.id != BROADCAST_ID => vec![req.id],
        Instruction::SyncRead if req.params.len() >= 4 => {
            let mut ids = req.params[4..].to_vec();
            ids.sort_unstable();
            ids.dedup();
            ids
        }
        _ => Vec::new(),
    }
}
