//! Control-table model for the virtual actuators and the thumb AA encoder.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Register {
    pub name: &'static str,
    pub addr: u16,
    pub width: u16,
    pub writable: bool,
}

impl Register {
    const fn new(name: &'static str, addr: u16, width: u16, writable: bool) -> Register {
        Register { name, addr, width, writable }
    }

    fn end(&self) -> u16 {
        self.addr + self.width
    }
}

pub const TORQUE_ENABLE: Register = Register::new("torque_enable", 64, 1, true);
pub const GOAL_CURRENT: Register = Register::new("goal_current", 102, 2, true);
pub const GOAL_POSITION: Register = Register::new("goal_position", 116, 4, true);
pub const PRESENT_CURRENT: Register = Register::new("present_current", 126, 2, false);
pub const PRESENT_VELOCITY: Register = Register::new("present_velocity", 128, 4, false);
pub const PRESENT_POSITION: Register = Register::new("present_position", 132, 4, false);

/// 12-bit magnetic encoder angle, 0..=4095.
pub const RAW_ANGLE: Register = Register::new("raw_angle", 12, 2, false);

pub const ACTUATOR_TABLE: &[Register] = &[TORQUE_ENABLE, GOAL_CURRENT, GOAL_POSITION, PRESENT_CURRENT, PRESENT_VELOCITY, PRESENT_POSITION];

pub const ENCODER_TABLE: &[Register] = &[RAW_ANGLE];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceKind {
    Actuator,
    Encoder,
}

impl DeviceKind {
    pub fn table(self) -> &'static [Register] {
        match self {
            DeviceKind::Actuator => ACTUATOR_TABLE,
            DeviceKind::Encoder => ENCODER_TABLE,
        }
    }

    /// Model number reported in PING replies.
    pub fn model_number(self) -> u16 {
        match self {
            DeviceKind::Actuator => 1190,
            DeviceKind::Encoder => 0x5600,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum RegisterError {
    #[error("address range {addr}..{end} is not covered by defined registers", end = addr + len)]
    Unmapped { addr: u16, len: u16 },
    #[error("register at {addr} is read-only")]
    ReadOnly { addr: u16 },
    #[error("zero-length access at {addr}")]
    Empty { addr: u16 },
}

/// Byte-addressed register storage for one device. Multi-byte values are
/// little-endian.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegisterFile {
    kind: DeviceKind,
    bytes: Vec<u8>,
}

impl RegisterFile {
    pub fn new(kind: DeviceKind) -> RegisterFile {
        let size = kind.table().iter().map(Register::end).max().unwrap_or(0);
        RegisterFile { kind, bytes: vec![0; usize::from(size)] }
    }

    pub fn kind(&self) -> DeviceKind {
        self.kind
    }

    /// Checks that `[addr, addr+len)` is tiled exactly by defined registers
    /// and returns those registers.
    fn covering(&self, addr: u16, len: u16) -> Result<Vec<Register>, RegisterError> {
        if len == 0 {
            return Err(RegisterError::Empty { addr });
        }
        let end = u32::from(addr) + u32::from(len);
        let mut cursor = u32::from(addr);
        let mut regs = Vec::new();
        while cursor < end {
            let reg = self.kind.table().iter().find(|r| u32::from(r.addr) == cursor).ok_or(RegisterError::Unmapped { addr, len })?;
            cursor += u32::from(reg.width);
            regs.push(*reg);
        }
        if cursor != end {
            return Err(RegisterError::Unmapped { addr, len });
        }
        Ok(regs)
    }

    pub fn read(&self, addr: u16, len: u16) -> Result<&[u8], RegisterError> {
        self.covering(addr, len)?;
        let a = usize::from(addr);
        Ok(&self.bytes[a..a + usize::from(len)])
    }

    /// Host-side write: only writable registers may be touched.
    pub fn write(&mut self, addr: u16, data: &[u8]) -> Result<(), RegisterError> {
        let len = u16::try_from(data.len()).map_err(|_| RegisterError::Unmapped { addr, len: u16::MAX })?;
        let regs = self.covering(addr, len)?;
        if let Some(r) = regs.iter().find(|r| !r.writable) {
            return Err(RegisterError::ReadOnly { addr: r.addr });
        }
        let a = usize::from(addr);
        self.bytes[a..a + data.len()].copy_from_slice(data);
        Ok(())
    }

    /// Device-side update of any defined register, including read-only ones.
    pub fn poke(&mut self, reg: Register, value: i64) {
        debug_assert!(self.kind.table().contains(&reg));
        let a = usize::from(reg.addr);
        let le = value.to_le_bytes();
        self.bytes[a..a + usize::from(reg.width)].copy_from_slice(&le[..usize::from(reg.width)]);
    }

    /// Reads a register as a sign-extended integer (raw_angle is unsigned).
    pub fn value(&self, reg: Register) -> i64 {
        let a = usize::from(reg.addr);
        let raw = &self.bytes[a..a + usize::from(reg.width)];
        match (reg.width, reg == RAW_ANGLE) {
            (2, true) => i64::from(u16::from_le_bytes([raw[0], raw[1]])),
            (1, _) => i64::from(raw[0]),
            (2, _) => i64::from(i16::from_le_bytes([raw[0], raw[1]])),
            _ => i64::from(i32::from_le_bytes([raw[0], raw[1], raw[2], raw[3]])),
        }
    }
}
