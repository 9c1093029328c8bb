//! Actuator bus: frame codec, register model and a simulated transport.

pub mod bus;
pub mod crc;
pub mod frame;
pub mod registers;

pub use bus::{Bus, BusConfig, BusError, Transaction, ACTUATOR_IDS, ENCODER_ID};
pub use frame::{decode, encode, DecodeError, Decoded, Decoder, EncodeError, Frame, Instruction, BROADCAST_ID};

/// Parses whitespace-separated hex (`"FF FF FD 00 ..."`, `0x` prefixes and
/// commas tolerated; a contiguous hex string also works).
pub fn parse_hex(text: &str) -> Result<Vec<u8>, hex::FromHexError> {
    let cleaned: String = text
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(|t| {
            let t = t.trim_start_matches("0x").trim_start_matches("0X");
            if t.len() == 1 {
                format!("0{t}")
            } else {
                t.to_string()
            }
        })
        .collect();
    hex::decode(cleaned)
}

/// Human-readable rendering of a decode result.
pub fn dump(decoded: &Decoded) -> String {
    use std::fmt::Write;
    let mut out = String::new();
    for f in &decoded.frames {
        let _ = writeln!(
            out,
            "frame id={:#04x} instr={:?} len={} params=[{}] crc={:#06x}",
            f.id,
            f.instruction,
            f.params.len(),
            hex_spaced(&f.params),
            f.crc
        );
    }
    for d in &decoded.diagnostics {
        let _ = writeln!(out, "diag  {d}");
    }
    let _ = writeln!(
        out,
        "{} frame(s), {} diagnostic(s), consumed {} byte(s), residue {}",
        decoded.frames.len(),
        decoded.diagnostics.len(),
        decoded.consumed,
        decoded.residue
    );
    out
}

pub fn hex_spaced(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02X}")).collect::<Vec<_>>().join(" ")
}
