#![allow(dead_code)]

use dexmouse_core::session::{CommandMessage, InputScript, ScriptedCommand};

pub fn at(cycle: u64, command: CommandMessage) -> ScriptedCommand {
    ScriptedCommand { cycle, command }
}

pub fn set_u(channel: u8, u: f64) -> CommandMessage {
    CommandMessage::SetInput { channel, ticks: None, normalized: Some(u) }
}

pub fn set_ticks(channel: u8, ticks: i64) -> CommandMessage {
    CommandMessage::SetInput { channel, ticks: Some(ticks), normalized: None }
}

pub fn record_start(task: &str) -> CommandMessage {
    CommandMessage::RecordStart { task: task.into(), operator: "op-a".into() }
}

/// Triangle wave in [lo, hi] with the given period in cycles; exact in
/// binary floating point for the grid used here.
pub fn triangle(k: u64, period: u64, lo: f64, hi: f64) -> f64 {
    let half = period / 2;
    let p = k % period;
    let frac = if p < half { p as f64 / half as f64 } else { (period - p) as f64 / half as f64 };
    lo + (hi - lo) * frac
}

/// Whole-run recording with every channel sweeping between open and
/// closed at its own period, plus a mid-run block on the middle finger.
pub fn demo_script(cycles: u64) -> InputScript {
    let mut commands = vec![at(0, record_start("demo"))];
    for k in (0..cycles).step_by(20) {
        for ch in 0..6u8 {
            let period = 300 + 80 * u64::from(ch);
            commands.push(at(k, set_u(ch, triangle(k + 37 * u64::from(ch), period, 0.05, 0.95))));
        }
    }
    commands.push(at(2500, CommandMessage::SetBlock { channel: 2, value: Some(0.4) }));
    commands.push(at(3500, CommandMessage::SetBlock { channel: 2, value: None }));
    commands.push(at(cycles, CommandMessage::RecordStop { success: true }));
    commands.sort_by_key(|c| c.cycle);
    InputScript { cycles: Some(cycles), commands }
}
