//! One control cycle of the full device/robot loop, shared by the live
//! session and episode replay.

use serde::{Deserialize, Serialize};

use crate::firmware::{firmware_step, DeviceState, FirmwareError, FirmwareOutputs, ForceFeedbackParams, RobotShadow};
use crate::retarget::{inverse_map, operator_flexion, retarget_all, HandProfile, RobotJointTargets};
use crate::simhand::{hand_step, VirtualHand};
use crate::units::{NormalizedFlexion, Ticks, Timestamp, FE_COUNT};

/// Everything carried from one cycle to the next.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LoopState {
    pub device: DeviceState,
    pub shadow: RobotShadow,
    pub hand: VirtualHand,
}

impl LoopState {
    pub fn new(hand: VirtualHand, profile: &HandProfile) -> LoopState {
        let shadow = RobotShadow { q_robot: inverse_map(&hand.u_actual(), profile) };
        LoopState { device: DeviceState::new(), shadow, hand }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CycleOutputs {
    pub firmware: FirmwareOutputs,
    pub targets: RobotJointTargets,
    pub contacts: [bool; FE_COUNT],
    pub u_operator: [NormalizedFlexion; FE_COUNT],
}

/// Block changes are applied first, then firmware runs against last
/// cycle's shadow, the robot follows the operator, and the shadow is
/// refreshed for the next cycle.
#[allow(clippy::too_many_arguments)]
pub fn cycle(
    state: &mut LoopState,
    fe: &[Ticks; FE_COUNT],
    aa_raw: u16,
    block_changes: &[(usize, Option<f64>)],
    profile: &HandProfile,
    params: &ForceFeedbackParams,
    t: Timestamp,
) -> Result<CycleOutputs, FirmwareError> {
    for (ch, block) in block_changes {
        state.hand.set_block(*ch, *block);
    }
    let (device, firmware) = firmware_step(&state.device, &state.shadow, fe, aa_raw, params)?;
    let targets = retarget_all(&device, profile, t);
    let u_operator = operator_flexion(&device, profile);
    let (hand, contacts) = hand_step(&state.hand, &u_operator);
    state.shadow = RobotShadow { q_robot: inverse_map(&hand.u_actual(), profile) };
    state.device = device;
    state.hand = hand;
    Ok(CycleOutputs { firmware, targets, contacts, u_operator })
}
