//! Software twin of a force-feedback teleoperation glove: wire protocol,
//! device firmware, retargeting, a virtual robot hand, stream alignment,
//! episode logging and the live session loop.

pub mod api;
pub mod firmware;
pub mod logger;
pub mod pipeline;
pub mod retarget;
pub mod session;
pub mod simhand;
pub mod streams;
pub mod units;
pub mod wire;

pub use units::{ChannelId, NormalizedFlexion, Ticks, Timestamp};
