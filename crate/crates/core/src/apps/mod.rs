//! Application layer: reference server implementations for the
//! simulated services and the benign client lanes that exercise them.

pub mod lanes;
pub mod servers;


pub use lanes::{BenignLane, LaneConfig, LaneHub, LaneKind, EXCHANGE_TIMEOUT, REPLY_TIMEOUT};
pub use servers::{install_reference_services, ntp_request, ntp_response, SIM_EPOCH_UNIX};
