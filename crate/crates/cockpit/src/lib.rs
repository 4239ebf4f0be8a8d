//! Live cockpit backend: a websocket session server that runs the shielded
//! quadrotor in real time against browser stick input.

pub mod protocol;
pub mod server;
pub mod session;
