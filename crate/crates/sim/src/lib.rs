//! Real-time simulation service: steps a merge trial at wall-clock rate and
//! lets a websocket client drive the traffic drivers' yield behavior.

pub mod protocol;
pub mod server;
pub mod session;

pub use protocol::{Body, ClientCommand, Event, ServerMessage, SCHEMA_VERSION};
pub use server::{start, ServeOptions, ServerHandle};
pub use session::{replay, LoggedCommand, Session, SessionConfig};
