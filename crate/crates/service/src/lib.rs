//! Session-oriented HTTP chat service over the worksheet engine.

pub mod config;
pub mod http;
pub mod session;

pub use config::{BusyPolicy, Config};
pub use http::{router, serve};
pub use session::{Backends, CreateSession, ParserChoice, ServiceError, Store};
