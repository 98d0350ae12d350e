//! Implicit Control for herding non-cooperative evaders with robotic herders.

pub mod adaptive;
pub mod baseline;
pub mod caging;
pub mod controller;
pub mod dynamics;
pub mod error;
pub mod estimator;
pub mod io;
pub mod scenarios;
pub mod sim;
pub mod trace;

pub use error::{HerdError, Result};
