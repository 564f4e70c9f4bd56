//! Step-based parallel I/O and data staging toolkit.

pub mod checksum;
pub mod codec;
pub mod comm;
pub mod container;
pub mod drain;
pub mod engine;
pub mod error;
pub mod flatfile;
pub mod frame;
pub mod harness;
pub mod index;
pub mod layout;
pub mod modes;
pub mod par;
pub mod staging;
pub mod storage;
pub mod throttle;
pub mod types;

pub use error::{Error, Result};
