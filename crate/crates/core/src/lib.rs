//! Trace-driven simulation of a host cache hierarchy attached to CXL-SSD
//! endpoints through a multi-tier switch fabric, with expander-side
//! prefetching.

pub mod cache;
pub mod device;
pub mod engine;
pub mod prefetch;
pub mod protocol;
pub mod topology;
pub mod trace;
pub mod units;

pub use units::{Clock, Latency};
