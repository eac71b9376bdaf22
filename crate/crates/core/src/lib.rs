//! Distributed co-simulation over TCP.
//!
//! Model backends run next to their models and dial out to forwarding proxies
//! on the simulation host. The master drives the proxies through a fixed-step
//! Jacobi schedule and records how long each step took in wall time.

pub mod audit;
pub mod backend;
pub mod descriptor;
pub mod master;
pub mod metrics;
pub mod proxy;
pub mod wire;
