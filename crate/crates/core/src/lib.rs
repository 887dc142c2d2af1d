#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Decentralized online kernel learning with proximity constraints between
//! neighbouring agents.

pub mod agent;
pub mod datagen;
pub mod error;
pub mod kernels;
pub mod komp;
pub mod objectives;
pub mod rkhs;
pub mod simulator;
pub mod theory;
pub mod topology;

pub use agent::{AgentState, HyperParams, Sample};
pub use error::{Error, Result};
pub use kernels::{Dictionary, KernelSpec};
pub use rkhs::KernelExpansion;
pub use topology::Topology;
