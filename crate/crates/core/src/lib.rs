//! Slotted-time simulation and control of energy-harvesting base stations
//! that share energy over a power packet grid.

pub mod allocation;
pub mod gp;
pub mod grid;
pub mod mpc;
pub mod qp;
pub mod sim;
pub mod traces;
