//! Software ReLU network, simulated analog spiking substrate, calibration,
//! and hardware-in-the-loop training.

// `!(x >= 0.0)` is used on purpose so NaN fails validation too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibration;
pub mod cli;
pub mod container;
pub mod dataset;
pub mod loop_trainer;
pub mod relu_net;
pub mod seed;
pub mod substrate;
