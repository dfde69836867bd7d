#![allow(clippy::neg_cmp_op_on_partial_ord)] // !(x > 0) deliberately rejects NaN
#![allow(clippy::needless_range_loop)]

//! Queueing-network traffic toolkit: closed-form signalized-queue analysis,
//! an exact fluid network integrator, and a stochastic point-queue simulator
//! with fixed-time and max-pressure control.

pub mod analytic;
pub mod capacity;
pub mod des;
pub mod experiment;
pub mod fluid;
pub mod metrics;
pub mod network;
pub mod scenario;
pub mod signal;
