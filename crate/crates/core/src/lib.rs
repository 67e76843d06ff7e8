//! Cascade popularity prediction with a variational neural-ODE model.
//!
//! The crate is built bottom-up: a reverse-mode [`autodiff`] tape over f64
//! tensors, differentiable [`ode`] solvers, node [`embed`]dings, cascade
//! data handling ([`cascade`], [`synth`], [`sample`]), the bidirectional
//! [`sequence`] encoder, the [`trend`] VAE, the assembled [`model`], and
//! [`train`]ing with early stopping and checkpoints.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod baselines;
pub mod cascade;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod embed;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ode;
pub mod optim;
pub mod pipeline;
pub mod plot;
pub mod sample;
pub mod sequence;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod trend;

pub use error::{Error, Result};
