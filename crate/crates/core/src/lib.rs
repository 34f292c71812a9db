//! Two-stream visuotactile fusion for surface-roughness classification.
//!
//! The crate is organized bottom-up: [`autodiff`] provides tensors and a
//! reverse-mode tape, [`nn`] builds layers and the optimizer on top of it,
//! [`synthgen`] and [`dataset`] produce and store paired visuotactile data,
//! [`streams`] and [`fusion`] form the network, and [`model`] trains and
//! evaluates it. [`config`] and [`pipeline`] tie runs together for the CLI.

pub mod autodiff;
pub mod config;
pub mod dataset;
pub mod error;
pub mod fusion;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod seed;
pub mod streams;
pub mod synthgen;

pub use error::{Error, Result};
