//! On-device test-time-training recommender with a cloud correction network.
//!
//! The crate is organised bottom-up: [`numerics`] provides tensors and a
//! gradient tape, [`ttt`] the sequence layer, [`scn`] and [`gcn`] the device
//! and cloud models, and [`trainer`] ties them to the [`data`] pipeline and
//! [`eval`] metrics. [`cochannel`] carries hidden states and corrections
//! between device and cloud.

pub mod cochannel;
pub mod data;
pub mod eval;
pub mod gcn;
pub mod numerics;
pub mod scn;
pub mod trainer;
pub mod ttt;

mod error;

pub use error::{Error, Result};
