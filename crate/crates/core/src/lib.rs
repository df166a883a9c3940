//! Frequency-aware deepfake detection with forgery-guided test-time
//! adaptation.
//!
//! The crate is self-contained: a small f64 autodiff engine with an FFT
//! ([`tensor`], [`fft`]), the frequency-perception and relation-perception
//! blocks ([`fpm`], [`afrp`]) composed into a detector ([`dpnet`]), the
//! training losses ([`losses`]), the guided-update meta-learner ([`fgl`]),
//! a synthetic artifact corpus ([`synthdata`]), and the training/eval
//! drivers behind the CLI ([`config`], [`trainer`], [`metrics`],
//! [`checkpoint`]).

pub mod afrp;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod dpnet;
pub mod error;
pub mod fft;
pub mod fgl;
pub mod fpm;
pub mod gradcheck;
pub mod ioutil;
pub mod losses;
pub mod metrics;
pub mod param;
pub mod rng;
pub mod synthdata;
pub mod trainer;
pub mod tensor;

pub use error::{Error, Result};
