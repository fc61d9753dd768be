//! Population-model deconvolution of breath alcohol (BrAC) from transdermal
//! alcohol (TAC) sensor signals.

pub mod data_io;
pub mod deconvolution;
pub mod density;
pub mod error;
pub mod expm;
pub mod forward_model;
pub mod grid_basis;
pub mod nnls;
pub mod optim;
pub mod population_fit;
pub mod synth;
pub mod uncertainty;

pub use error::{Error, Result};
