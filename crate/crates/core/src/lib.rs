//! Progressive-iterative zooming for small-object referring expression
//! comprehension.

pub mod config;
pub mod error;
pub mod experiment;
pub mod evaluation;
pub mod geometry;
pub mod inference;
pub mod io;
pub mod localizer;
pub mod nn;
pub mod piza;
pub mod prior;
pub mod search;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
