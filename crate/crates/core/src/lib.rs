//! Neural forward surrogate for atrial electrocardiology.
//!
//! The crate covers the whole desk-scale pipeline: synthetic atrial surfaces
//! and their geometric operators ([`mesh`]), an eikonal-style activation
//! model ([`activation`]), the infinite-volume-conductor Lead II oracle with
//! clinical band-pass filtering ([`oracle`]), the encoder/decoder surrogate
//! built on a small reverse-mode autodiff tape ([`autodiff`], [`model`]),
//! training ([`training`]) and the file formats and commands that tie it
//! together ([`pipeline`]).

pub mod activation;
pub mod autodiff;
pub mod error;
pub mod geom;
pub mod mesh;
pub mod model;
pub mod oracle;
pub mod pipeline;
pub mod sparse;
pub mod training;

pub use error::{Error, Result};
