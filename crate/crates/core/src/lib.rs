//! Listwise answer reranking with a masked, rank-weighted pointer objective.
//!
//! Pipeline: candidates are ingested per query ([`io`]), ordered by similarity
//! to a reference into rank-labeled targets ([`target`]), and used to train a
//! small pointer network ([`model`], [`train`]) with the loss in [`loss`].
//! [`decode`] produces duplicate-free ranked lists and [`metrics`] scores them.

pub mod audit;
pub mod checkpoint;
pub mod cli;
pub mod decode;
pub mod error;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod record;
pub mod synth;
pub mod target;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
