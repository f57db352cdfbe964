//! Exact and audited machine unlearning for a deterministic toy trainer.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

pub mod adapters;
pub mod audits;
pub mod budget;
pub mod checkpoint;
pub mod closure;
pub mod controller;
pub mod corpus;
pub mod error;
pub mod hotpath;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod pipeline;
pub mod replay;
pub mod ring;
pub mod rng;
pub mod store;
pub mod tokenizer;
pub mod train;
pub mod wal;

pub use error::{Error, Result};
