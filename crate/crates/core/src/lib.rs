//! Spatio-temporal forecasting with self-supervised deviation learning.
//!
//! A GCRU encoder reads the current window and its timestamp-aligned weekly
//! anchor. Final hidden states are projected to queries that attend over a
//! learnable prototype bank; a contrastive loss separates prototypes and a
//! deviation loss keeps query-space distances consistent with
//! prototype-space distances. The prototype-augmented states build an
//! adaptive graph for a GCRU decoder.

pub mod anchor;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gcru;
pub mod graph;
pub mod inspect;
pub mod losses;
pub mod model;
pub mod par;
pub mod prototype;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Gradients, Graph, OpKind, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
