//! Semantic-guided low-rank adapter generation.
//!
//! The crate routes an unseen task's embedding against a repository of
//! expert adapters, fuses the nearest experts into a Gaussian prior over
//! adapter parameters, and conditions a variational generator on that prior.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod adapters;
pub mod cvae;
pub mod error;
pub mod numkit;
pub mod repository;
pub mod router;
pub mod semantics;
pub mod synthbench;

pub use error::{Error, Result};
pub use numkit::Scalar;

pub type Matrix32 = numkit::Matrix<f32>;
pub type Matrix64 = numkit::Matrix<f64>;
pub type AdapterSet32 = adapters::AdapterSet<f32>;
pub type AdapterSet64 = adapters::AdapterSet<f64>;
pub type ExpertEntry32 = repository::ExpertEntry<f32>;
pub type ExpertEntry64 = repository::ExpertEntry<f64>;
pub type SemanticPrior32 = router::SemanticPrior<f32>;
pub type SemanticPrior64 = router::SemanticPrior<f64>;
pub type CvaeModel32 = cvae::CvaeModel<f32>;
pub type CvaeModel64 = cvae::CvaeModel<f64>;
