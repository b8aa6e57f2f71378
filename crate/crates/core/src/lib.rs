//! Self-supervised representation learning by automatic colorization.
//!
//! A small reverse-mode autodiff engine drives convolutional networks that
//! learn to predict color from intensity; the learned trunks are then
//! transferred to classification and segmentation.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::should_implement_trait, clippy::needless_range_loop, clippy::type_complexity)]

pub mod analysis;
pub mod checkpoint;
pub mod cli;
pub mod colorspace;
pub mod config;
pub mod data;
pub mod error;
pub mod labelspace;
pub mod losses;
pub mod model;
pub mod pretrain;
pub mod seeding;
pub mod targets;
pub mod tensor;
pub mod transfer;

pub use error::{Error, Result};
