//! Episodic few-shot image classification at desk scale.
//!
//! The crate trains and evaluates two episode classifiers on small images: a
//! prototypical-distance baseline over pooled embeddings, and a cross-attention
//! head that aligns query feature-map positions with support positions before
//! comparing them. Everything runs on a built-in reverse-mode autodiff core
//! (`tensor`), so the whole pipeline is self-contained and deterministic given
//! a seed.

pub mod collapse;
pub mod embedder;
pub mod episodes;
pub mod error;
pub mod evaluator;
pub mod heads;
pub mod image;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
