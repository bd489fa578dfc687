//! Few-shot species range estimation.

pub mod diffcore;
pub mod geo;
pub mod model;
pub mod data;
pub mod train;
pub mod fewshot;
pub mod eval;
pub mod benchmark;
