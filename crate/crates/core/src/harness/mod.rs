//! Self-contained toy vision-language model: synthetic scenes, a small
//! transformer with capture and edit hooks, biased training and evaluation.

pub mod model;
pub mod pipeline;
pub mod tokenizer;
pub mod world;
pub mod eval;
pub mod train;
