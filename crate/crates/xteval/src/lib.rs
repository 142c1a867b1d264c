//! Measures how much of a model's parametric knowledge is usable downstream:
//! extract the facts a backend predicts zero-shot, synthesize a retrieval
//! task from exactly those facts, finetune a cross-encoder on it, and report
//! the acquired-vs-usable knowledge gaps over a seed grid.

pub mod backend;
pub mod cli;
pub mod config;
pub mod eval;
pub mod extract;
pub mod kb;
pub mod optim;
pub mod orchestrate;
pub mod report;
pub mod seeding;
pub mod task;
pub mod templates;
pub mod train;
