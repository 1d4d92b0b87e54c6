//! Grounded question answering over dense video events.
//!
//! The pipeline captions a video at several temporal scales, keeps those
//! captions together with 1 fps frame embeddings in a per-question event
//! memory, and asks a reasoner to pick an answer and the span that supports
//! it. Each prediction is checked by comparing the chosen answer's text
//! embedding with the pooled frame embedding of the predicted span; low
//! agreement triggers a verification round.
//!
//! Alongside the pipeline live the grounded-QA metrics ([`evalkit`]) and the
//! multiple-choice dataset builder ([`dataset`]).

pub mod backends;
pub mod captioner;
pub mod dataset;
pub mod evalkit;
pub mod grounder;
pub mod memory;
pub mod prompts;
pub mod timeline;
