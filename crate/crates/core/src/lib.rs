//! Extracting task knowledge from language models for a learning agent.
//!
//! The crate is `no_std` (with `alloc`) and contains every algorithmic part
//! of the pipeline: the knowledge store, the usage model, prompt
//! construction, LM backend abstraction with a scripted backend,
//! interpretation, verification and the extraction controller. IO, file
//! formats, HTTP and the command line live in the `lmkex` crate.

#![cfg_attr(not(test), no_std)]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod backend;
pub mod controller;
pub mod interpret;
pub mod model;
pub mod prompt;
pub mod store;
pub mod term;
pub mod usage;
pub mod verify;
