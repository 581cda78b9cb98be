//! File formats, live HTTP backends and the `lmkex` command line on top of
//! [`lmkex_core`].

pub mod files;
pub mod http;
pub mod config;
pub mod cli;
