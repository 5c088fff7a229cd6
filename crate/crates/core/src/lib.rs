//! Document question-answering pipeline toolkit.
//!
//! Weakly supervised QA synthesis onto document layouts, MRC window
//! construction, multi-scheme span decoding with vote fusion,
//! understanding-to-generation ensembling and answer metrics. Neural models sit
//! behind file formats; [`oracle`] supplies deterministic stand-ins.

pub mod decode;
pub mod doc;
pub mod ensemble;
pub mod error;
pub mod jsonl;
pub mod layout;
pub mod manifest;
pub mod metrics;
pub mod mrc;
pub mod oracle;
pub mod pipeline;
pub mod weaksup;

pub use error::{Error, Result};
