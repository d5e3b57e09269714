//! A desk-scale laboratory for layout-token language modeling.
//!
//! Documents arrive as OCR-parsed text segments with bounding boxes. This
//! crate compresses each segment's box into a single learned layout token,
//! interleaves those tokens with the text, shares position ids so layout
//! costs nothing from the position budget, and trains a small transformer
//! with a mixed next-token objective (cross-entropy for text targets,
//! coordinate regression for layout targets). Alongside the model it ships
//! the serialization-overhead arithmetic that motivates the design, a
//! synthetic corpus generator whose answers genuinely require layout, and a
//! training/evaluation harness with an ablation sweep.
//!
//! See the `book/` directory for a guided tour; its code snippets compile
//! and run as doc-tests of this crate.

pub mod ablate;
pub mod checkpoint;
pub mod cli;
pub mod doc;
pub mod error;
pub mod eval;
pub mod formats;
pub mod layout;
pub mod nn;
pub mod ntlp;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
