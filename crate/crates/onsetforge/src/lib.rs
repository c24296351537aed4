//! Polyphonic piano note-onset transcription with procedurally generated
//! training data.
//!
//! The toolkit covers the full pipeline: a constant-Q transform ([`cqt`]),
//! per-note spectral bases ([`basis`]), procedural generation of labeled
//! training windows ([`datagen`]), a small feed-forward network with a
//! masked ternary loss ([`network`]), sliding-window decoding into timed
//! note events ([`decoder`]), and note-matching plus ternary-confusion
//! scoring ([`eval`]).

pub mod audio;
pub mod basis;
pub mod cqt;
pub mod datagen;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod network;
pub mod render;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};

// The guide's code blocks run as doc-tests so the book cannot drift from
// the library. mdBook renders the same files from book/.
#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/cqt.md")]
    pub mod cqt {}
    #[doc = include_str!("../../../book/src/spectral-bases.md")]
    pub mod spectral_bases {}
    #[doc = include_str!("../../../book/src/data-generation.md")]
    pub mod data_generation {}
    #[doc = include_str!("../../../book/src/network.md")]
    pub mod network {}
    #[doc = include_str!("../../../book/src/decoding.md")]
    pub mod decoding {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    pub mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod cli {}
}
