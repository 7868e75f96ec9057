//! Blind source separation with neural FastFCA.
//!
//! The crate bundles a jointly-diagonalizable spatial model driven either by
//! a trained inference/decoder network pair (`neural`) or by the classical
//! NMF source model (`fastmnmf`), together with the pieces needed to build
//! and score experiments: STFT and WAV handling (`dsp`), small complex
//! linear algebra (`linalg`), an image-method room simulator (`scenesim`) and
//! evaluation/pipeline tooling (`harness`).

pub mod autodiff;
pub mod container;
pub mod dsp;
pub mod fastmnmf;
pub mod harness;
pub mod linalg;
pub mod neural;
pub mod scenesim;
pub mod spatial;

pub use autodiff::{Graph, ParamStore, Tensor, Var};
