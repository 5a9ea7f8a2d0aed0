//! Syntax-guided paraphrase generation.
//!
//! Two small Transformer-style models cooperate to paraphrase a sentence
//! under explicit syntactic control: a *syntax expander* grows a shallow
//! template constituency parse into a full parse tree tailored to the
//! source sentence, and a *guided text generator* produces the target
//! text from that parse plus the source text. The decoder of each model
//! attends to its two encoders through multi-encoder attention, and the
//! generator's syntax encoder replaces self-attention with path
//! attention, which confines information flow to root-to-leaf paths.
//!
//! The crate is self-contained: a dense-tensor core with reverse-mode
//! differentiation and a finite-difference oracle, constituency-tree
//! utilities with a compact node-level linearization, training and greedy
//! decoding, evaluation metrics (tree edit distance family, BLEU), corpus
//! ingestion with BPE subword tokenization, and a CLI tying it together.

pub mod attention;
pub mod cli;
pub mod data;
pub mod decode;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod par;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod tree;
pub mod verify;

pub use tensor::{Graph, ParamId, ParamStore, Tensor, TensorError, Var};
pub use tree::{LinearParse, ParseTree, PathSet, TreeError};
