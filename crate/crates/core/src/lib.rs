//! Region-based knowledge retrieval and fusion-in-decoder answering for
//! knowledge-based visual question answering, at desk scale.
//!
//! The crate is organised as one module per pipeline stage:
//!
//! - [`vecindex`] exact inner-product top-K search, single and multi-query
//! - [`rvem`] the binary embedding file format
//! - [`kb`] knowledge-base and tag vocabulary loading
//! - [`regions`] region artifacts, tag and explicit-knowledge retrieval
//! - [`prompts`] prompt and passage templates
//! - [`oracle`] implicit-knowledge oracle, mock and replay cache
//! - [`fusion`] the trainable encoder-decoder, trainer and ensemble
//! - [`eval`] answer normalization and soft accuracy
//! - [`syndata`] synthetic datasets with planted answers
//! - [`pipeline`] file-based stages behind the `regionqa` binary

pub mod eval;
pub mod fusion;
pub mod kb;
pub mod oracle;
pub mod pipeline;
pub mod prompts;
pub mod regions;
pub mod rvem;
pub mod syndata;
pub mod vecindex;
