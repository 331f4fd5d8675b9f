//! Attaches every book chapter as a doc-test so the snippets in the guide
//! compile and run against the current API.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod book_introduction {}

#[doc = include_str!("../../../book/src/signal-model.md")]
pub mod book_signal_model {}

#[doc = include_str!("../../../book/src/dereverberation.md")]
pub mod book_dereverberation {}

#[doc = include_str!("../../../book/src/mixture-model.md")]
pub mod book_mixture_model {}

#[doc = include_str!("../../../book/src/block-online.md")]
pub mod book_block_online {}

#[doc = include_str!("../../../book/src/beamforming.md")]
pub mod book_beamforming {}

#[doc = include_str!("../../../book/src/offline-pipeline.md")]
pub mod book_offline_pipeline {}

#[doc = include_str!("../../../book/src/scenes-and-scoring.md")]
pub mod book_scenes_and_scoring {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod book_cli {}

#[doc = include_str!("../../../book/src/verification.md")]
pub mod book_verification {}
