//! Template-memorization auditing for black-box text-to-image endpoints.
//!
//! The pipeline: [`prompt_forge`] expands collocation grids, [`providers`]
//! generates seeded batches into the [`store`], [`percept`] masks the
//! editable region and embeds, [`detect`] finds cliques of near-identical
//! generations, [`analyze`] classifies them, and [`triage`] records analyst
//! verdicts. [`pipeline`] wires the stages together.

pub mod analyze;
pub mod config;
pub mod detect;
pub mod imaging;
pub mod pipeline;
pub mod percept;
pub mod prompt_forge;
pub mod providers;
pub mod store;
pub mod synthcorpus;
pub mod transport;
pub mod triage;
pub mod verify;
