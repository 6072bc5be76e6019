//! Controllers, noise schedule, quantisation loss, optimiser and the search loop.

mod adam;
mod controller;
mod qloss;
mod search;
pub mod train;

pub use adam::{optimiser_step, Adam, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use controller::{argmax, random_choices, sample_choices, Controller, NoiseSchedule, EMBEDDING_DIM};
pub use qloss::{expected_bits, qloss};
pub use search::{search, EpochLog, Search, SearchConfig, SearchResult};
