//! Library surface of the CLI crate: the correspondence export format and
//! the overlay renderer, shared with the integration tests.

pub mod corr;
pub mod viz;
