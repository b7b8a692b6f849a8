//! Harmonisation and confidentiality-preserving products for origin-destination
//! matrix (ODM) feeds from heterogeneous mobile network operators.
//!
//! A run ingests provider CSVs through per-provider profiles, gates each feed
//! on a reasonability audit, maps zones and time windows to a common NUTS
//! denominator, suppresses small counts, and derives daily mobility
//! indicators, weekly connectivity matrices, anomaly flags and persistent
//! mobility functional areas. [`synth`] generates scenarios with a known
//! ground truth and [`pipeline::run_pipeline`] ties the stages together.

pub mod ingest;
pub mod time;
pub mod harmonise;
pub mod privacy;
pub mod products;
pub mod mfa;
pub mod synth;
pub mod pipeline;
pub mod cli;
