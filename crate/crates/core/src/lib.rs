//! Allograph-aware masked language modeling for fragmentary inscriptions.

pub mod api;
pub mod corpus;
pub mod encoder;
pub mod glyphnet;
pub mod masking;
pub mod objectives;
pub mod seeds;
pub mod trainer;
pub mod evaluation;
pub mod decode;
pub mod checkpoint;
pub mod files;
pub mod pipeline;
pub mod synth;
