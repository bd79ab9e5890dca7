//! Desk-scale chemical language model laboratory: SMILES toolkit, circular
//! fingerprints, a from-scratch encoder-decoder Transformer, the training
//! stack, translation diagnostics, and property-prediction probes.

pub mod diagnostics;
pub mod fingerprints;
pub mod model;
pub mod molgraph;
pub mod par;
pub mod synth;
pub mod tokenizer;
pub mod probe;
pub mod train;
