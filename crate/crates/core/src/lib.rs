//! Chunk-based parallel speech-token decoding on a from-scratch toy
//! transformer, with the training, batching and evaluation machinery
//! around it.

pub mod numcore;
pub mod vocab;
pub mod speechlm;
pub mod synthdata;
pub mod decoder;
pub mod trainer;
pub mod evalkit;
pub mod infomine;
