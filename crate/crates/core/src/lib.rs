//! Chunkwise context-preserving ingestion for retrieval-augmented generation.
//!
//! The pipeline splits a stitched corpus into fixed-size chunks, gives each
//! chunk a Category/Nouns/Model signature (extracted by a language model or
//! inherited from its predecessor when the two are judged continuous),
//! prefixes the signature to the chunk text, embeds the result and stores it
//! in a cosine-similarity vector store. Two baseline chunkers and an
//! evaluation kit are included for comparison runs.

pub mod cnm;
pub mod composer;
pub mod continuity;
pub mod corpus;
pub mod evalkit;
pub mod llm_gateway;
pub mod pipeline;
pub mod prompts;
pub mod vecstore;
pub mod tokenize;
