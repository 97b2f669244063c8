pub mod backend;
pub mod triplet;
pub mod constraint;
pub mod decoder;
pub mod scoring;
pub mod prompt;
pub mod ontology;
pub mod eval;
pub mod stats;
