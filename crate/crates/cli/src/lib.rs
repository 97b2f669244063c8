pub mod backend;
pub mod dataset;
pub mod evaluate;
pub mod extract;
pub mod output;
pub mod serve;
pub mod sweep;
