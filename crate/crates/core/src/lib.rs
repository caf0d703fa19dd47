pub mod classify;
pub mod dataset;
pub mod ensemble;
pub mod envelope;
pub mod esae;
pub mod experiment;
pub mod linalg;
