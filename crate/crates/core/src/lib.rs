pub mod config;
pub mod corpus;
pub mod experiment;
pub mod graph;
pub mod intent;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod propagation;
pub mod tensor;
