pub mod catalog;
pub mod clock;
pub mod decoupler;
pub mod metrics;
pub mod miniloader;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod scheduler;
pub mod workload;
