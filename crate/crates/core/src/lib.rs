pub mod agents;
pub mod decision;
pub mod expr;
pub mod features;
pub mod kb;
pub mod orchestrator;
pub mod profiling;
pub mod trajectory;
pub mod value;
