pub mod distill;
pub mod env;
pub mod eval;
pub mod features;
pub mod llm;
pub mod policy;
pub mod repr;
pub mod rollout;
pub mod tree;
