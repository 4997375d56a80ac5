pub mod agent;
pub mod config;
pub mod env;
pub mod features;
pub mod incentive;
pub mod log;
pub mod metrics;
pub mod numerics;
pub mod parallel;
pub mod ppo;
pub mod trainer;
