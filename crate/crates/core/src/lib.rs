//! Desk-scale piano-playing robot hand: song ingestion, a planar
//! spring-hinge keyboard plant, reward shaping, F1 evaluation, domain
//! randomization, a soft actor-critic trainer and the three deployment modes.

pub mod domain_rand;
pub mod env;
pub mod exec_modes;
pub mod experiments;
pub mod keys;
pub mod metrics;
pub mod physics;
pub mod policy;
pub mod reward;
pub mod song;
