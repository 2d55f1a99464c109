//! Experiment atlases: decide whether a target experiment can be composed
//! from nearby prior experiments, predict its effect from theirs, and route
//! it to a link, a conflict or a gap.

pub mod archive;
pub mod atlas;
pub mod composer;
pub mod evaluator;
pub mod generators;
pub mod representation;
pub mod theory_lab;
