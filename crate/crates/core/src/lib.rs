//! Distributed stochastic-learning simulators and their closed-form rate
//! predictors.
//!
//! A network of `N` agents minimizes a common strongly convex risk from
//! streaming data under a diminishing step size `mu/i`. The crate provides
//! the network layer ([`netgraph`]), two risk models ([`models`]), four
//! update strategies ([`strategies`]), asymptotic excess-risk predictors
//! ([`theory`]), and a seeded Monte Carlo harness ([`harness`]) that turns
//! all of it into learning curves with common random numbers across
//! strategies.

pub mod harness;
pub mod models;
pub mod netgraph;
pub mod selftest;
pub mod strategies;
pub mod theory;
