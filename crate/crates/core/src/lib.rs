//! Variance-reduced forward-backward splitting for finite-sum monotone inclusions.
//!
//! The problem is `0 ∈ A(x) + (1/n) Σᵢ Bᵢ(x)` where `A` is reached only through its
//! resolvent and each `Bᵢ` is evaluated on demand. Every solver in this crate takes the
//! step `x⁺ = J_{γA}(x − γ𝒢)` with a proxy-based estimator `𝒢 = B_I(x) − φ_I + φ̄`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod async_sim;
pub mod catalyst;
pub mod error;
pub mod linalg;
pub mod operators;
pub mod problems;
pub mod proxy;
pub mod solver;

pub use async_sim::{run_async, AsyncConfig, AsyncErrorReport, DelayModel};
pub use catalyst::{run_catalyst, CatalystConfig, InnerStop, SigmaPolicy};
pub use error::{Error, Result};
pub use linalg::{Matrix, Vector};
pub use operators::{Component, FiniteSumProblem, Resolvent};
pub use proxy::{EpochSchedule, ProbSchedule, ProxyTable, Scheme, SchemeConstants};
pub use solver::{run_fb, run_sarah, run_vr, GammaPolicy, RhoPolicy, RunConfig, Trace, TraceRow};
