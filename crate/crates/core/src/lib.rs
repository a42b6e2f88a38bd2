//! Whitened fixed-X knockoffs.
//!
//! A Gaussian estimate β̂ ~ N(β, σ²Σ) is split into a whitened copy
//! β̃ = β̂ + ω with diagonal covariance σ²Δ and a complement ξ that is
//! independent of β̃. An analyst orders hypotheses using (ξ, |β̃|) only and
//! Selective SeqStep then tests the signs of β̃. The crate also computes
//! the universal ceilings on how many rejections any knockoff procedure can
//! make for a given Σ, and simulates the bounds.

pub mod bounds;
pub mod covmodel;
pub mod error;
pub mod filter;
pub mod io;
pub mod linalg;
pub mod rng;
pub mod seqstep;
pub mod simulator;
pub mod special;
pub mod standard_knockoffs;
pub mod whitening;

pub use bounds::{BoundConstants, BoundReport, DeltaLowerBounds, Ell};
pub use covmodel::{CovarianceMatrix, EigenDecomposition, Family, ScenarioSpec};
pub use error::{Error, Result};
pub use filter::{FilterResult, NoiseModel, OrderingDecision, PseudoDesign, Strategy, WStatistics};
pub use seqstep::{BinaryPValueSeq, PTilde, SeqStepResult};
pub use simulator::{Method, MonteCarloConfig, PowerSummary};
pub use standard_knockoffs::KnockoffPair;
pub use whitening::{CarvedNoise, LogOddsProfile, ValidatedDelta, WhitenedSplit, WhiteningMatrix};
