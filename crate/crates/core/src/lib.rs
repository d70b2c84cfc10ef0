//! Desk-scale simulation laboratory for the side-channel security margins of
//! partially masked (inverse-)NTT hardware.
//!
//! The crate is organized around the states of a Gentleman–Sande inverse-NTT
//! butterfly cascade:
//!
//! * [`field`] — prime-field arithmetic, twiddle schedules, and layered
//!   cascade traces for the ML-KEM parameter set and smaller toy instances.
//! * [`graph`] — the cascade as a factor graph, observability topologies,
//!   necessary-condition analysis for masking gaps, and treewidth bounds.
//! * [`channel`] — the wrapped-Gaussian observation channel, per-layer
//!   mutual-information estimates, and genie-aided information bounds.
//! * [`bp`] — loopy sum-product belief propagation over the cascade graph,
//!   exact enumeration oracles for small instances, and key-rank search.
//! * [`shuffle`] — restricted-shuffling orderings, permutation entropy, and
//!   an analytic CPA trace-overhead model with position-bias collapse.
//! * [`tvla`] — synthetic leakage traces, Welch fixed-vs-random t-tests, and
//!   SNR estimation.
//! * [`margin`] — information budgets, attack-scenario margin arithmetic,
//!   composite attack-work tables, and the lattice-gate interpolation table.
//! * [`harness`] — seeded Monte Carlo experiment drivers (SNR sweeps, layer
//!   ablations, convergence trajectories, no-first-layer campaigns).
//! * [`stats`] — binomial interval estimators shared by the harness.
//!
//! Heavy inner loops (factor updates within a BP iteration, Monte Carlo
//! sampling, trace generation) run data-parallel on rayon when the default
//! `parallel` feature is enabled and fall back to equivalent sequential code
//! without it. All results are independent of thread count: parallel sections
//! write disjoint, index-addressed output and every floating-point reduction
//! is performed sequentially.

pub mod bp;
pub mod channel;
pub mod error;
pub mod field;
pub mod graph;
pub mod harness;
pub mod margin;
pub mod par;
pub mod shuffle;
pub mod stats;
pub mod tvla;

pub use error::{Error, Result};
