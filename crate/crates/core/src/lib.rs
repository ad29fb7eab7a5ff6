//! Centralized borrower–lender matching: an exact solver for the
//! blocking-pair-penalized many-to-one matching program, a UCB loop in which
//! lenders learn from sampled rewards, and regret accounting against the
//! combined-utility optimum.

// Matrix code reads clearer with explicit indices.
#![allow(clippy::needless_range_loop)]

pub mod bandit;
pub mod check;
pub mod cli;
pub mod config;
pub mod experiment;
pub mod io;
pub mod lp;
pub mod model;
pub mod oracle;
pub mod sim;
pub mod solver;
