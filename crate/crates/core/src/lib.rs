//! Decision-oriented model learning for tabular Markov decision processes.
//!
//! The crate solves discretized MDPs, fits conventional predictive models
//! (expected-value and maximum-likelihood), audits whether a model's greedy
//! policy matches the true optimal policy, and constructs models that do.
//!
//! ```
//! use dom_lab::mdp::{solve_mdp, SolveOptions};
//! use dom_lab::scenarios::random_mdp;
//!
//! let mdp = random_mdp(7, 4, 2).unwrap();
//! let sol = solve_mdp(&mdp, SolveOptions::default()).unwrap();
//! for s in 0..4 {
//!     assert_eq!(sol.advantage[(s, sol.policy[s])], 0.0);
//! }
//! ```

pub mod cli;
pub mod error;
pub mod grid;
pub mod mdp;
pub mod models;
pub mod optimality;
pub mod scenarios;
pub mod synthesis;
pub mod table;

pub use error::{Error, Result};
