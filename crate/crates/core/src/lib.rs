//! Dual-level cancelable biometric template protection.
//!
//! The pipeline has two independent protection layers:
//!
//! 1. [`cancelable`] turns a real-valued feature vector into a revocable
//!    binary template via a seeded orthonormal random projection followed by
//!    median binarization. The projection seed is the first-level token.
//! 2. [`ndb`] hides that binary template inside a K-hidden negative database
//!    (a set of ternary strings over `{0,1,*}` that never contains the
//!    template itself). The generation seed is the second-level token.
//!    Verification matches a query template against the negative database
//!    with an exact integer kernel; the stored form is useless as a query.
//!
//! [`security`] analyzes when reversing a negative database by local search
//! is hard and ships an empirical local-search attacker, [`eval`] provides
//! verification metrics (EER, ROC, score distributions, unlinkability), and
//! [`store`] persists enrollment records that contain only second-level data.

pub mod cancelable;
pub mod error;
pub mod eval;
pub mod features;
pub mod losses;
pub mod ndb;
pub mod rng;
pub mod security;
pub mod store;

pub use error::{Error, Result};
