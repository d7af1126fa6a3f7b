//! A model of a randomized-embedded-token (RET) memory-error sanitizer.
//!
//! Poisoned memory is marked by writing a per-execution nonce into the
//! memory itself instead of into disjoint shadow metadata. This crate runs
//! that scheme over an explicit [`arena::Arena`] so detection semantics and
//! copy-on-write page locality can be measured deterministically:
//!
//! - [`token`]: token layout, nonce generation, the poisoned-word predicate.
//! - [`arena`]: byte memory with dirty-page tracking and snapshot/restore.
//! - [`checker`]: the RET check and the refined boundary check.
//! - [`runtime`]: heap, stack and global allocation with redzones and quarantine.
//! - [`shadow`]: an AddressSanitizer-style shadow baseline.
//! - [`oracle`]: ground-truth classification and detection prediction.
//! - [`trace`]: the trace language, its executor and the CWE-analog suite.
//! - [`fuzz`]: a fork-server style fuzz loop over arena snapshots.
//! - [`stats`]: false-detection statistics.

pub mod arena;
pub mod checker;
pub mod fuzz;
pub mod mode;
pub mod oracle;
pub mod pages;
pub mod runtime;
pub mod shadow;
pub mod stats;
pub mod token;
pub mod trace;

pub use mode::Mode;
