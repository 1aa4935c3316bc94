//! Holds the `acceptance` test target, which runs each release criterion
//! end to end and prints one pass/fail line per criterion:
//!
//! ```text
//! cargo test -p rrpoll-acceptance --test acceptance
//! ```
