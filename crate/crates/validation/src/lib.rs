//! Acceptance checks for `certilev`, kept in their own package so that the
//! workspace test run reaches them after every other suite. The checks live
//! in `tests/acceptance.rs`; run them alone with
//! `cargo test -p certilev-validation --test acceptance`.
