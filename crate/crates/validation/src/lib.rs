//! Holds the `acceptance` test target (`tests/acceptance.rs`), which reuses
//! the shared helpers in `crates/core/tests/common`. It lives in its own
//! package so `cargo test --workspace` runs it after every other suite.
