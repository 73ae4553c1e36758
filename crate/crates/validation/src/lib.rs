//! Acceptance checks live in `tests/acceptance.rs`; run them with
//! `cargo test -p fsv-vb-validation --test acceptance`.
