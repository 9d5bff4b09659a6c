//! Host crate for the `acceptance` test target. Run it with
//! `cargo test -p diffopf-system-tests --test acceptance`.
