//! Holds the `acceptance` test target. Run it with
//! `cargo test -p persona-policy-validation --test acceptance`.
