//! Holds the `acceptance` test target. Run it with
//! `cargo test -p mde-validation --test acceptance`; `ACCEPTANCE_TASKS`
//! shrinks the editing suite for quick local runs.
