//! Acceptance suite for `quantlearn`; the checks live in `tests/acceptance.rs`.
