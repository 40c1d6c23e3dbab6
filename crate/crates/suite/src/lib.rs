//! Holds the acceptance harness under `tests/`; there is no library code.
