//! Command-line pipeline around `gaitmoe-core`.
