//! Command implementations behind the `dart` binary.
