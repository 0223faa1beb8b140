//! Holds the `acceptance` test target, which trains on the synthetic world and
//! prints one PASS/FAIL line per numbered criterion. It lives in its own
//! package so that a failing criterion does not stop cargo before the other
//! test targets of the workspace have run.
