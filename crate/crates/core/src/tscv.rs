//! Rolling-origin cross validation. (stub)
