//! Weather interpolation. (stub)
pub struct Variogram;
