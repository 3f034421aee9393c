//! Smooth planar scalar fields with analytic derivatives.

use nalgebra::{Matrix2, Vector2};
use rayon::prelude::*;

use crate::levels::{EvalGrid, GridValues};

/// A twice-differentiable function on the plane.
///
/// Both the kernel estimate and the exact mixture densities implement this, so the
/// risk machinery can be fed either estimated or true fields.
pub trait PlanarField: Sync {
    fn value(&self, x: [f64; 2]) -> f64;

    fn gradient(&self, x: [f64; 2]) -> Vector2<f64>;

    fn hessian(&self, x: [f64; 2]) -> Matrix2<f64>;

    /// Values at every node of `grid`, row-major (`j * nx + i`).
    fn grid_values(&self, grid: &EvalGrid) -> GridValues {
        let [nx, ny] = grid.counts;
        let mut values = vec![0.0; nx * ny];
        values.par_chunks_mut(nx).enumerate().for_each(|(j, row)| {
            for (i, v) in row.iter_mut().enumerate() {
                *v = self.value(grid.node(i, j));
            }
        });
        GridValues::new(*grid, values)
    }
}

impl<T: PlanarField + ?Sized> PlanarField for &T {
    fn value(&self, x: [f64; 2]) -> f64 {
        (**self).value(x)
    }

    fn gradient(&self, x: [f64; 2]) -> Vector2<f64> {
        (**self).gradient(x)
    }

    fn hessian(&self, x: [f64; 2]) -> Matrix2<f64> {
        (**self).hessian(x)
    }

    fn grid_values(&self, grid: &EvalGrid) -> GridValues {
        (**self).grid_values(grid)
    }
}
