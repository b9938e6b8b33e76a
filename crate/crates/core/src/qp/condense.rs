use nalgebra::{DMatrix, DVector};

use crate::dynamics::DiscreteModel;

/// Predicted states `x(1) … x(N)` stacked as `free + gamma · u`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub nx: usize,
    pub horizon: usize,
    /// Response to the initial state, disturbances and affine offsets.
    pub free: DVector<f64>,
    /// Sensitivity of the stacked states to the input sequence.
    pub gamma: DMatrix<f64>,
}

impl Prediction {
    /// Row index of state component `i` at step `k` (1-based in time).
    pub fn index(&self, k: usize, i: usize) -> usize {
        debug_assert!(k >= 1 && k <= self.horizon && i < self.nx);
        (k - 1) * self.nx + i
    }

    /// State `x(k)` for the input sequence `u`.
    pub fn state(&self, k: usize, u: &DVector<f64>) -> DVector<f64> {
        let rows = (k - 1) * self.nx;
        self.free.rows(rows, self.nx) + self.gamma.rows(rows, self.nx) * u
    }
}

/// Eliminates the states from the prediction model.
///
/// `models` holds one model per step or a single model reused over the
/// horizon; `preview` holds the disturbance for each step (ignored for
/// models without a disturbance input).
#[allow(clippy::needless_range_loop)]
pub fn condense(models: &[DiscreteModel], horizon: usize, x0: &DVector<f64>, preview: &[DVector<f64>]) -> Prediction {
    assert!(horizon >= 1, "horizon must be at least one step");
    assert!(models.len() == 1 || models.len() == horizon, "one model or one per step");
    let model = |k: usize| if models.len() == 1 { &models[0] } else { &models[k] };
    let nx = models[0].nx();

    let mut free = DVector::zeros(horizon * nx);
    let mut x = x0.clone();
    for k in 0..horizon {
        let m = model(k);
        let w = m.e.as_ref().map(|_| &preview[k]);
        x = m.apply(&x, 0.0, w);
        free.rows_mut(k * nx, nx).copy_from(&x);
    }

    let mut gamma = DMatrix::zeros(horizon * nx, horizon);
    for j in 0..horizon {
        let mut col = model(j).b.clone();
        gamma.view_mut((j * nx, j), (nx, 1)).copy_from(&col);
        for k in (j + 1)..horizon {
            col = &model(k).a * col;
            gamma.view_mut((k * nx, j), (nx, 1)).copy_from(&col);
        }
    }
    Prediction { nx, horizon, free, gamma }
}
