//! Trainable query-side projection over frozen base embeddings.

use crate::index::QueryVector;
use crate::trainer::TrainError;

/// Affine map q' = W q + b applied to base query embeddings. The document
/// side stays frozen; this is the only trainable state.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryProjection {
    dim: usize,
    /// Row-major dim x dim.
    weight: Vec<f64>,
    bias: Vec<f64>,
}

/// Gradient with the same shape as the projection.
#[derive(Debug, Clone)]
pub struct ProjectionGradient {
    pub d_weight: Vec<f64>,
    pub d_bias: Vec<f64>,
}

impl ProjectionGradient {
    pub fn zeros(dim: usize) -> Self {
        Self {
            d_weight: vec![0.0; dim * dim],
            d_bias: vec![0.0; dim],
        }
    }

    pub fn add_assign(&mut self, other: &ProjectionGradient) {
        for (a, b) in self.d_weight.iter_mut().zip(&other.d_weight) {
            *a += b;
        }
        for (a, b) in self.d_bias.iter_mut().zip(&other.d_bias) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.d_weight {
            *v *= factor;
        }
        for v in &mut self.d_bias {
            *v *= factor;
        }
    }

    /// Chain a loss gradient w.r.t. the projected query through the affine
    /// map: d_weight = dq' ⊗ base, d_bias = dq'.
    pub fn from_query_grad(d_query: &[f64], base: &[f32]) -> Self {
        let dim = d_query.len();
        let mut d_weight = vec![0.0; dim * dim];
        for (r, dq) in d_query.iter().enumerate() {
            for (c, b) in base.iter().enumerate() {
                d_weight[r * dim + c] = dq * f64::from(*b);
            }
        }
        Self {
            d_weight,
            d_bias: d_query.to_vec(),
        }
    }
}

impl QueryProjection {
    /// Identity weight, zero bias: projects every query to itself.
    pub fn identity(dim: usize) -> Self {
        let mut weight = vec![0.0; dim * dim];
        for i in 0..dim {
            weight[i * dim + i] = 1.0;
        }
        Self {
            dim,
            weight,
            bias: vec![0.0; dim],
        }
    }

    pub fn from_parts(dim: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self, TrainError> {
        if weight.len() != dim * dim || bias.len() != dim {
            return Err(TrainError::Shape(format!(
                "projection parts mismatch: dim {dim}, weight {}, bias {}",
                weight.len(),
                bias.len()
            )));
        }
        if weight.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(TrainError::Shape("projection contains non-finite values".into()));
        }
        Ok(Self { dim, weight, bias })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weight(&self) -> &[f64] {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    /// q' = W q + b in f64; the training forward path.
    pub fn apply_f64(&self, base: &[f32]) -> Result<Vec<f64>, TrainError> {
        if base.len() != self.dim {
            return Err(TrainError::Shape(format!(
                "base query has dim {}, projection has dim {}",
                base.len(),
                self.dim
            )));
        }
        let mut out = Vec::with_capacity(self.dim);
        for r in 0..self.dim {
            let mut acc = self.bias[r];
            let row = &self.weight[r * self.dim..(r + 1) * self.dim];
            for (w, q) in row.iter().zip(base) {
                acc += w * f64::from(*q);
            }
            out.push(acc);
        }
        Ok(out)
    }

    /// Projected query as a search vector (f32).
    pub fn apply(&self, base: &QueryVector) -> Result<QueryVector, TrainError> {
        let projected = self.apply_f64(&base.values)?;
        Ok(QueryVector::new(projected.into_iter().map(|v| v as f32).collect()))
    }

    pub fn weight_mut(&mut self) -> &mut [f64] {
        &mut self.weight
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    /// Mutable flat views used by the optimizer: weight then bias.
    pub(crate) fn params_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (&mut self.weight, &mut self.bias)
    }
}
