//! Learnable parameters and the Adagrad update with L2 and filter-diversity
//! regularization.

use super::matrix::{dot, norm, Matrix, Scalar};
use super::ops::EPSILON;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Matrix<T>,
    pub grad: Matrix<T>,
    pub accum: Matrix<T>,
    /// Convolution weights get the diversity penalty on their rows.
    pub diversity: bool,
}

/// All learnable parameters of a model plus their optimizer state.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<T> {
    params: Vec<Parameter<T>>,
    steps: u64,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            params: Vec::new(),
            steps: 0,
        }
    }

    pub fn add(&mut self, name: &str, value: Matrix<T>, diversity: bool) -> ParamId {
        let grad = Matrix::zeros(value.rows(), value.cols());
        let accum = grad.clone();
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            grad,
            accum,
            diversity,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Matrix<T> {
        &self.params[id.0].value
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill_zero();
        }
    }

    /// Number of optimizer steps applied so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One Adagrad step over every parameter.
    ///
    /// The effective gradient is the accumulated task gradient plus
    /// `l2_weight * value` everywhere and, on diversity-flagged parameters,
    /// `div_weight` times the gradient of the pairwise-row penalty. Then per
    /// coordinate: `accum += g^2; value -= lr * g / (sqrt(accum) + eps)`.
    /// Gradients are cleared afterwards. A non-finite gradient aborts the
    /// step before any parameter is touched.
    pub fn adagrad_step(&mut self, lr: T, l2_weight: T, div_weight: T) -> Result<()> {
        for p in &self.params {
            if !p.grad.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite gradient on parameter {:?} at step {}",
                    p.name, self.steps
                )));
            }
        }
        let eps = T::from_f64(EPSILON);
        for p in &mut self.params {
            let div_grad = if p.diversity && div_weight != T::zero() {
                Some(diversity_penalty_grad(&p.value))
            } else {
                None
            };
            let rows = p.value.rows();
            let cols = p.value.cols();
            for r in 0..rows {
                for c in 0..cols {
                    let mut g = p.grad.get(r, c);
                    if l2_weight != T::zero() {
                        g += l2_weight * p.value.get(r, c);
                    }
                    if let Some(dg) = &div_grad {
                        g += div_weight * dg.get(r, c);
                    }
                    let acc = p.accum.get(r, c) + g * g;
                    p.accum.set(r, c, acc);
                    let step = lr * g / (acc.sqrt() + eps);
                    p.value.set(r, c, p.value.get(r, c) - step);
                }
            }
            p.grad.fill_zero();
        }
        self.steps += 1;
        Ok(())
    }
}

/// Mean squared cosine over unordered row pairs; zero iff the rows are
/// pairwise orthogonal, one when all rows coincide.
pub fn diversity_penalty<T: Scalar>(w: &Matrix<T>) -> T {
    let rows = w.rows();
    assert!(rows >= 2, "diversity penalty needs at least two rows");
    let eps = T::from_f64(EPSILON);
    let norms: Vec<T> = (0..rows).map(|r| norm(w.row(r))).collect();
    let mut total = T::zero();
    for i in 0..rows {
        for j in i + 1..rows {
            let cos = dot(w.row(i), w.row(j)) / (norms[i] * norms[j] + eps);
            total += cos * cos;
        }
    }
    let pairs = T::from_f64((rows * (rows - 1) / 2) as f64);
    total / pairs
}

/// Analytic gradient of [`diversity_penalty`] with respect to `w`.
pub fn diversity_penalty_grad<T: Scalar>(w: &Matrix<T>) -> Matrix<T> {
    let rows = w.rows();
    assert!(rows >= 2, "diversity penalty needs at least two rows");
    let eps = T::from_f64(EPSILON);
    let norms: Vec<T> = (0..rows).map(|r| norm(w.row(r))).collect();
    let pairs = T::from_f64((rows * (rows - 1) / 2) as f64);
    let mut grad = Matrix::zeros(rows, w.cols());
    for i in 0..rows {
        for j in i + 1..rows {
            let denom = norms[i] * norms[j] + eps;
            let d = dot(w.row(i), w.row(j));
            let cos = d / denom;
            // d(cos^2)/dw_i = 2 cos * (w_j / denom - d * n_j * w_i / (n_i * denom^2))
            let scale = T::from_f64(2.0) * cos / pairs;
            let self_i = if norms[i] > T::zero() {
                scale * (-d) * norms[j] / (norms[i] * denom * denom)
            } else {
                T::zero()
            };
            let self_j = if norms[j] > T::zero() {
                scale * (-d) * norms[i] / (norms[j] * denom * denom)
            } else {
                T::zero()
            };
            let cross = scale / denom;
            // borrow rows disjointly through raw indexing on the grad matrix
            for c in 0..w.cols() {
                let wi = w.get(i, c);
                let wj = w.get(j, c);
                grad.add_at(i, c, cross * wj + self_i * wi);
                grad.add_at(j, c, cross * wi + self_j * wj);
            }
        }
    }
    grad
}

/// Uniform initialization bound for a weight matrix: `sqrt(1 / fan_in)`
/// with `fan_in` the number of input columns.
pub fn init_bound(fan_in: usize) -> f64 {
    (1.0 / fan_in as f64).sqrt()
}
