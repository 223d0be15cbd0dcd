//! Pure forward implementations of the network primitives. The tape in
//! [`super::graph`] records these same computations together with the state
//! its backward pass needs; inference over frozen parameters calls them
//! directly.

use super::matrix::{dot, norm, Matrix, Scalar};

/// Numerical guard used in cosine denominators and the Adagrad root.
pub const EPSILON: f64 = 1e-8;

/// Gather embedding columns: output column `i` is `table` column
/// `indices[i]`. Panics on an out-of-range index (vocabulary bug).
pub fn embed<T: Scalar>(table: &Matrix<T>, indices: &[usize]) -> Matrix<T> {
    let d = table.rows();
    let mut out = Matrix::zeros(d, indices.len());
    for (i, &idx) in indices.iter().enumerate() {
        assert!(
            idx < table.cols(),
            "embedding index {idx} out of range for vocabulary of {}",
            table.cols()
        );
        for r in 0..d {
            out.set(r, i, table.get(r, idx));
        }
    }
    out
}

/// Copy the zero-padded input window ending at output position `j` into
/// `buf` (`n * d` entries, column-major within the window).
#[inline]
fn gather_window<T: Scalar>(input: &Matrix<T>, j: usize, width: usize, buf: &mut [T]) {
    let d = input.rows();
    let s = input.cols();
    for (w, chunk) in buf.chunks_exact_mut(d).enumerate() {
        // input column index for the w-th entry of the window
        let p = j as isize - (width as isize - 1) + w as isize;
        if p < 0 || p as usize >= s {
            chunk.fill(T::zero());
        } else {
            input.col_to(p as usize, chunk);
        }
    }
}

/// Wide convolution with tanh: output column `j` (of `s + width - 1`) is
/// `tanh(W * c_j + b)` where `c_j` concatenates `width` consecutive input
/// columns under zero padding. `w` is `d x (width * d)`, `b` is `d x 1`.
pub fn conv_tanh<T: Scalar>(w: &Matrix<T>, b: &Matrix<T>, input: &Matrix<T>, width: usize) -> Matrix<T> {
    let d = input.rows();
    assert!(width >= 1, "filter width must be at least 1");
    assert_eq!(w.rows(), d, "conv weight rows must match input dimensionality");
    assert_eq!(w.cols(), width * d, "conv weight cols must be width * d");
    assert_eq!(b.rows(), d, "conv bias must be d x 1");
    assert_eq!(b.cols(), 1);
    let m = input.cols() + width - 1;
    let mut out = Matrix::zeros(d, m);
    let mut window = vec![T::zero(); width * d];
    for j in 0..m {
        gather_window(input, j, width, &mut window);
        for r in 0..d {
            let z = dot(w.row(r), &window) + b.get(r, 0);
            out.set(r, j, z.tanh());
        }
    }
    out
}

/// Row-wise max with per-row argmax columns; ties pick the smallest column.
/// Panics when the input has no columns.
pub fn max_rows<T: Scalar>(f: &Matrix<T>) -> (Vec<T>, Vec<usize>) {
    assert!(f.cols() >= 1, "maxpool requires at least one column");
    let mut values = Vec::with_capacity(f.rows());
    let mut argmax = Vec::with_capacity(f.rows());
    for r in 0..f.rows() {
        let row = f.row(r);
        let mut best = row[0];
        let mut best_c = 0;
        for (c, &v) in row.iter().enumerate().skip(1) {
            if v > best {
                best = v;
                best_c = c;
            }
        }
        values.push(best);
        argmax.push(best_c);
    }
    (values, argmax)
}

/// Row-wise mean.
pub fn mean_rows<T: Scalar>(f: &Matrix<T>) -> Vec<T> {
    assert!(f.cols() >= 1, "mean pooling requires at least one column");
    let inv = T::one() / T::from_f64(f.cols() as f64);
    (0..f.rows()).map(|r| f.row(r).iter().fold(T::zero(), |acc, &v| acc + v) * inv).collect()
}

/// Cosine similarity with an epsilon-guarded denominator; also returns the
/// parts the backward pass reuses.
pub fn cosine_parts<T: Scalar>(u: &[T], v: &[T]) -> (T, T, T, T) {
    let d = dot(u, v);
    let nu = norm(u);
    let nv = norm(v);
    let denom = nu * nv + T::from_f64(EPSILON);
    (d / denom, d, nu, nv)
}

pub fn cosine<T: Scalar>(u: &[T], v: &[T]) -> T {
    cosine_parts(u, v).0
}

/// Margin ranking loss `max(0, margin + s_neg - s_pos)`. The score
/// difference is taken first, so identical scores cancel exactly.
pub fn hinge_rank_loss<T: Scalar>(margin: T, s_pos: T, s_neg: T) -> T {
    (margin + (s_neg - s_pos)).max(T::zero())
}

/// Cosine of `v` against every column of `f`.
pub fn col_cosines<T: Scalar>(f: &Matrix<T>, v: &[T]) -> Vec<T> {
    let mut col = vec![T::zero(); f.rows()];
    (0..f.cols())
        .map(|c| {
            f.col_to(c, &mut col);
            cosine(&col, v)
        })
        .collect()
}

/// Decay weights for attentive maxpooling: negatives clamp to zero and
/// positives are divided by the largest cosine. When no cosine is positive
/// the decay degenerates to all ones (attentive pooling then equals plain
/// maxpooling).
pub fn decay_weights<T: Scalar>(cosines: &[T]) -> Vec<T> {
    let max = cosines.iter().cloned().fold(T::zero(), T::max);
    if max <= T::zero() {
        return vec![T::one(); cosines.len()];
    }
    cosines.iter().map(|&s| s.max(T::zero()) / max).collect()
}

/// Attentive maxpooling: cosine-attend the feature map against `v_p`,
/// reweight columns by the decay, locate each row's maximum in the decayed
/// map, and return the ORIGINAL feature values at those coordinates.
pub fn attentive_maxpool<T: Scalar>(f: &Matrix<T>, v_p: &[T]) -> (Vec<T>, Vec<usize>) {
    assert!(f.cols() >= 1, "attentive maxpool requires at least one column");
    let decay = decay_weights(&col_cosines(f, v_p));
    let mut values = Vec::with_capacity(f.rows());
    let mut selected = Vec::with_capacity(f.rows());
    for r in 0..f.rows() {
        let row = f.row(r);
        let mut best = row[0] * decay[0];
        let mut best_c = 0;
        for c in 1..row.len() {
            let v = row[c] * decay[c];
            if v > best {
                best = v;
                best_c = c;
            }
        }
        values.push(row[best_c]);
        selected.push(best_c);
    }
    (values, selected)
}

/// Weighted column average `F w / sum(w)`; falls back to the unweighted
/// mean when the weight sum vanishes.
pub fn weighted_mean_cols<T: Scalar>(f: &Matrix<T>, weights: &[T]) -> (Vec<T>, bool) {
    assert_eq!(weights.len(), f.cols());
    let wsum = weights.iter().fold(T::zero(), |acc, &w| acc + w);
    if wsum.abs() < T::from_f64(1e-12) {
        return (mean_rows(f), true);
    }
    let out = (0..f.rows())
        .map(|r| dot(f.row(r), weights) / wsum)
        .collect();
    (out, false)
}

/// Column indices of the `k` largest weights (ties toward smaller index),
/// returned in ascending column order. `k >= m` selects every column.
pub fn top_k_columns<T: Scalar>(weights: &[T], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        weights[b]
            .partial_cmp(&weights[a])
            .expect("attention weights are finite")
            .then(a.cmp(&b))
    });
    order.truncate(k.min(weights.len()));
    order.sort_unstable();
    order
}

/// Row-wise max restricted to the given columns; ties pick the earliest
/// listed column. Returns values plus the selected column per row.
pub fn max_rows_over<T: Scalar>(f: &Matrix<T>, cols: &[usize]) -> (Vec<T>, Vec<usize>) {
    assert!(!cols.is_empty(), "column subset must be nonempty");
    let mut values = Vec::with_capacity(f.rows());
    let mut argmax = Vec::with_capacity(f.rows());
    for r in 0..f.rows() {
        let row = f.row(r);
        let mut best = row[cols[0]];
        let mut best_c = cols[0];
        for &c in &cols[1..] {
            if row[c] > best {
                best = row[c];
                best_c = c;
            }
        }
        values.push(best);
        argmax.push(best_c);
    }
    (values, argmax)
}

/// Bilinear attention scores `tanh(v^T U F[:,i])` for every column.
pub fn bilinear_tanh_scores<T: Scalar>(v: &[T], u: &Matrix<T>, f: &Matrix<T>) -> Vec<T> {
    assert_eq!(u.rows(), v.len());
    assert_eq!(u.cols(), f.rows());
    // z_i = (U^T v) . F[:, i]
    let mut utv = vec![T::zero(); u.cols()];
    for r in 0..u.rows() {
        axpy(&mut utv, v[r], u.row(r));
    }
    let mut col = vec![T::zero(); f.rows()];
    (0..f.cols())
        .map(|c| {
            f.col_to(c, &mut col);
            dot(&utv, &col).tanh()
        })
        .collect()
}

pub(crate) use super::matrix::axpy;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embed_repeats_columns() {
        let table = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let out = embed(&table, &[2, 2]);
        assert_eq!(out.col_vec(0), vec![3.0, 6.0]);
        assert_eq!(out.col_vec(1), vec![3.0, 6.0]);
        let empty = embed(&table, &[]);
        assert_eq!((empty.rows(), empty.cols()), (2, 0));
    }

    #[test]
    #[should_panic(expected = "out of range")]
    fn embed_rejects_out_of_range() {
        let table = Matrix::<f64>::zeros(2, 3);
        embed(&table, &[3]);
    }

    #[test]
    fn conv_output_width_and_zero_weights() {
        let d = 3;
        let w = Matrix::<f64>::zeros(d, 3 * d);
        let b = Matrix::<f64>::zeros(d, 1);
        let input = Matrix::from_vec(d, 4, (0..12).map(|x| x as f64).collect());
        let out = conv_tanh(&w, &b, &input, 3);
        assert_eq!(out.cols(), 6); // s + n - 1
        assert!(out.data().iter().all(|&v| v == 0.0)); // tanh(0) = 0
    }

    #[test]
    fn conv_outputs_strictly_inside_unit_interval() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let d = 4;
        let mut w = Matrix::<f64>::zeros(d, 2 * d);
        let mut b = Matrix::<f64>::zeros(d, 1);
        let mut input = Matrix::<f64>::zeros(d, 5);
        w.fill_uniform(&mut rng, 3.0);
        b.fill_uniform(&mut rng, 3.0);
        input.fill_uniform(&mut rng, 3.0);
        let out = conv_tanh(&w, &b, &input, 2);
        assert!(out.data().iter().all(|&v| v > -1.0 && v < 1.0));
    }

    #[test]
    fn maxpool_rows_and_ties() {
        let f = Matrix::from_vec(1, 3, vec![0.5, -0.2, 0.3]);
        let (v, am) = max_rows(&f);
        assert_eq!(v, vec![0.5]);
        assert_eq!(am, vec![0]);
        let ties = Matrix::from_vec(1, 3, vec![0.7, 0.7, 0.7]);
        let (_, am) = max_rows(&ties);
        assert_eq!(am, vec![0]);
        let single = Matrix::from_vec(2, 1, vec![1.0, 2.0]);
        let (v, _) = max_rows(&single);
        assert_eq!(v, vec![1.0, 2.0]);
    }

    #[test]
    fn cosine_basics() {
        let u = vec![1.0f64, 0.0];
        let v = vec![0.0f64, 1.0];
        assert!(cosine(&u, &v).abs() < 1e-12);
        let w = vec![0.3f64, -0.4];
        assert!((cosine(&w, &w) - 1.0).abs() < 1e-7);
    }

    #[test]
    fn cosine_scale_invariance() {
        let u = vec![0.3f64, -0.7, 0.2];
        let v = vec![-0.1f64, 0.4, 0.9];
        let base = cosine(&u, &v);
        for k in [0.5, 3.0, 17.0] {
            let ku: Vec<f64> = u.iter().map(|x| x * k).collect();
            assert!((cosine(&ku, &v) - base).abs() < 1e-6);
        }
    }

    #[test]
    fn hinge_examples() {
        assert_eq!(hinge_rank_loss(0.5f64, 2.0, 1.0), 0.0);
        assert!((hinge_rank_loss(0.5f64, 1.2, 1.0) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn decay_worked_example() {
        let decay = decay_weights(&[0.97f64, -0.30, 0.76]);
        assert!((decay[0] - 1.0).abs() < 1e-12);
        assert_eq!(decay[1], 0.0);
        assert!((decay[2] - 0.76 / 0.97).abs() < 1e-12);
    }

    #[test]
    fn decay_all_nonpositive_degenerates_to_ones() {
        assert_eq!(decay_weights(&[-0.3f64, 0.0, -0.9]), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn amp_hand_trace() {
        // v_p = [1, 0] gives column cosines ~[0.5, negative, 1.0], hence decay
        // ~[0.5, 0, 1]. Row 0 of the map is [0.5, -0.2, 0.3]; its decayed row
        // [0.25, 0, 0.3] selects column 2 and retrieves the ORIGINAL 0.3,
        // below the plain row max 0.5.
        let root3_half = 0.75f64.sqrt();
        let f = Matrix::from_vec(2, 3, vec![0.5, -0.2, 0.3, root3_half, 0.1, 0.0]);
        let v_p = vec![1.0, 0.0];
        let cosines = col_cosines(&f, &v_p);
        assert!((cosines[0] - 0.5).abs() < 1e-6);
        assert!(cosines[1] < 0.0);
        assert!((cosines[2] - 1.0).abs() < 1e-6);
        let (amp, sel) = attentive_maxpool(&f, &v_p);
        assert_eq!(sel, vec![2, 0]);
        assert!((amp[0] - 0.3).abs() < 1e-12);
        assert!((amp[1] - root3_half).abs() < 1e-12);
        // componentwise dominance against plain maxpooling
        let (tmp, _) = max_rows(&f);
        for (a, t) in amp.iter().zip(&tmp) {
            assert!(a <= t);
        }
    }

    #[test]
    fn amp_equal_positive_cosines_reduce_to_tmp() {
        // sign-flipped columns share dot and norm with the base column, so
        // all cosines are bitwise equal and positive and the decay is
        // uniformly 1: attentive pooling must equal plain maxpooling exactly
        let f = Matrix::from_vec(2, 3, vec![0.5, 0.5, 0.5, 0.3, -0.3, 0.3]);
        let v_p = vec![0.9, 0.0];
        let (amp, sel) = attentive_maxpool(&f, &v_p);
        let (tmp, am) = max_rows(&f);
        assert_eq!(amp, tmp);
        assert_eq!(sel, am);
    }

    #[test]
    fn weighted_mean_and_fallback() {
        let f = Matrix::from_vec(2, 2, vec![1.0f64, 3.0, 2.0, 4.0]);
        let (out, fb) = weighted_mean_cols(&f, &[1.0, 3.0]);
        assert!(!fb);
        assert!((out[0] - (1.0 + 9.0) / 4.0).abs() < 1e-12);
        let (out, fb) = weighted_mean_cols(&f, &[0.0, 0.0]);
        assert!(fb);
        assert_eq!(out, vec![2.0, 3.0]);
    }

    #[test]
    fn top_k_selection() {
        let w = vec![0.1f64, 0.9, 0.5, 0.9];
        assert_eq!(top_k_columns(&w, 2), vec![1, 3]);
        assert_eq!(top_k_columns(&w, 10), vec![0, 1, 2, 3]);
        let f = Matrix::from_vec(1, 4, vec![5.0, 1.0, 7.0, 2.0]);
        let (v, am) = max_rows_over(&f, &[1, 3]);
        assert_eq!(v, vec![2.0]);
        assert_eq!(am, vec![3]);
    }

    #[test]
    fn bilinear_identity_is_monotone_in_dot() {
        let u = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let v = vec![0.5f64, 0.5];
        let f = Matrix::from_vec(2, 3, vec![1.0, -1.0, 0.2, 1.0, -1.0, 0.4]);
        let scores = bilinear_tanh_scores(&v, &u, &f);
        let dots = [1.0f64, -1.0, 0.3];
        for (s, d) in scores.iter().zip(&dots) {
            assert!((s - d.tanh()).abs() < 1e-12);
        }
    }
}
