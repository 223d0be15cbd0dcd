//! Reverse-mode tape over the network primitives.
//!
//! Operations append nodes in topological order; `backward` walks the tape in
//! reverse and accumulates gradients into node slots and the [`ParamSet`].
//! Discrete selections (argmax columns, attentive-pool coordinates, top-k
//! sets, hinge activity) are treated as constants during backpropagation;
//! [`Graph::selection_signature`] exposes them so finite-difference checks
//! can exclude coordinates that sit on a selection boundary.

use super::matrix::{axpy, dot, Matrix, Scalar};
use super::ops;
use super::param::{ParamId, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op<T> {
    Input,
    Embed {
        table: ParamId,
        indices: Vec<usize>,
    },
    ConvTanh {
        w: ParamId,
        b: ParamId,
        input: NodeId,
        width: usize,
    },
    MaxRows {
        input: NodeId,
        argmax: Vec<usize>,
    },
    MeanRows {
        input: NodeId,
    },
    Cosine {
        u: NodeId,
        v: NodeId,
        dot_uv: T,
        norm_u: T,
        norm_v: T,
    },
    Amp {
        fmap: NodeId,
        selected: Vec<usize>,
    },
    ColCosines {
        fmap: NodeId,
        v: NodeId,
        // (dot, column norm) per column, plus the norm of v
        cols: Vec<(T, T)>,
        norm_v: T,
    },
    WeightedMeanCols {
        fmap: NodeId,
        weights: NodeId,
        weight_sum: T,
        fallback: bool,
    },
    TopkMaxRows {
        fmap: NodeId,
        cols: Vec<usize>,
        argmax: Vec<usize>,
    },
    BilinearTanhScores {
        v: NodeId,
        u_mat: ParamId,
        fmap: NodeId,
        utv: Vec<T>,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    HingeRank {
        pos: NodeId,
        neg: NodeId,
        active: bool,
    },
}

struct Node<T> {
    value: Matrix<T>,
    grad: Option<Matrix<T>>,
    op: Op<T>,
}

/// Define-by-run computation tape.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Matrix<T> {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> T {
        let m = &self.nodes[id.0].value;
        assert_eq!((m.rows(), m.cols()), (1, 1), "node is not a scalar");
        m.get(0, 0)
    }

    /// Constant input (no gradient is kept for it).
    pub fn input(&mut self, value: Matrix<T>) -> NodeId {
        self.push(value, Op::Input)
    }

    /// Embedding lookup: column `i` of the output is `table` column
    /// `indices[i]`; backward scatters into the used table columns.
    pub fn embed(&mut self, params: &ParamSet<T>, table: ParamId, indices: &[usize]) -> NodeId {
        let value = ops::embed(params.value(table), indices);
        self.push(
            value,
            Op::Embed {
                table,
                indices: indices.to_vec(),
            },
        )
    }

    pub fn conv_tanh(
        &mut self,
        params: &ParamSet<T>,
        w: ParamId,
        b: ParamId,
        input: NodeId,
        width: usize,
    ) -> NodeId {
        let value = ops::conv_tanh(params.value(w), params.value(b), self.value(input), width);
        self.push(value, Op::ConvTanh { w, b, input, width })
    }

    pub fn max_rows(&mut self, input: NodeId) -> NodeId {
        let (values, argmax) = ops::max_rows(self.value(input));
        self.push(Matrix::column(&values), Op::MaxRows { input, argmax })
    }

    pub fn mean_rows(&mut self, input: NodeId) -> NodeId {
        let values = ops::mean_rows(self.value(input));
        self.push(Matrix::column(&values), Op::MeanRows { input })
    }

    pub fn cosine(&mut self, u: NodeId, v: NodeId) -> NodeId {
        let uv = self.value(u);
        let vv = self.value(v);
        assert!(
            uv.same_shape(vv) && uv.cols() == 1,
            "cosine expects two column vectors of equal length"
        );
        let (val, d, nu, nv) = ops::cosine_parts(uv.data(), vv.data());
        self.push(
            Matrix::scalar(val),
            Op::Cosine {
                u,
                v,
                dot_uv: d,
                norm_u: nu,
                norm_v: nv,
            },
        )
    }

    /// Attentive maxpooling. Selection coordinates are constants during
    /// backpropagation: gradient flows only into the selected feature-map
    /// entries, not through the cosine-attention path into `v_p`.
    pub fn attentive_maxpool(&mut self, fmap: NodeId, v_p: NodeId) -> NodeId {
        let (values, selected) = ops::attentive_maxpool(self.value(fmap), self.value(v_p).data());
        self.push(Matrix::column(&values), Op::Amp { fmap, selected })
    }

    pub fn col_cosines(&mut self, fmap: NodeId, v: NodeId) -> NodeId {
        let f = self.value(fmap);
        let vd = self.value(v).data();
        let mut col = vec![T::zero(); f.rows()];
        let mut vals = Vec::with_capacity(f.cols());
        let mut cols = Vec::with_capacity(f.cols());
        let mut norm_v = T::zero();
        for c in 0..f.cols() {
            f.col_to(c, &mut col);
            let (val, d, nf, nv) = ops::cosine_parts(&col, vd);
            vals.push(val);
            cols.push((d, nf));
            norm_v = nv;
        }
        self.push(
            Matrix::from_vec(1, vals.len(), vals),
            Op::ColCosines {
                fmap,
                v,
                cols,
                norm_v,
            },
        )
    }

    pub fn weighted_mean_cols(&mut self, fmap: NodeId, weights: NodeId) -> NodeId {
        let (values, fallback) = ops::weighted_mean_cols(self.value(fmap), self.value(weights).data());
        let weight_sum = self
            .value(weights)
            .data()
            .iter()
            .fold(T::zero(), |acc, &w| acc + w);
        self.push(
            Matrix::column(&values),
            Op::WeightedMeanCols {
                fmap,
                weights,
                weight_sum,
                fallback,
            },
        )
    }

    /// Row max over the columns with the `k` largest weights. The top-k set
    /// and the winning cells are selection constants; the weights node gets
    /// no gradient.
    pub fn topk_max_rows(&mut self, fmap: NodeId, weights: NodeId, k: usize) -> NodeId {
        let cols = ops::top_k_columns(self.value(weights).data(), k.max(1));
        let (values, argmax) = ops::max_rows_over(self.value(fmap), &cols);
        self.push(Matrix::column(&values), Op::TopkMaxRows { fmap, cols, argmax })
    }

    pub fn bilinear_tanh_scores(&mut self, params: &ParamSet<T>, v: NodeId, u_mat: ParamId, fmap: NodeId) -> NodeId {
        let u = params.value(u_mat);
        let vals = ops::bilinear_tanh_scores(self.value(v).data(), u, self.value(fmap));
        let mut utv = vec![T::zero(); u.cols()];
        for r in 0..u.rows() {
            axpy(&mut utv, self.value(v).data()[r], u.row(r));
        }
        self.push(
            Matrix::from_vec(1, vals.len(), vals),
            Op::BilinearTanhScores { v, u_mat, fmap, utv },
        )
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.value(a);
        let bv = self.value(b);
        assert!(av.same_shape(bv), "add expects equal shapes");
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Matrix::from_vec(av.rows(), av.cols(), data);
        self.push(value, Op::Add { a, b })
    }

    /// `max(0, margin + s_neg - s_pos)` with constant margin.
    pub fn hinge_rank(&mut self, margin: T, pos: NodeId, neg: NodeId) -> NodeId {
        let raw = margin + (self.scalar(neg) - self.scalar(pos));
        let active = raw > T::zero();
        let value = if active { raw } else { T::zero() };
        self.push(Matrix::scalar(value), Op::HingeRank { pos, neg, active })
    }

    /// Discrete choices made during the forward pass, in tape order. Two
    /// forward passes with the same structure compare equal iff no argmax,
    /// top-k, fallback or hinge activation flipped.
    pub fn selection_signature(&self) -> Vec<u64> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::MaxRows { argmax, .. } => sig.extend(argmax.iter().map(|&c| c as u64)),
                Op::Amp { selected, .. } => sig.extend(selected.iter().map(|&c| c as u64)),
                Op::TopkMaxRows { cols, argmax, .. } => {
                    sig.extend(cols.iter().map(|&c| c as u64));
                    sig.extend(argmax.iter().map(|&c| c as u64));
                }
                Op::WeightedMeanCols { fallback, .. } => sig.push(*fallback as u64),
                Op::HingeRank { active, .. } => sig.push(*active as u64),
                _ => {}
            }
        }
        sig
    }

    fn grad_slot(node: &mut Node<T>, rows: usize, cols: usize) -> &mut Matrix<T> {
        node.grad.get_or_insert_with(|| Matrix::zeros(rows, cols))
    }

    /// Reverse pass from a scalar node. Gradients accumulate into parameter
    /// slots in `params`; call [`ParamSet::zero_grads`] or an optimizer step
    /// to clear them.
    pub fn backward(&mut self, params: &mut ParamSet<T>, loss: NodeId) {
        {
            let m = &self.nodes[loss.0].value;
            assert_eq!((m.rows(), m.cols()), (1, 1), "backward starts from a scalar");
        }
        self.nodes[loss.0].grad = Some(Matrix::scalar(T::one()));

        for i in (0..self.nodes.len()).rev() {
            let (before, after) = self.nodes.split_at_mut(i);
            let node = &mut after[0];
            let Some(grad) = node.grad.take() else { continue };
            match &node.op {
                Op::Input => {}
                Op::Embed { table, indices } => {
                    let t = params.get_mut(*table);
                    for (pos, &idx) in indices.iter().enumerate() {
                        for r in 0..grad.rows() {
                            t.grad.add_at(r, idx, grad.get(r, pos));
                        }
                    }
                }
                Op::ConvTanh { w, b, input, width } => {
                    let d = node.value.rows();
                    let m = node.value.cols();
                    let in_node = &mut before[input.0];
                    let s = in_node.value.cols();
                    let in_grad_needed = !matches!(in_node.op, Op::Input);
                    let mut window = vec![T::zero(); width * d];
                    let mut win_grad = vec![T::zero(); width * d];
                    for j in 0..m {
                        // rebuild the forward window for this position
                        for (wslot, chunk) in window.chunks_exact_mut(d).enumerate() {
                            let p = j as isize - (*width as isize - 1) + wslot as isize;
                            if p < 0 || p as usize >= s {
                                chunk.fill(T::zero());
                            } else {
                                in_node.value.col_to(p as usize, chunk);
                            }
                        }
                        win_grad.fill(T::zero());
                        for r in 0..d {
                            let y = node.value.get(r, j);
                            let dz = grad.get(r, j) * (T::one() - y * y);
                            if dz == T::zero() {
                                continue;
                            }
                            let pw = params.get_mut(*w);
                            axpy(pw.grad.row_mut(r), dz, &window);
                            params.get_mut(*b).grad.add_at(r, 0, dz);
                            axpy(&mut win_grad, dz, params.get(*w).value.row(r));
                        }
                        if in_grad_needed {
                            let ig = Self::grad_slot(in_node, d, s);
                            for (wslot, chunk) in win_grad.chunks_exact(d).enumerate() {
                                let p = j as isize - (*width as isize - 1) + wslot as isize;
                                if p >= 0 && (p as usize) < s {
                                    for r in 0..d {
                                        ig.add_at(r, p as usize, chunk[r]);
                                    }
                                }
                            }
                        }
                    }
                }
                Op::MaxRows { input, argmax } => {
                    let in_node = &mut before[input.0];
                    let (r_, c_) = (in_node.value.rows(), in_node.value.cols());
                    let ig = Self::grad_slot(in_node, r_, c_);
                    for (r, &c) in argmax.iter().enumerate() {
                        ig.add_at(r, c, grad.get(r, 0));
                    }
                }
                Op::MeanRows { input } => {
                    let in_node = &mut before[input.0];
                    let (r_, c_) = (in_node.value.rows(), in_node.value.cols());
                    let inv = T::one() / T::from_f64(c_ as f64);
                    let ig = Self::grad_slot(in_node, r_, c_);
                    for r in 0..r_ {
                        let g = grad.get(r, 0) * inv;
                        for c in 0..c_ {
                            ig.add_at(r, c, g);
                        }
                    }
                }
                Op::Cosine {
                    u,
                    v,
                    dot_uv,
                    norm_u,
                    norm_v,
                } => {
                    let g = grad.get(0, 0);
                    let eps = T::from_f64(ops::EPSILON);
                    let denom = *norm_u * *norm_v + eps;
                    let (lo, hi) = (u.0.min(v.0), u.0.max(v.0));
                    // cosine of a node with itself is not recorded
                    assert_ne!(lo, hi, "cosine inputs must be distinct nodes");
                    let (head, tail) = before.split_at_mut(hi);
                    let (u_node, v_node) = if u.0 < v.0 {
                        (&mut head[lo], &mut tail[0])
                    } else {
                        (&mut tail[0], &mut head[lo])
                    };
                    let n = u_node.value.rows();
                    {
                        let scale_v = g / denom;
                        let scale_u = if *norm_u > T::zero() {
                            g * *dot_uv * *norm_v / (*norm_u * denom * denom)
                        } else {
                            T::zero()
                        };
                        let u_vals = u_node.value.data().to_vec();
                        let v_vals = v_node.value.data().to_vec();
                        if !matches!(u_node.op, Op::Input) {
                            let ug = Self::grad_slot(u_node, n, 1);
                            axpy(ug.data_mut(), scale_v, &v_vals);
                            axpy(ug.data_mut(), -scale_u, &u_vals);
                        }
                        let scale_u2 = g / denom;
                        let scale_v2 = if *norm_v > T::zero() {
                            g * *dot_uv * *norm_u / (*norm_v * denom * denom)
                        } else {
                            T::zero()
                        };
                        if !matches!(v_node.op, Op::Input) {
                            let vg = Self::grad_slot(v_node, n, 1);
                            axpy(vg.data_mut(), scale_u2, &u_vals);
                            axpy(vg.data_mut(), -scale_v2, &v_vals);
                        }
                    }
                }
                Op::Amp { fmap, selected } => {
                    let f_node = &mut before[fmap.0];
                    let (r_, c_) = (f_node.value.rows(), f_node.value.cols());
                    let fg = Self::grad_slot(f_node, r_, c_);
                    for (r, &c) in selected.iter().enumerate() {
                        fg.add_at(r, c, grad.get(r, 0));
                    }
                }
                Op::ColCosines { fmap, v, cols, norm_v } => {
                    let eps = T::from_f64(ops::EPSILON);
                    let (lo, hi) = (fmap.0.min(v.0), fmap.0.max(v.0));
                    assert_ne!(lo, hi);
                    let (head, tail) = before.split_at_mut(hi);
                    let (f_node, v_node) = if fmap.0 < v.0 {
                        (&mut head[lo], &mut tail[0])
                    } else {
                        (&mut tail[0], &mut head[lo])
                    };
                    let d = f_node.value.rows();
                    let v_vals = v_node.value.data().to_vec();
                    let mut col = vec![T::zero(); d];
                    let mut v_grad_acc = vec![T::zero(); d];
                    let f_grad_needed = !matches!(f_node.op, Op::Input);
                    for (c, &(d_c, nf)) in cols.iter().enumerate() {
                        let g = grad.get(0, c);
                        if g == T::zero() {
                            continue;
                        }
                        let denom = nf * *norm_v + eps;
                        f_node.value.col_to(c, &mut col);
                        if f_grad_needed {
                            let scale_v = g / denom;
                            let scale_f = if nf > T::zero() {
                                g * d_c * *norm_v / (nf * denom * denom)
                            } else {
                                T::zero()
                            };
                            let fg = Self::grad_slot(f_node, d, cols.len());
                            for r in 0..d {
                                fg.add_at(r, c, scale_v * v_vals[r] - scale_f * col[r]);
                            }
                        }
                        let scale_f2 = g / denom;
                        let scale_v2 = if *norm_v > T::zero() {
                            g * d_c * nf / (*norm_v * denom * denom)
                        } else {
                            T::zero()
                        };
                        axpy(&mut v_grad_acc, scale_f2, &col);
                        axpy(&mut v_grad_acc, -scale_v2, &v_vals);
                    }
                    if !matches!(v_node.op, Op::Input) {
                        let vg = Self::grad_slot(v_node, d, 1);
                        axpy(vg.data_mut(), T::one(), &v_grad_acc);
                    }
                }
                Op::WeightedMeanCols {
                    fmap,
                    weights,
                    weight_sum,
                    fallback,
                } => {
                    let (lo, hi) = (fmap.0.min(weights.0), fmap.0.max(weights.0));
                    assert_ne!(lo, hi);
                    let (head, tail) = before.split_at_mut(hi);
                    let (f_node, w_node) = if fmap.0 < weights.0 {
                        (&mut head[lo], &mut tail[0])
                    } else {
                        (&mut tail[0], &mut head[lo])
                    };
                    let d = f_node.value.rows();
                    let m = f_node.value.cols();
                    if *fallback {
                        let inv = T::one() / T::from_f64(m as f64);
                        if !matches!(f_node.op, Op::Input) {
                            let fg = Self::grad_slot(f_node, d, m);
                            for r in 0..d {
                                let g = grad.get(r, 0) * inv;
                                for c in 0..m {
                                    fg.add_at(r, c, g);
                                }
                            }
                        }
                        // weights do not influence the fallback output
                    } else {
                        let w_vals = w_node.value.data().to_vec();
                        let out_vals = node.value.data();
                        if !matches!(f_node.op, Op::Input) {
                            let fg = Self::grad_slot(f_node, d, m);
                            for r in 0..d {
                                let g = grad.get(r, 0) / *weight_sum;
                                for c in 0..m {
                                    fg.add_at(r, c, g * w_vals[c]);
                                }
                            }
                        }
                        if !matches!(w_node.op, Op::Input) {
                            let wg = Self::grad_slot(w_node, 1, m);
                            for c in 0..m {
                                let mut acc = T::zero();
                                for r in 0..d {
                                    acc += grad.get(r, 0) * (f_node.value.get(r, c) - out_vals[r]);
                                }
                                wg.add_at(0, c, acc / *weight_sum);
                            }
                        }
                    }
                }
                Op::TopkMaxRows { fmap, argmax, .. } => {
                    let f_node = &mut before[fmap.0];
                    let (r_, c_) = (f_node.value.rows(), f_node.value.cols());
                    let fg = Self::grad_slot(f_node, r_, c_);
                    for (r, &c) in argmax.iter().enumerate() {
                        fg.add_at(r, c, grad.get(r, 0));
                    }
                }
                Op::BilinearTanhScores { v, u_mat, fmap, utv } => {
                    let (lo, hi) = (v.0.min(fmap.0), v.0.max(fmap.0));
                    assert_ne!(lo, hi);
                    let (head, tail) = before.split_at_mut(hi);
                    let (v_node, f_node) = if v.0 < fmap.0 {
                        (&mut head[lo], &mut tail[0])
                    } else {
                        (&mut tail[0], &mut head[lo])
                    };
                    let d = f_node.value.rows();
                    let m = f_node.value.cols();
                    // dz per column, then F*dz for the v and U gradients
                    let mut f_dz = vec![T::zero(); d];
                    let mut col = vec![T::zero(); d];
                    let f_grad_needed = !matches!(f_node.op, Op::Input);
                    for c in 0..m {
                        let s = node.value.get(0, c);
                        let dz = grad.get(0, c) * (T::one() - s * s);
                        if dz == T::zero() {
                            continue;
                        }
                        f_node.value.col_to(c, &mut col);
                        axpy(&mut f_dz, dz, &col);
                        if f_grad_needed {
                            let fg = Self::grad_slot(f_node, d, m);
                            for r in 0..d {
                                fg.add_at(r, c, dz * utv[r]);
                            }
                        }
                    }
                    let u = params.get(*u_mat).value.clone();
                    if !matches!(v_node.op, Op::Input) {
                        let vg = Self::grad_slot(v_node, u.rows(), 1);
                        for r in 0..u.rows() {
                            vg.add_at(r, 0, dot(u.row(r), &f_dz));
                        }
                    }
                    let v_vals = v_node.value.data().to_vec();
                    let ug = &mut params.get_mut(*u_mat).grad;
                    for r in 0..ug.rows() {
                        axpy(ug.row_mut(r), v_vals[r], &f_dz);
                    }
                }
                Op::Add { a, b } => {
                    let (lo, hi) = (a.0.min(b.0), a.0.max(b.0));
                    assert_ne!(lo, hi, "add inputs must be distinct nodes");
                    let (head, tail) = before.split_at_mut(hi);
                    for n in [&mut head[lo], &mut tail[0]] {
                        if matches!(n.op, Op::Input) {
                            continue;
                        }
                        let (r_, c_) = (n.value.rows(), n.value.cols());
                        let g = Self::grad_slot(n, r_, c_);
                        axpy(g.data_mut(), T::one(), grad.data());
                    }
                }
                Op::HingeRank { pos, neg, active } => {
                    if *active {
                        let g = grad.get(0, 0);
                        let (lo, hi) = (pos.0.min(neg.0), pos.0.max(neg.0));
                        assert_ne!(lo, hi);
                        let (head, tail) = before.split_at_mut(hi);
                        let (p_node, n_node) = if pos.0 < neg.0 {
                            (&mut head[lo], &mut tail[0])
                        } else {
                            (&mut tail[0], &mut head[lo])
                        };
                        if !matches!(p_node.op, Op::Input) {
                            Self::grad_slot(p_node, 1, 1).add_at(0, 0, -g);
                        }
                        if !matches!(n_node.op, Op::Input) {
                            Self::grad_slot(n_node, 1, 1).add_at(0, 0, g);
                        }
                    }
                }
            }
        }
    }
}
