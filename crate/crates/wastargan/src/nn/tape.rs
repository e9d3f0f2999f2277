//! Reverse-mode automatic differentiation over `ndarray` f64 tensors.
//!
//! A [`Tape`] is a single-use computation graph: operations evaluate eagerly
//! and record what backward needs. The op vocabulary is exactly what the
//! models in this crate use; every backward formula here is covered by a
//! central finite-difference check in the test suites.
//!
//! Determinism: node evaluation order is the program order, every reduction
//! in backward runs sequentially in index order, and the convolution kernels
//! only parallelize across independent outputs. Two runs over the same inputs
//! produce bit-identical values and gradients regardless of thread count.

use std::collections::HashMap;

use ndarray::{Array1, Array2, Array4, ArrayD, Axis, Ix2, Ix3, Ix4, IxDyn, Slice};

use super::conv;
use super::params::{ParamId, ParamStore};
use crate::layers;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Scale(Var, f64),
    AddBias { x: Var, bias: Var },
    Relu(Var),
    Glu(Var),
    InstanceNorm { x: Var, eps: f64 },
    Linear { x: Var, w: Var, b: Var },
    Conv2d { x: Var, w: Var, b: Var, stride: (usize, usize), pad: (usize, usize) },
    ConvT2d { x: Var, w: Var, b: Var, stride: (usize, usize), pad: (usize, usize) },
    Conv1d { x: Var, w: Var, b: Var },
    WadainModulate { w: Var, gamma: Var, beta: Var, eps: f64 },
    ConvPerSample { x: Var, w: Var },
    StatPool(Var),
    MeanSpatial(Var),
    IndexedLinear { x: Var, w: Var, b: Var, speakers: Vec<usize> },
    Reshape(Var),
    MeanAll(Var),
    L1Loss(Var, Var),
    MsePull { x: Var, target: f64 },
    CrossEntropy { logits: Var, labels: Vec<usize> },
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
    bound: HashMap<(u64, usize), Var>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn of_param(&self, store: &ParamStore, id: ParamId) -> Option<&ArrayD<f64>> {
        let var = self.bound.get(&(store.uid(), id.0))?;
        self.of(*var)
    }

    /// Gradients aligned with a store's parameter order; unbound or unreached
    /// parameters yield `None`.
    pub fn for_store<'a>(&'a self, store: &ParamStore) -> Vec<Option<&'a ArrayD<f64>>> {
        store.ids().map(|id| self.of_param(store, id)).collect()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: HashMap<(u64, usize), Var>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a scalar node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "expected scalar node");
        *val.iter().next().unwrap()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar_leaf(&mut self, value: f64) -> Var {
        self.leaf(ArrayD::from_elem(IxDyn(&[]), value))
    }

    /// Binds a parameter as a graph input. Binding the same parameter twice
    /// on one tape returns the same node, so gradients from every use site
    /// accumulate.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.uid(), id.0);
        if let Some(&v) = self.bound.get(&key) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param);
        self.bound.insert(key, v);
        v
    }

    /// Copies a node's value onto the tape as a fresh leaf, cutting the
    /// gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.leaf(value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.value(a).shape(),
            self.value(b).shape(),
            "add shape mismatch"
        );
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).mapv(|v| v * c);
        self.push(value, Op::Scale(a, c))
    }

    /// Adds a `[C]` bias across axis 1 of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let c = self.value(x).shape()[1];
        assert_eq!(self.value(bias).shape(), &[c], "add_bias shape mismatch");
        let bias_arr = self.value(bias).clone();
        let mut value = self.value(x).clone();
        for (ci, &bv) in bias_arr.iter().enumerate() {
            value
                .slice_axis_mut(Axis(1), Slice::from(ci..ci + 1))
                .mapv_inplace(|v| v + bv);
        }
        self.push(value, Op::AddBias { x, bias })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| v.max(0.0));
        self.push(value, Op::Relu(x))
    }

    pub fn glu(&mut self, x: Var) -> Var {
        let value = layers::glu(self.value(x)).expect("glu shape");
        self.push(value, Op::Glu(x))
    }

    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Var {
        let value = layers::instance_norm(self.value(x), eps).expect("instance_norm shape");
        self.push(value, Op::InstanceNorm { x, eps })
    }

    /// `x [B, I] . w [I, O] + b [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix2>().unwrap();
        let wv = self.value(w).view().into_dimensionality::<Ix2>().unwrap();
        assert_eq!(xv.dim().1, wv.dim().0, "linear shape mismatch");
        let bv = self.value(b);
        assert_eq!(bv.len(), wv.dim().1, "linear bias mismatch");
        let mut out = xv.dot(&wv);
        for mut row in out.rows_mut() {
            for (o, val) in row.iter_mut().zip(bv.iter()) {
                *o += *val;
            }
        }
        self.push(out.into_dyn(), Op::Linear { x, w, b })
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let wv = self.value(w).view().into_dimensionality::<Ix4>().unwrap();
        let bias = self.value(b).view().into_dimensionality::<ndarray::Ix1>().unwrap().to_owned();
        let out = conv::conv2d(&xv, &wv, Some(&bias), stride, pad);
        self.push(out.into_dyn(), Op::Conv2d { x, w, b, stride, pad })
    }

    pub fn conv_t2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: (usize, usize),
        pad: (usize, usize),
        out_hw: (usize, usize),
    ) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let wv = self.value(w).view().into_dimensionality::<Ix4>().unwrap();
        let bias = self.value(b).view().into_dimensionality::<ndarray::Ix1>().unwrap().to_owned();
        let out = conv::conv_t2d(&xv, &wv, Some(&bias), stride, pad, out_hw);
        self.push(out.into_dyn(), Op::ConvT2d { x, w, b, stride, pad })
    }

    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix3>().unwrap();
        let wv = self.value(w).view().into_dimensionality::<Ix3>().unwrap();
        let bias = self.value(b).view().into_dimensionality::<ndarray::Ix1>().unwrap().to_owned();
        let out = conv::conv1d(&xv, &wv, Some(&bias));
        self.push(out.into_dyn(), Op::Conv1d { x, w, b })
    }

    /// W-AdaIN modulate/demodulate: shared kernel `w [I, J, K]`, per-sample
    /// affines `gamma`/`beta [B, J]`, output `[B, I, J, K]`.
    pub fn wadain_modulate(&mut self, w: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let wv = self.value(w).view().into_dimensionality::<Ix3>().unwrap();
        let gv = self.value(gamma).view().into_dimensionality::<Ix2>().unwrap();
        let bv = self.value(beta).view().into_dimensionality::<Ix2>().unwrap();
        let out = layers::wadain_modulate(&wv, &gv, &bv, eps).expect("wadain_modulate shape");
        self.push(out.into_dyn(), Op::WadainModulate { w, gamma, beta, eps })
    }

    /// Per-sample stride-1 "same" 1D convolution: `x [B, J, T]`, kernels
    /// `[B, I, J, K]`.
    pub fn conv1d_per_sample(&mut self, x: Var, w: Var) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix3>().unwrap();
        let wv = self.value(w).view().into_dimensionality::<Ix4>().unwrap();
        let out = conv::conv1d_per_sample(&xv, &wv);
        self.push(out.into_dyn(), Op::ConvPerSample { x, w })
    }

    /// Statistic pooling: `[B, C, T]` to `[B, 2C]` (means, then population
    /// stds, over time).
    pub fn stat_pool(&mut self, x: Var) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix3>().unwrap();
        let (b, c, t) = xv.dim();
        let mut out = Array2::<f64>::zeros((b, 2 * c));
        for bi in 0..b {
            for ci in 0..c {
                let row = xv.slice(ndarray::s![bi, ci, ..]);
                let mean = row.sum() / t as f64;
                let var = row.fold(0.0, |acc, &v| acc + (v - mean) * (v - mean)) / t as f64;
                out[[bi, ci]] = mean;
                out[[bi, c + ci]] = var.sqrt();
            }
        }
        self.push(out.into_dyn(), Op::StatPool(x))
    }

    /// Global average pool: `[B, C, spatial...]` to `[B, C]`.
    pub fn mean_spatial(&mut self, x: Var) -> Var {
        let shape = self.value(x).shape().to_vec();
        assert!(shape.len() >= 3, "mean_spatial needs spatial axes");
        let (b, c) = (shape[0], shape[1]);
        let s: usize = shape[2..].iter().product();
        let flat = self.value(x).to_shape((b, c, s)).unwrap().into_owned();
        let out = flat.sum_axis(Axis(2)).mapv(|v| v / s as f64);
        self.push(out.into_dyn(), Op::MeanSpatial(x))
    }

    /// Speaker-switched heads: `x [B, F]`, weights `[N, F, O]`, biases
    /// `[N, O]`; sample `b` routes through head `speakers[b]`.
    pub fn indexed_linear(&mut self, x: Var, w: Var, b: Var, speakers: &[usize]) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix2>().unwrap();
        let wv = self.value(w).view().into_dimensionality::<Ix3>().unwrap();
        let bv = self.value(b).view().into_dimensionality::<Ix2>().unwrap();
        let (batch, feat) = xv.dim();
        let (n_heads, fw, o) = wv.dim();
        assert_eq!(feat, fw, "indexed_linear feature mismatch");
        assert_eq!(bv.dim(), (n_heads, o), "indexed_linear bias mismatch");
        assert_eq!(speakers.len(), batch, "indexed_linear selector mismatch");
        assert!(
            speakers.iter().all(|&s| s < n_heads),
            "speaker id out of range"
        );
        let mut out = Array2::<f64>::zeros((batch, o));
        for bi in 0..batch {
            let head = wv.index_axis(Axis(0), speakers[bi]);
            let res = xv.row(bi).dot(&head);
            for (oi, val) in res.iter().enumerate() {
                out[[bi, oi]] = val + bv[[speakers[bi], oi]];
            }
        }
        self.push(
            out.into_dyn(),
            Op::IndexedLinear {
                x,
                w,
                b,
                speakers: speakers.to_vec(),
            },
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self
            .value(x)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size mismatch");
        self.push(value, Op::Reshape(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let value = ArrayD::from_elem(IxDyn(&[]), self.value(x).sum() / n);
        self.push(value, Op::MeanAll(x))
    }

    /// Mean absolute error over all elements of two same-shape tensors.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.value(a).shape(),
            self.value(b).shape(),
            "l1_loss shape mismatch"
        );
        let n = self.value(a).len() as f64;
        let sum = self
            .value(a)
            .iter()
            .zip(self.value(b).iter())
            .fold(0.0, |acc, (x, y)| acc + (x - y).abs());
        self.push(ArrayD::from_elem(IxDyn(&[]), sum / n), Op::L1Loss(a, b))
    }

    /// Mean squared distance to a scalar target: `mean((x - target)^2)`.
    pub fn mse_pull(&mut self, x: Var, target: f64) -> Var {
        let n = self.value(x).len() as f64;
        let sum = self
            .value(x)
            .iter()
            .fold(0.0, |acc, v| acc + (v - target) * (v - target));
        self.push(
            ArrayD::from_elem(IxDyn(&[]), sum / n),
            Op::MsePull { x, target },
        )
    }

    /// Softmax cross-entropy with integer labels, mean over the batch.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let z = self.value(logits).view().into_dimensionality::<Ix2>().unwrap();
        let (b, n) = z.dim();
        assert_eq!(labels.len(), b, "cross_entropy label count mismatch");
        assert!(labels.iter().all(|&l| l < n), "label out of range");
        let mut loss = 0.0;
        for bi in 0..b {
            let row = z.row(bi);
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let logsum = row.fold(0.0, |acc, &v| acc + (v - max).exp()).ln() + max;
            loss += logsum - row[labels[bi]];
        }
        self.push(
            ArrayD::from_elem(IxDyn(&[]), loss / b as f64),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
        )
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&mut self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let n = self.nodes.len();
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(ArrayD::from_elem(self.value(root).raw_dim(), 1.0));

        for idx in (0..=root.0).rev() {
            if matches!(self.nodes[idx].op, Op::Leaf | Op::Param) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Leaf | Op::Param => unreachable!(),
                Op::Add(a, b) => {
                    acc(&mut grads, a, g.clone());
                    acc(&mut grads, b, g);
                }
                Op::Scale(a, c) => acc(&mut grads, a, g.mapv(|v| v * c)),
                Op::AddBias { x, bias } => {
                    let c = g.shape()[1];
                    let mut db = Array1::<f64>::zeros(c);
                    for ci in 0..c {
                        db[ci] = g.slice_axis(Axis(1), Slice::from(ci..ci + 1)).sum();
                    }
                    acc(&mut grads, bias, db.into_dyn());
                    acc(&mut grads, x, g);
                }
                Op::Relu(x) => {
                    let xv = self.value(x);
                    let mut dx = g;
                    dx.zip_mut_with(xv, |d, &v| {
                        if v <= 0.0 {
                            *d = 0.0
                        }
                    });
                    acc(&mut grads, x, dx);
                }
                Op::Glu(x) => {
                    let xv = self.value(x);
                    let half = xv.shape()[1] / 2;
                    let a = xv.slice_axis(Axis(1), Slice::from(0..half));
                    let pre = xv.slice_axis(Axis(1), Slice::from(half..2 * half));
                    let gate = pre.mapv(|v| 1.0 / (1.0 + (-v).exp()));
                    let da = &g * &gate;
                    let dpre = &g * &a.to_owned() * &gate.mapv(|s| s * (1.0 - s));
                    let mut dx = ArrayD::zeros(xv.raw_dim());
                    dx.slice_axis_mut(Axis(1), Slice::from(0..half)).assign(&da);
                    dx.slice_axis_mut(Axis(1), Slice::from(half..2 * half))
                        .assign(&dpre);
                    acc(&mut grads, x, dx);
                }
                Op::InstanceNorm { x, eps } => {
                    let dx = instance_norm_backward(self.value(x), &g, eps);
                    acc(&mut grads, x, dx);
                }
                Op::Linear { x, w, b } => {
                    let xv = self.value(x).view().into_dimensionality::<Ix2>().unwrap();
                    let wv = self.value(w).view().into_dimensionality::<Ix2>().unwrap();
                    let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                    let dx = gv.dot(&wv.t()).into_dyn();
                    let dw = xv.t().dot(&gv).into_dyn();
                    let db = gv.sum_axis(Axis(0)).into_dyn();
                    acc(&mut grads, x, dx);
                    acc(&mut grads, w, dw);
                    acc(&mut grads, b, db);
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
                    let wv = self.value(w).view().into_dimensionality::<Ix4>().unwrap();
                    let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                    let (dx, dw, db) = conv::conv2d_grads(&xv, &wv, &gv, stride, pad);
                    acc(&mut grads, x, dx.into_dyn());
                    acc(&mut grads, w, dw.into_dyn());
                    acc(&mut grads, b, db.into_dyn());
                }
                Op::ConvT2d { x, w, b, stride, pad } => {
                    let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
                    let wv = self.value(w).view().into_dimensionality::<Ix4>().unwrap();
                    let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                    let (dx, dw, db) = conv::conv_t2d_grads(&xv, &wv, &gv, stride, pad);
                    acc(&mut grads, x, dx.into_dyn());
                    acc(&mut grads, w, dw.into_dyn());
                    acc(&mut grads, b, db.into_dyn());
                }
                Op::Conv1d { x, w, b } => {
                    let xv = self.value(x).view().into_dimensionality::<Ix3>().unwrap();
                    let wv = self.value(w).view().into_dimensionality::<Ix3>().unwrap();
                    let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                    let (dx, dw, db) = conv::conv1d_grads(&xv, &wv, &gv);
                    acc(&mut grads, x, dx.into_dyn());
                    acc(&mut grads, w, dw.into_dyn());
                    acc(&mut grads, b, db.into_dyn());
                }
                Op::WadainModulate { w, gamma, beta, eps } => {
                    let wv = self.value(w).view().into_dimensionality::<Ix3>().unwrap().to_owned();
                    let gv = self
                        .value(gamma)
                        .view()
                        .into_dimensionality::<Ix2>()
                        .unwrap()
                        .to_owned();
                    let bv = self
                        .value(beta)
                        .view()
                        .into_dimensionality::<Ix2>()
                        .unwrap()
                        .to_owned();
                    let gu = g.view().into_dimensionality::<Ix4>().unwrap().to_owned();
                    let (dw, dgamma, dbeta) = wadain_modulate_backward(&wv, &gv, &bv, &gu, eps);
                    acc(&mut grads, w, dw.into_dyn());
                    acc(&mut grads, gamma, dgamma.into_dyn());
                    acc(&mut grads, beta, dbeta.into_dyn());
                }
                Op::ConvPerSample { x, w } => {
                    let xv = self.value(x).view().into_dimensionality::<Ix3>().unwrap();
                    let wv = self.value(w).view().into_dimensionality::<Ix4>().unwrap();
                    let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                    let (dx, dw) = conv::conv1d_per_sample_grads(&xv, &wv, &gv);
                    acc(&mut grads, x, dx.into_dyn());
                    acc(&mut grads, w, dw.into_dyn());
                }
                Op::StatPool(x) => {
                    let xv = self.value(x).view().into_dimensionality::<Ix3>().unwrap();
                    let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                    let (b, c, t) = xv.dim();
                    let mut dx = ndarray::Array3::<f64>::zeros((b, c, t));
                    for bi in 0..b {
                        for ci in 0..c {
                            let row = xv.slice(ndarray::s![bi, ci, ..]);
                            let mean = row.sum() / t as f64;
                            let var =
                                row.fold(0.0, |acc2, &v| acc2 + (v - mean) * (v - mean)) / t as f64;
                            let std = var.sqrt();
                            let gm = gv[[bi, ci]];
                            let gs = gv[[bi, c + ci]];
                            for ti in 0..t {
                                let mut d = gm / t as f64;
                                if std > 0.0 {
                                    d += gs * (row[ti] - mean) / (t as f64 * std);
                                }
                                dx[[bi, ci, ti]] = d;
                            }
                        }
                    }
                    acc(&mut grads, x, dx.into_dyn());
                }
                Op::MeanSpatial(x) => {
                    let shape = self.value(x).shape().to_vec();
                    let s: usize = shape[2..].iter().product();
                    let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                    let mut dx = ArrayD::<f64>::zeros(self.value(x).raw_dim());
                    {
                        let mut flat = dx
                            .view_mut()
                            .into_shape_with_order((shape[0], shape[1], s))
                            .unwrap();
                        for bi in 0..shape[0] {
                            for ci in 0..shape[1] {
                                let gval = gv[[bi, ci]] / s as f64;
                                flat.slice_mut(ndarray::s![bi, ci, ..]).fill(gval);
                            }
                        }
                    }
                    acc(&mut grads, x, dx);
                }
                Op::IndexedLinear { x, w, b, speakers } => {
                    let xv = self.value(x).view().into_dimensionality::<Ix2>().unwrap();
                    let wv = self.value(w).view().into_dimensionality::<Ix3>().unwrap();
                    let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                    let (batch, feat) = xv.dim();
                    let (n_heads, _, o) = wv.dim();
                    let mut dx = Array2::<f64>::zeros((batch, feat));
                    let mut dw = ndarray::Array3::<f64>::zeros((n_heads, feat, o));
                    let mut db = Array2::<f64>::zeros((n_heads, o));
                    for bi in 0..batch {
                        let s = speakers[bi];
                        let head = wv.index_axis(Axis(0), s);
                        let grow = gv.row(bi);
                        dx.row_mut(bi).assign(&head.dot(&grow));
                        for fi in 0..feat {
                            for oi in 0..o {
                                dw[[s, fi, oi]] += xv[[bi, fi]] * grow[oi];
                            }
                        }
                        for oi in 0..o {
                            db[[s, oi]] += grow[oi];
                        }
                    }
                    acc(&mut grads, x, dx.into_dyn());
                    acc(&mut grads, w, dw.into_dyn());
                    acc(&mut grads, b, db.into_dyn());
                }
                Op::Reshape(x) => {
                    let dx = g
                        .into_shape_with_order(self.value(x).raw_dim())
                        .expect("reshape backward");
                    acc(&mut grads, x, dx);
                }
                Op::MeanAll(x) => {
                    let n = self.value(x).len() as f64;
                    let gs = *g.iter().next().unwrap();
                    acc(
                        &mut grads,
                        x,
                        ArrayD::from_elem(self.value(x).raw_dim(), gs / n),
                    );
                }
                Op::L1Loss(a, b) => {
                    let gs = *g.iter().next().unwrap();
                    let n = self.value(a).len() as f64;
                    let av = self.value(a);
                    let bv = self.value(b);
                    let mut da = ArrayD::zeros(av.raw_dim());
                    ndarray::Zip::from(&mut da).and(av).and(bv).for_each(|d, &x, &y| {
                        *d = gs * (x - y).signum() / n;
                    });
                    let db = da.mapv(|v| -v);
                    acc(&mut grads, a, da);
                    acc(&mut grads, b, db);
                }
                Op::MsePull { x, target } => {
                    let gs = *g.iter().next().unwrap();
                    let n = self.value(x).len() as f64;
                    let dx = self.value(x).mapv(|v| gs * 2.0 * (v - target) / n);
                    acc(&mut grads, x, dx);
                }
                Op::CrossEntropy { logits, labels } => {
                    let gs = *g.iter().next().unwrap();
                    let z = self.value(logits).view().into_dimensionality::<Ix2>().unwrap();
                    let (b, n) = z.dim();
                    let mut dz = Array2::<f64>::zeros((b, n));
                    for bi in 0..b {
                        let row = z.row(bi);
                        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                        let denom: f64 = row.fold(0.0, |acc2, &v| acc2 + (v - max).exp());
                        for ni in 0..n {
                            let p = (row[ni] - max).exp() / denom;
                            let y = if labels[bi] == ni { 1.0 } else { 0.0 };
                            dz[[bi, ni]] = gs * (p - y) / b as f64;
                        }
                    }
                    acc(&mut grads, logits, dz.into_dyn());
                }
            }
        }

        Gradients {
            grads,
            bound: self.bound.clone(),
        }
    }
}

fn acc(grads: &mut [Option<ArrayD<f64>>], v: Var, delta: ArrayD<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &delta,
        slot @ None => *slot = Some(delta),
    }
}

/// Backward of per-(b, c) standardization with eps added to sigma.
fn instance_norm_backward(x: &ArrayD<f64>, g: &ArrayD<f64>, eps: f64) -> ArrayD<f64> {
    let shape = x.shape().to_vec();
    let (b, c) = (shape[0], shape[1]);
    let s: usize = shape[2..].iter().product();
    let xf = x.to_shape((b, c, s)).unwrap();
    let gf = g.to_shape((b, c, s)).unwrap();
    let mut dx = ndarray::Array3::<f64>::zeros((b, c, s));
    for bi in 0..b {
        for ci in 0..c {
            let xr = xf.slice(ndarray::s![bi, ci, ..]);
            let gr = gf.slice(ndarray::s![bi, ci, ..]);
            let mean = xr.sum() / s as f64;
            let var = xr.fold(0.0, |acc2, &v| acc2 + (v - mean) * (v - mean)) / s as f64;
            let sigma = var.sqrt();
            let d = sigma + eps;
            let g_mean = gr.sum() / s as f64;
            let gc: f64 = xr
                .iter()
                .zip(gr.iter())
                .map(|(&xv, &gv)| gv * (xv - mean))
                .sum();
            for si in 0..s {
                let cdev = xr[si] - mean;
                let mut grad = (gr[si] - g_mean) / d;
                if sigma > 0.0 {
                    grad -= cdev * gc / (s as f64 * sigma * d * d);
                }
                dx[[bi, ci, si]] = grad;
            }
        }
    }
    dx.into_shape_with_order(IxDyn(&shape)).unwrap()
}

/// Backward of [`layers::wadain_modulate`].
///
/// With `w*[b,i,j,k] = gamma[b,j] w[i,j,k] + beta[b,j]`, population stats
/// `mu`/`sigma` over `i`, `c = w* - mu`, and `d = sigma + eps`:
///
/// ```text
/// dL/dw*_i = g_i/d - mean_i(g)/d - c_i * sum_i(g c) / (I sigma d^2)
/// ```
///
/// then chains to `gamma`, `beta`, and the shared kernel.
fn wadain_modulate_backward(
    w: &ndarray::Array3<f64>,
    gamma: &Array2<f64>,
    beta: &Array2<f64>,
    g: &Array4<f64>,
    eps: f64,
) -> (ndarray::Array3<f64>, Array2<f64>, Array2<f64>) {
    let (i_dim, j_dim, k_dim) = w.dim();
    let (b_dim, _) = gamma.dim();
    let count = i_dim as f64;

    let per_batch = crate::parallel::par_map_indexed(b_dim, |b| {
        let mut dw_b = ndarray::Array3::<f64>::zeros((i_dim, j_dim, k_dim));
        let mut dgamma_b = ndarray::Array1::<f64>::zeros(j_dim);
        let mut dbeta_b = ndarray::Array1::<f64>::zeros(j_dim);
        for j in 0..j_dim {
            let ga = gamma[[b, j]];
            let be = beta[[b, j]];
            for k in 0..k_dim {
                let mut mean = 0.0;
                for i in 0..i_dim {
                    mean += ga * w[[i, j, k]] + be;
                }
                mean /= count;
                let mut var = 0.0;
                for i in 0..i_dim {
                    let cdev = ga * w[[i, j, k]] + be - mean;
                    var += cdev * cdev;
                }
                var /= count;
                let sigma = var.sqrt();
                let d = sigma + eps;

                let mut g_sum = 0.0;
                let mut gc_sum = 0.0;
                for i in 0..i_dim {
                    let cdev = ga * w[[i, j, k]] + be - mean;
                    g_sum += g[[b, i, j, k]];
                    gc_sum += g[[b, i, j, k]] * cdev;
                }
                let g_mean = g_sum / count;
                for i in 0..i_dim {
                    let cdev = ga * w[[i, j, k]] + be - mean;
                    let mut dstar = (g[[b, i, j, k]] - g_mean) / d;
                    if sigma > 0.0 {
                        dstar -= cdev * gc_sum / (count * sigma * d * d);
                    }
                    dw_b[[i, j, k]] += ga * dstar;
                    dgamma_b[j] += dstar * w[[i, j, k]];
                    dbeta_b[j] += dstar;
                }
            }
        }
        (dw_b, dgamma_b, dbeta_b)
    });

    let mut dw = ndarray::Array3::<f64>::zeros((i_dim, j_dim, k_dim));
    let mut dgamma = Array2::<f64>::zeros((b_dim, j_dim));
    let mut dbeta = Array2::<f64>::zeros((b_dim, j_dim));
    for (b, (dw_b, dg_b, db_b)) in per_batch.into_iter().enumerate() {
        dw += &dw_b;
        dgamma.row_mut(b).assign(&dg_b);
        dbeta.row_mut(b).assign(&db_b);
    }
    (dw, dgamma, dbeta)
}
