//! Reverse-mode automatic differentiation over `ndarray` f64 tensors.
//!
//! A [`Tape`] records every operation; [`Tape::backward`] walks the record in
//! reverse and accumulates gradients. Single-threaded by construction: one
//! tape per training step, parameters are bound as inputs each step.
//!
//! Gradients of every op are exercised against central finite differences in
//! this module's tests and in the acceptance suite.

use std::cell::RefCell;

use ndarray::{ArrayD, Axis, Ix2, IxDyn, Slice};

type BackwardFn = Box<dyn Fn(&ArrayD<f64>) -> Vec<Option<ArrayD<f64>>>>;

struct Node {
    data: ArrayD<f64>,
    grad: Option<ArrayD<f64>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "incompatible broadcast shapes {a:?} vs {b:?}"
        );
        out[i] = da.max(db);
    }
    out
}

/// Sum `g` down to `shape` (inverse of broadcasting).
fn reduce_to_shape(g: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    let mut r = g.clone();
    while r.ndim() > shape.len() {
        r = r.sum_axis(Axis(0));
    }
    for (ax, (&rd, &sd)) in r.shape().to_vec().iter().zip(shape.iter()).enumerate() {
        if rd != sd {
            debug_assert_eq!(sd, 1);
            let summed = r.sum_axis(Axis(ax)).insert_axis(Axis(ax));
            r = summed;
        }
    }
    r
}

fn to_2d(a: &ArrayD<f64>) -> ndarray::Array2<f64> {
    a.to_owned()
        .into_dimensionality::<Ix2>()
        .expect("expected 2-d tensor")
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&self, node: Node) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var(nodes.len() - 1)
    }

    fn requires(&self, vs: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vs.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// Register a differentiable leaf (e.g. a parameter).
    pub fn input(&self, data: ArrayD<f64>) -> Var {
        self.push(Node { data, grad: None, parents: vec![], backward: None, requires_grad: true })
    }

    /// Register a non-differentiable leaf (e.g. batch data).
    pub fn constant(&self, data: ArrayD<f64>) -> Var {
        self.push(Node { data, grad: None, parents: vec![], backward: None, requires_grad: false })
    }

    pub fn scalar(&self, x: f64) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[]), x))
    }

    pub fn value(&self, v: Var) -> ArrayD<f64> {
        self.nodes.borrow()[v.0].data.clone()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let nodes = self.nodes.borrow();
        let d = &nodes[v.0].data;
        debug_assert_eq!(d.len(), 1);
        *d.iter().next().unwrap()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].data.shape().to_vec()
    }

    pub fn grad(&self, v: Var) -> Option<ArrayD<f64>> {
        self.nodes.borrow()[v.0].grad.clone()
    }

    fn unary(
        &self,
        a: Var,
        out: ArrayD<f64>,
        back: impl Fn(&ArrayD<f64>) -> ArrayD<f64> + 'static,
    ) -> Var {
        let rq = self.requires(&[a]);
        self.push(Node {
            data: out,
            grad: None,
            parents: vec![a.0],
            backward: if rq { Some(Box::new(move |g| vec![Some(back(g))])) } else { None },
            requires_grad: rq,
        })
    }

    // ---- elementwise binary ops with broadcasting ----

    fn binary(
        &self,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        back: impl Fn(&ArrayD<f64>, &ArrayD<f64>, &ArrayD<f64>) -> (ArrayD<f64>, ArrayD<f64>) + 'static,
    ) -> Var {
        let (da, db) = {
            let nodes = self.nodes.borrow();
            (nodes[a.0].data.clone(), nodes[b.0].data.clone())
        };
        let shape = broadcast_shape(da.shape(), db.shape());
        let ba = da.broadcast(IxDyn(&shape)).expect("broadcast lhs").to_owned();
        let bb = db.broadcast(IxDyn(&shape)).expect("broadcast rhs").to_owned();
        let mut out = ba.clone();
        out.zip_mut_with(&bb, |x, &y| *x = f(*x, y));
        let rq = self.requires(&[a, b]);
        let (sa, sb) = (da.shape().to_vec(), db.shape().to_vec());
        self.push(Node {
            data: out,
            grad: None,
            parents: vec![a.0, b.0],
            backward: if rq {
                Some(Box::new(move |g| {
                    let (ga, gb) = back(g, &ba, &bb);
                    vec![Some(reduce_to_shape(&ga, &sa)), Some(reduce_to_shape(&gb, &sb))]
                }))
            } else {
                None
            },
            requires_grad: rq,
        })
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, |g, _, _| (g.clone(), g.clone()))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, |g, _, _| (g.clone(), -g.clone()))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, |g, ba, bb| (g * bb, g * ba))
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        self.binary(
            a,
            b,
            |x, y| x / y,
            |g, ba, bb| (g / bb, -(g * ba) / (bb * bb)),
        )
    }

    pub fn neg(&self, a: Var) -> Var {
        let out = -self.value(a);
        self.unary(a, out, |g| -g.clone())
    }

    pub fn scale(&self, a: Var, k: f64) -> Var {
        let out = self.value(a) * k;
        self.unary(a, out, move |g| g * k)
    }

    pub fn add_scalar(&self, a: Var, k: f64) -> Var {
        let out = self.value(a) + k;
        self.unary(a, out, |g| g.clone())
    }

    // ---- nonlinearities ----

    pub fn relu(&self, a: Var) -> Var {
        let x = self.value(a);
        let out = x.mapv(|v| v.max(0.0));
        self.unary(a, out, move |g| {
            let mut r = g.clone();
            r.zip_mut_with(&x, |gi, &xi| {
                if xi <= 0.0 {
                    *gi = 0.0
                }
            });
            r
        })
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let x = self.value(a);
        let y = x.mapv(|v| 1.0 / (1.0 + (-v).exp()));
        let yc = y.clone();
        self.unary(a, y, move |g| g * &(yc.mapv(|v| v * (1.0 - v))))
    }

    pub fn exp(&self, a: Var) -> Var {
        let y = self.value(a).mapv(f64::exp);
        let yc = y.clone();
        self.unary(a, y, move |g| g * &yc)
    }

    pub fn ln(&self, a: Var) -> Var {
        let x = self.value(a);
        let y = x.mapv(f64::ln);
        self.unary(a, y, move |g| g / &x)
    }

    pub fn sqrt(&self, a: Var) -> Var {
        let y = self.value(a).mapv(f64::sqrt);
        let yc = y.clone();
        self.unary(a, y, move |g| g / &(yc.mapv(|v| 2.0 * v)))
    }

    pub fn square(&self, a: Var) -> Var {
        self.mul(a, a)
    }

    /// Numerically stable `ln(1 + exp(x))`; gradient is `sigmoid(x)`.
    pub fn softplus(&self, a: Var) -> Var {
        let x = self.value(a);
        let y = x.mapv(|v| if v > 0.0 { v + (-v).exp().ln_1p() } else { v.exp().ln_1p() });
        self.unary(a, y, move |g| g * &(x.mapv(|v| 1.0 / (1.0 + (-v).exp()))))
    }

    /// Row-wise softmax along the last axis.
    pub fn softmax(&self, a: Var) -> Var {
        let x = self.value(a);
        let mut y = x.clone();
        let last = y.ndim() - 1;
        for mut lane in y.lanes_mut(Axis(last)) {
            let m = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            lane.mapv_inplace(|v| (v - m).exp());
            let s: f64 = lane.sum();
            lane.mapv_inplace(|v| v / s);
        }
        let yc = y.clone();
        self.unary(a, y, move |g| {
            let mut r = g * &yc;
            let last = r.ndim() - 1;
            // g' = y * (g - sum(g*y))
            let dot = r.sum_axis(Axis(last)).insert_axis(Axis(last));
            r = &yc * &(g - &dot);
            r
        })
    }

    // ---- reductions ----

    pub fn sum_all(&self, a: Var) -> Var {
        let x = self.value(a);
        let shape = x.shape().to_vec();
        let out = ArrayD::from_elem(IxDyn(&[]), x.sum());
        self.unary(a, out, move |g| {
            let gv = *g.iter().next().unwrap();
            ArrayD::from_elem(IxDyn(&shape), gv)
        })
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    pub fn sum_axis(&self, a: Var, axis: usize) -> Var {
        let x = self.value(a);
        let shape = x.shape().to_vec();
        let out = x.sum_axis(Axis(axis));
        self.unary(a, out, move |g| {
            let expanded = g.clone().insert_axis(Axis(axis));
            expanded
                .broadcast(IxDyn(&shape))
                .expect("sum_axis backward broadcast")
                .to_owned()
        })
    }

    pub fn mean_axis(&self, a: Var, axis: usize) -> Var {
        let n = self.value(a).shape()[axis] as f64;
        let s = self.sum_axis(a, axis);
        self.scale(s, 1.0 / n)
    }

    // ---- shape ops ----

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let x = self.value(a);
        let old = x.shape().to_vec();
        let out = x
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: size mismatch");
        self.unary(a, out, move |g| {
            g.as_standard_layout()
                .to_owned()
                .into_shape_with_order(IxDyn(&old))
                .expect("reshape backward")
        })
    }

    pub fn permute(&self, a: Var, axes: &[usize]) -> Var {
        let x = self.value(a);
        let out = x.permuted_axes(IxDyn(axes)).as_standard_layout().to_owned();
        let mut inv = vec![0usize; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inv[ax] = i;
        }
        self.unary(a, out, move |g| {
            g.clone().permuted_axes(IxDyn(&inv)).as_standard_layout().to_owned()
        })
    }

    pub fn transpose2(&self, a: Var) -> Var {
        self.permute(a, &[1, 0])
    }

    pub fn concat(&self, vars: &[Var], axis: usize) -> Var {
        assert!(!vars.is_empty());
        let datas: Vec<ArrayD<f64>> = vars.iter().map(|&v| self.value(v)).collect();
        let views: Vec<_> = datas.iter().map(|d| d.view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views).expect("concat shapes");
        let rq = self.requires(vars);
        let mut ranges: Vec<(usize, usize)> = Vec::with_capacity(datas.len());
        let mut offs = 0;
        for d in &datas {
            let s = d.shape()[axis];
            ranges.push((offs, offs + s));
            offs += s;
        }
        self.push(Node {
            data: out,
            grad: None,
            parents: vars.iter().map(|v| v.0).collect(),
            backward: if rq {
                Some(Box::new(move |g| {
                    ranges
                        .iter()
                        .map(|&(s, e)| {
                            Some(g.slice_axis(Axis(axis), Slice::from(s..e)).to_owned())
                        })
                        .collect()
                }))
            } else {
                None
            },
            requires_grad: rq,
        })
    }

    pub fn slice(&self, a: Var, axis: usize, start: usize, end: usize) -> Var {
        let x = self.value(a);
        let shape = x.shape().to_vec();
        let out = x.slice_axis(Axis(axis), Slice::from(start..end)).to_owned();
        self.unary(a, out, move |g| {
            let mut full = ArrayD::zeros(IxDyn(&shape));
            full.slice_axis_mut(Axis(axis), Slice::from(start..end))
                .assign(g);
            full
        })
    }

    /// Gather rows along axis 0 (indices may repeat); backward scatter-adds.
    pub fn index_select(&self, a: Var, indices: &[usize]) -> Var {
        let x = self.value(a);
        let shape = x.shape().to_vec();
        let picked: Vec<_> = indices
            .iter()
            .map(|&i| x.index_axis(Axis(0), i).insert_axis(Axis(0)))
            .collect();
        let views: Vec<_> = picked.iter().map(|p| p.view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("index_select");
        let idx = indices.to_vec();
        self.unary(a, out, move |g| {
            let mut full = ArrayD::zeros(IxDyn(&shape));
            for (row, &i) in idx.iter().enumerate() {
                let gi = g.index_axis(Axis(0), row);
                let mut dst = full.index_axis_mut(Axis(0), i);
                dst += &gi;
            }
            full
        })
    }

    // ---- linear algebra ----

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (da, db) = (to_2d(&self.value(a)), to_2d(&self.value(b)));
        let out = da.dot(&db).into_dyn();
        let rq = self.requires(&[a, b]);
        self.push(Node {
            data: out,
            grad: None,
            parents: vec![a.0, b.0],
            backward: if rq {
                Some(Box::new(move |g| {
                    let g2 = to_2d(g);
                    vec![
                        Some(g2.dot(&db.t()).into_dyn()),
                        Some(da.t().dot(&g2).into_dyn()),
                    ]
                }))
            } else {
                None
            },
            requires_grad: rq,
        })
    }

    /// Symmetric PSD matrix square root with eigenvalue clamping at `eps`.
    ///
    /// Backward solves the Sylvester relation `dA = S dS + dS S` in the
    /// eigenbasis, i.e. divides by the pairwise sums of the clamped
    /// square-root eigenvalues; no eigenvalue-difference denominators appear.
    pub fn sym_sqrt(&self, a: Var, eps: f64) -> Var {
        let x = to_2d(&self.value(a));
        let d = x.nrows();
        let m = nalgebra::DMatrix::from_fn(d, d, |i, j| x[[i, j]]);
        let eig = nalgebra::SymmetricEigen::new(m);
        let s: Vec<f64> = eig.eigenvalues.iter().map(|&l| l.max(eps).sqrt()).collect();
        let u = eig.eigenvectors;
        let mut out = ndarray::Array2::<f64>::zeros((d, d));
        for i in 0..d {
            for j in 0..d {
                let mut acc = 0.0;
                for k in 0..d {
                    acc += u[(i, k)] * s[k] * u[(j, k)];
                }
                out[[i, j]] = acc;
            }
        }
        let sc = s.clone();
        self.unary(a, out.into_dyn(), move |g| {
            let g2 = to_2d(g);
            // symmetrize incoming gradient
            let gs = (&g2 + &g2.t()) * 0.5;
            // X = U^T Gs U ; Y_ij = X_ij / (s_i + s_j) ; gA = U Y U^T
            let mut xm = ndarray::Array2::<f64>::zeros((d, d));
            for i in 0..d {
                for j in 0..d {
                    let mut acc = 0.0;
                    for p in 0..d {
                        for q in 0..d {
                            acc += u[(p, i)] * gs[[p, q]] * u[(q, j)];
                        }
                    }
                    xm[[i, j]] = acc / (sc[i] + sc[j]);
                }
            }
            let mut ga = ndarray::Array2::<f64>::zeros((d, d));
            for p in 0..d {
                for q in 0..d {
                    let mut acc = 0.0;
                    for i in 0..d {
                        for j in 0..d {
                            acc += u[(p, i)] * xm[[i, j]] * u[(q, j)];
                        }
                    }
                    ga[[p, q]] = acc;
                }
            }
            ga.into_dyn()
        })
    }

    /// Log-determinant of a symmetric PSD matrix, eigenvalues clamped at `eps`.
    pub fn logdet_sym(&self, a: Var, eps: f64) -> Var {
        let x = to_2d(&self.value(a));
        let d = x.nrows();
        let m = nalgebra::DMatrix::from_fn(d, d, |i, j| x[[i, j]]);
        let eig = nalgebra::SymmetricEigen::new(m);
        let lam: Vec<f64> = eig.eigenvalues.iter().map(|&l| l.max(eps)).collect();
        let u = eig.eigenvectors;
        let val: f64 = lam.iter().map(|l| l.ln()).sum();
        let out = ArrayD::from_elem(IxDyn(&[]), val);
        self.unary(a, out, move |g| {
            let gv = *g.iter().next().unwrap();
            // d logdet / dA = A^{-1} (clamped, symmetric)
            let mut inv = ndarray::Array2::<f64>::zeros((d, d));
            for p in 0..d {
                for q in 0..d {
                    let mut acc = 0.0;
                    for k in 0..d {
                        acc += u[(p, k)] * u[(q, k)] / lam[k];
                    }
                    inv[[p, q]] = acc * gv;
                }
            }
            inv.into_dyn()
        })
    }

    // ---- conv / upsample ----

    /// 2-d convolution, input `(N, Cin, H, W)`, weight `(Cout, Cin, kh, kw)`.
    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xd = self.value(x);
        let wd = self.value(w);
        let (n, cin, h, wd_in) = (xd.shape()[0], xd.shape()[1], xd.shape()[2], xd.shape()[3]);
        let (cout, cin_w, kh, kw) = (wd.shape()[0], wd.shape()[1], wd.shape()[2], wd.shape()[3]);
        assert_eq!(cin, cin_w, "conv2d channel mismatch");
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd_in + 2 * pad - kw) / stride + 1;
        let k = cin * kh * kw;

        let w2 = wd
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order((cout, k))
            .unwrap();
        // im2col for the whole batch: (N, K, OH*OW)
        let mut cols = ndarray::Array3::<f64>::zeros((n, k, oh * ow));
        for ni in 0..n {
            for ci in 0..cin {
                for ki in 0..kh {
                    for kj in 0..kw {
                        let krow = ci * kh * kw + ki * kw + kj;
                        for oi in 0..oh {
                            let ii = (oi * stride + ki) as isize - pad as isize;
                            if ii < 0 || ii >= h as isize {
                                continue;
                            }
                            for oj in 0..ow {
                                let jj = (oj * stride + kj) as isize - pad as isize;
                                if jj < 0 || jj >= wd_in as isize {
                                    continue;
                                }
                                cols[[ni, krow, oi * ow + oj]] =
                                    xd[[ni, ci, ii as usize, jj as usize]];
                            }
                        }
                    }
                }
            }
        }
        let mut out = ndarray::Array4::<f64>::zeros((n, cout, oh, ow));
        for ni in 0..n {
            let col = cols.index_axis(Axis(0), ni);
            let o = w2.dot(&col); // (cout, oh*ow)
            out.index_axis_mut(Axis(0), ni).assign(
                &o.into_shape_with_order((cout, oh, ow)).unwrap(),
            );
        }
        let bias_used = b.is_some();
        if let Some(bv) = b {
            let bd = self.value(bv);
            for ni in 0..n {
                for co in 0..cout {
                    let bval = bd[[co]];
                    out.index_axis_mut(Axis(0), ni)
                        .index_axis_mut(Axis(0), co)
                        .mapv_inplace(|v| v + bval);
                }
            }
        }

        let mut parents = vec![x.0, w.0];
        if let Some(bv) = b {
            parents.push(bv.0);
        }
        let pvars: Vec<Var> = parents.iter().map(|&p| Var(p)).collect();
        let rq = self.requires(&pvars);
        let x_rq = self.nodes.borrow()[x.0].requires_grad;
        let xshape = (n, cin, h, wd_in);
        self.push(Node {
            data: out.into_dyn(),
            grad: None,
            parents,
            backward: if rq {
                Some(Box::new(move |g| {
                    let g4 = g
                        .to_owned()
                        .into_dimensionality::<ndarray::Ix4>()
                        .unwrap();
                    let mut gw = ndarray::Array2::<f64>::zeros((cout, k));
                    let mut gx: Option<ArrayD<f64>> = None;
                    if x_rq {
                        gx = Some(ArrayD::zeros(IxDyn(&[xshape.0, xshape.1, xshape.2, xshape.3])));
                    }
                    for ni in 0..n {
                        let gn = g4
                            .index_axis(Axis(0), ni)
                            .to_owned()
                            .into_shape_with_order((cout, oh * ow))
                            .unwrap();
                        let col = cols.index_axis(Axis(0), ni);
                        gw = gw + gn.dot(&col.t());
                        if let Some(gx_arr) = gx.as_mut() {
                            let gcol = w2.t().dot(&gn); // (K, OH*OW)
                            for ci in 0..cin {
                                for ki in 0..kh {
                                    for kj in 0..kw {
                                        let krow = ci * kh * kw + ki * kw + kj;
                                        for oi in 0..oh {
                                            let ii = (oi * stride + ki) as isize - pad as isize;
                                            if ii < 0 || ii >= xshape.2 as isize {
                                                continue;
                                            }
                                            for oj in 0..ow {
                                                let jj =
                                                    (oj * stride + kj) as isize - pad as isize;
                                                if jj < 0 || jj >= xshape.3 as isize {
                                                    continue;
                                                }
                                                gx_arr[[ni, ci, ii as usize, jj as usize]] +=
                                                    gcol[[krow, oi * ow + oj]];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    let gwd = gw
                        .into_shape_with_order((cout, cin, kh, kw))
                        .unwrap()
                        .into_dyn();
                    let mut grads = vec![gx, Some(gwd)];
                    if bias_used {
                        let mut gb = ndarray::Array1::<f64>::zeros(cout);
                        for ni in 0..n {
                            for co in 0..cout {
                                gb[co] += g4
                                    .index_axis(Axis(0), ni)
                                    .index_axis(Axis(0), co)
                                    .sum();
                            }
                        }
                        grads.push(Some(gb.into_dyn()));
                    }
                    grads
                }))
            } else {
                None
            },
            requires_grad: rq,
        })
    }

    /// Bilinear upsampling of `(N, C, h, w)` to `(N, C, oh, ow)`.
    pub fn upsample_bilinear(&self, x: Var, oh: usize, ow: usize) -> Var {
        let xd = self.value(x);
        let (n, c, h, w) = (xd.shape()[0], xd.shape()[1], xd.shape()[2], xd.shape()[3]);
        // precompute taps (align_corners = false convention)
        let taps = |o: usize, out_len: usize, in_len: usize| -> (usize, usize, f64) {
            let scale = in_len as f64 / out_len as f64;
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, in_len as f64 - 1.0);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        };
        let rows: Vec<(usize, usize, f64)> = (0..oh).map(|o| taps(o, oh, h)).collect();
        let colsm: Vec<(usize, usize, f64)> = (0..ow).map(|o| taps(o, ow, w)).collect();
        let mut out = ndarray::Array4::<f64>::zeros((n, c, oh, ow));
        for ni in 0..n {
            for ci in 0..c {
                for (oi, &(i0, i1, fi)) in rows.iter().enumerate() {
                    for (oj, &(j0, j1, fj)) in colsm.iter().enumerate() {
                        let v = xd[[ni, ci, i0, j0]] * (1.0 - fi) * (1.0 - fj)
                            + xd[[ni, ci, i1, j0]] * fi * (1.0 - fj)
                            + xd[[ni, ci, i0, j1]] * (1.0 - fi) * fj
                            + xd[[ni, ci, i1, j1]] * fi * fj;
                        out[[ni, ci, oi, oj]] = v;
                    }
                }
            }
        }
        self.unary(x, out.into_dyn(), move |g| {
            let g4 = g.to_owned().into_dimensionality::<ndarray::Ix4>().unwrap();
            let mut gx = ndarray::Array4::<f64>::zeros((n, c, h, w));
            for ni in 0..n {
                for ci in 0..c {
                    for (oi, &(i0, i1, fi)) in rows.iter().enumerate() {
                        for (oj, &(j0, j1, fj)) in colsm.iter().enumerate() {
                            let gv = g4[[ni, ci, oi, oj]];
                            gx[[ni, ci, i0, j0]] += gv * (1.0 - fi) * (1.0 - fj);
                            gx[[ni, ci, i1, j0]] += gv * fi * (1.0 - fj);
                            gx[[ni, ci, i0, j1]] += gv * (1.0 - fi) * fj;
                            gx[[ni, ci, i1, j1]] += gv * fi * fj;
                        }
                    }
                }
            }
            gx.into_dyn()
        })
    }

    // ---- composites ----

    /// Sum of elementwise product, i.e. `<a, b>` over all elements.
    pub fn dot_all(&self, a: Var, b: Var) -> Var {
        let m = self.mul(a, b);
        self.sum_all(m)
    }

    /// Squared L2 norm over all elements.
    pub fn sq_norm(&self, a: Var) -> Var {
        self.dot_all(a, a)
    }

    /// Trace of a square matrix.
    pub fn trace(&self, a: Var) -> Var {
        let d = self.shape(a)[0];
        let eye = ndarray::Array2::<f64>::eye(d).into_dyn();
        let id = self.constant(eye);
        self.dot_all(a, id)
    }

    // ---- backward ----

    /// Back-propagate from a scalar output.
    pub fn backward(&self, out: Var) {
        {
            let mut nodes = self.nodes.borrow_mut();
            assert_eq!(nodes[out.0].data.len(), 1, "backward needs a scalar output");
            let shape = nodes[out.0].data.shape().to_vec();
            nodes[out.0].grad = Some(ArrayD::from_elem(IxDyn(&shape), 1.0));
        }
        let n = self.nodes.borrow().len();
        for id in (0..=out.0.min(n - 1)).rev() {
            let (g, parents, backward) = {
                let mut nodes = self.nodes.borrow_mut();
                let node = &mut nodes[id];
                if node.grad.is_none() || node.backward.is_none() {
                    continue;
                }
                (node.grad.clone().unwrap(), node.parents.clone(), node.backward.take())
            };
            let contribs = (backward.as_ref().unwrap())(&g);
            {
                let mut nodes = self.nodes.borrow_mut();
                for (p, contrib) in parents.iter().zip(contribs) {
                    if let Some(cg) = contrib {
                        if !nodes[*p].requires_grad {
                            continue;
                        }
                        match nodes[*p].grad.as_mut() {
                            Some(existing) => *existing += &cg,
                            None => nodes[*p].grad = Some(cg),
                        }
                    }
                }
            }
            // restore so tapes can (in principle) be reused for inspection
            self.nodes.borrow_mut()[id].backward = backward;
        }
    }
}

/// Central finite-difference gradient of a scalar function of flat inputs.
///
/// Independent of the tape: used by tests and the acceptance suite to verify
/// analytic gradients.
pub fn finite_difference_grad(
    f: &mut dyn FnMut(&[ArrayD<f64>]) -> f64,
    inputs: &[ArrayD<f64>],
    which: usize,
    eps: f64,
) -> ArrayD<f64> {
    let mut grad = ArrayD::zeros(inputs[which].raw_dim());
    let mut work: Vec<ArrayD<f64>> = inputs.to_vec();
    let flat_len = inputs[which].len();
    for i in 0..flat_len {
        let orig = *work[which].iter().nth(i).unwrap();
        *work[which].iter_mut().nth(i).unwrap() = orig + eps;
        let fp = f(&work);
        *work[which].iter_mut().nth(i).unwrap() = orig - eps;
        let fm = f(&work);
        *work[which].iter_mut().nth(i).unwrap() = orig;
        *grad.iter_mut().nth(i).unwrap() = (fp - fm) / (2.0 * eps);
    }
    grad
}

/// Max relative error between two gradient arrays, with an absolute floor to
/// avoid blowing up on near-zero entries.
pub fn max_rel_err(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2, ArrayD};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n)
            .map(|_| {
                let u1: f64 = rng.gen_range(1e-12..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            })
            .collect();
        ArrayD::from_shape_vec(IxDyn(shape), v).unwrap()
    }

    /// Check tape gradients of `build` against finite differences.
    fn check(
        build: impl Fn(&Tape, &[Var]) -> Var,
        inputs: &[ArrayD<f64>],
        tol: f64,
    ) {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|d| tape.input(d.clone())).collect();
        let out = build(&tape, &vars);
        tape.backward(out);
        for which in 0..inputs.len() {
            let analytic = tape.grad(vars[which]).unwrap_or_else(|| {
                ArrayD::zeros(inputs[which].raw_dim())
            });
            let mut f = |xs: &[ArrayD<f64>]| {
                let t = Tape::new();
                let vs: Vec<Var> = xs.iter().map(|d| t.input(d.clone())).collect();
                t.scalar_value(build(&t, &vs))
            };
            let numeric = finite_difference_grad(&mut f, inputs, which, 1e-6);
            let err = max_rel_err(&analytic, &numeric);
            assert!(err < tol, "input {which}: rel err {err}");
        }
    }

    #[test]
    fn grad_elementwise_and_broadcast() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = randn(&mut rng, &[3, 4]);
        let b = randn(&mut rng, &[4]);
        check(
            |t, v| {
                let s = t.add(v[0], v[1]);
                let m = t.mul(s, v[0]);
                t.sum_all(m)
            },
            &[a.clone(), b.clone()],
            1e-6,
        );
        check(
            |t, v| {
                let d = t.div(v[0], t.add_scalar(t.square(v[1]), 1.0));
                t.mean_all(d)
            },
            &[a, b],
            1e-6,
        );
    }

    #[test]
    fn grad_nonlinearities() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = randn(&mut rng, &[5, 3]);
        check(|t, v| t.sum_all(t.relu(v[0])), &[a.clone()], 1e-5);
        check(|t, v| t.sum_all(t.sigmoid(v[0])), &[a.clone()], 1e-6);
        check(|t, v| t.sum_all(t.softplus(v[0])), &[a.clone()], 1e-6);
        check(|t, v| t.sum_all(t.exp(v[0])), &[a.clone()], 1e-6);
        let pos = a.mapv(|x| x.abs() + 0.5);
        check(|t, v| t.sum_all(t.ln(v[0])), &[pos.clone()], 1e-6);
        check(|t, v| t.sum_all(t.sqrt(v[0])), &[pos], 1e-6);
    }

    #[test]
    fn grad_softmax_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = randn(&mut rng, &[4, 3]);
        let b = randn(&mut rng, &[3, 5]);
        let w = randn(&mut rng, &[4, 5]);
        check(
            |t, v| {
                let y = t.softmax(t.matmul(v[0], v[1]));
                t.sum_all(t.mul(y, v[2]))
            },
            &[a, b, w],
            1e-5,
        );
    }

    #[test]
    fn grad_shape_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = randn(&mut rng, &[2, 3, 4]);
        let w = randn(&mut rng, &[4, 3, 2]);
        check(
            |t, v| {
                let p = t.permute(v[0], &[2, 1, 0]);
                t.sum_all(t.mul(p, v[1]))
            },
            &[a.clone(), w],
            1e-6,
        );
        let c = randn(&mut rng, &[2, 5, 4]);
        check(
            |t, v| {
                let cat = t.concat(&[v[0], v[1]], 1);
                let s = t.slice(cat, 1, 2, 6);
                t.sum_all(t.square(s))
            },
            &[a.clone(), c],
            1e-6,
        );
        check(
            |t, v| {
                let g = t.index_select(v[0], &[1, 1, 0]);
                t.sum_all(t.square(g))
            },
            &[a],
            1e-6,
        );
    }

    #[test]
    fn grad_conv_and_upsample() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = randn(&mut rng, &[2, 3, 6, 6]);
        let w = randn(&mut rng, &[4, 3, 3, 3]);
        let b = randn(&mut rng, &[4]);
        check(
            |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), 2, 1);
                t.sum_all(t.square(y))
            },
            &[x.clone(), w, b],
            1e-5,
        );
        check(
            |t, v| {
                let y = t.upsample_bilinear(v[0], 13, 11);
                t.sum_all(t.square(y))
            },
            &[x],
            1e-5,
        );
    }

    #[test]
    fn grad_sym_sqrt_logdet() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // build a well-conditioned SPD matrix; keep the input symmetric while
        // differentiating (perturb through X -> X X^T + I)
        let x = randn(&mut rng, &[4, 4]);
        check(
            |t, v| {
                let xt = t.transpose2(v[0]);
                let spd = t.add_scalar(t.matmul(v[0], xt), 0.0);
                let eye = t.constant(ndarray::Array2::<f64>::eye(4).into_dyn());
                let spd = t.add(spd, eye);
                let s = t.sym_sqrt(spd, 1e-9);
                t.trace(s)
            },
            &[x.clone()],
            1e-4,
        );
        check(
            |t, v| {
                let xt = t.transpose2(v[0]);
                let spd = t.matmul(v[0], xt);
                let eye = t.constant(ndarray::Array2::<f64>::eye(4).into_dyn());
                let spd = t.add(spd, eye);
                t.logdet_sym(spd, 1e-9)
            },
            &[x],
            1e-5,
        );
    }

    #[test]
    fn sym_sqrt_squares_back() {
        let tape = Tape::new();
        let a = arr2(&[[4.0, 0.0], [0.0, 9.0]]).into_dyn();
        let v = tape.input(a);
        let s = tape.sym_sqrt(v, 1e-12);
        let sv = tape.value(s);
        assert!((sv[[0, 0]] - 2.0).abs() < 1e-12);
        assert!((sv[[1, 1]] - 3.0).abs() < 1e-12);
        assert!(sv[[0, 1]].abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let tape = Tape::new();
        let v = tape.input(arr2(&[[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]]).into_dyn());
        let y = tape.value(tape.softmax(v));
        for row in y.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn requires_grad_skips_constants() {
        let tape = Tape::new();
        let c = tape.constant(arr1(&[1.0, 2.0]).into_dyn());
        let x = tape.input(arr1(&[3.0, 4.0]).into_dyn());
        let y = tape.sum_all(tape.mul(c, x));
        tape.backward(y);
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(x).unwrap(), arr1(&[1.0, 2.0]).into_dyn());
    }
}
