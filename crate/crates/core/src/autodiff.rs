//! Tape-based reverse-mode differentiation over [`Mat`] values.
//!
//! A [`Graph`] records every operation eagerly (the forward value is computed
//! immediately) together with a closure that maps the output gradient onto
//! its inputs. Shape errors inside the graph are programming errors and
//! panic; public module entry points validate shapes before building graphs.

use crate::tensor::{BilinearTap, Mat};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type BackwardFn = Box<dyn Fn(&Mat, &[Node], &mut Grads)>;

struct Node {
    value: Mat,
    needs_grad: bool,
    backward: Option<BackwardFn>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads {
    grads: Vec<Option<Mat>>,
    needs: Vec<bool>,
}

impl Grads {
    #[inline]
    fn wants(&self, v: Var) -> bool {
        self.needs[v.0]
    }

    fn acc(&mut self, v: Var, g: Mat) {
        if !self.needs[v.0] {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    /// Gradient of the root with respect to `v`; `None` when `v` does not
    /// influence the root.
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Like [`Grads::get`] but returns zeros of `like`'s shape when absent.
    pub fn get_or_zeros(&self, v: Var, like: &Mat) -> Mat {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Mat::zeros(like.rows, like.cols))
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Row,
    Col,
    Scalar,
}

fn bcast_kind(a: &Mat, b: &Mat) -> Bcast {
    match b.shape() {
        s if s == a.shape() => Bcast::Same,
        (1, 1) => Bcast::Scalar,
        (1, c) if c == a.cols => Bcast::Row,
        (r, 1) if r == a.rows => Bcast::Col,
        _ => panic!(
            "cannot broadcast {}x{} onto {}x{}",
            b.rows, b.cols, a.rows, a.cols
        ),
    }
}

#[inline]
fn bcast_at(b: &Mat, kind: Bcast, r: usize, c: usize, cols: usize) -> f64 {
    match kind {
        Bcast::Same => b.data[r * cols + c],
        Bcast::Row => b.data[c],
        Bcast::Col => b.data[r],
        Bcast::Scalar => b.data[0],
    }
}

fn reduce_to(g: &Mat, kind: Bcast, target: (usize, usize)) -> Mat {
    match kind {
        Bcast::Same => g.clone(),
        Bcast::Scalar => Mat::scalar(g.sum()),
        Bcast::Row => {
            let mut out = Mat::zeros(1, target.1);
            for r in 0..g.rows {
                for (o, v) in out.data.iter_mut().zip(g.row(r)) {
                    *o += v;
                }
            }
            out
        }
        Bcast::Col => Mat::from_fn(target.0, 1, |r, _| g.row(r).iter().sum()),
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - m).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

fn logsumexp_row(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    let mut terms: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
    terms.sort_unstable_by(f64::total_cmp);
    m + terms.iter().sum::<f64>().ln()
}

pub fn softmax_rows(x: &Mat) -> Mat {
    let mut out = Mat::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        softmax_row(x.row(r), out.row_mut(r));
    }
    out
}

pub fn logsumexp_rows(x: &Mat) -> Mat {
    Mat::from_fn(x.rows, 1, |r, _| logsumexp_row(x.row(r)))
}

/// Output size of a strided window sweep.
pub fn conv_out_size(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn leaf(&mut self, value: Mat, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            needs_grad,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input (parameter or checked input).
    pub fn input(&mut self, value: Mat) -> Var {
        self.leaf(value, true)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.leaf(value, false)
    }

    fn push<F>(&mut self, value: Mat, parents: &[Var], backward: F) -> Var
    where
        F: Fn(&Mat, &[Node], &mut Grads) + 'static,
    {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            needs_grad,
            backward: if needs_grad {
                Some(Box::new(backward))
            } else {
                None
            },
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a `1x1` root.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(self.shape(root), (1, 1), "backward root must be a scalar");
        self.backward_with(root, Mat::scalar(1.0))
    }

    pub fn backward_with(&self, root: Var, seed: Mat) -> Grads {
        assert_eq!(self.shape(root), seed.shape(), "seed shape mismatch");
        let mut grads = Grads {
            grads: (0..self.nodes.len()).map(|_| None).collect(),
            needs: self.nodes.iter().map(|n| n.needs_grad).collect(),
        };
        grads.acc(root, seed);
        for i in (0..=root.0).rev() {
            let Some(bw) = &self.nodes[i].backward else {
                continue;
            };
            let Some(g) = grads.grads[i].take() else {
                continue;
            };
            bw(&g, &self.nodes, &mut grads);
            grads.grads[i] = Some(g);
        }
        grads
    }

    // ----- elementwise with broadcasting (the second operand broadcasts) -----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let kind = bcast_kind(av, bv);
        let cols = av.cols;
        let out = Mat::from_fn(av.rows, av.cols, |r, c| {
            av.data[r * cols + c] + bcast_at(bv, kind, r, c, cols)
        });
        let bshape = bv.shape();
        self.push(out, &[a, b], move |g, _, gr| {
            gr.acc(a, g.clone());
            if gr.wants(b) {
                gr.acc(b, reduce_to(g, kind, bshape));
            }
        })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let kind = bcast_kind(av, bv);
        let cols = av.cols;
        let out = Mat::from_fn(av.rows, av.cols, |r, c| {
            av.data[r * cols + c] * bcast_at(bv, kind, r, c, cols)
        });
        let bshape = bv.shape();
        self.push(out, &[a, b], move |g, nodes, gr| {
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            if gr.wants(a) {
                let ga = Mat::from_fn(g.rows, g.cols, |r, c| {
                    g.data[r * cols + c] * bcast_at(bv, kind, r, c, cols)
                });
                gr.acc(a, ga);
            }
            if gr.wants(b) {
                let gab = g.zip_map(av, |x, y| x * y);
                gr.acc(b, reduce_to(&gab, kind, bshape));
            }
        })
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, &[a], move |g, _, gr| gr.acc(a, g.scale(s)))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v + s);
        self.push(out, &[a], move |g, _, gr| gr.acc(a, g.clone()))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, df: fn(f64, f64) -> f64) -> Var {
        let out = self.value(a).map(f);
        let out_copy = out.clone();
        self.push(out, &[a], move |g, nodes, gr| {
            let x = &nodes[a.0].value;
            let ga = Mat::from_fn(g.rows, g.cols, |r, c| {
                let i = r * g.cols + c;
                g.data[i] * df(x.data[i], out_copy.data[i])
            });
            gr.acc(a, ga);
        })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, |_, y| y)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, |x, _| 1.0 / x)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, |x| 1.0 / x, |_, y| -y * y)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, |x, _| sigmoid(x))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, |x, _| gelu_grad(x))
    }

    // ----- linear algebra and layout -----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, &[a, b], move |g, nodes, gr| {
            if gr.wants(a) {
                gr.acc(a, g.matmul_t(&nodes[b.0].value));
            }
            if gr.wants(b) {
                gr.acc(b, nodes[a.0].value.t_matmul(g));
            }
        })
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, &[a], move |g, _, gr| gr.acc(a, g.transpose()))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let av = self.value(a);
        let (r0, c0) = av.shape();
        let out = Mat::from_vec(rows, cols, av.data.clone());
        self.push(out, &[a], move |g, _, gr| {
            gr.acc(a, Mat::from_vec(r0, c0, g.data.clone()))
        })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Mat> = parts.iter().map(|&p| self.value(p)).collect();
        let widths: Vec<usize> = mats.iter().map(|m| m.cols).collect();
        let out = Mat::concat_cols(&mats);
        let parts = parts.to_vec();
        self.push(out, &parts.clone(), move |g, _, gr| {
            let mut start = 0;
            for (&p, &w) in parts.iter().zip(&widths) {
                if gr.wants(p) {
                    gr.acc(p, g.slice_cols(start, w));
                }
                start += w;
            }
        })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Mat> = parts.iter().map(|&p| self.value(p)).collect();
        let heights: Vec<usize> = mats.iter().map(|m| m.rows).collect();
        let out = Mat::concat_rows(&mats);
        let parts = parts.to_vec();
        self.push(out, &parts.clone(), move |g, _, gr| {
            let mut start = 0;
            for (&p, &h) in parts.iter().zip(&heights) {
                if gr.wants(p) {
                    gr.acc(p, g.slice_rows(start, h));
                }
                start += h;
            }
        })
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        let (rows, cols) = av.shape();
        let out = av.slice_cols(start, len);
        self.push(out, &[a], move |g, _, gr| {
            let mut ga = Mat::zeros(rows, cols);
            for r in 0..rows {
                ga.row_mut(r)[start..start + len].copy_from_slice(g.row(r));
            }
            gr.acc(a, ga);
        })
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        let (rows, cols) = av.shape();
        let out = av.slice_rows(start, len);
        self.push(out, &[a], move |g, _, gr| {
            let mut ga = Mat::zeros(rows, cols);
            ga.data[start * cols..(start + len) * cols].copy_from_slice(&g.data);
            gr.acc(a, ga);
        })
    }

    // ----- reductions -----

    pub fn sum(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (rows, cols) = av.shape();
        let out = Mat::scalar(av.sum());
        self.push(out, &[a], move |g, _, gr| {
            gr.acc(a, Mat::full(rows, cols, g.item()))
        })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Column sums, `[m, n] -> [1, n]`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let rows = av.rows;
        let out = reduce_to(av, Bcast::Row, (1, av.cols));
        self.push(out, &[a], move |g, _, gr| {
            let mut ga = Mat::zeros(rows, g.cols);
            for r in 0..rows {
                ga.row_mut(r).copy_from_slice(&g.data);
            }
            gr.acc(a, ga);
        })
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let n = self.value(a).rows as f64;
        let s = self.sum_rows(a);
        self.scale(s, 1.0 / n)
    }

    /// Column maxima, `[m, n] -> [1, n]`; the gradient flows to the first
    /// maximal entry of each column.
    pub fn max_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (rows, cols) = av.shape();
        let mut arg = vec![0usize; cols];
        let mut out = Mat::full(1, cols, f64::NEG_INFINITY);
        for r in 0..rows {
            for c in 0..cols {
                let v = av.at(r, c);
                if v > out.data[c] {
                    out.data[c] = v;
                    arg[c] = r;
                }
            }
        }
        self.push(out, &[a], move |g, _, gr| {
            let mut ga = Mat::zeros(rows, cols);
            for c in 0..cols {
                *ga.at_mut(arg[c], c) = g.data[c];
            }
            gr.acc(a, ga);
        })
    }

    /// Row sums, `[m, n] -> [m, 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let cols = av.cols;
        let out = reduce_to(av, Bcast::Col, (av.rows, 1));
        self.push(out, &[a], move |g, _, gr| {
            gr.acc(a, Mat::from_fn(g.rows, cols, |r, _| g.data[r]))
        })
    }

    // ----- row-wise normalisations -----

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a));
        let s = out.clone();
        self.push(out, &[a], move |g, _, gr| {
            let mut ga = Mat::zeros(g.rows, g.cols);
            for r in 0..g.rows {
                let (gs, ss) = (g.row(r), s.row(r));
                let dot: f64 = gs.iter().zip(ss).map(|(x, y)| x * y).sum();
                for ((o, &gv), &sv) in ga.row_mut(r).iter_mut().zip(gs).zip(ss) {
                    *o = sv * (gv - dot);
                }
            }
            gr.acc(a, ga);
        })
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let lse = logsumexp_rows(av);
        let out = Mat::from_fn(av.rows, av.cols, |r, c| av.at(r, c) - lse.data[r]);
        let s = softmax_rows(av);
        self.push(out, &[a], move |g, _, gr| {
            let mut ga = Mat::zeros(g.rows, g.cols);
            for r in 0..g.rows {
                let total: f64 = g.row(r).iter().sum();
                for c in 0..g.cols {
                    *ga.at_mut(r, c) = g.at(r, c) - s.at(r, c) * total;
                }
            }
            gr.acc(a, ga);
        })
    }

    /// Stable row-wise log-sum-exp, `[m, n] -> [m, 1]`. Terms are summed in
    /// ascending order, so the result does not depend on the column order.
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = logsumexp_rows(av);
        let s = softmax_rows(av);
        self.push(out, &[a], move |g, _, gr| {
            let ga = Mat::from_fn(s.rows, s.cols, |r, c| g.data[r] * s.at(r, c));
            gr.acc(a, ga);
        })
    }

    /// Normalises each row to zero mean and unit variance (no affine part).
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let av = self.value(a);
        let n = av.cols as f64;
        let mut xhat = Mat::zeros(av.rows, av.cols);
        let mut inv_std = vec![0.0; av.rows];
        for r in 0..av.rows {
            let row = av.row(r);
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mu) * is;
            }
        }
        let xh = xhat.clone();
        self.push(xhat, &[a], move |g, _, gr| {
            let mut ga = Mat::zeros(g.rows, g.cols);
            for r in 0..g.rows {
                let (gs, xs) = (g.row(r), xh.row(r));
                let mg = gs.iter().sum::<f64>() / n;
                let mgx = gs.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>() / n;
                for ((o, &gv), &xv) in ga.row_mut(r).iter_mut().zip(gs).zip(xs) {
                    *o = inv_std[r] * (gv - mg - xv * mgx);
                }
            }
            gr.acc(a, ga);
        })
    }

    // ----- spatial operators on [h*w, c] maps -----

    /// Unfolds `k x k` windows into rows: output is `[oh*ow, k*k*c]` with
    /// column index `(ky * k + kx) * c + channel`. Out-of-image taps are zero.
    pub fn im2col(
        &mut self,
        a: Var,
        h: usize,
        w: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Var {
        let av = self.value(a);
        let c = av.cols;
        assert_eq!(av.rows, h * w, "im2col: grid {h}x{w} vs {} rows", av.rows);
        let oh = conv_out_size(h, k, stride, pad);
        let ow = conv_out_size(w, k, stride, pad);
        let taps = im2col_taps(h, w, k, stride, pad);
        let mut out = Mat::zeros(oh * ow, k * k * c);
        for (o, row_taps) in taps.iter().enumerate() {
            let dst = out.row_mut(o);
            for (t, src) in row_taps.iter().enumerate() {
                if let Some(src) = src {
                    dst[t * c..(t + 1) * c].copy_from_slice(av.row(*src));
                }
            }
        }
        let rows = av.rows;
        self.push(out, &[a], move |g, _, gr| {
            let mut ga = Mat::zeros(rows, c);
            for (o, row_taps) in taps.iter().enumerate() {
                let src_row = g.row(o);
                for (t, dst) in row_taps.iter().enumerate() {
                    if let Some(dst) = dst {
                        for (acc, v) in ga
                            .row_mut(*dst)
                            .iter_mut()
                            .zip(&src_row[t * c..(t + 1) * c])
                        {
                            *acc += v;
                        }
                    }
                }
            }
            gr.acc(a, ga);
        })
    }

    /// Stride-1 depthwise convolution with zero padding. `weight` is
    /// `[k*k, c]` with row `ky * k + kx`.
    pub fn depthwise_conv(
        &mut self,
        a: Var,
        weight: Var,
        h: usize,
        w: usize,
        k: usize,
        pad: usize,
    ) -> Var {
        let (av, wv) = (self.value(a), self.value(weight));
        let c = av.cols;
        assert_eq!(wv.shape(), (k * k, c), "depthwise weight shape");
        let oh = conv_out_size(h, k, 1, pad);
        let ow = conv_out_size(w, k, 1, pad);
        let taps = im2col_taps(h, w, k, 1, pad);
        let mut out = Mat::zeros(oh * ow, c);
        for (o, row_taps) in taps.iter().enumerate() {
            let dst = out.row_mut(o);
            for (t, src) in row_taps.iter().enumerate() {
                if let Some(src) = src {
                    let (x, wt) = (av.row(*src), wv.row(t));
                    for ch in 0..c {
                        dst[ch] += x[ch] * wt[ch];
                    }
                }
            }
        }
        self.push(out, &[a, weight], move |g, nodes, gr| {
            let (av, wv) = (&nodes[a.0].value, &nodes[weight.0].value);
            let want_a = gr.wants(a);
            let want_w = gr.wants(weight);
            let mut ga = Mat::zeros(av.rows, c);
            let mut gw = Mat::zeros(k * k, c);
            for (o, row_taps) in taps.iter().enumerate() {
                let go = g.row(o);
                for (t, src) in row_taps.iter().enumerate() {
                    let Some(src) = src else { continue };
                    if want_a {
                        let wt = wv.row(t);
                        let dst = ga.row_mut(*src);
                        for ch in 0..c {
                            dst[ch] += go[ch] * wt[ch];
                        }
                    }
                    if want_w {
                        let x = av.row(*src);
                        let dst = gw.row_mut(t);
                        for ch in 0..c {
                            dst[ch] += go[ch] * x[ch];
                        }
                    }
                }
            }
            if want_a {
                gr.acc(a, ga);
            }
            if want_w {
                gr.acc(weight, gw);
            }
        })
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&mut self, a: Var, h: usize, w: usize, factor: usize) -> Var {
        let av = self.value(a);
        let c = av.cols;
        let (oh, ow) = (h * factor, w * factor);
        let src: Vec<usize> = (0..oh * ow)
            .map(|i| (i / ow / factor) * w + (i % ow) / factor)
            .collect();
        let mut out = Mat::zeros(oh * ow, c);
        for (o, &s) in src.iter().enumerate() {
            out.row_mut(o).copy_from_slice(av.row(s));
        }
        let rows = av.rows;
        self.push(out, &[a], move |g, _, gr| {
            let mut ga = Mat::zeros(rows, c);
            for (o, &s) in src.iter().enumerate() {
                for (acc, v) in ga.row_mut(s).iter_mut().zip(g.row(o)) {
                    *acc += v;
                }
            }
            gr.acc(a, ga);
        })
    }

    /// Multi-head, multi-point bilinear gather used by deformable attention.
    ///
    /// * `value`: `[h*w, c]`, split into `heads` contiguous channel groups.
    /// * `coords`: `[n, heads*points*2]`, absolute `(y, x)` sample positions
    ///   for head `m`, point `k` at columns `(m*points + k)*2 ..+2`.
    /// * `weights`: `[n, heads*points]` mixing weights.
    ///
    /// Output row `q`, head `m` is `Σ_k weights[q, m*points+k] ·
    /// bilinear(value_m, coords[q, m, k])`.
    #[allow(clippy::too_many_arguments)]
    pub fn deform_sample(
        &mut self,
        value: Var,
        coords: Var,
        weights: Var,
        h: usize,
        w: usize,
        heads: usize,
        points: usize,
    ) -> Var {
        let (vv, cv, wv) = (self.value(value), self.value(coords), self.value(weights));
        let c = vv.cols;
        let dh = c / heads;
        let n = cv.rows;
        assert_eq!(vv.rows, h * w, "deform_sample: value grid");
        assert_eq!(c % heads, 0, "deform_sample: channels vs heads");
        assert_eq!(cv.cols, heads * points * 2, "deform_sample: coords width");
        assert_eq!(
            wv.shape(),
            (n, heads * points),
            "deform_sample: weights shape"
        );
        let mut taps = Vec::with_capacity(n * heads * points);
        let mut out = Mat::zeros(n, c);
        for q in 0..n {
            for m in 0..heads {
                for k in 0..points {
                    let j = m * points + k;
                    let tap = BilinearTap::new(cv.at(q, 2 * j), cv.at(q, 2 * j + 1), h, w);
                    let a = wv.at(q, j);
                    let (r00, r01) = (tap.y0 * w + tap.x0, tap.y0 * w + tap.x1);
                    let (r10, r11) = (tap.y1 * w + tap.x0, tap.y1 * w + tap.x1);
                    for d in 0..dh {
                        let ch = m * dh + d;
                        let s = tap.lerp(
                            vv.at(r00, ch),
                            vv.at(r01, ch),
                            vv.at(r10, ch),
                            vv.at(r11, ch),
                        );
                        *out.at_mut(q, ch) += a * s;
                    }
                    taps.push(tap);
                }
            }
        }
        self.push(out, &[value, coords, weights], move |g, nodes, gr| {
            let (vv, wv) = (&nodes[value.0].value, &nodes[weights.0].value);
            let mut gv = Mat::zeros(vv.rows, c);
            let mut gc = Mat::zeros(n, heads * points * 2);
            let mut gw = Mat::zeros(n, heads * points);
            for q in 0..n {
                for m in 0..heads {
                    for k in 0..points {
                        let j = m * points + k;
                        let tap = &taps[q * heads * points + j];
                        let a = wv.at(q, j);
                        let (r00, r01) = (tap.y0 * w + tap.x0, tap.y0 * w + tap.x1);
                        let (r10, r11) = (tap.y1 * w + tap.x0, tap.y1 * w + tap.x1);
                        let (wy, wx) = (tap.wy, tap.wx);
                        let (mut dy, mut dx, mut da) = (0.0, 0.0, 0.0);
                        for d in 0..dh {
                            let ch = m * dh + d;
                            let go = g.at(q, ch);
                            if go == 0.0 {
                                continue;
                            }
                            let (v00, v01, v10, v11) = (
                                vv.at(r00, ch),
                                vv.at(r01, ch),
                                vv.at(r10, ch),
                                vv.at(r11, ch),
                            );
                            da += go * tap.lerp(v00, v01, v10, v11);
                            dy += go * ((1.0 - wx) * (v10 - v00) + wx * (v11 - v01));
                            dx += go * ((1.0 - wy) * (v01 - v00) + wy * (v11 - v10));
                            let ga = go * a;
                            *gv.at_mut(r00, ch) += ga * (1.0 - wy) * (1.0 - wx);
                            *gv.at_mut(r01, ch) += ga * (1.0 - wy) * wx;
                            *gv.at_mut(r10, ch) += ga * wy * (1.0 - wx);
                            *gv.at_mut(r11, ch) += ga * wy * wx;
                        }
                        *gw.at_mut(q, j) = da;
                        if tap.y_inside {
                            *gc.at_mut(q, 2 * j) = a * dy;
                        }
                        if tap.x_inside {
                            *gc.at_mut(q, 2 * j + 1) = a * dx;
                        }
                    }
                }
            }
            gr.acc(value, gv);
            gr.acc(coords, gc);
            gr.acc(weights, gw);
        })
    }
}

/// For each output position, the source row of every kernel tap (or `None`
/// for padding).
fn im2col_taps(h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Vec<Vec<Option<usize>>> {
    let oh = conv_out_size(h, k, stride, pad);
    let ow = conv_out_size(w, k, stride, pad);
    let mut taps = Vec::with_capacity(oh * ow);
    for oy in 0..oh {
        for ox in 0..ow {
            let mut row = Vec::with_capacity(k * k);
            for ky in 0..k {
                for kx in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    row.push(
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            Some(iy as usize * w + ix as usize)
                        } else {
                            None
                        },
                    );
                }
            }
            taps.push(row);
        }
    }
    taps
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central-difference check of `d sum(f(x) * probe) / dx` for a single
    /// input.
    fn check_unary(x: Mat, build: impl Fn(&mut Graph, Var) -> Var) {
        let probe_for = |m: &Mat| {
            Mat::from_fn(m.rows, m.cols, |r, c| {
                0.3 + 0.1 * ((r * 7 + c * 3) % 5) as f64
            })
        };
        let eval = |x: &Mat| {
            let mut g = Graph::new();
            let v = g.input(x.clone());
            let y = build(&mut g, v);
            let p = probe_for(g.value(y));
            g.value(y).zip_map(&p, |a, b| a * b).sum()
        };
        let mut g = Graph::new();
        let v = g.input(x.clone());
        let y = build(&mut g, v);
        let p = probe_for(g.value(y));
        let grads = g.backward_with(y, p);
        let analytic = grads.get(v).unwrap().clone();
        let eps = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data[i] += eps;
            let mut xm = x.clone();
            xm.data[i] -= eps;
            let num = (eval(&xp) - eval(&xm)) / (2.0 * eps);
            assert!(
                (num - analytic.data[i]).abs() < 1e-6 * (1.0 + num.abs()),
                "entry {i}: numeric {num} analytic {}",
                analytic.data[i]
            );
        }
    }

    fn sample(rows: usize, cols: usize) -> Mat {
        Mat::from_fn(rows, cols, |r, c| {
            ((r * 31 + c * 17) % 13) as f64 / 6.0 - 1.0 + 0.01 * c as f64
        })
    }

    #[test]
    fn elementwise_and_norm_gradients() {
        check_unary(sample(3, 4), |g, x| g.gelu(x));
        check_unary(sample(3, 4), |g, x| g.sigmoid(x));
        check_unary(sample(3, 4), |g, x| g.softplus(x));
        check_unary(sample(3, 4), |g, x| g.softmax_rows(x));
        check_unary(sample(3, 4), |g, x| g.log_softmax_rows(x));
        check_unary(sample(3, 4), |g, x| g.logsumexp_rows(x));
        check_unary(sample(3, 4), |g, x| g.layer_norm_rows(x, 1e-6));
        check_unary(sample(3, 4), |g, x| g.transpose(x));
        check_unary(sample(3, 4), |g, x| g.max_rows(x));
        check_unary(sample(3, 4), |g, x| g.sum_cols(x));
        check_unary(sample(3, 4), |g, x| g.mean_rows(x));
    }

    #[test]
    fn broadcast_gradients() {
        let other = sample(1, 4).map(|v| v + 2.0);
        check_unary(sample(3, 4), |g, x| {
            let b = g.constant(sample(3, 1));
            let y = g.mul(x, b);
            let c = g.constant(other.clone());
            g.add(y, c)
        });
        check_unary(sample(1, 4), |g, b| {
            let a = g.constant(sample(3, 4));
            g.mul(a, b)
        });
        check_unary(sample(3, 1), |g, b| {
            let a = g.constant(sample(3, 4));
            g.add(a, b)
        });
    }

    #[test]
    fn spatial_gradients() {
        // 3x3 grid, 2 channels
        check_unary(sample(9, 2), |g, x| g.im2col(x, 3, 3, 3, 1, 1));
        check_unary(sample(16, 2), |g, x| g.im2col(x, 4, 4, 2, 2, 0));
        check_unary(sample(4, 3), |g, x| g.upsample_nearest(x, 2, 2, 2));
        check_unary(sample(9, 2), |g, x| {
            let wt = g.constant(sample(9, 2));
            g.depthwise_conv(x, wt, 3, 3, 3, 1)
        });
        check_unary(sample(9, 2), |g, wt| {
            let x = g.constant(sample(9, 2));
            g.depthwise_conv(x, wt, 3, 3, 3, 1)
        });
    }

    #[test]
    fn deform_sample_gradients() {
        let coords = Mat::from_fn(3, 2 * 2 * 2, |r, c| {
            0.3 + 0.37 * ((r * 5 + c * 3) % 7) as f64 * 0.4
        });
        let weights = sample(3, 4);
        let value = sample(9, 4);
        check_unary(value.clone(), |g, v| {
            let c = g.constant(coords.clone());
            let wt = g.constant(weights.clone());
            g.deform_sample(v, c, wt, 3, 3, 2, 2)
        });
        check_unary(coords.clone(), |g, c| {
            let v = g.constant(value.clone());
            let wt = g.constant(weights.clone());
            g.deform_sample(v, c, wt, 3, 3, 2, 2)
        });
        check_unary(weights.clone(), |g, wt| {
            let v = g.constant(value.clone());
            let c = g.constant(coords.clone());
            g.deform_sample(v, c, wt, 3, 3, 2, 2)
        });
    }

    #[test]
    fn constants_do_not_record_backward() {
        let mut g = Graph::new();
        let a = g.constant(Mat::scalar(2.0));
        let b = g.exp(a);
        let x = g.input(Mat::scalar(3.0));
        let y = g.mul(x, b);
        let grads = g.backward(y);
        assert!(grads.get(a).is_none());
        assert!((grads.get(x).unwrap().item() - 2f64.exp()).abs() < 1e-15);
    }
}
