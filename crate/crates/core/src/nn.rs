//! Layer building blocks on top of the autodiff graph. Parameter names follow
//! [`crate::params::Init`]'s helpers.

use crate::autodiff::{conv_out_size, Graph, Var};
use crate::params::{Init, Scope};
use crate::tensor::Mat;

/// `x · weight + bias`.
pub fn linear(g: &mut Graph, s: &Scope, x: Var) -> Var {
    let y = g.matmul(x, s.get("weight"));
    g.add(y, s.get("bias"))
}

/// Row-wise layer norm with affine `gamma`, `beta`.
pub fn layer_norm(g: &mut Graph, s: &Scope, x: Var, eps: f64) -> Var {
    let n = g.layer_norm_rows(x, eps);
    let n = g.mul(n, s.get("gamma"));
    g.add(n, s.get("beta"))
}

/// Dense convolution over an `h x w` map via im2col; returns the output map
/// and its grid size.
pub fn conv2d(
    g: &mut Graph,
    s: &Scope,
    x: Var,
    (h, w): (usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
) -> (Var, (usize, usize)) {
    let cols = if k == 1 && stride == 1 && pad == 0 {
        x
    } else {
        g.im2col(x, h, w, k, stride, pad)
    };
    let y = linear(g, s, cols);
    (
        y,
        (
            conv_out_size(h, k, stride, pad),
            conv_out_size(w, k, stride, pad),
        ),
    )
}

/// Projection names used by [`attention`].
pub const ATTN_PROJ: [&str; 4] = ["q_proj", "k_proj", "v_proj", "out_proj"];

pub fn init_attention(init: &mut Init, name: &str, dim: usize) {
    let mut s = init.pp(name);
    for p in ATTN_PROJ {
        s.linear(p, dim, dim);
    }
}

pub struct AttnOut {
    pub out: Var,
    /// Per-head `[n_q, n_k]` attention weights.
    pub weights: Vec<Var>,
}

/// Multi-head scaled dot-product attention. `bias`, when given, is added to
/// every head's `[n_q, n_k]` score matrix (use `-inf` to exclude keys).
pub fn attention(
    g: &mut Graph,
    s: &Scope,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    heads: usize,
    bias: Option<&Mat>,
) -> AttnOut {
    let q = linear(g, &s.pp("q_proj"), q_in);
    let k = linear(g, &s.pp("k_proj"), k_in);
    let v = linear(g, &s.pp("v_proj"), v_in);
    let dim = g.shape(q).1;
    assert_eq!(
        dim % heads,
        0,
        "attention: width {dim} not divisible by {heads} heads"
    );
    let dh = dim / heads;
    let bias = bias.map(|b| g.constant(b.clone()));
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for m in 0..heads {
        let qh = g.slice_cols(q, m * dh, dh);
        let kh = g.slice_cols(k, m * dh, dh);
        let vh = g.slice_cols(v, m * dh, dh);
        let kt = g.transpose(kh);
        let scores = g.matmul(qh, kt);
        let mut scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        if let Some(b) = bias {
            scores = g.add(scores, b);
        }
        let a = g.softmax_rows(scores);
        outs.push(g.matmul(a, vh));
        weights.push(a);
    }
    let cat = if heads == 1 {
        outs[0]
    } else {
        g.concat_cols(&outs)
    };
    AttnOut {
        out: linear(g, &s.pp("out_proj"), cat),
        weights,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv2d_matches_direct_sum() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        Init::new(&mut store, &mut rng).conv("c", 3, 2, 1);
        let x = Mat::from_fn(16, 2, |r, c| (r as f64 * 0.1) - c as f64);
        let mut g = Graph::new();
        let b = store.bind_frozen(&mut g);
        let xv = g.constant(x.clone());
        let (y, (oh, ow)) = conv2d(&mut g, &b.root().pp("c"), xv, (4, 4), 3, 2, 1);
        assert_eq!((oh, ow), (2, 2));
        let wt = store.get("c.weight").unwrap();
        // output (1, 0) reads input rows centred at (2, 0)
        let mut expect = 0.0;
        for ky in 0..3 {
            for kx in 0..3 {
                let (iy, ix) = (2 + ky as isize - 1, kx as isize - 1);
                if (0..4).contains(&iy) && (0..4).contains(&ix) {
                    for c in 0..2 {
                        expect += x.at(iy as usize * 4 + ix as usize, c)
                            * wt.at((ky * 3 + kx) * 2 + c, 0);
                    }
                }
            }
        }
        assert!((g.value(y).at(2, 0) - expect).abs() < 1e-14);
    }
}
