#![allow(dead_code)]

pub mod cases;

use cdnet::autodiff::{Graph, Var};
use cdnet::params::{Bindings, ParamStore, Scope};
use cdnet::tensor::{Mask, Mat};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
pub const FD_SEEDS: u64 = 20;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Mat {
    Mat::from_fn(rows, cols, |_, _| {
        std * rng.sample::<f64, _>(StandardNormal)
    })
}

pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, p: f64) -> Mask {
    Mask::from_fn(h, w, |_, _| rng.gen_bool(p))
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over the checked
    /// coordinates.
    pub rel_err: f64,
    pub analytic_norm: f64,
    pub checked: usize,
    /// Coordinates left out because the objective is not smooth there
    /// (a hard attention mask flips within one step).
    pub skipped: usize,
}

impl GradCheck {
    pub fn passes(&self) -> bool {
        self.rel_err < FD_TOL && self.analytic_norm > 1e-10 && self.skipped * 20 <= self.checked
    }
}

/// One-sided differences that disagree by more than this (relative) mark a
/// jump or kink inside the stencil.
const KINK_TOL: f64 = 1e-3;

/// Scalar objective `Σ_k ⟨out_k, R_k⟩` with fixed random `R_k`, so that every
/// output entry contributes with its own weight.
fn objective(
    store: &ParamStore,
    proj: &mut Vec<Mat>,
    seed: u64,
    f: &impl Fn(&mut Graph, &Scope) -> Vec<Var>,
) -> (Graph, Var, Bindings) {
    let mut g = Graph::new();
    let b = store.bind(&mut g);
    let outs = f(&mut g, &b.root());
    if proj.is_empty() {
        let mut r = rng(seed ^ 0x5EED);
        for &o in &outs {
            let (rows, cols) = g.shape(o);
            proj.push(randn(&mut r, rows, cols, 1.0));
        }
    }
    let mut total = g.constant(Mat::scalar(0.0));
    for (&o, p) in outs.iter().zip(proj.iter()) {
        let p = g.constant(p.clone());
        let prod = g.mul(o, p);
        let s = g.sum(prod);
        total = g.add(total, s);
    }
    (g, total, b)
}

/// Central-difference check of `f` with respect to the tensors of `store`
/// whose names satisfy `filter`, on at most `max_coords` randomly chosen
/// scalars.
pub fn grad_check_where(
    store: &ParamStore,
    filter: impl Fn(&str) -> bool,
    max_coords: usize,
    seed: u64,
    f: impl Fn(&mut Graph, &Scope) -> Vec<Var>,
) -> GradCheck {
    let mut proj = Vec::new();
    let (g, root, b) = objective(store, &mut proj, seed, &f);
    let grads = g.backward(root);
    let analytic = b.gradients(&grads, store);

    let coords: Vec<(String, usize)> = store
        .iter()
        .filter(|(n, _)| filter(n))
        .flat_map(|(n, m)| (0..m.len()).map(move |i| (n.clone(), i)))
        .collect();
    let mut r = rng(seed ^ 0xC00D);
    let picked: Vec<usize> = if coords.len() <= max_coords {
        (0..coords.len()).collect()
    } else {
        sample(&mut r, coords.len(), max_coords).into_vec()
    };

    let eval = |s: &ParamStore| {
        let mut p = proj.clone();
        let (g, root, _) = objective(s, &mut p, seed, &f);
        g.value(root).item()
    };
    let f0 = eval(store);
    let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
    let mut skipped = 0;
    let mut work = store.clone();
    for &k in &picked {
        let (name, i) = &coords[k];
        let x0 = store.get(name).unwrap().data[*i];
        work.get_mut(name).unwrap().data[*i] = x0 + FD_STEP;
        let up = eval(&work);
        work.get_mut(name).unwrap().data[*i] = x0 - FD_STEP;
        let down = eval(&work);
        work.get_mut(name).unwrap().data[*i] = x0;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let (fwd, bwd) = ((up - f0) / FD_STEP, (f0 - down) / FD_STEP);
        if (fwd - bwd).abs() > KINK_TOL * (1.0 + numeric.abs()) {
            skipped += 1;
            continue;
        }
        let a = analytic.get(name).unwrap().data[*i];
        diff2 += (a - numeric).powi(2);
        a2 += a * a;
        n2 += numeric * numeric;
    }
    let denom = a2.sqrt().max(n2.sqrt());
    GradCheck {
        rel_err: if denom > 0.0 {
            diff2.sqrt() / denom
        } else {
            0.0
        },
        analytic_norm: a2.sqrt(),
        checked: picked.len() - skipped,
        skipped,
    }
}

pub fn grad_check(
    store: &ParamStore,
    max_coords: usize,
    seed: u64,
    f: impl Fn(&mut Graph, &Scope) -> Vec<Var>,
) -> GradCheck {
    grad_check_where(store, |_| true, max_coords, seed, f)
}

/// Worst error and smallest gradient norm of `case` over `FD_SEEDS` seeds.
pub fn worst_over_seeds(case: fn(u64) -> GradCheck) -> GradCheck {
    (0..FD_SEEDS).map(case).fold(
        GradCheck {
            rel_err: 0.0,
            analytic_norm: f64::INFINITY,
            checked: 0,
            skipped: 0,
        },
        |acc, c| GradCheck {
            rel_err: acc.rel_err.max(c.rel_err),
            analytic_norm: acc.analytic_norm.min(c.analytic_norm),
            checked: acc.checked + c.checked,
            skipped: acc.skipped + c.skipped,
        },
    )
}
