//! Training objective: a Hungarian-matched set loss on the query outputs plus
//! a weighted per-pixel cross-entropy on the aggregated dense logits,
//! combined as `λ_set · L_set + λ_pixel · L_pixel`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{self, Graph, Var};
use crate::decoder::{DenseLogits, QuerySet, BG, CHG, NO_OBJECT, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::tensor::{Mask, Mat};

/// Side of the square block that one logit cell covers.
pub const TARGET_STRIDE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PixelWeights {
    Fixed { bg: f64, chg: f64 },
    Auto,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum PixelWeightsRepr {
    Pair([f64; 2]),
    Name(String),
}

impl Serialize for PixelWeights {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match *self {
            PixelWeights::Fixed { bg, chg } => PixelWeightsRepr::Pair([bg, chg]),
            PixelWeights::Auto => PixelWeightsRepr::Name("auto".into()),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for PixelWeights {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match PixelWeightsRepr::deserialize(d)? {
            PixelWeightsRepr::Pair([bg, chg]) => Ok(PixelWeights::Fixed { bg, chg }),
            PixelWeightsRepr::Name(n) if n == "auto" => Ok(PixelWeights::Auto),
            PixelWeightsRepr::Name(n) => Err(serde::de::Error::custom(format!(
                "pixel_class_weights must be \"auto\" or [w_bg, w_chg], got \"{n}\""
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_set: f64,
    pub lambda_pixel: f64,
    pub class_cost: f64,
    pub mask_bce_cost: f64,
    pub dice_cost: f64,
    pub class_w: f64,
    pub bce_w: f64,
    pub dice_w: f64,
    pub noobj_class_weight: f64,
    pub pixel_class_weights: PixelWeights,
    pub dice_eps: f64,
    /// Also apply the set loss to every intermediate decoder prediction.
    pub deep_supervision: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_set: 0.1,
            lambda_pixel: 10.0,
            class_cost: 2.0,
            mask_bce_cost: 5.0,
            dice_cost: 5.0,
            class_w: 2.0,
            bce_w: 5.0,
            dice_w: 5.0,
            noobj_class_weight: 0.1,
            pixel_class_weights: PixelWeights::Auto,
            dice_eps: 1.0,
            deep_supervision: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("lambda_set", self.lambda_set),
            ("lambda_pixel", self.lambda_pixel),
            ("class_cost", self.class_cost),
            ("mask_bce_cost", self.mask_bce_cost),
            ("dice_cost", self.dice_cost),
            ("class_w", self.class_w),
            ("bce_w", self.bce_w),
            ("dice_w", self.dice_w),
            ("noobj_class_weight", self.noobj_class_weight),
            ("dice_eps", self.dice_eps),
        ];
        for (name, v) in named {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if let PixelWeights::Fixed { bg, chg } = self.pixel_class_weights {
            if !(bg.is_finite() && chg.is_finite() && bg >= 0.0 && chg >= 0.0) {
                return Err(Error::Config(
                    "pixel_class_weights must be finite and >= 0".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Binary-semantic targets on the logit grid: at most one bg and one chg
/// mask, bg first.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetSet {
    pub masks: Vec<Mask>,
    pub labels: Vec<usize>,
}

impl TargetSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// `(query, target)` sorted by query.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SetLossBreakdown {
    pub class: f64,
    pub bce: f64,
    pub dice: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub set: f64,
    pub set_class: f64,
    pub set_bce: f64,
    pub set_dice: f64,
    pub pixel: f64,
}

impl std::fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "total={} set={} (class={} bce={} dice={}) pixel={}",
            self.total, self.set, self.set_class, self.set_bce, self.set_dice, self.pixel
        )
    }
}

// ----- targets -----

/// Area-average of `gt` over `TARGET_STRIDE`-square blocks, thresholded
/// strictly above one half. Trailing rows/columns that do not fill a block
/// are dropped, matching the encoder's floor division.
pub fn downsample_gt(gt: &Mask) -> Result<Mask> {
    if !gt.is_binary() {
        return Err(Error::Data("ground-truth mask is not binary".into()));
    }
    let (h, w) = (gt.h / TARGET_STRIDE, gt.w / TARGET_STRIDE);
    let half = TARGET_STRIDE * TARGET_STRIDE / 2;
    Ok(Mask::from_fn(h, w, |y, x| {
        let mut n = 0;
        for dy in 0..TARGET_STRIDE {
            for dx in 0..TARGET_STRIDE {
                n += gt.at(y * TARGET_STRIDE + dy, x * TARGET_STRIDE + dx) as usize;
            }
        }
        n > half
    }))
}

pub fn targets_from_grid(chg: &Mask) -> TargetSet {
    let mut ts = TargetSet {
        masks: Vec::new(),
        labels: Vec::new(),
    };
    let n = chg.h * chg.w;
    let ones = chg.count_ones();
    if ones < n {
        ts.masks.push(chg.complement());
        ts.labels.push(BG);
    }
    if ones > 0 {
        ts.masks.push(chg.clone());
        ts.labels.push(CHG);
    }
    ts
}

pub fn build_targets(gt: &Mask) -> Result<TargetSet> {
    Ok(targets_from_grid(&downsample_gt(gt)?))
}

// ----- matching -----

/// Mean binary cross-entropy between `sigmoid(logits)` and `target`,
/// evaluated as `softplus(x) - x*t`.
pub fn mean_bce_logits(logits: &[f64], target: &Mask) -> f64 {
    let s: f64 = logits
        .iter()
        .zip(&target.data)
        .map(|(&x, &t)| autodiff::softplus(x) - x * t as f64)
        .sum();
    s / logits.len() as f64
}

pub fn dice_loss(pred: &[f64], gt: &Mask, eps: f64) -> f64 {
    let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
    for (&p, &t) in pred.iter().zip(&gt.data) {
        inter += p * t as f64;
        sp += p;
        sg += t as f64;
    }
    1.0 - (2.0 * inter + eps) / (sp + sg + eps)
}

fn check_queries(qs: &QuerySet) -> Result<()> {
    if qs.class_logits.cols != NUM_CLASSES || qs.mask_logits.rows != qs.class_logits.rows {
        return Err(Error::Shape(format!(
            "query set: class logits {:?}, mask logits {:?}",
            qs.class_logits.shape(),
            qs.mask_logits.shape()
        )));
    }
    if qs.mask_logits.cols != qs.h * qs.w {
        return Err(Error::Shape(
            "mask logits do not match the grid size".into(),
        ));
    }
    Ok(())
}

fn check_targets(qs: &QuerySet, ts: &TargetSet) -> Result<()> {
    for m in &ts.masks {
        if (m.h, m.w) != (qs.h, qs.w) {
            return Err(Error::Shape(format!(
                "target mask {}x{} vs prediction grid {}x{}",
                m.h, m.w, qs.h, qs.w
            )));
        }
    }
    Ok(())
}

pub fn match_cost(qs: &QuerySet, ts: &TargetSet, cfg: &LossConfig) -> Result<Mat> {
    check_queries(qs)?;
    check_targets(qs, ts)?;
    let probs = autodiff::softmax_rows(&qs.class_logits);
    let q = qs.num_queries();
    let mut cost = Mat::zeros(q, ts.len());
    for qi in 0..q {
        let logits = qs.mask_logits.row(qi);
        let sig: Vec<f64> = logits.iter().map(|&x| autodiff::sigmoid(x)).collect();
        for (ti, (mask, &label)) in ts.masks.iter().zip(&ts.labels).enumerate() {
            *cost.at_mut(qi, ti) = -cfg.class_cost * probs.at(qi, label)
                + cfg.mask_bce_cost * mean_bce_logits(logits, mask)
                + cfg.dice_cost * dice_loss(&sig, mask, cfg.dice_eps);
        }
    }
    Ok(cost)
}

/// Minimum-cost assignment of every row to a distinct column of an
/// `n x m` matrix with `n <= m` (shortest augmenting paths with
/// potentials). Returns the column of each row.
fn assign_rows(cost: &Mat) -> Vec<usize> {
    let (n, m) = (cost.rows, cost.cols);
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost.at(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_col = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            row_col[p[j] - 1] = j - 1;
        }
    }
    row_col
}

/// Optimal cost of assigning every target in `targets` to a distinct query
/// in `queries`.
fn optimum(cost: &Mat, queries: &[usize], targets: &[usize]) -> f64 {
    if targets.is_empty() {
        return 0.0;
    }
    if targets.len() > queries.len() {
        return f64::INFINITY;
    }
    let sub = Mat::from_fn(targets.len(), queries.len(), |t, q| {
        cost.at(queries[q], targets[t])
    });
    assign_rows(&sub)
        .iter()
        .enumerate()
        .map(|(t, &q)| sub.at(t, q))
        .sum()
}

/// Minimum-cost matching of all `T` targets (columns) to distinct queries
/// (rows). Among optimal matchings the lexicographically smallest sorted
/// pair list is returned.
pub fn hungarian(cost: &Mat) -> Result<MatchResult> {
    let (q, t) = cost.shape();
    if t > q {
        return Err(Error::Assignment(format!("{t} targets exceed {q} queries")));
    }
    if !cost.all_finite() {
        return Err(Error::Assignment(
            "cost matrix has non-finite entries".into(),
        ));
    }
    let all_q: Vec<usize> = (0..q).collect();
    let all_t: Vec<usize> = (0..t).collect();
    let best = optimum(cost, &all_q, &all_t);
    let tol = 1e-9 * (1.0 + best.abs());

    let mut pairs = Vec::with_capacity(t);
    let mut fixed = 0.0;
    let mut free_t = all_t;
    for qi in 0..q {
        if free_t.is_empty() {
            break;
        }
        let rest: Vec<usize> = (qi + 1..q).collect();
        let mut chosen = None;
        for (k, &ti) in free_t.iter().enumerate() {
            let mut remaining = free_t.clone();
            remaining.remove(k);
            let c = fixed + cost.at(qi, ti) + optimum(cost, &rest, &remaining);
            if c <= best + tol {
                chosen = Some(k);
                break;
            }
        }
        if let Some(k) = chosen {
            let ti = free_t.remove(k);
            fixed += cost.at(qi, ti);
            pairs.push((qi, ti));
        }
    }
    let total_cost = pairs.iter().map(|&(a, b)| cost.at(a, b)).sum();
    Ok(MatchResult { pairs, total_cost })
}

pub fn match_queries(qs: &QuerySet, ts: &TargetSet, cfg: &LossConfig) -> Result<MatchResult> {
    hungarian(&match_cost(qs, ts, cfg)?)
}

// ----- losses on the graph -----

/// Scalar loss terms as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct SetLossVars {
    pub class: Var,
    pub bce: Var,
    pub dice: Var,
    pub total: Var,
}

fn check_match(m: &MatchResult, q: usize, t: usize) -> Result<()> {
    let mut seen_q = vec![false; q];
    let mut seen_t = vec![false; t];
    for &(qi, ti) in &m.pairs {
        if qi >= q || ti >= t || seen_q[qi] || seen_t[ti] {
            return Err(Error::Assignment(format!("invalid pair ({qi}, {ti})")));
        }
        seen_q[qi] = true;
        seen_t[ti] = true;
    }
    if m.pairs.len() != t {
        return Err(Error::Assignment(format!(
            "{} pairs for {t} targets",
            m.pairs.len()
        )));
    }
    Ok(())
}

/// Set loss for `class_logits` `[Q, 3]` and `mask_logits` `[Q, N]` with a
/// fixed matching:
///
/// `(1/Q) Σ_q [class_w · w_q · CE_q + matched(q) · (bce_w · BCE_q + dice_w · dice_q)]`
///
/// where unmatched queries target ∅ with `w_q = noobj_class_weight`.
pub fn set_loss_graph(
    g: &mut Graph,
    class_logits: Var,
    mask_logits: Var,
    ts: &TargetSet,
    m: &MatchResult,
    cfg: &LossConfig,
) -> SetLossVars {
    let (q, n) = g.shape(mask_logits);
    let mut target_class = vec![NO_OBJECT; q];
    let mut weight = vec![cfg.noobj_class_weight; q];
    for &(qi, ti) in &m.pairs {
        target_class[qi] = ts.labels[ti];
        weight[qi] = 1.0;
    }
    let pick = Mat::from_fn(q, NUM_CLASSES, |r, c| {
        if c == target_class[r] {
            weight[r]
        } else {
            0.0
        }
    });
    let pick = g.constant(pick);
    let logp = g.log_softmax_rows(class_logits);
    let picked = g.mul(logp, pick);
    let class_sum = g.sum(picked);
    let class = g.scale(class_sum, -cfg.class_w / q as f64);

    let mut bce_terms = Vec::with_capacity(m.pairs.len());
    let mut dice_terms = Vec::with_capacity(m.pairs.len());
    for &(qi, ti) in &m.pairs {
        let x = g.slice_rows(mask_logits, qi, 1);
        let t = g.constant(ts.masks[ti].to_row());
        let sp = g.softplus(x);
        let xt = g.mul(x, t);
        let b = g.sub(sp, xt);
        bce_terms.push(g.scale(b, 1.0 / n as f64));

        let p = g.sigmoid(x);
        let pt = g.mul(p, t);
        let inter = g.sum(pt);
        let num = g.scale(inter, 2.0);
        let num = g.add_scalar(num, cfg.dice_eps);
        let sp_sum = g.sum(p);
        let den = g.add_scalar(sp_sum, ts.masks[ti].count_ones() as f64 + cfg.dice_eps);
        let inv = g.recip(den);
        let ratio = g.mul(num, inv);
        let d = g.scale(ratio, -1.0);
        dice_terms.push(g.add_scalar(d, 1.0));
    }
    let zero = g.constant(Mat::scalar(0.0));
    let sum_of = |g: &mut Graph, parts: &[Var]| {
        parts.iter().fold(zero, |acc, &v| {
            let s = g.sum(v);
            g.add(acc, s)
        })
    };
    let bce = sum_of(g, &bce_terms);
    let bce = g.scale(bce, cfg.bce_w / q as f64);
    let dice = sum_of(g, &dice_terms);
    let dice = g.scale(dice, cfg.dice_w / q as f64);
    let total = g.add(class, bce);
    let total = g.add(total, dice);
    SetLossVars {
        class,
        bce,
        dice,
        total,
    }
}

/// Weighted per-pixel cross-entropy on dense logits `[N, 2]`, averaged over
/// all `N` pixels.
pub fn pixel_loss_graph(g: &mut Graph, dense: Var, target: &Mask, weights: [f64; 2]) -> Var {
    let n = target.data.len();
    let pick = Mat::from_fn(n, 2, |r, c| {
        let y = target.data[r] as usize;
        if c == y {
            weights[y]
        } else {
            0.0
        }
    });
    let pick = g.constant(pick);
    let logp = g.log_softmax_rows(dense);
    let picked = g.mul(logp, pick);
    let s = g.sum(picked);
    g.scale(s, -1.0 / n as f64)
}

/// Class weights for the pixel loss over a batch of stride-4 targets.
///
/// `auto` uses inverse class frequency normalised so that the two weights
/// average to one; if either class is absent from the batch both weights are
/// one.
pub fn resolve_pixel_weights<'a>(
    targets: impl IntoIterator<Item = &'a Mask>,
    mode: PixelWeights,
) -> [f64; 2] {
    match mode {
        PixelWeights::Fixed { bg, chg } => [bg, chg],
        PixelWeights::Auto => {
            let (mut n, mut pos) = (0usize, 0usize);
            for t in targets {
                n += t.data.len();
                pos += t.count_ones();
            }
            let neg = n - pos;
            if pos == 0 || neg == 0 {
                return [1.0, 1.0];
            }
            let (ib, ic) = (n as f64 / neg as f64, n as f64 / pos as f64);
            let mean = 0.5 * (ib + ic);
            [ib / mean, ic / mean]
        }
    }
}

/// Graph nodes of the full objective for one image.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub set: SetLossVars,
    pub pixel: Var,
}

#[allow(clippy::too_many_arguments)]
pub fn total_loss_graph(
    g: &mut Graph,
    class_logits: Var,
    mask_logits: Var,
    dense: Var,
    ts: &TargetSet,
    grid_target: &Mask,
    m: &MatchResult,
    pixel_weights: [f64; 2],
    cfg: &LossConfig,
) -> LossVars {
    let set = set_loss_graph(g, class_logits, mask_logits, ts, m, cfg);
    let pixel = pixel_loss_graph(g, dense, grid_target, pixel_weights);
    let a = g.scale(set.total, cfg.lambda_set);
    let b = g.scale(pixel, cfg.lambda_pixel);
    LossVars {
        total: g.add(a, b),
        set,
        pixel,
    }
}

impl LossBreakdown {
    pub fn from_vars(g: &Graph, v: &LossVars) -> Self {
        Self {
            total: g.value(v.total).item(),
            set: g.value(v.set.total).item(),
            set_class: g.value(v.set.class).item(),
            set_bce: g.value(v.set.bce).item(),
            set_dice: g.value(v.set.dice).item(),
            pixel: g.value(v.pixel).item(),
        }
    }

    pub fn is_finite(&self) -> bool {
        [
            self.total,
            self.set,
            self.set_class,
            self.set_bce,
            self.set_dice,
            self.pixel,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

// ----- value-level entry points -----

pub fn set_loss(
    qs: &QuerySet,
    ts: &TargetSet,
    m: &MatchResult,
    cfg: &LossConfig,
) -> Result<SetLossBreakdown> {
    check_queries(qs)?;
    check_targets(qs, ts)?;
    check_match(m, qs.num_queries(), ts.len())?;
    let mut g = Graph::new();
    let c = g.constant(qs.class_logits.clone());
    let k = g.constant(qs.mask_logits.clone());
    let v = set_loss_graph(&mut g, c, k, ts, m, cfg);
    Ok(SetLossBreakdown {
        class: g.value(v.class).item(),
        bce: g.value(v.bce).item(),
        dice: g.value(v.dice).item(),
        total: g.value(v.total).item(),
    })
}

fn grid_target(d: &DenseLogits, gt: &Mask) -> Result<Mask> {
    let t = if (gt.h, gt.w) == (d.h, d.w) {
        if !gt.is_binary() {
            return Err(Error::Data("ground-truth mask is not binary".into()));
        }
        gt.clone()
    } else {
        downsample_gt(gt)?
    };
    if (t.h, t.w) != (d.h, d.w) || d.logits.shape() != (d.h * d.w, 2) {
        return Err(Error::Shape(format!(
            "ground truth {}x{} does not match logits grid {}x{}",
            gt.h, gt.w, d.h, d.w
        )));
    }
    Ok(t)
}

/// Pixel loss of one image. `gt` may be given at full resolution (it is then
/// downsampled as for the set targets) or already on the logits grid.
pub fn pixel_loss(d: &DenseLogits, gt: &Mask, cfg: &LossConfig) -> Result<f64> {
    let t = grid_target(d, gt)?;
    let w = resolve_pixel_weights([&t], cfg.pixel_class_weights);
    let mut g = Graph::new();
    let x = g.constant(d.logits.clone());
    let l = pixel_loss_graph(&mut g, x, &t, w);
    Ok(g.value(l).item())
}

/// Full objective of one image with the matching recomputed from `qs`.
pub fn total_loss(
    qs: &QuerySet,
    d: &DenseLogits,
    gt: &Mask,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    let t = grid_target(d, gt)?;
    let ts = targets_from_grid(&t);
    let m = match_queries(qs, &ts, cfg)?;
    let w = resolve_pixel_weights([&t], cfg.pixel_class_weights);
    let mut g = Graph::new();
    let c = g.constant(qs.class_logits.clone());
    let k = g.constant(qs.mask_logits.clone());
    let x = g.constant(d.logits.clone());
    let v = total_loss_graph(&mut g, c, k, x, &ts, &t, &m, w, cfg);
    Ok(LossBreakdown::from_vars(&g, &v))
}
