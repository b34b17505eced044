//! Pixel decoder, masked-attention transformer decoder and the log-sum-exp
//! aggregation that turns query outputs into dense two-class logits:
//!
//! ```text
//! ℓ_c(x, y) = log Σ_q exp(p_q^c + m_q(x, y)),   c ∈ {bg, chg}
//! ```

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::{self, Graph, Var};
use crate::error::{Error, Result};
use crate::interaction::FusedFeatures;
use crate::nn;
use crate::params::{Init, ParamStore, Scope, INIT_STD};
use crate::tensor::{BilinearTap, FeatureMap, Mask, Mat};

/// Class-head columns.
pub const BG: usize = 0;
pub const CHG: usize = 1;
pub const NO_OBJECT: usize = 2;
pub const NUM_CLASSES: usize = 3;

/// Number of pyramid levels used as decoder memory (the coarsest ones).
pub const MEMORY_LEVELS: usize = 3;

const LN_EPS: f64 = 1e-5;

/// How the class head feeds the aggregation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassScores {
    /// Raw class-head logits.
    Raw,
    /// Log-softmax over the three class-head outputs.
    LogSoftmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub num_queries: usize,
    pub decoder_layers: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub mask_threshold: f64,
    /// Restrict cross-attention to the previous round's mask.
    pub masked_attention: bool,
    pub class_scores: ClassScores,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            num_queries: 8,
            decoder_layers: 3,
            embed_dim: 64,
            heads: 4,
            ffn_dim: 128,
            mask_threshold: 0.5,
            masked_attention: true,
            class_scores: ClassScores::Raw,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_queries == 0 {
            return Err(Error::Config("num_queries must be >= 1".into()));
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if !self.embed_dim.is_multiple_of(4) {
            return Err(Error::Config("embed_dim must be a multiple of 4".into()));
        }
        if self.ffn_dim == 0 {
            return Err(Error::Config("ffn_dim must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_threshold) {
            return Err(Error::Config("mask_threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Query outputs: `class_logits` is `[Q, 3]` (bg, chg, ∅); `mask_logits` is
/// `[Q, h*w]` on the stride-4 grid.
#[derive(Clone, Debug, PartialEq)]
pub struct QuerySet {
    pub class_logits: Mat,
    pub mask_logits: Mat,
    pub h: usize,
    pub w: usize,
}

impl QuerySet {
    pub fn num_queries(&self) -> usize {
        self.class_logits.rows
    }
}

/// Dense logits `[h*w, 2]`, columns (bg, chg).
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLogits {
    pub logits: Mat,
    pub h: usize,
    pub w: usize,
}

/// One decoder memory level: tokens `[h*w, D]` and their positional
/// encoding (sinusoidal + level embedding) `[h*w, D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryLevel {
    pub tokens: Mat,
    pub pos: Mat,
    pub h: usize,
    pub w: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Memory {
    pub levels: Vec<MemoryLevel>,
}

impl Memory {
    pub fn token_count(&self) -> usize {
        self.levels.iter().map(|l| l.tokens.rows).sum()
    }
}

/// Graph-side memory level.
#[derive(Clone, Copy, Debug)]
pub struct MemoryVar {
    pub tokens: Var,
    pub pos: Var,
    pub h: usize,
    pub w: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct QueryVars {
    pub class_logits: Var,
    pub mask_logits: Var,
}

/// Fixed 2-D sinusoidal encoding `[h*w, dim]`: the first half of the
/// channels encodes the row, the second half the column, each as
/// interleaved sin/cos pairs over normalised positions in `(0, 2π)`.
pub fn sine_position_encoding(h: usize, w: usize, dim: usize) -> Mat {
    let half = dim / 2;
    let freq = |i: usize| 10000f64.powf((2 * (i / 2)) as f64 / half as f64);
    Mat::from_fn(h * w, dim, |r, c| {
        let (y, x) = (r / w, r % w);
        let (pos, i) = if c < half {
            ((y as f64 + 0.5) / h as f64 * 2.0 * PI, c)
        } else {
            ((x as f64 + 0.5) / w as f64 * 2.0 * PI, c - half)
        };
        let a = pos / freq(i);
        if i % 2 == 0 {
            a.sin()
        } else {
            a.cos()
        }
    })
}

// ----- parameters -----

pub fn init_pixel_decoder(init: &mut Init, widths: &[usize; 4], d: usize) {
    for (i, &c) in widths.iter().enumerate() {
        init.linear(&format!("lateral{i}"), c, d);
    }
    init.linear("output", d, d);
    init.trunc_normal("level_embed", MEMORY_LEVELS, d, INIT_STD);
}

pub fn init_transformer_decoder(init: &mut Init, cfg: &DecoderConfig) {
    let d = cfg.embed_dim;
    init.trunc_normal("query_feat", cfg.num_queries, d, 1.0);
    init.trunc_normal("query_pos", cfg.num_queries, d, 1.0);
    for l in 0..cfg.decoder_layers {
        let mut s = init.pp(format!("layer{l}"));
        nn::init_attention(&mut s, "cross_attn", d);
        s.layer_norm("cross_norm", d);
        nn::init_attention(&mut s, "self_attn", d);
        s.layer_norm("self_norm", d);
        s.linear("ffn.fc1", d, cfg.ffn_dim);
        s.linear("ffn.fc2", cfg.ffn_dim, d);
        s.layer_norm("ffn_norm", d);
    }
    init.layer_norm("final_norm", d);
    init.linear("class_head", d, NUM_CLASSES);
    init.linear("mask_embed.fc1", d, d);
    init.linear("mask_embed.fc2", d, d);
}

// ----- graph forward passes -----

/// Top-down FPN over the fused pyramid (finest level first). Returns the
/// stride-4 per-pixel embedding `[h0*w0, D]` and the memory levels ordered
/// coarsest first.
pub fn pixel_decode_graph(
    g: &mut Graph,
    s: &Scope,
    levels: &[(Var, (usize, usize))],
) -> (Var, Vec<MemoryVar>) {
    assert_eq!(levels.len(), 4, "pixel decoder expects 4 levels");
    let lateral: Vec<Var> = levels
        .iter()
        .enumerate()
        .map(|(i, &(x, _))| nn::linear(g, &s.pp(format!("lateral{i}")), x))
        .collect();
    let mut merged = [lateral[3]; 4];
    for i in (0..3).rev() {
        let (hc, wc) = levels[i + 1].1;
        let (hf, wf) = levels[i].1;
        let up = g.upsample_nearest(merged[i + 1], hc, wc, 2);
        let up = if (2 * hc, 2 * wc) == (hf, wf) {
            up
        } else {
            crop_grid(g, up, (2 * hc, 2 * wc), (hf, wf))
        };
        merged[i] = g.add(lateral[i], up);
    }
    let embed = nn::linear(g, &s.pp("output"), merged[0]);

    let level_embed = s.get("level_embed");
    let d = g.shape(embed).1;
    let mut memory = Vec::with_capacity(MEMORY_LEVELS);
    for (j, i) in (1..4).rev().enumerate() {
        let (h, w) = levels[i].1;
        let sine = g.constant(sine_position_encoding(h, w, d));
        let le = g.slice_rows(level_embed, j, 1);
        let pos = g.add(sine, le);
        memory.push(MemoryVar {
            tokens: merged[i],
            pos,
            h,
            w,
        });
    }
    (embed, memory)
}

/// Top-left crop (or edge-replicating pad) of a `[h*w, c]` map to `to`.
fn crop_grid(g: &mut Graph, x: Var, (h, w): (usize, usize), (th, tw): (usize, usize)) -> Var {
    let rows: Vec<Var> = (0..th * tw)
        .map(|r| {
            let (y, xx) = ((r / tw).min(h - 1), (r % tw).min(w - 1));
            g.slice_rows(x, y * w + xx, 1)
        })
        .collect();
    g.concat_rows(&rows)
}

/// Average of `probs` (`[Q, h4*w4]`) over the cells of a `lh x lw` grid
/// covering the stride-4 grid, thresholded into an additive attention bias:
/// `0` where the pooled probability exceeds `threshold`, `-inf` elsewhere.
/// Queries with no admissible position get an all-zero row.
pub fn attention_bias(
    probs: &Mat,
    (h4, w4): (usize, usize),
    (lh, lw): (usize, usize),
    threshold: f64,
) -> Mat {
    let q = probs.rows;
    let mut bias = Mat::full(q, lh * lw, f64::NEG_INFINITY);
    let span = |i: usize, n: usize, big: usize| {
        let lo = i * big / n;
        let hi = ((i + 1) * big / n).max(lo + 1).min(big);
        lo..hi
    };
    for qi in 0..q {
        let row = probs.row(qi);
        let mut any = false;
        for ly in 0..lh {
            for lx in 0..lw {
                let (ys, xs) = (span(ly, lh, h4), span(lx, lw, w4));
                let mut sum = 0.0;
                let mut n = 0usize;
                for y in ys {
                    for x in xs.clone() {
                        sum += row[y * w4 + x];
                        n += 1;
                    }
                }
                if sum / n as f64 > threshold {
                    *bias.at_mut(qi, ly * lw + lx) = 0.0;
                    any = true;
                }
            }
        }
        if !any {
            bias.row_mut(qi).fill(0.0);
        }
    }
    bias
}

fn predict_heads(g: &mut Graph, s: &Scope, x: Var, embed: Var) -> QueryVars {
    let xn = nn::layer_norm(g, &s.pp("final_norm"), x, LN_EPS);
    let class_logits = nn::linear(g, &s.pp("class_head"), xn);
    let me = nn::linear(g, &s.pp("mask_embed.fc1"), xn);
    let me = g.gelu(me);
    let me = nn::linear(g, &s.pp("mask_embed.fc2"), me);
    let et = g.transpose(embed);
    let mask_logits = g.matmul(me, et);
    QueryVars {
        class_logits,
        mask_logits,
    }
}

/// Final and intermediate query predictions. `aux[l]` is the prediction
/// that produced layer `l`'s attention mask.
pub struct DecoderVars {
    pub out: QueryVars,
    pub aux: Vec<QueryVars>,
}

/// Runs the decoder. `embed` is the stride-4 per-pixel embedding on an
/// `h4 x w4` grid.
pub fn transformer_decode_graph(
    g: &mut Graph,
    s: &Scope,
    cfg: &DecoderConfig,
    memory: &[MemoryVar],
    embed: Var,
    grid: (usize, usize),
) -> DecoderVars {
    let mut x = s.get("query_feat");
    let qpos = s.get("query_pos");
    let mut pred = predict_heads(g, s, x, embed);
    let mut aux = Vec::with_capacity(cfg.decoder_layers);
    for l in 0..cfg.decoder_layers {
        aux.push(pred);
        let ls = s.pp(format!("layer{l}"));
        let mem = memory[l % memory.len()];
        let bias = if cfg.masked_attention {
            let probs = g.value(pred.mask_logits).map(autodiff::sigmoid);
            Some(attention_bias(
                &probs,
                grid,
                (mem.h, mem.w),
                cfg.mask_threshold,
            ))
        } else {
            None
        };
        let q_in = g.add(x, qpos);
        let k_in = g.add(mem.tokens, mem.pos);
        let a = nn::attention(
            g,
            &ls.pp("cross_attn"),
            q_in,
            k_in,
            mem.tokens,
            cfg.heads,
            bias.as_ref(),
        )
        .out;
        let y = g.add(x, a);
        x = nn::layer_norm(g, &ls.pp("cross_norm"), y, LN_EPS);

        let q_in = g.add(x, qpos);
        let a = nn::attention(g, &ls.pp("self_attn"), q_in, q_in, x, cfg.heads, None).out;
        let y = g.add(x, a);
        x = nn::layer_norm(g, &ls.pp("self_norm"), y, LN_EPS);

        let f = nn::linear(g, &ls.pp("ffn.fc1"), x);
        let f = g.gelu(f);
        let f = nn::linear(g, &ls.pp("ffn.fc2"), f);
        let y = g.add(x, f);
        x = nn::layer_norm(g, &ls.pp("ffn_norm"), y, LN_EPS);

        pred = predict_heads(g, s, x, embed);
    }
    DecoderVars { out: pred, aux }
}

/// Dense `[N, 2]` logits from query outputs.
pub fn aggregate_lse_graph(
    g: &mut Graph,
    class_logits: Var,
    mask_logits: Var,
    mode: ClassScores,
) -> Var {
    let scores = match mode {
        ClassScores::Raw => class_logits,
        ClassScores::LogSoftmax => g.log_softmax_rows(class_logits),
    };
    let mt = g.transpose(mask_logits);
    let cols: Vec<Var> = [BG, CHG]
        .iter()
        .map(|&c| {
            let p = g.slice_cols(scores, c, 1);
            let pt = g.transpose(p);
            let z = g.add(mt, pt);
            g.logsumexp_rows(z)
        })
        .collect();
    g.concat_cols(&cols)
}

// ----- value-level entry points -----

fn to_levels(pyramid: &[FusedFeatures]) -> Result<()> {
    if pyramid.len() != 4 {
        return Err(Error::Shape(format!(
            "pixel decoder expects 4 levels, got {}",
            pyramid.len()
        )));
    }
    for win in pyramid.windows(2) {
        let (a, b) = (&win[0].z, &win[1].z);
        if a.h / 2 != b.h || a.w / 2 != b.w || b.h == 0 || b.w == 0 {
            return Err(Error::Shape(format!(
                "level sizes {}x{} -> {}x{} do not follow the stride schedule",
                a.h, a.w, b.h, b.w
            )));
        }
    }
    Ok(())
}

/// `params` holds the pixel-decoder names at its root.
pub fn pixel_decode(
    pyramid: &[FusedFeatures],
    params: &ParamStore,
) -> Result<(FeatureMap, Memory)> {
    to_levels(pyramid)?;
    let mut g = Graph::new();
    let b = params.bind_frozen(&mut g);
    let levels: Vec<(Var, (usize, usize))> = pyramid
        .iter()
        .map(|f| (g.constant(f.z.data.clone()), (f.z.h, f.z.w)))
        .collect();
    let (embed, mem) = pixel_decode_graph(&mut g, &b.root(), &levels);
    let (h0, w0) = levels[0].1;
    let memory = Memory {
        levels: mem
            .iter()
            .map(|m| MemoryLevel {
                tokens: g.value(m.tokens).clone(),
                pos: g.value(m.pos).clone(),
                h: m.h,
                w: m.w,
            })
            .collect(),
    };
    Ok((FeatureMap::new(h0, w0, g.value(embed).clone()), memory))
}

/// `params` holds the transformer-decoder names at its root.
pub fn transformer_decode(
    memory: &Memory,
    per_pixel_embed: &FeatureMap,
    cfg: &DecoderConfig,
    params: &ParamStore,
) -> Result<QuerySet> {
    cfg.validate()?;
    if memory.levels.is_empty() {
        return Err(Error::Shape("decoder memory is empty".into()));
    }
    let d = cfg.embed_dim;
    if per_pixel_embed.channels() != d
        || memory
            .levels
            .iter()
            .any(|l| l.tokens.cols != d || l.pos.cols != d)
    {
        return Err(Error::Shape(format!("decoder inputs must have width {d}")));
    }
    let mut g = Graph::new();
    let b = params.bind_frozen(&mut g);
    let mem: Vec<MemoryVar> = memory
        .levels
        .iter()
        .map(|l| MemoryVar {
            tokens: g.constant(l.tokens.clone()),
            pos: g.constant(l.pos.clone()),
            h: l.h,
            w: l.w,
        })
        .collect();
    let embed = g.constant(per_pixel_embed.data.clone());
    let grid = (per_pixel_embed.h, per_pixel_embed.w);
    let out = transformer_decode_graph(&mut g, &b.root(), cfg, &mem, embed, grid).out;
    Ok(QuerySet {
        class_logits: g.value(out.class_logits).clone(),
        mask_logits: g.value(out.mask_logits).clone(),
        h: grid.0,
        w: grid.1,
    })
}

pub fn aggregate_lse(qs: &QuerySet) -> DenseLogits {
    aggregate_lse_with(qs, ClassScores::Raw)
}

pub fn aggregate_lse_with(qs: &QuerySet, mode: ClassScores) -> DenseLogits {
    let mut g = Graph::new();
    let c = g.constant(qs.class_logits.clone());
    let m = g.constant(qs.mask_logits.clone());
    let out = aggregate_lse_graph(&mut g, c, m, mode);
    DenseLogits {
        logits: g.value(out).clone(),
        h: qs.h,
        w: qs.w,
    }
}

/// Per-pixel change probability `[h*w]` from dense logits.
pub fn change_probability(d: &DenseLogits) -> Vec<f64> {
    let p = autodiff::softmax_rows(&d.logits);
    (0..p.rows).map(|r| p.at(r, CHG)).collect()
}

/// Bilinear resize of a single-channel `h x w` map (pixel-centre aligned,
/// border clamped).
pub fn resize_bilinear(src: &[f64], (h, w): (usize, usize), (oh, ow): (usize, usize)) -> Vec<f64> {
    let (sy, sx) = (h as f64 / oh as f64, w as f64 / ow as f64);
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        for x in 0..ow {
            let t = BilinearTap::new(
                (y as f64 + 0.5) * sy - 0.5,
                (x as f64 + 0.5) * sx - 0.5,
                h,
                w,
            );
            out.push(t.lerp(
                src[t.y0 * w + t.x0],
                src[t.y0 * w + t.x1],
                src[t.y1 * w + t.x0],
                src[t.y1 * w + t.x1],
            ));
        }
    }
    out
}

/// Upsampled change probability, thresholded strictly above 0.5.
pub fn predict_mask(d: &DenseLogits, out_size: (usize, usize)) -> Mask {
    let prob = change_probability(d);
    let up = resize_bilinear(&prob, (d.h, d.w), out_size);
    Mask::new(
        out_size.0,
        out_size.1,
        up.iter().map(|&p| u8::from(p > 0.5)).collect(),
    )
}
