//! Per-scale spatiotemporal interaction: feature rectification followed by
//! two-way attention fusion.
//!
//! Rectification computes channel and spatial gates from both streams and
//! mixes each stream with the gated other stream:
//!
//! ```text
//! (w1_ch, w1_sp) = gates(F1, F2)        (w2_ch, w2_sp) = gates(F2, F1)
//! F̂1 = F1 + λc · w2_ch ⊙ F2 + λs · w2_sp ⊙ F2
//! F̂2 = F2 + λc · w1_ch ⊙ F1 + λs · w1_sp ⊙ F1
//! ```
//!
//! `gates` is one shared network evaluated on the stream pair in both orders,
//! so identical streams always produce identical rectified outputs. `λc` and
//! `λs` start at zero, which makes the module the identity at init.
//!
//! Fusion attends 1→2 and 2→1 with one shared core (deformable or full
//! cross-attention), concatenates both results, projects back to `C`
//! channels and adds the mean of the two rectified streams.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn;
use crate::params::{Init, ParamStore, Scope};
use crate::tensor::{BilinearTap, FeatureMap, Mat};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionCore {
    Deform,
    Cross,
}

impl std::str::FromStr for FusionCore {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deform" => Ok(FusionCore::Deform),
            "cross" => Ok(FusionCore::Cross),
            other => Err(Error::Config(format!(
                "fusion_core must be `deform` or `cross`, got `{other}`"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundaryMode {
    Clamp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeformAttnConfig {
    /// Attention heads (also used by the cross-attention core).
    pub heads: usize,
    /// Sampling points per head.
    pub points: usize,
    /// Radius step of the initial sampling pattern; 0 starts every point at
    /// the reference pixel.
    pub offset_init_scale: f64,
    pub boundary_mode: BoundaryMode,
}

impl Default for DeformAttnConfig {
    fn default() -> Self {
        Self {
            heads: 2,
            points: 4,
            offset_init_scale: 0.0,
            boundary_mode: BoundaryMode::Clamp,
        }
    }
}

impl DeformAttnConfig {
    pub fn validate_for(&self, channels: usize) -> Result<()> {
        if self.heads == 0 || !channels.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "channel width {channels} is not divisible by {} heads",
                self.heads
            )));
        }
        if self.points == 0 {
            return Err(Error::Config("points must be >= 1".into()));
        }
        if !self.offset_init_scale.is_finite() {
            return Err(Error::Config("offset_init_scale must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InteractionConfig {
    pub fusion_core: FusionCore,
    pub attention: DeformAttnConfig,
}

impl Default for InteractionConfig {
    fn default() -> Self {
        Self {
            fusion_core: FusionCore::Deform,
            attention: DeformAttnConfig::default(),
        }
    }
}

/// Rectified streams of one pyramid level.
#[derive(Clone, Debug, PartialEq)]
pub struct RectifiedPair {
    pub f1_hat: FeatureMap,
    pub f2_hat: FeatureMap,
}

/// Fused map of one pyramid level.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedFeatures {
    pub z: FeatureMap,
}

// ----- parameter initialisation -----

pub fn init_frm(init: &mut Init, c: usize) {
    init.linear("channel_mlp.fc1", 4 * c, c);
    init.linear("channel_mlp.fc2", c, c);
    init.conv("spatial.conv1", 3, 2 * c, c);
    init.conv("spatial.conv2", 3, c, 1);
    init.zeros("lambda_channel", 1, 1);
    init.zeros("lambda_spatial", 1, 1);
}

pub fn init_deformable(init: &mut Init, c: usize, cfg: &DeformAttnConfig) {
    let (m, k) = (cfg.heads, cfg.points);
    init.linear("value_proj", c, c);
    init.zeros("sampling_offsets.weight", c, m * k * 2);
    let mut bias = Mat::zeros(1, m * k * 2);
    if cfg.offset_init_scale != 0.0 {
        for head in 0..m {
            let theta = 2.0 * PI * head as f64 / m as f64;
            for point in 0..k {
                let r = cfg.offset_init_scale * (point + 1) as f64;
                let j = head * k + point;
                bias.data[2 * j] = r * theta.sin();
                bias.data[2 * j + 1] = r * theta.cos();
            }
        }
    }
    init.set("sampling_offsets.bias", bias);
    init.linear_zeros("attention_weights", c, m * k);
    init.linear("output_proj", c, c);
}

pub fn init_cross(init: &mut Init, c: usize) {
    nn::init_attention(init, "attn", c);
}

pub fn init_ffm(init: &mut Init, c: usize, cfg: &InteractionConfig) {
    match cfg.fusion_core {
        FusionCore::Deform => init_deformable(&mut init.pp("core"), c, &cfg.attention),
        FusionCore::Cross => init_cross(&mut init.pp("core"), c),
    }
    init.linear("proj", 2 * c, c);
}

/// Interaction parameters for all four levels under `level{i}.{frm,ffm}`.
pub fn init_interaction(init: &mut Init, widths: &[usize; 4], cfg: &InteractionConfig) {
    for (i, &c) in widths.iter().enumerate() {
        let mut lvl = init.pp(format!("level{i}"));
        init_frm(&mut lvl.pp("frm"), c);
        init_ffm(&mut lvl.pp("ffm"), c, cfg);
    }
}

// ----- graph forward passes -----

fn frm_gates(g: &mut Graph, s: &Scope, a: Var, b: Var, hw: (usize, usize)) -> (Var, Var) {
    let stats = [g.mean_rows(a), g.max_rows(a), g.mean_rows(b), g.max_rows(b)];
    let stats = g.concat_cols(&stats);
    let hidden = nn::linear(g, &s.pp("channel_mlp.fc1"), stats);
    let hidden = g.gelu(hidden);
    let ch = nn::linear(g, &s.pp("channel_mlp.fc2"), hidden);
    let ch = g.sigmoid(ch);

    let cat = g.concat_cols(&[a, b]);
    let (sp, hw1) = nn::conv2d(g, &s.pp("spatial.conv1"), cat, hw, 3, 1, 1);
    let sp = g.gelu(sp);
    let (sp, _) = nn::conv2d(g, &s.pp("spatial.conv2"), sp, hw1, 3, 1, 1);
    let sp = g.sigmoid(sp);
    (ch, sp)
}

pub fn frm_forward(g: &mut Graph, s: &Scope, f1: Var, f2: Var, hw: (usize, usize)) -> (Var, Var) {
    let (w1_ch, w1_sp) = frm_gates(g, s, f1, f2, hw);
    let (w2_ch, w2_sp) = frm_gates(g, s, f2, f1, hw);
    let (lc, ls) = (s.get("lambda_channel"), s.get("lambda_spatial"));
    let mix = |g: &mut Graph, base: Var, other: Var, ch: Var, sp: Var| {
        let by_ch = g.mul(other, ch);
        let by_ch = g.mul(by_ch, lc);
        let by_sp = g.mul(other, sp);
        let by_sp = g.mul(by_sp, ls);
        let y = g.add(base, by_ch);
        g.add(y, by_sp)
    };
    let f1_hat = mix(g, f1, f2, w2_ch, w2_sp);
    let f2_hat = mix(g, f2, f1, w1_ch, w1_sp);
    (f1_hat, f2_hat)
}

/// Absolute `(y, x)` of every pixel, repeated for each head and point.
fn reference_coords(h: usize, w: usize, heads: usize, points: usize) -> Mat {
    let per = heads * points;
    Mat::from_fn(h * w, per * 2, |r, c| {
        if c % 2 == 0 {
            (r / w) as f64
        } else {
            (r % w) as f64
        }
    })
}

pub fn deformable_forward(
    g: &mut Graph,
    s: &Scope,
    cfg: &DeformAttnConfig,
    query: Var,
    value: Var,
    (h, w): (usize, usize),
) -> Var {
    let (m, k) = (cfg.heads, cfg.points);
    let n = h * w;
    let v = nn::linear(g, &s.pp("value_proj"), value);
    let offsets = nn::linear(g, &s.pp("sampling_offsets"), query);
    let base = g.constant(reference_coords(h, w, m, k));
    let coords = g.add(offsets, base);
    let logits = nn::linear(g, &s.pp("attention_weights"), query);
    let logits = g.reshape(logits, n * m, k);
    let weights = g.softmax_rows(logits);
    let weights = g.reshape(weights, n, m * k);
    let sampled = g.deform_sample(v, coords, weights, h, w, m, k);
    nn::linear(g, &s.pp("output_proj"), sampled)
}

pub fn cross_forward(g: &mut Graph, s: &Scope, heads: usize, query: Var, value: Var) -> Var {
    nn::attention(g, &s.pp("attn"), query, value, value, heads, None).out
}

pub fn ffm_forward(
    g: &mut Graph,
    s: &Scope,
    cfg: &InteractionConfig,
    f1_hat: Var,
    f2_hat: Var,
    hw: (usize, usize),
) -> Var {
    let core = s.pp("core");
    let attend = |g: &mut Graph, q: Var, v: Var| match cfg.fusion_core {
        FusionCore::Deform => deformable_forward(g, &core, &cfg.attention, q, v, hw),
        FusionCore::Cross => cross_forward(g, &core, cfg.attention.heads, q, v),
    };
    let a12 = attend(g, f1_hat, f2_hat);
    let a21 = attend(g, f2_hat, f1_hat);
    let cat = g.concat_cols(&[a12, a21]);
    let fused = nn::linear(g, &s.pp("proj"), cat);
    let sum = g.add(f1_hat, f2_hat);
    let mean = g.scale(sum, 0.5);
    g.add(fused, mean)
}

/// FRM then FFM on one level.
pub fn level_forward(
    g: &mut Graph,
    s: &Scope,
    cfg: &InteractionConfig,
    f1: Var,
    f2: Var,
    hw: (usize, usize),
) -> Var {
    let (a, b) = frm_forward(g, &s.pp("frm"), f1, f2, hw);
    ffm_forward(g, &s.pp("ffm"), cfg, a, b, hw)
}

// ----- value-level entry points (parameters at the root of the store) -----

fn same_shape(a: &FeatureMap, b: &FeatureMap) -> Result<()> {
    if (a.h, a.w, a.channels()) != (b.h, b.w, b.channels()) {
        return Err(Error::Shape(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.h,
            a.w,
            a.channels(),
            b.h,
            b.w,
            b.channels()
        )));
    }
    Ok(())
}

pub fn frm_rectify(f1: &FeatureMap, f2: &FeatureMap, params: &ParamStore) -> Result<RectifiedPair> {
    same_shape(f1, f2)?;
    let mut g = Graph::new();
    let b = params.bind_frozen(&mut g);
    let (x1, x2) = (g.constant(f1.data.clone()), g.constant(f2.data.clone()));
    let (y1, y2) = frm_forward(&mut g, &b.root(), x1, x2, (f1.h, f1.w));
    Ok(RectifiedPair {
        f1_hat: FeatureMap::new(f1.h, f1.w, g.value(y1).clone()),
        f2_hat: FeatureMap::new(f1.h, f1.w, g.value(y2).clone()),
    })
}

/// Bilinear lookup of `points` (`(y, x)` in pixel units) with clamp-to-border.
pub fn bilinear_sample(value: &FeatureMap, points: &[(f64, f64)]) -> Mat {
    let c = value.channels();
    let mut out = Mat::zeros(points.len(), c);
    for (i, &(y, x)) in points.iter().enumerate() {
        let t = BilinearTap::new(y, x, value.h, value.w);
        for ch in 0..c {
            *out.at_mut(i, ch) = t.lerp(
                value.at(t.y0, t.x0, ch),
                value.at(t.y0, t.x1, ch),
                value.at(t.y1, t.x0, ch),
                value.at(t.y1, t.x1, ch),
            );
        }
    }
    out
}

pub fn deformable_attention(
    query: &FeatureMap,
    value: &FeatureMap,
    cfg: &DeformAttnConfig,
    params: &ParamStore,
) -> Result<FeatureMap> {
    same_shape(query, value)?;
    cfg.validate_for(query.channels())?;
    let mut g = Graph::new();
    let b = params.bind_frozen(&mut g);
    let (q, v) = (
        g.constant(query.data.clone()),
        g.constant(value.data.clone()),
    );
    let y = deformable_forward(&mut g, &b.root(), cfg, q, v, (query.h, query.w));
    Ok(FeatureMap::new(query.h, query.w, g.value(y).clone()))
}

pub fn cross_attention(
    query: &FeatureMap,
    value: &FeatureMap,
    heads: usize,
    params: &ParamStore,
) -> Result<FeatureMap> {
    same_shape(query, value)?;
    if heads == 0 || !query.channels().is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "channel width {} is not divisible by {heads} heads",
            query.channels()
        )));
    }
    let mut g = Graph::new();
    let b = params.bind_frozen(&mut g);
    let (q, v) = (
        g.constant(query.data.clone()),
        g.constant(value.data.clone()),
    );
    let y = cross_forward(&mut g, &b.root(), heads, q, v);
    Ok(FeatureMap::new(query.h, query.w, g.value(y).clone()))
}

pub fn ffm_fuse(
    rect: &RectifiedPair,
    cfg: &InteractionConfig,
    params: &ParamStore,
) -> Result<FusedFeatures> {
    same_shape(&rect.f1_hat, &rect.f2_hat)?;
    cfg.attention.validate_for(rect.f1_hat.channels())?;
    let (h, w) = (rect.f1_hat.h, rect.f1_hat.w);
    let mut g = Graph::new();
    let b = params.bind_frozen(&mut g);
    let a = g.constant(rect.f1_hat.data.clone());
    let c = g.constant(rect.f2_hat.data.clone());
    let z = ffm_forward(&mut g, &b.root(), cfg, a, c, (h, w));
    Ok(FusedFeatures {
        z: FeatureMap::new(h, w, g.value(z).clone()),
    })
}

/// Fresh parameters for a single FRM (root names), mostly for tests and
/// experiments.
pub fn build_frm(c: usize, seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init_frm(&mut Init::new(&mut store, &mut rng), c);
    store
}

pub fn build_deformable(c: usize, cfg: &DeformAttnConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate_for(c)?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init_deformable(&mut Init::new(&mut store, &mut rng), c, cfg);
    Ok(store)
}

pub fn build_cross(c: usize, seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init_cross(&mut Init::new(&mut store, &mut rng), c);
    store
}

pub fn build_ffm(c: usize, cfg: &InteractionConfig, seed: u64) -> Result<ParamStore> {
    cfg.attention.validate_for(c)?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init_ffm(&mut Init::new(&mut store, &mut rng), c, cfg);
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_map(h: usize, w: usize, c: usize, seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::new(
            h,
            w,
            Mat::from_fn(h * w, c, |_, _| rng.gen_range(-1.0..1.0)),
        )
    }

    fn randomize(store: &mut ParamStore, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, m) in store.iter_mut() {
            for v in &mut m.data {
                *v = rng.gen_range(-scale..scale);
            }
        }
    }

    #[test]
    fn frm_is_identity_with_zero_gates() {
        let params = build_frm(8, 0);
        let (a, b) = (random_map(4, 4, 8, 1), random_map(4, 4, 8, 2));
        let r = frm_rectify(&a, &b, &params).unwrap();
        assert_eq!(r.f1_hat, a);
        assert_eq!(r.f2_hat, b);
    }

    #[test]
    fn frm_identical_streams_stay_identical() {
        let mut params = build_frm(8, 0);
        randomize(&mut params, 9, 0.5);
        let a = random_map(4, 4, 8, 1);
        let r = frm_rectify(&a, &a, &params).unwrap();
        assert_eq!(r.f1_hat, r.f2_hat);
        assert_ne!(r.f1_hat, a);
    }

    #[test]
    fn frm_rejects_mismatched_streams() {
        let params = build_frm(8, 0);
        assert!(frm_rectify(&random_map(4, 4, 8, 1), &random_map(2, 4, 8, 2), &params).is_err());
    }

    #[test]
    fn bilinear_sample_grid_points_clamp_and_center() {
        let v = random_map(3, 4, 2, 5);
        let s = bilinear_sample(&v, &[(1.0, 2.0), (-5.0, -5.0), (10.0, 10.0)]);
        assert_eq!(s.row(0), v.pixel(1, 2));
        assert_eq!(s.row(1), v.pixel(0, 0));
        assert_eq!(s.row(2), v.pixel(2, 3));

        let corners = FeatureMap::new(2, 2, Mat::from_vec(4, 1, vec![0.0, 1.0, 2.0, 3.0]));
        assert_eq!(bilinear_sample(&corners, &[(0.5, 0.5)]).item(), 1.5);
        // hand formula at (0.25, 0.75): (1-.25)(1-.75)*0 + (1-.25)(.75)*1 + .25(1-.75)*2 + .25*.75*3
        let expect = 0.75 * 0.75 + 0.25 * 0.25 * 2.0 + 0.25 * 0.75 * 3.0;
        assert!((bilinear_sample(&corners, &[(0.25, 0.75)]).item() - expect).abs() < 1e-15);
    }

    #[test]
    fn deformable_rejects_indivisible_heads() {
        let cfg = DeformAttnConfig {
            heads: 3,
            ..Default::default()
        };
        let err = build_deformable(8, &cfg, 0).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn offset_pattern_spreads_points() {
        let cfg = DeformAttnConfig {
            heads: 4,
            points: 2,
            offset_init_scale: 1.0,
            ..Default::default()
        };
        let p = build_deformable(8, &cfg, 0).unwrap();
        let bias = p.get("sampling_offsets.bias").unwrap();
        // head 1 points along +y (theta = pi/2), second point at radius 2
        assert!((bias.data[2 * 3] - 2.0).abs() < 1e-12);
        assert!(bias.data[2 * 3 + 1].abs() < 1e-12);
    }

    #[test]
    fn cross_attention_single_position_is_projected_value() {
        let params = build_cross(8, 3);
        let (q, v) = (random_map(1, 1, 8, 1), random_map(1, 1, 8, 2));
        let out = cross_attention(&q, &v, 2, &params).unwrap();
        let attn = "attn";
        let vp = v
            .data
            .matmul(params.get(&format!("{attn}.v_proj.weight")).unwrap());
        let vp = vp.zip_map(
            params.get(&format!("{attn}.v_proj.bias")).unwrap(),
            |a, b| a + b,
        );
        let o = vp.matmul(params.get(&format!("{attn}.out_proj.weight")).unwrap());
        let o = o.zip_map(
            params.get(&format!("{attn}.out_proj.bias")).unwrap(),
            |a, b| a + b,
        );
        for (a, b) in out.data.data.iter().zip(&o.data) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn ffm_cores_share_output_shape() {
        let rect = RectifiedPair {
            f1_hat: random_map(4, 4, 8, 1),
            f2_hat: random_map(4, 4, 8, 2),
        };
        for core in [FusionCore::Deform, FusionCore::Cross] {
            let cfg = InteractionConfig {
                fusion_core: core,
                ..Default::default()
            };
            let p = build_ffm(8, &cfg, 0).unwrap();
            let z = ffm_fuse(&rect, &cfg, &p).unwrap().z;
            assert_eq!((z.h, z.w, z.channels()), (4, 4, 8));
            assert!(z.data.all_finite());
        }
    }

    #[test]
    fn fusion_core_parses() {
        assert_eq!("cross".parse::<FusionCore>().unwrap(), FusionCore::Cross);
        assert!("mamba".parse::<FusionCore>().is_err());
    }
}
