//! Weight-sharing Siamese encoder producing four-level feature pyramids.
//!
//! The encoder is a small ConvNeXt-style stack: a stride-4 patchify stem,
//! then four stages separated by stride-2 downsampling. Each block is
//! depthwise 7x7 conv → channel layer norm → pointwise 4x expansion → GELU →
//! pointwise projection, added back to the block input.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::nn;
use crate::params::{Init, ParamStore, Scope, INIT_STD};
use crate::tensor::{FeatureMap, Mask};

/// Patchify stem stride; stages then downsample by 2 each.
pub const STEM_STRIDE: usize = 4;
/// Strides of the four pyramid levels relative to the input.
pub const LEVEL_STRIDES: [usize; 4] = [4, 8, 16, 32];
const DW_KERNEL: usize = 7;
const EXPANSION: usize = 4;

/// Two co-registered RGB rasters with an optional change mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub id: String,
    /// `[h*w, 3]` values in `[0, 1]`.
    pub pre: FeatureMap,
    pub post: FeatureMap,
    pub gt: Option<Mask>,
}

impl ImagePair {
    pub fn new(
        id: impl Into<String>,
        pre: FeatureMap,
        post: FeatureMap,
        gt: Option<Mask>,
    ) -> Result<Self> {
        let pair = Self {
            id: id.into(),
            pre,
            post,
            gt,
        };
        pair.validate()?;
        Ok(pair)
    }

    pub fn size(&self) -> (usize, usize) {
        (self.pre.h, self.pre.w)
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.size();
        if (self.post.h, self.post.w) != (h, w) {
            return Err(Error::Shape(format!(
                "pre is {h}x{w} but post is {}x{}",
                self.post.h, self.post.w
            )));
        }
        if self.pre.channels() != 3 || self.post.channels() != 3 {
            return Err(Error::Shape("images must have 3 channels".into()));
        }
        if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "image size {h}x{w} is not a positive multiple of 32"
            )));
        }
        if let Some(gt) = &self.gt {
            if (gt.h, gt.w) != (h, w) {
                return Err(Error::Shape(format!(
                    "gt is {}x{} but images are {h}x{w}",
                    gt.h, gt.w
                )));
            }
            if !gt.is_binary() {
                return Err(Error::Shape("gt must contain only 0 and 1".into()));
            }
        }
        Ok(())
    }

    /// The same pair with pre and post exchanged.
    pub fn swapped(&self) -> ImagePair {
        ImagePair {
            id: self.id.clone(),
            pre: self.post.clone(),
            post: self.pre.clone(),
            gt: self.gt.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub stage_depths: [usize; 4],
    pub stage_widths: [usize; 4],
    pub norm_epsilon: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stage_depths: [1, 1, 1, 1],
            stage_widths: [16, 32, 64, 128],
            norm_epsilon: 1e-6,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        for (i, &d) in self.stage_depths.iter().enumerate() {
            if d < 1 {
                return Err(Error::Config(format!("stage_depths[{i}] must be >= 1")));
            }
        }
        for (i, &c) in self.stage_widths.iter().enumerate() {
            if c < 4 {
                return Err(Error::Config(format!("stage_widths[{i}] must be >= 4")));
            }
            if c % 2 != 0 {
                return Err(Error::Config(format!("stage_widths[{i}] must be even")));
            }
        }
        if !(self.norm_epsilon > 0.0 && self.norm_epsilon.is_finite()) {
            return Err(Error::Config("norm_epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Backbone parameters together with the configuration that shaped them.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams {
    pub config: BackboneConfig,
    pub store: ParamStore,
}

impl BackboneParams {
    pub fn param_count(&self) -> usize {
        self.store.num_scalars()
    }
}

/// Four-level pyramid at strides 4, 8, 16, 32.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<FeatureMap>,
}

pub fn build_backbone(config: &BackboneConfig, seed: u64) -> Result<BackboneParams> {
    config.validate()?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init_backbone(&mut Init::new(&mut store, &mut rng), config);
    Ok(BackboneParams {
        config: config.clone(),
        store,
    })
}

pub fn init_backbone(init: &mut Init, cfg: &BackboneConfig) {
    let w = cfg.stage_widths;
    init.conv("stem.conv", STEM_STRIDE, 3, w[0]);
    init.layer_norm("stem.norm", w[0]);
    for i in 0..4 {
        if i > 0 {
            let mut d = init.pp(format!("down{i}"));
            d.layer_norm("norm", w[i - 1]);
            d.conv("conv", 2, w[i - 1], w[i]);
        }
        for j in 0..cfg.stage_depths[i] {
            let mut b = init.pp(format!("stage{i}.block{j}"));
            b.trunc_normal("dw.weight", DW_KERNEL * DW_KERNEL, w[i], INIT_STD);
            b.zeros("dw.bias", 1, w[i]);
            b.layer_norm("norm", w[i]);
            b.linear("pw1", w[i], EXPANSION * w[i]);
            b.linear("pw2", EXPANSION * w[i], w[i]);
        }
    }
}

/// Closed-form scalar parameter count for a configuration.
pub fn expected_param_count(cfg: &BackboneConfig) -> usize {
    let w = cfg.stage_widths;
    let stem = STEM_STRIDE * STEM_STRIDE * 3 * w[0] + w[0] + 2 * w[0];
    let block = |c: usize| {
        let dw = DW_KERNEL * DW_KERNEL * c + c;
        let norm = 2 * c;
        let pw1 = c * EXPANSION * c + EXPANSION * c;
        let pw2 = EXPANSION * c * c + c;
        dw + norm + pw1 + pw2
    };
    let mut total = stem;
    for i in 0..4 {
        if i > 0 {
            total += 2 * w[i - 1] + 4 * w[i - 1] * w[i] + w[i];
        }
        total += cfg.stage_depths[i] * block(w[i]);
    }
    total
}

/// One encoder pass over an image `[h*w, 3]`; returns the four levels with
/// their grid sizes.
pub fn backbone_forward(
    g: &mut Graph,
    s: &Scope,
    cfg: &BackboneConfig,
    image: Var,
    (h, w): (usize, usize),
) -> Vec<(Var, (usize, usize))> {
    let eps = cfg.norm_epsilon;
    let (x, mut hw) = nn::conv2d(
        g,
        &s.pp("stem.conv"),
        image,
        (h, w),
        STEM_STRIDE,
        STEM_STRIDE,
        0,
    );
    let mut x = nn::layer_norm(g, &s.pp("stem.norm"), x, eps);
    let mut levels = Vec::with_capacity(4);
    for i in 0..4 {
        if i > 0 {
            let d = s.pp(format!("down{i}"));
            let n = nn::layer_norm(g, &d.pp("norm"), x, eps);
            let (y, next) = nn::conv2d(g, &d.pp("conv"), n, hw, 2, 2, 0);
            x = y;
            hw = next;
        }
        for j in 0..cfg.stage_depths[i] {
            x = block_forward(g, &s.pp(format!("stage{i}.block{j}")), x, hw, eps);
        }
        levels.push((x, hw));
    }
    levels
}

fn block_forward(g: &mut Graph, s: &Scope, x: Var, (h, w): (usize, usize), eps: f64) -> Var {
    let pad = DW_KERNEL / 2;
    let y = g.depthwise_conv(x, s.get("dw.weight"), h, w, DW_KERNEL, pad);
    let y = g.add(y, s.get("dw.bias"));
    let y = nn::layer_norm(g, &s.pp("norm"), y, eps);
    let y = nn::linear(g, &s.pp("pw1"), y);
    let y = g.gelu(y);
    let y = nn::linear(g, &s.pp("pw2"), y);
    g.add(x, y)
}

fn pyramid_from(g: &Graph, levels: &[(Var, (usize, usize))]) -> FeaturePyramid {
    FeaturePyramid {
        levels: levels
            .iter()
            .map(|&(v, (h, w))| FeatureMap::new(h, w, g.value(v).clone()))
            .collect(),
    }
}

/// Encodes both images of a pair with the same parameters.
pub fn encode_pair(
    pair: &ImagePair,
    params: &BackboneParams,
) -> Result<(FeaturePyramid, FeaturePyramid)> {
    pair.validate()?;
    let mut g = Graph::new();
    let b = params.store.bind_frozen(&mut g);
    let s = b.root();
    let size = pair.size();
    let pre = g.constant(pair.pre.data.clone());
    let post = g.constant(pair.post.data.clone());
    let l1 = backbone_forward(&mut g, &s, &params.config, pre, size);
    let l2 = backbone_forward(&mut g, &s, &params.config, post, size);
    Ok((pyramid_from(&g, &l1), pyramid_from(&g, &l2)))
}

/// Outcome of [`load_external_weights`].
#[derive(Clone, Debug, PartialEq)]
pub struct LoadReport {
    pub matched: usize,
    /// Tensors in the file with no counterpart in the model (ignored).
    pub extra: Vec<String>,
    /// Model tensors absent from the file (left untouched).
    pub missing: Vec<String>,
}

/// Overwrites backbone parameters from a checkpoint file by name. Names may
/// carry a leading `backbone.` prefix (full-model checkpoints).
pub fn load_external_weights(
    path: &Path,
    params: &BackboneParams,
) -> Result<(BackboneParams, LoadReport)> {
    let ckpt = checkpoint::load(path)?;
    let mut out = params.clone();
    let mut matched = 0;
    let mut extra = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (name, value) in ckpt.tensors.iter() {
        let key = name.strip_prefix("backbone.").unwrap_or(name);
        match out.store.get_mut(key) {
            Some(slot) => {
                if slot.shape() != value.shape() {
                    return Err(Error::ShapeMismatch {
                        name: key.to_string(),
                        expected: slot.shape(),
                        found: value.shape(),
                    });
                }
                *slot = value.clone();
                matched += 1;
                seen.insert(key.to_string());
            }
            None => {
                log::warn!("ignoring tensor `{name}` not present in the backbone");
                extra.push(name.clone());
            }
        }
    }
    let missing = params
        .store
        .names()
        .filter(|n| !seen.contains(*n))
        .cloned()
        .collect();
    Ok((
        out,
        LoadReport {
            matched,
            extra,
            missing,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Mat;

    fn random_image(h: usize, w: usize, seed: u64) -> FeatureMap {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::new(h, w, Mat::from_fn(h * w, 3, |_, _| rng.gen::<f64>()))
    }

    #[test]
    fn same_seed_gives_identical_params() {
        let cfg = BackboneConfig {
            stage_depths: [1, 1, 1, 1],
            stage_widths: [8, 16, 32, 64],
            ..Default::default()
        };
        assert_eq!(
            build_backbone(&cfg, 0).unwrap(),
            build_backbone(&cfg, 0).unwrap()
        );
        assert_ne!(
            build_backbone(&cfg, 0).unwrap(),
            build_backbone(&cfg, 1).unwrap()
        );
    }

    #[test]
    fn odd_width_is_rejected_by_name() {
        let cfg = BackboneConfig {
            stage_widths: [7, 16, 32, 64],
            ..Default::default()
        };
        let err = build_backbone(&cfg, 0).unwrap_err().to_string();
        assert!(err.contains("stage_widths[0] must be even"), "{err}");
        let cfg = BackboneConfig {
            stage_depths: [1, 0, 1, 1],
            ..Default::default()
        };
        assert!(build_backbone(&cfg, 0)
            .unwrap_err()
            .to_string()
            .contains("stage_depths[1]"));
    }

    #[test]
    fn param_count_matches_hand_count() {
        let cfg = BackboneConfig {
            stage_depths: [2, 2, 2, 2],
            stage_widths: [16, 32, 64, 128],
            ..Default::default()
        };
        // One block of width c: dw 49c + c, norm 2c, pw1 4c^2 + 4c, pw2 4c^2 + c
        // = 8c^2 + 57c.
        let block = |c: usize| 8 * c * c + 57 * c;
        let stem = 48 * 16 + 16 + 2 * 16;
        let down = |a: usize, b: usize| 2 * a + 4 * a * b + b;
        let hand = stem
            + 2 * (block(16) + block(32) + block(64) + block(128))
            + down(16, 32)
            + down(32, 64)
            + down(64, 128);
        assert_eq!(hand, 419_792);
        let params = build_backbone(&cfg, 0).unwrap();
        assert_eq!(params.param_count(), hand);
        assert_eq!(expected_param_count(&cfg), hand);
    }

    #[test]
    fn pyramid_follows_stride_schedule() {
        let params = build_backbone(&BackboneConfig::default(), 0).unwrap();
        let pair =
            ImagePair::new("p", random_image(32, 32, 1), random_image(32, 32, 2), None).unwrap();
        let (a, b) = encode_pair(&pair, &params).unwrap();
        for pyr in [&a, &b] {
            let sizes: Vec<_> = pyr
                .levels
                .iter()
                .map(|l| (l.h, l.w, l.channels()))
                .collect();
            assert_eq!(sizes, vec![(8, 8, 16), (4, 4, 32), (2, 2, 64), (1, 1, 128)]);
        }
    }

    #[test]
    fn identical_images_give_identical_pyramids_and_swap_is_symmetric() {
        let params = build_backbone(&BackboneConfig::default(), 3).unwrap();
        let img = random_image(32, 64, 4);
        let pair = ImagePair::new("p", img.clone(), img, None).unwrap();
        let (a, b) = encode_pair(&pair, &params).unwrap();
        assert_eq!(a, b);

        let pair =
            ImagePair::new("q", random_image(64, 32, 5), random_image(64, 32, 6), None).unwrap();
        let (a, b) = encode_pair(&pair, &params).unwrap();
        let (b2, a2) = encode_pair(&pair.swapped(), &params).unwrap();
        assert_eq!((a, b), (a2, b2));
    }

    #[test]
    fn forward_output_is_finite_and_bounded() {
        let params = build_backbone(&BackboneConfig::default(), 11).unwrap();
        let pair =
            ImagePair::new("p", random_image(64, 64, 7), random_image(64, 64, 8), None).unwrap();
        let (a, b) = encode_pair(&pair, &params).unwrap();
        for level in a.levels.iter().chain(&b.levels) {
            assert!(level.data.all_finite());
            // Layer norm keeps activations O(1); observed max is below 10.
            assert!(level.data.max_abs() < 1e4);
        }
    }

    #[test]
    fn size_not_divisible_by_32_is_a_shape_error() {
        let err = ImagePair::new("p", random_image(48, 32, 1), random_image(48, 32, 2), None)
            .unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }
}
