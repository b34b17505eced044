//! The full change detector: Siamese encoder, per-scale interaction, pixel
//! and transformer decoders, and log-sum-exp aggregation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::backbone::{backbone_forward, init_backbone, BackboneConfig, ImagePair};
use crate::decoder::{
    self, aggregate_lse_graph, init_pixel_decoder, init_transformer_decoder, pixel_decode_graph,
    transformer_decode_graph, DecoderConfig, DenseLogits, QuerySet, QueryVars,
};
use crate::error::{Error, Result};
use crate::interaction::{init_interaction, level_forward, InteractionConfig};
use crate::loss::{self, LossBreakdown, LossConfig, LossVars};
use crate::params::{Init, ParamStore, Scope};
use crate::tensor::Mask;

/// Parameter-name prefix of the encoder.
pub const ENCODER_PREFIX: &str = "backbone.";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub interaction: InteractionConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.decoder.validate()?;
        for &c in &self.backbone.stage_widths {
            self.interaction.attention.validate_for(c)?;
        }
        Ok(())
    }

    /// A small configuration for quick experiments and tests.
    pub fn tiny() -> Self {
        Self {
            backbone: BackboneConfig {
                stage_depths: [1, 1, 1, 1],
                stage_widths: [8, 16, 32, 64],
                ..Default::default()
            },
            interaction: InteractionConfig::default(),
            decoder: DecoderConfig {
                num_queries: 8,
                decoder_layers: 2,
                embed_dim: 32,
                heads: 4,
                ffn_dim: 64,
                ..Default::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

/// Graph nodes of one forward pass.
pub struct ForwardVars {
    pub queries: QueryVars,
    /// Intermediate decoder predictions, earliest first.
    pub aux: Vec<QueryVars>,
    /// `[h4*w4, 2]` dense logits.
    pub dense: Var,
    pub grid: (usize, usize),
}

/// Output of [`Model::predict`].
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub mask: Mask,
    pub dense: DenseLogits,
    pub queries: QuerySet,
}

pub fn init_model(init: &mut Init, cfg: &ModelConfig) {
    init_backbone(&mut init.pp("backbone"), &cfg.backbone);
    init_interaction(
        &mut init.pp("interaction"),
        &cfg.backbone.stage_widths,
        &cfg.interaction,
    );
    init_pixel_decoder(
        &mut init.pp("decoder.pixel"),
        &cfg.backbone.stage_widths,
        cfg.decoder.embed_dim,
    );
    init_transformer_decoder(&mut init.pp("decoder.transformer"), &cfg.decoder);
}

pub fn forward_graph(g: &mut Graph, s: &Scope, cfg: &ModelConfig, pair: &ImagePair) -> ForwardVars {
    let size = pair.size();
    let pre = g.constant(pair.pre.data.clone());
    let post = g.constant(pair.post.data.clone());
    let bb = s.pp("backbone");
    let l1 = backbone_forward(g, &bb, &cfg.backbone, pre, size);
    let l2 = backbone_forward(g, &bb, &cfg.backbone, post, size);
    let fused: Vec<(Var, (usize, usize))> = l1
        .iter()
        .zip(&l2)
        .enumerate()
        .map(|(i, (&(a, hw), &(b, _)))| {
            let z = level_forward(
                g,
                &s.pp(format!("interaction.level{i}")),
                &cfg.interaction,
                a,
                b,
                hw,
            );
            (z, hw)
        })
        .collect();
    let (embed, memory) = pixel_decode_graph(g, &s.pp("decoder.pixel"), &fused);
    let grid = fused[0].1;
    let dec = transformer_decode_graph(
        g,
        &s.pp("decoder.transformer"),
        &cfg.decoder,
        &memory,
        embed,
        grid,
    );
    let dense = aggregate_lse_graph(
        g,
        dec.out.class_logits,
        dec.out.mask_logits,
        cfg.decoder.class_scores,
    );
    ForwardVars {
        queries: dec.out,
        aux: dec.aux,
        dense,
        grid,
    }
}

fn query_set(g: &Graph, q: &QueryVars, grid: (usize, usize)) -> QuerySet {
    QuerySet {
        class_logits: g.value(q.class_logits).clone(),
        mask_logits: g.value(q.mask_logits).clone(),
        h: grid.0,
        w: grid.1,
    }
}

/// Loss graph for one labelled pair. `pixel_weights` are resolved over the
/// whole batch by the caller. Non-finite network outputs are reported as
/// [`Error::NonFiniteLoss`] with step 0; the training loop fills in the step.
pub fn loss_graph(
    g: &mut Graph,
    s: &Scope,
    cfg: &ModelConfig,
    loss_cfg: &LossConfig,
    pair: &ImagePair,
    pixel_weights: [f64; 2],
) -> Result<(LossVars, LossBreakdown)> {
    let gt = pair
        .gt
        .as_ref()
        .ok_or_else(|| Error::Data(format!("pair `{}` has no ground truth", pair.id)))?;
    let fwd = forward_graph(g, s, cfg, pair);
    for (what, v) in [
        ("class logits", fwd.queries.class_logits),
        ("mask logits", fwd.queries.mask_logits),
        ("dense logits", fwd.dense),
    ] {
        if !g.value(v).all_finite() {
            return Err(Error::NonFiniteLoss {
                step: 0,
                breakdown: format!("non-finite {what} (pair `{}`)", pair.id),
            });
        }
    }
    let grid_target = loss::downsample_gt(gt)?;
    let ts = loss::targets_from_grid(&grid_target);
    let qs = query_set(g, &fwd.queries, fwd.grid);
    let m = loss::match_queries(&qs, &ts, loss_cfg)?;
    let mut vars = loss::total_loss_graph(
        g,
        fwd.queries.class_logits,
        fwd.queries.mask_logits,
        fwd.dense,
        &ts,
        &grid_target,
        &m,
        pixel_weights,
        loss_cfg,
    );
    let breakdown = LossBreakdown::from_vars(g, &vars);
    if loss_cfg.deep_supervision {
        for aux in &fwd.aux {
            let qs = query_set(g, aux, fwd.grid);
            let m = loss::match_queries(&qs, &ts, loss_cfg)?;
            let set = loss::set_loss_graph(g, aux.class_logits, aux.mask_logits, &ts, &m, loss_cfg);
            let scaled = g.scale(set.total, loss_cfg.lambda_set);
            vars.total = g.add(vars.total, scaled);
        }
    }
    Ok((vars, breakdown))
}

impl Model {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_model(&mut Init::new(&mut params, &mut rng), config);
        Ok(Model {
            config: config.clone(),
            params,
        })
    }

    /// Builds the model for `config` and takes every tensor from `tensors`,
    /// which must match the build exactly in names and shapes.
    pub fn from_tensors(config: &ModelConfig, tensors: &ParamStore) -> Result<Model> {
        let mut model = Model::new(config, 0)?;
        for (name, slot) in model.params.iter_mut() {
            let value = tensors
                .get(name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks tensor `{name}`")))?;
            if value.shape() != slot.shape() {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    expected: slot.shape(),
                    found: value.shape(),
                });
            }
            *slot = value.clone();
        }
        if let Some(extra) = tensors.names().find(|n| !model.params.contains(n)) {
            return Err(Error::Config(format!(
                "checkpoint has unexpected tensor `{extra}`"
            )));
        }
        Ok(model)
    }

    pub fn param_count(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn predict(&self, pair: &ImagePair) -> Result<Prediction> {
        pair.validate()?;
        let mut g = Graph::new();
        let b = self.params.bind_frozen(&mut g);
        let fwd = forward_graph(&mut g, &b.root(), &self.config, pair);
        let queries = query_set(&g, &fwd.queries, fwd.grid);
        let dense = DenseLogits {
            logits: g.value(fwd.dense).clone(),
            h: fwd.grid.0,
            w: fwd.grid.1,
        };
        let mask = decoder::predict_mask(&dense, pair.size());
        Ok(Prediction {
            mask,
            dense,
            queries,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_pair, SynthConfig};

    #[test]
    fn tiny_model_predicts_full_resolution_mask() {
        let model = Model::new(&ModelConfig::tiny(), 1).unwrap();
        let pair = generate_pair(&SynthConfig::default()).unwrap();
        let p = model.predict(&pair).unwrap();
        assert_eq!((p.mask.h, p.mask.w), (64, 64));
        assert_eq!((p.dense.h, p.dense.w), (16, 16));
        assert_eq!(p.queries.class_logits.shape(), (8, 3));
        assert!(p.dense.logits.all_finite());
    }

    #[test]
    fn from_tensors_rejects_other_widths() {
        let a = Model::new(&ModelConfig::tiny(), 1).unwrap();
        let mut cfg = ModelConfig::tiny();
        cfg.decoder.embed_dim = 16;
        assert!(matches!(
            Model::from_tensors(&cfg, &a.params),
            Err(Error::ShapeMismatch { .. })
        ));
        assert_eq!(Model::from_tensors(&a.config, &a.params).unwrap(), a);
    }
}
