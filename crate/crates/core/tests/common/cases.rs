//! Gradient-check cases shared by the gradient tests and the acceptance
//! run. Each case builds random parameters and inputs from its seed.

use cdnet::autodiff::{Graph, Var};
use cdnet::backbone::{backbone_forward, init_backbone, BackboneConfig};
use cdnet::decoder::{
    aggregate_lse_graph, init_pixel_decoder, init_transformer_decoder, pixel_decode_graph,
    transformer_decode_graph, ClassScores, DecoderConfig, MemoryVar, QuerySet,
};
use cdnet::interaction::{
    build_cross, build_deformable, build_ffm, build_frm, cross_forward, deformable_forward,
    ffm_forward, frm_forward, DeformAttnConfig, FusionCore, InteractionConfig,
};
use cdnet::loss::{
    match_queries, pixel_loss_graph, resolve_pixel_weights, set_loss_graph, targets_from_grid,
    total_loss_graph, LossConfig, MatchResult, TargetSet,
};
use cdnet::params::{Init, ParamStore, Scope};
use cdnet::tensor::Mask;

use super::{grad_check, grad_check_where, randn, random_mask, rng, GradCheck};

const COORDS: usize = 240;

pub type Case = fn(u64) -> GradCheck;

pub fn all() -> Vec<(&'static str, Case)> {
    vec![
        ("backbone (input)", backbone_input),
        ("frm", frm),
        ("deformable attention (features)", deformable),
        ("deformable attention (offsets)", deformable_offsets),
        ("cross attention", cross),
        ("ffm (deform core)", ffm_deform),
        ("pixel decoder", pixel_decoder),
        ("transformer decoder", transformer_decoder),
        ("lse aggregation", lse),
        ("mask bce", bce),
        ("dice", dice),
        ("set loss", set_loss),
        ("pixel loss", pixel_loss),
        ("total loss", total_loss),
    ]
}

fn backbone_input(seed: u64) -> GradCheck {
    let cfg = BackboneConfig {
        stage_depths: [1, 1, 1, 1],
        stage_widths: [8, 8, 8, 8],
        ..Default::default()
    };
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    init_backbone(&mut Init::new(&mut store, &mut r), &cfg);
    store.insert("x.image", randn(&mut r, 32 * 32, 3, 1.0));
    grad_check_where(
        &store,
        |n| n == "x.image",
        COORDS,
        seed,
        |g, s| {
            let levels = backbone_forward(g, s, &cfg, s.get("x.image"), (32, 32));
            let sum: Vec<Var> = levels.iter().map(|&(v, _)| g.sum(v)).collect();
            let ones = sum.iter().skip(1).fold(sum[0], |acc, &v| g.add(acc, v));
            vec![ones]
        },
    )
}

fn frm(seed: u64) -> GradCheck {
    let (c, h, w) = (4, 4, 5);
    let mut r = rng(seed);
    let mut store = build_frm(c, seed);
    store.insert("lambda_channel", randn(&mut r, 1, 1, 0.8));
    store.insert("lambda_spatial", randn(&mut r, 1, 1, 0.8));
    store.insert("x.f1", randn(&mut r, h * w, c, 1.0));
    store.insert("x.f2", randn(&mut r, h * w, c, 1.0));
    grad_check(&store, COORDS, seed, |g, s| {
        let (a, b) = frm_forward(g, s, s.get("x.f1"), s.get("x.f2"), (h, w));
        vec![a, b]
    })
}

const DEFORM_HW: (usize, usize) = (5, 5);

fn deform_cfg() -> DeformAttnConfig {
    DeformAttnConfig {
        heads: 2,
        points: 2,
        ..Default::default()
    }
}

/// Random offsets pushed off the integer lattice by +0.3 px, so that
/// bilinear sampling is differentiable at every sampled point.
fn deform_store(seed: u64) -> ParamStore {
    let c = 4;
    let cfg = deform_cfg();
    let (h, w) = DEFORM_HW;
    let mut r = rng(seed);
    let mut store = build_deformable(c, &cfg, seed).unwrap();
    let mk2 = cfg.heads * cfg.points * 2;
    store.insert("sampling_offsets.weight", randn(&mut r, c, mk2, 0.3));
    let bias = randn(&mut r, 1, mk2, 0.8).map(|v| v + 0.3);
    store.insert("sampling_offsets.bias", bias);
    store.insert(
        "attention_weights.weight",
        randn(&mut r, c, cfg.heads * cfg.points, 0.5),
    );
    store.insert("x.q", randn(&mut r, h * w, c, 1.0));
    store.insert("x.v", randn(&mut r, h * w, c, 1.0));
    store
}

fn run_deform(g: &mut Graph, s: &Scope) -> Vec<Var> {
    vec![deformable_forward(
        g,
        s,
        &deform_cfg(),
        s.get("x.q"),
        s.get("x.v"),
        DEFORM_HW,
    )]
}

fn deformable(seed: u64) -> GradCheck {
    grad_check_where(
        &deform_store(seed),
        |n| !n.starts_with("sampling_offsets"),
        COORDS,
        seed,
        run_deform,
    )
}

fn deformable_offsets(seed: u64) -> GradCheck {
    grad_check_where(
        &deform_store(seed),
        |n| n.starts_with("sampling_offsets"),
        COORDS,
        seed,
        run_deform,
    )
}

fn cross(seed: u64) -> GradCheck {
    let c = 4;
    let mut r = rng(seed);
    let mut store = build_cross(c, seed);
    store.insert("x.q", randn(&mut r, 6, c, 1.0));
    store.insert("x.v", randn(&mut r, 9, c, 1.0));
    grad_check(&store, COORDS, seed, |g, s| {
        vec![cross_forward(g, s, 2, s.get("x.q"), s.get("x.v"))]
    })
}

fn ffm_deform(seed: u64) -> GradCheck {
    let (c, h, w) = (4, 4, 4);
    let cfg = InteractionConfig {
        fusion_core: FusionCore::Deform,
        attention: DeformAttnConfig {
            heads: 2,
            points: 2,
            offset_init_scale: 0.7,
            ..Default::default()
        },
    };
    let mut r = rng(seed);
    let mut store = build_ffm(c, &cfg, seed).unwrap();
    store.insert("core.attention_weights.weight", randn(&mut r, c, 4, 0.5));
    store.insert("x.a", randn(&mut r, h * w, c, 1.0));
    store.insert("x.b", randn(&mut r, h * w, c, 1.0));
    grad_check_where(
        &store,
        |n| !n.contains("sampling_offsets"),
        COORDS,
        seed,
        |g, s| vec![ffm_forward(g, s, &cfg, s.get("x.a"), s.get("x.b"), (h, w))],
    )
}

fn pixel_decoder(seed: u64) -> GradCheck {
    let widths = [4, 6, 8, 8];
    let d = 8;
    // Odd seeds use sizes that need the crop fallback.
    let sizes = if seed.is_multiple_of(2) {
        [(16, 16), (8, 8), (4, 4), (2, 2)]
    } else {
        [(12, 10), (6, 5), (3, 3), (2, 2)]
    };
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    init_pixel_decoder(&mut Init::new(&mut store, &mut r), &widths, d);
    for (i, (&c, &(h, w))) in widths.iter().zip(&sizes).enumerate() {
        store.insert(format!("x.l{i}"), randn(&mut r, h * w, c, 1.0));
    }
    grad_check(&store, COORDS, seed, |g, s| {
        let levels: Vec<(Var, (usize, usize))> = (0..4)
            .map(|i| (s.get(&format!("x.l{i}")), sizes[i]))
            .collect();
        let (embed, mem) = pixel_decode_graph(g, s, &levels);
        let mut out = vec![embed];
        for m in mem {
            out.push(m.tokens);
            out.push(m.pos);
        }
        out
    })
}

fn transformer_decoder(seed: u64) -> GradCheck {
    let cfg = DecoderConfig {
        num_queries: 3,
        decoder_layers: 2,
        embed_dim: 8,
        heads: 2,
        ffn_dim: 16,
        masked_attention: seed.is_multiple_of(2),
        ..Default::default()
    };
    let grid = (8, 8);
    let levels = [(1, 1), (2, 2), (4, 4)];
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    init_transformer_decoder(&mut Init::new(&mut store, &mut r), &cfg);
    for (j, &(h, w)) in levels.iter().enumerate() {
        store.insert(format!("x.mem{j}"), randn(&mut r, h * w, 8, 1.0));
        store.insert(format!("x.pos{j}"), randn(&mut r, h * w, 8, 0.5));
    }
    store.insert("x.embed", randn(&mut r, grid.0 * grid.1, 8, 1.0));
    grad_check(&store, COORDS, seed, |g, s| {
        let memory: Vec<MemoryVar> = levels
            .iter()
            .enumerate()
            .map(|(j, &(h, w))| MemoryVar {
                tokens: s.get(&format!("x.mem{j}")),
                pos: s.get(&format!("x.pos{j}")),
                h,
                w,
            })
            .collect();
        let out = transformer_decode_graph(g, s, &cfg, &memory, s.get("x.embed"), grid);
        let mut v = vec![out.out.class_logits, out.out.mask_logits];
        for a in out.aux {
            v.push(a.class_logits);
            v.push(a.mask_logits);
        }
        v
    })
}

fn lse(seed: u64) -> GradCheck {
    let mode = if seed.is_multiple_of(2) {
        ClassScores::Raw
    } else {
        ClassScores::LogSoftmax
    };
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    store.insert("x.class", randn(&mut r, 4, 3, 2.0));
    store.insert("x.mask", randn(&mut r, 4, 12, 3.0));
    grad_check(&store, COORDS, seed, |g, s| {
        vec![aggregate_lse_graph(
            g,
            s.get("x.class"),
            s.get("x.mask"),
            mode,
        )]
    })
}

struct LossSetup {
    store: ParamStore,
    grid: Mask,
    targets: TargetSet,
    matching: MatchResult,
    cfg: LossConfig,
}

/// Random query outputs on a 4x4 grid with a matching computed once and
/// then held fixed.
fn loss_setup(seed: u64) -> LossSetup {
    let (q, h, w) = (5, 4, 4);
    let mut r = rng(seed);
    let mut grid = random_mask(&mut r, h, w, 0.4);
    grid.data[0] = 1;
    grid.data[h * w - 1] = 0;
    let targets = targets_from_grid(&grid);
    let class = randn(&mut r, q, 3, 1.5);
    let mask = randn(&mut r, q, h * w, 2.0);
    let cfg = LossConfig::default();
    let qs = QuerySet {
        class_logits: class.clone(),
        mask_logits: mask.clone(),
        h,
        w,
    };
    let matching = match_queries(&qs, &targets, &cfg).unwrap();
    let mut store = ParamStore::new();
    store.insert("x.class", class);
    store.insert("x.mask", mask);
    store.insert("x.dense", randn(&mut r, h * w, 2, 1.5));
    LossSetup {
        store,
        grid,
        targets,
        matching,
        cfg,
    }
}

fn set_part(seed: u64, pick: fn(&cdnet::loss::SetLossVars) -> Var) -> GradCheck {
    let st = loss_setup(seed);
    grad_check_where(
        &st.store,
        |n| n != "x.dense",
        COORDS,
        seed,
        |g, s| {
            let v = set_loss_graph(
                g,
                s.get("x.class"),
                s.get("x.mask"),
                &st.targets,
                &st.matching,
                &st.cfg,
            );
            vec![pick(&v)]
        },
    )
}

fn bce(seed: u64) -> GradCheck {
    set_part(seed, |v| v.bce)
}

fn dice(seed: u64) -> GradCheck {
    set_part(seed, |v| v.dice)
}

fn set_loss(seed: u64) -> GradCheck {
    set_part(seed, |v| v.total)
}

fn pixel_loss(seed: u64) -> GradCheck {
    let st = loss_setup(seed);
    let weights = resolve_pixel_weights([&st.grid], st.cfg.pixel_class_weights);
    grad_check_where(
        &st.store,
        |n| n == "x.dense",
        COORDS,
        seed,
        |g, s| vec![pixel_loss_graph(g, s.get("x.dense"), &st.grid, weights)],
    )
}

fn total_loss(seed: u64) -> GradCheck {
    let st = loss_setup(seed);
    let weights = resolve_pixel_weights([&st.grid], st.cfg.pixel_class_weights);
    grad_check_where(
        &st.store,
        |n| n != "x.dense",
        COORDS,
        seed,
        |g, s| {
            let (class, mask) = (s.get("x.class"), s.get("x.mask"));
            let dense = aggregate_lse_graph(g, class, mask, ClassScores::Raw);
            let v = total_loss_graph(
                g,
                class,
                mask,
                dense,
                &st.targets,
                &st.grid,
                &st.matching,
                weights,
                &st.cfg,
            );
            vec![v.total]
        },
    )
}
