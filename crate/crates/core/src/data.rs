//! Synthetic bi-temporal pairs, the on-disk dataset layout, and batching.
//!
//! Layout: `root/{train,val,test}/{A,B,label}/<name>.png`, with 8-bit RGB
//! images and 8-bit grayscale labels (0 unchanged, 255 changed).

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{ExtendedColorType, ImageReader};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::ImagePair;
use crate::error::{Error, Result};
use crate::tensor::{BilinearTap, FeatureMap, Mask, Mat};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// `(H, W)`, both multiples of 32.
    pub size: (usize, usize),
    pub n_base_shapes: usize,
    pub n_change_shapes: usize,
    pub max_offset_px: f64,
    pub brightness_jitter: f64,
    pub noise_sigma: f64,
    pub shape_kinds: Vec<ShapeKind>,
    pub seed: u64,
    /// Shape bounding boxes start and end on multiples of this many pixels
    /// (1 disables snapping).
    pub snap_px: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            size: (64, 64),
            n_base_shapes: 4,
            n_change_shapes: 2,
            max_offset_px: 0.0,
            brightness_jitter: 0.0,
            noise_sigma: 0.0,
            shape_kinds: vec![ShapeKind::Rectangle, ShapeKind::Ellipse],
            seed: 0,
            snap_px: 1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.size;
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Config(format!(
                "synthetic size {h}x{w} must be positive multiples of 32"
            )));
        }
        for (name, v) in [
            ("max_offset_px", self.max_offset_px),
            ("brightness_jitter", self.brightness_jitter),
            ("noise_sigma", self.noise_sigma),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        if self.snap_px == 0 || h % self.snap_px != 0 || w % self.snap_px != 0 {
            return Err(Error::Config(format!(
                "snap_px {} must divide the image size",
                self.snap_px
            )));
        }
        if self.shape_kinds.is_empty() {
            return Err(Error::Config("shape_kinds must not be empty".into()));
        }
        Ok(())
    }

    /// The same configuration with seed `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }
}

/// A filled shape in pixel coordinates. Rectangles cover the half-open
/// integer box `[y0, y1) x [x0, x1)`; ellipses cover pixels whose centre
/// `(y + 0.5, x + 0.5)` lies inside.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    Rectangle {
        y0: usize,
        x0: usize,
        y1: usize,
        x1: usize,
    },
    Ellipse {
        cy: f64,
        cx: f64,
        ry: f64,
        rx: f64,
    },
}

impl Shape {
    pub fn covers(&self, y: usize, x: usize) -> bool {
        match *self {
            Shape::Rectangle { y0, x0, y1, x1 } => (y0..y1).contains(&y) && (x0..x1).contains(&x),
            Shape::Ellipse { cy, cx, ry, rx } => {
                let dy = (y as f64 + 0.5 - cy) / ry;
                let dx = (x as f64 + 0.5 - cx) / rx;
                dy * dy + dx * dx <= 1.0
            }
        }
    }

    pub fn raster(&self, h: usize, w: usize) -> Mask {
        Mask::from_fn(h, w, |y, x| self.covers(y, x))
    }
}

#[derive(Clone, Copy, Debug)]
struct Painted {
    id: usize,
    shape: Shape,
    color: [f64; 3],
}

fn random_shape(
    rng: &mut ChaCha8Rng,
    kinds: &[ShapeKind],
    h: usize,
    w: usize,
    snap: usize,
) -> Shape {
    let kind = kinds[rng.gen_range(0..kinds.len())];
    // sizes and positions are drawn in units of `snap` pixels
    let (hu, wu) = (h / snap, w / snap);
    let (min_h, max_h) = ((hu / 8).max(1), (hu / 3).max(2));
    let (min_w, max_w) = ((wu / 8).max(1), (wu / 3).max(2));
    let sh = rng.gen_range(min_h..=max_h);
    let sw = rng.gen_range(min_w..=max_w);
    let y0 = rng.gen_range(0..=hu - sh) * snap;
    let x0 = rng.gen_range(0..=wu - sw) * snap;
    let (sh, sw) = (sh * snap, sw * snap);
    match kind {
        ShapeKind::Rectangle => Shape::Rectangle {
            y0,
            x0,
            y1: y0 + sh,
            x1: x0 + sw,
        },
        ShapeKind::Ellipse => Shape::Ellipse {
            cy: y0 as f64 + sh as f64 / 2.0,
            cx: x0 as f64 + sw as f64 / 2.0,
            ry: sh as f64 / 2.0,
            rx: sw as f64 / 2.0,
        },
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [
        rng.gen_range(0.0..1.0),
        rng.gen_range(0.0..1.0),
        rng.gen_range(0.0..1.0),
    ]
}

struct Background {
    base: [f64; 3],
    freq: (f64, f64),
    phase: f64,
}

impl Background {
    fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        let t = (self.freq.0 * y as f64 + self.freq.1 * x as f64 + self.phase + c as f64).sin();
        self.base[c] + 0.06 * t
    }
}

/// Renders `shapes` in order over the background; returns the image and the
/// id of the top-most shape at every pixel (0 for background).
fn render(bg: &Background, shapes: &[Painted], h: usize, w: usize) -> (FeatureMap, Vec<usize>) {
    let mut img = FeatureMap::zeros(h, w, 3);
    let mut ids = vec![0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut px = [bg.at(y, x, 0), bg.at(y, x, 1), bg.at(y, x, 2)];
            for s in shapes {
                if s.shape.covers(y, x) {
                    px = s.color;
                    ids[y * w + x] = s.id;
                }
            }
            for (c, v) in px.iter().enumerate() {
                *img.at_mut(y, x, c) = *v;
            }
        }
    }
    (img, ids)
}

/// Clamps to `[0, 1]` and rounds to the 8-bit grid so that a PNG round trip
/// is lossless.
fn quantize(img: &mut FeatureMap) {
    for v in &mut img.data.data {
        *v = to_u8(*v) as f64 / 255.0;
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn translate(img: &FeatureMap, dy: f64, dx: f64) -> FeatureMap {
    let mut out = FeatureMap::zeros(img.h, img.w, img.channels());
    for y in 0..img.h {
        for x in 0..img.w {
            let t = BilinearTap::new(y as f64 - dy, x as f64 - dx, img.h, img.w);
            for c in 0..img.channels() {
                *out.at_mut(y, x, c) = t.lerp(
                    img.at(t.y0, t.x0, c),
                    img.at(t.y0, t.x1, c),
                    img.at(t.y1, t.x0, c),
                    img.at(t.y1, t.x1, c),
                );
            }
        }
    }
    out
}

fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Deterministic synthetic pair. Shapes come from one random substream of
/// the seed and nuisances from another, so the ground truth does not depend
/// on nuisance settings.
///
/// The ground truth marks pixels whose top-most shape differs between the
/// pre image and the post image before nuisances are applied.
pub fn generate_pair(cfg: &SynthConfig) -> Result<ImagePair> {
    cfg.validate()?;
    let (h, w) = cfg.size;
    let mut rng = substream(cfg.seed, 0);
    let bg = Background {
        base: [
            rng.gen_range(0.2..0.8),
            rng.gen_range(0.2..0.8),
            rng.gen_range(0.2..0.8),
        ],
        freq: (rng.gen_range(0.05..0.5), rng.gen_range(0.05..0.5)),
        phase: rng.gen_range(0.0..2.0 * PI),
    };
    let mut next_id = 1;
    let mut before = Vec::with_capacity(cfg.n_base_shapes);
    for _ in 0..cfg.n_base_shapes {
        let shape = random_shape(&mut rng, &cfg.shape_kinds, h, w, cfg.snap_px);
        let color = random_color(&mut rng);
        before.push(Painted {
            id: next_id,
            shape,
            color,
        });
        next_id += 1;
    }
    let mut after = before.clone();
    for _ in 0..cfg.n_change_shapes {
        let remove = after.iter().any(|p| p.id <= cfg.n_base_shapes) && rng.gen_bool(0.5);
        if remove {
            let base: Vec<usize> = (0..after.len())
                .filter(|&i| after[i].id <= cfg.n_base_shapes)
                .collect();
            after.remove(base[rng.gen_range(0..base.len())]);
        } else {
            let shape = random_shape(&mut rng, &cfg.shape_kinds, h, w, cfg.snap_px);
            let color = random_color(&mut rng);
            after.push(Painted {
                id: next_id,
                shape,
                color,
            });
            next_id += 1;
        }
    }

    let (mut pre, ids_a) = render(&bg, &before, h, w);
    let (mut post, ids_b) = render(&bg, &after, h, w);
    let gt = Mask::new(
        h,
        w,
        ids_a
            .iter()
            .zip(&ids_b)
            .map(|(a, b)| u8::from(a != b))
            .collect(),
    );

    let mut nrng = substream(cfg.seed, 1);
    if cfg.brightness_jitter > 0.0 {
        let shift = nrng.gen_range(-cfg.brightness_jitter..=cfg.brightness_jitter);
        for v in &mut post.data.data {
            *v += shift;
        }
    }
    if cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_sigma).expect("sigma validated");
        for v in &mut post.data.data {
            *v += normal.sample(&mut nrng);
        }
    }
    if cfg.max_offset_px > 0.0 {
        let r = nrng.gen_range(0.0..=cfg.max_offset_px);
        let theta = nrng.gen_range(0.0..2.0 * PI);
        post = translate(&post, r * theta.sin(), r * theta.cos());
    }
    quantize(&mut pre);
    quantize(&mut post);
    ImagePair::new(format!("synth-{}", cfg.seed), pre, post, Some(gt))
}

// ----- on-disk datasets -----

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!(
                "unknown split `{other}` (train, val, test)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestItem {
    pub name: String,
    pub pre: PathBuf,
    pub post: PathBuf,
    pub label: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: Split,
    pub items: Vec<ManifestItem>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

const DIRS: [&str; 3] = ["A", "B", "label"];

fn split_dir(root: &Path, split: Split) -> PathBuf {
    root.join(split.as_str())
}

fn write_png_rgb(path: &Path, img: &FeatureMap) -> Result<()> {
    let buf: Vec<u8> = img.data.data.iter().map(|&v| to_u8(v)).collect();
    image::save_buffer(
        path,
        &buf,
        img.w as u32,
        img.h as u32,
        ExtendedColorType::Rgb8,
    )
    .map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_png_label(path: &Path, mask: &Mask) -> Result<()> {
    let buf: Vec<u8> = mask
        .data
        .iter()
        .map(|&v| if v != 0 { 255 } else { 0 })
        .collect();
    image::save_buffer(
        path,
        &buf,
        mask.w as u32,
        mask.h as u32,
        ExtendedColorType::L8,
    )
    .map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Writes one pair as `<name>.png` under `A/`, `B/` and `label/` of
/// `root/split`.
pub fn write_pair(root: &Path, split: Split, name: &str, pair: &ImagePair) -> Result<ManifestItem> {
    let dir = split_dir(root, split);
    let paths: Vec<PathBuf> = DIRS
        .iter()
        .map(|d| dir.join(d).join(format!("{name}.png")))
        .collect();
    for d in DIRS {
        let p = dir.join(d);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    write_png_rgb(&paths[0], &pair.pre)?;
    write_png_rgb(&paths[1], &pair.post)?;
    let gt = pair
        .gt
        .clone()
        .unwrap_or_else(|| Mask::zeros(pair.pre.h, pair.pre.w));
    write_png_label(&paths[2], &gt)?;
    Ok(ManifestItem {
        name: name.to_string(),
        pre: paths[0].clone(),
        post: paths[1].clone(),
        label: paths[2].clone(),
    })
}

/// Writes `n` pairs with seeds `cfg.seed .. cfg.seed + n` into `out_dir/split`.
pub fn generate_dataset(
    cfg: &SynthConfig,
    n: usize,
    out_dir: &Path,
    split: Split,
) -> Result<DatasetManifest> {
    cfg.validate()?;
    let mut items = Vec::with_capacity(n);
    for i in 0..n {
        let pair = generate_pair(&cfg.with_seed(cfg.seed + i as u64))?;
        items.push(write_pair(out_dir, split, &format!("{i:05}"), &pair)?);
    }
    Ok(DatasetManifest {
        root: out_dir.to_path_buf(),
        split,
        items,
    })
}

fn png_names(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let p = entry.path();
        if p.extension().is_some_and(|e| e == "png") {
            if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                names.push(stem.to_string());
            }
        }
    }
    names.sort();
    Ok(names)
}

/// Lists and validates `root/split`. Every name must be present under all
/// of `A/`, `B/` and `label/`.
pub fn load_manifest(root: &Path, split: Split) -> Result<DatasetManifest> {
    let dir = split_dir(root, split);
    let lists = DIRS
        .iter()
        .map(|d| {
            let p = dir.join(d);
            if p.is_dir() {
                png_names(&p)
            } else if dir.is_dir() {
                Ok(Vec::new())
            } else {
                Err(Error::Data(format!(
                    "split directory {} does not exist",
                    dir.display()
                )))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let mut all: Vec<&String> = lists.iter().flatten().collect();
    all.sort();
    all.dedup();
    let mut items = Vec::with_capacity(all.len());
    for name in all {
        for (d, list) in DIRS.iter().zip(&lists) {
            if list.binary_search(name).is_err() {
                return Err(Error::Data(format!(
                    "missing {d}/{name}.png in {}",
                    dir.display()
                )));
            }
        }
        items.push(ManifestItem {
            name: name.clone(),
            pre: dir.join("A").join(format!("{name}.png")),
            post: dir.join("B").join(format!("{name}.png")),
            label: dir.join("label").join(format!("{name}.png")),
        });
    }
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        split,
        items,
    })
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    let img_err = |e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    };
    ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(img_err)
}

pub fn read_rgb(path: &Path) -> Result<FeatureMap> {
    let img = open_image(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = img.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
    Ok(FeatureMap::new(h, w, Mat::from_vec(h * w, 3, data)))
}

/// Reads a grayscale label; values above 127 are change.
pub fn read_label(path: &Path) -> Result<Mask> {
    let img = open_image(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Mask::new(
        h,
        w,
        img.as_raw().iter().map(|&v| u8::from(v > 127)).collect(),
    ))
}

pub fn load_item(item: &ManifestItem, expected_size: Option<(usize, usize)>) -> Result<ImagePair> {
    let pre = read_rgb(&item.pre)?;
    let post = read_rgb(&item.post)?;
    let gt = read_label(&item.label)?;
    if let Some((h, w)) = expected_size {
        for (p, (ih, iw)) in [
            (&item.pre, (pre.h, pre.w)),
            (&item.post, (post.h, post.w)),
            (&item.label, (gt.h, gt.w)),
        ] {
            if (ih, iw) != (h, w) {
                return Err(Error::Data(format!(
                    "{} is {ih}x{iw}, expected {h}x{w}",
                    p.display()
                )));
            }
        }
    }
    ImagePair::new(item.name.clone(), pre, post, Some(gt))
}

// ----- augmentation -----

/// One of the eight symmetries of the square: horizontal flip when
/// `index >= 4`, followed by `index % 4` counter-clockwise quarter turns.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dihedral(pub u8);

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral(0);

    pub fn all() -> impl Iterator<Item = Dihedral> {
        (0..8).map(Dihedral)
    }

    pub fn inverse(self) -> Dihedral {
        if self.0 < 4 {
            Dihedral((4 - self.0) % 4)
        } else {
            self
        }
    }

    /// Output size and, for each output pixel in raster order, the source
    /// pixel index.
    fn permutation(self, h: usize, w: usize) -> ((usize, usize), Vec<usize>) {
        let mut dims = (h, w);
        let mut src: Vec<usize> = (0..h * w).collect();
        if self.0 >= 4 {
            let (ch, cw) = dims;
            src = (0..ch * cw)
                .map(|i| src[(i / cw) * cw + (cw - 1 - i % cw)])
                .collect();
        }
        for _ in 0..self.0 % 4 {
            let (ch, cw) = dims;
            let (oh, ow) = (cw, ch);
            src = (0..oh * ow)
                .map(|i| {
                    let (y, x) = (i / ow, i % ow);
                    src[x * cw + (cw - 1 - y)]
                })
                .collect();
            dims = (oh, ow);
        }
        (dims, src)
    }

    pub fn apply_map(self, m: &FeatureMap) -> FeatureMap {
        let ((h, w), src) = self.permutation(m.h, m.w);
        let c = m.channels();
        let mut out = Mat::zeros(h * w, c);
        for (i, &s) in src.iter().enumerate() {
            out.row_mut(i).copy_from_slice(m.data.row(s));
        }
        FeatureMap::new(h, w, out)
    }

    pub fn apply_mask(self, m: &Mask) -> Mask {
        let ((h, w), src) = self.permutation(m.h, m.w);
        Mask::new(h, w, src.iter().map(|&s| m.data[s]).collect())
    }

    pub fn apply_pair(self, p: &ImagePair) -> ImagePair {
        ImagePair {
            id: p.id.clone(),
            pre: self.apply_map(&p.pre),
            post: self.apply_map(&p.post),
            gt: p.gt.as_ref().map(|g| self.apply_mask(g)),
        }
    }
}

// ----- batching -----

/// Indexed access to image pairs, from disk or memory.
pub trait PairSource {
    fn len(&self) -> usize;
    fn get(&self, index: usize) -> Result<ImagePair>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl PairSource for DatasetManifest {
    fn len(&self) -> usize {
        self.items.len()
    }

    fn get(&self, index: usize) -> Result<ImagePair> {
        load_item(&self.items[index], None)
    }
}

impl PairSource for [ImagePair] {
    fn len(&self) -> usize {
        <[ImagePair]>::len(self)
    }

    fn get(&self, index: usize) -> Result<ImagePair> {
        Ok(self[index].clone())
    }
}

impl PairSource for Vec<ImagePair> {
    fn len(&self) -> usize {
        <[ImagePair]>::len(self)
    }

    fn get(&self, index: usize) -> Result<ImagePair> {
        Ok(self[index].clone())
    }
}

/// Item order for one pass: identity without a seed, else a seeded shuffle.
pub fn epoch_order(n: usize, shuffle_seed: Option<u64>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut substream(seed, 0));
    }
    order
}

pub struct BatchIter<'a, S: PairSource + ?Sized> {
    source: &'a S,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    aug_rng: Option<ChaCha8Rng>,
}

impl<S: PairSource + ?Sized> Iterator for BatchIter<'_, S> {
    type Item = Result<Vec<ImagePair>>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = self.order[self.pos..end].to_vec();
        self.pos = end;
        let mut batch = Vec::with_capacity(idx.len());
        for i in idx {
            let pair = match self.source.get(i) {
                Ok(p) => p,
                Err(e) => return Some(Err(e)),
            };
            let pair = match &mut self.aug_rng {
                Some(rng) => Dihedral(rng.gen_range(0..8)).apply_pair(&pair),
                None => pair,
            };
            batch.push(pair);
        }
        Some(Ok(batch))
    }
}

/// Batches of `source` in a deterministic order. With `augment`, every item
/// gets an independent random dihedral transform drawn from a stream of the
/// shuffle seed (or of seed 0 when not shuffling).
pub fn batch_iterator<S: PairSource + ?Sized>(
    source: &S,
    batch_size: usize,
    shuffle_seed: Option<u64>,
    augment: bool,
) -> Result<BatchIter<'_, S>> {
    if batch_size < 1 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    Ok(BatchIter {
        source,
        order: epoch_order(source.len(), shuffle_seed),
        pos: 0,
        batch_size,
        aug_rng: augment.then(|| substream(shuffle_seed.unwrap_or(0), 1)),
    })
}
