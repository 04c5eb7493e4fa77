//! Dataset ingestion and the seeded synthetic change-detection generator.
//!
//! Three real-data layouts are supported (panoramic street pairs with the
//! slide-and-rotate expansion, the sequence-structured perspective dataset,
//! and flat `t0/ t1/ mask/` directories) plus a fully synthetic source that
//! renders seeded scenes of geometric objects with exact change masks.
//! Synthetic datasets written to disk use the flat layout, so every
//! downstream command is source-agnostic.

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{
    crop, load_mask, load_rgb, mask_to_image, image_to_mask, resize_bilinear, resize_nearest,
    rotate_quarter, save_mask, save_rgb, Image, Mask,
};
use crate::rng::SeededRng;

/// A registered pair of temporal images with an optional change mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImagePair {
    pub t0: Image,
    pub t1: Image,
    pub mask: Option<Mask>,
}

impl ImagePair {
    pub fn new(t0: Image, t1: Image, mask: Option<Mask>) -> Result<Self> {
        let ok = t0.w == t1.w
            && t0.h == t1.h
            && mask.as_ref().is_none_or(|m| m.w == t0.w && m.h == t0.h);
        if !ok {
            return Err(Error::Dataset(format!(
                "pair dimensions disagree: t0 {}x{}, t1 {}x{}, mask {:?}",
                t0.w,
                t0.h,
                t1.w,
                t1.h,
                mask.as_ref().map(|m| (m.w, m.h))
            )));
        }
        Ok(ImagePair { t0, t1, mask })
    }

    pub fn size(&self) -> (usize, usize) {
        (self.t0.w, self.t0.h)
    }

    /// Apply the same resize to both images (bilinear) and the mask (nearest).
    pub fn resized(&self, w: usize, h: usize) -> ImagePair {
        ImagePair {
            t0: resize_bilinear(&self.t0, w, h),
            t1: resize_bilinear(&self.t1, w, h),
            mask: self.mask.as_ref().map(|m| {
                image_to_mask(&resize_nearest(&mask_to_image(m), w, h))
            }),
        }
    }

    /// Quarter-turn rotations applied identically to both images and the mask.
    pub fn rotated(&self, turns: usize) -> ImagePair {
        ImagePair {
            t0: rotate_quarter(&self.t0, turns),
            t1: rotate_quarter(&self.t1, turns),
            mask: self.mask.as_ref().map(|m| {
                image_to_mask(&rotate_quarter(&mask_to_image(m), turns))
            }),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    PcdTsunami,
    PcdGsv,
    VlCmuCd,
    Synthetic,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    Train,
    Test,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub source: Source,
    #[serde(default)]
    pub split: Split,
    /// Dataset directory. Optional for the synthetic source, which can
    /// generate in memory from the seed.
    #[serde(default)]
    pub root: Option<PathBuf>,
    /// Generator seed (synthetic source).
    #[serde(default)]
    pub seed: u64,
    /// Target size; defaults per source (256 for panoramic patches, 512 for
    /// the sequence dataset, native size for synthetic).
    #[serde(default)]
    pub resize_to: Option<(usize, usize)>,
    /// Synthetic generator: number of pairs.
    #[serde(default = "default_n_pairs")]
    pub n_pairs: usize,
    /// Synthetic generator: image size.
    #[serde(default = "default_synth_size")]
    pub size: (usize, usize),
    /// Synthetic generator: fraction of changed objects rendered as thin
    /// strips (aspect >= 6).
    #[serde(default = "default_strip_fraction")]
    pub strip_fraction: f64,
    /// Optional 80-20 cross-validation fold (0..5) for the panoramic source.
    #[serde(default)]
    pub fold: Option<usize>,
    #[serde(default)]
    pub fold_seed: u64,
}

fn default_n_pairs() -> usize {
    200
}
fn default_synth_size() -> (usize, usize) {
    (64, 64)
}
fn default_strip_fraction() -> f64 {
    0.3
}

impl DatasetSpec {
    pub fn synthetic(seed: u64, n_pairs: usize, size: (usize, usize)) -> Self {
        DatasetSpec {
            source: Source::Synthetic,
            split: Split::Train,
            root: None,
            seed,
            resize_to: None,
            n_pairs,
            size,
            strip_fraction: default_strip_fraction(),
            fold: None,
            fold_seed: 0,
        }
    }

    /// Effective target size for loaded pairs; `None` keeps the native size.
    pub fn effective_resize(&self) -> Option<(usize, usize)> {
        self.resize_to.or(match self.source {
            Source::PcdTsunami | Source::PcdGsv => Some((256, 256)),
            Source::VlCmuCd => Some((512, 512)),
            Source::Synthetic => None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if let Some((h, w)) = self.resize_to {
            if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
                return Err(Error::Config(format!(
                    "resize_to ({h},{w}) must be positive and divisible by 32"
                )));
            }
        }
        if let Some(f) = self.fold {
            if f >= 5 {
                return Err(Error::Config(format!("fold must be in 0..5, got {f}")));
            }
        }
        if !(0.0..=1.0).contains(&self.strip_fraction) {
            return Err(Error::Config(format!(
                "strip_fraction must be in [0,1], got {}",
                self.strip_fraction
            )));
        }
        let (w, h) = self.size;
        if self.source == Source::Synthetic && self.root.is_none() && (w % 32 != 0 || h % 32 != 0 || w == 0 || h == 0)
        {
            return Err(Error::Config(format!("synthetic size ({w},{h}) must be divisible by 32")));
        }
        Ok(())
    }
}

// ------------------------------------------------------ synthetic generator

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ObjKind {
    Rect,
    Ellipse,
}

/// Axis-aligned object with exact per-pixel membership (pixel centers).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Obj {
    pub kind: ObjKind,
    pub cx: f64,
    pub cy: f64,
    pub half_w: f64,
    pub half_h: f64,
    pub color: [u8; 3],
}

impl Obj {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        let px = x as f64 + 0.5;
        let py = y as f64 + 0.5;
        match self.kind {
            ObjKind::Rect => {
                (px - self.cx).abs() <= self.half_w && (py - self.cy).abs() <= self.half_h
            }
            ObjKind::Ellipse => {
                let dx = (px - self.cx) / self.half_w;
                let dy = (py - self.cy) / self.half_h;
                dx * dx + dy * dy <= 1.0
            }
        }
    }

    fn bounds(&self, w: usize, h: usize) -> (usize, usize, usize, usize) {
        let x0 = (self.cx - self.half_w - 1.0).floor().max(0.0) as usize;
        let y0 = (self.cy - self.half_h - 1.0).floor().max(0.0) as usize;
        let x1 = ((self.cx + self.half_w + 1.0).ceil() as usize).min(w);
        let y1 = ((self.cy + self.half_h + 1.0).ceil() as usize).min(h);
        (x0, y0, x1, y1)
    }
}

/// Geometry of one synthetic scene: full render lists per temporal point and
/// the subsets that changed between them.
#[derive(Clone, Debug)]
pub struct SceneSpec {
    pub objects_t0: Vec<Obj>,
    pub objects_t1: Vec<Obj>,
    pub changed_t0: Vec<Obj>,
    pub changed_t1: Vec<Obj>,
}

fn paint(img: &mut Image, obj: &Obj) {
    let (x0, y0, x1, y1) = obj.bounds(img.w, img.h);
    for y in y0..y1 {
        for x in x0..x1 {
            if obj.contains(x, y) {
                for ch in 0..3 {
                    img.set_px(x, y, ch, obj.color[ch]);
                }
            }
        }
    }
}

fn paint_support(buf: &mut [bool], w: usize, h: usize, obj: &Obj) {
    let (x0, y0, x1, y1) = obj.bounds(w, h);
    for y in y0..y1 {
        for x in x0..x1 {
            if obj.contains(x, y) {
                buf[y * w + x] = true;
            }
        }
    }
}

/// Change mask of a scene: symmetric difference of the changed-object
/// supports at the two times.
pub fn scene_mask(scene: &SceneSpec, size: (usize, usize)) -> Mask {
    let (w, h) = size;
    let mut u0 = vec![false; w * h];
    let mut u1 = vec![false; w * h];
    for obj in &scene.changed_t0 {
        paint_support(&mut u0, w, h, obj);
    }
    for obj in &scene.changed_t1 {
        paint_support(&mut u1, w, h, obj);
    }
    Mask { w, h, data: u0.iter().zip(&u1).map(|(a, b)| u8::from(a != b)).collect() }
}

fn gen_background(rng: &mut SeededRng, w: usize, h: usize) -> Image {
    let (cw, ch) = ((w / 8).max(2), (h / 8).max(2));
    let mut coarse = Image::filled(cw, ch, 3, 0);
    for v in coarse.data.iter_mut() {
        *v = rng.range(60, 181) as u8;
    }
    resize_bilinear(&coarse, w, h)
}

fn gen_color(rng: &mut SeededRng) -> [u8; 3] {
    // Values outside the background band so objects stay visible.
    let mut c = [0u8; 3];
    for v in c.iter_mut() {
        *v = if rng.chance(0.5) { rng.range(0, 56) as u8 } else { rng.range(190, 256) as u8 };
    }
    c
}

fn gen_object(rng: &mut SeededRng, w: usize, h: usize) -> Obj {
    let min_dim = w.min(h) as f64;
    let kind = if rng.chance(0.5) { ObjKind::Rect } else { ObjKind::Ellipse };
    Obj {
        kind,
        cx: rng.uniform_in(0.1, 0.9) * w as f64,
        cy: rng.uniform_in(0.1, 0.9) * h as f64,
        half_w: rng.uniform_in(0.05, 0.14) * min_dim,
        half_h: rng.uniform_in(0.05, 0.14) * min_dim,
        color: gen_color(rng),
    }
}

fn make_strip(rng: &mut SeededRng, obj: &mut Obj, w: usize, h: usize) {
    let min_dim = w.min(h) as f64;
    let half_long = rng.uniform_in(0.12, 0.22) * min_dim;
    let half_short = (half_long / rng.uniform_in(6.0, 9.0)).max(0.6);
    if rng.chance(0.5) {
        obj.half_w = half_long;
        obj.half_h = half_short;
    } else {
        obj.half_w = half_short;
        obj.half_h = half_long;
    }
}

/// Scene + rendered pair for item `index` of the dataset seeded by `seed`.
/// Items draw from independent streams, so generation order is free.
pub fn synth_pair(seed: u64, index: u64, size: (usize, usize), strip_fraction: f64) -> (ImagePair, SceneSpec) {
    let (w, h) = size;
    let mut rng = SeededRng::stream(seed, index);

    let background = gen_background(&mut rng, w, h);

    // Base objects in t0; a subset changes (removed or moved), extra objects
    // appear only in t1.
    #[derive(Clone, Copy, PartialEq)]
    enum Change {
        Keep,
        Remove,
        Move,
    }
    let n_base = rng.range(5, 9);
    let mut base: Vec<Obj> = (0..n_base).map(|_| gen_object(&mut rng, w, h)).collect();
    let changes: Vec<Change> = (0..n_base)
        .map(|_| {
            if rng.chance(0.5) {
                if rng.chance(0.5) {
                    Change::Remove
                } else {
                    Change::Move
                }
            } else {
                Change::Keep
            }
        })
        .collect();
    let n_add = rng.range(1, 4);
    let mut added: Vec<Obj> = (0..n_add).map(|_| gen_object(&mut rng, w, h)).collect();

    // Convert the requested fraction of changed objects into thin strips.
    let mut changed_slots: Vec<usize> = changes
        .iter()
        .enumerate()
        .filter(|(_, c)| **c != Change::Keep)
        .map(|(i, _)| i)
        .collect();
    let n_changed = changed_slots.len() + added.len();
    let n_strips = (strip_fraction * n_changed as f64).round() as usize;
    rng.shuffle(&mut changed_slots);
    for s in 0..n_strips {
        if s < changed_slots.len() {
            make_strip(&mut rng, &mut base[changed_slots[s]], w, h);
        } else {
            let i = s - changed_slots.len();
            make_strip(&mut rng, &mut added[i], w, h);
        }
    }

    // Assemble the two render lists and the changed subsets.
    let mut objects_t1 = Vec::new();
    let mut changed_t0 = Vec::new();
    let mut changed_t1 = Vec::new();
    for (obj, change) in base.iter().zip(&changes) {
        match change {
            Change::Keep => objects_t1.push(*obj),
            Change::Remove => changed_t0.push(*obj),
            Change::Move => {
                let mut moved = *obj;
                let reach = obj.half_w.max(obj.half_h);
                let dx = rng.uniform_in(0.9, 2.2) * reach * if rng.chance(0.5) { 1.0 } else { -1.0 };
                let dy = rng.uniform_in(0.9, 2.2) * reach * if rng.chance(0.5) { 1.0 } else { -1.0 };
                moved.cx = (moved.cx + dx).clamp(0.05 * w as f64, 0.95 * w as f64);
                moved.cy = (moved.cy + dy).clamp(0.05 * h as f64, 0.95 * h as f64);
                objects_t1.push(moved);
                changed_t0.push(*obj);
                changed_t1.push(moved);
            }
        }
    }
    for obj in &added {
        objects_t1.push(*obj);
        changed_t1.push(*obj);
    }
    let scene =
        SceneSpec { objects_t0: base.clone(), objects_t1, changed_t0, changed_t1 };

    // Render t0/t1 over the shared background, then photometric drift on t1.
    let mut t0 = background.clone();
    for obj in &scene.objects_t0 {
        paint(&mut t0, obj);
    }
    let mut t1 = background;
    for obj in &scene.objects_t1 {
        paint(&mut t1, obj);
    }
    let brightness = rng.range(0, 21) as i32 - 10;
    for v in t1.data.iter_mut() {
        let noise = rng.range(0, 7) as i32 - 3;
        *v = (*v as i32 + brightness + noise).clamp(0, 255) as u8;
    }

    let mask = scene_mask(&scene, size);
    let pair = ImagePair::new(t0, t1, Some(mask)).expect("generator sizes agree");
    (pair, scene)
}

/// Seeded synthetic dataset; bit-identical for identical arguments.
pub fn synth_generate(
    seed: u64,
    n_pairs: usize,
    size: (usize, usize),
    strip_fraction: f64,
) -> Vec<ImagePair> {
    (0..n_pairs).map(|i| synth_pair(seed, i as u64, size, strip_fraction).0).collect()
}

// ------------------------------------------------- panoramic preprocessing

pub const PCD_SOURCE_W: usize = 1024;
pub const PCD_SOURCE_H: usize = 224;
pub const PCD_WINDOW: usize = 224;
pub const PCD_STRIDE: usize = 56;
/// floor((1024-224)/56)+1 sliding windows.
pub const PCD_WINDOWS: usize = (PCD_SOURCE_W - PCD_WINDOW) / PCD_STRIDE + 1;
pub const PCD_ROTATIONS: usize = 4;
pub const PCD_PATCHES: usize = PCD_WINDOWS * PCD_ROTATIONS;

fn crop_pair(pair: &ImagePair, x0: usize, y0: usize, w: usize, h: usize) -> ImagePair {
    ImagePair {
        t0: crop(&pair.t0, x0, y0, w, h),
        t1: crop(&pair.t1, x0, y0, w, h),
        mask: pair
            .mask
            .as_ref()
            .map(|m| image_to_mask(&crop(&mask_to_image(m), x0, y0, w, h))),
    }
}

/// Expand one 224x1024 panoramic pair into 60 patches: 15 sliding windows
/// (stride 56) times the 4 quarter-turn rotations, masks transformed
/// identically.
pub fn pcd_preprocess(pair: &ImagePair) -> Result<Vec<ImagePair>> {
    let (w, h) = pair.size();
    if w != PCD_SOURCE_W || h != PCD_SOURCE_H {
        return Err(Error::Dataset(format!(
            "panoramic pair must be {PCD_SOURCE_W}x{PCD_SOURCE_H}, got {w}x{h}"
        )));
    }
    let mut out = Vec::with_capacity(PCD_PATCHES);
    for wi in 0..PCD_WINDOWS {
        let window = crop_pair(pair, wi * PCD_STRIDE, 0, PCD_WINDOW, PCD_WINDOW);
        for turns in 0..PCD_ROTATIONS {
            out.push(window.rotated(turns));
        }
    }
    Ok(out)
}

// ------------------------------------------------- sequence dataset split

pub const VLCMUCD_TRAIN_SEQUENCES: [&str; 98] = [
    "001", "003", "004", "007", "009", "010", "011", "014", "016", "017", "019", "023",
    "024", "028", "029", "030", "032", "034", "040", "041", "044", "045", "046", "047",
    "048", "049", "051", "054", "055", "058", "060", "061", "062", "065", "067", "068",
    "070", "071", "072", "073", "074", "075", "076", "078", "079", "081", "083", "084",
    "085", "086", "087", "088", "090", "091", "093", "094", "097", "098", "099", "100",
    "101", "102", "103", "105", "108", "109", "110", "111", "112", "113", "114", "115",
    "116", "117", "118", "119", "120", "121", "122", "123", "124", "125", "127", "128",
    "130", "131", "132", "133", "136", "137", "140", "141", "142", "143", "146", "147",
    "151", "152",
];

pub const VLCMUCD_TEST_SEQUENCES: [&str; 54] = [
    "002", "005", "006", "008", "012", "013", "015", "018", "020", "021", "022", "025",
    "026", "027", "031", "033", "035", "036", "037", "038", "039", "042", "043", "050",
    "052", "053", "056", "057", "059", "063", "064", "066", "069", "077", "080", "082",
    "089", "092", "095", "096", "104", "106", "107", "126", "129", "134", "135", "138",
    "139", "144", "145", "148", "149", "150",
];

/// Paths of one stored pair.
#[derive(Clone, Debug)]
pub struct PairPaths {
    pub t0: PathBuf,
    pub t1: PathBuf,
    pub mask: Option<PathBuf>,
    pub sequence: Option<String>,
}

/// Deterministic train/test split of a sequence-structured dataset root by
/// the fixed sequence-id lists. Layout: `root/<seq>/<pair>_t0.png` with
/// matching `_t1.png` / `_mask.png`.
pub fn vlcmucd_split(root: &Path) -> Result<(Vec<PairPaths>, Vec<PairPaths>)> {
    let mut missing = Vec::new();
    let mut collect = |ids: &[&str]| -> Result<Vec<PairPaths>> {
        let mut out = Vec::new();
        for id in ids {
            let dir = root.join(id);
            if !dir.is_dir() {
                missing.push(id.to_string());
                continue;
            }
            let mut stems: Vec<String> = std::fs::read_dir(&dir)?
                .filter_map(|e| e.ok())
                .filter_map(|e| e.file_name().into_string().ok())
                .filter_map(|name| name.strip_suffix("_t0.png").map(str::to_string))
                .collect();
            stems.sort();
            for stem in stems {
                let t1 = dir.join(format!("{stem}_t1.png"));
                if !t1.is_file() {
                    return Err(Error::Dataset(format!("{} is missing", t1.display())));
                }
                let mask = dir.join(format!("{stem}_mask.png"));
                out.push(PairPaths {
                    t0: dir.join(format!("{stem}_t0.png")),
                    t1,
                    mask: mask.is_file().then_some(mask),
                    sequence: Some(id.to_string()),
                });
            }
        }
        Ok(out)
    };
    let train = collect(&VLCMUCD_TRAIN_SEQUENCES)?;
    let test = collect(&VLCMUCD_TEST_SEQUENCES)?;
    if !missing.is_empty() {
        return Err(Error::Dataset(format!(
            "missing sequences under {}: {}",
            root.display(),
            missing.join(", ")
        )));
    }
    Ok((train, test))
}

// ------------------------------------------------------ flat directory IO

/// Write pairs as `t0/NNNNN.png`, `t1/NNNNN.png`, `mask/NNNNN.png`.
pub fn write_dataset(dir: &Path, pairs: &[ImagePair]) -> Result<()> {
    for sub in ["t0", "t1", "mask"] {
        std::fs::create_dir_all(dir.join(sub))?;
    }
    for (i, pair) in pairs.iter().enumerate() {
        let name = format!("{i:05}.png");
        save_rgb(&dir.join("t0").join(&name), &pair.t0)?;
        save_rgb(&dir.join("t1").join(&name), &pair.t1)?;
        if let Some(mask) = &pair.mask {
            save_mask(&dir.join("mask").join(&name), mask)?;
        }
    }
    Ok(())
}

/// Enumerate a flat-layout dataset directory in name order.
pub fn read_dataset_items(dir: &Path) -> Result<Vec<PairPaths>> {
    let t0_dir = dir.join("t0");
    if !t0_dir.is_dir() {
        return Err(Error::Dataset(format!("{} is not a dataset directory (no t0/)", dir.display())));
    }
    let mut names: Vec<String> = std::fs::read_dir(&t0_dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| n.ends_with(".png"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Dataset(format!("{} holds no pairs", dir.display())));
    }
    names
        .into_iter()
        .map(|name| {
            let t1 = dir.join("t1").join(&name);
            if !t1.is_file() {
                return Err(Error::Dataset(format!("{} is missing", t1.display())));
            }
            let mask = dir.join("mask").join(&name);
            Ok(PairPaths {
                t0: t0_dir.join(&name),
                t1,
                mask: mask.is_file().then_some(mask),
                sequence: None,
            })
        })
        .collect()
}

pub fn load_pair(paths: &PairPaths) -> Result<ImagePair> {
    let t0 = load_rgb(&paths.t0)?;
    let t1 = load_rgb(&paths.t1)?;
    let mask = paths.mask.as_ref().map(|p| load_mask(p)).transpose()?;
    ImagePair::new(t0, t1, mask)
}

// ------------------------------------------------------------ pair sources

/// Random-access view of a dataset. Items are independent, so concurrent
/// `get` calls are safe.
pub trait PairSource: Send + Sync {
    fn len(&self) -> usize;
    fn get(&self, index: usize) -> Result<ImagePair>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub struct MemPairs(pub Vec<ImagePair>);

impl PairSource for MemPairs {
    fn len(&self) -> usize {
        self.0.len()
    }
    fn get(&self, index: usize) -> Result<ImagePair> {
        Ok(self.0[index].clone())
    }
}

/// Lazily loaded directory items with optional resize and rotation
/// augmentation (`turns` variants per stored pair).
pub struct DirPairs {
    items: Vec<PairPaths>,
    resize: Option<(usize, usize)>,
    turns: usize,
}

impl PairSource for DirPairs {
    fn len(&self) -> usize {
        self.items.len() * self.turns
    }
    fn get(&self, index: usize) -> Result<ImagePair> {
        let mut pair = load_pair(&self.items[index / self.turns])?;
        if let Some((h, w)) = self.resize {
            pair = pair.resized(w, h);
        }
        Ok(pair.rotated(index % self.turns))
    }
}

/// Panoramic pairs expanded through the 60-patch pipeline, with an optional
/// fold filter, resized to the target size. A one-slot cache keeps the most
/// recently expanded source pair.
pub struct PcdPairs {
    pairs: Vec<PairPaths>,
    /// (pair index, patch index) kept after fold filtering.
    index: Vec<(usize, usize)>,
    resize: (usize, usize),
    cache: Mutex<Option<(usize, Vec<ImagePair>)>>,
}

impl PcdPairs {
    pub fn new(
        pairs: Vec<PairPaths>,
        split: Split,
        fold: Option<usize>,
        fold_seed: u64,
        resize: (usize, usize),
    ) -> Self {
        let mut index = Vec::with_capacity(pairs.len() * PCD_PATCHES);
        for pi in 0..pairs.len() {
            for patch in 0..PCD_PATCHES {
                let keep = match fold {
                    None => true,
                    Some(f) => {
                        let global = (pi * PCD_PATCHES + patch) as u64 + fold_seed;
                        let in_test_fold = global % 5 == f as u64;
                        match split {
                            Split::Train => !in_test_fold,
                            Split::Test => in_test_fold,
                        }
                    }
                };
                if keep {
                    index.push((pi, patch));
                }
            }
        }
        PcdPairs { pairs, index, resize, cache: Mutex::new(None) }
    }
}

impl PairSource for PcdPairs {
    fn len(&self) -> usize {
        self.index.len()
    }
    fn get(&self, index: usize) -> Result<ImagePair> {
        let (pi, patch) = self.index[index];
        let mut cache = self.cache.lock().expect("cache lock");
        let hit = matches!(&*cache, Some((cached, _)) if *cached == pi);
        if !hit {
            let pair = load_pair(&self.pairs[pi])?;
            *cache = Some((pi, pcd_preprocess(&pair)?));
        }
        let patches = &cache.as_ref().expect("cache filled").1;
        let (w, h) = self.resize;
        Ok(patches[patch].resized(w, h))
    }
}

/// Resolve a dataset spec into a random-access source.
pub fn open_dataset(spec: &DatasetSpec) -> Result<Box<dyn PairSource>> {
    spec.validate()?;
    match spec.source {
        Source::Synthetic => match &spec.root {
            None => {
                let mut pairs = synth_generate(spec.seed, spec.n_pairs, spec.size, spec.strip_fraction);
                if let Some((h, w)) = spec.effective_resize() {
                    pairs = pairs.iter().map(|p| p.resized(w, h)).collect();
                }
                Ok(Box::new(MemPairs(pairs)))
            }
            Some(root) => Ok(Box::new(DirPairs {
                items: read_dataset_items(root)?,
                resize: spec.effective_resize().map(|(h, w)| (w, h)),
                turns: 1,
            })),
        },
        Source::PcdTsunami | Source::PcdGsv => {
            let root = spec
                .root
                .as_ref()
                .ok_or_else(|| Error::Config("panoramic sources need a root directory".into()))?;
            let (h, w) = spec.effective_resize().expect("panoramic default resize");
            Ok(Box::new(PcdPairs::new(
                read_dataset_items(root)?,
                spec.split,
                spec.fold,
                spec.fold_seed,
                (w, h),
            )))
        }
        Source::VlCmuCd => {
            let root = spec
                .root
                .as_ref()
                .ok_or_else(|| Error::Config("the sequence dataset needs a root directory".into()))?;
            let (train, test) = vlcmucd_split(root)?;
            let (items, turns) = match spec.split {
                Split::Train => (train, PCD_ROTATIONS),
                Split::Test => (test, 1),
            };
            let resize = spec.effective_resize().map(|(h, w)| (w, h));
            Ok(Box::new(DirPairs { items, resize, turns }))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_arithmetic() {
        assert_eq!(PCD_WINDOWS, 15);
        assert_eq!(PCD_PATCHES, 60);
        assert_eq!(PCD_PATCHES / PCD_WINDOWS, 4);
    }

    #[test]
    fn fixture_is_a_partition() {
        assert_eq!(VLCMUCD_TRAIN_SEQUENCES.len(), 98);
        assert_eq!(VLCMUCD_TEST_SEQUENCES.len(), 54);
        for id in VLCMUCD_TEST_SEQUENCES {
            assert!(!VLCMUCD_TRAIN_SEQUENCES.contains(&id), "{id} in both splits");
        }
        let mut all: Vec<&str> = VLCMUCD_TRAIN_SEQUENCES
            .iter()
            .chain(VLCMUCD_TEST_SEQUENCES.iter())
            .copied()
            .collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 152);
    }

    #[test]
    fn empty_change_lists_give_zero_mask() {
        let scene = SceneSpec {
            objects_t0: vec![Obj {
                kind: ObjKind::Rect,
                cx: 8.0,
                cy: 8.0,
                half_w: 3.0,
                half_h: 2.0,
                color: [200, 10, 10],
            }],
            objects_t1: vec![],
            changed_t0: vec![],
            changed_t1: vec![],
        };
        assert_eq!(scene_mask(&scene, (32, 32)).count_ones(), 0);
    }
}
