//! The full change-detection network: a siamese residual encoder feeding a
//! four-level temporal-attention stack with cross-level fusion, decoded back
//! to full-resolution change logits.

use serde::{Deserialize, Serialize};

use crate::attention::{head_dims, Scope};
use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var, WeightsRef};
use crate::rng::SeededRng;
use crate::shape::Shape;
use crate::store::ParamStore;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// Scope schedule of the dynamic-receptive module, levels 1..4.
pub const DRTAM_SCHEDULE: [usize; 4] = [7, 5, 3, 1];

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum AttentionMode {
    /// One square scope extent at every level.
    Fixed(usize),
    /// Dynamic receptive schedule 7/5/3/1 across levels.
    Drtam,
}

impl Default for AttentionMode {
    fn default() -> Self {
        AttentionMode::Drtam
    }
}

impl std::fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AttentionMode::Fixed(k) => write!(f, "fixed({k})"),
            AttentionMode::Drtam => write!(f, "drtam"),
        }
    }
}

impl std::str::FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        if t == "drtam" {
            return Ok(AttentionMode::Drtam);
        }
        let inner = t
            .strip_prefix("fixed(")
            .and_then(|r| r.strip_suffix(')'))
            .or_else(|| t.strip_prefix("fixed"));
        if let Some(k) = inner.and_then(|v| v.trim().parse::<usize>().ok()) {
            return Ok(AttentionMode::Fixed(k));
        }
        Err(Error::Config(format!(
            "attention_mode {s:?} not recognized; use \"drtam\" or \"fixed(k)\" with k in 1/3/5/7"
        )))
    }
}

impl Serialize for AttentionMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for AttentionMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        raw.parse().map_err(serde::de::Error::custom)
    }
}

/// Which temporal channel produces queries. The canonical orientation takes
/// queries from t0 and keys/values from t1; the alternative is kept
/// switchable for experimentation.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuerySource {
    #[default]
    T0,
    T1,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Base channel counts of the four encoder levels, before width_mult.
    #[serde(default = "default_encoder_widths")]
    pub encoder_widths: [usize; 4],
    #[serde(default = "default_width_mult")]
    pub width_mult: f64,
    #[serde(default)]
    pub attention_mode: AttentionMode,
    #[serde(default = "default_true")]
    pub chva: bool,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_input_size")]
    pub input_size: (usize, usize),
    #[serde(default = "default_classifier_channels")]
    pub classifier_channels: usize,
    #[serde(default)]
    pub query_from: QuerySource,
}

fn default_encoder_widths() -> [usize; 4] {
    [64, 128, 256, 512]
}
fn default_width_mult() -> f64 {
    1.0
}
fn default_true() -> bool {
    true
}
fn default_heads() -> usize {
    4
}
fn default_input_size() -> (usize, usize) {
    (256, 256)
}
fn default_classifier_channels() -> usize {
    1
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder_widths: default_encoder_widths(),
            width_mult: default_width_mult(),
            attention_mode: AttentionMode::default(),
            chva: true,
            heads: default_heads(),
            input_size: default_input_size(),
            classifier_channels: default_classifier_channels(),
            query_from: QuerySource::default(),
        }
    }
}

impl ModelConfig {
    /// Effective per-level channel counts after width scaling.
    pub fn widths(&self) -> [usize; 4] {
        let mut out = [0usize; 4];
        for (o, base) in out.iter_mut().zip(self.encoder_widths) {
            *o = ((base as f64 * self.width_mult).round() as usize).max(1);
        }
        out
    }

    /// Decoder stage widths: encoder widths reversed and halved.
    pub fn decoder_widths(&self) -> [usize; 4] {
        let w = self.widths();
        [(w[3] / 2).max(1), (w[2] / 2).max(1), (w[1] / 2).max(1), (w[0] / 2).max(1)]
    }

    /// Square scope extent of the attention layer at `level` (0-based).
    pub fn scope_at(&self, level: usize) -> usize {
        match self.attention_mode {
            AttentionMode::Fixed(k) => k,
            AttentionMode::Drtam => DRTAM_SCHEDULE[level],
        }
    }

    /// Whether strip attention runs at `level` (1x1 strips degenerate to the
    /// square map, so scope-1 levels skip it).
    pub fn chva_at(&self, level: usize) -> bool {
        self.chva && self.scope_at(level) > 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.width_mult <= 0.0 {
            return Err(Error::Config(format!("width_mult must be positive, got {}", self.width_mult)));
        }
        if let AttentionMode::Fixed(k) = self.attention_mode {
            if !matches!(k, 1 | 3 | 5 | 7) {
                return Err(Error::Config(format!("fixed scope extent must be 1, 3, 5 or 7, got {k}")));
            }
        }
        if self.heads == 0 {
            return Err(Error::Config("heads must be >= 1".into()));
        }
        for w in self.widths() {
            head_dims(w, self.heads).map_err(|_| {
                Error::Config(format!(
                    "level width {w} must split into {} heads of even dimension",
                    self.heads
                ))
            })?;
        }
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Config(format!(
                "input_size ({h},{w}) must be positive and divisible by 32"
            )));
        }
        if self.classifier_channels != 1 {
            return Err(Error::Config("classifier_channels must be 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Phase {
    Train,
    Eval,
}

/// Pending running-statistics update from one train-mode normalization.
pub struct StatUpdate<E: Elem> {
    pub prefix: String,
    pub mean: Vec<E>,
    pub var: Vec<E>,
}

/// One attention level's outputs, kept for inspection and heatmap export.
pub struct LevelAttention {
    pub fused: Var,
    pub square_weights: WeightsRef,
    pub scope_extent: usize,
}

pub struct ForwardDetail<E: Elem> {
    pub logits: Var,
    pub levels: Vec<LevelAttention>,
    pub stat_updates: Vec<StatUpdate<E>>,
}

pub struct Model {
    config: ModelConfig,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Model { config })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    // -------------------------------------------------------------- init

    /// Fresh parameter store: fan-in-scaled conv weights, identity
    /// normalization, small-normal positional tables.
    pub fn init_params<E: Elem>(&self, seed: u64) -> ParamStore<E> {
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(seed);
        let w = self.config.widths();

        let conv = |store: &mut ParamStore<E>, rng: &mut SeededRng, name: &str, co: usize, ci: usize, k: usize| {
            let std = (2.0 / (ci * k * k) as f64).sqrt();
            let mut t = Tensor::zeros(Shape::new(co, ci, k, k));
            rng.fill_normal(t.data_mut(), std);
            store.insert(name, t, true).expect("unique init names");
        };
        let bias = |store: &mut ParamStore<E>, name: &str, c: usize| {
            store.insert(name, Tensor::zeros(Shape::new(c, 1, 1, 1)), true).expect("unique init names");
        };
        let norm = |store: &mut ParamStore<E>, prefix: &str, c: usize| {
            let shape = Shape::new(c, 1, 1, 1);
            store.insert(&format!("{prefix}.gamma"), Tensor::full(shape, E::ONE), true).unwrap();
            store.insert(&format!("{prefix}.beta"), Tensor::zeros(shape), true).unwrap();
            store.insert(&format!("{prefix}.running_mean"), Tensor::zeros(shape), false).unwrap();
            store.insert(&format!("{prefix}.running_var"), Tensor::full(shape, E::ONE), false).unwrap();
        };
        let emb = |store: &mut ParamStore<E>, rng: &mut SeededRng, name: &str, heads: usize, span: usize, d_half: usize| {
            let mut t = Tensor::zeros(Shape::new(heads, span, d_half, 1));
            rng.fill_normal(t.data_mut(), 0.02);
            store.insert(name, t, true).unwrap();
        };

        // Encoder stem and residual layers, shared by both temporal channels.
        conv(&mut store, &mut rng, "enc.stem.conv.weight", w[0], 3, 7);
        norm(&mut store, "enc.stem.bn", w[0]);
        for l in 0..4 {
            let (cin, cout) = if l == 0 { (w[0], w[0]) } else { (w[l - 1], w[l]) };
            let stride = if l == 0 { 1 } else { 2 };
            for b in 0..2 {
                let p = format!("enc.layer{}.block{}", l + 1, b);
                let (bin, bs) = if b == 0 { (cin, stride) } else { (cout, 1) };
                conv(&mut store, &mut rng, &format!("{p}.conv1.weight"), cout, bin, 3);
                norm(&mut store, &format!("{p}.bn1"), cout);
                conv(&mut store, &mut rng, &format!("{p}.conv2.weight"), cout, cout, 3);
                norm(&mut store, &format!("{p}.bn2"), cout);
                if bin != cout || bs != 1 {
                    conv(&mut store, &mut rng, &format!("{p}.down.conv.weight"), cout, bin, 1);
                    norm(&mut store, &format!("{p}.down.bn"), cout);
                }
            }
        }

        // Attention levels: shared q/k/v projections; per-branch positional
        // tables; cross-level projection + fusion convs.
        for l in 0..4 {
            let c = w[l];
            let p = format!("attn.l{}", l + 1);
            let scope = self.config.scope_at(l);
            let d_half = head_dims(c, self.config.heads).expect("validated widths");
            conv(&mut store, &mut rng, &format!("{p}.wq.weight"), c, c, 1);
            conv(&mut store, &mut rng, &format!("{p}.wk.weight"), c, c, 1);
            conv(&mut store, &mut rng, &format!("{p}.wv.weight"), c, c, 1);
            emb(&mut store, &mut rng, &format!("{p}.sq.row_emb"), self.config.heads, scope, d_half);
            emb(&mut store, &mut rng, &format!("{p}.sq.col_emb"), self.config.heads, scope, d_half);
            if self.config.chva_at(l) {
                emb(&mut store, &mut rng, &format!("{p}.h.row_emb"), self.config.heads, 1, d_half);
                emb(&mut store, &mut rng, &format!("{p}.h.col_emb"), self.config.heads, scope, d_half);
                emb(&mut store, &mut rng, &format!("{p}.v.row_emb"), self.config.heads, scope, d_half);
                emb(&mut store, &mut rng, &format!("{p}.v.col_emb"), self.config.heads, 1, d_half);
            }
            if l > 0 {
                conv(&mut store, &mut rng, &format!("{p}.proj.weight"), c, w[l - 1], 1);
                bias(&mut store, &format!("{p}.proj.bias"), c);
                conv(&mut store, &mut rng, &format!("{p}.fuse.weight"), c, 2 * c, 1);
                bias(&mut store, &format!("{p}.fuse.bias"), c);
            }
        }

        // Decoder stages and classifier.
        let dw = self.config.decoder_widths();
        let stage_in = [w[3] + w[2], dw[0] + w[1], dw[1] + w[0], dw[2]];
        for (stage, (cin, cout)) in stage_in.iter().zip(dw).enumerate() {
            let p = format!("dec.stage{}", stage + 1);
            conv(&mut store, &mut rng, &format!("{p}.conv.weight"), cout, *cin, 3);
            norm(&mut store, &format!("{p}.bn"), cout);
        }
        conv(&mut store, &mut rng, "dec.classifier.weight", self.config.classifier_channels, dw[3], 1);
        bias(&mut store, "dec.classifier.bias", self.config.classifier_channels);

        store
    }

    // ----------------------------------------------------------- building

    fn bn<E: Elem>(
        &self,
        g: &mut Graph<E>,
        store: &ParamStore<E>,
        x: Var,
        prefix: &str,
        phase: Phase,
        updates: &mut Vec<StatUpdate<E>>,
    ) -> Result<Var> {
        let gamma = g.param(store, &format!("{prefix}.gamma"))?;
        let beta = g.param(store, &format!("{prefix}.beta"))?;
        let eps = E::from_f64(BN_EPS);
        match phase {
            Phase::Train => {
                let (y, stats) = g.batch_norm_train(x, gamma, beta, eps)?;
                updates.push(StatUpdate { prefix: prefix.to_string(), mean: stats.mean, var: stats.var });
                Ok(y)
            }
            Phase::Eval => {
                let rm = store.get(&format!("{prefix}.running_mean"))?;
                let rv = store.get(&format!("{prefix}.running_var"))?;
                g.batch_norm_eval(x, gamma, beta, &rm.data, &rv.data, eps)
            }
        }
    }

    fn conv<E: Elem>(
        &self,
        g: &mut Graph<E>,
        store: &ParamStore<E>,
        x: Var,
        name: &str,
        with_bias: bool,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let w = g.param(store, &format!("{name}.weight"))?;
        let b = if with_bias { Some(g.param(store, &format!("{name}.bias"))?) } else { None };
        g.conv2d(x, w, b, stride, padding)
    }

    /// Residual feature pyramid at strides 4/8/16/32. Both temporal channels
    /// run through the same parameters.
    pub fn encoder_forward<E: Elem>(
        &self,
        g: &mut Graph<E>,
        store: &ParamStore<E>,
        x: Var,
        phase: Phase,
        updates: &mut Vec<StatUpdate<E>>,
    ) -> Result<[Var; 4]> {
        let s = g.shape(x);
        if s.c != 3 {
            return Err(Error::shape("encoder", format!("input {} must have 3 channels", s)));
        }
        if s.h % 32 != 0 || s.w % 32 != 0 || s.h == 0 || s.w == 0 {
            return Err(Error::shape(
                "encoder",
                format!("input {} must have height and width divisible by 32", s),
            ));
        }

        let mut y = self.conv(g, store, x, "enc.stem.conv", false, 2, 3)?;
        y = self.bn(g, store, y, "enc.stem.bn", phase, updates)?;
        y = g.relu(y);
        y = g.avgpool2x(y)?;

        let w = self.config.widths();
        let mut feats = [y; 4];
        for l in 0..4 {
            let stride = if l == 0 { 1 } else { 2 };
            for b in 0..2 {
                let p = format!("enc.layer{}.block{}", l + 1, b);
                let bs = if b == 0 { stride } else { 1 };
                let cin = g.shape(y).c;
                let mut main = self.conv(g, store, y, &format!("{p}.conv1"), false, bs, 1)?;
                main = self.bn(g, store, main, &format!("{p}.bn1"), phase, updates)?;
                main = g.relu(main);
                main = self.conv(g, store, main, &format!("{p}.conv2"), false, 1, 1)?;
                main = self.bn(g, store, main, &format!("{p}.bn2"), phase, updates)?;
                let skip = if cin != w[l] || bs != 1 {
                    let d = self.conv(g, store, y, &format!("{p}.down.conv"), false, bs, 0)?;
                    self.bn(g, store, d, &format!("{p}.down.bn"), phase, updates)?
                } else {
                    y
                };
                let sum = g.add(main, skip)?;
                y = g.relu(sum);
            }
            feats[l] = y;
        }
        Ok(feats)
    }

    /// Four fused attention maps, one per feature level. Level l > 1
    /// downsamples the previous fused map, projects it to the level width,
    /// concatenates and fuses with a 1x1 conv.
    pub fn attention_stack_forward<E: Elem>(
        &self,
        g: &mut Graph<E>,
        store: &ParamStore<E>,
        feats_t0: &[Var; 4],
        feats_t1: &[Var; 4],
    ) -> Result<Vec<LevelAttention>> {
        for l in 0..4 {
            let (a, b) = (g.shape(feats_t0[l]), g.shape(feats_t1[l]));
            if a != b {
                return Err(Error::shape(
                    "attention_stack",
                    format!("level {} features disagree: {} vs {}", l + 1, a, b),
                ));
            }
        }
        let heads = self.config.heads;
        let mut levels = Vec::with_capacity(4);
        let mut prev: Option<Var> = None;
        for l in 0..4 {
            let p = format!("attn.l{}", l + 1);
            let scope_extent = self.config.scope_at(l);
            let (xq, xkv) = match self.config.query_from {
                QuerySource::T0 => (feats_t0[l], feats_t1[l]),
                QuerySource::T1 => (feats_t1[l], feats_t0[l]),
            };
            let wq = g.param(store, &format!("{p}.wq.weight"))?;
            let wk = g.param(store, &format!("{p}.wk.weight"))?;
            let wv = g.param(store, &format!("{p}.wv.weight"))?;
            let q = g.conv2d(xq, wq, None, 1, 0)?;
            let k = g.conv2d(xkv, wk, None, 1, 0)?;
            let v = g.conv2d(xkv, wv, None, 1, 0)?;

            let sq_re = g.param(store, &format!("{p}.sq.row_emb"))?;
            let sq_ce = g.param(store, &format!("{p}.sq.col_emb"))?;
            let (sq_map, square_weights) =
                g.attention_core(q, k, v, sq_re, sq_ce, Scope::square(scope_extent)?, heads)?;

            let mut map = sq_map;
            if self.config.chva_at(l) {
                let k_half = (scope_extent - 1) / 2;
                let h_re = g.param(store, &format!("{p}.h.row_emb"))?;
                let h_ce = g.param(store, &format!("{p}.h.col_emb"))?;
                let (hm, _) = g.attention_core(q, k, v, h_re, h_ce, Scope::hstrip(k_half), heads)?;
                let v_re = g.param(store, &format!("{p}.v.row_emb"))?;
                let v_ce = g.param(store, &format!("{p}.v.col_emb"))?;
                let (vm, _) = g.attention_core(q, k, v, v_re, v_ce, Scope::vstrip(k_half), heads)?;
                let strips = g.add(hm, vm)?;
                map = g.add(map, strips)?;
            }

            if let Some(prev_map) = prev {
                let ds = g.avgpool2x(prev_map)?;
                let proj = self.conv(g, store, ds, &format!("{p}.proj"), true, 1, 0)?;
                let cat = g.concat_channels(&[map, proj])?;
                map = self.conv(g, store, cat, &format!("{p}.fuse"), true, 1, 0)?;
            }
            prev = Some(map);
            levels.push(LevelAttention { fused: map, square_weights, scope_extent });
        }
        Ok(levels)
    }

    /// Upsampling decoder over the fused maps (strides 4/8/16/32 in, input
    /// resolution out). Three 2x stages concatenate the matching-resolution
    /// map, a conv-only stage follows, and a final 4x bilinear recovery feeds
    /// the 1x1 classifier.
    pub fn decoder_forward<E: Elem>(
        &self,
        g: &mut Graph<E>,
        store: &ParamStore<E>,
        maps: &[Var; 4],
        phase: Phase,
        updates: &mut Vec<StatUpdate<E>>,
    ) -> Result<Var> {
        for l in 0..3 {
            let (a, b) = (g.shape(maps[l]), g.shape(maps[l + 1]));
            if a.h != b.h * 2 || a.w != b.w * 2 {
                return Err(Error::shape(
                    "decoder",
                    format!("maps at levels {}/{} are not a 2x pyramid: {} vs {}", l + 1, l + 2, a, b),
                ));
            }
        }
        let mut d = maps[3];
        for stage in 0..4 {
            let p = format!("dec.stage{}", stage + 1);
            if stage < 3 {
                d = g.bilinear_upsample2x(d)?;
                let skip = maps[2 - stage];
                if g.shape(skip).h != g.shape(d).h || g.shape(skip).w != g.shape(d).w {
                    return Err(Error::shape(
                        "decoder",
                        format!("skip map {} vs upsampled {}", g.shape(skip), g.shape(d)),
                    ));
                }
                d = g.concat_channels(&[d, skip])?;
            }
            d = self.conv(g, store, d, &format!("{p}.conv"), false, 1, 1)?;
            d = self.bn(g, store, d, &format!("{p}.bn"), phase, updates)?;
            d = g.relu(d);
        }
        d = g.bilinear_upsample(d, 4)?;
        self.conv(g, store, d, "dec.classifier", true, 1, 0)
    }

    pub fn forward_detail<E: Elem>(
        &self,
        g: &mut Graph<E>,
        store: &ParamStore<E>,
        img_t0: &Tensor<E>,
        img_t1: &Tensor<E>,
        phase: Phase,
    ) -> Result<ForwardDetail<E>> {
        if img_t0.shape() != img_t1.shape() {
            return Err(Error::shape(
                "model",
                format!("temporal inputs disagree: {} vs {}", img_t0.shape(), img_t1.shape()),
            ));
        }
        let x0 = g.constant(img_t0);
        let x1 = g.constant(img_t1);
        let mut updates = Vec::new();
        let f0 = self.encoder_forward(g, store, x0, phase, &mut updates)?;
        let f1 = self.encoder_forward(g, store, x1, phase, &mut updates)?;
        let levels = self.attention_stack_forward(g, store, &f0, &f1)?;
        let maps = [levels[0].fused, levels[1].fused, levels[2].fused, levels[3].fused];
        let logits = self.decoder_forward(g, store, &maps, phase, &mut updates)?;
        Ok(ForwardDetail { logits, levels, stat_updates: updates })
    }

    /// Training forward: batch statistics are used and running statistics
    /// updated in the store.
    pub fn forward_train<E: Elem>(
        &self,
        g: &mut Graph<E>,
        store: &mut ParamStore<E>,
        img_t0: &Tensor<E>,
        img_t1: &Tensor<E>,
    ) -> Result<Var> {
        let detail = self.forward_detail(g, store, img_t0, img_t1, Phase::Train)?;
        apply_stat_updates(store, &detail.stat_updates)?;
        Ok(detail.logits)
    }

    /// Inference forward with frozen statistics; safe for concurrent use of a
    /// shared frozen store.
    pub fn forward_eval<E: Elem>(
        &self,
        g: &mut Graph<E>,
        store: &ParamStore<E>,
        img_t0: &Tensor<E>,
        img_t1: &Tensor<E>,
    ) -> Result<Var> {
        Ok(self.forward_detail(g, store, img_t0, img_t1, Phase::Eval)?.logits)
    }
}

/// Fold pending batch statistics into the store's running estimates.
pub fn apply_stat_updates<E: Elem>(
    store: &mut ParamStore<E>,
    updates: &[StatUpdate<E>],
) -> Result<()> {
    let m = E::from_f64(BN_MOMENTUM);
    let keep = E::ONE - m;
    for u in updates {
        for (suffix, fresh) in [("running_mean", &u.mean), ("running_var", &u.var)] {
            let p = store.get_mut(&format!("{}.{}", u.prefix, suffix))?;
            for (r, v) in p.data.iter_mut().zip(fresh) {
                *r = keep * *r + m * *v;
            }
        }
    }
    Ok(())
}

/// Images in [0,1] stacked as an (N,3,H,W) tensor.
pub fn images_to_tensor<E: Elem>(images: &[&crate::image::Image]) -> Result<Tensor<E>> {
    let first = images.first().ok_or_else(|| Error::Config("empty batch".into()))?;
    let (h, w) = (first.h, first.w);
    let mut t = Tensor::zeros(Shape::new(images.len(), 3, h, w));
    let scale = E::from_f64(1.0 / 255.0);
    for (n, img) in images.iter().enumerate() {
        if img.c != 3 || img.h != h || img.w != w {
            return Err(Error::shape("images_to_tensor", "batch images must be RGB with equal sizes".to_string()));
        }
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    t.set(n, c, y, x, E::from_usize(img.data[(y * w + x) * 3 + c] as usize) * scale);
                }
            }
        }
    }
    Ok(t)
}

/// Binary masks as an (N,1,H,W) tensor of exact zeros and ones.
pub fn masks_to_tensor<E: Elem>(masks: &[&crate::image::Mask]) -> Result<Tensor<E>> {
    let first = masks.first().ok_or_else(|| Error::Config("empty batch".into()))?;
    let (h, w) = (first.h, first.w);
    let mut t = Tensor::zeros(Shape::new(masks.len(), 1, h, w));
    for (n, m) in masks.iter().enumerate() {
        if m.h != h || m.w != w {
            return Err(Error::shape("masks_to_tensor", "batch masks must have equal sizes".to_string()));
        }
        for y in 0..h {
            for x in 0..w {
                t.set(n, 0, y, x, if m.data[y * w + x] != 0 { E::ONE } else { E::ZERO });
            }
        }
    }
    Ok(t)
}
