//! Analytic multiply-accumulate and parameter accounting.
//!
//! Convention: one MAC per multiply-accumulate in convolutions (kh*kw*Cin*
//! Cout*Hout*Wout) and in attention (3*Cin*Cout*H*W for the projections of
//! each branch call, plus H*W*heads*positions*d_head for logits and the same
//! for aggregation). Normalization, activations, softmax, pooling and
//! interpolation are excluded as non-dominant. Parameter counts cover
//! trainable tensors; positional-embedding tables are also broken out
//! separately.

use crate::error::Result;
use crate::network::{AttentionMode, ModelConfig};

/// Published reference totals for the paper-scale configuration, used for
/// side-by-side reporting (never asserted).
pub const REFERENCE_PARAMS_M: f64 = 33.390;

pub fn reference_macs_g(mode: AttentionMode, chva: bool) -> Option<f64> {
    match (mode, chva) {
        (AttentionMode::Fixed(1), false) => Some(6.685),
        (AttentionMode::Fixed(3), false) => Some(6.719),
        (AttentionMode::Fixed(3), true) => Some(7.082),
        (AttentionMode::Fixed(5), false) => Some(6.759),
        (AttentionMode::Fixed(5), true) => Some(7.185),
        (AttentionMode::Fixed(7), false) => Some(6.804),
        (AttentionMode::Fixed(7), true) => Some(7.293),
        (AttentionMode::Drtam, false) => Some(6.709),
        (AttentionMode::Drtam, true) => Some(7.055),
        _ => None,
    }
}

#[derive(Clone, Debug)]
pub struct ModuleStats {
    pub name: String,
    pub macs: u64,
    pub params: u64,
    pub embedding_params: u64,
}

#[derive(Clone, Debug)]
pub struct ModelStats {
    pub mac_count: u64,
    pub param_count: u64,
    pub embedding_param_count: u64,
    pub per_module: Vec<ModuleStats>,
}

impl ModelStats {
    pub fn non_embedding_params(&self) -> u64 {
        self.param_count - self.embedding_param_count
    }

    pub fn macs_g(&self) -> f64 {
        self.mac_count as f64 / 1e9
    }

    pub fn params_m(&self) -> f64 {
        self.param_count as f64 / 1e6
    }

    pub fn module(&self, name: &str) -> Option<&ModuleStats> {
        self.per_module.iter().find(|m| m.name == name)
    }
}

struct Acc {
    macs: u64,
    params: u64,
    embedding: u64,
}

impl Acc {
    fn new() -> Self {
        Acc { macs: 0, params: 0, embedding: 0 }
    }

    fn conv(&mut self, cin: usize, cout: usize, k: usize, hout: usize, wout: usize, bias: bool) {
        self.macs += (k * k * cin * cout * hout * wout) as u64;
        self.params += (cout * cin * k * k + if bias { cout } else { 0 }) as u64;
    }

    fn norm(&mut self, c: usize) {
        self.params += 2 * c as u64;
    }

    fn embedding(&mut self, values: usize) {
        self.params += values as u64;
        self.embedding += values as u64;
    }

    /// One attention branch call at spatial (h, w): q/k/v projections plus
    /// logit and aggregation arithmetic over `positions` neighbors.
    fn attention_branch(&mut self, c: usize, h: usize, w: usize, heads: usize, positions: usize) {
        let d_head = c / heads;
        self.macs += (3 * c * c * h * w) as u64;
        self.macs += 2 * (h * w * heads * positions * d_head) as u64;
    }
}

/// Full analytic accounting for one configuration at its input size.
pub fn model_stats(cfg: &ModelConfig) -> Result<ModelStats> {
    cfg.validate()?;
    let w = cfg.widths();
    let (in_h, in_w) = cfg.input_size;
    let mut modules: Vec<ModuleStats> = Vec::new();
    let mut push = |name: &str, acc: Acc| {
        modules.push(ModuleStats {
            name: name.to_string(),
            macs: acc.macs,
            params: acc.params,
            embedding_params: acc.embedding,
        });
    };

    // Encoder (shared by both temporal channels; MACs count both passes).
    let mut enc = Acc::new();
    enc.conv(3, w[0], 7, in_h / 2, in_w / 2, false);
    enc.norm(w[0]);
    for l in 0..4 {
        let (cin, cout) = if l == 0 { (w[0], w[0]) } else { (w[l - 1], w[l]) };
        let (h, wdt) = (in_h / (4 << l), in_w / (4 << l));
        for b in 0..2 {
            let bin = if b == 0 { cin } else { cout };
            enc.conv(bin, cout, 3, h, wdt, false);
            enc.norm(cout);
            enc.conv(cout, cout, 3, h, wdt, false);
            enc.norm(cout);
            if b == 0 && (bin != cout || l > 0) {
                enc.conv(bin, cout, 1, h, wdt, false);
                enc.norm(cout);
            }
        }
    }
    enc.macs *= 2;
    push("encoder", enc);

    // Attention levels.
    for l in 0..4 {
        let mut acc = Acc::new();
        let c = w[l];
        let (h, wdt) = (in_h / (4 << l), in_w / (4 << l));
        let scope = cfg.scope_at(l);
        let d_half = c / cfg.heads / 2;
        acc.attention_branch(c, h, wdt, cfg.heads, scope * scope);
        acc.params += (3 * c * c) as u64;
        acc.embedding(cfg.heads * scope * d_half * 2);
        if cfg.chva_at(l) {
            acc.attention_branch(c, h, wdt, cfg.heads, scope);
            acc.attention_branch(c, h, wdt, cfg.heads, scope);
            // Strip branches share the q/k/v projections; only their
            // positional tables add parameters.
            acc.embedding(2 * cfg.heads * (1 + scope) * d_half);
        }
        if l > 0 {
            acc.conv(w[l - 1], c, 1, h, wdt, true);
            acc.conv(2 * c, c, 1, h, wdt, true);
        }
        push(&format!("attention.l{}", l + 1), acc);
    }

    // Decoder.
    let mut dec = Acc::new();
    let dw = cfg.decoder_widths();
    let stage_in = [w[3] + w[2], dw[0] + w[1], dw[1] + w[0], dw[2]];
    let stage_hw = [in_h / 16, in_h / 8, in_h / 4, in_h / 4];
    let stage_ww = [in_w / 16, in_w / 8, in_w / 4, in_w / 4];
    for s in 0..4 {
        dec.conv(stage_in[s], dw[s], 3, stage_hw[s], stage_ww[s], false);
        dec.norm(dw[s]);
    }
    dec.conv(dw[3], cfg.classifier_channels, 1, in_h, in_w, true);
    push("decoder", dec);

    let mut total = ModelStats {
        mac_count: 0,
        param_count: 0,
        embedding_param_count: 0,
        per_module: modules,
    };
    for m in &total.per_module {
        total.mac_count += m.macs;
        total.param_count += m.params;
        total.embedding_param_count += m.embedding_params;
    }
    Ok(total)
}

/// Parameter accounting (alias of the full walk).
pub fn count_params(cfg: &ModelConfig) -> Result<ModelStats> {
    model_stats(cfg)
}

/// MAC accounting (alias of the full walk).
pub fn count_macs(cfg: &ModelConfig) -> Result<ModelStats> {
    model_stats(cfg)
}
