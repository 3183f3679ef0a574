//! Closed-form FLOP, activation-memory and parameter counts.
//!
//! Conventions (shared with [`crate::instrument`]): an `m x k` by `k x n`
//! matmul costs `2mkn`; a softmax row of `n` costs `5n`; other elementwise
//! ops cost one per output element; concat, slice, transpose and broadcast
//! are free; row L2 normalization costs `3mn`. Memory counts words
//! retained for backward: every non-frozen matmul operand and softmax input,
//! once per tensor.
//!
//! Within one bidirectional layer with `l` prompt rows, PA splits its output
//! into an A block (prompt rows) and a B block (feature rows). Per-term
//! reports attribute every operation to the block whose rows it produces;
//! key/value projections serve both blocks and are reported separately.

use crate::attention::LambdaKind;
use crate::model::{Mechanism, ToyVlodConfig};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopReport {
    pub mechanism: Mechanism,
    #[serde(rename = "Lt")]
    pub lt: usize,
    #[serde(rename = "Lv")]
    pub lv: usize,
    pub l: usize,
    pub d: usize,
    pub total: u64,
    pub per_term: BTreeMap<String, u64>,
}

/// Queries `lq`, keys `lk`, width `d`, `h` heads: scores, scaling, softmax
/// and the value mix.
fn attend(lq: u64, lk: u64, d: u64, h: u64) -> u64 {
    4 * lq * lk * d + 6 * h * lq * lk
}

fn lambda_prep(kind: LambdaKind, d: u64) -> u64 {
    match kind {
        LambdaKind::Gate => d,
        _ => 0,
    }
}

/// Attention shape of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub lt: usize,
    pub lv: usize,
    pub l: usize,
    pub d: usize,
    pub heads: usize,
}

impl LayerShape {
    pub fn new(lt: usize, lv: usize, l: usize, d: usize) -> Self {
        Self {
            lt,
            lv,
            l,
            d,
            heads: 1,
        }
    }

    fn u(&self) -> (u64, u64, u64, u64, u64) {
        (
            self.lt as u64,
            self.lv as u64,
            self.l as u64,
            self.d as u64,
            self.heads as u64,
        )
    }
}

/// One bidirectional prompted X-Attn layer (no feed-forward).
pub fn count_flops_pa(s: LayerShape) -> FlopReport {
    let (lt, lv, l, d, h) = s.u();
    let mut t = BTreeMap::new();
    t.insert(
        "kv_projection".into(),
        4 * (l + lv) * d * d + 4 * (l + lt) * d * d,
    );
    t.insert("a_query".into(), 4 * l * d * d + 2 * l * d);
    t.insert(
        "a_feature_keys".into(),
        attend(l, lv, d, h) + attend(l, lt, d, h),
    );
    t.insert("a_prompt_keys".into(), 2 * attend(l, l, d, h));
    t.insert("b_query".into(), 2 * (lt + lv) * d * d + (lt + lv) * d);
    t.insert(
        "b_feature_keys".into(),
        attend(lt, lv, d, h) + attend(lv, lt, d, h),
    );
    t.insert(
        "b_prompt_keys".into(),
        attend(lt, l, d, h) + attend(lv, l, d, h),
    );
    report(Mechanism::Pa, s, t)
}

/// One bidirectional DPA layer with dimension-level scales.
pub fn count_flops_dpa(s: LayerShape) -> FlopReport {
    count_flops_dpa_kind(s, LambdaKind::DimLevel)
}

pub fn count_flops_dpa_kind(s: LayerShape, kind: LambdaKind) -> FlopReport {
    let (lt, lv, l, d, h) = s.u();
    let on = u64::from(l > 0);
    let mut t = BTreeMap::new();
    t.insert(
        "kv_projection".into(),
        4 * (lv + lt) * d * d + on * 8 * l * d * d,
    );
    t.insert(
        "b_query".into(),
        2 * (lt + lv) * d * d + (lt + lv) * d + on * (2 * (lt + lv) * d + 2 * lambda_prep(kind, d)),
    );
    t.insert(
        "b_feature_keys".into(),
        attend(lt, lv, d, h) + attend(lv, lt, d, h),
    );
    t.insert(
        "b_prompt_keys".into(),
        on * (attend(lt, l, d, h) + attend(lv, l, d, h)),
    );
    report(Mechanism::Dpa, s, t)
}

/// Plain X-Attn layer.
pub fn count_flops_xattn(lt: usize, lv: usize, d: usize, heads: usize) -> u64 {
    let s = LayerShape {
        lt,
        lv,
        l: 0,
        d,
        heads,
    };
    count_flops_pa(s).total
}

fn report(mechanism: Mechanism, s: LayerShape, per_term: BTreeMap<String, u64>) -> FlopReport {
    FlopReport {
        mechanism,
        lt: s.lt,
        lv: s.lv,
        l: s.l,
        d: s.d,
        total: per_term.values().sum(),
        per_term,
    }
}

/// Retained words of one bidirectional attention layer.
pub fn layer_memory(mechanism: Mechanism, s: LayerShape) -> u64 {
    let (lt, lv, l, d, h) = s.u();
    match mechanism {
        Mechanism::None => layer_memory(Mechanism::Pa, LayerShape { l: 0, ..s }),
        Mechanism::Pa => 4 * (l + lt) * d + 4 * (l + lv) * d + 4 * h * (l + lt) * (l + lv),
        Mechanism::Dpa => {
            let on = u64::from(l > 0);
            4 * lt * d + 4 * lv * d + 4 * h * lt * lv + on * (6 * l * d + 2 * h * l * (lt + lv))
        }
    }
}

/// Cost-relevant shape of a fusion stack, mirroring a model config.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub lt: usize,
    pub lv: usize,
    pub l: usize,
    pub d: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub n_layers: usize,
    pub mechanism: Mechanism,
    pub lambda_kind: LambdaKind,
}

impl CostModel {
    /// `lt` is the number of class tokens queried.
    pub fn from_config(c: &ToyVlodConfig, lt: usize) -> Self {
        let mechanism = c.mechanism_at(crate::model::Position::Fusion);
        Self {
            lt,
            lv: c.n_tokens(),
            l: c.prompt_len,
            d: c.d,
            heads: c.heads,
            ffn_hidden: c.ffn_hidden,
            n_layers: c.n_fusion_layers,
            mechanism,
            lambda_kind: c.lambda_kind,
        }
    }

    pub fn with_mechanism(mut self, m: Mechanism) -> Self {
        self.mechanism = m;
        self
    }

    fn l(&self) -> usize {
        if self.mechanism == Mechanism::None {
            0
        } else {
            self.l
        }
    }

    fn shape(&self) -> LayerShape {
        LayerShape {
            lt: self.lt,
            lv: self.lv,
            l: self.l(),
            d: self.d,
            heads: self.heads,
        }
    }

    /// Normalized feed-forward sublayer over `rows` rows, residual included.
    fn ffn_flops(&self, rows: usize) -> u64 {
        let (r, d, h) = (rows as u64, self.d as u64, self.ffn_hidden as u64);
        4 * r * d * h + 2 * r * h + 6 * r * d
    }

    fn ffn_memory(&self, rows: usize) -> u64 {
        rows as u64 * (self.d + self.ffn_hidden) as u64
    }

    /// Rows per stream while the stack runs.
    fn rows(&self) -> (usize, usize) {
        match self.mechanism {
            Mechanism::Pa => (self.lt + self.l, self.lv + self.l),
            _ => (self.lt, self.lv),
        }
    }

    /// Forward FLOPs of the whole fusion stack.
    pub fn stack_flops(&self) -> u64 {
        let s = self.shape();
        let attn = match self.mechanism {
            Mechanism::None => count_flops_xattn(self.lt, self.lv, self.d, self.heads),
            Mechanism::Pa => count_flops_pa(s).total,
            Mechanism::Dpa => count_flops_dpa_kind(s, self.lambda_kind).total,
        };
        let (rt, rv) = self.rows();
        let per_layer = attn + self.ffn_flops(rt) + self.ffn_flops(rv);
        let carry = if self.mechanism == Mechanism::Pa && self.l() > 0 {
            2 * (self.l * self.d) as u64 * (self.n_layers.saturating_sub(1)) as u64
        } else {
            0
        };
        per_layer * self.n_layers as u64 + carry
    }

    /// Activation words stored for backward through the fusion stack.
    pub fn activation_memory(&self) -> u64 {
        let (rt, rv) = self.rows();
        let per_layer =
            layer_memory(self.mechanism, self.shape()) + self.ffn_memory(rt) + self.ffn_memory(rv);
        per_layer * self.n_layers as u64
    }
}

pub fn activation_memory(c: &ToyVlodConfig, lt: usize) -> u64 {
    CostModel::from_config(c, lt).activation_memory()
}

/// Trainable scalars by component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParamCounts {
    pub prompts: usize,
    pub lambdas: usize,
    pub ccpki: usize,
    pub base: usize,
}

impl ParamCounts {
    pub fn total(&self) -> usize {
        self.prompts + self.lambdas + self.ccpki + self.base
    }
}

/// Parameters of the frozen base for a vocabulary of `vocab` names.
pub fn base_param_count(c: &ToyVlodConfig, vocab: usize) -> usize {
    let (d, h) = (c.d, c.ffn_hidden);
    let ffn = 2 * d * h + h + d;
    let enc = 3 * d * d + ffn;
    c.patch_dim() * d
        + d
        + c.n_tokens() * d
        + c.n_vis_layers * enc
        + vocab * d
        + c.n_text_layers * enc
        + c.n_fusion_layers * (6 * d * d + 2 * ffn)
        + 4 * d
        + 4
        + 1
}

/// Trainable prompt-side parameters under `c.mechanism`; `ipg` adds one
/// CCPKI block per prompt side in use.
pub fn params_count(c: &ToyVlodConfig, ipg: bool) -> ParamCounts {
    if c.mechanism == Mechanism::None {
        return ParamCounts::default();
    }
    let (l, d) = (c.prompt_len, c.d);
    let fusion = if c.inject_fusion {
        c.n_fusion_layers
    } else {
        0
    };
    let vis = if c.inject_visual { c.n_vis_layers } else { 0 };
    let text = if c.inject_text { c.n_text_layers } else { 0 };
    let prompts = (2 * fusion + vis + text) * l * d;
    let lambdas = if c.mechanism == Mechanism::Dpa {
        (2 * fusion + vis + text) * c.lambda_kind.trainable_count(d)
    } else {
        0
    };
    let sides = usize::from(fusion + vis > 0) + usize::from(fusion + text > 0);
    let ccpki = if ipg { sides * (2 * d * d + l + d) } else { 0 };
    ParamCounts {
        prompts,
        lambdas,
        ccpki,
        base: 0,
    }
}
