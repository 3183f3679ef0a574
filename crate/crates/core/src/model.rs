//! Miniature vision-language detector.
//!
//! Images are cut into patches, embedded with learned positions and passed
//! through self-attention encoder layers. Each class name is one text token
//! from a fixed vocabulary, encoded the same way without positions. A stack
//! of fusion layers exchanges information between the two streams with
//! bidirectional cross-attention (optionally prompted), and two heads read
//! boxes and class logits off the fused visual tokens.
//!
//! Every block is `x + sublayer(x)`. Feed-forward sublayers and both heads
//! see RMS-normalized rows (`sqrt(d) * x / |x|`, no gain); attention
//! sublayers see raw rows so the fusion stack is literally a sequence of
//! X-Attn, PA or DPA steps.

use crate::attention::{
    tape, AttnParams, AttnVars, DpaParams, DpaVars, LambdaKind, XAttnParams, XAttnVars,
};
use crate::autograd::{Graph, Var};
use crate::boxes::{nms, BBox, Detection};
use crate::error::{LabError, Result};
use crate::rng::SplitMix64;
use crate::synth::{self, Annotation};
use crate::tensor::{self, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    None,
    Pa,
    #[default]
    Dpa,
}

impl std::str::FromStr for Mechanism {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Mechanism::None),
            "pa" => Ok(Mechanism::Pa),
            "dpa" => Ok(Mechanism::Dpa),
            _ => Err(LabError::Config(format!("unknown mechanism {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Position {
    Visual,
    Text,
    Fusion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyVlodConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub d: usize,
    pub n_vis_layers: usize,
    pub n_text_layers: usize,
    pub n_fusion_layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub prompt_len: usize,
    pub mechanism: Mechanism,
    pub inject_visual: bool,
    pub inject_text: bool,
    pub inject_fusion: bool,
    pub lambda_kind: LambdaKind,
    pub score_threshold: f64,
    pub nms_iou: f64,
    /// Weight of positive token-class pairs in the classification loss;
    /// negatives weigh 1.
    pub cls_pos_weight: f64,
}

impl Default for ToyVlodConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            d: 64,
            n_vis_layers: 2,
            n_text_layers: 2,
            n_fusion_layers: 6,
            heads: 1,
            ffn_hidden: 256,
            prompt_len: 10,
            mechanism: Mechanism::Dpa,
            inject_visual: false,
            inject_text: false,
            inject_fusion: true,
            lambda_kind: LambdaKind::DimLevel,
            score_threshold: 0.5,
            nms_iou: 0.5,
            cls_pos_weight: 20.0,
        }
    }
}

impl ToyVlodConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(LabError::Config(m.to_string()));
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad("image_size must be divisible by patch_size");
        }
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return bad("d must be a positive multiple of heads");
        }
        if self.ffn_hidden == 0 {
            return bad("ffn_hidden must be positive");
        }
        if !(0.0..=1.0).contains(&self.score_threshold) || !(0.0..=1.0).contains(&self.nms_iou) {
            return bad("score_threshold and nms_iou must lie in [0, 1]");
        }
        if !(self.cls_pos_weight > 0.0) {
            return bad("cls_pos_weight must be positive");
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn mechanism_at(&self, pos: Position) -> Mechanism {
        let on = match pos {
            Position::Visual => self.inject_visual,
            Position::Text => self.inject_text,
            Position::Fusion => self.inject_fusion,
        };
        if on {
            self.mechanism
        } else {
            Mechanism::None
        }
    }
}

/// `x + W2 relu(W1 rms(x) + b1) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ffn {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl Ffn {
    fn init(d: usize, hidden: usize, rng: &mut SplitMix64) -> Self {
        Self {
            w1: Tensor::randn(&[d, hidden], 1.0 / (d as f64).sqrt(), rng),
            b1: Tensor::zeros(&[1, hidden]),
            w2: Tensor::randn(&[hidden, d], 0.25 / (hidden as f64).sqrt(), rng),
            b2: Tensor::zeros(&[1, d]),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FfnVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub attn: AttnParams,
    pub ffn: Ffn,
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderLayerVars {
    pub attn: AttnVars,
    pub ffn: FfnVars,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionLayer {
    pub xattn: XAttnParams,
    pub ffn_t: Ffn,
    pub ffn_v: Ffn,
}

#[derive(Debug, Clone, Copy)]
pub struct FusionLayerVars {
    pub xattn: XAttnVars,
    pub ffn_t: FfnVars,
    pub ffn_v: FfnVars,
}

/// The pretrained detector. Frozen during continual learning except under
/// the fine-tuning baselines.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseModel {
    pub config: ToyVlodConfig,
    pub vocab: Vec<String>,
    pub patch_w: Tensor,
    pub patch_b: Tensor,
    pub pos: Tensor,
    pub vis: Vec<EncoderLayer>,
    pub tok: Tensor,
    pub text: Vec<EncoderLayer>,
    pub fusion: Vec<FusionLayer>,
    pub box_w: Tensor,
    pub box_b: Tensor,
    pub cls_bias: Tensor,
}

#[derive(Debug, Clone)]
pub struct BaseVars {
    pub patch_w: Var,
    pub patch_b: Var,
    pub pos: Var,
    pub vis: Vec<EncoderLayerVars>,
    pub tok: Var,
    pub text: Vec<EncoderLayerVars>,
    pub fusion: Vec<FusionLayerVars>,
    pub box_w: Var,
    pub box_b: Var,
    pub cls_bias: Var,
}

impl FfnVars {
    pub fn vars(&self) -> [Var; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

impl BaseVars {
    /// Handles in the order of [`BaseModel::named_tensors`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.patch_w, self.patch_b, self.pos];
        for l in &self.vis {
            out.extend(l.attn.vars());
            out.extend(l.ffn.vars());
        }
        out.push(self.tok);
        for l in &self.text {
            out.extend(l.attn.vars());
            out.extend(l.ffn.vars());
        }
        for l in &self.fusion {
            out.extend(l.xattn.v_to_t.vars());
            out.extend(l.xattn.t_to_v.vars());
            out.extend(l.ffn_t.vars());
            out.extend(l.ffn_v.vars());
        }
        out.extend([self.box_w, self.box_b, self.cls_bias]);
        out
    }
}

fn ffn_named<'a>(prefix: &str, f: &'a Ffn, out: &mut Vec<(String, &'a Tensor)>) {
    out.push((format!("{prefix}.w1"), &f.w1));
    out.push((format!("{prefix}.b1"), &f.b1));
    out.push((format!("{prefix}.w2"), &f.w2));
    out.push((format!("{prefix}.b2"), &f.b2));
}

fn attn_named<'a>(prefix: &str, a: &'a AttnParams, out: &mut Vec<(String, &'a Tensor)>) {
    out.push((format!("{prefix}.w_q"), &a.w_q));
    out.push((format!("{prefix}.w_k"), &a.w_k));
    out.push((format!("{prefix}.w_v"), &a.w_v));
}

fn ffn_mut<'a>(f: &'a mut Ffn, out: &mut Vec<&'a mut Tensor>) {
    out.extend([&mut f.w1, &mut f.b1, &mut f.w2, &mut f.b2]);
}

fn attn_mut<'a>(a: &'a mut AttnParams, out: &mut Vec<&'a mut Tensor>) {
    out.extend(a.tensors_mut());
}

fn bind_ffn(g: &mut Graph, f: &Ffn, trainable: bool) -> FfnVars {
    FfnVars {
        w1: g.weight(f.w1.clone(), trainable),
        b1: g.weight(f.b1.clone(), trainable),
        w2: g.weight(f.w2.clone(), trainable),
        b2: g.weight(f.b2.clone(), trainable),
    }
}

fn bind_encoder(g: &mut Graph, layers: &[EncoderLayer], trainable: bool) -> Vec<EncoderLayerVars> {
    layers
        .iter()
        .map(|l| EncoderLayerVars {
            attn: l.attn.bind(g, trainable),
            ffn: bind_ffn(g, &l.ffn, trainable),
        })
        .collect()
}

/// Untrained attention mostly adds the same value mean to every row, so
/// value projections start small to keep rows apart through deep stacks.
/// Initial positional vectors: groups of four columns hold
/// `sin`/`cos` of the row and column index at one frequency each.
fn sinusoidal_positions(grid: usize, d: usize) -> Tensor {
    let mut v = vec![0.0; grid * grid * d];
    for r in 0..grid {
        for c in 0..grid {
            for j in 0..d / 4 {
                let half = if j % 2 == 0 { 1.0 } else { 0.5 };
                let f = std::f64::consts::PI * (j + 1) as f64 / grid as f64 * half;
                let (y, x) = (f * r as f64, f * c as f64);
                let o = (r * grid + c) * d + 4 * j;
                v[o..o + 4].copy_from_slice(&[y.sin(), y.cos(), x.sin(), x.cos()]);
            }
        }
    }
    Tensor::new(vec![grid * grid, d], v).expect("shape matches buffer")
}

fn damped_attn(d: usize, rng: &mut SplitMix64) -> AttnParams {
    let mut a = AttnParams::init(d, rng);
    a.w_v = tensor::scale(&a.w_v, 0.3);
    a
}

impl BaseModel {
    pub fn init(config: ToyVlodConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SplitMix64::derive(seed, 0xBA5E);
        let d = config.d;
        let h = config.ffn_hidden;
        let vocab = synth::vocabulary();
        let enc = |n: usize, rng: &mut SplitMix64| -> Vec<EncoderLayer> {
            (0..n)
                .map(|_| EncoderLayer {
                    attn: damped_attn(d, rng),
                    ffn: Ffn::init(d, h, rng),
                })
                .collect()
        };
        let patch_w = Tensor::randn(
            &[config.patch_dim(), d],
            1.0 / (config.patch_dim() as f64).sqrt(),
            &mut rng,
        );
        let pos = sinusoidal_positions(config.grid(), d);
        let vis = enc(config.n_vis_layers, &mut rng);
        let tok = Tensor::randn(&[vocab.len(), d], 1.0, &mut rng);
        let text = enc(config.n_text_layers, &mut rng);
        let fusion = (0..config.n_fusion_layers)
            .map(|_| FusionLayer {
                xattn: XAttnParams {
                    v_to_t: damped_attn(d, &mut rng),
                    t_to_v: damped_attn(d, &mut rng),
                },
                ffn_t: Ffn::init(d, h, &mut rng),
                ffn_v: Ffn::init(d, h, &mut rng),
            })
            .collect();
        let box_w = Tensor::randn(&[d, 4], 0.1 / (d as f64).sqrt(), &mut rng);
        Ok(Self {
            vocab,
            patch_w,
            patch_b: Tensor::zeros(&[1, d]),
            pos,
            vis,
            tok,
            text,
            fusion,
            box_w,
            box_b: Tensor::zeros(&[1, 4]),
            cls_bias: Tensor::filled(&[1, 1], -4.0),
            config,
        })
    }

    /// Every parameter with a stable dotted name, in binding order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("patch_w".to_string(), &self.patch_w),
            ("patch_b".to_string(), &self.patch_b),
            ("pos".to_string(), &self.pos),
        ];
        for (i, l) in self.vis.iter().enumerate() {
            attn_named(&format!("vis.{i}.attn"), &l.attn, &mut out);
            ffn_named(&format!("vis.{i}.ffn"), &l.ffn, &mut out);
        }
        out.push(("tok".to_string(), &self.tok));
        for (i, l) in self.text.iter().enumerate() {
            attn_named(&format!("text.{i}.attn"), &l.attn, &mut out);
            ffn_named(&format!("text.{i}.ffn"), &l.ffn, &mut out);
        }
        for (i, l) in self.fusion.iter().enumerate() {
            attn_named(&format!("fusion.{i}.v_to_t"), &l.xattn.v_to_t, &mut out);
            attn_named(&format!("fusion.{i}.t_to_v"), &l.xattn.t_to_v, &mut out);
            ffn_named(&format!("fusion.{i}.ffn_t"), &l.ffn_t, &mut out);
            ffn_named(&format!("fusion.{i}.ffn_v"), &l.ffn_v, &mut out);
        }
        out.push(("box_w".to_string(), &self.box_w));
        out.push(("box_b".to_string(), &self.box_b));
        out.push(("cls_bias".to_string(), &self.cls_bias));
        out
    }

    /// Mutable parameters in the order of [`BaseModel::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.patch_w, &mut self.patch_b, &mut self.pos];
        for l in &mut self.vis {
            attn_mut(&mut l.attn, &mut out);
            ffn_mut(&mut l.ffn, &mut out);
        }
        out.push(&mut self.tok);
        for l in &mut self.text {
            attn_mut(&mut l.attn, &mut out);
            ffn_mut(&mut l.ffn, &mut out);
        }
        for l in &mut self.fusion {
            attn_mut(&mut l.xattn.v_to_t, &mut out);
            attn_mut(&mut l.xattn.t_to_v, &mut out);
            ffn_mut(&mut l.ffn_t, &mut out);
            ffn_mut(&mut l.ffn_v, &mut out);
        }
        out.extend([&mut self.box_w, &mut self.box_b, &mut self.cls_bias]);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BaseVars {
        let w = |g: &mut Graph, t: &Tensor| g.weight(t.clone(), trainable);
        let patch_w = w(g, &self.patch_w);
        let patch_b = w(g, &self.patch_b);
        let pos = w(g, &self.pos);
        let vis = bind_encoder(g, &self.vis, trainable);
        let tok = w(g, &self.tok);
        let text = bind_encoder(g, &self.text, trainable);
        let fusion = self
            .fusion
            .iter()
            .map(|l| FusionLayerVars {
                xattn: l.xattn.bind(g, trainable),
                ffn_t: bind_ffn(g, &l.ffn_t, trainable),
                ffn_v: bind_ffn(g, &l.ffn_v, trainable),
            })
            .collect();
        BaseVars {
            patch_w,
            patch_b,
            pos,
            vis,
            tok,
            text,
            fusion,
            box_w: w(g, &self.box_w),
            box_b: w(g, &self.box_b),
            cls_bias: w(g, &self.cls_bias),
        }
    }

    /// SHA-256 over every parameter's name, shape and bits.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (name, t) in self.named_tensors() {
            h.update(name.as_bytes());
            for &s in t.shape() {
                h.update((s as u64).to_le_bytes());
            }
            for &x in t.data() {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn vocab_ids(&self, names: &[String]) -> Result<Vec<usize>> {
        names
            .iter()
            .map(|n| {
                self.vocab
                    .iter()
                    .position(|v| v == n)
                    .ok_or_else(|| LabError::Vocabulary(n.clone()))
            })
            .collect()
    }

    pub fn save(&self, stem: &std::path::Path) -> Result<()> {
        let named: Vec<(String, Tensor)> = self
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        crate::io::write_checkpoint(stem, &named)?;
        let mut p = stem.as_os_str().to_owned();
        p.push(".config.json");
        std::fs::write(p, serde_json::to_string_pretty(&self.config)?)?;
        Ok(())
    }

    pub fn load(stem: &std::path::Path) -> Result<Self> {
        let mut p = stem.as_os_str().to_owned();
        p.push(".config.json");
        let config: ToyVlodConfig = serde_json::from_slice(&std::fs::read(p)?)?;
        let mut model = Self::init(config, 0)?;
        let stored = crate::io::read_checkpoint(stem)?;
        let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
        if stored.len() != names.len() {
            return Err(LabError::Format(format!(
                "checkpoint has {} tensors, model expects {}",
                stored.len(),
                names.len()
            )));
        }
        for ((dst, name), (sname, t)) in model.tensors_mut().into_iter().zip(&names).zip(stored) {
            if *name != sname || dst.shape() != t.shape() {
                return Err(LabError::Format(format!(
                    "checkpoint tensor {sname} does not fit {name}"
                )));
            }
            *dst = t;
        }
        Ok(model)
    }
}

/// Cuts an `[H, W, 3]` image into `(H/p * W/p) x (p*p*3)` patch rows, row by
/// row; each row lists pixels row-major with channels innermost.
pub fn patchify(image: &Tensor, config: &ToyVlodConfig) -> Result<Tensor> {
    let s = config.image_size;
    if image.shape() != [s, s, 3] {
        return Err(LabError::Config(format!(
            "image shape {:?} does not match configured {s}x{s}x3",
            image.shape()
        )));
    }
    let p = config.patch_size;
    let grid = config.grid();
    let mut data = Vec::with_capacity(s * s * 3);
    for gy in 0..grid {
        for gx in 0..grid {
            for dy in 0..p {
                let o = ((gy * p + dy) * s + gx * p) * 3;
                data.extend_from_slice(&image.data()[o..o + p * 3]);
            }
        }
    }
    Tensor::new(vec![grid * grid, p * p * 3], data)
}

fn rms(g: &mut Graph, x: Var) -> Result<Var> {
    let d = g.shape(x)[1] as f64;
    let n = g.l2_normalize_rows(x)?;
    Ok(g.scale(n, d.sqrt()))
}

fn ffn_block(g: &mut Graph, x: Var, f: &FfnVars) -> Result<Var> {
    let n = rms(g, x)?;
    let h = g.matmul(n, f.w1)?;
    let h = g.add_row(h, f.b1)?;
    let h = g.relu(h);
    let o = g.matmul(h, f.w2)?;
    let o = g.add_row(o, f.b2)?;
    g.add(x, o)
}

/// Prompts for one encoder stream: one matrix and one raw scale per layer.
#[derive(Debug, Clone)]
pub struct StreamPromptVars {
    pub mechanism: Mechanism,
    pub kind: LambdaKind,
    pub prompts: Vec<Var>,
    pub lambdas: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct FusionPromptVars {
    pub mechanism: Mechanism,
    pub p_v: Vec<Var>,
    pub p_t: Vec<Var>,
    pub lambdas: Vec<DpaVars>,
}

/// Graph handles for every prompt a task injects.
#[derive(Debug, Clone, Default)]
pub struct PromptVars {
    pub visual: Option<StreamPromptVars>,
    pub text: Option<StreamPromptVars>,
    pub fusion: Option<FusionPromptVars>,
}

/// Frozen or trainable prompt tensors of one task. Vectors are empty for
/// positions without injection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSet {
    pub mechanism: Mechanism,
    pub lambda_kind: LambdaKind,
    pub fusion_v: Vec<Tensor>,
    pub fusion_t: Vec<Tensor>,
    pub fusion_lambda: Vec<DpaParams>,
    pub visual: Vec<Tensor>,
    pub visual_lambda: Vec<Tensor>,
    pub text: Vec<Tensor>,
    pub text_lambda: Vec<Tensor>,
}

impl PromptSet {
    /// Prompts drawn from `N(0, std^2)`, scales at zero.
    pub fn init(
        config: &ToyVlodConfig,
        mechanism: Mechanism,
        std: f64,
        rng: &mut SplitMix64,
    ) -> Self {
        let (l, d, kind) = (config.prompt_len, config.d, config.lambda_kind);
        let mut draw = |n: usize, on: bool| -> Vec<Tensor> {
            if on {
                (0..n).map(|_| Tensor::randn(&[l, d], std, rng)).collect()
            } else {
                Vec::new()
            }
        };
        let fusion_on = config.inject_fusion && mechanism != Mechanism::None;
        let vis_on = config.inject_visual && mechanism != Mechanism::None;
        let text_on = config.inject_text && mechanism != Mechanism::None;
        let fusion_v = draw(config.n_fusion_layers, fusion_on);
        let fusion_t = draw(config.n_fusion_layers, fusion_on);
        let visual = draw(config.n_vis_layers, vis_on);
        let text = draw(config.n_text_layers, text_on);
        let dpa = mechanism == Mechanism::Dpa;
        let zeros = |n: usize| -> Vec<Tensor> {
            (0..n)
                .map(|_| Tensor::zeros(&kind.param_shape(d)))
                .collect()
        };
        Self {
            mechanism,
            lambda_kind: kind,
            fusion_lambda: if dpa {
                (0..fusion_v.len())
                    .map(|_| DpaParams::zeros(kind, d))
                    .collect()
            } else {
                Vec::new()
            },
            visual_lambda: if dpa { zeros(visual.len()) } else { Vec::new() },
            text_lambda: if dpa { zeros(text.len()) } else { Vec::new() },
            fusion_v,
            fusion_t,
            visual,
            text,
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, (v, t)) in self.fusion_v.iter().zip(&self.fusion_t).enumerate() {
            out.push((format!("fusion.{i}.p_v"), v));
            out.push((format!("fusion.{i}.p_t"), t));
        }
        for (i, lam) in self.fusion_lambda.iter().enumerate() {
            out.push((format!("fusion.{i}.lambda_vt"), &lam.lambda_vt));
            out.push((format!("fusion.{i}.lambda_tv"), &lam.lambda_tv));
        }
        for (i, p) in self.visual.iter().enumerate() {
            out.push((format!("visual.{i}.p"), p));
        }
        for (i, lam) in self.visual_lambda.iter().enumerate() {
            out.push((format!("visual.{i}.lambda"), lam));
        }
        for (i, p) in self.text.iter().enumerate() {
            out.push((format!("text.{i}.p"), p));
        }
        for (i, lam) in self.text_lambda.iter().enumerate() {
            out.push((format!("text.{i}.lambda"), lam));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for (v, t) in self.fusion_v.iter_mut().zip(self.fusion_t.iter_mut()) {
            out.push(v);
            out.push(t);
        }
        for lam in &mut self.fusion_lambda {
            out.push(&mut lam.lambda_vt);
            out.push(&mut lam.lambda_tv);
        }
        out.extend(self.visual.iter_mut());
        out.extend(self.visual_lambda.iter_mut());
        out.extend(self.text.iter_mut());
        out.extend(self.text_lambda.iter_mut());
        out
    }

    /// Scalars that receive gradients; `Constant` scales are fixed.
    pub fn trainable_count(&self) -> usize {
        let prompts: usize = self
            .fusion_v
            .iter()
            .chain(&self.fusion_t)
            .chain(&self.visual)
            .chain(&self.text)
            .map(Tensor::len)
            .sum();
        let lambdas: usize = self
            .fusion_lambda
            .iter()
            .flat_map(|l| [&l.lambda_vt, &l.lambda_tv])
            .chain(&self.visual_lambda)
            .chain(&self.text_lambda)
            .map(Tensor::len)
            .sum();
        prompts + lambdas
    }

    /// Binds prompt matrices from `prompts` (already on the graph, in the
    /// order of `fusion_v, fusion_t, visual, text`) together with this set's
    /// scales.
    pub fn bind_with(&self, g: &mut Graph, prompts: PromptMatrices, trainable: bool) -> PromptVars {
        let kind = self.lambda_kind;
        let w = |g: &mut Graph, t: &Tensor| g.weight(t.clone(), trainable);
        let stream = |g: &mut Graph, ps: Vec<Var>, lams: &[Tensor]| -> Option<StreamPromptVars> {
            if ps.is_empty() {
                return None;
            }
            Some(StreamPromptVars {
                mechanism: self.mechanism,
                kind,
                lambdas: lams.iter().map(|t| w(g, t)).collect(),
                prompts: ps,
            })
        };
        let visual = stream(g, prompts.visual, &self.visual_lambda);
        let text = stream(g, prompts.text, &self.text_lambda);
        let fusion = if prompts.fusion_v.is_empty() {
            None
        } else {
            Some(FusionPromptVars {
                mechanism: self.mechanism,
                p_v: prompts.fusion_v,
                p_t: prompts.fusion_t,
                lambdas: self
                    .fusion_lambda
                    .iter()
                    .map(|l| l.bind(g, trainable))
                    .collect(),
            })
        };
        PromptVars {
            visual,
            text,
            fusion,
        }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> PromptVars {
        let mut w = |ts: &[Tensor]| -> Vec<Var> {
            ts.iter().map(|t| g.weight(t.clone(), trainable)).collect()
        };
        let m = PromptMatrices {
            fusion_v: w(&self.fusion_v),
            fusion_t: w(&self.fusion_t),
            visual: w(&self.visual),
            text: w(&self.text),
        };
        self.bind_with(g, m, trainable)
    }
}

/// Prompt matrices already placed on a graph.
#[derive(Debug, Clone, Default)]
pub struct PromptMatrices {
    pub fusion_v: Vec<Var>,
    pub fusion_t: Vec<Var>,
    pub visual: Vec<Var>,
    pub text: Vec<Var>,
}

fn encoder_stack(
    g: &mut Graph,
    mut x: Var,
    layers: &[EncoderLayerVars],
    prompts: Option<&StreamPromptVars>,
    heads: usize,
) -> Result<Var> {
    let prompts = prompts.filter(|p| p.mechanism != Mechanism::None);
    if let Some(p) = prompts {
        if p.prompts.len() != layers.len() {
            return Err(LabError::Config(format!(
                "{} encoder prompts for {} layers",
                p.prompts.len(),
                layers.len()
            )));
        }
    }
    let n_rows = g.shape(x)[0];
    let mut carried = 0;
    for (k, layer) in layers.iter().enumerate() {
        x = match prompts {
            None => {
                let upd = tape::attn(g, x, x, &layer.attn, heads)?;
                g.add(x, upd)?
            }
            Some(p) if p.mechanism == Mechanism::Dpa => {
                tape::dpa_self(g, x, p.prompts[k], &layer.attn, p.lambdas[k], p.kind, heads)?
            }
            Some(p) => {
                let l = g.shape(p.prompts[k])[0];
                if carried == 0 {
                    carried = l;
                    tape::prompt_self_attn(g, x, p.prompts[k], &layer.attn, heads)?
                } else {
                    let old = g.slice_rows(x, 0, l)?;
                    let feats = g.slice_rows(x, l, l + n_rows)?;
                    let fresh = g.add(old, p.prompts[k])?;
                    let xx = g.concat_rows(&[fresh, feats])?;
                    let upd = tape::attn(g, xx, xx, &layer.attn, heads)?;
                    g.add(xx, upd)?
                }
            }
        };
        x = ffn_block(g, x, &layer.ffn)?;
    }
    if carried > 0 {
        x = g.slice_rows(x, carried, carried + n_rows)?;
    }
    Ok(x)
}

/// Graph-level forward passes over a bound base.
pub mod forward {
    use super::*;

    pub fn encode_image(
        g: &mut Graph,
        b: &BaseVars,
        config: &ToyVlodConfig,
        image: &Tensor,
        prompts: Option<&StreamPromptVars>,
    ) -> Result<Var> {
        let patches = g.input(patchify(image, config)?);
        let x = g.matmul(patches, b.patch_w)?;
        let x = g.add_row(x, b.patch_b)?;
        let x = g.add(x, b.pos)?;
        encoder_stack(g, x, &b.vis, prompts, config.heads)
    }

    pub fn encode_text(
        g: &mut Graph,
        b: &BaseVars,
        config: &ToyVlodConfig,
        vocab_ids: &[usize],
        prompts: Option<&StreamPromptVars>,
    ) -> Result<Var> {
        if vocab_ids.is_empty() {
            return Err(LabError::Config("empty class list".into()));
        }
        let x = g.select_rows(b.tok, vocab_ids)?;
        encoder_stack(g, x, &b.text, prompts, config.heads)
    }

    /// Returns `(f_v', f_t')`.
    pub fn fuse(
        g: &mut Graph,
        b: &BaseVars,
        config: &ToyVlodConfig,
        f_v: Var,
        f_t: Var,
        prompts: Option<&FusionPromptVars>,
    ) -> Result<(Var, Var)> {
        let prompts = prompts.filter(|p| p.mechanism != Mechanism::None);
        let n = b.fusion.len();
        if let Some(p) = prompts {
            if p.p_v.len() != n || p.p_t.len() != n {
                return Err(LabError::Config(format!(
                    "fusion prompts must cover all {n} layers"
                )));
            }
            if p.mechanism == Mechanism::Dpa && p.lambdas.len() != n {
                return Err(LabError::Config(
                    "one lambda pair per fusion layer required".into(),
                ));
            }
            for k in 0..n {
                let (sv, st) = (g.shape(p.p_v[k]), g.shape(p.p_t[k]));
                if sv != st || sv.len() != 2 || sv[1] != config.d {
                    return Err(LabError::Config(format!(
                        "prompt shapes {sv:?} and {st:?} at layer {k}"
                    )));
                }
            }
        }
        let heads = config.heads;
        let lt = g.shape(f_t)[0];
        let lv = g.shape(f_v)[0];
        let (mut t, mut v) = (f_t, f_v);
        let mut carried = 0;
        for (k, layer) in b.fusion.iter().enumerate() {
            (t, v) = match prompts {
                None => tape::x_attn(g, t, v, &layer.xattn, heads)?,
                Some(p) if p.mechanism == Mechanism::Dpa => tape::dpa(
                    g,
                    t,
                    v,
                    p.p_t[k],
                    p.p_v[k],
                    &layer.xattn,
                    &p.lambdas[k],
                    heads,
                )?,
                Some(p) => {
                    let l = g.shape(p.p_t[k])[0];
                    if carried == 0 {
                        carried = l;
                        tape::prompt_attn(g, t, v, p.p_t[k], p.p_v[k], &layer.xattn, heads)?
                    } else {
                        let old_t = g.slice_rows(t, 0, l)?;
                        let feat_t = g.slice_rows(t, l, l + lt)?;
                        let old_v = g.slice_rows(v, 0, l)?;
                        let feat_v = g.slice_rows(v, l, l + lv)?;
                        let pt = g.add(old_t, p.p_t[k])?;
                        let pv = g.add(old_v, p.p_v[k])?;
                        tape::prompt_attn(g, feat_t, feat_v, pt, pv, &layer.xattn, heads)?
                    }
                }
            };
            t = ffn_block(g, t, &layer.ffn_t)?;
            v = ffn_block(g, v, &layer.ffn_v)?;
        }
        if carried > 0 {
            t = g.slice_rows(t, carried, carried + lt)?;
            v = g.slice_rows(v, carried, carried + lv)?;
        }
        Ok((v, t))
    }

    /// Returns `(logits [Lv x Lt], raw box outputs [Lv x 4])`.
    pub fn heads(g: &mut Graph, b: &BaseVars, f_v: Var, f_t: Var) -> Result<(Var, Var)> {
        let d = g.shape(f_v)[1] as f64;
        let nv = rms(g, f_v)?;
        let nt = rms(g, f_t)?;
        let s = g.matmul_nt(nv, nt)?;
        let s = g.scale(s, 1.0 / d.sqrt());
        let lt = g.shape(s)[1];
        let bias = g.broadcast_cols(b.cls_bias, lt)?;
        let logits = g.add_row(s, bias)?;
        let raw = g.matmul(nv, b.box_w)?;
        let raw = g.add_row(raw, b.box_b)?;
        Ok((logits, raw))
    }

    /// Full image-to-logits pass.
    pub fn detect(
        g: &mut Graph,
        b: &BaseVars,
        config: &ToyVlodConfig,
        image: &Tensor,
        vocab_ids: &[usize],
        prompts: &PromptVars,
    ) -> Result<(Var, Var)> {
        let f_v = encode_image(g, b, config, image, prompts.visual.as_ref())?;
        let f_t = encode_text(g, b, config, vocab_ids, prompts.text.as_ref())?;
        let (fv, ft) = fuse(g, b, config, f_v, f_t, prompts.fusion.as_ref())?;
        heads(g, b, fv, ft)
    }
}

/// Turns head outputs into thresholded, suppressed detections. Token `i`
/// sits in grid cell `(i / grid, i % grid)`; its box is
/// `cx = (col + s(o0)) / grid`, `cy = (row + s(o1)) / grid`, `w = s(o2)`,
/// `h = s(o3)` with `s` the logistic function, then clamped to the image.
pub fn decode(
    logits: &Tensor,
    box_raw: &Tensor,
    grid: usize,
    threshold: f64,
    nms_iou: f64,
) -> Vec<Detection> {
    let (lv, lt) = (logits.rows(), logits.cols());
    let mut dets = Vec::new();
    for i in 0..lv {
        let mut bbox = None;
        for c in 0..lt {
            let score = tensor::sigmoid_scalar(logits.get(i, c));
            if score < threshold {
                continue;
            }
            let b = *bbox.get_or_insert_with(|| token_box(box_raw.row(i), i, grid));
            dets.push(Detection {
                bbox: b,
                category: c,
                score,
                token: i,
            });
        }
    }
    nms(dets, nms_iou)
}

fn token_box(raw: &[f64], token: usize, grid: usize) -> BBox {
    let s = tensor::sigmoid_scalar;
    let (row, col) = ((token / grid) as f64, (token % grid) as f64);
    let g = grid as f64;
    BBox::new(
        (col + s(raw[0])) / g,
        (row + s(raw[1])) / g,
        s(raw[2]),
        s(raw[3]),
    )
    .clamped()
}

/// Training targets under center-cell assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    /// `Lv x Lt`, 1 where a token owns an object of that class.
    pub cls: Tensor,
    /// Positive tokens, one per distinct owning cell, ascending.
    pub tokens: Vec<usize>,
    /// `P x 4` multipliers and offsets mapping logistic outputs to boxes.
    pub box_scale: Tensor,
    pub box_offset: Tensor,
    pub box_gt: Tensor,
}

/// Assigns every object to the token whose cell holds its center. `classes`
/// lists global class ids in text-token order. When two objects share a cell
/// the first one supplies the box target.
pub fn assign(annotations: &[Annotation], classes: &[usize], grid: usize) -> Result<Targets> {
    if annotations.is_empty() {
        return Err(LabError::Assignment("no ground-truth boxes".into()));
    }
    let lt = classes.len();
    let mut cls = Tensor::zeros(&[grid * grid, lt]);
    let mut owner: std::collections::BTreeMap<usize, BBox> = Default::default();
    for a in annotations {
        let c = classes
            .iter()
            .position(|&c| c == a.class_id)
            .ok_or_else(|| {
                LabError::Assignment(format!("class {} not in the query list", a.class_id))
            })?;
        let inside = |x: f64| (0.0..=1.0).contains(&x);
        if !inside(a.bbox.cx) || !inside(a.bbox.cy) {
            return Err(LabError::Assignment(format!(
                "box center ({}, {}) outside the grid",
                a.bbox.cx, a.bbox.cy
            )));
        }
        let col = ((a.bbox.cx * grid as f64) as usize).min(grid - 1);
        let row = ((a.bbox.cy * grid as f64) as usize).min(grid - 1);
        let tok = row * grid + col;
        cls.data_mut()[tok * lt + c] = 1.0;
        owner.entry(tok).or_insert(a.bbox);
    }
    let g = grid as f64;
    let mut scale = Vec::new();
    let mut offset = Vec::new();
    let mut gt = Vec::new();
    for (&tok, b) in &owner {
        let (row, col) = ((tok / grid) as f64, (tok % grid) as f64);
        scale.extend([1.0 / g, 1.0 / g, 1.0, 1.0]);
        offset.extend([col / g, row / g, 0.0, 0.0]);
        gt.extend(b.to_array());
    }
    let p = owner.len();
    Ok(Targets {
        cls,
        tokens: owner.keys().copied().collect(),
        box_scale: Tensor::new(vec![p, 4], scale)?,
        box_offset: Tensor::new(vec![p, 4], offset)?,
        box_gt: Tensor::new(vec![p, 4], gt)?,
    })
}

/// Mean BCE over all token-class pairs plus mean absolute box error over
/// positive tokens and coordinates.
pub fn detection_loss(g: &mut Graph, logits: Var, box_raw: Var, t: &Targets) -> Result<Var> {
    detection_loss_weighted(g, logits, box_raw, t, 1.0)
}

/// [`detection_loss`] with positive pairs weighted `pos_weight` in the
/// BCE average.
pub fn detection_loss_weighted(
    g: &mut Graph,
    logits: Var,
    box_raw: Var,
    t: &Targets,
    pos_weight: f64,
) -> Result<Var> {
    let cls = if pos_weight == 1.0 {
        g.bce_with_logits(logits, &t.cls)?
    } else {
        let w = tensor::map(&t.cls, |y| if y > 0.5 { pos_weight } else { 1.0 });
        g.weighted_bce_with_logits(logits, &t.cls, &w)?
    };
    let raw = g.select_rows(box_raw, &t.tokens)?;
    let s = g.sigmoid(raw);
    let scale = g.input(t.box_scale.clone());
    let offset = g.input(t.box_offset.clone());
    let gt = g.input(t.box_gt.clone());
    let pred = g.mul(s, scale)?;
    let pred = g.add(pred, offset)?;
    let diff = g.sub(pred, gt)?;
    let l1 = g.abs(diff);
    let l1 = g.mean(l1);
    g.add(cls, l1)
}

/// Tensor-level detector around a base and an optional prompt set.
pub fn predict_image(
    base: &BaseModel,
    prompts: Option<&PromptSet>,
    image: &Tensor,
    vocab_ids: &[usize],
) -> Result<Vec<Detection>> {
    let mut g = Graph::new();
    let b = base.bind(&mut g, false);
    let pv = prompts.map(|p| p.bind(&mut g, false)).unwrap_or_default();
    let (logits, raw) = forward::detect(&mut g, &b, &base.config, image, vocab_ids, &pv)?;
    let c = &base.config;
    Ok(decode(
        g.value(logits),
        g.value(raw),
        c.grid(),
        c.score_threshold,
        c.nms_iou,
    ))
}

/// Unprompted visual tokens.
pub fn encode_image(base: &BaseModel, image: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let b = base.bind(&mut g, false);
    let v = forward::encode_image(&mut g, &b, &base.config, image, None)?;
    Ok(g.value(v).clone())
}

/// Unprompted text tokens.
pub fn encode_text(base: &BaseModel, class_names: &[String]) -> Result<Tensor> {
    let ids = base.vocab_ids(class_names)?;
    let mut g = Graph::new();
    let b = base.bind(&mut g, false);
    let t = forward::encode_text(&mut g, &b, &base.config, &ids, None)?;
    Ok(g.value(t).clone())
}

/// Visual tokens entering each fusion layer of the unprompted base.
pub fn fusion_layer_inputs(base: &BaseModel, f_v: &Tensor, f_t: &Tensor) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let b = base.bind(&mut g, false);
    let mut v = g.input(f_v.clone());
    let mut t = g.input(f_t.clone());
    let mut out = Vec::with_capacity(b.fusion.len());
    for layer in &b.fusion {
        out.push(g.value(v).clone());
        (t, v) = tape::x_attn(&mut g, t, v, &layer.xattn, base.config.heads)?;
        t = ffn_block(&mut g, t, &layer.ffn_t)?;
        v = ffn_block(&mut g, v, &layer.ffn_v)?;
    }
    Ok(out)
}

/// Visual tokens entering each visual encoder layer.
pub fn visual_layer_inputs(base: &BaseModel, image: &Tensor) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let b = base.bind(&mut g, false);
    let patches = g.input(patchify(image, &base.config)?);
    let x = g.matmul(patches, b.patch_w)?;
    let x = g.add_row(x, b.patch_b)?;
    let mut x = g.add(x, b.pos)?;
    let mut out = Vec::with_capacity(b.vis.len());
    for layer in &b.vis {
        out.push(g.value(x).clone());
        let upd = tape::attn(&mut g, x, x, &layer.attn, base.config.heads)?;
        x = g.add(x, upd)?;
        x = ffn_block(&mut g, x, &layer.ffn)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ToyVlodConfig {
        ToyVlodConfig {
            image_size: 8,
            patch_size: 4,
            d: 8,
            n_vis_layers: 1,
            n_text_layers: 1,
            n_fusion_layers: 2,
            ffn_hidden: 16,
            prompt_len: 3,
            ..Default::default()
        }
    }

    #[test]
    fn default_token_shape() {
        let base = BaseModel::init(ToyVlodConfig::default(), 0).unwrap();
        let img = Tensor::zeros(&[32, 32, 3]);
        assert_eq!(encode_image(&base, &img).unwrap().shape(), &[64, 64]);
    }

    #[test]
    fn wrong_image_size_is_config_error() {
        let base = BaseModel::init(tiny(), 0).unwrap();
        let r = encode_image(&base, &Tensor::zeros(&[9, 9, 3]));
        assert!(matches!(r, Err(LabError::Config(_))));
    }

    #[test]
    fn patch_layout() {
        let c = tiny();
        let data: Vec<f64> = (0..8 * 8 * 3).map(|x| x as f64).collect();
        let img = Tensor::new(vec![8, 8, 3], data).unwrap();
        let p = patchify(&img, &c).unwrap();
        assert_eq!(p.shape(), &[4, 48]);
        // token 1 = top row, right patch; its first pixel is (y=0, x=4)
        assert_eq!(p.get(1, 0), (4 * 3) as f64);
        // second pixel row of that patch starts at (y=1, x=4)
        assert_eq!(p.get(1, 12), ((8 + 4) * 3) as f64);
    }

    #[test]
    fn unknown_name_is_vocabulary_error() {
        let base = BaseModel::init(tiny(), 0).unwrap();
        let r = encode_text(&base, &["nonsense".to_string()]);
        assert!(matches!(r, Err(LabError::Vocabulary(_))));
    }

    #[test]
    fn text_is_permutation_equivariant() {
        let base = BaseModel::init(tiny(), 1).unwrap();
        let names: Vec<String> = ["adenoma", "bleb", "cyst"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let a = encode_text(&base, &names).unwrap();
        let rev: Vec<String> = names.iter().rev().cloned().collect();
        let b = encode_text(&base, &rev).unwrap();
        for i in 0..3 {
            for (x, y) in a.row(i).iter().zip(b.row(2 - i)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn named_order_matches_mutable_order() {
        let mut base = BaseModel::init(tiny(), 2).unwrap();
        let named: Vec<Tensor> = base
            .named_tensors()
            .into_iter()
            .map(|(_, t)| t.clone())
            .collect();
        let muts = base.tensors_mut();
        assert_eq!(named.len(), muts.len());
        for (a, b) in named.iter().zip(muts) {
            assert!(a.bit_eq(b));
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let base = BaseModel::init(tiny(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("base");
        base.save(&stem).unwrap();
        let back = BaseModel::load(&stem).unwrap();
        assert_eq!(back.digest(), base.digest());
    }

    #[test]
    fn zero_logits_give_no_detections_above_half() {
        let logits = Tensor::zeros(&[4, 2]);
        let raw = Tensor::zeros(&[4, 4]);
        assert!(decode(&logits, &raw, 2, 0.5 + 1e-9, 0.5).is_empty());
    }

    #[test]
    fn single_infinite_logit() {
        let mut logits = Tensor::filled(&[4, 2], -50.0);
        logits.data_mut()[2 * 2] = f64::INFINITY;
        let dets = decode(&logits, &Tensor::zeros(&[4, 4]), 2, 0.5, 0.5);
        assert_eq!(dets.len(), 1);
        assert_eq!(
            (dets[0].category, dets[0].score, dets[0].token),
            (0, 1.0, 2)
        );
    }

    #[test]
    fn assignment_outside_grid_is_error() {
        let a = Annotation {
            bbox: BBox::new(1.2, 0.5, 0.1, 0.1),
            class_id: 0,
        };
        assert!(matches!(
            assign(&[a], &[0], 8),
            Err(LabError::Assignment(_))
        ));
    }

    #[test]
    fn zero_logits_bce_is_ln2() {
        let a = Annotation {
            bbox: BBox::new(0.3, 0.3, 0.2, 0.2),
            class_id: 5,
        };
        let t = assign(&[a], &[5, 6], 4).unwrap();
        let mut g = Graph::new();
        let logits = g.input(Tensor::zeros(&[16, 2]));
        let l = g.bce_with_logits(logits, &t.cls).unwrap();
        assert!((g.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn perfect_outputs_give_tiny_loss() {
        let anns = [
            Annotation {
                bbox: BBox::new(0.3, 0.3, 0.2, 0.1),
                class_id: 5,
            },
            Annotation {
                bbox: BBox::new(0.8, 0.6, 0.1, 0.3),
                class_id: 6,
            },
        ];
        let grid = 4;
        let t = assign(&anns, &[5, 6], grid).unwrap();
        let logits = Tensor::new(
            vec![16, 2],
            t.cls
                .data()
                .iter()
                .map(|&y| if y > 0.0 { 10.0 } else { -10.0 })
                .collect(),
        )
        .unwrap();
        let logit = |p: f64| (p / (1.0 - p)).ln();
        let mut raw = Tensor::zeros(&[16, 4]);
        for a in &anns {
            let col = (a.bbox.cx * grid as f64) as usize;
            let row = (a.bbox.cy * grid as f64) as usize;
            let tok = row * grid + col;
            let vals = [
                logit(a.bbox.cx * grid as f64 - col as f64),
                logit(a.bbox.cy * grid as f64 - row as f64),
                logit(a.bbox.w),
                logit(a.bbox.h),
            ];
            raw.data_mut()[tok * 4..tok * 4 + 4].copy_from_slice(&vals);
        }
        let mut g = Graph::new();
        let lv = g.input(logits);
        let rv = g.input(raw);
        let loss = detection_loss(&mut g, lv, rv, &t).unwrap();
        assert!(g.value(loss).data()[0] <= 1e-3);
    }

    fn fuse_once(
        base: &BaseModel,
        prompts: Option<&PromptSet>,
        f_v: &Tensor,
        f_t: &Tensor,
    ) -> (Tensor, Tensor) {
        let mut g = Graph::new();
        let b = base.bind(&mut g, false);
        let pv = prompts.map(|p| p.bind(&mut g, false)).unwrap_or_default();
        let v = g.input(f_v.clone());
        let t = g.input(f_t.clone());
        let (v, t) = forward::fuse(&mut g, &b, &base.config, v, t, pv.fusion.as_ref()).unwrap();
        (g.value(v).clone(), g.value(t).clone())
    }

    #[test]
    fn dpa_zero_lambda_matches_plain_stack() {
        let base = BaseModel::init(tiny(), 4).unwrap();
        let mut rng = SplitMix64::new(9);
        let f_v = Tensor::randn(&[4, 8], 1.0, &mut rng);
        let f_t = Tensor::randn(&[3, 8], 1.0, &mut rng);
        let p = PromptSet::init(&base.config, Mechanism::Dpa, 0.5, &mut rng);
        let plain = fuse_once(&base, None, &f_v, &f_t);
        let dpa = fuse_once(&base, Some(&p), &f_v, &f_t);
        assert!(plain.0.bit_eq(&dpa.0) && plain.1.bit_eq(&dpa.1));
    }

    #[test]
    fn pa_and_dpa_differ_and_are_finite() {
        let base = BaseModel::init(tiny(), 5).unwrap();
        let mut rng = SplitMix64::new(10);
        let f_v = Tensor::randn(&[4, 8], 1.0, &mut rng);
        let f_t = Tensor::randn(&[3, 8], 1.0, &mut rng);
        let mut dp = PromptSet::init(&base.config, Mechanism::Dpa, 0.5, &mut rng);
        for l in &mut dp.fusion_lambda {
            l.lambda_vt = Tensor::filled(&[1, 8], 0.3);
            l.lambda_tv = Tensor::filled(&[1, 8], 0.3);
        }
        let mut pa = dp.clone();
        pa.mechanism = Mechanism::Pa;
        let a = fuse_once(&base, Some(&pa), &f_v, &f_t);
        let b = fuse_once(&base, Some(&dp), &f_v, &f_t);
        assert_eq!(a.0.shape(), &[4, 8]);
        assert!(a.0.is_finite() && b.0.is_finite());
        assert!(a.0.max_abs_diff(&b.0) > 1e-6);
    }

    #[test]
    fn encoder_injection_zero_lambda_is_identity() {
        let mut c = tiny();
        c.inject_visual = true;
        c.inject_text = true;
        let base = BaseModel::init(c, 6).unwrap();
        let mut rng = SplitMix64::new(11);
        let p = PromptSet::init(&base.config, Mechanism::Dpa, 0.5, &mut rng);
        let img = Tensor::rand_uniform(&[8, 8, 3], 0.0, 1.0, &mut rng);
        let ids = base
            .vocab_ids(&["adenoma".to_string(), "bleb".to_string()])
            .unwrap();
        let run = |ps: Option<&PromptSet>| {
            let mut g = Graph::new();
            let b = base.bind(&mut g, false);
            let pv = ps.map(|p| p.bind(&mut g, false)).unwrap_or_default();
            let (l, _) = forward::detect(&mut g, &b, &base.config, &img, &ids, &pv).unwrap();
            g.value(l).clone()
        };
        assert!(run(None).bit_eq(&run(Some(&p))));
        let mut pa = p.clone();
        pa.mechanism = Mechanism::Pa;
        assert!(run(Some(&pa)).is_finite());
    }

    #[test]
    fn positions_are_distinct_and_bounded() {
        let p = sinusoidal_positions(8, 64);
        assert!(p.data().iter().all(|x| x.abs() <= 1.0));
        for a in 0..64 {
            for b in 0..a {
                let d: f64 = p
                    .row(a)
                    .iter()
                    .zip(p.row(b))
                    .map(|(x, y)| (x - y).powi(2))
                    .sum();
                assert!(d > 1e-3, "tokens {a} and {b} share a code");
            }
        }
        // Odd widths leave the tail columns at zero.
        assert!(sinusoidal_positions(2, 6).row(3)[4..]
            .iter()
            .all(|&x| x == 0.0));
    }
}
