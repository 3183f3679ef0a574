//! Cross-attention, prompt attention and decoupled prompt attention.
//!
//! Naming follows the direction of knowledge flow: `v_to_t` projections are
//! used when text tokens query visual keys (text features are updated),
//! `t_to_v` when visual tokens query text keys.
//!
//! The tensor-level functions in this module are thin wrappers that run the
//! tape implementations in [`tape`] on a scratch graph, so evaluation and
//! training share one arithmetic path.

use crate::autograd::{Graph, Var};
use crate::error::{LabError, Result};
use crate::rng::SplitMix64;
use crate::tensor::{self, Tensor};
use serde::{Deserialize, Serialize};

/// Single-direction projection matrices, each `d x d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttnParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
}

impl AttnParams {
    pub fn init(d: usize, rng: &mut SplitMix64) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        Self {
            w_q: Tensor::randn(&[d, d], std, rng),
            w_k: Tensor::randn(&[d, d], std, rng),
            w_v: Tensor::randn(&[d, d], std, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.w_q.rows()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> AttnVars {
        AttnVars {
            w_q: g.weight(self.w_q.clone(), trainable),
            w_k: g.weight(self.w_k.clone(), trainable),
            w_v: g.weight(self.w_v.clone(), trainable),
        }
    }

    pub fn tensors(&self) -> [&Tensor; 3] {
        [&self.w_q, &self.w_k, &self.w_v]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 3] {
        [&mut self.w_q, &mut self.w_k, &mut self.w_v]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttnVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
}

impl AttnVars {
    pub fn vars(&self) -> [Var; 3] {
        [self.w_q, self.w_k, self.w_v]
    }
}

/// Both directions of a bidirectional fusion layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct XAttnParams {
    pub v_to_t: AttnParams,
    pub t_to_v: AttnParams,
}

impl XAttnParams {
    pub fn init(d: usize, rng: &mut SplitMix64) -> Self {
        Self {
            v_to_t: AttnParams::init(d, rng),
            t_to_v: AttnParams::init(d, rng),
        }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> XAttnVars {
        XAttnVars {
            v_to_t: self.v_to_t.bind(g, trainable),
            t_to_v: self.t_to_v.bind(g, trainable),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct XAttnVars {
    pub v_to_t: AttnVars,
    pub t_to_v: AttnVars,
}

/// How the learnable prompt-branch scale is parameterized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaKind {
    /// One scale per feature dimension, `1 x d`.
    #[default]
    DimLevel,
    /// One shared scale, `1 x 1`.
    TaskLevel,
    /// `tanh` of a `1 x d` raw parameter.
    Gate,
    /// Fixed at 1.0, nothing to learn.
    Constant,
}

impl LambdaKind {
    pub fn param_shape(self, d: usize) -> [usize; 2] {
        match self {
            LambdaKind::DimLevel | LambdaKind::Gate => [1, d],
            LambdaKind::TaskLevel => [1, 1],
            LambdaKind::Constant => [1, 0],
        }
    }

    pub fn trainable_count(self, d: usize) -> usize {
        let [a, b] = self.param_shape(d);
        a * b
    }
}

/// Prompt-branch scales of one fusion layer. Raw values are zero at task
/// start, so every kind except `Constant` begins as the unprompted layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpaParams {
    pub kind: LambdaKind,
    pub lambda_vt: Tensor,
    pub lambda_tv: Tensor,
}

impl DpaParams {
    pub fn zeros(kind: LambdaKind, d: usize) -> Self {
        let shape = kind.param_shape(d);
        Self {
            kind,
            lambda_vt: Tensor::zeros(&shape),
            lambda_tv: Tensor::zeros(&shape),
        }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> DpaVars {
        DpaVars {
            kind: self.kind,
            lambda_vt: g.weight(self.lambda_vt.clone(), trainable),
            lambda_tv: g.weight(self.lambda_tv.clone(), trainable),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DpaVars {
    pub kind: LambdaKind,
    pub lambda_vt: Var,
    pub lambda_tv: Var,
}

pub mod tape {
    //! Differentiable implementations on a [`Graph`].

    use super::*;

    pub fn project(g: &mut Graph, src: Var, w: Var) -> Result<Var> {
        g.matmul(src, w)
    }

    /// `softmax(q k^T / sqrt(d_head)) v`, split into `heads` column groups.
    pub fn attend(g: &mut Graph, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let qs = split_heads(g, q, heads)?;
        attend_split(g, &qs, k, v)
    }

    /// Query column groups, one per head; the query itself when single-head.
    pub fn split_heads(g: &mut Graph, q: Var, heads: usize) -> Result<Vec<Var>> {
        let d = g.shape(q)[1];
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(LabError::Config(format!(
                "{heads} heads do not divide d={d}"
            )));
        }
        if heads == 1 {
            return Ok(vec![q]);
        }
        let dh = d / heads;
        (0..heads)
            .map(|h| g.slice_cols(q, h * dh, (h + 1) * dh))
            .collect()
    }

    /// [`attend`] with queries already split by [`split_heads`].
    pub fn attend_split(g: &mut Graph, qs: &[Var], k: Var, v: Var) -> Result<Var> {
        if g.shape(k)[0] == 0 {
            return Err(LabError::EmptyKeys);
        }
        if qs.len() == 1 {
            return attend_head(g, qs[0], k, v);
        }
        let dh = g.shape(qs[0])[1];
        let mut outs = Vec::with_capacity(qs.len());
        for (h, &qh) in qs.iter().enumerate() {
            let kh = g.slice_cols(k, h * dh, (h + 1) * dh)?;
            let vh = g.slice_cols(v, h * dh, (h + 1) * dh)?;
            outs.push(attend_head(g, qh, kh, vh)?);
        }
        g.concat_cols(&outs)
    }

    fn attend_head(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<Var> {
        let dh = g.shape(q)[1];
        let s = g.matmul_nt(q, k)?;
        let s = g.scale(s, 1.0 / (dh as f64).sqrt());
        let p = g.softmax_rows(s)?;
        g.matmul(p, v)
    }

    /// `Attn(kv_src -> q_src)`: queries from `q_src`, keys and values from
    /// `kv_src`.
    pub fn attn(g: &mut Graph, q_src: Var, kv_src: Var, p: &AttnVars, heads: usize) -> Result<Var> {
        if g.shape(kv_src)[0] == 0 {
            return Err(LabError::EmptyKeys);
        }
        let q = project(g, q_src, p.w_q)?;
        let k = project(g, kv_src, p.w_k)?;
        let v = project(g, kv_src, p.w_v)?;
        attend(g, q, k, v, heads)
    }

    /// Residual bidirectional cross-attention; returns `(text, visual)`.
    pub fn x_attn(
        g: &mut Graph,
        f_t: Var,
        f_v: Var,
        p: &XAttnVars,
        heads: usize,
    ) -> Result<(Var, Var)> {
        let upd_t = attn(g, f_t, f_v, &p.v_to_t, heads)?;
        let upd_v = attn(g, f_v, f_t, &p.t_to_v, heads)?;
        Ok((g.add(f_t, upd_t)?, g.add(f_v, upd_v)?))
    }

    /// X-Attn over prompt-prepended sequences. Row `0..l` of each output are
    /// the prompt rows, the rest the feature rows. With `l = 0` this is
    /// exactly [`x_attn`].
    pub fn prompt_attn(
        g: &mut Graph,
        f_t: Var,
        f_v: Var,
        p_t: Var,
        p_v: Var,
        p: &XAttnVars,
        heads: usize,
    ) -> Result<(Var, Var)> {
        let l = g.shape(p_t)[0];
        if g.shape(p_v)[0] != l {
            return Err(LabError::dim("prompt_attn", g.shape(p_t), g.shape(p_v)));
        }
        if l == 0 {
            return x_attn(g, f_t, f_v, p, heads);
        }
        let xt = g.concat_rows(&[p_t, f_t])?;
        let xv = g.concat_rows(&[p_v, f_v])?;
        x_attn(g, xt, xv, p, heads)
    }

    fn effective_lambda(g: &mut Graph, raw: Var, kind: LambdaKind, d: usize) -> Result<Var> {
        match kind {
            LambdaKind::DimLevel => Ok(raw),
            LambdaKind::TaskLevel => g.broadcast_cols(raw, d),
            LambdaKind::Gate => Ok(g.tanh(raw)),
            LambdaKind::Constant => Ok(g.input(Tensor::filled(&[1, d], 1.0))),
        }
    }

    /// One direction of decoupled prompt attention:
    /// `f + Attn(kv_src -> f) + lambda (.) Attn(prompt -> f)`.
    #[allow(clippy::too_many_arguments)]
    fn dpa_direction(
        g: &mut Graph,
        f: Var,
        kv_src: Var,
        prompt: Var,
        p: &AttnVars,
        lambda: Var,
        kind: LambdaKind,
        heads: usize,
    ) -> Result<Var> {
        if g.shape(kv_src)[0] == 0 {
            return Err(LabError::EmptyKeys);
        }
        let q = project(g, f, p.w_q)?;
        let k = project(g, kv_src, p.w_k)?;
        let v = project(g, kv_src, p.w_v)?;
        let qs = split_heads(g, q, heads)?;
        let base = attend_split(g, &qs, k, v)?;
        let out = g.add(f, base)?;
        if g.shape(prompt)[0] == 0 {
            return Ok(out);
        }
        let kp = project(g, prompt, p.w_k)?;
        let vp = project(g, prompt, p.w_v)?;
        let extra = attend_split(g, &qs, kp, vp)?;
        let d = g.shape(f)[1];
        let lam = effective_lambda(g, lambda, kind, d)?;
        let scaled = g.mul_row(extra, lam)?;
        g.add(out, scaled)
    }

    /// Decoupled prompt attention; returns `(text, visual)`. Prompt rows are
    /// only ever keys and values, so no prompt outputs are produced.
    #[allow(clippy::too_many_arguments)]
    pub fn dpa(
        g: &mut Graph,
        f_t: Var,
        f_v: Var,
        p_t: Var,
        p_v: Var,
        p: &XAttnVars,
        lam: &DpaVars,
        heads: usize,
    ) -> Result<(Var, Var)> {
        let out_t = dpa_direction(g, f_t, f_v, p_v, &p.v_to_t, lam.lambda_vt, lam.kind, heads)?;
        let out_v = dpa_direction(g, f_v, f_t, p_t, &p.t_to_v, lam.lambda_tv, lam.kind, heads)?;
        Ok((out_t, out_v))
    }

    /// Self-attention with decoupled prompt keys, used for encoder injection.
    pub fn dpa_self(
        g: &mut Graph,
        f: Var,
        prompt: Var,
        p: &AttnVars,
        lambda: Var,
        kind: LambdaKind,
        heads: usize,
    ) -> Result<Var> {
        dpa_direction(g, f, f, prompt, p, lambda, kind, heads)
    }

    /// Self-attention over `[prompt; f]`; returns all rows.
    pub fn prompt_self_attn(
        g: &mut Graph,
        f: Var,
        prompt: Var,
        p: &AttnVars,
        heads: usize,
    ) -> Result<Var> {
        let x = if g.shape(prompt)[0] == 0 {
            f
        } else {
            g.concat_rows(&[prompt, f])?
        };
        let upd = attn(g, x, x, p, heads)?;
        g.add(x, upd)
    }
}

fn run<T>(f: impl FnOnce(&mut Graph) -> Result<T>) -> Result<T> {
    let mut g = Graph::new();
    f(&mut g)
}

/// Tensor-level [`tape::attn`], single head.
pub fn attn(q_src: &Tensor, kv_src: &Tensor, params: &AttnParams) -> Result<Tensor> {
    check_dim("attn", q_src, params)?;
    check_dim("attn", kv_src, params)?;
    run(|g| {
        let q = g.input(q_src.clone());
        let kv = g.input(kv_src.clone());
        let p = params.bind(g, false);
        let out = tape::attn(g, q, kv, &p, 1)?;
        Ok(g.value(out).clone())
    })
}

fn check_dim(op: &'static str, x: &Tensor, params: &AttnParams) -> Result<()> {
    if x.shape().len() != 2 || x.cols() != params.dim() {
        return Err(LabError::dim(op, x.shape(), params.w_q.shape()));
    }
    Ok(())
}

/// Returns `(f~_t, f~_v)`.
pub fn x_attn(f_t: &Tensor, f_v: &Tensor, params: &XAttnParams) -> Result<(Tensor, Tensor)> {
    run(|g| {
        let t = g.input(f_t.clone());
        let v = g.input(f_v.clone());
        let p = params.bind(g, false);
        let (a, b) = tape::x_attn(g, t, v, &p, 1)?;
        Ok((g.value(a).clone(), g.value(b).clone()))
    })
}

/// Returns `(out_t, out_v)` of shapes `(l + Lt) x d` and `(l + Lv) x d`.
pub fn prompt_attn(
    f_t: &Tensor,
    f_v: &Tensor,
    p_t: &Tensor,
    p_v: &Tensor,
    params: &XAttnParams,
) -> Result<(Tensor, Tensor)> {
    run(|g| {
        let t = g.input(f_t.clone());
        let v = g.input(f_v.clone());
        let pt = g.input(p_t.clone());
        let pv = g.input(p_v.clone());
        let p = params.bind(g, false);
        let (a, b) = tape::prompt_attn(g, t, v, pt, pv, &p, 1)?;
        Ok((g.value(a).clone(), g.value(b).clone()))
    })
}

pub fn dpa(
    f_t: &Tensor,
    f_v: &Tensor,
    p_t: &Tensor,
    p_v: &Tensor,
    params: &XAttnParams,
    dpa_params: &DpaParams,
) -> Result<(Tensor, Tensor)> {
    run(|g| {
        let t = g.input(f_t.clone());
        let v = g.input(f_v.clone());
        let pt = g.input(p_t.clone());
        let pv = g.input(p_v.clone());
        let p = params.bind(g, false);
        let lam = dpa_params.bind(g, false);
        let (a, b) = tape::dpa(g, t, v, pt, pv, &p, &lam, 1)?;
        Ok((g.value(a).clone(), g.value(b).clone()))
    })
}

fn scaled_scores(queries: &Tensor, keys: &Tensor, p: &AttnParams) -> Result<Tensor> {
    let q = tensor::matmul(queries, &p.w_q)?;
    let k = tensor::matmul(keys, &p.w_k)?;
    let s = tensor::matmul_nt(&q, &k)?;
    Ok(tensor::scale(&s, 1.0 / (p.dim() as f64).sqrt()))
}

/// Per text query, the share of (max-shifted) attention weight that falls on
/// the prompt keys when attending over `[p_v; f_v]`. Shape `Lt x 1`.
pub fn lambda_mass(
    f_t: &Tensor,
    f_v: &Tensor,
    p_v: &Tensor,
    params: &AttnParams,
) -> Result<Tensor> {
    let lt = f_t.rows();
    if p_v.rows() == 0 {
        return Tensor::new(vec![lt, 1], vec![0.0; lt]);
    }
    let sf = scaled_scores(f_t, f_v, params)?;
    let sp = scaled_scores(f_t, p_v, params)?;
    let mut out = Vec::with_capacity(lt);
    for i in 0..lt {
        let mx = sf
            .row(i)
            .iter()
            .chain(sp.row(i))
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let mass_p: f64 = sp.row(i).iter().map(|s| (s - mx).exp()).sum();
        let mass_f: f64 = sf.row(i).iter().map(|s| (s - mx).exp()).sum();
        out.push(mass_p / (mass_p + mass_f));
    }
    Tensor::new(vec![lt, 1], out)
}

/// The ratio `lambda / (1 - lambda)` that the prompt branch would carry if
/// the base branch were left unnormalized.
pub fn lambda_ratio(mass: &Tensor) -> Tensor {
    tensor::map(mass, |l| l / (1.0 - l))
}

/// Reconstructs the text feature rows of prompt attention (before the
/// residual) as `(1 - lambda) Attn(f_v -> f_t) + lambda Attn(p_v -> f_t)`.
pub fn decompose_pa(
    f_t: &Tensor,
    f_v: &Tensor,
    _p_t: &Tensor,
    p_v: &Tensor,
    params: &XAttnParams,
) -> Result<Tensor> {
    if p_v.rows() == 0 {
        return Err(LabError::Config(
            "decompose_pa needs at least one prompt row".into(),
        ));
    }
    let p = &params.v_to_t;
    let lam = lambda_mass(f_t, f_v, p_v, p)?;
    let base = attn(f_t, f_v, p)?;
    let prompt = attn(f_t, p_v, p)?;
    let d = base.cols();
    let mut out = Tensor::zeros(base.shape());
    for i in 0..base.rows() {
        let l = lam.data()[i];
        for j in 0..d {
            out.data_mut()[i * d + j] = (1.0 - l) * base.get(i, j) + l * prompt.get(i, j);
        }
    }
    Ok(out)
}

/// Text feature rows of prompt attention before the residual add: rows
/// `l..` of `Attn([p_v; f_v] -> [p_t; f_t])`.
pub fn prompt_attn_feature_update(
    f_t: &Tensor,
    f_v: &Tensor,
    p_t: &Tensor,
    p_v: &Tensor,
    params: &XAttnParams,
) -> Result<Tensor> {
    let l = p_t.rows();
    let (out_t, _) = prompt_attn(f_t, f_v, p_t, p_v, params)?;
    let rows = tensor::slice_rows(&out_t, l, out_t.rows())?;
    tensor::sub(&rows, f_t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand(rows: usize, d: usize, rng: &mut SplitMix64) -> Tensor {
        Tensor::randn(&[rows, d], 1.0, rng)
    }

    /// Explicit double loop over queries and keys.
    fn attn_oracle(q_src: &Tensor, kv_src: &Tensor, p: &AttnParams) -> Tensor {
        let d = p.dim();
        let q = tensor::matmul(q_src, &p.w_q).unwrap();
        let k = tensor::matmul(kv_src, &p.w_k).unwrap();
        let v = tensor::matmul(kv_src, &p.w_v).unwrap();
        let mut out = Tensor::zeros(&[q_src.rows(), d]);
        for i in 0..q.rows() {
            let logits: Vec<f64> = (0..k.rows())
                .map(|j| (0..d).map(|c| q.get(i, c) * k.get(j, c)).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logits.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = w.iter().sum();
            for j in 0..k.rows() {
                for c in 0..d {
                    out.data_mut()[i * d + c] += w[j] / z * v.get(j, c);
                }
            }
        }
        out
    }

    #[test]
    fn attn_single_key_returns_its_value() {
        let mut rng = SplitMix64::new(1);
        let p = AttnParams::init(4, &mut rng);
        let q = rand(3, 4, &mut rng);
        let kv = rand(1, 4, &mut rng);
        let out = attn(&q, &kv, &p).unwrap();
        let v = tensor::matmul(&kv, &p.w_v).unwrap();
        for i in 0..3 {
            for c in 0..4 {
                assert!((out.get(i, c) - v.get(0, c)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn attn_identical_keys_give_common_value() {
        let mut rng = SplitMix64::new(2);
        let p = AttnParams::init(5, &mut rng);
        let row = rand(1, 5, &mut rng);
        let kv = tensor::broadcast_rows(&row, 4).unwrap();
        let out = attn(&rand(3, 5, &mut rng), &kv, &p).unwrap();
        let v = tensor::matmul(&row, &p.w_v).unwrap();
        for i in 0..3 {
            for c in 0..5 {
                assert!((out.get(i, c) - v.get(0, c)).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn attn_matches_loop_oracle() {
        let mut rng = SplitMix64::new(3);
        let p = AttnParams::init(8, &mut rng);
        let q = rand(4, 8, &mut rng);
        let kv = rand(6, 8, &mut rng);
        assert!(
            attn(&q, &kv, &p)
                .unwrap()
                .max_abs_diff(&attn_oracle(&q, &kv, &p))
                < 1e-12
        );
    }

    #[test]
    fn attn_empty_keys_is_error() {
        let mut rng = SplitMix64::new(4);
        let p = AttnParams::init(3, &mut rng);
        let r = attn(&rand(2, 3, &mut rng), &Tensor::zeros(&[0, 3]), &p);
        assert!(matches!(r, Err(LabError::EmptyKeys)));
    }

    #[test]
    fn attn_wrong_width_is_dimension_error() {
        let mut rng = SplitMix64::new(4);
        let p = AttnParams::init(3, &mut rng);
        let r = attn(&rand(2, 4, &mut rng), &rand(2, 4, &mut rng), &p);
        assert!(matches!(r, Err(LabError::Dimension { .. })));
    }

    #[test]
    fn x_attn_zero_values_is_identity() {
        let mut rng = SplitMix64::new(5);
        let mut p = XAttnParams::init(4, &mut rng);
        p.v_to_t.w_v = Tensor::zeros(&[4, 4]);
        p.t_to_v.w_v = Tensor::zeros(&[4, 4]);
        let ft = rand(3, 4, &mut rng);
        let fv = rand(5, 4, &mut rng);
        let (t, v) = x_attn(&ft, &fv, &p).unwrap();
        assert_eq!(t, ft);
        assert_eq!(v, fv);
    }

    #[test]
    fn x_attn_symmetric_inputs() {
        let mut rng = SplitMix64::new(6);
        let a = AttnParams::init(4, &mut rng);
        let p = XAttnParams {
            v_to_t: a.clone(),
            t_to_v: a,
        };
        let f = rand(3, 4, &mut rng);
        let (t, v) = x_attn(&f, &f, &p).unwrap();
        assert!(t.bit_eq(&v));
    }

    #[test]
    fn x_attn_is_two_attn_calls() {
        let mut rng = SplitMix64::new(7);
        let p = XAttnParams::init(6, &mut rng);
        let ft = rand(3, 6, &mut rng);
        let fv = rand(7, 6, &mut rng);
        let (t, v) = x_attn(&ft, &fv, &p).unwrap();
        let t2 = tensor::add(&ft, &attn_oracle(&ft, &fv, &p.v_to_t)).unwrap();
        let v2 = tensor::add(&fv, &attn_oracle(&fv, &ft, &p.t_to_v)).unwrap();
        assert!(t.max_abs_diff(&t2) < 1e-12);
        assert!(v.max_abs_diff(&v2) < 1e-12);
    }

    #[test]
    fn prompt_attn_empty_prompt_is_x_attn() {
        let mut rng = SplitMix64::new(8);
        let p = XAttnParams::init(4, &mut rng);
        let ft = rand(3, 4, &mut rng);
        let fv = rand(5, 4, &mut rng);
        let e = Tensor::zeros(&[0, 4]);
        let (a, b) = prompt_attn(&ft, &fv, &e, &e, &p).unwrap();
        let (c, d) = x_attn(&ft, &fv, &p).unwrap();
        assert!(a.bit_eq(&c) && b.bit_eq(&d));
    }

    #[test]
    fn prompt_attn_duplicated_keys_split_mass() {
        let mut rng = SplitMix64::new(9);
        let p = XAttnParams::init(4, &mut rng);
        let ft = rand(3, 4, &mut rng);
        let fv = rand(5, 4, &mut rng);
        let pt = rand(5, 4, &mut rng);
        let (out_t, _) = prompt_attn(&ft, &fv, &pt, &fv, &p).unwrap();
        let feat = tensor::slice_rows(&out_t, 5, 8).unwrap();
        let (t, _) = x_attn(&ft, &fv, &p).unwrap();
        assert!(feat.max_abs_diff(&t) < 1e-12);
    }

    #[test]
    fn lambda_mass_examples() {
        let mut rng = SplitMix64::new(10);
        let p = AttnParams::init(4, &mut rng);
        let ft = rand(3, 4, &mut rng);
        let fv = rand(5, 4, &mut rng);
        let none = lambda_mass(&ft, &fv, &Tensor::zeros(&[0, 4]), &p).unwrap();
        assert_eq!(none.data(), &[0.0; 3]);
        let half = lambda_mass(&ft, &fv, &fv, &p).unwrap();
        for &x in half.data() {
            assert!((x - 0.5).abs() < 1e-14);
        }
    }

    #[test]
    fn lambda_mass_matches_two_sums() {
        let mut rng = SplitMix64::new(11);
        let p = AttnParams::init(6, &mut rng);
        let ft = rand(4, 6, &mut rng);
        let fv = rand(9, 6, &mut rng);
        let pv = rand(3, 6, &mut rng);
        let got = lambda_mass(&ft, &fv, &pv, &p).unwrap();
        let q = tensor::matmul(&ft, &p.w_q).unwrap();
        let kf = tensor::matmul(&fv, &p.w_k).unwrap();
        let kp = tensor::matmul(&pv, &p.w_k).unwrap();
        let sd = 6f64.sqrt();
        for i in 0..4 {
            let dot =
                |k: &Tensor, j: usize| (0..6).map(|c| q.get(i, c) * k.get(j, c)).sum::<f64>() / sd;
            let num: f64 = (0..3).map(|j| dot(&kp, j).exp()).sum();
            let den: f64 = num + (0..9).map(|j| dot(&kf, j).exp()).sum::<f64>();
            assert!((got.data()[i] - num / den).abs() < 1e-12);
        }
    }

    #[test]
    fn lambda_mass_grows_with_duplicate_prompt_key() {
        let mut rng = SplitMix64::new(12);
        let p = AttnParams::init(4, &mut rng);
        let ft = rand(3, 4, &mut rng);
        let fv = rand(6, 4, &mut rng);
        let pv = rand(2, 4, &mut rng);
        let before = lambda_mass(&ft, &fv, &pv, &p).unwrap();
        let extra = tensor::slice_rows(&pv, 0, 1).unwrap();
        let pv2 = tensor::concat_rows(&[&pv, &extra]).unwrap();
        let after = lambda_mass(&ft, &fv, &pv2, &p).unwrap();
        for i in 0..3 {
            assert!(after.data()[i] > before.data()[i]);
        }
    }

    #[test]
    fn decompose_duplicates_equal_base_attn() {
        let mut rng = SplitMix64::new(13);
        let p = XAttnParams::init(4, &mut rng);
        let ft = rand(3, 4, &mut rng);
        let fv = rand(5, 4, &mut rng);
        let got = decompose_pa(&ft, &fv, &rand(5, 4, &mut rng), &fv, &p).unwrap();
        assert!(got.max_abs_diff(&attn(&ft, &fv, &p.v_to_t).unwrap()) < 1e-13);
    }

    #[test]
    fn decompose_far_prompts_approach_base() {
        let d = 4;
        let p = XAttnParams {
            v_to_t: AttnParams {
                w_q: Tensor::identity(d),
                w_k: Tensor::identity(d),
                w_v: Tensor::identity(d),
            },
            t_to_v: AttnParams {
                w_q: Tensor::identity(d),
                w_k: Tensor::identity(d),
                w_v: Tensor::identity(d),
            },
        };
        let mut rng = SplitMix64::new(14);
        let ft = Tensor::rand_uniform(&[3, d], 0.5, 1.0, &mut rng);
        let fv = rand(5, d, &mut rng);
        let pv = Tensor::filled(&[2, d], -200.0);
        let lam = lambda_mass(&ft, &fv, &pv, &p.v_to_t).unwrap();
        assert!(lam.data().iter().all(|&l| l < 1e-30));
        let got = decompose_pa(&ft, &fv, &pv, &pv, &p).unwrap();
        assert!(got.max_abs_diff(&attn(&ft, &fv, &p.v_to_t).unwrap()) < 1e-12);
    }

    #[test]
    fn decompose_matches_prompt_attn() {
        for seed in 0..20 {
            let mut rng = SplitMix64::new(seed);
            let d = 8;
            let p = XAttnParams::init(d, &mut rng);
            let ft = rand(4, d, &mut rng);
            let fv = rand(12, d, &mut rng);
            let pt = rand(3, d, &mut rng);
            let pv = rand(3, d, &mut rng);
            let a = decompose_pa(&ft, &fv, &pt, &pv, &p).unwrap();
            let b = prompt_attn_feature_update(&ft, &fv, &pt, &pv, &p).unwrap();
            assert!(a.max_abs_diff(&b) < 1e-10);
        }
    }

    #[test]
    fn dpa_zero_lambda_is_bitwise_x_attn() {
        let mut rng = SplitMix64::new(15);
        let p = XAttnParams::init(6, &mut rng);
        let ft = rand(3, 6, &mut rng);
        let fv = rand(7, 6, &mut rng);
        let pt = rand(4, 6, &mut rng);
        let pv = rand(4, 6, &mut rng);
        let (a, b) = dpa(
            &ft,
            &fv,
            &pt,
            &pv,
            &p,
            &DpaParams::zeros(LambdaKind::DimLevel, 6),
        )
        .unwrap();
        let (c, d) = x_attn(&ft, &fv, &p).unwrap();
        assert!(a.bit_eq(&c) && b.bit_eq(&d));
    }

    #[test]
    fn dpa_unit_lambda_duplicate_prompt_doubles_update() {
        let mut rng = SplitMix64::new(16);
        let p = XAttnParams::init(4, &mut rng);
        let ft = rand(3, 4, &mut rng);
        let fv = rand(5, 4, &mut rng);
        let pt = rand(2, 4, &mut rng);
        let lam = DpaParams {
            kind: LambdaKind::DimLevel,
            lambda_vt: Tensor::filled(&[1, 4], 1.0),
            lambda_tv: Tensor::filled(&[1, 4], 1.0),
        };
        let (t, _) = dpa(&ft, &fv, &pt, &fv, &p, &lam).unwrap();
        let upd = attn(&ft, &fv, &p.v_to_t).unwrap();
        let want = tensor::add(&ft, &tensor::scale(&upd, 2.0)).unwrap();
        assert!(t.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn dpa_matches_three_term_oracle() {
        let mut rng = SplitMix64::new(17);
        let d = 6;
        let p = XAttnParams::init(d, &mut rng);
        let ft = rand(3, d, &mut rng);
        let fv = rand(8, d, &mut rng);
        let pt = rand(2, d, &mut rng);
        let pv = rand(2, d, &mut rng);
        let lam = DpaParams {
            kind: LambdaKind::DimLevel,
            lambda_vt: Tensor::randn(&[1, d], 1.0, &mut rng),
            lambda_tv: Tensor::randn(&[1, d], 1.0, &mut rng),
        };
        let (t, v) = dpa(&ft, &fv, &pt, &pv, &p, &lam).unwrap();
        let three = |f: &Tensor, kv: &Tensor, pr: &Tensor, ap: &AttnParams, l: &Tensor| {
            let a = attn_oracle(f, kv, ap);
            let b = attn_oracle(f, pr, ap);
            let mut out = f.clone();
            for i in 0..f.rows() {
                for c in 0..d {
                    out.data_mut()[i * d + c] += a.get(i, c) + l.data()[c] * b.get(i, c);
                }
            }
            out
        };
        assert!(t.max_abs_diff(&three(&ft, &fv, &pv, &p.v_to_t, &lam.lambda_vt)) < 1e-12);
        assert!(v.max_abs_diff(&three(&fv, &ft, &pt, &p.t_to_v, &lam.lambda_tv)) < 1e-12);
    }

    #[test]
    fn multi_head_single_head_agree_when_one() {
        let mut rng = SplitMix64::new(18);
        let p = AttnParams::init(8, &mut rng);
        let q = rand(3, 8, &mut rng);
        let kv = rand(5, 8, &mut rng);
        let mut g = Graph::new();
        let qv = g.input(q.clone());
        let kvv = g.input(kv.clone());
        let pv = p.bind(&mut g, false);
        let two = tape::attn(&mut g, qv, kvv, &pv, 2).unwrap();
        assert_eq!(g.shape(two), &[3, 8]);
        assert!(g.value(two).is_finite());
        assert!(matches!(
            tape::attn(&mut g, qv, kvv, &pv, 3),
            Err(LabError::Config(_))
        ));
    }
}
