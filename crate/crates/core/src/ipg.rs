//! Instance-level prompt generation.
//!
//! Region features of ground-truth objects are pooled from the frozen base
//! into per-layer instance banks. A learnable prompt queries its layer's bank
//! through gated cross-attention:
//!
//! ```text
//! p_dot  = softmax(p (I W_k)^T / sqrt(d)) (I W_v)
//! p_ddot = p + alpha (.) tanh(tau (.) p_dot)
//! ```
//!
//! with `tau` (`l x 1`) broadcast across columns and `alpha` (`1 x d`) down
//! rows. With `alpha = 0` the generated prompt is the initial prompt.

use crate::autograd::{Graph, Var};
use crate::boxes::BBox;
use crate::error::{LabError, Result};
use crate::io;
use crate::model::{Mechanism, PromptSet};
use crate::rng::SplitMix64;
use crate::tensor::{self, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Default enlargement of ground-truth boxes before pooling (`1.3^2`).
pub const DEFAULT_GAMMA: f64 = 1.69;
pub const DEFAULT_BANK_SIZE: usize = 16;
pub const PROMPT_INIT_STD: f64 = 0.02;

/// Mean of the `[H, W, d]` cells overlapping `bbox` scaled by `gamma` about
/// its center and clipped to the map. A box that covers no cell after
/// clipping falls back to the cell nearest its center.
pub fn roi_pool(feature_map: &Tensor, bbox: &BBox, gamma: f64) -> Result<Tensor> {
    let shape = feature_map.shape();
    if shape.len() != 3 {
        return Err(LabError::dim("roi_pool", shape, &[0, 0, 0]));
    }
    if !(gamma > 0.0) {
        return Err(LabError::Config(format!(
            "gamma must be positive, got {gamma}"
        )));
    }
    let (h, w, d) = (shape[0], shape[1], shape[2]);
    let b = bbox.scaled(gamma).clamped();
    let (x0, y0, x1, y1) = b.corners();
    let span = |lo: f64, hi: f64, n: usize| -> Vec<usize> {
        (0..n)
            .filter(|&i| {
                let (a, z) = (i as f64 / n as f64, (i + 1) as f64 / n as f64);
                hi.min(z) - lo.max(a) > 0.0
            })
            .collect()
    };
    let rows = span(y0, y1, h);
    let cols = span(x0, x1, w);
    let mut cells: Vec<(usize, usize)> = rows
        .iter()
        .flat_map(|&r| cols.iter().map(move |&c| (r, c)))
        .collect();
    if cells.is_empty() {
        let r = ((b.cy * h as f64) as usize).min(h - 1);
        let c = ((b.cx * w as f64) as usize).min(w - 1);
        cells.push((r, c));
    }
    let mut acc = vec![0.0; d];
    for &(r, c) in &cells {
        let o = (r * w + c) * d;
        for (a, &x) in acc.iter_mut().zip(&feature_map.data()[o..o + d]) {
            *a += x;
        }
    }
    let n = cells.len() as f64;
    Ok(Tensor::row_vector(acc.into_iter().map(|a| a / n).collect()))
}

/// Pooled instance features of one task at one injection layer.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceBank {
    pub task_id: usize,
    pub layer_id: usize,
    /// Global class id to its `M` vectors of length `d`.
    pub per_class: BTreeMap<usize, Vec<Vec<f64>>>,
}

impl InstanceBank {
    /// All vectors stacked class by class: `(|C| M) x d`.
    pub fn flatten(&self) -> Result<Tensor> {
        let rows: Vec<Vec<f64>> = self.per_class.values().flatten().cloned().collect();
        if rows.is_empty() {
            return Err(LabError::EmptyBank);
        }
        Tensor::from_rows(&rows)
    }

    pub fn len(&self) -> usize {
        self.per_class.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn class_mean(&self, class_id: usize) -> Option<Vec<f64>> {
        let vs = self.per_class.get(&class_id)?;
        let d = vs.first()?.len();
        let mut m = vec![0.0; d];
        for v in vs {
            for (a, x) in m.iter_mut().zip(v) {
                *a += x / vs.len() as f64;
            }
        }
        Some(m)
    }
}

/// One image's view for bank construction: the feature maps entering each
/// layer (`[H, W, d]`) and its boxes.
pub struct BankSource<'a> {
    pub layer_maps: Vec<Tensor>,
    pub annotations: &'a [crate::synth::Annotation],
}

/// Builds one bank per layer. For each class every ground-truth box is
/// pooled; `m` of them are then drawn without replacement when there are
/// enough, otherwise all are kept and the rest drawn with replacement.
pub fn build_instance_banks(
    task_id: usize,
    sources: &[BankSource<'_>],
    class_ids: &[usize],
    m: usize,
    gamma: f64,
    seed: u64,
) -> Result<Vec<InstanceBank>> {
    if m == 0 {
        return Err(LabError::Config("bank size M must be positive".into()));
    }
    let n_layers = sources.first().map_or(0, |s| s.layer_maps.len());
    let mut banks = Vec::with_capacity(n_layers);
    for layer in 0..n_layers {
        let mut per_class = BTreeMap::new();
        for &c in class_ids {
            let mut pooled = Vec::new();
            for s in sources {
                for a in s.annotations.iter().filter(|a| a.class_id == c) {
                    pooled.push(roi_pool(&s.layer_maps[layer], &a.bbox, gamma)?.into_data());
                }
            }
            if pooled.is_empty() {
                return Err(LabError::Config(format!(
                    "category {} ({}) has no boxes for the instance bank",
                    c,
                    crate::synth::class_name(c)
                )));
            }
            let mut rng = SplitMix64::derive(
                seed,
                ((task_id as u64) << 32) ^ ((layer as u64) << 16) ^ c as u64,
            );
            let mut idx: Vec<usize> = (0..pooled.len()).collect();
            rng.shuffle(&mut idx);
            let mut chosen: Vec<Vec<f64>> =
                idx.iter().take(m).map(|&i| pooled[i].clone()).collect();
            while chosen.len() < m {
                chosen.push(pooled[rng.below(pooled.len())].clone());
            }
            per_class.insert(c, chosen);
        }
        banks.push(InstanceBank {
            task_id,
            layer_id: layer,
            per_class,
        });
    }
    Ok(banks)
}

/// Gated cross-attention parameters of one prompt side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CcpkiParams {
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub tau: Tensor,
    pub alpha: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct CcpkiVars {
    pub w_k: Var,
    pub w_v: Var,
    pub tau: Var,
    pub alpha: Var,
}

impl CcpkiParams {
    /// `W ~ N(0, 1/d)`, `tau = 1`, `alpha = 0`.
    pub fn init(l: usize, d: usize, rng: &mut SplitMix64) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        Self {
            w_k: Tensor::randn(&[d, d], std, rng),
            w_v: Tensor::randn(&[d, d], std, rng),
            tau: Tensor::filled(&[l, 1], 1.0),
            alpha: Tensor::zeros(&[1, d]),
        }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> CcpkiVars {
        CcpkiVars {
            w_k: g.weight(self.w_k.clone(), trainable),
            w_v: g.weight(self.w_v.clone(), trainable),
            tau: g.weight(self.tau.clone(), trainable),
            alpha: g.weight(self.alpha.clone(), trainable),
        }
    }

    pub fn tensors(&self) -> [&Tensor; 4] {
        [&self.w_k, &self.w_v, &self.tau, &self.alpha]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w_k, &mut self.w_v, &mut self.tau, &mut self.alpha]
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

pub fn ccpki_generate_g(g: &mut Graph, p_init: Var, bank: Var, c: &CcpkiVars) -> Result<Var> {
    if g.shape(bank)[0] == 0 {
        return Err(LabError::EmptyBank);
    }
    let d = g.shape(p_init)[1] as f64;
    let keys = g.matmul(bank, c.w_k)?;
    let vals = g.matmul(bank, c.w_v)?;
    let s = g.matmul_nt(p_init, keys)?;
    let s = g.scale(s, 1.0 / d.sqrt());
    let a = g.softmax_rows(s)?;
    let p_dot = g.matmul(a, vals)?;
    let z = g.mul_col(p_dot, c.tau)?;
    let z = g.tanh(z);
    let z = g.mul_row(z, c.alpha)?;
    g.add(p_init, z)
}

pub fn ccpki_generate(
    p_init: &Tensor,
    bank: &InstanceBank,
    params: &CcpkiParams,
) -> Result<Tensor> {
    let flat = bank.flatten()?;
    let mut g = Graph::new();
    let p = g.input(p_init.clone());
    let b = g.input(flat);
    let c = params.bind(&mut g, false);
    let out = ccpki_generate_g(&mut g, p, b, &c)?;
    Ok(g.value(out).clone())
}

/// Carries CCPKI parameters into the next task, or starts afresh when
/// transfer is disabled.
pub fn transfer_weights(prev: &CcpkiParams, enabled: bool, rng: &mut SplitMix64) -> CcpkiParams {
    if enabled {
        prev.clone()
    } else {
        CcpkiParams::init(prev.tau.rows(), prev.w_k.rows(), rng)
    }
}

/// Frozen prompts and routing key of one finished task.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolEntry {
    pub task_id: usize,
    pub class_ids: Vec<usize>,
    pub class_names: Vec<String>,
    /// Unit-norm routing centroid, `1 x d`.
    pub key: Tensor,
    pub prompts: PromptSet,
}

impl PoolEntry {
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update((self.task_id as u64).to_le_bytes());
        for t in std::iter::once(&self.key)
            .chain(self.prompts.named_tensors().into_iter().map(|(_, t)| t))
        {
            for &x in t.data() {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Append-only store of finished tasks.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PromptPool {
    entries: Vec<PoolEntry>,
}

impl PromptPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, e: PoolEntry) {
        self.entries.push(e);
    }

    pub fn entries(&self) -> &[PoolEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<&PoolEntry> {
        self.entries.get(i)
    }
}

/// Index of the pool entry whose key has the highest cosine similarity with
/// `query`; ties go to the earliest entry.
pub fn route_task(query: &[f64], pool: &PromptPool) -> Result<usize> {
    if pool.is_empty() {
        return Err(LabError::Routing("prompt pool is empty".into()));
    }
    let norm = query.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(LabError::Routing(format!("query norm is {norm}")));
    }
    let mut best = 0;
    let mut best_sim = f64::NEG_INFINITY;
    for (i, e) in pool.entries().iter().enumerate() {
        let sim = tensor::cosine(query, e.key.data());
        if sim > best_sim {
            best = i;
            best_sim = sim;
        }
    }
    Ok(best)
}

/// Mean of unit-normalized query features, renormalized. Fails when the
/// mean nearly cancels.
pub fn learn_centroid(features: &[Vec<f64>]) -> Result<Tensor> {
    let first = features
        .first()
        .ok_or_else(|| LabError::Config("centroid needs at least one image".into()))?;
    let d = first.len();
    let mut mean = vec![0.0; d];
    for f in features {
        let n = f.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 {
            return Err(LabError::Numeric("zero query feature".into()));
        }
        for (m, x) in mean.iter_mut().zip(f) {
            *m += x / n / features.len() as f64;
        }
    }
    let n = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n < 1e-6 {
        return Err(LabError::Numeric(format!(
            "degenerate centroid, norm {n:.3e}"
        )));
    }
    Ok(Tensor::row_vector(
        mean.into_iter().map(|x| x / n).collect(),
    ))
}

pub const POOL_FORMAT: &str = "dpa-lab-pool/1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PoolManifest {
    format: String,
    gamma: f64,
    bank_size: usize,
    prompt_len: usize,
    task_order: Vec<usize>,
    entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestEntry {
    task_id: usize,
    class_ids: Vec<usize>,
    class_names: Vec<String>,
    centroid: Vec<f64>,
    mechanism: Mechanism,
    lambda_kind: crate::attention::LambdaKind,
    files: Vec<(String, String)>,
}

/// Hyperparameters recorded next to a persisted pool.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoolMeta {
    pub gamma: f64,
    pub bank_size: usize,
    pub prompt_len: usize,
}

/// Writes one tensor file per (task, layer, side) and `manifest.json`.
pub fn save_pool(dir: &Path, pool: &PromptPool, meta: PoolMeta) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for e in pool.entries() {
        let sub = format!("task_{:02}", e.task_id);
        std::fs::create_dir_all(dir.join(&sub))?;
        let mut files = Vec::new();
        for (name, t) in e.prompts.named_tensors() {
            let rel = format!("{sub}/{name}.bin");
            io::write_tensor(&dir.join(&rel), t)?;
            files.push((name, rel));
        }
        entries.push(ManifestEntry {
            task_id: e.task_id,
            class_ids: e.class_ids.clone(),
            class_names: e.class_names.clone(),
            centroid: e.key.data().to_vec(),
            mechanism: e.prompts.mechanism,
            lambda_kind: e.prompts.lambda_kind,
            files,
        });
    }
    let manifest = PoolManifest {
        format: POOL_FORMAT.into(),
        gamma: meta.gamma,
        bank_size: meta.bank_size,
        prompt_len: meta.prompt_len,
        task_order: pool.entries().iter().map(|e| e.task_id).collect(),
        entries,
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

pub fn load_pool(dir: &Path) -> Result<(PromptPool, PoolMeta)> {
    let m: PoolManifest = serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
    if m.format != POOL_FORMAT {
        return Err(LabError::Format(format!(
            "unknown pool format {}",
            m.format
        )));
    }
    let mut pool = PromptPool::new();
    for e in m.entries {
        let mut loaded: BTreeMap<String, Tensor> = BTreeMap::new();
        for (name, rel) in &e.files {
            loaded.insert(name.clone(), io::read_tensor(&dir.join(rel))?);
        }
        let mut take = |name: String| -> Option<Tensor> { loaded.remove(&name) };
        let mut prompts = PromptSet {
            mechanism: e.mechanism,
            lambda_kind: e.lambda_kind,
            fusion_v: Vec::new(),
            fusion_t: Vec::new(),
            fusion_lambda: Vec::new(),
            visual: Vec::new(),
            visual_lambda: Vec::new(),
            text: Vec::new(),
            text_lambda: Vec::new(),
        };
        for i in 0.. {
            match (
                take(format!("fusion.{i}.p_v")),
                take(format!("fusion.{i}.p_t")),
            ) {
                (Some(v), Some(t)) => {
                    prompts.fusion_v.push(v);
                    prompts.fusion_t.push(t);
                }
                _ => break,
            }
        }
        for i in 0.. {
            match (
                take(format!("fusion.{i}.lambda_vt")),
                take(format!("fusion.{i}.lambda_tv")),
            ) {
                (Some(vt), Some(tv)) => prompts.fusion_lambda.push(crate::attention::DpaParams {
                    kind: e.lambda_kind,
                    lambda_vt: vt,
                    lambda_tv: tv,
                }),
                _ => break,
            }
        }
        let mut seq = |prefix: &str, suffix: &str, out: &mut Vec<Tensor>| {
            for i in 0.. {
                match take(format!("{prefix}.{i}.{suffix}")) {
                    Some(t) => out.push(t),
                    None => break,
                }
            }
        };
        seq("visual", "p", &mut prompts.visual);
        seq("visual", "lambda", &mut prompts.visual_lambda);
        seq("text", "p", &mut prompts.text);
        seq("text", "lambda", &mut prompts.text_lambda);
        if !loaded.is_empty() {
            return Err(LabError::Format(format!(
                "unrecognized pool tensors {:?}",
                loaded.keys()
            )));
        }
        pool.push(PoolEntry {
            task_id: e.task_id,
            class_ids: e.class_ids,
            class_names: e.class_names,
            key: Tensor::row_vector(e.centroid),
            prompts,
        });
    }
    Ok((
        pool,
        PoolMeta {
            gamma: m.gamma,
            bank_size: m.bank_size,
            prompt_len: m.prompt_len,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ToyVlodConfig;
    use crate::synth::Annotation;

    fn map(h: usize, w: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = SplitMix64::new(seed);
        Tensor::randn(&[h, w, d], 1.0, &mut rng)
    }

    fn cell(m: &Tensor, r: usize, c: usize) -> Vec<f64> {
        let (w, d) = (m.shape()[1], m.shape()[2]);
        m.data()[(r * w + c) * d..(r * w + c + 1) * d].to_vec()
    }

    #[test]
    fn whole_map_is_global_mean() {
        let m = map(4, 4, 3, 0);
        let out = roi_pool(&m, &BBox::new(0.5, 0.5, 1.0, 1.0), 1.0).unwrap();
        for k in 0..3 {
            let mean: f64 = (0..16).map(|i| m.data()[i * 3 + k]).sum::<f64>() / 16.0;
            assert!((out.data()[k] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn box_inside_one_cell() {
        let m = map(4, 4, 3, 1);
        let out = roi_pool(&m, &BBox::new(0.6, 0.4, 0.05, 0.05), 1.0).unwrap();
        assert_eq!(out.data(), cell(&m, 1, 2).as_slice());
    }

    #[test]
    fn corner_box_with_gamma() {
        // 0.3 x 0.3 box at the top-left corner grows to 0.507 about its
        // center (0.15, 0.15): corners (-0.1035, 0.4035), clipped to
        // (0, 0.4035), which touches rows/cols 0 and 1 of a 4 x 4 map.
        let m = map(4, 4, 2, 2);
        let out = roi_pool(&m, &BBox::new(0.15, 0.15, 0.3, 0.3), 1.69).unwrap();
        let cells = [(0, 0), (0, 1), (1, 0), (1, 1)];
        for k in 0..2 {
            let mean: f64 = cells.iter().map(|&(r, c)| cell(&m, r, c)[k]).sum::<f64>() / 4.0;
            assert!((out.data()[k] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_box_snaps_to_nearest_cell() {
        let m = map(4, 4, 2, 3);
        let out = roi_pool(&m, &BBox::new(0.9, 0.1, 0.0, 0.0), 1.0).unwrap();
        assert_eq!(out.data(), cell(&m, 0, 3).as_slice());
    }

    #[test]
    fn gate_off_is_identity() {
        let mut rng = SplitMix64::new(4);
        let p = Tensor::randn(&[5, 8], 1.0, &mut rng);
        let bank = InstanceBank {
            task_id: 0,
            layer_id: 0,
            per_class: [(
                0,
                (0..6)
                    .map(|_| Tensor::randn(&[8], 1.0, &mut rng).into_data())
                    .collect(),
            )]
            .into(),
        };
        let c = CcpkiParams::init(5, 8, &mut rng);
        assert_eq!(ccpki_generate(&p, &bank, &c).unwrap(), p);
    }

    #[test]
    fn single_key_rows_equal_projected_value() {
        let mut rng = SplitMix64::new(5);
        let d = 4;
        let p = Tensor::randn(&[3, d], 1.0, &mut rng);
        let v = Tensor::randn(&[1, d], 1.0, &mut rng);
        let bank = InstanceBank {
            task_id: 0,
            layer_id: 0,
            per_class: [(0, vec![v.data().to_vec()])].into(),
        };
        let mut c = CcpkiParams::init(3, d, &mut rng);
        c.alpha = Tensor::filled(&[1, d], 1.0);
        let out = ccpki_generate(&p, &bank, &c).unwrap();
        let wv = tensor::matmul(&v, &c.w_v).unwrap();
        for i in 0..3 {
            for j in 0..d {
                let expect = p.get(i, j) + (wv.get(0, j)).tanh();
                assert!((out.get(i, j) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_bank_is_error() {
        let bank = InstanceBank {
            task_id: 0,
            layer_id: 0,
            per_class: BTreeMap::new(),
        };
        let c = CcpkiParams::init(2, 2, &mut SplitMix64::new(0));
        assert!(matches!(
            ccpki_generate(&Tensor::zeros(&[2, 2]), &bank, &c),
            Err(LabError::EmptyBank)
        ));
    }

    #[test]
    fn transfer_copies_or_reinitializes() {
        let mut rng = SplitMix64::new(6);
        let mut prev = CcpkiParams::init(3, 4, &mut rng);
        prev.alpha = Tensor::filled(&[1, 4], 0.7);
        assert_eq!(transfer_weights(&prev, true, &mut rng), prev);
        let fresh = transfer_weights(&prev, false, &mut rng);
        assert!(fresh.alpha.data().iter().all(|&a| a == 0.0));
        assert!(fresh.tau.data().iter().all(|&t| t == 1.0));
        assert_eq!(fresh.w_k.shape(), &[4, 4]);
    }

    fn entry(task_id: usize, key: Vec<f64>) -> PoolEntry {
        let config = ToyVlodConfig {
            d: key.len(),
            n_fusion_layers: 1,
            prompt_len: 2,
            ..Default::default()
        };
        PoolEntry {
            task_id,
            class_ids: vec![task_id],
            class_names: vec![crate::synth::class_name(task_id).to_string()],
            key: Tensor::row_vector(key),
            prompts: PromptSet::init(
                &config,
                Mechanism::Dpa,
                0.02,
                &mut SplitMix64::new(task_id as u64),
            ),
        }
    }

    #[test]
    fn routing_basics() {
        let mut pool = PromptPool::new();
        assert!(matches!(
            route_task(&[1.0, 0.0], &pool),
            Err(LabError::Routing(_))
        ));
        pool.push(entry(0, vec![1.0, 0.0, 0.0]));
        assert_eq!(route_task(&[0.0, 1.0, 0.0], &pool).unwrap(), 0);
        pool.push(entry(1, vec![0.0, 1.0, 0.0]));
        pool.push(entry(2, vec![0.0, 0.0, 1.0]));
        assert_eq!(route_task(&[0.0, 2.0, 0.0], &pool).unwrap(), 1);
        assert!(matches!(
            route_task(&[0.0; 3], &pool),
            Err(LabError::Routing(_))
        ));
        pool.push(entry(3, vec![0.0, 1.0, 0.0]));
        assert_eq!(route_task(&[0.0, 1.0, 0.0], &pool).unwrap(), 1);
    }

    #[test]
    fn centroid_cases() {
        let c = learn_centroid(&[vec![3.0, 4.0]]).unwrap();
        assert!((c.data()[0] - 0.6).abs() < 1e-15 && (c.data()[1] - 0.8).abs() < 1e-15);
        assert!(learn_centroid(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).is_err());
    }

    #[test]
    fn bank_single_box_and_sizes() {
        let m = map(2, 2, 3, 7);
        let anns = [Annotation {
            bbox: BBox::new(0.25, 0.25, 0.1, 0.1),
            class_id: 4,
        }];
        let src = [BankSource {
            layer_maps: vec![m.clone()],
            annotations: &anns,
        }];
        let banks = build_instance_banks(0, &src, &[4], 1, 1.0, 0).unwrap();
        assert_eq!(banks[0].per_class[&4], vec![cell(&m, 0, 0)]);
        let banks = build_instance_banks(0, &src, &[4], 4, 1.0, 0).unwrap();
        assert_eq!(banks[0].per_class[&4].len(), 4);
        assert!(matches!(
            build_instance_banks(0, &src, &[4, 5], 4, 1.0, 0),
            Err(LabError::Config(_))
        ));
    }

    #[test]
    fn pool_roundtrip() {
        let mut pool = PromptPool::new();
        pool.push(entry(0, vec![1.0, 0.0, 0.0, 0.0]));
        pool.push(entry(2, vec![0.0, 1.0, 0.0, 0.0]));
        let dir = tempfile::tempdir().unwrap();
        let meta = PoolMeta {
            gamma: DEFAULT_GAMMA,
            bank_size: 16,
            prompt_len: 2,
        };
        save_pool(dir.path(), &pool, meta).unwrap();
        let (back, m) = load_pool(dir.path()).unwrap();
        assert_eq!(back, pool);
        assert_eq!(m, meta);
    }
}
