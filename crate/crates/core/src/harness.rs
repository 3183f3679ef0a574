//! Continual-learning runs: base pretraining, sequential task training,
//! routed evaluation and reporting.

use crate::attention::DpaVars;
use crate::autograd::{Graph, Var};
use crate::boxes::Detection;
use crate::costing::{self, CostModel, FlopReport, LayerShape};
use crate::error::{LabError, Result};
use crate::ipg::{self, BankSource, CcpkiParams, CcpkiVars, PoolEntry, PromptPool};
use crate::metrics::{self, ApMatrix};
use crate::model::{
    self, forward, BaseModel, FusionPromptVars, Mechanism, PromptSet, PromptVars, StreamPromptVars,
    ToyVlodConfig,
};
use crate::optim::{AdamW, AdamWConfig, StepSchedule};
use crate::rng::SplitMix64;
use crate::synth::{self, Sample, Shot, TaskDataset, PRETASK_NAMES};
use crate::tensor::{self, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    ZeroShot,
    SequentialFt,
    Joint,
    NaivePa,
    Idpa,
    IdpaNoTransfer,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::ZeroShot,
        Method::SequentialFt,
        Method::Joint,
        Method::NaivePa,
        Method::Idpa,
        Method::IdpaNoTransfer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::ZeroShot => "zero-shot",
            Method::SequentialFt => "sequential-ft",
            Method::Joint => "joint",
            Method::NaivePa => "naive-pa",
            Method::Idpa => "idpa",
            Method::IdpaNoTransfer => "idpa-no-transfer",
        }
    }

    /// Prompt mechanism for prompt-pool methods.
    pub fn prompt_mechanism(self) -> Option<Mechanism> {
        match self {
            Method::NaivePa => Some(Mechanism::Pa),
            Method::Idpa | Method::IdpaNoTransfer => Some(Mechanism::Dpa),
            _ => None,
        }
    }

    pub fn uses_ipg(self) -> bool {
        matches!(self, Method::Idpa | Method::IdpaNoTransfer)
    }

    pub fn fine_tunes(self) -> bool {
        matches!(self, Method::SequentialFt | Method::Joint)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| LabError::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub decay_at: usize,
    pub decay_factor: f64,
    /// Images whose gradients are averaged into one optimizer step.
    pub images_per_step: usize,
    pub lr_prompt: f64,
    pub lr_finetune: f64,
    /// Learning rate of the class-name embedding table when fine-tuning;
    /// every other base tensor uses `lr_finetune`.
    pub lr_class_embed: f64,
    pub adamw: AdamWConfig,
    pub bank_size: usize,
    pub gamma: f64,
    pub shot: Shot,
    pub prompt_init_std: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 60,
            decay_at: 36,
            decay_factor: 0.1,
            images_per_step: 4,
            lr_prompt: 0.2,
            lr_finetune: 2.5e-4,
            lr_class_embed: 0.1,
            adamw: AdamWConfig::default(),
            bank_size: ipg::DEFAULT_BANK_SIZE,
            gamma: ipg::DEFAULT_GAMMA,
            shot: Shot::Full,
            prompt_init_std: ipg::PROMPT_INIT_STD,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(LabError::Config(m.to_string()));
        if self.images_per_step == 0 {
            return bad("images_per_step must be positive");
        }
        if !(self.lr_prompt > 0.0 && self.lr_finetune > 0.0 && self.lr_class_embed > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.bank_size == 0 || !(self.gamma > 0.0) {
            return bad("bank_size and gamma must be positive");
        }
        if !(self.prompt_init_std >= 0.0) {
            return bad("prompt_init_std must be non-negative");
        }
        Ok(())
    }

    /// Same schedule with the step budget scaled by `f`.
    pub fn scaled_budget(&self, f: f64) -> Self {
        Self {
            steps: ((self.steps as f64) * f).round() as usize,
            decay_at: ((self.decay_at as f64) * f).round() as usize,
            ..self.clone()
        }
    }

    fn schedule(&self, lr: f64, scale: usize) -> StepSchedule {
        StepSchedule {
            lr,
            decay_at: self.decay_at * scale,
            factor: self.decay_factor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub images: usize,
    pub steps: usize,
    pub images_per_step: usize,
    pub lr: f64,
    pub decay_at: usize,
    pub decay_factor: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            images: 256,
            steps: 600,
            images_per_step: 4,
            lr: 1e-3,
            decay_at: 450,
            decay_factor: 0.1,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.images == 0 || self.images_per_step == 0 || !(self.lr > 0.0) {
            return Err(LabError::Config(
                "pretraining needs images, a batch and a positive lr".into(),
            ));
        }
        Ok(())
    }
}

/// `key=value` progress records.
pub type Progress<'a> = Option<&'a (dyn Fn(&str) + Sync)>;

fn emit(p: Progress<'_>, line: impl FnOnce() -> String) {
    if let Some(f) = p {
        f(&line());
    }
}

fn as_divergence(e: LabError, seed: u64, step: usize) -> LabError {
    match e {
        LabError::Numeric(reason) => LabError::Divergence { seed, step, reason },
        e => e,
    }
}

fn check_loss(loss: f64, seed: u64, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(LabError::Divergence {
            seed,
            step,
            reason: format!("loss is {loss}"),
        })
    }
}

/// Mean loss and mean gradients over `batch`. `build` returns the loss and
/// the trainable handles in optimizer order.
fn batch_grads<T: Sync>(
    batch: &[T],
    n_params: usize,
    build: impl Fn(&mut Graph, &T) -> Result<(Var, Vec<Var>)> + Sync,
) -> Result<(f64, Vec<Tensor>)> {
    let parts: Vec<(f64, Vec<Tensor>)> = batch
        .iter()
        .map(|item| {
            let mut g = Graph::new();
            let (loss, vars) = build(&mut g, item)?;
            debug_assert_eq!(vars.len(), n_params);
            let l = g.value(loss).data()[0];
            g.backward(loss)?;
            Ok((l, vars.iter().map(|&v| g.grad_or_zero(v)).collect()))
        })
        .collect::<Result<_>>()?;
    let k = batch.len() as f64;
    let mut loss = 0.0;
    let mut grads: Option<Vec<Tensor>> = None;
    for (l, gs) in parts {
        loss += l / k;
        match &mut grads {
            None => grads = Some(gs.into_iter().map(|t| tensor::scale(&t, 1.0 / k)).collect()),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(gs) {
                    for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                        *x += y / k;
                    }
                }
            }
        }
    }
    Ok((loss, grads.unwrap_or_default()))
}

/// Cycles through a reshuffled index order, one batch at a time.
struct Sampler {
    order: Vec<usize>,
    pos: usize,
    rng: SplitMix64,
}

impl Sampler {
    fn new(n: usize, rng: SplitMix64) -> Self {
        let mut s = Self {
            order: (0..n).collect(),
            pos: n,
            rng,
        };
        s.pos = s.order.len();
        s
    }

    fn batch(&mut self, k: usize) -> Vec<usize> {
        (0..k)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.rng.shuffle(&mut self.order);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

fn names(ids: &[usize]) -> Vec<String> {
    ids.iter()
        .map(|&c| synth::class_name(c).to_string())
        .collect()
}

/// Trains a base detector on the held-out pretask. Returns the model and
/// its per-step loss.
pub fn pretrain_base(
    config: &ToyVlodConfig,
    pc: &PretrainConfig,
    progress: Progress<'_>,
) -> Result<(BaseModel, Vec<f64>)> {
    pc.validate()?;
    let mut base = BaseModel::init(config.clone(), pc.seed)?;
    let data = synth::generate_pretask(pc.images, config.image_size, pc.seed);
    let class_ids: Vec<usize> = (0..PRETASK_NAMES.len()).collect();
    let vocab = base.vocab_ids(&PRETASK_NAMES.map(String::from))?;
    let targets: Vec<model::Targets> = data
        .iter()
        .map(|s| model::assign(&s.annotations, &class_ids, config.grid()))
        .collect::<Result<_>>()?;
    let sched = StepSchedule {
        lr: pc.lr,
        decay_at: pc.decay_at,
        factor: pc.decay_factor,
    };
    let mut opt = AdamW::for_params(AdamWConfig::default(), &base.tensors_mut());
    let mut sampler = Sampler::new(data.len(), SplitMix64::derive(pc.seed, 0x9E7B));
    let n_params = base.named_tensors().len();
    let mut losses = Vec::with_capacity(pc.steps);
    for step in 0..pc.steps {
        let idx = sampler.batch(pc.images_per_step);
        let (loss, grads) = batch_grads(&idx, n_params, |g, &i| {
            let b = base.bind(g, true);
            let (logits, raw) = forward::detect(
                g,
                &b,
                config,
                &data[i].image,
                &vocab,
                &PromptVars::default(),
            )?;
            Ok((
                model::detection_loss_weighted(g, logits, raw, &targets[i], config.cls_pos_weight)?,
                b.vars(),
            ))
        })
        .map_err(|e| as_divergence(e, pc.seed, step))?;
        check_loss(loss, pc.seed, step)?;
        opt.step(&mut base.tensors_mut(), &grads, sched.lr_at(step))?;
        emit(progress, || {
            format!("phase=pretrain step={step} loss={loss:.6}")
        });
        losses.push(loss);
    }
    Ok((base, losses))
}

/// Flattened instance banks a task's prompt generators read from.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskBanks {
    /// One `K x d` bank per fusion layer.
    pub fusion: Vec<Tensor>,
    /// One per visual encoder layer; empty without visual injection.
    pub visual: Vec<Tensor>,
}

fn grid_map(tokens: Tensor, grid: usize) -> Result<Tensor> {
    let d = tokens.cols();
    tokens.reshape(&[grid, grid, d])
}

/// Pools ground-truth regions from the frozen base into per-layer banks.
pub fn build_task_banks(
    base: &BaseModel,
    task: &TaskDataset,
    samples: &[Sample],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TaskBanks> {
    let c = &base.config;
    let f_t = model::encode_text(base, &task.class_names)?;
    let grid = c.grid();
    let mut fusion_sources = Vec::with_capacity(samples.len());
    let mut visual_sources = Vec::new();
    for s in samples {
        let f_v = model::encode_image(base, &s.image)?;
        let maps = model::fusion_layer_inputs(base, &f_v, &f_t)?
            .into_iter()
            .map(|t| grid_map(t, grid))
            .collect::<Result<_>>()?;
        fusion_sources.push(BankSource {
            layer_maps: maps,
            annotations: &s.annotations,
        });
        if c.inject_visual {
            let maps = model::visual_layer_inputs(base, &s.image)?
                .into_iter()
                .map(|t| grid_map(t, grid))
                .collect::<Result<_>>()?;
            visual_sources.push(BankSource {
                layer_maps: maps,
                annotations: &s.annotations,
            });
        }
    }
    let flatten = |banks: Vec<ipg::InstanceBank>| -> Result<Vec<Tensor>> {
        banks.iter().map(|b| b.flatten()).collect()
    };
    let fusion = flatten(ipg::build_instance_banks(
        task.task_id,
        &fusion_sources,
        &task.class_ids,
        cfg.bank_size,
        cfg.gamma,
        seed,
    )?)?;
    let visual = if visual_sources.is_empty() {
        Vec::new()
    } else {
        flatten(ipg::build_instance_banks(
            task.task_id,
            &visual_sources,
            &task.class_ids,
            cfg.bank_size,
            cfg.gamma,
            seed ^ 0x5151,
        )?)?
    };
    Ok(TaskBanks { fusion, visual })
}

/// Trainable state of one prompt task: raw prompts (initial prompts under
/// IPG), scales, and one CCPKI block per side.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptState {
    pub set: PromptSet,
    /// `(vision side, text side)`.
    pub ccpki: Option<(CcpkiParams, CcpkiParams)>,
}

impl PromptState {
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.set.tensors_mut();
        if let Some((v, t)) = &mut self.ccpki {
            out.extend(v.tensors_mut());
            out.extend(t.tensors_mut());
        }
        out
    }

    pub fn trainable_count(&self) -> usize {
        self.set.trainable_count()
            + self
                .ccpki
                .as_ref()
                .map_or(0, |(v, t)| v.param_count() + t.param_count())
    }

    /// Binds every tensor (in [`PromptState::tensors_mut`] order) and
    /// assembles prompt handles, generating prompts from `banks` under IPG.
    pub fn bind(
        &self,
        g: &mut Graph,
        banks: Option<&TaskBanks>,
        trainable: bool,
    ) -> Result<(PromptVars, Vec<Var>)> {
        let s = &self.set;
        let mut all = Vec::new();
        let mut w = |g: &mut Graph, t: &Tensor| {
            let v = g.weight(t.clone(), trainable);
            all.push(v);
            v
        };
        let mut fv = Vec::new();
        let mut ft = Vec::new();
        for (v, t) in s.fusion_v.iter().zip(&s.fusion_t) {
            fv.push(w(g, v));
            ft.push(w(g, t));
        }
        let lambdas: Vec<DpaVars> = s
            .fusion_lambda
            .iter()
            .map(|l| DpaVars {
                kind: l.kind,
                lambda_vt: w(g, &l.lambda_vt),
                lambda_tv: w(g, &l.lambda_tv),
            })
            .collect();
        let vis: Vec<Var> = s.visual.iter().map(|t| w(g, t)).collect();
        let vis_lam: Vec<Var> = s.visual_lambda.iter().map(|t| w(g, t)).collect();
        let txt: Vec<Var> = s.text.iter().map(|t| w(g, t)).collect();
        let txt_lam: Vec<Var> = s.text_lambda.iter().map(|t| w(g, t)).collect();
        let cc: Option<(CcpkiVars, CcpkiVars)> = self.ccpki.as_ref().map(|(v, t)| {
            let bind =
                |g: &mut Graph, p: &CcpkiParams, w: &mut dyn FnMut(&mut Graph, &Tensor) -> Var| {
                    CcpkiVars {
                        w_k: w(g, &p.w_k),
                        w_v: w(g, &p.w_v),
                        tau: w(g, &p.tau),
                        alpha: w(g, &p.alpha),
                    }
                };
            (bind(g, v, &mut w), bind(g, t, &mut w))
        });
        let (fv, ft, vis, txt) = match cc {
            None => (fv, ft, vis, txt),
            Some((cv, ct)) => {
                let banks = banks.ok_or_else(|| {
                    LabError::Config("prompt generation needs instance banks".into())
                })?;
                if banks.fusion.len() < fv.len() {
                    return Err(LabError::Config(
                        "one instance bank per fusion layer required".into(),
                    ));
                }
                let bank_vars: Vec<Var> = banks.fusion.iter().map(|b| g.input(b.clone())).collect();
                let gen = |g: &mut Graph,
                           ps: Vec<Var>,
                           bank: &dyn Fn(usize) -> Var,
                           c: &CcpkiVars|
                 -> Result<Vec<Var>> {
                    ps.into_iter()
                        .enumerate()
                        .map(|(k, p)| ipg::ccpki_generate_g(g, p, bank(k), c))
                        .collect()
                };
                let fusion_bank = |k: usize| bank_vars[k];
                let fv = gen(g, fv, &fusion_bank, &cv)?;
                let ft = gen(g, ft, &fusion_bank, &ct)?;
                let vis = if vis.is_empty() {
                    vis
                } else {
                    let vb: Vec<Var> = banks.visual.iter().map(|b| g.input(b.clone())).collect();
                    if vb.len() != vis.len() {
                        return Err(LabError::Config(
                            "one instance bank per visual layer required".into(),
                        ));
                    }
                    gen(g, vis, &|k| vb[k], &cv)?
                };
                let txt = if txt.is_empty() {
                    txt
                } else {
                    let first = *bank_vars.first().ok_or_else(|| {
                        LabError::Config("text prompts need the first fusion bank".into())
                    })?;
                    gen(g, txt, &|_| first, &ct)?
                };
                (fv, ft, vis, txt)
            }
        };
        let stream = |ps: Vec<Var>, lams: Vec<Var>| {
            (!ps.is_empty()).then_some(StreamPromptVars {
                mechanism: s.mechanism,
                kind: s.lambda_kind,
                prompts: ps,
                lambdas: lams,
            })
        };
        let pv = PromptVars {
            visual: stream(vis, vis_lam),
            text: stream(txt, txt_lam),
            fusion: (!fv.is_empty()).then_some(FusionPromptVars {
                mechanism: s.mechanism,
                p_v: fv,
                p_t: ft,
                lambdas,
            }),
        };
        Ok((pv, all))
    }

    /// The frozen prompt set a finished task stores in the pool: generated
    /// prompts replace the initial ones.
    pub fn materialize(&self, banks: Option<&TaskBanks>) -> Result<PromptSet> {
        if self.ccpki.is_none() {
            return Ok(self.set.clone());
        }
        let mut g = Graph::new();
        let (pv, _) = self.bind(&mut g, banks, false)?;
        let mut out = self.set.clone();
        let vals = |g: &Graph, vs: &[Var]| -> Vec<Tensor> {
            vs.iter().map(|&v| g.value(v).clone()).collect()
        };
        if let Some(f) = &pv.fusion {
            out.fusion_v = vals(&g, &f.p_v);
            out.fusion_t = vals(&g, &f.p_t);
        }
        if let Some(v) = &pv.visual {
            out.visual = vals(&g, &v.prompts);
        }
        if let Some(t) = &pv.text {
            out.text = vals(&g, &t.prompts);
        }
        Ok(out)
    }
}

/// Frozen-base encodings reused across steps when prompts do not touch the
/// encoders.
struct EncCache {
    visual: Option<Vec<Tensor>>,
    text: Option<Tensor>,
}

impl EncCache {
    fn build(
        base: &BaseModel,
        samples: &[Sample],
        class_names: &[String],
        set: Option<&PromptSet>,
    ) -> Result<Self> {
        let vis_free = set.is_none_or(|s| s.visual.is_empty());
        let text_free = set.is_none_or(|s| s.text.is_empty());
        Ok(Self {
            visual: if vis_free {
                Some(
                    samples
                        .iter()
                        .map(|s| model::encode_image(base, &s.image))
                        .collect::<Result<_>>()?,
                )
            } else {
                None
            },
            text: if text_free {
                Some(model::encode_text(base, class_names)?)
            } else {
                None
            },
        })
    }
}

#[allow(clippy::too_many_arguments)]
fn prompted_forward(
    g: &mut Graph,
    base_vars: &model::BaseVars,
    config: &ToyVlodConfig,
    image: &Tensor,
    cached_v: Option<&Tensor>,
    cached_t: Option<&Tensor>,
    vocab: &[usize],
    pv: &PromptVars,
) -> Result<(Var, Var)> {
    let f_v = match cached_v {
        Some(t) => g.input(t.clone()),
        None => forward::encode_image(g, base_vars, config, image, pv.visual.as_ref())?,
    };
    let f_t = match cached_t {
        Some(t) => g.input(t.clone()),
        None => forward::encode_text(g, base_vars, config, vocab, pv.text.as_ref())?,
    };
    let (fv, ft) = forward::fuse(g, base_vars, config, f_v, f_t, pv.fusion.as_ref())?;
    forward::heads(g, base_vars, fv, ft)
}

/// Outcome of training one prompt task.
#[derive(Debug, Clone)]
pub struct TaskOutcome {
    pub entry: PoolEntry,
    pub state: PromptState,
    pub losses: Vec<f64>,
}

/// Routing query of one image: mean visual token of the frozen base.
pub fn routing_query(f_v: &Tensor) -> Result<Vec<f64>> {
    Ok(tensor::mean_rows(f_v)?.into_data())
}

/// Trains one prompt task on a frozen base. `classes` is the text query
/// list (all classes seen so far); `ccpki_init` the generator weights the
/// task starts from.
#[allow(clippy::too_many_arguments)]
pub fn train_prompt_task(
    base: &BaseModel,
    task: &TaskDataset,
    classes: &[usize],
    method: Method,
    ccpki_init: Option<(CcpkiParams, CcpkiParams)>,
    cfg: &TrainConfig,
    seed: u64,
    progress: Progress<'_>,
) -> Result<TaskOutcome> {
    let mechanism = method
        .prompt_mechanism()
        .ok_or_else(|| LabError::Config(format!("{method} does not train prompts")))?;
    let c = &base.config;
    let samples = synth::shot_subset(&task.train, &task.class_ids, cfg.shot, seed);
    let mut rng = SplitMix64::derive(seed, 0x7A50 + task.task_id as u64);
    let set = PromptSet::init(c, mechanism, cfg.prompt_init_std, &mut rng);
    let ccpki = if method.uses_ipg() {
        Some(ccpki_init.unwrap_or_else(|| {
            (
                CcpkiParams::init(c.prompt_len, c.d, &mut rng),
                CcpkiParams::init(c.prompt_len, c.d, &mut rng),
            )
        }))
    } else {
        None
    };
    let mut state = PromptState { set, ccpki };
    let banks = if method.uses_ipg() {
        Some(build_task_banks(base, task, &samples, cfg, seed)?)
    } else {
        None
    };
    let class_names = names(classes);
    let vocab = base.vocab_ids(&class_names)?;
    let cache = EncCache::build(base, &samples, &class_names, Some(&state.set))?;
    let targets: Vec<model::Targets> = samples
        .iter()
        .map(|s| model::assign(&s.annotations, classes, c.grid()))
        .collect::<Result<_>>()?;
    let sched = cfg.schedule(cfg.lr_prompt, 1);
    let mut opt = AdamW::for_params(cfg.adamw, &state.tensors_mut());
    let n_params = state.tensors_mut().len();
    let mut sampler = Sampler::new(
        samples.len(),
        SplitMix64::derive(seed, 0x5A40 + task.task_id as u64),
    );
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx = sampler.batch(cfg.images_per_step);
        let (loss, grads) = batch_grads(&idx, n_params, |g, &i| {
            let b = base.bind(g, false);
            let (pv, vars) = state.bind(g, banks.as_ref(), true)?;
            let cv = cache.visual.as_ref().map(|v| &v[i]);
            let (logits, raw) = prompted_forward(
                g,
                &b,
                c,
                &samples[i].image,
                cv,
                cache.text.as_ref(),
                &vocab,
                &pv,
            )?;
            Ok((
                model::detection_loss_weighted(g, logits, raw, &targets[i], c.cls_pos_weight)?,
                vars,
            ))
        })
        .map_err(|e| as_divergence(e, seed, step))?;
        check_loss(loss, seed, step)?;
        opt.step(&mut state.tensors_mut(), &grads, sched.lr_at(step))?;
        emit(progress, || {
            format!(
                "phase=train method={method} seed={seed} task={} step={step} loss={loss:.6}",
                task.task_id
            )
        });
        losses.push(loss);
    }
    let queries: Vec<Vec<f64>> = match &cache.visual {
        Some(v) => v.iter().map(routing_query).collect::<Result<_>>()?,
        None => samples
            .iter()
            .map(|s| routing_query(&model::encode_image(base, &s.image)?))
            .collect::<Result<_>>()?,
    };
    let entry = PoolEntry {
        task_id: task.task_id,
        class_ids: task.class_ids.clone(),
        class_names: task.class_names.clone(),
        key: ipg::learn_centroid(&queries)?,
        prompts: state.materialize(banks.as_ref())?,
    };
    Ok(TaskOutcome {
        entry,
        state,
        losses,
    })
}

/// Fine-tunes every base parameter on `samples` with class list `classes`.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    base: &mut BaseModel,
    samples: &[Sample],
    classes: &[usize],
    steps: usize,
    sched: StepSchedule,
    cfg: &TrainConfig,
    seed: u64,
    stream: u64,
    progress: Progress<'_>,
) -> Result<Vec<f64>> {
    let c = base.config.clone();
    let vocab = base.vocab_ids(&names(classes))?;
    let targets: Vec<model::Targets> = samples
        .iter()
        .map(|s| model::assign(&s.annotations, classes, c.grid()))
        .collect::<Result<_>>()?;
    let mut opt = AdamW::for_params(cfg.adamw, &base.tensors_mut());
    if let Some(i) = base.named_tensors().iter().position(|(n, _)| n == "tok") {
        opt.set_lr_scale(i, cfg.lr_class_embed / cfg.lr_finetune);
    }
    let n_params = base.named_tensors().len();
    let mut sampler = Sampler::new(samples.len(), SplitMix64::derive(seed, 0xF1_0000 + stream));
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let idx = sampler.batch(cfg.images_per_step);
        let snapshot: &BaseModel = base;
        let (loss, grads) = batch_grads(&idx, n_params, |g, &i| {
            let b = snapshot.bind(g, true);
            let (logits, raw) =
                forward::detect(g, &b, &c, &samples[i].image, &vocab, &PromptVars::default())?;
            Ok((
                model::detection_loss_weighted(g, logits, raw, &targets[i], c.cls_pos_weight)?,
                b.vars(),
            ))
        })
        .map_err(|e| as_divergence(e, seed, step))?;
        check_loss(loss, seed, step)?;
        opt.step(&mut base.tensors_mut(), &grads, sched.lr_at(step))?;
        emit(progress, || {
            format!("phase=finetune seed={seed} stream={stream} step={step} loss={loss:.6}")
        });
        losses.push(loss);
    }
    Ok(losses)
}

/// AP in percent of `dets` (queried with `classes`) against `samples`.
pub fn ap_percent(dets: &[Vec<Detection>], samples: &[Sample], classes: &[usize]) -> f64 {
    let scored: Vec<Vec<synth::ScoredBox>> = dets
        .iter()
        .map(|ds| {
            ds.iter()
                .map(|d| synth::ScoredBox::from_detection(d, classes))
                .collect()
        })
        .collect();
    let gts: Vec<Vec<synth::Annotation>> = samples.iter().map(|s| s.annotations.clone()).collect();
    100.0 * synth::average_precision(&scored, &gts, 0.5).mean
}

fn decode(c: &ToyVlodConfig, g: &Graph, logits: Var, raw: Var) -> Vec<Detection> {
    model::decode(
        g.value(logits),
        g.value(raw),
        c.grid(),
        c.score_threshold,
        c.nms_iou,
    )
}

/// Detections of the frozen base with `prompts` on one image.
fn detect_cached(
    base: &BaseModel,
    prompts: Option<&PromptSet>,
    image: &Tensor,
    f_v: Option<&Tensor>,
    f_t: Option<&Tensor>,
    vocab: &[usize],
) -> Result<Vec<Detection>> {
    let c = &base.config;
    let mut g = Graph::new();
    let b = base.bind(&mut g, false);
    let pv = prompts.map(|p| p.bind(&mut g, false)).unwrap_or_default();
    let f_v = f_v.filter(|_| pv.visual.is_none());
    let f_t = f_t.filter(|_| pv.text.is_none());
    let (logits, raw) = prompted_forward(&mut g, &b, c, image, f_v, f_t, vocab, &pv)?;
    Ok(decode(c, &g, logits, raw))
}

/// Test set of one task with its frozen-base encodings.
struct EvalSet<'a> {
    task: &'a TaskDataset,
    f_v: Vec<Tensor>,
    queries: Vec<Vec<f64>>,
}

impl<'a> EvalSet<'a> {
    fn new(base: &BaseModel, task: &'a TaskDataset) -> Result<Self> {
        let f_v: Vec<Tensor> = task
            .test
            .iter()
            .map(|s| model::encode_image(base, &s.image))
            .collect::<Result<_>>()?;
        let queries = f_v.iter().map(routing_query).collect::<Result<_>>()?;
        Ok(Self { task, f_v, queries })
    }
}

/// Routed AP of a prompt pool on one test set, plus the number of images
/// routed to their own task.
fn eval_routed(
    base: &BaseModel,
    pool: &PromptPool,
    set: &EvalSet<'_>,
    classes: &[usize],
    f_t: &Tensor,
) -> Result<(f64, usize)> {
    let vocab = base.vocab_ids(&names(classes))?;
    let mut hits = 0;
    let mut dets = Vec::with_capacity(set.task.test.len());
    for (i, s) in set.task.test.iter().enumerate() {
        let k = ipg::route_task(&set.queries[i], pool)?;
        let entry = &pool.entries()[k];
        hits += usize::from(entry.task_id == set.task.task_id);
        dets.push(detect_cached(
            base,
            Some(&entry.prompts),
            &s.image,
            Some(&set.f_v[i]),
            Some(f_t),
            &vocab,
        )?);
    }
    Ok((ap_percent(&dets, &set.task.test, classes), hits))
}

fn eval_with(
    base: &BaseModel,
    prompts: Option<&PromptSet>,
    set: &EvalSet<'_>,
    classes: &[usize],
    f_t: &Tensor,
) -> Result<f64> {
    let vocab = base.vocab_ids(&names(classes))?;
    let dets: Vec<Vec<Detection>> = set
        .task
        .test
        .iter()
        .enumerate()
        .map(|(i, s)| {
            detect_cached(
                base,
                prompts,
                &s.image,
                Some(&set.f_v[i]),
                Some(f_t),
                &vocab,
            )
        })
        .collect::<Result<_>>()?;
    Ok(ap_percent(&dets, &set.task.test, classes))
}

/// Plain detector evaluation without cached encodings (fine-tuned models).
fn eval_model(m: &BaseModel, samples: &[Sample], classes: &[usize]) -> Result<f64> {
    let vocab = m.vocab_ids(&names(classes))?;
    let dets: Vec<Vec<Detection>> = samples
        .iter()
        .map(|s| model::predict_image(m, None, &s.image, &vocab))
        .collect::<Result<_>>()?;
    Ok(ap_percent(&dets, samples, classes))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RoutingStats {
    pub correct: usize,
    pub total: usize,
}

impl RoutingStats {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            f64::NAN
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

/// Options for one sequence run.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Also fill a matrix with routing forced to the true task and the
    /// class list fixed to every task's classes.
    pub forced_eval: bool,
}

/// Everything one seed of one method produced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    /// Task ids in training order; matrix index `i` is the `i`-th trained.
    pub order: Vec<usize>,
    pub ap: ApMatrix,
    pub forced: Option<ApMatrix>,
    /// Routing of every seen test image after the final task.
    pub routing: RoutingStats,
    pub losses: Vec<Vec<f64>>,
    pub pool_digests: Vec<Vec<String>>,
    #[serde(skip)]
    pub pool: PromptPool,
    pub wall_time_s: f64,
}

/// Trains `method` over the tasks in the seed's order and evaluates after
/// every task.
pub fn run_sequence(
    base: &BaseModel,
    tasks: &[TaskDataset],
    method: Method,
    seed: u64,
    cfg: &TrainConfig,
    opts: &RunOptions,
    progress: Progress<'_>,
) -> Result<SeedRun> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(LabError::Config("no tasks".into()));
    }
    let start = Instant::now();
    let n = tasks.len();
    let order = synth::task_order(n, seed);
    let ordered: Vec<&TaskDataset> = order.iter().map(|&t| &tasks[t]).collect();
    let seen = |i: usize| -> Vec<usize> {
        ordered[..=i]
            .iter()
            .flat_map(|t| t.class_ids.clone())
            .collect()
    };
    let all_classes = seen(n - 1);
    let evals: Vec<EvalSet<'_>> = ordered
        .iter()
        .map(|t| EvalSet::new(base, t))
        .collect::<Result<_>>()?;
    let mut ap = ApMatrix::new(n);
    let mut forced = opts.forced_eval.then(|| ApMatrix::new(n));
    let mut losses = Vec::new();
    let mut pool = PromptPool::new();
    let mut pool_digests = Vec::new();
    let mut routing = RoutingStats::default();
    let record = |i: usize, j: usize, v: f64, m: &mut ApMatrix, tag: &str| -> Result<()> {
        emit(progress, || {
            format!(
                "phase=eval method={method} seed={seed} mode={tag} after={i} task={j} ap={v:.4}"
            )
        });
        m.set(i, j, v)
    };
    match method {
        Method::ZeroShot => {
            for i in 0..n {
                let classes = seen(i);
                let f_t = model::encode_text(base, &names(&classes))?;
                for j in 0..=i {
                    let v = eval_with(base, None, &evals[j], &classes, &f_t)?;
                    record(i, j, v, &mut ap, "routed")?;
                }
            }
        }
        Method::SequentialFt => {
            let mut m = base.clone();
            for i in 0..n {
                let classes = seen(i);
                let samples =
                    synth::shot_subset(&ordered[i].train, &ordered[i].class_ids, cfg.shot, seed);
                losses.push(finetune(
                    &mut m,
                    &samples,
                    &classes,
                    cfg.steps,
                    cfg.schedule(cfg.lr_finetune, 1),
                    cfg,
                    seed,
                    i as u64,
                    progress,
                )?);
                for j in 0..=i {
                    let v = eval_model(&m, &ordered[j].test, &classes)?;
                    record(i, j, v, &mut ap, "routed")?;
                }
            }
        }
        Method::Joint => {
            let mut m = base.clone();
            let samples: Vec<Sample> = ordered
                .iter()
                .flat_map(|t| synth::shot_subset(&t.train, &t.class_ids, cfg.shot, seed))
                .collect();
            losses.push(finetune(
                &mut m,
                &samples,
                &all_classes,
                cfg.steps * n,
                cfg.schedule(cfg.lr_finetune, n),
                cfg,
                seed,
                0,
                progress,
            )?);
            for j in 0..n {
                let v = eval_model(&m, &ordered[j].test, &all_classes)?;
                record(n - 1, j, v, &mut ap, "routed")?;
            }
        }
        Method::NaivePa | Method::Idpa | Method::IdpaNoTransfer => {
            let f_t_all = model::encode_text(base, &names(&all_classes))?;
            let mut carry: Option<(CcpkiParams, CcpkiParams)> = None;
            let mut rng = SplitMix64::derive(seed, 0xC0C0);
            for i in 0..n {
                let classes = seen(i);
                let init = match (&carry, method) {
                    (Some((v, t)), Method::Idpa) => Some((
                        ipg::transfer_weights(v, true, &mut rng),
                        ipg::transfer_weights(t, true, &mut rng),
                    )),
                    (Some((v, t)), Method::IdpaNoTransfer) => Some((
                        ipg::transfer_weights(v, false, &mut rng),
                        ipg::transfer_weights(t, false, &mut rng),
                    )),
                    _ => None,
                };
                let out = train_prompt_task(
                    base, ordered[i], &classes, method, init, cfg, seed, progress,
                )?;
                carry = out.state.ccpki.clone();
                losses.push(out.losses);
                pool.push(out.entry);
                pool_digests.push(pool.entries().iter().map(PoolEntry::digest).collect());
                let f_t = model::encode_text(base, &names(&classes))?;
                for j in 0..=i {
                    let (v, hits) = eval_routed(base, &pool, &evals[j], &classes, &f_t)?;
                    record(i, j, v, &mut ap, "routed")?;
                    if i == n - 1 {
                        routing.correct += hits;
                        routing.total += evals[j].task.test.len();
                    }
                    if let Some(fm) = forced.as_mut() {
                        let v = eval_with(
                            base,
                            Some(&pool.entries()[j].prompts),
                            &evals[j],
                            &all_classes,
                            &f_t_all,
                        )?;
                        record(i, j, v, fm, "forced")?;
                    }
                }
            }
        }
    }
    Ok(SeedRun {
        seed,
        order,
        ap,
        forced: if method.prompt_mechanism().is_some() {
            forced
        } else {
            None
        },
        routing,
        losses,
        pool_digests,
        pool,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// Trainable scalars of `method` on `base`.
pub fn trainable_params(base: &BaseModel, method: Method) -> usize {
    match method {
        Method::ZeroShot => 0,
        Method::SequentialFt | Method::Joint => base.param_count(),
        m => {
            let c = ToyVlodConfig {
                mechanism: m.prompt_mechanism().unwrap_or_default(),
                ..base.config.clone()
            };
            costing::params_count(&c, m.uses_ipg()).total()
        }
    }
}

/// Per-method results over seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: Method,
    pub seeds: Vec<u64>,
    pub runs: Vec<SeedRun>,
    pub trainable_params: usize,
    pub base_params: usize,
    pub flops: FlopReport,
    pub stack_flops: u64,
    pub activation_memory: u64,
    pub base_digest: String,
    pub wall_time_s: f64,
}

impl RunRecord {
    fn metric(&self, f: fn(&ApMatrix) -> Result<f64>) -> Vec<f64> {
        self.runs.iter().filter_map(|r| f(&r.ap).ok()).collect()
    }

    pub fn faps(&self) -> Vec<f64> {
        self.metric(metrics::fap)
    }

    pub fn caps(&self) -> Vec<f64> {
        self.metric(metrics::cap)
    }

    pub fn ffps(&self) -> Vec<f64> {
        self.metric(metrics::ffp)
    }

    pub fn routing_accuracy(&self) -> f64 {
        let accs: Vec<f64> = self
            .runs
            .iter()
            .map(|r| r.routing.accuracy())
            .filter(|a| a.is_finite())
            .collect();
        metrics::mean_std(&accs).0
    }
}

/// Runs `method` for every seed (in parallel) on a shared frozen base.
pub fn evaluate_method(
    base: &BaseModel,
    tasks: &[TaskDataset],
    method: Method,
    seeds: &[u64],
    cfg: &TrainConfig,
    opts: &RunOptions,
    progress: Progress<'_>,
) -> Result<RunRecord> {
    let start = Instant::now();
    let digest = base.digest();
    let runs: Vec<SeedRun> = seeds
        .par_iter()
        .map(|&s| run_sequence(base, tasks, method, s, cfg, opts, progress))
        .collect::<Result<_>>()?;
    if base.digest() != digest {
        return Err(LabError::Numeric("frozen base changed during a run".into()));
    }
    let mechanism = method.prompt_mechanism().unwrap_or(Mechanism::None);
    let lt: usize = tasks.iter().map(|t| t.class_ids.len()).sum();
    let cm = CostModel::from_config(&base.config, lt).with_mechanism(mechanism);
    let shape = LayerShape {
        lt,
        lv: base.config.n_tokens(),
        l: if mechanism == Mechanism::None {
            0
        } else {
            base.config.prompt_len
        },
        d: base.config.d,
        heads: base.config.heads,
    };
    let flops = match mechanism {
        Mechanism::Pa | Mechanism::None => costing::count_flops_pa(shape),
        Mechanism::Dpa => costing::count_flops_dpa_kind(shape, base.config.lambda_kind),
    };
    let flops = FlopReport { mechanism, ..flops };
    Ok(RunRecord {
        method,
        seeds: seeds.to_vec(),
        runs,
        trainable_params: trainable_params(base, method),
        base_params: base.param_count(),
        flops,
        stack_flops: cm.stack_flops(),
        activation_memory: cm.activation_memory(),
        base_digest: digest,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

pub fn evaluate_sequence(
    base: &BaseModel,
    tasks: &[TaskDataset],
    methods: &[Method],
    seeds: &[u64],
    cfg: &TrainConfig,
    opts: &RunOptions,
    progress: Progress<'_>,
) -> Result<Vec<RunRecord>> {
    methods
        .iter()
        .map(|&m| evaluate_method(base, tasks, m, seeds, cfg, opts, progress))
        .collect()
}

/// One table row: mean and sample std over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: Method,
    pub n_seeds: usize,
    /// Final AP per task id (not training order).
    pub final_ap: Vec<(f64, f64)>,
    pub fap: (f64, f64),
    pub cap: (f64, f64),
    pub ffp: (f64, f64),
    pub routing_accuracy: f64,
    pub trainable_params: usize,
    pub param_ratio: f64,
    pub layer_flops: u64,
    pub stack_flops: u64,
    pub activation_memory: u64,
    pub wall_time_s: f64,
}

pub fn report_rows(records: &[RunRecord]) -> Vec<ReportRow> {
    records
        .iter()
        .map(|r| {
            let n_tasks = r.runs.first().map_or(0, |s| s.order.len());
            let final_ap = (0..n_tasks)
                .map(|task| {
                    let xs: Vec<f64> = r
                        .runs
                        .iter()
                        .filter_map(|s| {
                            let pos = s.order.iter().position(|&t| t == task)?;
                            s.ap.get(n_tasks - 1, pos)
                        })
                        .collect();
                    metrics::mean_std(&xs)
                })
                .collect();
            ReportRow {
                method: r.method,
                n_seeds: r.runs.len(),
                final_ap,
                fap: metrics::mean_std(&r.faps()),
                cap: metrics::mean_std(&r.caps()),
                ffp: metrics::mean_std(&r.ffps()),
                routing_accuracy: r.routing_accuracy(),
                trainable_params: r.trainable_params,
                param_ratio: r.trainable_params as f64 / r.base_params as f64,
                layer_flops: r.flops.total,
                stack_flops: r.stack_flops,
                activation_memory: r.activation_memory,
                wall_time_s: r.wall_time_s,
            }
        })
        .collect()
}

fn fmt_ms((m, s): (f64, f64)) -> [String; 2] {
    let f = |x: f64| {
        if x.is_finite() {
            format!("{x:.4}")
        } else {
            String::new()
        }
    };
    [f(m), f(s)]
}

/// CSV with one row per method. Columns: method, seeds, per-task final AP
/// mean/std, FAP/CAP/FFP mean/std, routing accuracy, parameter and cost
/// columns.
pub fn report_csv(rows: &[ReportRow]) -> String {
    let n_tasks = rows.iter().map(|r| r.final_ap.len()).max().unwrap_or(0);
    let mut head = vec!["method".to_string(), "seeds".to_string()];
    for t in 0..n_tasks {
        head.push(format!("task{t}_ap_mean"));
        head.push(format!("task{t}_ap_std"));
    }
    for m in ["fap", "cap", "ffp"] {
        head.push(format!("{m}_mean"));
        head.push(format!("{m}_std"));
    }
    head.extend(
        [
            "routing_acc",
            "trainable_params",
            "param_ratio",
            "layer_flops",
            "stack_flops",
            "activation_words",
            "wall_time_s",
        ]
        .map(String::from),
    );
    let mut out = head.join(",");
    out.push('\n');
    for r in rows {
        let mut cells = vec![r.method.name().to_string(), r.n_seeds.to_string()];
        for t in 0..n_tasks {
            cells.extend(fmt_ms(
                r.final_ap.get(t).copied().unwrap_or((f64::NAN, f64::NAN)),
            ));
        }
        for ms in [r.fap, r.cap, r.ffp] {
            cells.extend(fmt_ms(ms));
        }
        let acc = if r.routing_accuracy.is_finite() {
            format!("{:.4}", r.routing_accuracy)
        } else {
            String::new()
        };
        cells.extend([
            acc,
            r.trainable_params.to_string(),
            format!("{:.6}", r.param_ratio),
            r.layer_flops.to_string(),
            r.stack_flops.to_string(),
            r.activation_memory.to_string(),
            format!("{:.2}", r.wall_time_s),
        ]);
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn report_json(rows: &[ReportRow]) -> Result<String> {
    Ok(serde_json::to_string_pretty(rows)?)
}
