//! Self-contained verification suites.
//!
//! Each suite draws its own seeded instances and reports the worst error it
//! saw. The command-line `verify` and `gradcheck` commands and the
//! acceptance tests run the same code.

use crate::attention::{self, tape, DpaParams, LambdaKind, XAttnParams};
use crate::autograd::{Graph, Var};
use crate::boxes::BBox;
use crate::costing::{self, LayerShape};
use crate::error::Result;
use crate::gradcheck::gradcheck;
use crate::instrument;
use crate::ipg::{self, CcpkiParams, InstanceBank};
use crate::metrics::{self, ApMatrix};
use crate::model::{self, BaseModel, FusionPromptVars, Mechanism, PromptVars, ToyVlodConfig};
use crate::rng::SplitMix64;
use crate::synth::Annotation;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Outcome of one suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub name: String,
    pub instances: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// Per-case detail, e.g. the error of each checked op.
    pub details: BTreeMap<String, f64>,
}

impl SuiteReport {
    fn new(name: &str, instances: usize, max_error: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            instances,
            max_error,
            tolerance,
            passed: max_error <= tolerance,
            details: BTreeMap::new(),
        }
    }
}

pub const DECOMPOSITION_TOL: f64 = 1e-10;
pub const GRADCHECK_TOL: f64 = 1e-4;
pub const GRADCHECK_STEP: f64 = 1e-6;

/// Knobs for fault injection; the default is a faithful run.
#[derive(Debug, Clone, Copy, Default)]
pub struct Faults {
    /// Initial value of every lambda in the zero-init suite.
    pub lambda_init: f64,
}

fn uniform_in(rng: &mut SplitMix64, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

/// Text rows of prompt attention against their two-branch reconstruction.
pub fn decomposition(instances: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = SplitMix64::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let lv = uniform_in(&mut rng, 1, 64);
        let lt = uniform_in(&mut rng, 1, 16);
        let l = uniform_in(&mut rng, 1, 10);
        let d = uniform_in(&mut rng, 1, 32);
        let xp = XAttnParams::init(d, &mut rng);
        let f_t = Tensor::randn(&[lt, d], 1.0, &mut rng);
        let f_v = Tensor::randn(&[lv, d], 1.0, &mut rng);
        let p_t = Tensor::randn(&[l, d], 1.0, &mut rng);
        let p_v = Tensor::randn(&[l, d], 1.0, &mut rng);
        let direct = attention::prompt_attn_feature_update(&f_t, &f_v, &p_t, &p_v, &xp)?;
        let split = attention::decompose_pa(&f_t, &f_v, &p_t, &p_v, &xp)?;
        for (a, b) in direct.data().iter().zip(split.data()) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(SuiteReport::new(
        "decomposition",
        instances,
        worst,
        DECOMPOSITION_TOL,
    ))
}

/// DPA with every lambda at `faults.lambda_init` against plain X-Attn.
/// Passes only on bit-identical outputs.
pub fn zero_init(instances: usize, seed: u64, faults: Faults) -> Result<SuiteReport> {
    let mut rng = SplitMix64::new(seed);
    let mut worst = 0.0f64;
    let mut mismatched = 0usize;
    for i in 0..instances {
        let kind = [
            LambdaKind::DimLevel,
            LambdaKind::TaskLevel,
            LambdaKind::Gate,
        ][i % 3];
        let lv = uniform_in(&mut rng, 1, 64);
        let lt = uniform_in(&mut rng, 1, 16);
        let l = uniform_in(&mut rng, 1, 10);
        let d = uniform_in(&mut rng, 1, 32);
        let xp = XAttnParams::init(d, &mut rng);
        let f_t = Tensor::randn(&[lt, d], 1.0, &mut rng);
        let f_v = Tensor::randn(&[lv, d], 1.0, &mut rng);
        let p_t = Tensor::randn(&[l, d], 1.0, &mut rng);
        let p_v = Tensor::randn(&[l, d], 1.0, &mut rng);
        let mut lam = DpaParams::zeros(kind, d);
        lam.lambda_vt.data_mut().fill(faults.lambda_init);
        lam.lambda_tv.data_mut().fill(faults.lambda_init);
        let (a_t, a_v) = attention::dpa(&f_t, &f_v, &p_t, &p_v, &xp, &lam)?;
        let (b_t, b_v) = attention::x_attn(&f_t, &f_v, &xp)?;
        let mut same = true;
        for (x, y) in a_t
            .data()
            .iter()
            .chain(a_v.data())
            .zip(b_t.data().iter().chain(b_v.data()))
        {
            same &= x.to_bits() == y.to_bits() || x == y;
            worst = worst.max((x - y).abs());
        }
        mismatched += usize::from(!same);
    }
    let mut r = SuiteReport::new("zero-init", instances, worst, 0.0);
    r.passed = mismatched == 0;
    r.details
        .insert("mismatched_instances".into(), mismatched as f64);
    Ok(r)
}

/// A fresh prompt set with zero lambdas and zero CCPKI gates leaves the
/// detections of `base` unchanged on every image.
pub fn zero_init_end_to_end(
    base: &BaseModel,
    images: &[Tensor],
    vocab: &[usize],
    seed: u64,
) -> Result<SuiteReport> {
    let c = &base.config;
    let mut rng = SplitMix64::new(seed);
    let mut set = model::PromptSet::init(c, Mechanism::Dpa, 0.02, &mut rng);
    let ccpki = CcpkiParams::init(c.prompt_len, c.d, &mut rng);
    let bank = random_bank(c.d, 3, 4, &mut rng);
    for p in set.fusion_v.iter_mut().chain(set.fusion_t.iter_mut()) {
        *p = ipg::ccpki_generate(p, &bank, &ccpki)?;
    }
    let mut differing = 0usize;
    for img in images {
        let plain = model::predict_image(base, None, img, vocab)?;
        let prompted = model::predict_image(base, Some(&set), img, vocab)?;
        differing += usize::from(plain != prompted);
    }
    let mut r = SuiteReport::new("zero-init-end-to-end", images.len(), differing as f64, 0.0);
    r.details
        .insert("differing_images".into(), differing as f64);
    Ok(r)
}

/// `classes x per_class` random instance vectors.
pub fn random_bank(
    d: usize,
    classes: usize,
    per_class: usize,
    rng: &mut SplitMix64,
) -> InstanceBank {
    let per_class = (0..classes)
        .map(|c| {
            (
                c,
                (0..per_class)
                    .map(|_| (0..d).map(|_| rng.normal()).collect())
                    .collect(),
            )
        })
        .collect();
    InstanceBank {
        task_id: 0,
        layer_id: 0,
        per_class,
    }
}

/// With the gate at zero, CCPKI returns the initial prompt bit for bit.
pub fn gate_identity(banks: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = SplitMix64::new(seed);
    let mut mismatched = 0usize;
    for _ in 0..banks {
        let d = uniform_in(&mut rng, 1, 32);
        let l = uniform_in(&mut rng, 1, 10);
        let bank = random_bank(
            d,
            uniform_in(&mut rng, 1, 4),
            uniform_in(&mut rng, 1, 16),
            &mut rng,
        );
        let mut params = CcpkiParams::init(l, d, &mut rng);
        params.tau = Tensor::randn(&[l, 1], 1.0, &mut rng);
        let p_init = Tensor::randn(&[l, d], 0.02, &mut rng);
        let out = ipg::ccpki_generate(&p_init, &bank, &params)?;
        mismatched += usize::from(
            out.data()
                .iter()
                .zip(p_init.data())
                .any(|(a, b)| a.to_bits() != b.to_bits()),
        );
    }
    Ok(SuiteReport::new(
        "gate-identity",
        banks,
        mismatched as f64,
        0.0,
    ))
}

/// The two hand-evaluated matrices.
pub fn metric_oracles() -> Result<SuiteReport> {
    let two = ApMatrix::from_rows(&[vec![50.0], vec![40.0, 60.0]])?;
    let three = ApMatrix::from_rows(&[vec![60.0], vec![50.0, 70.0], vec![45.0, 65.0, 80.0]])?;
    let checks = [
        ("two.fap", metrics::fap(&two)?, 50.0),
        ("two.cap", metrics::cap(&two)?, 50.0),
        ("two.ffp", metrics::ffp(&two)?, 10.0),
        ("three.fap", metrics::fap(&three)?, 190.0 / 3.0),
        (
            "three.cap",
            metrics::cap(&three)?,
            (60.0 + 60.0 + 190.0 / 3.0) / 3.0,
        ),
        ("three.ffp", metrics::ffp(&three)?, 10.0),
    ];
    let mut r = SuiteReport::new("metrics", checks.len(), 0.0, 1e-9);
    for (name, got, want) in checks {
        let e = (got - want).abs();
        r.details.insert(name.into(), e);
        r.max_error = r.max_error.max(e);
    }
    r.passed = r.max_error <= r.tolerance;
    Ok(r)
}

/// Runs one fusion layer on random inputs and returns
/// `(counted flops, retained words)`.
pub fn measure_layer(m: Mechanism, s: LayerShape, seed: u64) -> Result<(u64, u64)> {
    let mut rng = SplitMix64::new(seed);
    let xp = XAttnParams::init(s.d, &mut rng);
    let f_t = Tensor::randn(&[s.lt, s.d], 1.0, &mut rng);
    let f_v = Tensor::randn(&[s.lv, s.d], 1.0, &mut rng);
    let p_t = Tensor::randn(&[s.l, s.d], 1.0, &mut rng);
    let p_v = Tensor::randn(&[s.l, s.d], 1.0, &mut rng);
    let mut g = Graph::new();
    let x = xp.bind(&mut g, false);
    let lam = DpaParams::zeros(LambdaKind::DimLevel, s.d).bind(&mut g, true);
    let (t, v, pt, pv) = (g.input(f_t), g.input(f_v), g.input(p_t), g.input(p_v));
    let (r, flops) = instrument::measure(|| match m {
        Mechanism::Pa => tape::prompt_attn(&mut g, t, v, pt, pv, &x, s.heads).map(|_| ()),
        Mechanism::Dpa => tape::dpa(&mut g, t, v, pt, pv, &x, &lam, s.heads).map(|_| ()),
        Mechanism::None => tape::x_attn(&mut g, t, v, &x, s.heads).map(|_| ()),
    });
    r?;
    Ok((flops, g.retained_words()))
}

/// The cost grid: DPA must be strictly cheaper than PA in flops and memory,
/// and the static counts must equal the instrumented ones.
pub fn cost_grid() -> Result<SuiteReport> {
    let mut cells = 0;
    let mut failures = 0usize;
    let mut r = SuiteReport::new("cost", 0, 0.0, 0.0);
    for lt in [8, 16, 32] {
        for lv in [64, 256, 1024] {
            for l in [1, 5, 10] {
                for d in [32, 64] {
                    cells += 1;
                    let s = LayerShape::new(lt, lv, l, d);
                    let pa_f = costing::count_flops_pa(s).total;
                    let dpa_f = costing::count_flops_dpa(s).total;
                    let pa_m = costing::layer_memory(Mechanism::Pa, s);
                    let dpa_m = costing::layer_memory(Mechanism::Dpa, s);
                    let dominated = dpa_f < pa_f && dpa_m < pa_m;
                    let seed = cells as u64;
                    let exact = measure_layer(Mechanism::Pa, s, seed)? == (pa_f, pa_m)
                        && measure_layer(Mechanism::Dpa, s, seed)? == (dpa_f, dpa_m);
                    if !(dominated && exact) {
                        failures += 1;
                        r.details
                            .insert(format!("lt={lt},lv={lv},l={l},d={d}"), 1.0);
                    }
                }
            }
        }
    }
    r.instances = cells;
    r.max_error = failures as f64;
    r.passed = failures == 0;
    Ok(r)
}

type Objective = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// Scalar `sum(x (.) R)` with a fixed random `R`, so every output
/// coordinate reaches the gradient with a distinct weight.
fn contract(g: &mut Graph, x: Var, salt: u64) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let r = Tensor::randn(&shape, 1.0, &mut SplitMix64::new(0xC0DE ^ salt));
    let r = g.input(r);
    let y = g.mul(x, r)?;
    Ok(g.sum(y))
}

fn unary(f: fn(&mut Graph, Var) -> Result<Var>) -> Objective {
    Box::new(move |g, v| {
        let y = f(g, v[0])?;
        contract(g, y, 1)
    })
}

fn binary(f: fn(&mut Graph, Var, Var) -> Result<Var>) -> Objective {
    Box::new(move |g, v| {
        let y = f(g, v[0], v[1])?;
        contract(g, y, 2)
    })
}

fn attn_vars(v: &[Var]) -> attention::AttnVars {
    attention::AttnVars {
        w_q: v[0],
        w_k: v[1],
        w_v: v[2],
    }
}

fn xattn_vars(v: &[Var]) -> attention::XAttnVars {
    attention::XAttnVars {
        v_to_t: attn_vars(&v[0..3]),
        t_to_v: attn_vars(&v[3..6]),
    }
}

fn sum_pair(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let x = contract(g, a, 3)?;
    let y = contract(g, b, 4)?;
    g.add(x, y)
}

/// Every differentiable op with the shapes of its random inputs.
fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, Objective)> {
    let m34 = || vec![3, 4];
    let w = |d: usize| vec![d, d];
    let targets = Tensor::from_rows(&[
        vec![1.0, 0.0, 0.0, 1.0],
        vec![0.0, 0.0, 1.0, 0.0],
        vec![0.3, 0.7, 0.0, 1.0],
    ])
    .expect("static shape");
    let weights = Tensor::from_rows(&[
        vec![5.0, 1.0, 1.0, 5.0],
        vec![1.0, 1.0, 5.0, 1.0],
        vec![2.0, 1.0, 1.0, 5.0],
    ])
    .expect("static shape");
    let d = 4;
    let mut cases: Vec<(&'static str, Vec<Vec<usize>>, Objective)> = vec![
        (
            "matmul",
            vec![vec![3, 4], vec![4, 2]],
            binary(|g, a, b| g.matmul(a, b)),
        ),
        (
            "matmul_nt",
            vec![vec![3, 4], vec![2, 4]],
            binary(|g, a, b| g.matmul_nt(a, b)),
        ),
        ("add", vec![m34(), m34()], binary(|g, a, b| g.add(a, b))),
        ("sub", vec![m34(), m34()], binary(|g, a, b| g.sub(a, b))),
        ("mul", vec![m34(), m34()], binary(|g, a, b| g.mul(a, b))),
        ("scale", vec![m34()], unary(|g, a| Ok(g.scale(a, -1.7)))),
        (
            "add_scalar",
            vec![m34()],
            unary(|g, a| Ok(g.add_scalar(a, 0.4))),
        ),
        ("softmax_rows", vec![m34()], unary(|g, a| g.softmax_rows(a))),
        ("tanh", vec![m34()], unary(|g, a| Ok(g.tanh(a)))),
        ("sigmoid", vec![m34()], unary(|g, a| Ok(g.sigmoid(a)))),
        ("relu", vec![m34()], unary(|g, a| Ok(g.relu(a)))),
        ("abs", vec![m34()], unary(|g, a| Ok(g.abs(a)))),
        (
            "concat_rows",
            vec![vec![2, 4], m34()],
            binary(|g, a, b| g.concat_rows(&[a, b])),
        ),
        (
            "slice_rows",
            vec![vec![5, 4]],
            unary(|g, a| g.slice_rows(a, 1, 4)),
        ),
        (
            "select_rows",
            vec![m34()],
            unary(|g, a| g.select_rows(a, &[2, 0, 2])),
        ),
        (
            "concat_cols",
            vec![vec![3, 2], vec![3, 3]],
            binary(|g, a, b| g.concat_cols(&[a, b])),
        ),
        (
            "slice_cols",
            vec![vec![3, 5]],
            unary(|g, a| g.slice_cols(a, 1, 3)),
        ),
        ("transpose", vec![m34()], unary(|g, a| g.transpose(a))),
        ("mean_rows", vec![m34()], unary(|g, a| g.mean_rows(a))),
        (
            "l2_normalize_rows",
            vec![m34()],
            unary(|g, a| g.l2_normalize_rows(a)),
        ),
        (
            "broadcast_rows",
            vec![vec![1, 4]],
            unary(|g, a| g.broadcast_rows(a, 3)),
        ),
        (
            "broadcast_cols",
            vec![vec![3, 1]],
            unary(|g, a| g.broadcast_cols(a, 4)),
        ),
        (
            "add_row",
            vec![m34(), vec![1, 4]],
            binary(|g, a, b| g.add_row(a, b)),
        ),
        (
            "mul_row",
            vec![m34(), vec![1, 4]],
            binary(|g, a, b| g.mul_row(a, b)),
        ),
        (
            "mul_col",
            vec![m34(), vec![3, 1]],
            binary(|g, a, b| g.mul_col(a, b)),
        ),
        ("sum", vec![m34()], Box::new(|g, v| Ok(g.sum(v[0])))),
        ("mean", vec![m34()], Box::new(|g, v| Ok(g.mean(v[0])))),
    ];
    let t = targets.clone();
    cases.push((
        "bce_with_logits",
        vec![m34()],
        Box::new(move |g, v| g.bce_with_logits(v[0], &t)),
    ));
    cases.push((
        "weighted_bce_with_logits",
        vec![m34()],
        Box::new(move |g, v| g.weighted_bce_with_logits(v[0], &targets, &weights)),
    ));
    for heads in [1, 2] {
        let name = if heads == 1 { "attn" } else { "attn_2heads" };
        cases.push((
            name,
            vec![vec![3, d], vec![5, d], w(d), w(d), w(d)],
            Box::new(move |g, v| {
                let y = tape::attn(g, v[0], v[1], &attn_vars(&v[2..5]), heads)?;
                contract(g, y, 5)
            }),
        ));
    }
    let mut x_shapes = vec![vec![3, d], vec![5, d]];
    x_shapes.extend((0..6).map(|_| w(d)));
    cases.push((
        "x_attn",
        x_shapes.clone(),
        Box::new(|g, v| {
            let (a, b) = tape::x_attn(g, v[0], v[1], &xattn_vars(&v[2..8]), 1)?;
            sum_pair(g, a, b)
        }),
    ));
    let mut p_shapes = x_shapes.clone();
    p_shapes.extend([vec![2, d], vec![2, d]]);
    cases.push((
        "prompt_attn",
        p_shapes.clone(),
        Box::new(|g, v| {
            let (a, b) = tape::prompt_attn(g, v[0], v[1], v[8], v[9], &xattn_vars(&v[2..8]), 1)?;
            sum_pair(g, a, b)
        }),
    ));
    for (name, kind) in [
        ("dpa_dim_level", LambdaKind::DimLevel),
        ("dpa_task_level", LambdaKind::TaskLevel),
        ("dpa_gate", LambdaKind::Gate),
    ] {
        let mut shapes = p_shapes.clone();
        let ls = kind.param_shape(d).to_vec();
        shapes.extend([ls.clone(), ls]);
        cases.push((
            name,
            shapes,
            Box::new(move |g, v| {
                let lam = attention::DpaVars {
                    kind,
                    lambda_vt: v[10],
                    lambda_tv: v[11],
                };
                let (a, b) = tape::dpa(g, v[0], v[1], v[8], v[9], &xattn_vars(&v[2..8]), &lam, 1)?;
                sum_pair(g, a, b)
            }),
        ));
    }
    cases.push((
        "dpa_self",
        vec![vec![5, d], vec![2, d], w(d), w(d), w(d), vec![1, d]],
        Box::new(|g, v| {
            let y = tape::dpa_self(
                g,
                v[0],
                v[1],
                &attn_vars(&v[2..5]),
                v[5],
                LambdaKind::DimLevel,
                1,
            )?;
            contract(g, y, 6)
        }),
    ));
    cases.push((
        "ccpki_generate",
        vec![vec![3, d], vec![6, d], w(d), w(d), vec![3, 1], vec![1, d]],
        Box::new(|g, v| {
            let c = ipg::CcpkiVars {
                w_k: v[2],
                w_v: v[3],
                tau: v[4],
                alpha: v[5],
            };
            let y = ipg::ccpki_generate_g(g, v[0], v[1], &c)?;
            contract(g, y, 7)
        }),
    ));
    cases
}

/// Small detector used by the end-to-end gradient check.
pub fn tiny_config() -> ToyVlodConfig {
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

/// Detection loss of a frozen tiny base as a function of the DPA prompts
/// and lambdas of every fusion layer.
fn end_to_end_case(seed: u64) -> Result<(Vec<Vec<usize>>, Objective)> {
    let c = tiny_config();
    let base = BaseModel::init(c.clone(), seed)?;
    let mut rng = SplitMix64::derive(seed, 0xE2E);
    let n = c.image_size * c.image_size * 3;
    let image = Tensor::new(
        vec![c.image_size, c.image_size, 3],
        (0..n).map(|_| rng.uniform()).collect(),
    )?;
    let names: Vec<String> = crate::synth::vocabulary().into_iter().take(2).collect();
    let vocab = base.vocab_ids(&names)?;
    let ann = [
        Annotation {
            bbox: BBox::new(0.3, 0.3, 0.4, 0.3),
            class_id: 0,
        },
        Annotation {
            bbox: BBox::new(0.7, 0.75, 0.2, 0.4),
            class_id: 1,
        },
    ];
    let targets = model::assign(&ann, &[0, 1], c.grid())?;
    let (l, d, n) = (c.prompt_len, c.d, c.n_fusion_layers);
    let mut shapes = Vec::new();
    for _ in 0..n {
        shapes.extend([vec![l, d], vec![l, d], vec![1, d], vec![1, d]]);
    }
    let f: Objective = Box::new(move |g, v| {
        let b = base.bind(g, false);
        let fusion = FusionPromptVars {
            mechanism: Mechanism::Dpa,
            p_v: (0..n).map(|k| v[4 * k]).collect(),
            p_t: (0..n).map(|k| v[4 * k + 1]).collect(),
            lambdas: (0..n)
                .map(|k| attention::DpaVars {
                    kind: LambdaKind::DimLevel,
                    lambda_vt: v[4 * k + 2],
                    lambda_tv: v[4 * k + 3],
                })
                .collect(),
        };
        let pv = PromptVars {
            fusion: Some(fusion),
            ..Default::default()
        };
        let (logits, raw) = model::forward::detect(g, &b, &base.config, &image, &vocab, &pv)?;
        model::detection_loss_weighted(g, logits, raw, &targets, base.config.cls_pos_weight)
    });
    Ok((shapes, f))
}

/// Central-difference check of every op and the end-to-end DPA loss at
/// `points` random points each.
pub fn gradients(points: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = SplitMix64::new(seed);
    let mut cases = op_cases();
    let (shapes, f) = end_to_end_case(seed)?;
    cases.push(("end_to_end_dpa_loss", shapes, f));
    let mut r = SuiteReport::new("gradients", 0, 0.0, GRADCHECK_TOL);
    for (name, shapes, f) in &cases {
        let mut worst = 0.0f64;
        for _ in 0..points {
            let params: Vec<Tensor> = shapes
                .iter()
                .map(|s| Tensor::randn(s, 0.7, &mut rng))
                .collect();
            let rep = gradcheck(f, &params, GRADCHECK_STEP)?;
            worst = worst.max(rep.max_rel_error);
            r.instances += 1;
        }
        r.details.insert((*name).to_string(), worst);
        r.max_error = r.max_error.max(worst);
    }
    r.passed = r.max_error <= r.tolerance;
    Ok(r)
}

/// Every base-free suite in order, as run by `verify`.
pub fn run_all(seed: u64, faults: Faults) -> Result<Vec<SuiteReport>> {
    Ok(vec![
        decomposition(100, seed)?,
        zero_init(100, seed, faults)?,
        gate_identity(50, seed)?,
        metric_oracles()?,
        cost_grid()?,
        gradients(10, seed)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fault_breaks_zero_init() {
        let ok = zero_init(6, 1, Faults::default()).unwrap();
        assert!(ok.passed);
        let bad = zero_init(6, 1, Faults { lambda_init: 0.1 }).unwrap();
        assert!(!bad.passed);
    }

    #[test]
    fn metric_suite_passes() {
        assert!(metric_oracles().unwrap().passed);
    }
}
