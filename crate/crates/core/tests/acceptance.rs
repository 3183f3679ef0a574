//! Acceptance suite: one line per criterion, non-zero exit on any failure.

use dpa_lab_core::harness::{self, Method, PretrainConfig, RunOptions, RunRecord, TrainConfig};
use dpa_lab_core::ipg::{self, PromptPool};
use dpa_lab_core::metrics::mean_std;
use dpa_lab_core::model::{self, BaseModel, ToyVlodConfig};
use dpa_lab_core::synth::{self, BenchmarkSpec, TaskDataset};
use dpa_lab_core::verify::{self, Faults};
use std::time::Instant;

const SEEDS: [u64; 3] = [0, 5, 10];

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn c1() -> Outcome {
    let t = Instant::now();
    let r = verify::decomposition(100, 1).unwrap();
    let secs = t.elapsed().as_secs_f64();
    outcome(
        r.passed && secs < 5.0,
        format!("max |pa - decomposed| = {:.3e}, {secs:.2}s", r.max_error),
    )
}

fn c2(base: &BaseModel, tasks: &[TaskDataset]) -> Outcome {
    let unit = verify::zero_init(100, 2, Faults::default()).unwrap();
    let images: Vec<_> = tasks
        .iter()
        .flat_map(|t| t.test.iter().take(8).map(|s| s.image.clone()))
        .collect();
    let names: Vec<String> = tasks.iter().flat_map(|t| t.class_names.clone()).collect();
    let vocab = base.vocab_ids(&names).unwrap();
    let e2e = verify::zero_init_end_to_end(base, &images[..32], &vocab, 2).unwrap();
    outcome(
        unit.passed && e2e.passed,
        format!(
            "{} of 100 instances differ, {} of {} images differ",
            unit.details["mismatched_instances"], e2e.max_error, e2e.instances
        ),
    )
}

fn c3() -> Outcome {
    let t = Instant::now();
    let r = verify::gradients(10, 3).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let worst = r
        .details
        .iter()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(k, _)| k.clone())
        .unwrap_or_default();
    outcome(
        r.passed && secs < 60.0,
        format!(
            "{} cases, max rel error {:.3e} ({worst}), {secs:.1}s",
            r.details.len(),
            r.max_error
        ),
    )
}

fn c4() -> Outcome {
    let r = verify::metric_oracles().unwrap();
    outcome(r.passed, format!("max error {:.1e}", r.max_error))
}

fn c5() -> Outcome {
    let r = verify::cost_grid().unwrap();
    outcome(
        r.passed,
        format!("{} cells, {} failing", r.instances, r.max_error),
    )
}

fn c6() -> Outcome {
    let r = verify::gate_identity(50, 6).unwrap();
    outcome(
        r.passed,
        format!(
            "{} of {} banks changed the prompt",
            r.max_error, r.instances
        ),
    )
}

fn c7(idpa: &RunRecord) -> Outcome {
    let mut drift = 0.0f64;
    let mut cells = 0;
    for run in &idpa.runs {
        let m = run.forced.as_ref().expect("forced matrix requested");
        for j in 0..m.n() {
            let first = m.get(j, j).unwrap();
            for i in j..m.n() {
                drift = drift.max((m.get(i, j).unwrap() - first).abs());
                cells += 1;
            }
        }
    }
    outcome(
        drift == 0.0,
        format!("max |AP[i][j] - AP[j][j]| = {drift} over {cells} forced cells"),
    )
}

fn mean(xs: &[f64]) -> f64 {
    mean_std(xs).0
}

fn c8(records: &[RunRecord], secs: f64) -> Outcome {
    let by = |m: Method| records.iter().find(|r| r.method == m).unwrap();
    let (seq, joint, naive, idpa) = (
        by(Method::SequentialFt),
        by(Method::Joint),
        by(Method::NaivePa),
        by(Method::Idpa),
    );
    let ffp_ok = mean(&idpa.ffps()) < mean(&seq.ffps());
    let fap_ok = mean(&idpa.faps()) > mean(&naive.faps());
    let joint_ok = mean(&joint.faps()) >= mean(&idpa.faps());
    let ratio = idpa.trainable_params as f64 / seq.trainable_params as f64;
    outcome(
        ffp_ok && fap_ok && joint_ok && ratio < 0.05 && secs <= 600.0,
        format!(
            "FFP idpa {:.2} vs seq-ft {:.2}; FAP idpa {:.2} vs naive-pa {:.2}, joint {:.2}; params ratio {:.4}; {secs:.0}s",
            mean(&idpa.ffps()),
            mean(&seq.ffps()),
            mean(&idpa.faps()),
            mean(&naive.faps()),
            mean(&joint.faps()),
            ratio
        ),
    )
}

fn c9(base: &BaseModel, tasks: &[TaskDataset]) -> Outcome {
    let cfg = TrainConfig::default().scaled_budget(0.5);
    let run = |m| {
        harness::evaluate_method(base, tasks, m, &SEEDS, &cfg, &RunOptions::default(), None)
            .unwrap()
    };
    let with = mean(&run(Method::Idpa).faps());
    let without = mean(&run(Method::IdpaNoTransfer).faps());
    outcome(
        with >= without - 0.5,
        format!("FAP with transfer {with:.2}, without {without:.2}"),
    )
}

/// Linear scan over the pool with an explicit cosine.
fn brute_force_route(q: &[f64], pool: &PromptPool) -> usize {
    let qn: f64 = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut best = (0, f64::NEG_INFINITY);
    for (i, e) in pool.entries().iter().enumerate() {
        let k = e.key.data();
        let dot: f64 = q.iter().zip(k).map(|(a, b)| a * b).sum();
        let kn: f64 = k.iter().map(|x| x * x).sum::<f64>().sqrt();
        let cos = dot / (qn * kn);
        if cos > best.1 {
            best = (i, cos);
        }
    }
    best.0
}

fn c10(base: &BaseModel, tasks: &[TaskDataset], idpa: &RunRecord) -> Outcome {
    let acc = idpa.routing_accuracy();
    let queries: Vec<Vec<f64>> = tasks
        .iter()
        .flat_map(|t| &t.test)
        .map(|s| harness::routing_query(&model::encode_image(base, &s.image).unwrap()).unwrap())
        .collect();
    let mut agree = 0;
    let mut total = 0;
    for run in &idpa.runs {
        for q in &queries {
            agree += usize::from(
                ipg::route_task(q, &run.pool).unwrap() == brute_force_route(q, &run.pool),
            );
            total += 1;
        }
    }
    outcome(
        acc >= 0.9 && agree == total,
        format!("accuracy {:.3}; oracle agreement {agree}/{total}", acc),
    )
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut report = |n: usize, name: &'static str, o: Outcome| {
        println!(
            "criterion {n:2} {:4} {name}: {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.detail
        );
        results.push((n, name, o));
    };
    report(1, "decomposition identity", c1());
    report(3, "gradient suite", c3());
    report(4, "metric oracles", c4());
    report(5, "cost dominance", c5());
    report(6, "gate identity", c6());

    let start = Instant::now();
    let (base, _) =
        harness::pretrain_base(&ToyVlodConfig::default(), &PretrainConfig::default(), None)
            .unwrap();
    let tasks = synth::generate(&BenchmarkSpec::default()).unwrap();
    report(2, "zero-init equivalence", c2(&base, &tasks));

    let cfg = TrainConfig::default();
    let forced = RunOptions { forced_eval: true };
    let methods = [
        Method::SequentialFt,
        Method::Joint,
        Method::NaivePa,
        Method::Idpa,
    ];
    let records: Vec<RunRecord> = methods
        .iter()
        .map(|&m| harness::evaluate_method(&base, &tasks, m, &SEEDS, &cfg, &forced, None).unwrap())
        .collect();
    let secs = start.elapsed().as_secs_f64();
    let idpa = records.iter().find(|r| r.method == Method::Idpa).unwrap();
    report(7, "forced-routing zero forgetting", c7(idpa));
    report(8, "desk-scale continual experiment", c8(&records, secs));
    report(9, "weight transfer direction", c9(&base, &tasks));
    report(10, "routing accuracy", c10(&base, &tasks, idpa));

    let failed: Vec<usize> = results
        .iter()
        .filter(|r| !r.2.passed)
        .map(|r| r.0)
        .collect();
    println!(
        "acceptance: {} of {} passed",
        results.len() - failed.len(),
        results.len()
    );
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
