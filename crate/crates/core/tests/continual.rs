use dpa_lab_core::harness::{self, Method, PretrainConfig, RunOptions, TrainConfig};
use dpa_lab_core::metrics;
use dpa_lab_core::model::{self, BaseModel, ToyVlodConfig};
use dpa_lab_core::synth::{self, BenchmarkSpec, TaskDataset};

fn small() -> (BaseModel, Vec<TaskDataset>) {
    let c = ToyVlodConfig {
        image_size: 16,
        d: 16,
        n_fusion_layers: 2,
        ffn_hidden: 32,
        prompt_len: 4,
        ..Default::default()
    };
    let pc = PretrainConfig {
        images: 16,
        steps: 10,
        images_per_step: 2,
        decay_at: 8,
        ..Default::default()
    };
    let (base, _) = harness::pretrain_base(&c, &pc, None).unwrap();
    let spec = BenchmarkSpec {
        n_tasks: 3,
        train_images: 8,
        test_images: 4,
        image_size: 16,
        ..Default::default()
    };
    (base, synth::generate(&spec).unwrap())
}

fn short() -> TrainConfig {
    TrainConfig {
        steps: 6,
        decay_at: 4,
        images_per_step: 2,
        bank_size: 4,
        ..Default::default()
    }
}

#[test]
fn prompt_runs_keep_old_pool_entries_and_the_base() {
    let (base, tasks) = small();
    let digest = base.digest();
    let opts = RunOptions { forced_eval: true };
    let r =
        harness::evaluate_method(&base, &tasks, Method::Idpa, &[3], &short(), &opts, None).unwrap();
    assert_eq!(base.digest(), digest);
    let run = &r.runs[0];
    for w in run.pool_digests.windows(2) {
        assert_eq!(&w[1][..w[0].len()], &w[0][..]);
    }
    let forced = run.forced.as_ref().unwrap();
    for j in 0..forced.n() {
        for i in j..forced.n() {
            assert_eq!(forced.get(i, j), forced.get(j, j));
        }
    }
    assert!(metrics::fap(&run.ap).is_ok());
}

#[test]
fn runs_are_deterministic() {
    let (base, tasks) = small();
    let run = || {
        harness::evaluate_method(
            &base,
            &tasks,
            Method::NaivePa,
            &[1],
            &short(),
            &RunOptions::default(),
            None,
        )
        .unwrap()
        .runs
        .remove(0)
    };
    let (a, b) = (run(), run());
    assert_eq!(a.ap, b.ap);
    assert_eq!(a.pool_digests, b.pool_digests);
    assert_eq!(a.losses, b.losses);
}

#[test]
fn zero_steps_leave_the_base_output() {
    let (base, tasks) = small();
    let cfg = TrainConfig {
        steps: 0,
        ..short()
    };
    let t = &tasks[0];
    let out = harness::train_prompt_task(&base, t, &t.class_ids, Method::Idpa, None, &cfg, 0, None)
        .unwrap();
    let vocab = base.vocab_ids(&t.class_names).unwrap();
    for s in &t.test {
        assert_eq!(
            model::predict_image(&base, Some(&out.entry.prompts), &s.image, &vocab).unwrap(),
            model::predict_image(&base, None, &s.image, &vocab).unwrap()
        );
    }
}

#[test]
fn prompt_training_lowers_the_loss() {
    let (base, tasks) = small();
    let cfg = TrainConfig {
        steps: 20,
        decay_at: 20,
        ..short()
    };
    let t = &tasks[0];
    let out = harness::train_prompt_task(&base, t, &t.class_ids, Method::Idpa, None, &cfg, 0, None)
        .unwrap();
    let k = 5;
    let head: f64 = out.losses[..k].iter().sum();
    let tail: f64 = out.losses[out.losses.len() - k..].iter().sum();
    assert!(tail < head, "{:?}", out.losses);
}

#[test]
fn joint_fills_only_the_last_row() {
    let (base, tasks) = small();
    let r = harness::evaluate_method(
        &base,
        &tasks,
        Method::Joint,
        &[0],
        &short(),
        &RunOptions::default(),
        None,
    )
    .unwrap();
    let ap = &r.runs[0].ap;
    assert!(ap.get(0, 0).is_none());
    assert!((0..3).all(|j| ap.get(2, j).is_some()));
    assert!(metrics::fap(ap).is_ok());
}

#[test]
fn single_task_matrix() {
    let (base, tasks) = small();
    let r = harness::evaluate_method(
        &base,
        &tasks[..1],
        Method::ZeroShot,
        &[0],
        &short(),
        &RunOptions::default(),
        None,
    )
    .unwrap();
    let ap = &r.runs[0].ap;
    assert_eq!(ap.n(), 1);
    assert_eq!(metrics::fap(ap).unwrap(), ap.get(0, 0).unwrap());
}
