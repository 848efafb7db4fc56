//! Trainer behaviour: determinism, resume, schedules and the metrics log.

use std::fs;

use grid_core::backbone::{load_checkpoint, Model};
use grid_core::condition::Condition;
use grid_core::curriculum::{alpha_at, AlphaSchedule, Phase, PhasePlan};
use grid_core::data::{synth_dataset, DatasetKind};
use grid_core::flow::NoisySample;
use grid_core::trainer::*;
use grid_core::{Error, LayoutSpec};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn config(coarse: u64, fine: u64, every: u64) -> TrainConfig {
    TrainConfig::from_toml(&format!(
        r#"
seed = 11
batch_size = 2
learning_rate = 1e-3
checkpoint_every = {every}

[layout]
rows = 2
cols = 2
frame_h = 8
frame_w = 8
channels = 1

[model]
patch_size = 4
embed_dim = 16
depth = 1
heads = 2
time_embed_dim = 8

[phase_plan]
coarse_steps = {coarse}
fine_steps = {fine}
coarse_dataset = "rot"
fine_dataset = "trans"

[datasets.rot]
source = "synth"
kind = "rotate_ring"
count = 3
seed = 1

[datasets.trans]
source = "synth"
kind = "translate"
count = 3
seed = 2
"#
    ))
    .unwrap()
}

fn datasets(cfg: &TrainConfig) -> Datasets {
    resolve_datasets(cfg, std::path::Path::new(".")).unwrap()
}

fn same_params(a: &Model, b: &Model) -> bool {
    a.params().tensors() == b.params().tensors()
}

#[test]
fn identical_runs_give_identical_streams() {
    let cfg = config(3, 3, 0);
    let d = datasets(&cfg);
    let (a, la) = train_in_memory(&cfg, &d).unwrap();
    let (b, lb) = train_in_memory(&cfg, &d).unwrap();
    assert_eq!(la, lb);
    assert!(same_params(&a.model, &b.model));
    assert_eq!(la.len(), 6);
    let mut other = cfg.clone();
    other.seed += 1;
    let (_, lc) = train_in_memory(&other, &d).unwrap();
    assert_ne!(la, lc);
}

#[test]
fn alpha_follows_the_schedule() {
    let cfg = config(2, 4, 0);
    let (_, losses) = train_in_memory(&cfg, &datasets(&cfg)).unwrap();
    let alphas: Vec<f64> = losses.iter().map(|l| l.alpha).collect();
    assert_eq!(alphas, vec![0.0, 0.0, 0.0, 0.125, 0.25, 0.375]);
    for l in &losses {
        assert!((l.total - (l.base + l.alpha * l.flow)).abs() < 1e-12);
    }
}

#[test]
fn zero_steps_writes_the_initial_model() {
    let cfg = config(0, 0, 0);
    let dir = tempfile::tempdir().unwrap();
    let out = train(&cfg, &datasets(&cfg), dir.path(), None).unwrap();
    assert!(out.losses.is_empty());
    let ckpt = load_checkpoint(&out.checkpoint).unwrap();
    let init = Model::init(cfg.model_config(), cfg.seed).unwrap();
    assert!(same_params(&ckpt.model, &init));
    assert_eq!(ckpt.progress.unwrap().step, 0);
    let csv = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(csv, "step,base,flow,alpha,total\n");
}

#[test]
fn resume_continues_the_uninterrupted_run() {
    let cfg = config(2, 4, 2);
    let d = datasets(&cfg);
    let full_dir = tempfile::tempdir().unwrap();
    let full = train(&cfg, &d, full_dir.path(), None).unwrap();
    let mid = full_dir.path().join(checkpoint_name(2));
    assert!(mid.exists());

    let resumed_dir = tempfile::tempdir().unwrap();
    let resumed = train(&cfg, &d, resumed_dir.path(), Some(&mid)).unwrap();
    assert_eq!(resumed.losses[..], full.losses[2..]);
    let a = load_checkpoint(&full.checkpoint).unwrap();
    let b = load_checkpoint(&resumed.checkpoint).unwrap();
    assert!(same_params(&a.model, &b.model));
    let (pa, pb) = (a.progress.unwrap(), b.progress.unwrap());
    assert_eq!((pa.step, &pa.rng, pa.running), (pb.step, &pb.rng, pb.running));
    assert_eq!(pa.moment1.tensors(), pb.moment1.tensors());
    assert_eq!(pa.moment2.tensors(), pb.moment2.tensors());

    // resuming inside the original folder cuts the log back and rewrites it
    let again = train(&cfg, &d, full_dir.path(), Some(&mid)).unwrap();
    assert_eq!(again.losses, resumed.losses);
    let csv = fs::read_to_string(full_dir.path().join(METRICS_FILE)).unwrap();
    let steps: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(steps, ["0", "1", "2", "3", "4", "5"]);
}

#[test]
fn resume_rejects_a_different_model() {
    let cfg = config(1, 1, 1);
    let d = datasets(&cfg);
    let dir = tempfile::tempdir().unwrap();
    train(&cfg, &d, dir.path(), None).unwrap();
    let mut wider = cfg.clone();
    wider.model.embed_dim = 32;
    let err = train(&wider, &d, dir.path(), Some(&dir.path().join(checkpoint_name(1)))).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn config_errors() {
    let mut cfg = config(1, 1, 0);
    cfg.total_steps = Some(5);
    assert!(cfg.validate().is_err());
    let mut cfg = config(1, 1, 0);
    cfg.cond_dropout_prob = 1.0;
    assert!(cfg.validate().is_err());
    let mut cfg = config(1, 1, 0);
    cfg.phase_plan.fine_dataset = "missing".into();
    assert!(cfg.validate().is_err());
    let mut cfg = config(1, 1, 0);
    cfg.model.heads = 3;
    assert!(cfg.validate().is_err());
    assert!(TrainConfig::from_toml("seed = 1").is_err());
    let round = TrainConfig::from_toml(&config(2, 3, 1).to_toml()).unwrap();
    assert_eq!(round, config(2, 3, 1));
}

#[test]
fn empty_dataset_is_reported() {
    let cfg = config(1, 1, 0);
    let mut d = datasets(&cfg);
    d.get_mut("rot").unwrap().clear();
    let err = train_in_memory(&cfg, &d).unwrap_err();
    assert!(matches!(err, Error::DatasetExhausted(ref n) if n == "rot"));
}

#[test]
fn fixed_batch_loss_falls() {
    let layout = LayoutSpec::new(2, 2, 8, 8, 1).unwrap();
    let cfg = config(0, 200, 0);
    let mut state = TrainState::new(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let batch: Vec<(NoisySample, Condition)> = synth_dataset(DatasetKind::Translate, 2, &layout, 4)
        .unwrap()
        .into_iter()
        .map(|(g, c)| (NoisySample::draw(&g, &mut rng).unwrap(), c))
        .collect();
    let first = fit_step(&mut state, &batch, 0.5, &cfg).unwrap().total;
    let mut last = first;
    for _ in 0..199 {
        last = fit_step(&mut state, &batch, 0.5, &cfg).unwrap().total;
    }
    assert!(last < first / 3.0, "{first} -> {last}");
}

proptest! {
    #[test]
    fn alpha_is_monotone_and_capped(start in 0u64..1000, len in 0u64..1000, max in 0.0f64..2.0, a in 0u64..3000, b in 0u64..3000) {
        let s = AlphaSchedule::new(max, start, start + len).unwrap();
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(s.alpha_at(lo) <= s.alpha_at(hi));
        prop_assert!(s.alpha_at(hi) <= max);
        prop_assert_eq!(s.alpha_at(start + len), max);
        prop_assert_eq!(alpha_at(lo as i64, &s).unwrap(), s.alpha_at(lo));
    }

    #[test]
    fn phases_split_at_the_boundary(coarse in 0u64..50, fine in 1u64..50, step in 0u64..100) {
        let plan = PhasePlan {
            coarse_steps: coarse,
            fine_steps: fine,
            coarse_dataset: "c".into(),
            fine_dataset: "f".into(),
            fine_label_detail: true,
        };
        match plan.phase_at(step) {
            Ok(p) => prop_assert_eq!(p.phase, if step < coarse { Phase::Coarse } else { Phase::Fine }),
            Err(e) => {
                prop_assert!(step >= coarse + fine);
                let is_beyond = matches!(e, Error::StepBeyondPlan { .. });
                prop_assert!(is_beyond);
            }
        }
    }
}

#[test]
fn negative_steps_are_rejected() {
    let s = AlphaSchedule::default();
    assert!(matches!(alpha_at(-5, &s), Err(Error::NegativeStep(-5))));
}
