mod common;

use std::collections::BTreeMap;

use mtnlu::checkpoint::{self, decode, encode, Checkpoint, Snapshot};
use mtnlu::config::{parse_tasks, tasks_to_toml, PlanFile};
use mtnlu::soft_targets;
use mtnlu::synthetic::SynthSpec;
use mtnlu::CliError;
use mtnlu_core::distill::{SoftKind, SoftTargetSet};
use mtnlu_core::engine::{evaluate, run_stage, TrainState};
use mtnlu_core::model::ModelBundle;
use mtnlu_core::task::{DataFormat, TaskConfig, TaskType};
use mtnlu_core::Real;
use proptest::prelude::*;

use common::{mtnlu, plan, synth_data};

fn small_spec() -> SynthSpec {
    SynthSpec {
        train: 120,
        dev: 60,
        ..Default::default()
    }
}

const STAGE: &str = "kind = \"multi_task_finetune\"\ntasks = [\"task0\", \"task1\"]\nbatch_size = 16";

fn trained<F: Real>(encoder: &str) -> (Checkpoint<F>, ModelBundle<F>, Vec<mtnlu_core::engine::TaskData>) {
    let plan_file = PlanFile::parse(&plan(4, encoder, STAGE)).unwrap();
    let resolved = plan_file.resolve().unwrap();
    let (data, vocab) = synth_data(&small_spec(), 2);
    let tasks: Vec<TaskConfig> = data.iter().map(|d| d.config.clone()).collect();
    let spec = mtnlu_core::model::ModelSpec {
        encoder: resolved.encoder.clone(),
        vocab_size: vocab.len(),
        max_seq_len: resolved.max_seq_len,
        tasks: tasks.clone(),
    };
    let mut state = TrainState::new(ModelBundle::<F>::new(spec, 4).unwrap(), 4);
    run_stage(&mut state, 0, &resolved.train.stages[0], &data, 64).unwrap();
    let snapshot = Snapshot::new(&tasks, &plan_file, &vocab, 1);
    let ck = Checkpoint::of(&state.model, snapshot, state.step, &state.rngs, state.optimizer.as_ref());
    (ck, state.model, data)
}

const TRANSFORMER: &str = "kind = \"transformer\"\nn_layers = 1\nd = 16\nn_heads = 2";

fn eval_losses<F: Real>(model: &ModelBundle<F>, data: &[mtnlu_core::engine::TaskData]) -> Vec<f64> {
    data.iter()
        .map(|d| evaluate(model, &d.config.name, &d.dev, 32, 0).unwrap().loss)
        .collect()
}

fn exact_eval_loss_after_reload<F: Real>() {
    let (ck, model, data) = trained::<F>(TRANSFORMER);
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("model.ckpt");
    checkpoint::save(&file, &ck).unwrap();
    let loaded: Checkpoint<F> = checkpoint::load(&file).unwrap();
    assert_eq!(loaded, ck);
    let rebuilt = loaded.model().unwrap();
    let before = eval_losses(&model, &data);
    let after = eval_losses(&rebuilt, &data);
    for (a, b) in before.iter().zip(&after) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
    assert_eq!(encode(&loaded), std::fs::read(&file).unwrap());
}

#[test]
fn checkpoint_reload_preserves_eval_loss_f32() {
    exact_eval_loss_after_reload::<f32>();
}

#[test]
fn checkpoint_reload_preserves_eval_loss_f64() {
    exact_eval_loss_after_reload::<f64>();
}

#[test]
fn checkpoint_keeps_optimizer_and_streams() {
    let (ck, _, _) = trained::<f32>("kind = \"lstm\"\nn_layers = 1\nd = 8");
    let opt = ck.optimizer.as_ref().expect("optimizer state saved");
    assert!(opt.step > 0);
    assert_eq!(opt.m.len(), ck.params.len());
    let back: Checkpoint<f32> = decode(&encode(&ck)).unwrap();
    assert_eq!(back.rngs, ck.rngs);
    assert_eq!(back.optimizer, ck.optimizer);
}

fn checkpoint_error(bytes: &[u8]) -> String {
    match decode::<f32>(bytes) {
        Err(CliError::Checkpoint(m)) => m,
        other => panic!("expected a checkpoint error, got {other:?}"),
    }
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let (ck, _, _) = trained::<f32>(TRANSFORMER);
    let bytes = encode(&ck);

    let mut magic = bytes.clone();
    magic[..4].copy_from_slice(b"NOPE");
    assert!(checkpoint_error(&magic).contains("bad magic"));

    let mut version = bytes.clone();
    version[4..8].copy_from_slice(&7u32.to_le_bytes());
    let m = checkpoint_error(&version);
    assert!(m.contains("version 7"), "{m}");

    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(checkpoint_error(&trailing).contains("trailing"));

    for cut in (0..bytes.len()).step_by(97).chain([bytes.len() - 1]) {
        checkpoint_error(&bytes[..cut]);
    }
}

#[test]
fn width_mismatch_names_the_parameter() {
    let wide = "kind = \"transformer\"\nn_layers = 1\nd = 128\nn_heads = 2";
    let (ck, _, _) = trained::<f32>("kind = \"transformer\"\nn_layers = 1\nd = 64\nn_heads = 2");
    let mut other = ck.snapshot.clone();
    other.plan.encoder = PlanFile::parse(&plan(4, wide, STAGE)).unwrap().encoder;
    let mut model = ModelBundle::<f32>::new(other.model_spec().unwrap(), 0).unwrap();
    match ck.apply_to(&mut model) {
        Err(CliError::Checkpoint(m)) => assert!(m.contains("shape mismatch for lexicon.word"), "{m}"),
        other => panic!("{other:?}"),
    }

    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("wide.ckpt");
    checkpoint::save(&file, &Checkpoint { snapshot: other, ..ck }).unwrap();
    let out = mtnlu(&argv!["eval", "--checkpoint", &file, "--data-dir", dir.path(), "--out-dir", dir.path()]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("shape mismatch"));
}

#[test]
fn checkpoint_loads_across_precisions() {
    let (ck, model, data) = trained::<f32>(TRANSFORMER);
    let wide: Checkpoint<f64> = decode(&encode(&ck)).unwrap();
    let rebuilt = wide.model().unwrap();
    for (a, b) in eval_losses(&model, &data).iter().zip(eval_losses(&rebuilt, &data)) {
        assert!((a - b).abs() < 1e-4, "{a} vs {b}");
    }
}

fn task_strategy() -> impl Strategy<Value = TaskConfig> {
    (
        0..6usize,
        "[a-z][a-z0-9_]{0,8}",
        2..6usize,
        any::<bool>(),
        any::<bool>(),
        prop::option::of(0.0..0.9f64),
        prop::option::of(0.1..8.0f64),
    )
        .prop_map(|(kind, name, k, flag, extras, dropout, tau)| {
            use DataFormat::*;
            let pair = if flag { PremiseAndOneHypothesis } else { PremiseOnly };
            let mut c = match kind {
                0 => {
                    let c = TaskConfig::new(name, pair, TaskType::Classification);
                    if flag {
                        let labels: Vec<String> = (0..k).map(|i| format!("l{i}")).collect();
                        c.with_labels(&labels.iter().map(String::as_str).collect::<Vec<_>>())
                    } else {
                        c.with_classes(k)
                    }
                }
                1 => TaskConfig::new(name, pair, TaskType::Regression),
                2 => TaskConfig::new(name, PremiseAndMultiHypothesis, TaskType::Ranking),
                3 => TaskConfig::new(name, Mrc, TaskType::Span),
                4 => TaskConfig::new(name, Sequence, TaskType::SequenceLabeling).with_classes(k),
                _ => TaskConfig::new(name, PlainText, TaskType::MaskedLm),
            };
            c.dropout_prob = dropout;
            if extras {
                match c.task_type {
                    TaskType::Classification | TaskType::Ranking => {
                        c.kd_loss = Some("soft_cross_entropy".into());
                        c.kd_temperature = tau;
                        c.adv_loss = Some("symmetric_kl".into());
                    }
                    TaskType::Regression => {
                        c.kd_loss = Some("mse_logits".into());
                        c.adv_loss = Some("mse".into());
                        c.metric_meta = vec!["mse".into(), "pearson".into()];
                    }
                    TaskType::Span | TaskType::SequenceLabeling => c.adv_loss = Some("symmetric_kl".into()),
                    TaskType::MaskedLm => {}
                }
            }
            c
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn task_documents_round_trip(tasks in prop::collection::vec(task_strategy(), 1..5)) {
        let tasks: Vec<TaskConfig> = tasks
            .into_iter()
            .enumerate()
            .map(|(i, mut t)| { t.name = format!("{}{i}", t.name); t })
            .collect();
        let text = tasks_to_toml(&tasks);
        let parsed = parse_tasks(&text).unwrap();
        prop_assert_eq!(&parsed, &tasks);
        prop_assert_eq!(tasks_to_toml(&parsed), text);
    }

    #[test]
    fn soft_target_files_round_trip_bit_exactly(
        rows in prop::collection::btree_map(
            "[a-z0-9][a-z0-9_-]{0,11}",
            prop::collection::vec(
                prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO,
                3,
            ),
            1..20,
        ),
        teachers in 1..4usize,
        logits in any::<bool>(),
    ) {
        let rows = if logits {
            rows
        } else {
            rows.into_iter()
                .map(|(k, v)| {
                    let v: Vec<f64> = v.iter().map(|x| x.abs().min(1e300) + 1e-3).collect();
                    let total: f64 = v.iter().sum();
                    (k, v.iter().map(|x| x / total).collect())
                })
                .collect()
        };
        let set = SoftTargetSet {
            task: "nli".into(),
            kind: if logits { SoftKind::Logits } else { SoftKind::Probabilities },
            n_class: Some(3),
            teachers,
            config_hash: "0123abcd".into(),
            rows,
        };
        let text = soft_targets::to_text(&set);
        let back = soft_targets::parse(&text, "mem").unwrap();
        prop_assert_eq!(back.task.as_str(), "nli");
        prop_assert_eq!(back.kind, set.kind);
        prop_assert_eq!(back.teachers, teachers);
        let bits = |s: &SoftTargetSet| -> BTreeMap<String, Vec<u64>> {
            s.rows.iter().map(|(k, v)| (k.clone(), v.iter().map(|x| x.to_bits()).collect())).collect()
        };
        prop_assert_eq!(bits(&back), bits(&set));
        prop_assert_eq!(soft_targets::to_text(&back), text);
    }
}

#[test]
fn soft_target_file_bytes_survive_reload() {
    let set = SoftTargetSet {
        task: "rank".into(),
        kind: SoftKind::Probabilities,
        n_class: None,
        teachers: 2,
        config_hash: "feed".into(),
        rows: [
            ("a".to_string(), vec![0.1, 0.2, 0.7]),
            ("b".to_string(), vec![1.0 / 3.0, 2.0 / 3.0]),
        ]
        .into(),
    };
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.tsv"), dir.path().join("b.tsv"));
    soft_targets::save(&a, &set).unwrap();
    let loaded = soft_targets::load(&a).unwrap();
    assert_eq!(loaded, set);
    soft_targets::save(&b, &loaded).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn plan_documents_round_trip() {
    let text = "seed = 9\nprecision = \"f64\"\n\n[encoder]\nkind = \"lstm\"\nd = 24\n\n\
                [[stage]]\nkind = \"multi_task_finetune\"\ntasks = [\"a\", \"b\"]\nsampler = \"uniform\"\n\
                [stage.adversarial]\nepsilon = 0.05\n\n\
                [[stage]]\nkind = \"distill\"\ntasks = [\"a\"]\nlr = 3e-5\nwarmup_steps = 10\n";
    let plan = PlanFile::parse(text).unwrap();
    let expanded = plan.to_toml();
    let again = PlanFile::parse(&expanded).unwrap();
    assert_eq!(again, plan);
    assert_eq!(again.to_toml(), expanded);
    assert_eq!(plan.stages[0].adversarial.as_ref().unwrap().epsilon, 0.05);
    assert_eq!(again.resolve().unwrap().train, plan.resolve().unwrap().train);
}
