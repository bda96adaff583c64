//! Whole-command runs behind the `mtnlu` binary.
//!
//! Data directories hold `{task}_train.tsv`, optionally `{task}_dev.tsv`
//! and other `{task}_{split}.tsv` files, and optionally a `vocab.txt`.

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use mtnlu_core::distill::{generate_soft_targets, kd_kind, SoftKind, SoftTargetSet};
use mtnlu_core::encoder::EncoderConfig;
use mtnlu_core::engine::{evaluate, run_stage, TaskData, TrainState};
use mtnlu_core::gradcheck::{worst, GradCheckConfig};
use mtnlu_core::model::{ModelBundle, ModelSpec};
use mtnlu_core::reference::{op_gradchecks, reference_gradcheck};
use mtnlu_core::task::TaskConfig;
use mtnlu_core::vocab::Vocabulary;
use mtnlu_core::{DType, Real};

use crate::checkpoint::{self, Checkpoint, Snapshot};
use crate::config::{merge_tasks, parse_tasks, tasks_to_toml, Plan, PlanFile};
use crate::dataset::{build_vocab, encode_rows, read_rows, vocab_from_text, vocab_to_text, Row};
use crate::error::{read_to_string, write_file, CliError, Result};
use crate::logs::{metric_records, to_jsonl, FileHash, MetricRecord, RunManifest, StepLine};
use crate::soft_targets;
use crate::synthetic::{generate, to_tsv, SynthSpec};

pub fn split_path(data_dir: &Path, task: &str, split: &str) -> PathBuf {
    data_dir.join(format!("{task}_{split}.tsv"))
}

pub fn load_task_files(paths: &[PathBuf]) -> Result<Vec<TaskConfig>> {
    if paths.is_empty() {
        return Err(CliError::config("at least one --config is required"));
    }
    let docs = paths
        .iter()
        .map(|p| {
            let text = read_to_string(p, CliError::Config)?;
            parse_tasks(&text).map_err(|e| CliError::config(format!("{}: {}", p.display(), e.message())))
        })
        .collect::<Result<Vec<_>>>()?;
    merge_tasks(docs)
}

fn append(path: &Path, text: &str) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| CliError::Internal(format!("{}: {e}", path.display())))?;
    f.write_all(text.as_bytes())
        .map_err(|e| CliError::Internal(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, Default)]
pub struct TrainArgs {
    pub configs: Vec<PathBuf>,
    pub plan: PathBuf,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub seed: Option<u64>,
    pub soft_targets: Vec<PathBuf>,
    /// Warm start: parameters only.
    pub init: Option<PathBuf>,
    /// Continue after the stages a checkpoint records as done.
    pub resume: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub require_soft_targets: bool,
}

struct Prepared {
    tasks: Vec<TaskConfig>,
    plan_file: PlanFile,
    plan: Plan,
}

fn prepare(args: &TrainArgs) -> Result<Prepared> {
    let tasks = load_task_files(&args.configs)?;
    let mut plan_file = PlanFile::parse(&read_to_string(&args.plan, CliError::Config)?)?;
    if let Some(s) = args.seed {
        plan_file.seed = s;
    }
    let plan = plan_file.resolve()?;
    plan.check_tasks(&tasks)?;
    Ok(Prepared { tasks, plan_file, plan })
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let p = prepare(args)?;
    match p.plan.precision {
        DType::F32 => train_as::<f32>(args, p),
        DType::F64 => train_as::<f64>(args, p),
    }
}

fn choose_vocab(args: &TrainArgs, start: Option<&Snapshot>, rows: &[(String, Vec<Row>)], min_count: usize) -> Result<Vocabulary> {
    if let Some(s) = start {
        return s.vocabulary();
    }
    let file = args.vocab.clone().or_else(|| {
        let p = args.data_dir.join("vocab.txt");
        p.exists().then_some(p)
    });
    match file {
        Some(f) => vocab_from_text(&read_to_string(&f, CliError::Data)?),
        None => build_vocab(rows.iter().flat_map(|(_, r)| r), min_count),
    }
}

fn attach_soft_targets(paths: &[PathBuf], datasets: &mut [TaskData], model: &ModelSpec) -> Result<Vec<FileHash>> {
    let mut hashes = Vec::new();
    for path in paths {
        let set = soft_targets::load(path)?;
        let data = datasets
            .iter_mut()
            .find(|d| d.config.name == set.task)
            .ok_or_else(|| CliError::config(format!("{}: task {} is not used by the plan", path.display(), set.task)))?;
        let kd = kd_kind(&data.config)?;
        let head = mtnlu_core::heads::HeadKind::from_config(&data.config, model.vocab_size)?;
        let want = SoftKind::for_task(head, kd)?;
        if set.kind != want {
            return Err(CliError::config(format!(
                "{}: task {} needs {} soft targets, file holds {}",
                path.display(),
                set.task,
                want.as_str(),
                set.kind.as_str()
            )));
        }
        if data.soft.is_some() {
            return Err(CliError::config(format!("two soft-target files for task {}", set.task)));
        }
        data.soft = Some(set);
        hashes.push(FileHash::of(path)?);
    }
    Ok(hashes)
}

fn train_as<F: Real>(args: &TrainArgs, p: Prepared) -> Result<()> {
    let Prepared { tasks, plan_file, plan } = p;
    if args.require_soft_targets && args.soft_targets.is_empty() {
        return Err(CliError::config("distill needs at least one --soft-targets file"));
    }
    if args.init.is_some() && args.resume.is_some() {
        return Err(CliError::config("--checkpoint and --resume are mutually exclusive"));
    }
    let start: Option<Checkpoint<F>> = match args.init.as_ref().or(args.resume.as_ref()) {
        Some(path) => Some(checkpoint::load(path)?),
        None => None,
    };
    if let (Some(ck), Some(_)) = (&start, &args.resume) {
        if ck.snapshot.plan != plan_file || ck.snapshot.tasks != tasks_to_toml(&tasks) {
            return Err(CliError::config("resume checkpoint was written for a different plan or task set"));
        }
    }

    let mut inputs = Vec::new();
    let mut rows = Vec::new();
    for name in plan.used_tasks() {
        let config = tasks.iter().find(|t| t.name == name).expect("checked by plan");
        let train_path = split_path(&args.data_dir, &name, "train");
        let dev_path = split_path(&args.data_dir, &name, "dev");
        rows.push((name.clone(), read_rows(&train_path, config)?));
        inputs.push(FileHash::of(&train_path)?);
        if dev_path.exists() {
            rows.push((format!("{name}#dev"), read_rows(&dev_path, config)?));
            inputs.push(FileHash::of(&dev_path)?);
        }
    }
    let train_rows: Vec<(String, Vec<Row>)> = rows.iter().filter(|(n, _)| !n.contains('#')).cloned().collect();
    let vocab = choose_vocab(args, start.as_ref().map(|c| &c.snapshot), &train_rows, plan.vocab_min_count)?;

    let spec = ModelSpec {
        encoder: plan.encoder.clone(),
        vocab_size: vocab.len(),
        max_seq_len: plan.max_seq_len,
        tasks: tasks.clone(),
    };
    let mut datasets = Vec::new();
    for name in plan.used_tasks() {
        let config = tasks.iter().find(|t| t.name == name).expect("checked by plan");
        let encode = |key: &str, split: &str| -> Result<Vec<mtnlu_core::data::Example>> {
            let Some((_, r)) = rows.iter().find(|(n, _)| n == key) else {
                return Ok(Vec::new());
            };
            let origin = split_path(&args.data_dir, &name, split).display().to_string();
            let loaded = encode_rows(r, config, &vocab, plan.max_seq_len, &origin)?;
            if loaded.dropped > 0 {
                eprintln!("warning: {origin}: dropped {} examples whose answer span does not align", loaded.dropped);
            }
            Ok(loaded.examples)
        };
        datasets.push(TaskData {
            config: config.clone(),
            train: encode(&name, "train")?,
            dev: encode(&format!("{name}#dev"), "dev")?,
            soft: None,
        });
    }
    inputs.extend(attach_soft_targets(&args.soft_targets, &mut datasets, &spec)?);
    plan.train.validate(&datasets)?;

    let seed = plan.train.seed;
    let mut model = ModelBundle::<F>::new(spec, seed)?;
    let mut state = match (&start, &args.resume) {
        (Some(ck), Some(_)) => {
            ck.apply_to(&mut model)?;
            let mut s = TrainState::new(model, seed);
            s.rngs = ck.rngs.clone();
            s.step = ck.step;
            s
        }
        (Some(ck), None) => {
            ck.apply_to(&mut model)?;
            TrainState::new(model, seed)
        }
        _ => TrainState::new(model, seed),
    };
    let first = match (&start, &args.resume) {
        (Some(ck), Some(_)) => ck.snapshot.stages_done,
        _ => 0,
    };

    let out = &args.out_dir;
    std::fs::create_dir_all(out).map_err(|e| CliError::Internal(format!("{}: {e}", out.display())))?;
    let vocab_path = out.join("vocab.txt");
    write_file(&vocab_path, vocab_to_text(&vocab))?;
    let metric_log = out.join("metrics.jsonl");
    let step_log = out.join("steps.jsonl");
    if first == 0 {
        write_file(&metric_log, "")?;
        write_file(&step_log, "")?;
    }
    let mut checkpoints = Vec::new();
    for (i, stage) in plan.train.stages.iter().enumerate().skip(first) {
        eprintln!("stage {i}: {} over {}", stage.kind.as_str(), stage.tasks.join(", "));
        let logged = state.log.len();
        let result = run_stage(&mut state, i, stage, &datasets, plan.eval_batch_size)?;
        for (task, misses) in &result.soft_target_misses {
            if *misses > 0 {
                eprintln!("warning: task {task}: {misses} training examples have no soft target and use the hard loss");
            }
        }
        append(&step_log, &to_jsonl(state.log[logged..].iter().map(StepLine::from)))?;
        let records: Vec<MetricRecord> = result.reports.iter().flat_map(metric_records).collect();
        for r in &records {
            eprintln!("  epoch {} {} {} = {:.4} (loss {:.4}, n {})", r.epoch, r.task, r.metric, r.value, r.loss, r.n);
        }
        append(&metric_log, &to_jsonl(&records))?;
        let path = out.join(format!("stage{i}.ckpt"));
        let snapshot = Snapshot::new(&tasks, &plan_file, &vocab, i + 1);
        let ck = Checkpoint::of(&state.model, snapshot, state.step, &state.rngs, state.optimizer.as_ref());
        checkpoint::save(&path, &ck)?;
        checkpoints.push(path.display().to_string());
    }

    let manifest = RunManifest {
        command: if args.require_soft_targets { "distill" } else { "train" }.into(),
        plan: plan_file.to_toml(),
        tasks: tasks_to_toml(&tasks),
        seed,
        inputs,
        vocab: FileHash::of(&vocab_path)?,
        checkpoints,
        metric_log: metric_log.display().to_string(),
        step_log: step_log.display().to_string(),
    };
    manifest.save(&out.join("manifest.json"))
}

#[derive(Debug, Clone, Default)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub split: String,
    pub tasks: Vec<String>,
    pub configs: Vec<PathBuf>,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
}

fn precision_of(path: &Path) -> Result<DType> {
    let ck: Checkpoint<f64> = checkpoint::load(path)?;
    Ok(ck.snapshot.plan.resolve()?.precision)
}

/// Evaluates a checkpoint and returns the records it printed.
pub fn eval(args: &EvalArgs) -> Result<Vec<MetricRecord>> {
    match precision_of(&args.checkpoint)? {
        DType::F32 => eval_as::<f32>(args),
        DType::F64 => eval_as::<f64>(args),
    }
}

fn eval_as<F: Real>(args: &EvalArgs) -> Result<Vec<MetricRecord>> {
    let ck: Checkpoint<F> = checkpoint::load(&args.checkpoint)?;
    let mut spec = ck.snapshot.model_spec()?;
    if !args.configs.is_empty() {
        spec.tasks = load_task_files(&args.configs)?;
    }
    let mut model = ModelBundle::<F>::new(spec, 0)?;
    ck.apply_to(&mut model)?;
    let vocab = ck.snapshot.vocabulary()?;
    let plan = ck.snapshot.plan.resolve()?;
    let bs = args.batch_size.unwrap_or(plan.eval_batch_size);
    let seed = args.seed.unwrap_or(plan.train.seed);
    let names: Vec<String> = if args.tasks.is_empty() {
        model
            .spec
            .tasks
            .iter()
            .map(|t| t.name.clone())
            .filter(|t| split_path(&args.data_dir, t, &args.split).exists())
            .collect()
    } else {
        args.tasks.clone()
    };
    if names.is_empty() {
        return Err(CliError::data(format!(
            "no {{task}}_{}.tsv files for the checkpoint's tasks in {}",
            args.split,
            args.data_dir.display()
        )));
    }
    let mut records = Vec::new();
    for name in &names {
        let config = model.task_config(name)?.clone();
        let path = split_path(&args.data_dir, name, &args.split);
        let rows = read_rows(&path, &config)?;
        let loaded = encode_rows(&rows, &config, &vocab, plan.max_seq_len, &path.display().to_string())?;
        let mut report = evaluate(&model, name, &loaded.examples, bs, seed)?;
        report.stage = ck.snapshot.stages_done.saturating_sub(1);
        records.extend(metric_records(&report));
    }
    let text = to_jsonl(&records);
    print!("{text}");
    write_file(&args.out_dir.join(format!("eval_{}.jsonl", args.split)), text)?;
    Ok(records)
}

#[derive(Debug, Clone, Default)]
pub struct SoftArgs {
    pub teachers: Vec<PathBuf>,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub tasks: Vec<String>,
    /// Student task configs; they decide the soft-target kind.
    pub configs: Vec<PathBuf>,
    pub batch_size: usize,
}

/// Writes `{task}.soft.tsv` for every requested task.
pub fn gen_soft_targets(args: &SoftArgs) -> Result<Vec<PathBuf>> {
    let first = args
        .teachers
        .first()
        .ok_or_else(|| CliError::config("at least one teacher --checkpoint is required"))?;
    match precision_of(first)? {
        DType::F32 => gen_soft_as::<f32>(args),
        DType::F64 => gen_soft_as::<f64>(args),
    }
}

fn gen_soft_as<F: Real>(args: &SoftArgs) -> Result<Vec<PathBuf>> {
    let mut teachers = Vec::new();
    let mut bytes = Vec::new();
    for path in &args.teachers {
        let ck: Checkpoint<F> = checkpoint::load(path)?;
        bytes.extend(std::fs::read(path).map_err(|e| CliError::checkpoint(format!("{}: {e}", path.display())))?);
        let vocab = ck.snapshot.vocabulary()?;
        let max_len = ck.snapshot.plan.max_seq_len;
        teachers.push((ck.model()?, vocab, max_len));
    }
    let hash = crate::logs::sha256_hex(&bytes)[..16].to_string();
    let students = if args.configs.is_empty() { Vec::new() } else { load_task_files(&args.configs)? };
    let names: Vec<String> = if args.tasks.is_empty() {
        let from = if students.is_empty() { &teachers[0].0.spec.tasks } else { &students };
        from.iter().filter(|t| t.kd_loss.is_some()).map(|t| t.name.clone()).collect()
    } else {
        args.tasks.clone()
    };
    if names.is_empty() {
        return Err(CliError::config("no task declares a kd_loss; name tasks with --task"));
    }
    let mut written = Vec::new();
    for name in &names {
        let teacher_config = teachers[0].0.task_config(name)?.clone();
        let config = students.iter().find(|t| &t.name == name).unwrap_or(&teacher_config);
        let kd = kd_kind(config)?;
        let head = teachers[0].0.head(name)?.kind;
        let kind = SoftKind::for_task(head, kd)?;
        let path = split_path(&args.data_dir, name, "train");
        let rows = read_rows(&path, &teacher_config)?;
        let encoded = teachers
            .iter()
            .map(|(_, vocab, max_len)| Ok(encode_rows(&rows, &teacher_config, vocab, *max_len, &path.display().to_string())?.examples))
            .collect::<Result<Vec<_>>>()?;
        let pairs: Vec<(&ModelBundle<F>, &[mtnlu_core::data::Example])> =
            teachers.iter().zip(&encoded).map(|((m, _, _), e)| (m, e.as_slice())).collect();
        let set: SoftTargetSet = generate_soft_targets(&pairs, name, kind, args.batch_size.max(1), &hash)?;
        let out = args.out_dir.join(format!("{name}.soft.tsv"));
        soft_targets::save(&out, &set)?;
        eprintln!("{}: {} rows from {} teacher(s)", out.display(), set.len(), set.teachers);
        written.push(out);
    }
    Ok(written)
}

/// Gradient check of every op and of the reference model; the report is
/// returned as text.
pub fn gradcheck(encoder: &str, seed: u64) -> Result<String> {
    let config = match encoder {
        "transformer" => EncoderConfig::transformer(2, 32, 2, 64),
        "lstm" => EncoderConfig::lstm(1, 32),
        other => {
            return Err(CliError::config(format!(
                "unknown encoder {other:?}; valid values: transformer, lstm"
            )))
        }
    };
    let cfg = GradCheckConfig { seed, ..Default::default() };
    let mut text = String::new();
    let mut failed = Vec::new();
    let mut reports = op_gradchecks(&cfg)?;
    reports.extend(reference_gradcheck(config, seed, &cfg)?.into_iter().map(|(t, r)| (format!("model/{t}"), r)));
    for (task, report) in reports {
        text.push_str(&format!(
            "{task}: max relative error {:.3e}, {} checked, {} skipped, {} unresolved\n",
            report.max_rel_err(),
            report.checked(),
            report.skipped(),
            report.unresolved()
        ));
        if !report.passed() {
            failed.push(format!("{task} ({})", worst(&report)));
        }
    }
    if failed.is_empty() {
        Ok(text)
    } else {
        Err(CliError::GradCheck(format!("{text}failing: {}", failed.join(", "))))
    }
}

/// The validated, default-expanded task document, followed by the plan when
/// one is given.
pub fn inspect(configs: &[PathBuf], plan: Option<&Path>) -> Result<String> {
    let tasks = load_task_files(configs)?;
    let mut text = tasks_to_toml(&tasks);
    if let Some(p) = plan {
        let file = PlanFile::parse(&read_to_string(p, CliError::Config)?)?;
        file.resolve()?.check_tasks(&tasks)?;
        text.push_str("\n# plan\n");
        text.push_str(&file.to_toml());
    }
    Ok(text)
}

/// Writes a synthetic dataset: TSV splits and a task document.
pub fn synth(spec: &SynthSpec, seed: u64, out_dir: &Path) -> Result<()> {
    let tasks = generate(spec, seed);
    let configs: Vec<TaskConfig> = tasks.iter().map(|t| t.config(spec.n_class)).collect();
    for t in &tasks {
        write_file(&split_path(out_dir, &t.name, "train"), to_tsv(&t.train))?;
        write_file(&split_path(out_dir, &t.name, "dev"), to_tsv(&t.dev))?;
    }
    write_file(&out_dir.join("tasks.toml"), tasks_to_toml(&configs))
}
