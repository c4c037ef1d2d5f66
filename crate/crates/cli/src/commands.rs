use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use mckd::analysis::{
    evaluate_outputs, fidelity_experiment, high_low_compare, high_low_split, memorization_probe, predict_outputs,
    size_grid, Evaluation, ProbeConfig,
};
use mckd::backends::{
    build_student, BackendKind, BackendSpec, Corruption, LlmTeacher, ModelHandle, NoisyOracle, Query, Teacher,
    TeacherOutput,
};
use mckd::corpus::{load_dataset, sample_demonstrations, DataFormat, Dataset};
use mckd::parse_eval::Metric;
use mckd::pipeline::{training_records, Pipeline, RunDir, StageReport, CONFIG_SNAPSHOT};
use mckd::synthetic::{generate_split, learnability_report, SyntheticTaskSpec};

use crate::config::{self, ConfigFile};
use crate::{AnalyzeKind, BaselineKind, EvaluateArgs, SynthArgs, Usage};

const PREDICTIONS_DIR: &str = "predictions";

#[derive(Debug, Serialize, Deserialize)]
struct PredictionRecord {
    id: String,
    output: String,
}

fn print_table(headers: &[&str], rows: &[Vec<String>]) {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: Vec<&str>| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        println!("{}", padded.join("  ").trim_end());
    };
    line(headers.to_vec());
    line(widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().iter().map(String::as_str).collect());
    for r in rows {
        line(r.iter().map(String::as_str).collect());
    }
}

fn append_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    for r in records {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}

fn f4(x: f64) -> String {
    format!("{x:.4}")
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let spec = SyntheticTaskSpec {
        seed: a.seed,
        vocab_size: a.vocab_size,
        tag_alphabet: a.tags,
        rule_width: a.rule_width,
        sentence_length_range: (16, 24),
        corpus_size: a.size,
    };
    spec.validate().map_err(|e| Usage(e.to_string()))?;
    if !(0.0..=1.0).contains(&a.noise_rate) {
        bail!(Usage(format!("noise rate {} is outside [0, 1]", a.noise_rate)));
    }
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    generate_split(&spec, "train", a.size)?.save(&a.out_dir.join("train.jsonl"))?;
    generate_split(&spec, "test", a.test_size)?.save(&a.out_dir.join("test.jsonl"))?;
    fs::write(a.out_dir.join("task.json"), serde_json::to_string_pretty(&spec)? + "\n")?;
    let student = BackendSpec::new(BackendKind::ContextTagger)
        .with_param("width", a.rule_width + 1)
        .with_param("context_retention", 0.3)
        .with_param("memorize", true);
    let config = format!(
        r#"output_dir = "run"

[data]
format = "slot-jsonl"
unlabeled = "train.jsonl"
heldout = "test.jsonl"

[run]
stages = 3
seed = {seed}
metric = "token-accuracy"

[teacher]
kind = "noisy-oracle"
[teacher.parameters]
noise_rate = {noise}
seed = {seed}

[student]
kind = "context-tagger"
[student.parameters]
width = {width}
context_retention = 0.3
memorize = true
"#,
        seed = a.seed,
        noise = a.noise_rate,
        width = a.rule_width + 1
    );
    fs::write(a.out_dir.join("mckd.toml"), config)?;
    match learnability_report(&spec, &student, a.noise_rate) {
        Ok(r) => {
            println!("{}", serde_json::to_string(&r)?);
            print_table(
                &["teacher accuracy", "student ceiling", "recovery bound"],
                &[vec![
                    f4(r.teacher_expected_accuracy),
                    f4(r.ceiling),
                    r.recovery_bound.map_or("-".into(), |m| m.to_string()),
                ]],
            );
        }
        Err(e) => log::warn!("no learnability report: {e}"),
    }
    Ok(())
}

fn corruption_for(metric: Metric, spec: &BackendSpec, data: &Dataset) -> Result<Corruption> {
    if metric.is_tree() {
        return Ok(Corruption::Tree);
    }
    if let Some(v) = spec.parameters.get("tags") {
        let tags: Vec<String> = serde_json::from_value(v.clone()).map_err(|e| Usage(format!("teacher tags: {e}")))?;
        if tags.is_empty() {
            bail!(Usage("teacher tags must not be empty".into()));
        }
        return Ok(Corruption::Tags(tags));
    }
    let tags: BTreeSet<String> = data
        .examples()
        .iter()
        .filter_map(|e| e.gold.as_deref())
        .flat_map(|g| g.split_whitespace().map(str::to_string))
        .collect();
    if tags.is_empty() {
        bail!(mckd::Error::validation("the noisy-oracle teacher needs gold labels in the unlabeled file"));
    }
    Ok(Corruption::Tags(tags.into_iter().collect()))
}

fn build_teacher(cfg: &ConfigFile, inputs: &Inputs) -> Result<Box<dyn Teacher>> {
    let unlabeled = &inputs.unlabeled;
    let metric = cfg.run.metric;
    match cfg.teacher.kind {
        BackendKind::LlmTeacher => {
            let path = cfg
                .data
                .labeled
                .as_ref()
                .ok_or_else(|| Usage("an llm-teacher needs `data.labeled` for demonstrations".into()))?;
            let labeled = load_dataset(path, cfg.data.format)?;
            let demos = sample_demonstrations(&labeled, cfg.data.demos, cfg.run.seed)?;
            Ok(Box::new(LlmTeacher::from_spec("teacher", &cfg.teacher, metric, &demos)?))
        }
        BackendKind::NoisyOracle => {
            let gold: BTreeMap<String, String> = unlabeled
                .examples()
                .iter()
                .chain(inputs.heldout.iter().flat_map(|h| h.examples()))
                .filter_map(|e| Some((e.id.clone(), e.gold.clone()?)))
                .collect();
            let corruption = corruption_for(metric, &cfg.teacher, unlabeled)?;
            let gold = Arc::new(move |q: &Query| gold.get(&q.id).cloned());
            Ok(Box::new(NoisyOracle::from_spec("teacher", &cfg.teacher, gold, corruption)?))
        }
        other => bail!(Usage(format!("{other} cannot be used as a teacher"))),
    }
}

struct Inputs {
    unlabeled: Dataset,
    heldout: Option<Dataset>,
}

fn load_inputs(cfg: &ConfigFile) -> Result<Inputs> {
    let unlabeled = load_dataset(&cfg.data.unlabeled, cfg.data.format)
        .with_context(|| format!("loading {}", cfg.data.unlabeled.display()))?;
    let heldout = match &cfg.data.heldout {
        Some(p) => Some(load_dataset(p, cfg.data.format).with_context(|| format!("loading {}", p.display()))?),
        None => None,
    };
    Ok(Inputs { unlabeled, heldout })
}

fn write_predictions(rd: &RunDir, model: &ModelHandle, heldout: &Dataset) -> Result<PathBuf> {
    let dir = rd.file(PREDICTIONS_DIR);
    fs::create_dir_all(&dir)?;
    let outputs = predict_outputs(model, heldout)?;
    let path = dir.join(format!("{}.jsonl", model.model_id));
    let mut f = fs::File::create(&path)?;
    for e in heldout.examples() {
        let r = PredictionRecord {
            id: e.id.clone(),
            output: outputs[&e.id].clone(),
        };
        writeln!(f, "{}", serde_json::to_string(&r)?)?;
    }
    Ok(path)
}

fn print_reports(reports: &[StageReport]) {
    let mut rows = Vec::new();
    for r in reports {
        if r.trained_models.is_empty() {
            for x in &r.relabeled {
                rows.push(vec![
                    r.stage.to_string(),
                    x.producer.clone(),
                    "-".into(),
                    "-".into(),
                    format!("{} ({} failed)", x.labeled, x.failures),
                    "-".into(),
                ]);
            }
        }
        for m in &r.trained_models {
            let labeled = r
                .relabeled
                .iter()
                .find(|x| x.producer == m.model_id)
                .map_or("-".to_string(), |x| x.labeled.to_string());
            let score = r
                .metrics
                .as_ref()
                .and_then(|s| s.get(&m.model_id))
                .map_or("-".to_string(), |v| f4(*v));
            rows.push(vec![
                r.stage.to_string(),
                m.model_id.clone(),
                m.train_size.to_string(),
                m.fidelity_history.len().to_string(),
                labeled,
                score,
            ]);
        }
    }
    print_table(&["stage", "model", "trained on", "epochs", "labeled", "held-out"], &rows);
}

fn execute(cfg: &ConfigFile, rd: &RunDir, until_stage: Option<u32>) -> Result<()> {
    let inputs = load_inputs(cfg)?;
    let teacher = build_teacher(cfg, &inputs)?;
    let student = build_student(&cfg.student)?;
    let mut pipeline = Pipeline::new(&cfg.run, student.as_ref())
        .with_teacher(teacher.as_ref())
        .with_run_dir(rd);
    if let Some(h) = &inputs.heldout {
        pipeline = pipeline.with_heldout(h);
    }
    let out = pipeline.run_mckd_until(&inputs.unlabeled, until_stage)?;
    print_reports(&out.reports);
    if let (Some(m), Some(h)) = (&out.final_model, &inputs.heldout) {
        let p = write_predictions(rd, m, h)?;
        println!("final predictions: {}", p.display());
    }
    Ok(())
}

fn open_run(loaded: &config::Loaded) -> Result<RunDir> {
    let rd = RunDir::create(&loaded.config.output_dir)?;
    let snap = rd.file(CONFIG_SNAPSHOT);
    if let Ok(existing) = fs::read_to_string(&snap) {
        if existing != loaded.snapshot {
            bail!(Usage(format!(
                "{} holds a run with a different configuration; use `mckd resume` or a new output_dir",
                rd.path().display()
            )));
        }
    } else {
        fs::write(&snap, &loaded.snapshot)?;
    }
    Ok(rd)
}

pub fn run(config: &Path, dry_run: bool, until_stage: Option<u32>) -> Result<()> {
    let loaded = config::load(config)?;
    let cfg = &loaded.config;
    if dry_run {
        println!(
            "teacher {} -> student {}; {} stages; output {}",
            cfg.teacher.kind,
            cfg.student.kind,
            cfg.run.stages,
            cfg.output_dir.display()
        );
        for line in cfg.run.plan() {
            println!("{line}");
        }
        return Ok(());
    }
    let rd = open_run(&loaded)?;
    execute(cfg, &rd, until_stage)
}

pub fn pseudolabel(config: &Path, stage: u32) -> Result<()> {
    if stage != 0 {
        bail!(Usage(
            "only stage 0 is labeled on its own; later stages need `mckd run --until-stage`".into()
        ));
    }
    let loaded = config::load(config)?;
    let rd = open_run(&loaded)?;
    execute(&loaded.config, &rd, Some(0))
}

pub fn resume(run_dir: &Path, until_stage: Option<u32>) -> Result<()> {
    let snap = run_dir.join(CONFIG_SNAPSHOT);
    if !snap.exists() {
        bail!(Usage(format!("{} has no {CONFIG_SNAPSHOT}", run_dir.display())));
    }
    let loaded = config::load(&snap)?;
    if loaded.snapshot.contains("<redacted>") {
        bail!(Usage(
            "the run snapshot had a literal secret removed; put it in an environment variable and reference it as ${VAR}"
                .into()
        ));
    }
    let rd = RunDir::open(run_dir)?;
    execute(&loaded.config, &rd, until_stage)
}

fn read_predictions(path: &Path) -> Result<BTreeMap<String, String>> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = BTreeMap::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: PredictionRecord = serde_json::from_str(&line).map_err(|e| mckd::Error::Load {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.insert(r.id, r.output);
    }
    Ok(out)
}

#[derive(Serialize)]
struct EvaluationRecord<'a> {
    model: String,
    metric: Metric,
    examples: usize,
    corpus_f1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    micro_chunk_f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    token_accuracy: Option<f64>,
    per_example: &'a [mckd::analysis::ExampleScore],
}

fn evaluation_record(model: String, e: &Evaluation) -> EvaluationRecord<'_> {
    EvaluationRecord {
        model,
        metric: e.metric,
        examples: e.per_example.len(),
        corpus_f1: e.corpus_f1,
        micro_chunk_f1: e.micro_chunk_f1,
        token_accuracy: e.token_accuracy,
        per_example: &e.per_example,
    }
}

pub fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let (jobs, gold, metric, out): (Vec<(String, PathBuf)>, Dataset, Metric, PathBuf) = match (&a.run, &a.predictions, &a.gold)
    {
        (Some(run), _, _) => {
            let loaded = config::load(&run.join(CONFIG_SNAPSHOT))?;
            let cfg = loaded.config;
            let heldout = cfg
                .data
                .heldout
                .as_ref()
                .ok_or_else(|| Usage("the run has no held-out data to evaluate on".into()))?;
            let gold = load_dataset(heldout, cfg.data.format)?;
            let mut jobs = Vec::new();
            let dir = run.join(PREDICTIONS_DIR);
            if dir.is_dir() {
                for entry in fs::read_dir(&dir)? {
                    let p = entry?.path();
                    if p.extension().is_some_and(|x| x == "jsonl") {
                        let name = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
                        jobs.push((name, p));
                    }
                }
            }
            jobs.sort();
            if jobs.is_empty() {
                bail!(mckd::Error::validation(format!("{} holds no predictions", dir.display())));
            }
            let metric = match &a.metric {
                Some(m) => m.parse()?,
                None => cfg.run.metric,
            };
            (jobs, gold, metric, a.out.clone().unwrap_or_else(|| run.join("evaluation.jsonl")))
        }
        (None, Some(p), Some(g)) => {
            let format: DataFormat = a.format.parse()?;
            let gold = load_dataset(g, format)?;
            let metric = match &a.metric {
                Some(m) => m.parse()?,
                None => Metric::default_for(format),
            };
            let name = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            let out = a.out.clone().unwrap_or_else(|| PathBuf::from("evaluation.jsonl"));
            (vec![(name, p.clone())], gold, metric, out)
        }
        _ => bail!(Usage("give either --run or both --predictions and --gold".into())),
    };
    let mut rows = Vec::new();
    let mut evals = Vec::new();
    for (name, path) in jobs {
        let preds = read_predictions(&path)?;
        let e = evaluate_outputs(&preds, &gold, metric)?;
        rows.push(vec![
            name.clone(),
            e.per_example.len().to_string(),
            f4(e.corpus_f1),
            e.micro_chunk_f1.map_or("-".into(), f4),
            e.token_accuracy.map_or("-".into(), f4),
        ]);
        evals.push((name, e));
    }
    let records: Vec<EvaluationRecord> = evals.iter().map(|(n, e)| evaluation_record(n.clone(), e)).collect();
    if out.exists() {
        fs::remove_file(&out)?;
    }
    append_jsonl(&out, &records)?;
    print_table(&["model", "examples", "corpus F1", "micro chunk F1", "token acc"], &rows);
    println!("report: {}", out.display());
    Ok(())
}

fn stage0(cfg: &ConfigFile, inputs: &Inputs, rd: &RunDir) -> Result<Dataset> {
    let teacher = build_teacher(cfg, inputs)?;
    let student = build_student(&cfg.student)?;
    let out = Pipeline::new(&cfg.run, student.as_ref())
        .with_teacher(teacher.as_ref())
        .with_run_dir(rd)
        .run_mckd_until(&inputs.unlabeled, Some(0))?;
    Ok(out.store)
}

fn teacher_on(teacher: &dyn Teacher, data: &Dataset) -> Result<BTreeMap<String, String>> {
    let qs: Vec<Query> = data.examples().iter().map(|e| Query::new(&e.id, &e.input)).collect();
    let out = teacher.label(&qs)?;
    let mut map = BTreeMap::new();
    for (q, o) in qs.into_iter().zip(out) {
        match o {
            TeacherOutput::Labeled { output, .. } => {
                map.insert(q.id, output);
            }
            TeacherOutput::Failed { reason, .. } => {
                bail!(mckd::Error::backend(format!("teacher failed on held-out `{}`: {reason}", q.id)))
            }
        }
    }
    Ok(map)
}

fn need_heldout(inputs: &Inputs) -> Result<&Dataset> {
    inputs
        .heldout
        .as_ref()
        .ok_or_else(|| Usage("this analysis needs `data.heldout`".into()).into())
}

fn parse_cell(s: &str) -> Result<(usize, usize)> {
    let (a, b) = s
        .split_once('x')
        .ok_or_else(|| Usage(format!("grid cell `{s}` is not of the form AxB")))?;
    let n = |x: &str| x.trim().parse::<usize>().map_err(|_| Usage(format!("bad grid size in `{s}`")));
    Ok((n(a)?, n(b)?))
}

pub fn analyze(kind: &AnalyzeKind) -> Result<()> {
    let config_path = match kind {
        AnalyzeKind::Fidelity { config }
        | AnalyzeKind::Probe { config, .. }
        | AnalyzeKind::Highlow { config, .. }
        | AnalyzeKind::Grid { config, .. } => config,
    };
    let loaded = config::load(config_path)?;
    let cfg = &loaded.config;
    let rd = open_run(&loaded)?;
    let inputs = load_inputs(cfg)?;
    let metric = cfg.run.metric;
    let stopping = &cfg.run.stopping;
    let student = build_student(&cfg.student)?;
    match kind {
        AnalyzeKind::Fidelity { .. } => {
            let heldout = need_heldout(&inputs)?;
            let store = stage0(cfg, &inputs, &rd)?;
            let teacher = build_teacher(cfg, &inputs)?;
            let teacher_out = teacher_on(teacher.as_ref(), heldout)?;
            let records = training_records(&store, None, 0);
            let curve = fidelity_experiment(student.as_ref(), &records, heldout, &teacher_out, stopping, metric)?;
            append_jsonl(&rd.file("analysis-fidelity.jsonl"), &[&curve])?;
            let rows: Vec<Vec<String>> = curve
                .points
                .iter()
                .map(|p| vec![p.epoch.to_string(), f4(p.train_fidelity), p.heldout_f1.map_or("-".into(), f4)])
                .collect();
            print_table(&["epoch", "fidelity", "held-out"], &rows);
            println!("teacher held-out: {}", f4(curve.teacher_heldout_f1));
        }
        AnalyzeKind::Probe {
            n_clean,
            n_noisy,
            threshold,
            ..
        } => {
            let store = stage0(cfg, &inputs, &rd)?;
            let records = training_records(&store, None, 0);
            let probe = ProbeConfig {
                n_clean: *n_clean,
                n_noisy: *n_noisy,
                threshold: *threshold,
            };
            let r = memorization_probe(student.as_ref(), &records, &inputs.unlabeled, &probe, stopping, metric)?;
            append_jsonl(&rd.file("analysis-probe.jsonl"), &[&r])?;
            print_table(
                &["set", "size", "teacher vs gold", "probe vs teacher"],
                &[
                    vec!["clean".into(), r.clean_ids.len().to_string(), f4(r.clean_set_f1), f4(r.probe_clean)],
                    vec![
                        "noisy".into(),
                        r.noisy_ids.len().to_string(),
                        r.noisy_set_f1.map_or("-".into(), f4),
                        r.probe_noisy.map_or("-".into(), f4),
                    ],
                ],
            );
        }
        AnalyzeKind::Highlow { predictions, .. } => {
            let heldout = need_heldout(&inputs)?;
            let teacher = build_teacher(cfg, &inputs)?;
            let teacher_out = teacher_on(teacher.as_ref(), heldout)?;
            let path = predictions
                .clone()
                .unwrap_or_else(|| rd.file(PREDICTIONS_DIR).join("final.jsonl"));
            if !path.exists() {
                bail!(Usage(format!("{} does not exist; run `mckd run` first", path.display())));
            }
            let student_out = read_predictions(&path)?;
            let split = high_low_split(heldout, &teacher_out, metric)?;
            let r = high_low_compare(heldout, &split, &teacher_out, &student_out, metric)?;
            append_jsonl(&rd.file("analysis-highlow.jsonl"), &[&r])?;
            print_table(
                &["half", "size", "teacher", "student"],
                &[
                    vec!["high".into(), split.high.len().to_string(), f4(r.teacher_high), f4(r.student_high)],
                    vec!["low".into(), split.low.len().to_string(), f4(r.teacher_low), f4(r.student_low)],
                ],
            );
        }
        AnalyzeKind::Grid {
            sizes_a,
            sizes_b,
            extra,
            ..
        } => {
            let heldout = need_heldout(&inputs)?;
            let extra: Vec<(usize, usize)> = extra.iter().map(|s| parse_cell(s)).collect::<Result<_>>()?;
            let teacher = build_teacher(cfg, &inputs)?;
            let g = size_grid(
                &inputs.unlabeled.without_gold(),
                teacher.as_ref(),
                student.as_ref(),
                sizes_a,
                sizes_b,
                &extra,
                heldout,
                stopping,
                metric,
                cfg.run.seed,
            )?;
            append_jsonl(&rd.file("analysis-grid.jsonl"), &[&g])?;
            let rows: Vec<Vec<String>> = g
                .cells
                .iter()
                .map(|c| vec![c.size_a.to_string(), c.size_b.to_string(), f4(c.heldout_f1)])
                .collect();
            print_table(&["|D_A|", "|D_B|", "held-out"], &rows);
        }
    }
    Ok(())
}

pub fn baseline(config: &Path, kind: BaselineKind, filter_ratio: Option<f64>) -> Result<()> {
    let loaded = config::load(config)?;
    let cfg = &loaded.config;
    if filter_ratio.is_some() && matches!(kind, BaselineKind::Vanilla) {
        bail!(Usage("--filter-ratio applies to kd-sd only".into()));
    }
    let rd = open_run(&loaded)?;
    let inputs = load_inputs(cfg)?;
    let teacher = build_teacher(cfg, &inputs)?;
    let student = build_student(&cfg.student)?;
    let mut pipeline = Pipeline::new(&cfg.run, student.as_ref())
        .with_teacher(teacher.as_ref())
        .with_run_dir(&rd);
    if let Some(h) = &inputs.heldout {
        pipeline = pipeline.with_heldout(h);
    }
    let out = match kind {
        BaselineKind::Vanilla => pipeline.run_vanilla_kd(&inputs.unlabeled)?,
        BaselineKind::KdSd => pipeline.run_kd_sd(&inputs.unlabeled, filter_ratio.or(cfg.run.filter_ratio))?,
    };
    append_jsonl(&rd.file("baselines.jsonl"), &[&out.report])?;
    print_reports(std::slice::from_ref(&out.report));
    if let Some(h) = &inputs.heldout {
        let p = write_predictions(&rd, &out.model, h)?;
        println!("predictions: {}", p.display());
    }
    Ok(())
}
