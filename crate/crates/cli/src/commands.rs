//! Subcommand bodies. Every command reads and writes plain files under the
//! configured output directory, so stages can be rerun independently.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::Args;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use videor4_core::config::{CaptionerKind, PipelineConfig};
use videor4_core::corpus::{load_corpus, load_instances, save_corpus, Corpus, INSTANCES_FILE};
use videor4_core::evidence::{
    match_question, partition_rl_candidates, EvidenceRecord, RlPartition,
};
use videor4_core::grpo::checkpoint::Checkpoint;
use videor4_core::grpo::curriculum::{
    run_schedule, CurriculumData, ScheduleReport, StageKind, StagePlan,
};
use videor4_core::grpo::toy::build_tasks;
use videor4_core::grpo::{Policy, ToyAction, ToySoftmaxPolicy};
use videor4_core::io::{read_json, read_jsonl, write_json, write_jsonl};
use videor4_core::metrics::{evaluate, MetricReport, Prediction, PredictionSet, DEFAULT_TAU};
use videor4_core::qc::{ExportManifest, QcService, MANIFEST_FILE};
use videor4_core::synthetic::{planted_corpus, PlantedSpec};
use videor4_core::trajectory::{
    fill_placeholders, render_trajectory, validate_trajectory, CaptionerClient, StubCaptioner,
    TemplateId, Trajectory, Violation,
};

use crate::captioner::HttpCaptioner;
use crate::error::CliError;
use crate::server;

pub const EVIDENCE_FILE: &str = "evidence.jsonl";
pub const RL_CANDIDATES_FILE: &str = "rl_candidates.json";
pub const MATCH_SUMMARY_FILE: &str = "match_summary.json";
pub const TRAJECTORIES_FILE: &str = "trajectories.jsonl";
pub const QUARANTINE_FILE: &str = "quarantine.jsonl";
pub const SYNTH_SUMMARY_FILE: &str = "synthesize_summary.json";
pub const VALIDATED_FILE: &str = "validated.jsonl";
pub const VALIDATE_QUARANTINE_FILE: &str = "validate_quarantine.jsonl";
pub const VALIDATE_SUMMARY_FILE: &str = "validate_summary.json";
pub const TRAIN_REPORT_FILE: &str = "train_report.json";
pub const TRAIN_TABLE_FILE: &str = "train_report.txt";
pub const CHECKPOINT_FILE: &str = "policy.ckpt";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const EVAL_REPORT_FILE: &str = "eval_report.json";
pub const EVAL_TABLE_FILE: &str = "eval_report.txt";
pub const DECISION_LOG_FILE: &str = "decisions.jsonl";
pub const CURATED_DIR: &str = "curated";
pub const REPORT_FILE: &str = "report.json";

/// Report wrapper recording which command and configuration produced it.
#[derive(Debug, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub command: String,
    pub config_hash: String,
    #[serde(flatten)]
    pub body: T,
}

fn out_dir(cfg: &PipelineConfig) -> Result<&Path, CliError> {
    let dir = cfg.paths.out.as_path();
    std::fs::create_dir_all(dir).map_err(|e| CliError::input(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

fn write_report<T: Serialize>(
    cfg: &PipelineConfig,
    command: &str,
    file: &str,
    body: T,
) -> Result<(), CliError> {
    let envelope = Envelope {
        command: command.to_string(),
        config_hash: cfg.hash(),
        body,
    };
    write_json(&out_dir(cfg)?.join(file), &envelope)?;
    Ok(())
}

fn load_corpus_checked(cfg: &PipelineConfig) -> Result<Corpus, CliError> {
    let corpus = load_corpus(&cfg.paths.corpus)?;
    if corpus.instances().is_empty() {
        return Err(CliError::input(format!(
            "{}: no questions to process",
            cfg.paths.corpus.join(INSTANCES_FILE).display()
        )));
    }
    Ok(corpus)
}

fn require(path: &Path, hint: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::input(format!(
            "{} not found; {hint}",
            path.display()
        )))
    }
}

fn load_evidence(cfg: &PipelineConfig) -> Result<Vec<EvidenceRecord>, CliError> {
    let path = cfg.paths.out.join(EVIDENCE_FILE);
    require(&path, "run `video-r4 match` first")?;
    Ok(read_jsonl(&path)?)
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Single-frame (image) items.
    #[arg(long, default_value_t = 6)]
    pub images: usize,
    #[arg(long, default_value_t = 14)]
    pub videos: usize,
    /// Frames per video.
    #[arg(long, default_value_t = 4)]
    pub frames: usize,
    /// Videos without any planted sign.
    #[arg(long, default_value_t = 3)]
    pub unmatchable: usize,
    /// Frame side in pixels.
    #[arg(long, default_value_t = 32)]
    pub size: u32,
}

pub fn generate_corpus(cfg: &PipelineConfig, args: &GenerateArgs) -> Result<(), CliError> {
    if args.unmatchable > args.videos {
        return Err(CliError::input("--unmatchable cannot exceed --videos"));
    }
    let seed = cfg.train.seed;
    let mut specs = Vec::new();
    if args.images > 0 {
        specs.push(PlantedSpec {
            prefix: "img".into(),
            videos: args.images,
            frames: 1,
            size: args.size,
            grid: cfg.train.grid,
            unmatchable: 0,
            seed,
        });
    }
    if args.videos > 0 {
        specs.push(PlantedSpec {
            prefix: "vid".into(),
            videos: args.videos,
            frames: args.frames,
            size: args.size,
            grid: cfg.train.grid,
            unmatchable: args.unmatchable,
            seed: seed.wrapping_add(1),
        });
    }
    let corpus = planted_corpus(&specs)?;
    save_corpus(&corpus, &cfg.paths.corpus)?;
    println!(
        "wrote {} videos and {} questions to {}",
        corpus.videos().count(),
        corpus.instances().len(),
        cfg.paths.corpus.display()
    );
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchSummary {
    pub instances: usize,
    pub matched: usize,
    pub unmatched: usize,
    pub rl_kept: usize,
    pub rl_dropped: usize,
}

pub fn cmd_match(cfg: &PipelineConfig) -> Result<(), CliError> {
    let corpus = load_corpus_checked(cfg)?;
    let evidence = corpus
        .instances()
        .iter()
        .map(|q| match_question(q, &corpus, &cfg.matcher))
        .collect::<Result<Vec<_>, _>>()?;
    let partition: RlPartition =
        partition_rl_candidates(corpus.instances(), &corpus, &cfg.matcher)?;
    let out = out_dir(cfg)?;
    write_jsonl(&out.join(EVIDENCE_FILE), &evidence)?;
    write_json(&out.join(RL_CANDIDATES_FILE), &partition)?;
    let matched = evidence.iter().filter(|e| e.matched).count();
    let summary = MatchSummary {
        instances: evidence.len(),
        matched,
        unmatched: evidence.len() - matched,
        rl_kept: partition.kept.len(),
        rl_dropped: partition.dropped.len(),
    };
    println!(
        "matched={} unmatched={} rl_kept={} rl_dropped={}",
        summary.matched, summary.unmatched, summary.rl_kept, summary.rl_dropped
    );
    write_report(cfg, "match", MATCH_SUMMARY_FILE, summary)
}

/// A trajectory that failed validation, with the reasons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quarantined {
    pub trajectory: Trajectory,
    pub violations: Vec<Violation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesizeSummary {
    pub captioner: CaptionerKind,
    pub rendered: usize,
    pub valid: usize,
    pub quarantined: usize,
}

#[derive(Debug, Args)]
pub struct SynthesizeArgs {
    /// Templates to render (repeatable). Defaults to every template for
    /// multi-frame videos and `crop_only` for single images.
    #[arg(long = "template")]
    pub templates: Vec<TemplateId>,
}

fn captioner(cfg: &PipelineConfig) -> Result<Box<dyn CaptionerClient + Sync>, CliError> {
    Ok(match cfg.captioner.kind {
        CaptionerKind::Stub => Box::new(StubCaptioner),
        CaptionerKind::Http => {
            let endpoint = cfg
                .captioner
                .endpoint
                .clone()
                .ok_or_else(|| CliError::input("captioner.endpoint is not set"))?;
            Box::new(HttpCaptioner::new(
                endpoint,
                Duration::from_secs(cfg.captioner.timeout_secs),
            ))
        }
    })
}

fn split_valid(checked: Vec<(Trajectory, Vec<Violation>)>) -> (Vec<Trajectory>, Vec<Quarantined>) {
    let mut valid = Vec::new();
    let mut quarantine = Vec::new();
    for (t, violations) in checked {
        if violations.is_empty() {
            valid.push(t);
        } else {
            quarantine.push(Quarantined {
                trajectory: t,
                violations,
            });
        }
    }
    (valid, quarantine)
}

pub fn synthesize(cfg: &PipelineConfig, args: &SynthesizeArgs) -> Result<(), CliError> {
    let corpus = load_corpus_checked(cfg)?;
    let evidence = load_evidence(cfg)?;
    let client = captioner(cfg)?;
    let mut jobs = Vec::new();
    for ev in evidence.iter().filter(|e| e.matched) {
        let q = corpus.instance(&ev.instance_id).ok_or_else(|| {
            CliError::input(format!(
                "evidence refers to unknown question `{}`",
                ev.instance_id
            ))
        })?;
        let video = corpus.video_of(q)?;
        let templates: Vec<TemplateId> = if !args.templates.is_empty() {
            args.templates.clone()
        } else if video.frame_count() > 1 {
            TemplateId::ALL.to_vec()
        } else {
            vec![TemplateId::CropOnly]
        };
        for template in templates {
            jobs.push((render_trajectory(ev, q, template)?, q, video, ev));
        }
    }
    // trajectories fill in parallel; turns inside one trajectory stay sequential
    let client: &(dyn CaptionerClient + Sync) = client.as_ref();
    let checked = jobs
        .par_iter()
        .map(|(raw, q, video, ev)| {
            let filled = fill_placeholders(raw, q, video, client)
                .map_err(|e| CliError::input(format!("{}: {e}", raw.id)))?;
            let report = validate_trajectory(&filled, &corpus, ev);
            Ok((filled, report.violations))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let rendered = checked.len();
    let (valid, quarantine) = split_valid(checked);
    let out = out_dir(cfg)?;
    write_jsonl(&out.join(TRAJECTORIES_FILE), &valid)?;
    write_jsonl(&out.join(QUARANTINE_FILE), &quarantine)?;
    let summary = SynthesizeSummary {
        captioner: cfg.captioner.kind,
        rendered,
        valid: valid.len(),
        quarantined: quarantine.len(),
    };
    println!(
        "rendered={} valid={} quarantined={}",
        summary.rendered, summary.valid, summary.quarantined
    );
    write_report(cfg, "synthesize", SYNTH_SUMMARY_FILE, summary)
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// Trajectories to check; defaults to the synthesized file.
    #[arg(long)]
    pub input: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidateSummary {
    pub input: PathBuf,
    pub checked: usize,
    pub valid: usize,
    pub quarantined: usize,
}

/// Fails with status 1 when anything is quarantined.
pub fn validate(cfg: &PipelineConfig, args: &ValidateArgs) -> Result<(), CliError> {
    let input = args
        .input
        .clone()
        .unwrap_or_else(|| cfg.paths.out.join(TRAJECTORIES_FILE));
    require(&input, "run `video-r4 synthesize` or pass --input")?;
    let corpus = load_corpus(&cfg.paths.corpus)?;
    let evidence: BTreeMap<String, EvidenceRecord> = load_evidence(cfg)?
        .into_iter()
        .map(|e| (e.instance_id.clone(), e))
        .collect();
    let trajectories: Vec<Trajectory> = read_jsonl(&input)?;
    let checked: Vec<(Trajectory, Vec<Violation>)> = trajectories
        .into_iter()
        .map(|t| {
            let ev = evidence
                .get(&t.instance_id)
                .cloned()
                .unwrap_or_else(|| EvidenceRecord::unmatched(t.instance_id.clone()));
            let violations = validate_trajectory(&t, &corpus, &ev).violations;
            (t, violations)
        })
        .collect();
    let total = checked.len();
    let (valid, quarantine) = split_valid(checked);
    let out = out_dir(cfg)?;
    write_jsonl(&out.join(VALIDATED_FILE), &valid)?;
    write_jsonl(&out.join(VALIDATE_QUARANTINE_FILE), &quarantine)?;
    for q in &quarantine {
        for v in &q.violations {
            println!("{}: {v}", q.trajectory.id);
        }
    }
    let summary = ValidateSummary {
        input,
        checked: total,
        valid: valid.len(),
        quarantined: quarantine.len(),
    };
    println!(
        "checked={} valid={} quarantined={}",
        summary.checked, summary.valid, summary.quarantined
    );
    let quarantined = summary.quarantined;
    write_report(cfg, "validate", VALIDATE_SUMMARY_FILE, summary)?;
    if quarantined > 0 {
        return Err(CliError::input(format!(
            "{quarantined} trajectories quarantined to {}",
            out.join(VALIDATE_QUARANTINE_FILE).display()
        )));
    }
    Ok(())
}

/// Held-out questions: a seeded hash ordering of the multi-frame questions,
/// of which the first `fraction` are kept. Image questions always train.
pub fn eval_split(corpus: &Corpus, fraction: f64, seed: u64) -> BTreeSet<String> {
    let mut keyed: Vec<(Vec<u8>, &str)> = corpus
        .instances()
        .iter()
        .filter(|q| corpus.video_of(q).is_ok_and(|v| v.frame_count() > 1))
        .map(|q| {
            let mut h = Sha256::new();
            h.update(seed.to_le_bytes());
            h.update(q.id.as_bytes());
            (h.finalize().to_vec(), q.id.as_str())
        })
        .collect();
    keyed.sort();
    let n = (fraction * keyed.len() as f64).round() as usize;
    let n = if fraction > 0.0 && !keyed.is_empty() {
        n.max(1)
    } else {
        n
    };
    keyed
        .into_iter()
        .take(n)
        .map(|(_, id)| id.to_string())
        .collect()
}

fn parse_stages(list: &str) -> Result<Vec<StageKind>, CliError> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            StageKind::ALL
                .into_iter()
                .find(|k| k.as_str() == s)
                .ok_or_else(|| {
                    CliError::input(format!(
                        "unknown stage `{s}`; expected drp_sft, rl_d, crp_sft or rl_c"
                    ))
                })
        })
        .collect()
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON stage plan; overrides `train.plan`.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    /// Extra run over a stage subset, e.g. `crp_sft,rl_c` (repeatable).
    #[arg(long = "ablation")]
    pub ablations: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub name: String,
    pub report: ScheduleReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub eval_questions: Vec<String>,
    pub runs: Vec<TrainRun>,
}

fn run_name(plan: &StagePlan) -> String {
    plan.stages
        .iter()
        .map(|s| s.stage.as_str())
        .collect::<Vec<_>>()
        .join("+")
}

pub fn train_table(report: &TrainReport) -> String {
    let w = report
        .runs
        .iter()
        .map(|r| r.name.len())
        .chain(["schedule".len()])
        .max()
        .unwrap_or(8);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "# seed {}, {} held-out questions",
        report.seed,
        report.eval_questions.len()
    );
    let _ = writeln!(
        out,
        "{:<w$}  {:>8}  {:>8}  {:>6}  {:>6}  {:>6}",
        "schedule", "reward", "accuracy", "clip", "crop", "calls"
    );
    for r in &report.runs {
        let e = &r.report.eval;
        let _ = writeln!(
            out,
            "{:<w$}  {:>8.4}  {:>8.4}  {:>6.3}  {:>6.3}  {:>6.3}",
            r.name,
            e.mean_reward,
            e.accuracy,
            e.tool_usage.clip_fraction,
            e.tool_usage.crop_fraction,
            e.tool_usage.mean_calls
        );
    }
    out
}

pub fn train(cfg: &PipelineConfig, args: &TrainArgs) -> Result<(), CliError> {
    let seed = cfg.train.seed;
    let mut plans = Vec::new();
    // seed and optimizer settings always come from the resolved config
    let mut main = match args.plan.as_ref().or(cfg.train.plan.as_ref()) {
        Some(path) => StagePlan::load(path)?,
        None => StagePlan::full(seed),
    };
    main.seed = seed;
    main.grpo = cfg.grpo.clone();
    plans.push(main);
    for list in &args.ablations {
        let mut plan = StagePlan::only(&parse_stages(list)?, seed);
        plan.grpo = cfg.grpo.clone();
        plans.push(plan);
    }
    for plan in &plans {
        plan.validate()?;
    }

    let corpus = load_corpus_checked(cfg)?;
    let eval_ids = eval_split(&corpus, cfg.train.eval_fraction, seed);
    let data = CurriculumData::build(
        &corpus,
        &cfg.matcher,
        cfg.train.grid,
        cfg.train.candidates,
        seed,
        &eval_ids,
    )?;
    let mut runs = Vec::new();
    let mut checkpoint = None;
    for plan in &plans {
        let (policy, report) = run_schedule(plan, &data, ToySoftmaxPolicy::default())?;
        if checkpoint.is_none() {
            checkpoint = Some(Checkpoint {
                stage: plan
                    .stages
                    .last()
                    .map_or("init", |s| s.stage.as_str())
                    .to_string(),
                step: plan.stages.iter().map(|s| s.steps).sum(),
                seed,
                params: policy.params().to_vec(),
            });
        }
        runs.push(TrainRun {
            name: run_name(plan),
            report,
        });
    }
    let report = TrainReport {
        seed,
        eval_questions: eval_ids.into_iter().collect(),
        runs,
    };
    let out = out_dir(cfg)?;
    if let Some(ckpt) = checkpoint {
        ckpt.save(&out.join(CHECKPOINT_FILE))?;
    }
    let table = train_table(&report);
    std::fs::write(out.join(TRAIN_TABLE_FILE), &table)?;
    print!("{table}");
    write_report(cfg, "train", TRAIN_REPORT_FILE, report)
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct EvalArgs {
    /// `{"id","prediction"}` lines; golds come from the corpus questions.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Toy policy checkpoint to answer the held-out questions with.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

/// Answer of the policy's most probable episode on each held-out question.
fn policy_predictions(
    cfg: &PipelineConfig,
    checkpoint: &Path,
) -> Result<Vec<Prediction>, CliError> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let policy = ToySoftmaxPolicy::new(ckpt.params)
        .map_err(|e| CliError::input(format!("{}: {e}", checkpoint.display())))?;
    let corpus = load_corpus_checked(cfg)?;
    let seed = cfg.train.seed;
    let eval_ids = eval_split(&corpus, cfg.train.eval_fraction, seed);
    if eval_ids.is_empty() {
        return Err(CliError::input(
            "no held-out questions; raise train.eval_fraction",
        ));
    }
    let tasks = build_tasks(&corpus, cfg.train.grid, cfg.train.candidates, seed)
        .map_err(|e| CliError::input(e.to_string()))?;
    let mut preds = Vec::new();
    for task in tasks.iter().filter(|t| eval_ids.contains(&t.instance_id)) {
        let mut best: Option<(f64, Vec<ToyAction>)> = None;
        for ep in policy.episodes(task) {
            let lp = policy
                .log_prob(task, &ep)
                .map_err(|e| CliError::Internal(e.to_string()))?;
            if best.as_ref().is_none_or(|(b, _)| lp > *b) {
                best = Some((lp, ep));
            }
        }
        let answer = best
            .and_then(|(_, ep)| match ep.last() {
                Some(ToyAction::Answer { candidate }) => task.candidates.get(*candidate).cloned(),
                _ => None,
            })
            .unwrap_or_default();
        preds.push(Prediction {
            id: task.instance_id.clone(),
            prediction: answer,
        });
    }
    Ok(preds)
}

pub fn eval(cfg: &PipelineConfig, args: &EvalArgs) -> Result<(), CliError> {
    let instances = load_instances(&cfg.paths.corpus.join(INSTANCES_FILE))?;
    let preds: Vec<Prediction> = match (&args.predictions, &args.checkpoint) {
        (Some(path), _) => {
            require(path, "pass an existing predictions file")?;
            read_jsonl(path)?
        }
        (None, Some(ckpt)) => {
            require(ckpt, "run `video-r4 train` first")?;
            let preds = policy_predictions(cfg, ckpt)?;
            write_jsonl(&out_dir(cfg)?.join(PREDICTIONS_FILE), &preds)?;
            preds
        }
        (None, None) => return Err(CliError::input("pass --predictions or --checkpoint")),
    };
    let set = PredictionSet::join(&preds, &instances)?;
    let report: MetricReport = evaluate(&set, DEFAULT_TAU)?;
    let table = report.to_table();
    std::fs::write(out_dir(cfg)?.join(EVAL_TABLE_FILE), &table)?;
    print!("{table}");
    write_report(cfg, "eval", EVAL_REPORT_FILE, report)
}

#[derive(Debug, Args)]
pub struct QcArgs {
    /// Trajectories under review; defaults to the synthesized file.
    #[arg(long)]
    pub trajectories: Option<PathBuf>,
    /// Decision log; defaults to `decisions.jsonl` in the output directory.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Overrides `qc.bind`.
    #[arg(long)]
    pub bind: Option<String>,
}

#[derive(Debug, Args)]
pub struct QcExportArgs {
    #[arg(long)]
    pub trajectories: Option<PathBuf>,
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Export directory; defaults to `curated/` in the output directory.
    #[arg(long)]
    pub dest: Option<PathBuf>,
}

/// Opens the review service over the configured files. A missing log is
/// created only when `create_log` is set.
pub fn open_service(
    cfg: &PipelineConfig,
    trajectories: Option<&Path>,
    log: Option<&Path>,
    create_log: bool,
) -> Result<QcService, CliError> {
    let out = cfg.paths.out.as_path();
    let input = trajectories
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out.join(TRAJECTORIES_FILE));
    require(&input, "run `video-r4 synthesize` or pass --trajectories")?;
    let log = log
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out.join(DECISION_LOG_FILE));
    let corpus = Arc::new(load_corpus(&cfg.paths.corpus)?);
    let evidence = load_evidence(cfg)?;
    let initial: Vec<Trajectory> = read_jsonl(&input)?;
    let log = (create_log || log.is_file()).then_some(log);
    if let Some(parent) = log.as_deref().and_then(Path::parent) {
        std::fs::create_dir_all(parent)?;
    }
    Ok(QcService::open(corpus, evidence, initial, log.as_deref())?)
}

pub fn qc_serve(cfg: &PipelineConfig, args: &QcArgs) -> Result<(), CliError> {
    let svc = open_service(cfg, args.trajectories.as_deref(), args.log.as_deref(), true)?;
    let bind = args.bind.clone().unwrap_or_else(|| cfg.qc.bind.clone());
    let runtime = tokio::runtime::Runtime::new()?;
    runtime
        .block_on(server::serve(Arc::new(svc), &bind))
        .map_err(|e| CliError::input(format!("{bind}: {e}")))
}

pub fn qc_export(cfg: &PipelineConfig, args: &QcExportArgs) -> Result<(), CliError> {
    let svc = open_service(
        cfg,
        args.trajectories.as_deref(),
        args.log.as_deref(),
        false,
    )?;
    let dest = args
        .dest
        .clone()
        .unwrap_or_else(|| cfg.paths.out.join(CURATED_DIR));
    let m: ExportManifest = svc.export_to(&dest)?;
    println!(
        "exported={} accepted={} edited={} dropped={} pending={} log_entries={} chain_head={}",
        m.exported,
        m.counts.accepted,
        m.counts.edited,
        m.counts.dropped,
        m.counts.pending,
        m.log_entries,
        m.chain_head
    );
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    /// Reports written under a different configuration than the current one.
    pub stale: Vec<String>,
    pub sections: BTreeMap<String, serde_json::Value>,
}

fn section(value: &serde_json::Value, keys: &[&str]) -> serde_json::Value {
    let mut out = serde_json::Map::new();
    for k in keys {
        if let Some(v) = value.get(*k) {
            out.insert((*k).to_string(), v.clone());
        }
    }
    serde_json::Value::Object(out)
}

/// Collects the headline numbers of every report present in the output
/// directory.
pub fn report(cfg: &PipelineConfig) -> Result<(), CliError> {
    let out = out_dir(cfg)?;
    let current = cfg.hash();
    let mut summary = RunSummary {
        config_hash: current.clone(),
        stale: Vec::new(),
        sections: BTreeMap::new(),
    };
    let reports: [(&str, &str, &[&str]); 5] = [
        (
            "match",
            MATCH_SUMMARY_FILE,
            &["instances", "matched", "unmatched", "rl_kept", "rl_dropped"],
        ),
        (
            "synthesize",
            SYNTH_SUMMARY_FILE,
            &["rendered", "valid", "quarantined"],
        ),
        (
            "validate",
            VALIDATE_SUMMARY_FILE,
            &["checked", "valid", "quarantined"],
        ),
        (
            "eval",
            EVAL_REPORT_FILE,
            &["count", "anls", "em", "macro_f1"],
        ),
        ("train", TRAIN_REPORT_FILE, &["seed"]),
    ];
    for (name, file, keys) in reports {
        let path = out.join(file);
        if !path.is_file() {
            continue;
        }
        let value: serde_json::Value = read_json(&path)?;
        if value.get("config_hash").and_then(|h| h.as_str()) != Some(current.as_str()) {
            summary.stale.push(name.to_string());
        }
        let mut s = section(&value, keys);
        if name == "train" {
            let runs: Vec<serde_json::Value> = value
                .get("runs")
                .and_then(|r| r.as_array())
                .map(|runs| {
                    runs.iter()
                        .map(|r| {
                            serde_json::json!({
                                "name": r.get("name"),
                                "eval": r.pointer("/report/eval"),
                            })
                        })
                        .collect()
                })
                .unwrap_or_default();
            s["runs"] = serde_json::Value::Array(runs);
        }
        summary.sections.insert(name.to_string(), s);
    }
    let manifest = out.join(CURATED_DIR).join(MANIFEST_FILE);
    if manifest.is_file() {
        let value: serde_json::Value = read_json(&manifest)?;
        summary.sections.insert(
            "qc".into(),
            section(&value, &["exported", "counts", "log_entries", "chain_head"]),
        );
    }
    if summary.sections.is_empty() {
        return Err(CliError::input(format!(
            "no reports found in {}",
            out.display()
        )));
    }
    println!("config {current}");
    for (name, value) in &summary.sections {
        println!("{name}: {value}");
    }
    if !summary.stale.is_empty() {
        println!("written under another config: {}", summary.stale.join(", "));
    }
    write_json(&out.join(REPORT_FILE), &summary)?;
    Ok(())
}
