//! Command-line front end: `extract`, `reflect`, `stage`, `check`,
//! `evaluate` and `report`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde_json::json;
use sha2::Digest;

use crate::backend::{Backend, BackendConfig, BackendKind, HttpChatBackend, ScriptedBackend};
use crate::constraints::{check_case, count_violations, ConstraintSet};
use crate::engine::{detect_cycles, run_one_by_one, run_reflection, ReflectionConfig, DEFAULT_MAX_PERIOD};
use crate::error::{Error, Result};
use crate::knowledge::{load_packages, KnowledgeBase};
use crate::metrics::{curve_from_store, last_round, read_truths, round_report, write_curve_csv, CiMethod, ClassMergeMap, GroundTruth, ReportOptions, DEFAULT_BOOTSTRAP_REPS};
use crate::prompt::{PromptKind, PromptSet, PromptTemplate};
use crate::schema::{read_cases, AttributeVector, CaseInput, RecordStore, TemplateSchema};
use crate::simulator::RepairSimulator;
use crate::tnm::{stage_record, FindingsRecord};

#[derive(Debug, Parser)]
#[command(name = "synoptic-reflect", version, about = "Extract synoptic variables from free-text reports and refine them by self-reflection")]
pub struct Cli {
    /// JSON file with default values for any flag (snake_case keys).
    /// Relative paths inside it are resolved against its directory.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Log more (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Round 0: ask for one variable at a time.
    Extract(ExtractArgs),
    /// Run the reflection loop from round-0 records.
    Reflect(ReflectArgs),
    /// Assign TNM categories and a stage group to findings.
    Stage(StageArgs),
    /// List constraint violations in a records file.
    Check(CheckArgs),
    /// Score one round against ground truth.
    Evaluate(EvaluateArgs),
    /// Per-round convergence table as CSV.
    Report(ReportArgs),
}

#[derive(Debug, Args, Default)]
pub struct PipelineArgs {
    /// Template JSON listing the variables and their standard values.
    #[arg(long)]
    pub template: Option<PathBuf>,
    /// Cases as JSON lines of `{"id", "text"}`.
    #[arg(long)]
    pub cases: Option<PathBuf>,
    /// Directory of markdown knowledge packages.
    #[arg(long)]
    pub knowledge: Option<PathBuf>,
    /// Backend configuration JSON.
    #[arg(long)]
    pub backend: Option<PathBuf>,
    /// Seed for simulated backends.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Knowledge sections per query; 0 disables retrieval.
    #[arg(long)]
    pub retrieval_k: Option<usize>,
    /// Character budget for retrieved knowledge.
    #[arg(long)]
    pub char_budget: Option<usize>,
    /// Cases processed in parallel.
    #[arg(long)]
    pub concurrency: Option<usize>,
    /// Replacement one-by-one prompt template.
    #[arg(long)]
    pub one_by_one_prompt: Option<PathBuf>,
    /// Replacement reflection prompt template.
    #[arg(long)]
    pub reflection_prompt: Option<PathBuf>,
    /// Replacement inconsistency examples text.
    #[arg(long)]
    pub examples: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    /// Round-0 records output (JSON lines).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run manifest output; defaults to `<out>.manifest.json`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReflectArgs {
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    /// Records holding each case's round-0 vector.
    #[arg(long)]
    pub records: Option<PathBuf>,
    /// Constraint set used by the repair simulator.
    #[arg(long)]
    pub constraints: Option<PathBuf>,
    /// Ground truth; adds metric columns to the curve.
    #[arg(long)]
    pub truths: Option<PathBuf>,
    /// Maximum reflection rounds.
    #[arg(long)]
    pub max_rounds: Option<u32>,
    /// Previous estimations shown in each reflection prompt.
    #[arg(long)]
    pub back_view: Option<u32>,
    /// Longest cycle looked for in non-converged cases.
    #[arg(long)]
    pub max_period: Option<usize>,
    /// Output directory for records.jsonl, trace.json, curve.csv,
    /// cycles.json and manifest.json.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StageArgs {
    /// Findings as JSON lines.
    #[arg(long)]
    pub findings: Option<PathBuf>,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    #[arg(long)]
    pub template: Option<PathBuf>,
    /// Constraint set; the bundled colorectal set when absent.
    #[arg(long)]
    pub constraints: Option<PathBuf>,
    #[arg(long)]
    pub records: Option<PathBuf>,
    /// Round to check; each case's latest round when absent.
    #[arg(long)]
    pub round: Option<u32>,
    /// Print total violations per round instead of the violations.
    #[arg(long)]
    pub per_round: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CiKind {
    Wilson,
    Bootstrap,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub template: Option<PathBuf>,
    #[arg(long)]
    pub records: Option<PathBuf>,
    /// Ground truth as JSON lines of `{"case_id", "values", "conflicting"?}`.
    #[arg(long)]
    pub truths: Option<PathBuf>,
    /// Round to score; the last stored round when absent.
    #[arg(long)]
    pub round: Option<u32>,
    /// JSON object `{variable: {class: merged_class}}`.
    #[arg(long)]
    pub merge: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub ci: Option<CiKind>,
    /// Seed for bootstrap intervals.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub reps: Option<usize>,
    /// Include confusion matrices in the report.
    #[arg(long)]
    pub confusion: bool,
    /// JSON report output; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the per-round curve CSV here.
    #[arg(long)]
    pub curve: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub template: Option<PathBuf>,
    #[arg(long)]
    pub records: Option<PathBuf>,
    #[arg(long)]
    pub truths: Option<PathBuf>,
    #[arg(long)]
    pub merge: Option<PathBuf>,
    /// CSV output; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Defaults loaded from `--config`. Flags win over these.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub template: Option<PathBuf>,
    pub cases: Option<PathBuf>,
    pub knowledge: Option<PathBuf>,
    pub constraints: Option<PathBuf>,
    pub backend: Option<PathBuf>,
    pub records: Option<PathBuf>,
    pub truths: Option<PathBuf>,
    pub merge: Option<PathBuf>,
    pub findings: Option<PathBuf>,
    pub one_by_one_prompt: Option<PathBuf>,
    pub reflection_prompt: Option<PathBuf>,
    pub examples: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub max_rounds: Option<u32>,
    pub back_view: Option<u32>,
    pub max_period: Option<usize>,
    pub retrieval_k: Option<usize>,
    pub char_budget: Option<usize>,
    pub concurrency: Option<usize>,
    pub seed: Option<u64>,
    pub round: Option<u32>,
    pub ci: Option<CiKind>,
    pub reps: Option<usize>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.template,
            &mut cfg.cases,
            &mut cfg.knowledge,
            &mut cfg.constraints,
            &mut cfg.backend,
            &mut cfg.records,
            &mut cfg.truths,
            &mut cfg.merge,
            &mut cfg.findings,
            &mut cfg.one_by_one_prompt,
            &mut cfg.reflection_prompt,
            &mut cfg.examples,
            &mut cfg.out,
            &mut cfg.out_dir,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }
}

fn required(value: Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    value.ok_or_else(|| Error::Input(format!("missing --{flag}")))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn file_digest(path: &Path) -> Result<String> {
    std::fs::read(path).map(|b| hex::encode(sha2::Sha256::digest(b))).map_err(|e| Error::io(path, e))
}

fn load_template(path: &Path) -> Result<TemplateSchema> {
    Ok(TemplateSchema::load(open(path)?)?)
}

fn load_store(path: &Path) -> Result<RecordStore> {
    Ok(RecordStore::read_jsonl(open(path)?)?)
}

fn load_constraints(path: Option<&Path>, schema: &TemplateSchema) -> Result<ConstraintSet> {
    Ok(match path {
        Some(p) => ConstraintSet::load(open(p)?, schema)?,
        None => ConstraintSet::crc_default(schema)?,
    })
}

fn load_truths(path: &Path) -> Result<Vec<GroundTruth>> {
    Ok(read_truths(open(path)?)?)
}

fn load_merges(path: Option<&Path>) -> Result<BTreeMap<String, ClassMergeMap>> {
    let Some(path) = path else {
        return Ok(BTreeMap::new());
    };
    let raw: BTreeMap<String, BTreeMap<String, String>> = serde_json::from_str(&read_text(path)?)
        .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    raw.into_iter()
        .map(|(var, m)| Ok((var, ClassMergeMap::new(m)?)))
        .collect()
}

fn write_out(path: Option<&Path>, stdout: &mut dyn Write, text: &str) -> Result<()> {
    match path {
        Some(p) => write_text(p, text),
        None => stdout.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e)),
    }
}

/// Everything needed to call a model for a pipeline command.
struct Pipeline {
    schema: TemplateSchema,
    template_path: PathBuf,
    cases: Vec<CaseInput>,
    cases_path: PathBuf,
    kb: KnowledgeBase,
    prompts: PromptSet,
    backend: Box<dyn Backend>,
    backend_config: BackendConfig,
    seed: Option<u64>,
    config: ReflectionConfig,
}

fn resolve_pipeline(
    args: PipelineArgs,
    cfg: &RunConfig,
    constraints: Option<&Path>,
    truths: Option<&Path>,
    reflection: ReflectionConfig,
) -> Result<Pipeline> {
    let template_path = required(args.template.or(cfg.template.clone()), "template")?;
    let cases_path = required(args.cases.or(cfg.cases.clone()), "cases")?;
    let backend_path = required(args.backend.or(cfg.backend.clone()), "backend")?;
    let schema = load_template(&template_path)?;
    let cases = read_cases(open(&cases_path)?)?;
    let kb = match args.knowledge.or(cfg.knowledge.clone()) {
        Some(dir) => load_packages(&dir)?,
        None => KnowledgeBase::default(),
    };

    let mut prompts = PromptSet::default();
    if let Some(p) = args.one_by_one_prompt.or(cfg.one_by_one_prompt.clone()) {
        prompts.one_by_one = PromptTemplate::new(PromptKind::OneByOne, read_text(&p)?)?;
    }
    if let Some(p) = args.reflection_prompt.or(cfg.reflection_prompt.clone()) {
        prompts.reflection = PromptTemplate::new(PromptKind::Reflection, read_text(&p)?)?;
    }
    if let Some(p) = args.examples.or(cfg.examples.clone()) {
        prompts.inconsistency_examples = read_text(&p)?;
    }

    let config = ReflectionConfig {
        retrieval_k: args.retrieval_k.or(cfg.retrieval_k).unwrap_or(reflection.retrieval_k),
        char_budget: args.char_budget.or(cfg.char_budget).unwrap_or(reflection.char_budget),
        concurrency: args.concurrency.or(cfg.concurrency).unwrap_or(reflection.concurrency),
        ..reflection
    };
    config.validate()?;

    let mut backend_config: BackendConfig = serde_json::from_str(&read_text(&backend_path)?)
        .map_err(|e| Error::Input(format!("{}: {e}", backend_path.display())))?;
    let seed = args.seed.or(cfg.seed).or(backend_config.seed);
    backend_config.seed = seed;
    backend_config.validate()?;
    let base = backend_path.parent().unwrap_or(Path::new(""));
    let backend: Box<dyn Backend> = match backend_config.kind {
        BackendKind::HttpChat => Box::new(HttpChatBackend::new(backend_config.clone())?),
        BackendKind::Scripted => {
            let script = backend_config
                .script
                .as_ref()
                .ok_or_else(|| Error::Input("scripted backend needs `script`".into()))?;
            Box::new(ScriptedBackend::read_jsonl(open(&base.join(script))?)?)
        }
        BackendKind::RepairSimulator => {
            let seed = seed.ok_or_else(|| Error::Input("repair_simulator needs --seed".into()))?;
            let constraints = load_constraints(constraints, &schema)?;
            let truths_path = truths
                .map(Path::to_path_buf)
                .or_else(|| backend_config.truths.as_ref().map(|t| base.join(t)));
            let truths: BTreeMap<String, AttributeVector> = match truths_path {
                Some(p) => load_truths(&p)?
                    .into_iter()
                    .map(|t| {
                        let v = t.values.into_iter().fold(AttributeVector::new(), |v, (k, x)| v.with_value(k, x));
                        (t.case_id, v)
                    })
                    .collect(),
                None => BTreeMap::new(),
            };
            Box::new(RepairSimulator::new(schema.clone(), constraints, seed).with_truths(truths))
        }
    };

    Ok(Pipeline {
        schema,
        template_path,
        cases,
        cases_path,
        kb,
        prompts,
        backend,
        backend_config,
        seed,
        config,
    })
}

impl Pipeline {
    fn manifest(&self, command: &str, extra: serde_json::Value) -> Result<serde_json::Value> {
        let mut m = json!({
            "command": command,
            "tool_version": env!("CARGO_PKG_VERSION"),
            "config": self.config,
            "seed": self.seed,
            "template": {"path": self.template_path, "sha256": file_digest(&self.template_path)?},
            "cases": {"path": self.cases_path, "sha256": file_digest(&self.cases_path)?},
            "knowledge_digest": self.kb.digest(),
            "knowledge_files": self.kb.manifest,
            "backend_config": self.backend_config.redacted(),
            "backend": self.backend.describe(),
            "prompt_digests": self.prompts.digests(),
        });
        if let (Some(obj), serde_json::Value::Object(more)) = (m.as_object_mut(), extra) {
            obj.extend(more);
        }
        Ok(m)
    }
}

fn pretty(v: &serde_json::Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json");
    s.push('\n');
    s
}

pub fn cmd_extract(args: ExtractArgs, cfg: &RunConfig) -> Result<()> {
    let out = required(args.out.or(cfg.out.clone()), "out")?;
    let p = resolve_pipeline(args.pipeline, cfg, None, None, ReflectionConfig::default())?;
    let baseline = run_one_by_one(p.backend.as_ref(), &p.kb, &p.schema, &p.cases, &p.prompts, &p.config)?;
    for f in &baseline.failures {
        tracing::error!(case = %f.case_id, "{}", f.message);
    }
    let mut w = create(&out)?;
    baseline.store.write_jsonl(&mut w)?;
    w.flush().map_err(|e| Error::io(&out, e))?;
    let manifest_path = args
        .manifest
        .unwrap_or_else(|| PathBuf::from(format!("{}.manifest.json", out.display())));
    let manifest = p.manifest(
        "extract",
        json!({"output": out, "calls": baseline.call_log.len(), "failures": baseline.failures}),
    )?;
    write_text(&manifest_path, &pretty(&manifest))?;
    if baseline.store.is_empty() && !baseline.failures.is_empty() {
        return Err(Error::BackendFailed(baseline.failures[0].message.clone()));
    }
    Ok(())
}

pub fn cmd_reflect(args: ReflectArgs, cfg: &RunConfig) -> Result<()> {
    let out_dir = required(args.out_dir.or(cfg.out_dir.clone()), "out-dir")?;
    let records = required(args.records.or(cfg.records.clone()), "records")?;
    let constraints = args.constraints.or(cfg.constraints.clone());
    let truths = args.truths.or(cfg.truths.clone());
    let base = ReflectionConfig {
        max_rounds: args.max_rounds.or(cfg.max_rounds).unwrap_or(crate::engine::DEFAULT_MAX_ROUNDS),
        back_view: args.back_view.or(cfg.back_view).unwrap_or(crate::engine::DEFAULT_BACK_VIEW),
        ..Default::default()
    };
    let max_period = args.max_period.or(cfg.max_period).unwrap_or(DEFAULT_MAX_PERIOD);
    let p = resolve_pipeline(args.pipeline, cfg, constraints.as_deref(), truths.as_deref(), base)?;

    let full = load_store(&records)?;
    let mut store = RecordStore::new();
    for case in full.case_ids() {
        store.push_round(case, 0, full.get(case, 0)?.clone())?;
    }
    let trace = run_reflection(p.backend.as_ref(), &p.config, &p.schema, &p.kb, &p.cases, &p.prompts, store)?;

    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let mut w = create(&out_dir.join("records.jsonl"))?;
    trace.store.write_jsonl(&mut w)?;
    w.flush().map_err(|e| Error::io(out_dir.join("records.jsonl"), e))?;
    write_text(&out_dir.join("trace.json"), &pretty(&trace.summary_json()))?;

    let truths = truths.as_deref().map(load_truths).transpose()?;
    let rows = curve_from_store(&trace.store, &p.schema, truths.as_deref(), &ReportOptions::default())?;
    write_curve_csv(&rows, create(&out_dir.join("curve.csv"))?)?;

    let cycles: Vec<serde_json::Value> = trace
        .store
        .case_ids()
        .filter(|c| trace.store.converged_at(c).unwrap_or(0) == 0)
        .filter_map(|c| detect_cycles(&trace.store, c, max_period).ok())
        .map(|r| r.to_json())
        .collect();
    write_text(&out_dir.join("cycles.json"), &pretty(&json!(cycles)))?;

    let manifest = p.manifest(
        "reflect",
        json!({"records": {"path": records, "sha256": file_digest(&records)?}, "max_period": max_period}),
    )?;
    write_text(&out_dir.join("manifest.json"), &pretty(&manifest))?;
    if !trace.call_log.is_empty() && trace.backend_failures == trace.call_log.len() {
        return Err(Error::BackendFailed(trace.failures[0].message.clone()));
    }
    Ok(())
}

pub fn cmd_stage(args: StageArgs, cfg: &RunConfig, stdout: &mut dyn Write) -> Result<()> {
    let path = required(args.findings.or(cfg.findings.clone()), "findings")?;
    let text = read_text(&path)?;
    let mut out = String::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: FindingsRecord = serde_json::from_str(line)
            .map_err(|e| Error::Input(format!("{} line {}: {e}", path.display(), i + 1)))?;
        let staged = stage_record(&rec)?;
        out.push_str(&serde_json::to_string(&staged).expect("json"));
        out.push('\n');
    }
    write_out(args.out.as_deref(), stdout, &out)
}

pub fn cmd_check(args: CheckArgs, cfg: &RunConfig, stdout: &mut dyn Write) -> Result<()> {
    let schema = load_template(&required(args.template.or(cfg.template.clone()), "template")?)?;
    let store = load_store(&required(args.records.or(cfg.records.clone()), "records")?)?;
    let set = load_constraints(args.constraints.or(cfg.constraints.clone()).as_deref(), &schema)?;
    let mut out = String::new();
    if args.per_round {
        for (round, n) in count_violations(&store, &set) {
            out.push_str(&format!("{}\n", json!({"round": round, "violations": n})));
        }
        return write_out(args.out.as_deref(), stdout, &out);
    }
    let mut total = 0;
    for case in store.case_ids() {
        let (round, v) = match args.round.or(cfg.round) {
            Some(r) => (r, store.get(case, r)?),
            None => store.latest(case)?,
        };
        for violation in check_case(v, &set, case, round) {
            total += 1;
            out.push_str(&serde_json::to_string(&violation).expect("json"));
            out.push('\n');
        }
    }
    tracing::info!(total, "constraint check finished");
    write_out(args.out.as_deref(), stdout, &out)
}

fn report_options(
    merge: Option<&Path>,
    ci: Option<CiKind>,
    seed: Option<u64>,
    reps: Option<usize>,
    confusion: bool,
) -> Result<ReportOptions> {
    let ci = match ci.unwrap_or(CiKind::Wilson) {
        CiKind::Wilson => CiMethod::Wilson,
        CiKind::Bootstrap => CiMethod::Bootstrap {
            seed: seed.ok_or_else(|| Error::Input("bootstrap intervals need --seed".into()))?,
            reps: reps.unwrap_or(DEFAULT_BOOTSTRAP_REPS),
        },
    };
    Ok(ReportOptions {
        merges: load_merges(merge)?,
        ci,
        include_confusion: confusion,
    })
}

pub fn cmd_evaluate(args: EvaluateArgs, cfg: &RunConfig, stdout: &mut dyn Write) -> Result<()> {
    let schema = load_template(&required(args.template.or(cfg.template.clone()), "template")?)?;
    let store = load_store(&required(args.records.or(cfg.records.clone()), "records")?)?;
    let truths = load_truths(&required(args.truths.or(cfg.truths.clone()), "truths")?)?;
    let opts = report_options(
        args.merge.or(cfg.merge.clone()).as_deref(),
        args.ci.or(cfg.ci),
        args.seed.or(cfg.seed),
        args.reps.or(cfg.reps),
        args.confusion,
    )?;
    let round = match args.round.or(cfg.round) {
        Some(r) => r,
        None => last_round(&store).ok_or_else(|| Error::Input("records file is empty".into()))?,
    };
    let report = round_report(&store, &schema, &truths, round, &opts)?;
    if let Some(path) = &args.curve {
        let rows = curve_from_store(&store, &schema, Some(&truths), &opts)?;
        write_curve_csv(&rows, create(path)?)?;
    }
    let text = pretty(&serde_json::to_value(&report).expect("report serializes"));
    write_out(args.out.as_deref(), stdout, &text)
}

pub fn cmd_report(args: ReportArgs, cfg: &RunConfig, stdout: &mut dyn Write) -> Result<()> {
    let schema = load_template(&required(args.template.or(cfg.template.clone()), "template")?)?;
    let store = load_store(&required(args.records.or(cfg.records.clone()), "records")?)?;
    let truths = args.truths.or(cfg.truths.clone()).as_deref().map(load_truths).transpose()?;
    let opts = report_options(args.merge.or(cfg.merge.clone()).as_deref(), None, None, None, false)?;
    let rows = curve_from_store(&store, &schema, truths.as_deref(), &opts)?;
    let mut buf = Vec::new();
    write_curve_csv(&rows, &mut buf)?;
    write_out(args.out.as_deref(), stdout, &String::from_utf8(buf).expect("csv is utf-8"))
}

/// Runs a parsed command line, writing any stdout output to `stdout`.
pub fn run(cli: Cli, stdout: &mut dyn Write) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::Extract(a) => cmd_extract(a, &cfg),
        Command::Reflect(a) => cmd_reflect(a, &cfg),
        Command::Stage(a) => cmd_stage(a, &cfg, stdout),
        Command::Check(a) => cmd_check(a, &cfg, stdout),
        Command::Evaluate(a) => cmd_evaluate(a, &cfg, stdout),
        Command::Report(a) => cmd_report(a, &cfg, stdout),
    }
}

/// Parses `args` (program name first) and runs them.
pub fn run_from<I, T>(args: I, stdout: &mut dyn Write) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::Input(e.to_string()))?;
    run(cli, stdout)
}
