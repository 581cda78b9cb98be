//! The `lmkex` command line.
//!
//! Exit codes: 0 success, 1 not found or output failure, 2 configuration
//! or input error, 3 extraction exhausted, 4 backend failure.

use std::ffi::OsString;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use chrono::Utc;
use clap::{Parser, Subcommand};
use lmkex_core::controller::{
    explore, extract, Clock, ExtractError, ExtractionReport, FinalStatus, FixedClock,
};
use lmkex_core::model::{AssertionId, AssertionStatus, RelationKind, StrategyKind, Timestamp};
use lmkex_core::prompt::PromptTemplate;
use lmkex_core::store::{AssertionFilter, KnowledgeStore};
use lmkex_core::usage::{LmProfile, UsageKey};
use lmkex_core::verify::{apply_review, human_review, review_line, ReviewChannel, ReviewDecision};
use serde::{Deserialize, Serialize};

use crate::config::{Config, DEFAULT_CONFIG};
use crate::files::{
    self, format_time, load_binding_sets, load_need, load_store, load_templates, load_usage,
    save_store, save_usage, AssertionRecord, NeedRecord, PromptLine, UsageModel,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_NOT_FOUND: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_EXHAUSTED: i32 = 3;
pub const EXIT_BACKEND: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "lmkex", version, about = "Extract task knowledge from language models")]
pub struct Cli {
    /// Configuration file.
    #[arg(long, global = true, default_value = DEFAULT_CONFIG)]
    pub config: PathBuf,
    /// Use only this LM.
    #[arg(long, global = true, value_name = "NAME")]
    pub backend: Option<String>,
    /// Samples per generative prompt.
    #[arg(long, global = true, value_name = "K")]
    pub samples: Option<u32>,
    /// Machine-readable output.
    #[arg(long, global = true)]
    pub json: bool,
    /// Ask a human about every extracted assertion.
    #[arg(long, global = true)]
    pub review: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the extraction loop for a knowledge need.
    Extract { need: PathBuf },
    /// Prompt one LM with every template and binding set, updating its usage record.
    Explore {
        lm: String,
        /// JSON array of {variable: term} objects.
        bindings: PathBuf,
        /// Template file; defaults to the built-ins for the LM's class.
        #[arg(long)]
        templates: Option<PathBuf>,
    },
    /// Accept, reject or amend potential assertions.
    Review,
    /// Inspect or move the knowledge store.
    Store {
        #[command(subcommand)]
        action: StoreCommand,
    },
}

#[derive(Debug, Subcommand)]
pub enum StoreCommand {
    List {
        #[arg(long)]
        status: Option<AssertionStatus>,
        #[arg(long)]
        relation: Option<RelationKind>,
        #[arg(long)]
        subject: Option<String>,
        #[arg(long)]
        min_confidence: Option<f64>,
    },
    Show { id: String },
    Export {
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Merge a store file into the configured store.
    Import { file: PathBuf },
}

/// Wall-clock time with real sleeps between retries.
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> Timestamp {
        Utc::now()
    }

    fn sleep_ms(&self, ms: u64) {
        std::thread::sleep(std::time::Duration::from_millis(ms));
    }
}

#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

fn fail(code: i32, message: impl ToString) -> Failure {
    Failure {
        code,
        message: message.to_string(),
    }
}

fn config_err(e: impl ToString) -> Failure {
    fail(EXIT_CONFIG, e)
}

fn io_err(e: std::io::Error) -> Failure {
    fail(EXIT_NOT_FOUND, e)
}

type Outcome = Result<i32, Failure>;

/// Parse `args` and run. Reads review answers from `input`.
pub fn run<I, T>(args: I, input: &mut dyn BufRead, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let rendered = e.render().to_string();
            let _ = if e.use_stderr() {
                write!(err, "{rendered}")
            } else {
                write!(out, "{rendered}")
            };
            return code;
        }
    };
    match dispatch(&cli, input, out) {
        Ok(code) => code,
        Err(f) => {
            let _ = writeln!(err, "lmkex: {}", f.message);
            f.code
        }
    }
}

fn dispatch(cli: &Cli, input: &mut dyn BufRead, out: &mut dyn Write) -> Outcome {
    match &cli.command {
        Command::Extract { need } => cmd_extract(cli, need, input, out),
        Command::Explore {
            lm,
            bindings,
            templates,
        } => cmd_explore(cli, lm, bindings, templates.as_deref(), out),
        Command::Review => cmd_review(cli, input, out),
        Command::Store { action } => cmd_store(cli, action, out),
    }
}

fn load_config(cli: &Cli) -> Result<Config, Failure> {
    let mut config = Config::load(&cli.config).map_err(config_err)?;
    if let Some(b) = &cli.backend {
        config.restrict_to(b).map_err(config_err)?;
    }
    if let Some(k) = cli.samples {
        if k == 0 {
            return Err(config_err("--samples must be at least 1"));
        }
        config.extraction.policy.n_samples = k;
    }
    if cli.review {
        config.extraction.policy.require_human = true;
    }
    Ok(config)
}

fn clock_for(config: &Config) -> Box<dyn Clock> {
    match config.fixed_time {
        Some(t) => Box::new(FixedClock(t)),
        None => Box::new(SystemClock),
    }
}

fn open_store(config: &Config) -> Result<KnowledgeStore, Failure> {
    load_store(&config.store_path, config.verification_threshold).map_err(config_err)
}

/// Current profiles from the config, plus any others already on file.
fn merged_usage(config: &Config, previous: &UsageModel, records: lmkex_core::usage::UsageRecords) -> UsageModel {
    let mut profiles: Vec<LmProfile> = config.profiles.clone();
    for p in &previous.profiles {
        if !profiles.iter().any(|q| q.lm_id == p.lm_id) {
            profiles.push(p.clone());
        }
    }
    profiles.sort_by(|a, b| a.lm_id.cmp(&b.lm_id));
    UsageModel { profiles, records }
}

struct LineChannel<'a> {
    input: &'a mut dyn BufRead,
    out: &'a mut dyn Write,
}

impl ReviewChannel for LineChannel<'_> {
    fn ask(&mut self, line: &str) -> Option<String> {
        writeln!(self.out, "{line}").ok()?;
        self.out.flush().ok()?;
        let mut answer = String::new();
        match self.input.read_line(&mut answer) {
            Ok(0) | Err(_) => None,
            Ok(_) => Some(answer.trim_end_matches(['\r', '\n']).to_string()),
        }
    }
}

#[derive(Debug, Default, PartialEq, Eq)]
struct ReviewTally {
    accepted: usize,
    rejected: usize,
    amended: usize,
    /// Assertions created by amendments.
    created: Vec<AssertionId>,
}

fn review_pending(
    store: &mut KnowledgeStore,
    ids: Option<&[AssertionId]>,
    input: &mut dyn BufRead,
    out: &mut dyn Write,
    now: Timestamp,
) -> Result<ReviewTally, Failure> {
    let pending: Vec<_> = store
        .pending()
        .into_iter()
        .filter(|a| ids.is_none_or(|ids| ids.contains(&a.id)))
        .cloned()
        .collect();
    let outcomes = human_review(&pending, &mut LineChannel { input, out });
    let mut tally = ReviewTally::default();
    for o in &outcomes {
        match o.decision {
            ReviewDecision::Accept => tally.accepted += 1,
            ReviewDecision::Reject => tally.rejected += 1,
            ReviewDecision::Amend(_) => tally.amended += 1,
        }
    }
    tally.created = apply_review(store, &outcomes, now).map_err(config_err)?;
    Ok(tally)
}

/// Extraction report in machine-readable form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportJson {
    pub need: NeedRecord,
    pub attempts: Vec<AttemptJson>,
    pub final_status: String,
    pub encoded_assertion_ids: Vec<String>,
    pub assertions: Vec<AssertionRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptJson {
    pub lm_id: String,
    pub strategy: String,
    pub prompt_id: String,
    pub template_id: Option<String>,
    pub interpreted_count: usize,
    pub verified_count: usize,
    pub rejected_count: usize,
    pub error: Option<String>,
}

fn report_json(report: &ExtractionReport, store: &KnowledgeStore) -> ReportJson {
    ReportJson {
        need: NeedRecord::from_need(&report.need),
        attempts: report
            .attempts
            .iter()
            .map(|a| AttemptJson {
                lm_id: a.lm_id.clone(),
                strategy: a.strategy.as_str().into(),
                prompt_id: a.prompt_id.as_str().into(),
                template_id: a.template_id.clone(),
                interpreted_count: a.interpreted_count,
                verified_count: a.verified_count,
                rejected_count: a.rejected_count,
                error: a.error.as_ref().map(|e| e.to_string()),
            })
            .collect(),
        final_status: report.final_status.as_str().into(),
        encoded_assertion_ids: report.encoded_assertion_ids.iter().map(|i| i.as_str().into()).collect(),
        assertions: report
            .encoded_assertion_ids
            .iter()
            .filter_map(|id| store.get(id))
            .map(AssertionRecord::from_assertion)
            .collect(),
    }
}

fn print_json(out: &mut dyn Write, value: &impl Serialize) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| fail(EXIT_NOT_FOUND, e))?;
    writeln!(out, "{text}").map_err(io_err)
}

fn describe(a: &lmkex_core::model::Assertion) -> String {
    format!("{} {} {:.3} {}", a.id, a.status, a.confidence, review_line(a))
}

fn cmd_extract(cli: &Cli, need_path: &Path, input: &mut dyn BufRead, out: &mut dyn Write) -> Outcome {
    let config = load_config(cli)?;
    let need = load_need(need_path).map_err(config_err)?;
    let backends = config.build_backends().map_err(config_err)?;
    let mut store = open_store(&config)?;
    let usage = load_usage(&config.usage_model_path).map_err(config_err)?;
    let mut records = usage.records.clone();
    let clock = clock_for(&config);

    let mut report = match extract(&need, &config.extraction, &backends, &mut store, &mut records, clock.as_ref()) {
        Ok(r) => r,
        Err(e @ (ExtractError::Config(_) | ExtractError::Select(_))) => return Err(config_err(e)),
        Err(e) => return Err(fail(EXIT_CONFIG, e)),
    };
    if cli.review {
        let ids = report.encoded_assertion_ids.clone();
        let tally = review_pending(&mut store, Some(&ids), input, out, clock.now())?;
        report.encoded_assertion_ids.extend(tally.created);
        let verified = report
            .encoded_assertion_ids
            .iter()
            .filter(|id| store.get(id).is_some_and(|a| a.status == AssertionStatus::Verified))
            .count();
        if verified >= need.min_verified.max(1) as usize {
            report.final_status = FinalStatus::Satisfied;
        }
    }
    save_store(&config.store_path, &store).map_err(config_err)?;
    save_usage(&config.usage_model_path, &merged_usage(&config, &usage, records)).map_err(config_err)?;

    if cli.json {
        print_json(out, &report_json(&report, &store))?;
    } else {
        let w = |out: &mut dyn Write, s: String| writeln!(out, "{s}").map_err(io_err);
        w(out, format!("need: {} ({})", need.task_name, need.pscm_function))?;
        for (i, a) in report.attempts.iter().enumerate() {
            let template = a.template_id.as_deref().map(|t| format!(" [{t}]")).unwrap_or_default();
            let mut line = format!(
                "attempt {}: {} {} {}{}: {} interpreted, {} verified, {} rejected",
                i + 1,
                a.lm_id,
                a.strategy,
                a.prompt_id,
                template,
                a.interpreted_count,
                a.verified_count,
                a.rejected_count
            );
            if let Some(e) = &a.error {
                line.push_str(&format!(" ({e})"));
            }
            w(out, line)?;
        }
        w(out, format!("status: {}", report.final_status.as_str()))?;
        w(out, format!("encoded: {}", report.encoded_assertion_ids.len()))?;
        for id in &report.encoded_assertion_ids {
            if let Some(a) = store.get(id) {
                w(out, format!("  {}", describe(a)))?;
            }
        }
    }
    Ok(match report.final_status {
        FinalStatus::Satisfied => EXIT_OK,
        FinalStatus::Exhausted => EXIT_EXHAUSTED,
        FinalStatus::Error => EXIT_BACKEND,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExploreRow {
    pub template_id: String,
    pub pscm_function: String,
    /// Index into the bindings file.
    pub binding: usize,
    pub prompt_id: Option<String>,
    pub parsed: usize,
    pub success: bool,
    pub capability: f64,
    pub error: Option<String>,
}

fn cmd_explore(
    cli: &Cli,
    lm: &str,
    bindings: &Path,
    templates: Option<&Path>,
    out: &mut dyn Write,
) -> Outcome {
    let mut config = load_config(cli)?;
    config.restrict_to(lm).map_err(config_err)?;
    let class = config.profiles[0].model_class;
    let templates: Vec<PromptTemplate> = match templates {
        Some(p) => load_templates(p).map_err(config_err)?,
        None => config
            .extraction
            .templates
            .iter()
            .filter(|t| t.target_class() == class)
            .cloned()
            .collect(),
    };
    let binding_sets = load_binding_sets(bindings).map_err(config_err)?;
    let backends = config.build_backends().map_err(config_err)?;
    let mut store = open_store(&config)?;
    let usage = load_usage(&config.usage_model_path).map_err(config_err)?;
    let mut records = usage.records.clone();
    let clock = clock_for(&config);
    let report = explore(
        lm,
        &templates,
        &binding_sets,
        &config.extraction,
        &backends,
        &mut store,
        &mut records,
        clock.as_ref(),
    )
    .map_err(config_err)?;
    save_store(&config.store_path, &store).map_err(config_err)?;
    save_usage(&config.usage_model_path, &merged_usage(&config, &usage, records.clone())).map_err(config_err)?;

    let rows: Vec<ExploreRow> = report
        .items
        .iter()
        .map(|item| {
            let function = templates
                .iter()
                .find(|t| t.id() == item.template_id)
                .map(|t| t.pscm_function())
                .expect("item comes from a template");
            let key = UsageKey::new(lm, StrategyKind::Template, function);
            ExploreRow {
                template_id: item.template_id.clone(),
                pscm_function: function.as_str().into(),
                binding: item.binding_index,
                prompt_id: item.prompt_id.as_ref().map(|p| p.as_str().into()),
                parsed: item.parsed,
                success: item.parsed > 0,
                capability: records.estimate_capability(&key),
                error: item.error.clone(),
            }
        })
        .collect();
    if cli.json {
        print_json(out, &rows)?;
    } else {
        writeln!(
            out,
            "{:<14} {:<26} {:>7} {:>6} {:<8} {:>10}",
            "template", "function", "binding", "parsed", "outcome", "capability"
        )
        .map_err(io_err)?;
        for r in &rows {
            let outcome = match (&r.prompt_id, r.success) {
                (None, _) => "skipped",
                (Some(_), true) => "success",
                (Some(_), false) => "failure",
            };
            writeln!(
                out,
                "{:<14} {:<26} {:>7} {:>6} {:<8} {:>10.3}",
                r.template_id, r.pscm_function, r.binding, r.parsed, outcome, r.capability
            )
            .map_err(io_err)?;
        }
    }
    Ok(EXIT_OK)
}

fn cmd_review(cli: &Cli, input: &mut dyn BufRead, out: &mut dyn Write) -> Outcome {
    let config = load_config(cli)?;
    let mut store = open_store(&config)?;
    if store.pending().is_empty() {
        writeln!(out, "nothing to review").map_err(io_err)?;
        return Ok(EXIT_OK);
    }
    let now = clock_for(&config).now();
    let tally = review_pending(&mut store, None, input, out, now)?;
    save_store(&config.store_path, &store).map_err(config_err)?;
    writeln!(
        out,
        "reviewed {}: {} accepted, {} rejected, {} amended",
        tally.accepted + tally.rejected + tally.amended,
        tally.accepted,
        tally.rejected,
        tally.amended
    )
    .map_err(io_err)?;
    Ok(EXIT_OK)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShowJson {
    pub assertion: AssertionRecord,
    pub prompt: Option<PromptLine>,
}

fn cmd_store(cli: &Cli, action: &StoreCommand, out: &mut dyn Write) -> Outcome {
    let config = load_config(cli)?;
    let mut store = open_store(&config)?;
    match action {
        StoreCommand::List {
            status,
            relation,
            subject,
            min_confidence,
        } => {
            let mut filter = AssertionFilter::default();
            if let Some(s) = status {
                filter = filter.status(*s);
            }
            if let Some(r) = relation {
                filter = filter.relation(*r);
            }
            if let Some(s) = subject {
                filter = filter.subject(s);
            }
            if let Some(c) = min_confidence {
                filter = filter.min_confidence(*c);
            }
            let hits = store.query(&filter);
            if cli.json {
                let records: Vec<AssertionRecord> = hits.iter().map(|a| AssertionRecord::from_assertion(a)).collect();
                print_json(out, &records)?;
            } else {
                writeln!(out, "{:<16} {:<9} {:>10}  triple", "id", "status", "confidence").map_err(io_err)?;
                for a in hits {
                    writeln!(out, "{:<16} {:<9} {:>10.3}  {}", a.id, a.status, a.confidence, review_line(a))
                        .map_err(io_err)?;
                }
            }
            Ok(EXIT_OK)
        }
        StoreCommand::Show { id } => {
            let Some(a) = store.get(&AssertionId::new(id.as_str())) else {
                return Err(fail(EXIT_NOT_FOUND, format!("no assertion {id}")));
            };
            let prompt = store.prompt(&a.provenance.prompt_id);
            if cli.json {
                print_json(
                    out,
                    &ShowJson {
                        assertion: AssertionRecord::from_assertion(a),
                        prompt: prompt.map(PromptLine::from_record),
                    },
                )?;
                return Ok(EXIT_OK);
            }
            let mut lines = vec![
                format!("id: {}", a.id),
                format!("subject: {}", a.subject.surface()),
                format!("relation: {}", a.relation),
                format!("object: {} ({})", a.object.surface(), a.object.kind_str()),
            ];
            if let Some(i) = a.step_index {
                lines.push(format!("step: {i}"));
            }
            lines.extend([
                format!("status: {}", a.status),
                format!("confidence: {:.3}", a.confidence),
                format!("created: {}", format_time(&a.created_at)),
                format!("updated: {}", format_time(&a.updated_at)),
                format!("lm: {}", a.provenance.lm_id),
                format!("strategy: {}", a.provenance.strategy.as_str()),
                format!("samples: {}", a.provenance.sample_count),
                format!("prompt: {}", a.provenance.prompt_id),
            ]);
            if let Some(p) = prompt {
                lines.push(format!("  text: {:?}", p.text));
                lines.push(format!("  sent: {}", format_time(&p.created_at)));
                lines.push(format!(
                    "  function: {}",
                    p.pscm_function.map(|f| f.as_str()).unwrap_or("-")
                ));
                let response = serde_json::to_string(&PromptLine::from_record(p).response).unwrap_or_default();
                lines.push(format!("  response: {response}"));
                for t in &p.trace {
                    lines.push(format!("  trace: {t}"));
                }
            } else {
                lines.push("  (prompt record missing)".into());
            }
            for l in lines {
                writeln!(out, "{l}").map_err(io_err)?;
            }
            Ok(EXIT_OK)
        }
        StoreCommand::Export { output } => {
            let text = files::write_store(&store);
            match output {
                Some(p) => files::write_atomic(p, &text).map_err(|e| fail(EXIT_NOT_FOUND, e))?,
                None => out.write_all(text.as_bytes()).map_err(io_err)?,
            }
            Ok(EXIT_OK)
        }
        StoreCommand::Import { file } => {
            let text = std::fs::read_to_string(file).map_err(|e| config_err(format!("{}: {e}", file.display())))?;
            let before = (store.len(), store.prompts().count());
            files::read_store_into(&text, &mut store).map_err(|e| config_err(format!("{}: {e}", file.display())))?;
            save_store(&config.store_path, &store).map_err(config_err)?;
            writeln!(
                out,
                "imported {} assertion(s), {} prompt record(s)",
                store.len() - before.0,
                store.prompts().count() - before.1
            )
            .map_err(io_err)?;
            Ok(EXIT_OK)
        }
    }
}
