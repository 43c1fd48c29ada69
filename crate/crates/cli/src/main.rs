//! `diagsynth`: mask cases, lint trees, generate dialogues, report statistics
//! and scan for leaks.
//!
//! Exit codes: 0 success, 1 domain failure, 2 usage or configuration error.

mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use diagsynth_core::case_prep::{filter_cases, mask_case, removed_values, MaskingPolicy};
use diagsynth_core::dataset::{
    compute_stats, emit_records, load_records, read_jsonl, safety_scan, write_jsonl, DatasetError,
};
use diagsynth_core::diagtree::{TreeSpec, TreeStore};
use diagsynth_core::domain::{PatientCase, RawPatientCase, Validate};
use diagsynth_core::expgen::ExperienceGraph;
use diagsynth_core::llm::{BackendSource, HttpBackend, HttpConfig, Script, SharedBackend, ENV_API_KEY};
use diagsynth_core::orchestrator::{fan_out, load_roster, plan_fan_out, SessionContext};
use diagsynth_core::prompts::PromptSet;

use manifest::{Backend, BackendKind, Manifest, Overrides};

#[derive(Parser)]
#[command(
    name = "diagsynth",
    version,
    about = "Synthesize diagnostic conversations from patient cases"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Mask raw cases and drop incomplete or duplicate ones.
    Mask {
        /// JSONL file, or a directory of .json/.jsonl files.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Also write every removed PII value, one per line.
        #[arg(long)]
        forbidden_out: Option<PathBuf>,
    },
    /// Diagnosis tree utilities.
    Tree {
        #[command(subcommand)]
        command: TreeCommand,
    },
    /// Run fan-out generation over every case in a manifest.
    Generate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long, value_enum)]
        backend: Option<BackendKind>,
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        endpoint: Option<String>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Corpus statistics of a dataset.
    Stats {
        dataset: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Privacy scan; exits 1 if any record is flagged.
    Scan {
        dataset: PathBuf,
        /// Forbidden strings, one per line.
        #[arg(long)]
        forbidden: PathBuf,
        /// Allowed structured locations, one per line.
        #[arg(long)]
        whitelist: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Subcommand)]
enum TreeCommand {
    /// Check tree files (or directories of them) for structural problems.
    Lint {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
    },
}

enum Failure {
    Usage(anyhow::Error),
    Domain(anyhow::Error),
}

type Outcome = Result<(), Failure>;

fn usage<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Usage(e.into())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Mask {
            input,
            policy,
            output,
            forbidden_out,
        } => cmd_mask(&input, &policy, &output, forbidden_out.as_deref()),
        Command::Tree {
            command: TreeCommand::Lint { paths },
        } => cmd_lint(&paths),
        Command::Generate {
            manifest,
            seed,
            workers,
            backend,
            model,
            endpoint,
            output,
        } => cmd_generate(
            &manifest,
            Overrides {
                seed,
                workers,
                backend,
                model,
                endpoint,
                output,
            },
        ),
        Command::Stats { dataset, json } => cmd_stats(&dataset, json),
        Command::Scan {
            dataset,
            forbidden,
            whitelist,
            json,
        } => cmd_scan(&dataset, &forbidden, whitelist.as_deref(), json),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Domain(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn input_files(input: &Path) -> anyhow::Result<Vec<PathBuf>> {
    if !input.is_dir() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(input)
        .with_context(|| format!("cannot read {}", input.display()))?
        .flatten()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e == "json" || e == "jsonl"))
        .collect();
    files.sort();
    Ok(files)
}

fn read_raw_cases(input: &Path) -> anyhow::Result<Vec<(String, RawPatientCase)>> {
    let mut out = Vec::new();
    for file in input_files(input)? {
        if file.extension().is_some_and(|e| e == "json") {
            let text = std::fs::read_to_string(&file).with_context(|| format!("cannot read {}", file.display()))?;
            let raw = serde_json::from_str(&text).with_context(|| format!("cannot parse {}", file.display()))?;
            out.push((file.display().to_string(), raw));
        } else {
            let cases: Vec<RawPatientCase> = read_jsonl(&file)?;
            for (i, raw) in cases.into_iter().enumerate() {
                out.push((format!("{}#{}", file.display(), i + 1), raw));
            }
        }
    }
    Ok(out)
}

fn cmd_mask(input: &Path, policy: &Path, output: &Path, forbidden_out: Option<&Path>) -> Outcome {
    let policy = MaskingPolicy::load(policy).map_err(usage)?;
    let raws = read_raw_cases(input).map_err(usage)?;
    let mut masked = Vec::new();
    let mut forbidden: Vec<String> = Vec::new();
    let mut errors = 0;
    for (origin, raw) in &raws {
        match mask_case(raw, &policy) {
            Ok(case) => {
                masked.push(case);
                let spans = raw
                    .locations
                    .iter()
                    .map(|l| l.trim().to_string())
                    .filter(|l| !l.is_empty());
                for v in removed_values(raw, &policy).into_iter().chain(spans) {
                    if !forbidden.contains(&v) {
                        forbidden.push(v);
                    }
                }
            }
            Err(e) => {
                errors += 1;
                eprintln!("{origin}: {e}");
            }
        }
    }
    let total = masked.len();
    let kept = filter_cases(masked);
    write_jsonl(output, &kept).map_err(usage)?;
    if let Some(path) = forbidden_out {
        let mut text = forbidden.join("\n");
        text.push('\n');
        std::fs::write(path, text)
            .with_context(|| format!("cannot write {}", path.display()))
            .map_err(usage)?;
    }
    println!(
        "masked {total} of {} cases; kept {} after filtering; {errors} invalid",
        raws.len(),
        kept.len()
    );
    if errors > 0 {
        return Err(Failure::Domain(anyhow!("{errors} case(s) could not be masked")));
    }
    Ok(())
}

fn tree_files(path: &Path) -> anyhow::Result<Vec<PathBuf>> {
    if !path.is_dir() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)
        .with_context(|| format!("cannot read {}", path.display()))?
        .flatten()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e == "toml"))
        .collect();
    files.sort();
    Ok(files)
}

fn cmd_lint(paths: &[PathBuf]) -> Outcome {
    let mut specs = Vec::new();
    let mut problems = 0;
    for path in paths {
        for file in tree_files(path).map_err(usage)? {
            let spec = TreeSpec::load(&file).map_err(usage)?;
            let issues = spec.lint();
            for v in &issues {
                println!("{}: {v}", file.display());
            }
            problems += issues.len();
            if issues.is_empty() {
                println!(
                    "{}: ok ({}, {} parents, {} leaves)",
                    file.display(),
                    spec.variant_key(),
                    spec.parents.len(),
                    spec.symptom_leaf_count()
                );
            }
            specs.push(spec);
        }
    }
    if problems == 0 {
        if let Err(vs) = TreeStore::new(specs) {
            for v in &vs {
                println!("{v}");
            }
            problems += vs.len();
        }
    }
    if problems > 0 {
        return Err(Failure::Domain(anyhow!("{problems} problem(s) found")));
    }
    Ok(())
}

fn cmd_generate(manifest_path: &Path, flags: Overrides) -> Outcome {
    let resolved = Manifest::load(manifest_path)
        .and_then(|m| m.resolve(flags))
        .map_err(usage)?;
    let m = &resolved.manifest;
    let cases: Vec<PatientCase> = read_jsonl(&m.cases).map_err(usage)?;
    let roster = load_roster(&m.roster).map_err(usage)?;
    let trees = TreeStore::load(&m.trees).map_err(usage)?;
    let graph = ExperienceGraph::load(&m.graph).map_err(usage)?;
    let prompts = match &m.templates {
        Some(dir) => PromptSet::load_dir(dir).map_err(usage)?,
        None => PromptSet::default(),
    };
    let source: Box<dyn BackendSource> = match &resolved.backend {
        Backend::Script(path) => Box::new(Script::load(path).map_err(usage)?),
        Backend::Http { endpoint, model } => {
            let mut cfg = HttpConfig::new(endpoint.clone(), model.clone());
            cfg.api_key = std::env::var(ENV_API_KEY).ok();
            cfg.model_overrides = m.backend.model_overrides.clone();
            if let Some(v) = m.backend.max_retries {
                cfg.max_retries = v;
            }
            if let Some(v) = m.backend.timeout_secs {
                cfg.timeout_secs = v;
            }
            let backend = HttpBackend::new(cfg).map_err(usage)?;
            Box::new(SharedBackend(Arc::new(backend)))
        }
    };
    let ctx = SessionContext {
        prompts: &prompts,
        config: resolved.session,
        graph: &graph,
    };

    let mut records = Vec::new();
    let mut failures = Vec::new();
    let mut case_errors = 0;
    for case in &cases {
        let issues = case.validate();
        if !issues.is_empty() {
            case_errors += 1;
            for v in issues {
                eprintln!("case {}: {v}", case.id);
            }
            continue;
        }
        let plans = match plan_fan_out(case, m.k, &roster, &graph, m.seed) {
            Ok(p) => p,
            Err(e) => {
                case_errors += 1;
                eprintln!("case {}: {e}", case.id);
                continue;
            }
        };
        match fan_out(&ctx, case, &trees, &plans, source.as_ref(), resolved.workers) {
            Ok(results) => {
                for r in results {
                    match r {
                        Ok(rec) => records.push(rec),
                        Err(f) => {
                            eprintln!("{f}");
                            failures.push(f);
                        }
                    }
                }
            }
            Err(e) => {
                case_errors += 1;
                eprintln!("case {}: {e}", case.id);
            }
        }
    }

    emit_records(&records, &m.output).map_err(usage)?;
    if !failures.is_empty() {
        std::fs::create_dir_all(&resolved.failures)
            .with_context(|| format!("cannot create {}", resolved.failures.display()))
            .map_err(usage)?;
        for f in &failures {
            let path = resolved
                .failures
                .join(format!("{}-{}.json", f.case_id, f.session_index));
            let text = serde_json::to_string_pretty(f).expect("failure serializes");
            std::fs::write(&path, text)
                .with_context(|| format!("cannot write {}", path.display()))
                .map_err(usage)?;
        }
    }
    let mean_turns = if records.is_empty() {
        0.0
    } else {
        records.iter().map(|r| r.stats.exchanges).sum::<usize>() as f64 / records.len() as f64
    };
    println!(
        "sessions ok: {}, failed: {}, cases skipped: {case_errors}, mean turns: {mean_turns:.2}",
        records.len(),
        failures.len()
    );
    println!("dataset: {}", m.output.display());
    if !failures.is_empty() {
        println!("failures: {}", resolved.failures.display());
    }
    if failures.is_empty() && case_errors == 0 {
        Ok(())
    } else {
        Err(Failure::Domain(anyhow!(
            "{} session(s) failed, {case_errors} case(s) skipped",
            failures.len()
        )))
    }
}

fn load_dataset(path: &Path) -> Result<Vec<diagsynth_core::domain::ConversationRecord>, Failure> {
    load_records(path).map_err(usage)
}

fn cmd_stats(dataset: &Path, json: bool) -> Outcome {
    let records = load_dataset(dataset)?;
    let report = match compute_stats(&records) {
        Ok(r) => r,
        Err(DatasetError::Empty) => return Err(Failure::Domain(anyhow!("dataset {} is empty", dataset.display()))),
        Err(e) => return Err(usage(e)),
    };
    if json {
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    } else {
        print!("{}", report.render());
    }
    Ok(())
}

fn read_lines(path: &Path) -> anyhow::Result<Vec<String>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

fn cmd_scan(dataset: &Path, forbidden: &Path, whitelist: Option<&Path>, json: bool) -> Outcome {
    let records = load_dataset(dataset)?;
    let forbidden = read_lines(forbidden).map_err(usage)?;
    let whitelist = whitelist.map(read_lines).transpose().map_err(usage)?;
    let report = safety_scan(&records, &forbidden, whitelist.as_deref());
    if json {
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    } else {
        println!(
            "records: {}, flagged: {} (forbidden {}, age {}, location {})",
            report.total, report.flagged, report.forbidden_hits, report.age_hits, report.location_hits
        );
        for r in report.records.iter().filter(|r| r.flag == 1) {
            println!("  {} session {}: {} leak(s)", r.case_id, r.session_index, r.leaks.len());
        }
    }
    if report.flagged > 0 {
        return Err(Failure::Domain(anyhow!("{} record(s) flagged", report.flagged)));
    }
    Ok(())
}
