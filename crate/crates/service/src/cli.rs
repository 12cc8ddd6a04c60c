//! Command-line interface. Every data path goes through the same [`Engine`]
//! calls the HTTP handlers use.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use dil_core::config::Config;
use dil_core::executor::PlanStatus;
use dil_core::planner::{DataPlan, Objective};
use dil_core::registry::Level;
use dil_core::session::MessageKind;
use dil_core::{Engine, Table};
use thiserror::Error;

#[derive(Debug, Parser)]
#[command(name = "dil", version, about = "Federated data-plan engine")]
pub struct Cli {
    /// Config file; defaults to $DIL_CONFIG.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Machine-readable JSON output.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the HTTP service.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
    /// Data registry commands.
    #[command(subcommand)]
    Registry(RegistryCommand),
    /// Answer a natural-language question.
    Query(QueryArgs),
    /// Planner commands over a plan file.
    #[command(subcommand)]
    Plan(PlanCommand),
    /// Fixture commands.
    #[command(subcommand)]
    Fixtures(FixturesCommand),
}

#[derive(Debug, Subcommand)]
pub enum RegistryCommand {
    /// Re-read a source's metadata.
    Sync { source: String },
    /// Search the metadata catalog.
    Search {
        query: String,
        #[arg(long)]
        level: Option<String>,
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    pub question: String,
    /// User-profile namespace the query runs under.
    #[arg(long)]
    pub session: Option<String>,
    /// Print the plan's cost estimates instead of running it.
    #[arg(long)]
    pub explain: bool,
    /// JSON object mapping prompt questions to answers.
    #[arg(long)]
    pub answers: Option<PathBuf>,
    /// Objective as JSON, e.g. '{"quality_floor": 0.5}'.
    #[arg(long)]
    pub objective: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum PlanCommand {
    Refine {
        plan: PathBuf,
    },
    Optimize {
        plan: PathBuf,
        #[arg(long)]
        no_rewrites: bool,
    },
    Explain {
        plan: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum FixturesCommand {
    /// Open DIR/config.json, sync every source and persist the registries.
    Load { dir: PathBuf },
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Engine(#[from] dil_core::Error),
    #[error("{0}")]
    Failed(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

/// Terminal handles, swappable in tests.
pub struct Io<'a> {
    pub out: &'a mut dyn Write,
    pub err: &'a mut dyn Write,
    pub input: &'a mut dyn BufRead,
}

fn load_config(cli: &Cli) -> CliResult<Config> {
    match &cli.config {
        Some(p) => Ok(Config::load(p)?),
        None if std::env::var_os(dil_core::config::CONFIG_ENV).is_some() => Ok(Config::from_env()?),
        None => Err(CliError::Usage(format!(
            "no config: pass --config FILE or set {}",
            dil_core::config::CONFIG_ENV
        ))),
    }
}

fn open(cli: &Cli) -> CliResult<Engine> {
    Ok(Engine::open(load_config(cli)?)?)
}

fn read_plan(path: &Path) -> CliResult<DataPlan> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| dil_core::Error::invalid(format!("plan file {}", path.display()), e.to_string()))?;
    Ok(DataPlan::from_json(&text)?)
}

fn print_json(out: &mut dyn Write, v: &impl serde::Serialize) -> CliResult {
    serde_json::to_writer_pretty(&mut *out, v).map_err(dil_core::Error::from)?;
    writeln!(out)?;
    Ok(())
}

pub fn run(cli: Cli, io: Io<'_>) -> CliResult {
    match &cli.command {
        Command::Serve { port, host } => {
            let addr: SocketAddr = format!("{host}:{port}")
                .parse()
                .map_err(|e| CliError::Usage(format!("bad address {host}:{port}: {e}")))?;
            let engine = Arc::new(open(&cli)?);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(crate::api::serve(engine, addr))?;
            Ok(())
        }
        Command::Registry(RegistryCommand::Sync { source }) => {
            let engine = open(&cli)?;
            let entries = engine.sync_source(source)?;
            if cli.json {
                return print_json(io.out, &entries);
            }
            for e in &entries {
                writeln!(io.out, "{:<10} {}", level_name(e.level), e.path.join("."))?;
            }
            Ok(())
        }
        Command::Registry(RegistryCommand::Search { query, level, k }) => {
            let level = match level {
                Some(l) => Some(Level::parse(l).ok_or_else(|| CliError::Usage(format!("unknown level `{l}`")))?),
                None => None,
            };
            let engine = open(&cli)?;
            let hits = engine.search(query, level, *k);
            if cli.json {
                return print_json(io.out, &hits);
            }
            for h in &hits {
                writeln!(
                    io.out,
                    "{:.4}  {:<10} {}",
                    h.score,
                    level_name(h.entry.level),
                    h.entry.path.join(".")
                )?;
            }
            Ok(())
        }
        Command::Query(args) => query(&cli, args, io),
        Command::Plan(cmd) => {
            let engine = open(&cli)?;
            match cmd {
                PlanCommand::Refine { plan } => {
                    let (refined, notes) = engine.refine_plan(read_plan(plan)?)?;
                    for n in notes {
                        writeln!(io.err, "note: {n}")?;
                    }
                    print_json(io.out, &refined)
                }
                PlanCommand::Optimize { plan, no_rewrites } => {
                    let plan = read_plan(plan)?;
                    print_json(io.out, &engine.optimize_plan(&plan, None, !no_rewrites, None)?)
                }
                PlanCommand::Explain { plan } => {
                    let plan = read_plan(plan)?;
                    explain(&engine, &plan, None, cli.json, io.out)
                }
            }
        }
        Command::Fixtures(FixturesCommand::Load { dir }) => {
            let mut config = Config::load(&dir.join("config.json"))?;
            config.sync_on_start = true;
            let engine = Engine::open(config)?;
            engine.persist()?;
            for s in engine.list_sources() {
                let n = engine.sources().registry().subtree(&s.source_id).len();
                writeln!(io.out, "{:<14} {:<10} {n} entries", s.source_id, s.protocol.as_str())?;
            }
            Ok(())
        }
    }
}

fn level_name(l: Level) -> String {
    serde_json::to_value(l)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

fn explain(
    engine: &Engine,
    plan: &DataPlan,
    objective: Option<Objective>,
    json: bool,
    out: &mut dyn Write,
) -> CliResult {
    let rows = engine.explain(plan, objective, None)?;
    if json {
        return print_json(out, &rows);
    }
    let nw = rows.iter().map(|r| r.node_id.len()).chain([4]).max().unwrap_or(4);
    let ow = rows.iter().map(|r| r.operator_id.len()).chain([8]).max().unwrap_or(8);
    writeln!(
        out,
        "{:<nw$}  {:<ow$}  {:>10}  {:>12}  {:>8}  {:>8}",
        "node", "operator", "rows", "latency", "money", "quality"
    )?;
    for r in &rows {
        let c = &r.subplan;
        writeln!(
            out,
            "{:<nw$}  {:<ow$}  {:>10.2}  {:>12.2}  {:>8.4}  {:>8.3}",
            r.node_id, r.operator_id, c.out_rows, c.latency, c.money, c.quality
        )?;
    }
    Ok(())
}

fn normalize(q: &str) -> String {
    q.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

fn query(cli: &Cli, args: &QueryArgs, io: Io<'_>) -> CliResult {
    let objective = match &args.objective {
        Some(s) => {
            Some(serde_json::from_str::<Objective>(s).map_err(|e| CliError::Usage(format!("--objective: {e}")))?)
        }
        None => None,
    };
    let scripted: Option<BTreeMap<String, serde_json::Value>> = match &args.answers {
        Some(p) => {
            let text =
                std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("--answers {}: {e}", p.display())))?;
            let map: BTreeMap<String, serde_json::Value> =
                serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("--answers {}: {e}", p.display())))?;
            Some(map.into_iter().map(|(k, v)| (normalize(&k), v)).collect())
        }
        None => None,
    };

    let engine = open(cli)?;
    if args.explain {
        let planned = engine.plan_question(&args.question, objective, None)?;
        for n in &planned.notes {
            writeln!(io.err, "note: {n}")?;
        }
        return explain(&engine, &planned.optimized, objective, cli.json, io.out);
    }

    let session = engine.create_session(args.session.as_deref());
    let stream = session.main();
    let mut seen = stream.last_seq();
    let mut run = engine.query(&session.session_id, &args.question, objective)?;
    while run.status == PlanStatus::Suspended {
        let fresh = stream.read_after(seen);
        seen = fresh.last().map_or(seen, |m| m.seq);
        let prompts: Vec<_> = fresh.into_iter().filter(|m| m.kind == MessageKind::Prompt).collect();
        if prompts.is_empty() {
            return Err(CliError::Failed("plan suspended without a pending prompt".into()));
        }
        for p in prompts {
            let question = p.payload["question"].as_str().unwrap_or_default().to_string();
            let prompt_id = p.payload["prompt_id"].as_str().unwrap_or_default().to_string();
            let answer = match &scripted {
                Some(map) => map
                    .get(&normalize(&question))
                    .cloned()
                    .ok_or_else(|| CliError::Failed(format!("no scripted answer for prompt `{question}`")))?,
                None => ask(&question, &p.payload["output_schema"], io.err, io.input)?,
            };
            run = engine.answer(&session.session_id, &prompt_id, &answer)?;
            if run.status != PlanStatus::Suspended {
                break;
            }
        }
    }

    let view = engine.plan_view(&run.plan_id)?;
    if run.status == PlanStatus::Failed {
        let msg = view
            .record
            .error
            .map_or_else(|| "plan failed".to_string(), |e| format!("{}: {}", e.code, e.message));
        return Err(CliError::Failed(msg));
    }
    let table = view
        .record
        .final_batch
        .and_then(|b| b.tables.into_iter().next())
        .unwrap_or_default();
    if cli.json {
        return print_json(io.out, &table);
    }
    write_table(io.out, &table)
}

/// Renders a prompt on the terminal and reads one answer line. JSON input is
/// taken as structured; anything else as free text.
fn ask(
    question: &str,
    schema: &serde_json::Value,
    err: &mut dyn Write,
    input: &mut dyn BufRead,
) -> CliResult<serde_json::Value> {
    writeln!(err, "? {question}")?;
    if !schema.is_null() {
        writeln!(err, "  schema: {schema}")?;
    }
    write!(err, "> ")?;
    err.flush()?;
    let mut line = String::new();
    if input.read_line(&mut line)? == 0 {
        return Err(CliError::Failed(format!("no answer given for prompt `{question}`")));
    }
    let line = line.trim();
    Ok(serde_json::from_str(line).unwrap_or_else(|_| serde_json::Value::String(line.to_string())))
}

pub fn write_table(out: &mut dyn Write, table: &Table) -> CliResult {
    let cols = table.columns();
    let cells: Vec<Vec<String>> = table
        .rows
        .iter()
        .map(|r| {
            cols.iter()
                .map(|c| r.get(c).map(|v| v.to_string()).unwrap_or_default())
                .collect()
        })
        .collect();
    let widths: Vec<usize> = cols
        .iter()
        .enumerate()
        .map(|(i, c)| {
            cells
                .iter()
                .map(|r| r[i].chars().count())
                .chain([c.len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |vals: &[String]| {
        vals.iter()
            .zip(&widths)
            .map(|(v, w)| format!("{v:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    writeln!(out, "{}", line(&cols))?;
    for r in &cells {
        writeln!(out, "{}", line(r))?;
    }
    writeln!(out, "({} rows)", table.rows.len())?;
    Ok(())
}
