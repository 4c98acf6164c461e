//! `concept-canvas`: one command per pipeline stage, plus full runs and the
//! HTTP server.
//!
//! Any dotted config key can be given as a flag (`--began.gamma 0.5`). Such
//! flags, `--config` and `--seed` shape the config of a run being created;
//! an existing run keeps the config it was created with.

use std::net::{SocketAddr, ToSocketAddrs};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use concept_canvas::config::{Config, ProviderSection};
use concept_canvas::control::Control;
use concept_canvas::pipeline::{Advance, Manifest, Mode, NewRun, Pipeline, Selection, Stage, TermEdit};
use concept_canvas::Error;
use concept_canvas_server::{AppState, DEFAULT_LISTEN, TOKEN_ENV};
use serde_json::{json, Value};

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{0}")]
    Usage(String),
    #[error("server: {0}")]
    Server(#[from] std::io::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if !e.is_user_error() && !matches!(e, Error::Interrupted) => 2,
            CliError::Server(_) => 2,
            _ => 1,
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "concept-canvas", version, about = "Theme-driven editorial image generation")]
struct Cli {
    /// Directory holding the runs.
    #[arg(long, global = true, env = "CONCEPT_CANVAS_ROOT", default_value = "runs")]
    root: PathBuf,
    /// TOML config file layered over the defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// One seed for every seeded component.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Small models and short schedules.
    #[arg(long, global = true)]
    toy: bool,
    /// Machine-readable summary on stdout.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArg {
    #[arg(long)]
    run: String,
}

#[derive(Args)]
struct NewRunArgs {
    #[arg(long)]
    theme: String,
    /// JSONL corpus file.
    #[arg(long)]
    corpus: PathBuf,
    /// Run id; generated from the theme when absent.
    #[arg(long)]
    run: Option<String>,
    #[arg(long, value_enum, default_value_t = ModeArg::Generative)]
    mode: ModeArg,
    /// `local:<dir>` or `http`.
    #[arg(long)]
    provider: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Generative,
    Direct,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum GatesArg {
    /// Resolve every gate with its default selection.
    Auto,
    /// Stop at the first open gate.
    Manual,
}

#[derive(Subcommand)]
enum Command {
    /// Create a run and ingest its corpus.
    Ingest(NewRunArgs),
    /// Train the document classifier and extract discriminative terms.
    TrainDtm(RunArg),
    /// Print the top terms of a trained run.
    Terms {
        #[arg(long)]
        run: String,
        #[arg(long, default_value_t = 15)]
        k_pos: usize,
        #[arg(long, default_value_t = 15)]
        k_neg: usize,
    },
    /// Harvest images for the reviewed terms, or the generator dataset.
    Harvest(RunArg),
    /// Train the appearance model.
    TrainDam(RunArg),
    /// Rank the article images.
    Rank(RunArg),
    /// Train the generator.
    TrainGan(RunArg),
    /// Sample candidates from the trained generator.
    Generate(RunArg),
    /// Build the style reference mosaic.
    StyleRef(RunArg),
    /// Run the STYLIZE stage, or stylize one stored image at a given size.
    Stylize {
        #[arg(long)]
        run: String,
        /// Image id to stylize outside the stage sequence.
        #[arg(long, requires = "size")]
        content: Option<String>,
        #[arg(long, requires = "content")]
        size: Option<u32>,
    },
    /// Create a run and advance it as far as the gates allow.
    Run {
        #[command(flatten)]
        new: NewRunArgs,
        #[arg(long, value_enum, default_value_t = GatesArg::Manual)]
        gates: GatesArg,
    },
    /// Continue an interrupted or blocked run.
    Resume {
        #[arg(long)]
        run: String,
        #[arg(long, value_enum, default_value_t = GatesArg::Manual)]
        gates: GatesArg,
    },
    /// Resolve the gate a run waits at.
    Select {
        #[arg(long)]
        run: String,
        /// Gate name; defaults to the pending one.
        #[arg(long)]
        gate: Option<String>,
        /// Candidate ids, comma separated.
        #[arg(long, value_delimiter = ',')]
        ids: Vec<String>,
        /// Replacement positive terms (term review only).
        #[arg(long, value_delimiter = ',')]
        positives: Vec<String>,
        /// Replacement negative terms (term review only).
        #[arg(long, value_delimiter = ',')]
        negatives: Vec<String>,
        /// Search phrase for the generator dataset (concept selection only).
        #[arg(long)]
        concept_query: Option<String>,
        /// Take the default: approve terms as extracted, or the rank-1 candidate.
        #[arg(long, conflicts_with_all = ["ids", "positives", "negatives"])]
        default: bool,
        #[arg(long, default_value = "cli")]
        actor: String,
    },
    /// Show a run's stage, failure and pending gate.
    Status(RunArg),
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value = DEFAULT_LISTEN)]
        listen: String,
        /// Run without a bearer token.
        #[arg(long)]
        no_auth: bool,
        /// Require the token on read endpoints too.
        #[arg(long)]
        protect_reads: bool,
        /// Built studio bundle to serve at `/`.
        #[arg(long)]
        ui_dir: Option<PathBuf>,
    },
    /// Config inspection.
    #[command(subcommand)]
    Config(ConfigCommand),
}

#[derive(Subcommand)]
enum ConfigCommand {
    /// Print the effective config, or the one a run was created with.
    Show {
        #[arg(long)]
        run: Option<String>,
    },
}

/// Pulls `--a.b value` and `--a.b=value` out of the arguments.
fn split_dotted(args: Vec<String>) -> CliResult<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::new();
    let mut dotted = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (key, inline) = match flag.split_once('=') {
            Some((k, v)) => (k, Some(v.to_string())),
            None => (flag, None),
        };
        if !key.contains('.') {
            rest.push(arg.clone());
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it.next().ok_or_else(|| CliError::Usage(format!("--{key} needs a value")))?,
        };
        dotted.push((key.to_string(), value));
    }
    Ok((rest, dotted))
}

struct Ctx {
    pipeline: Pipeline,
    config_file: Option<PathBuf>,
    seed: Option<u64>,
    toy: bool,
    json: bool,
    overrides: Vec<(String, String)>,
    control: Control,
}

impl Ctx {
    fn effective_config(&self, provider: Option<&str>) -> CliResult<Config> {
        let mut config = Config::load(self.toy, self.config_file.as_deref(), &self.overrides)?;
        if let Some(seed) = self.seed {
            config.set_seed(seed);
        }
        if let Some(spec) = provider {
            let (kind, root) = ProviderSection::parse_spec(spec)?;
            config.provider.kind = kind;
            if root.is_some() {
                config.provider.root = root;
            }
        }
        config.validate()?;
        Ok(config)
    }

    /// Config flags only make sense when a run is created.
    fn reject_config_flags(&self, what: &str) -> CliResult {
        if self.config_file.is_some() || self.seed.is_some() || self.toy || !self.overrides.is_empty() {
            return Err(CliError::Usage(format!(
                "{what} uses the config the run was created with; --config, --seed, --toy and dotted flags apply only to ingest, run, serve and config show"
            )));
        }
        Ok(())
    }

    fn create(&self, args: &NewRunArgs) -> CliResult<Manifest> {
        let config = self.effective_config(args.provider.as_deref())?;
        let mode = match args.mode {
            ModeArg::Generative => Mode::Generative,
            ModeArg::Direct => Mode::Direct,
        };
        let m = self.pipeline.create_run(NewRun {
            run_id: args.run.clone(),
            theme: args.theme.clone(),
            corpus: args.corpus.clone(),
            mode,
            config,
        })?;
        log::info!("created run {} in {}", m.run_id, self.pipeline.root().display());
        Ok(m)
    }

    fn emit(&self, value: Value, human: impl FnOnce() -> String) {
        if self.json {
            println!("{}", serde_json::to_string_pretty(&value).expect("JSON value"));
        } else {
            println!("{}", human());
        }
    }

    fn run_dir_display(&self, run: &str) -> String {
        self.pipeline.root().join(run).display().to_string()
    }

    /// Runs the named stage if the run is at one of `stages`.
    fn stage(&self, run: &str, command: &str, stages: &[Stage]) -> CliResult {
        self.reject_config_flags(command)?;
        self.run_stage(run, command, stages)
    }

    fn run_stage(&self, run: &str, command: &str, stages: &[Stage]) -> CliResult {
        let m = self.pipeline.load(run)?;
        if !stages.contains(&m.stage) {
            let want: Vec<&str> = stages.iter().map(|s| s.as_str()).collect();
            return Err(CliError::Core(Error::Conflict(format!(
                "run {run} is at {}; `{command}` runs {}",
                m.stage,
                want.join(" or ")
            ))));
        }
        let advance = self.pipeline.advance_stage(run, m.stage, &self.control)?;
        let Advance::Completed { from, to } = advance else {
            unreachable!("checked the stage is automated");
        };
        let m = self.pipeline.load(run)?;
        let artifacts: Vec<&str> = m.artifacts.get(&from).into_iter().flatten().map(|a| a.path.as_str()).collect();
        self.emit(
            json!({"run_id": run, "completed": from, "stage": to, "artifacts": artifacts}),
            || {
                let mut s = format!("{from} done; run {run} now at {to}");
                if to.is_gate() {
                    s.push_str(&format!(" (resolve with `concept-canvas select --run {run}`)"));
                }
                s
            },
        );
        Ok(())
    }

    fn until_blocked(&self, run: &str, gates: GatesArg) -> CliResult {
        let m = self.pipeline.run_until_blocked(run, gates == GatesArg::Auto, &self.control)?;
        let dir = self.run_dir_display(run);
        let final_png = (m.stage == Stage::Done).then(|| format!("{dir}/final/final.png"));
        self.emit(
            json!({"run_id": m.run_id, "stage": m.stage, "run_dir": dir, "final": final_png}),
            || match &final_png {
                Some(p) => format!("run {} DONE: {p}", m.run_id),
                None => format!(
                    "run {} waits at {} (resolve with `concept-canvas select --run {}`)",
                    m.run_id, m.stage, m.run_id
                ),
            },
        );
        Ok(())
    }
}

fn progress_logger() -> impl Fn(&str, usize, usize) + Send + Sync + 'static {
    let last = AtomicUsize::new(usize::MAX);
    move |task, done, total| {
        let pct = if total == 0 { 100 } else { done * 100 / total };
        let bucket = pct / 10;
        if last.swap(bucket, Ordering::Relaxed) != bucket {
            log::info!("{task}: {pct}% ({done}/{total})");
        }
    }
}

fn parse_listen(listen: &str) -> CliResult<SocketAddr> {
    listen
        .to_socket_addrs()
        .ok()
        .and_then(|mut a| a.next())
        .ok_or_else(|| CliError::Usage(format!("cannot resolve listen address {listen:?}")))
}

fn execute(cli: Cli, overrides: Vec<(String, String)>) -> CliResult {
    let control = Control::new().with_progress(progress_logger());
    let ctx = Ctx {
        pipeline: Pipeline::new(cli.root),
        config_file: cli.config,
        seed: cli.seed,
        toy: cli.toy,
        json: cli.json,
        overrides,
        control: control.clone(),
    };
    if !matches!(cli.command, Command::Serve { .. }) {
        let handle = control.clone();
        if let Err(e) = ctrlc::set_handler(move || {
            log::warn!("interrupt: stopping at the next checkpoint");
            handle.cancel();
        }) {
            log::debug!("no interrupt handler: {e}");
        }
    }
    match cli.command {
        Command::Ingest(args) => {
            let m = ctx.create(&args)?;
            ctx.run_stage(&m.run_id, "ingest", &[Stage::Corpus])
        }
        Command::TrainDtm(r) => ctx.stage(&r.run, "train-dtm", &[Stage::Dtm]),
        Command::Terms { run, k_pos, k_neg } => {
            ctx.reject_config_flags("terms")?;
            let terms = ctx.pipeline.terms(&run, k_pos, k_neg)?;
            ctx.emit(serde_json::to_value(&terms).expect("terms serialize"), || {
                let mut out = Vec::new();
                for (label, list) in [("+", &terms.positives), ("-", &terms.negatives)] {
                    for t in list {
                        out.push(format!("{label} {:<24} {:+.6}", t.term, t.weight));
                    }
                }
                out.join("\n")
            });
            Ok(())
        }
        Command::Harvest(r) => ctx.stage(&r.run, "harvest", &[Stage::Harvest, Stage::ConceptHarvest]),
        Command::TrainDam(r) => ctx.stage(&r.run, "train-dam", &[Stage::DamTrain]),
        Command::Rank(r) => ctx.stage(&r.run, "rank", &[Stage::Ranking]),
        Command::TrainGan(r) => ctx.stage(&r.run, "train-gan", &[Stage::GanTrain]),
        Command::Generate(r) => ctx.stage(&r.run, "generate", &[Stage::Generation]),
        Command::StyleRef(r) => ctx.stage(&r.run, "style-ref", &[Stage::StyleBuild]),
        Command::Stylize { run, content, size } => match (content, size) {
            (Some(content), Some(size)) => {
                ctx.reject_config_flags("stylize")?;
                let path = ctx.pipeline.stylize_adhoc(&run, &content, size, &ctx.control)?;
                let path = ctx.pipeline.run_dir(&run)?.join(path);
                ctx.emit(json!({"run_id": run, "content": content, "size": size, "path": path}), || {
                    path.display().to_string()
                });
                Ok(())
            }
            _ => ctx.stage(&run, "stylize", &[Stage::Stylize]),
        },
        Command::Run { new, gates } => {
            let m = ctx.create(&new)?;
            ctx.until_blocked(&m.run_id, gates)
        }
        Command::Resume { run, gates } => {
            ctx.reject_config_flags("resume")?;
            let m = ctx.pipeline.resume(&run)?;
            log::info!("resuming run {run} at {}", m.stage);
            ctx.until_blocked(&run, gates)
        }
        Command::Select {
            run,
            gate,
            ids,
            positives,
            negatives,
            concept_query,
            default,
            actor,
        } => {
            ctx.reject_config_flags("select")?;
            let pending = ctx.pipeline.load(&run)?.stage;
            let gate = match gate {
                Some(g) => Stage::parse(&g).ok_or_else(|| CliError::Usage(format!("unknown gate {g:?}")))?,
                None => pending,
            };
            let mut selection = if default {
                ctx.pipeline.default_selection(&run)?
            } else {
                Selection::ids(ids)
            };
            if !positives.is_empty() || !negatives.is_empty() {
                selection.terms = Some(TermEdit { positives, negatives });
            }
            selection.concept_query = concept_query;
            let m = ctx.pipeline.resolve_gate(&run, gate, selection, &actor)?;
            let decision = m.decision(gate).cloned();
            ctx.emit(json!({"run_id": run, "gate": gate, "decision": decision, "stage": m.stage}), || {
                format!("{gate} resolved; run {run} now at {}", m.stage)
            });
            Ok(())
        }
        Command::Status(r) => {
            let m = ctx.pipeline.load(&r.run)?;
            let gate = if m.stage.is_gate() {
                Some(ctx.pipeline.current_gate(&r.run)?)
            } else {
                None
            };
            ctx.emit(json!({"run_id": m.run_id, "theme": m.theme, "mode": m.mode, "stage": m.stage, "failure": m.failure, "gate": gate}), || {
                let mut s = format!("run {} ({}, {:?}) at {}", m.run_id, m.theme, m.mode, m.stage);
                if let Some(f) = &m.failure {
                    s.push_str(&format!("\nfailed at {}: {}", f.stage, f.message));
                }
                if let Some(g) = &gate {
                    s.push_str(&format!("\n{} candidates; select {} to {}", g.candidates.len(), g.min_select, g.max_select));
                    for c in g.candidates.iter().take(10) {
                        s.push_str(&format!("\n  {:>3}. {}", c.rank, c.id));
                    }
                }
                s
            });
            Ok(())
        }
        Command::Serve {
            listen,
            no_auth,
            protect_reads,
            ui_dir,
        } => {
            let config = ctx.effective_config(None)?;
            let token = std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty());
            if token.is_none() && !no_auth {
                return Err(CliError::Usage(format!("set {TOKEN_ENV} or pass --no-auth")));
            }
            let addr = parse_listen(&listen)?;
            let mut state = AppState::new(ctx.pipeline.clone(), config, token).protect_reads(protect_reads);
            if let Some(dir) = ui_dir {
                state = state.ui_dir(dir);
            }
            let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
            rt.block_on(concept_canvas_server::serve(addr, Arc::new(state)))?;
            Ok(())
        }
        Command::Config(ConfigCommand::Show { run }) => {
            let config = match run {
                Some(run) => {
                    ctx.reject_config_flags("config show --run")?;
                    ctx.pipeline.load(&run)?.config
                }
                None => ctx.effective_config(None)?,
            };
            ctx.emit(serde_json::to_value(&config).expect("config serializes"), || {
                config.to_toml().unwrap_or_else(|e| format!("# {e}"))
            });
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let args: Vec<String> = std::env::args().collect();
    let (args, overrides) = match split_dotted(args) {
        Ok(x) => x,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli, overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strings(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn dotted_flags_are_split_out() {
        let (rest, dotted) =
            split_dotted(strings(&["cc", "run", "--began.gamma", "0.5", "--toy", "--dam.epochs=2", "--k-pos", "3"])).unwrap();
        assert_eq!(rest, strings(&["cc", "run", "--toy", "--k-pos", "3"]));
        assert_eq!(
            dotted,
            vec![("began.gamma".into(), "0.5".into()), ("dam.epochs".into(), "2".into())]
        );
        assert!(split_dotted(strings(&["cc", "--began.gamma"])).is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
