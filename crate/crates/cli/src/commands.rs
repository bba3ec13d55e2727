use std::fs;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use sandbot_core::exec::Parallelism;
use sandbot_core::scenario::Scenario;
use sandbot_core::script::{run_headless_with, HeadlessOptions, OperatorScript};
use sandbot_core::session::Session;

use crate::gateway::{serve, GatewayConfig};
use crate::journal::{replay, Journal};

#[derive(Debug, Parser)]
#[command(name = "sandbot", version, about = "Human-in-the-loop robotic sanding simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a scripted episode.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Required: interactive sessions go through `serve`.
        #[arg(long)]
        headless: bool,
        #[arg(long)]
        operator: PathBuf,
        /// Defaults to the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Metrics JSON.
        #[arg(long)]
        out: PathBuf,
        /// Event log, JSON lines.
        #[arg(long)]
        events: Option<PathBuf>,
        /// Directory for one ASCII PLY per scan.
        #[arg(long)]
        ply_dir: Option<PathBuf>,
        #[arg(long)]
        sequential: bool,
    },
    /// Serve one operator session over a websocket at /ws.
    Serve {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value_t = 8765)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        bind: IpAddr,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "sandbot")]
        session_id: String,
        /// Journal of client messages for `replay`.
        #[arg(long)]
        record: Option<PathBuf>,
        #[arg(long)]
        events: Option<PathBuf>,
        /// Simulated seconds per wall-clock second.
        #[arg(long, default_value_t = 1.0)]
        pace: f64,
    },
    /// Check a scenario file against the schema and the robot model.
    Validate {
        #[arg(long)]
        scenario: PathBuf,
    },
    /// Re-run a recorded live session headless.
    Replay {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        journal: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a JSON schema.
    Schema {
        #[arg(long, value_enum, default_value_t = SchemaKind::Scenario)]
        kind: SchemaKind,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SchemaKind {
    Scenario,
    Script,
    Protocol,
}

pub fn schema_text(kind: SchemaKind) -> String {
    match kind {
        SchemaKind::Scenario => Scenario::schema_json(),
        SchemaKind::Script => OperatorScript::schema_json(),
        SchemaKind::Protocol => crate::protocol::schema_json(),
    }
}

pub fn load_scenario(path: &Path) -> anyhow::Result<(Scenario, sandbot_core::kinematics::RobotModel)> {
    let scenario = Scenario::from_path(path).with_context(|| format!("scenario {}", path.display()))?;
    let robot = scenario.load_robot(path.parent())?;
    scenario.validate(&robot).with_context(|| format!("scenario {}", path.display()))?;
    Ok((scenario, robot))
}

/// Writes every file or none: contents go to temporaries first.
fn write_all(files: &[(PathBuf, String)]) -> anyhow::Result<()> {
    let mut staged = Vec::new();
    for (path, text) in files {
        let mut tmp = path.clone().into_os_string();
        tmp.push(".partial");
        let tmp = PathBuf::from(tmp);
        if let Err(e) = fs::write(&tmp, text) {
            for t in &staged {
                let _ = fs::remove_file(t);
            }
            return Err(e).with_context(|| format!("write {}", path.display()));
        }
        staged.push(tmp);
    }
    for ((path, _), tmp) in files.iter().zip(&staged) {
        fs::rename(tmp, path).with_context(|| format!("write {}", path.display()))?;
    }
    Ok(())
}

fn metrics_text(session: &Session) -> String {
    let mut s = serde_json::to_string_pretty(&session.metrics()).expect("metrics serialise");
    s.push('\n');
    s
}

pub fn execute(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run { scenario, headless, operator, seed, out, events, ply_dir, sequential } => {
            if !headless {
                bail!("`run` needs --headless; use `serve` for interactive sessions");
            }
            let (sc, _) = load_scenario(&scenario)?;
            let script = OperatorScript::from_path(&operator).with_context(|| format!("script {}", operator.display()))?;
            let options = HeadlessOptions {
                parallelism: if sequential { Parallelism::Sequential } else { Parallelism::Parallel },
                keep_scans: ply_dir.is_some(),
            };
            let run = run_headless_with(&sc, &script, seed.unwrap_or(sc.seed), scenario.parent(), options)?;
            let mut files = vec![(out, metrics_text(&run.session))];
            if let Some(path) = events {
                files.push((path, run.log.to_jsonl()));
            }
            if let Some(dir) = ply_dir {
                fs::create_dir_all(&dir).with_context(|| format!("create {}", dir.display()))?;
                for (i, cloud) in run.session.scan_history.iter().enumerate() {
                    files.push((dir.join(format!("scan_{:02}.ply", i + 1)), cloud.to_ply_ascii()));
                }
            }
            write_all(&files)?;
            let m = &run.metrics;
            println!(
                "{}: phase {:?}, removed fraction {:.4}, {} segments completed, {:.1} s simulated",
                m.scenario, m.phase, m.coverage.removed_fraction, m.segments.completed, m.clock_s
            );
            Ok(())
        }
        Command::Serve { scenario, port, bind, seed, session_id, record, events, pace } => {
            let (sc, robot) = load_scenario(&scenario)?;
            let seed = seed.unwrap_or(sc.seed);
            let session = Session::new(sc, robot, seed)?;
            let config = GatewayConfig { session_id, record, events, pace, ..GatewayConfig::default() };
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let handle = serve(session, SocketAddr::new(bind, port), config).await?;
                println!("listening on ws://{}/ws", handle.addr);
                tokio::signal::ctrl_c().await?;
                let session = handle.shutdown().await?;
                println!("stopped at phase {:?} after {:.1} s", session.phase, session.clock_s);
                anyhow::Ok(())
            })
        }
        Command::Validate { scenario } => {
            let (sc, _) = load_scenario(&scenario)?;
            println!("{}: ok ({:?})", sc.name, sc.workflow);
            Ok(())
        }
        Command::Replay { scenario, journal, seed, events, out } => {
            let (sc, robot) = load_scenario(&scenario)?;
            let text = fs::read_to_string(&journal).with_context(|| format!("journal {}", journal.display()))?;
            let j = Journal::parse(&text)?;
            let seed = seed.unwrap_or(sc.seed);
            let session = replay(&sc, robot, seed, &j, Parallelism::Parallel)?;
            let mut files = vec![(events, session.log.to_jsonl())];
            if let Some(out) = out {
                files.push((out, metrics_text(&session)));
            }
            write_all(&files)?;
            println!("replayed {} steps to phase {:?}", j.end_step(), session.phase);
            Ok(())
        }
        Command::Schema { kind } => {
            println!("{}", schema_text(kind));
            Ok(())
        }
    }
}
