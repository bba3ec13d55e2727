//! Scripted operator for headless episodes.

use std::path::Path;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autonomy::CorrectionInput;
use crate::driver::{Driver, DriverInput};
use crate::exec::Parallelism;
use crate::scenario::{Scenario, ScenarioError};
use crate::session::{EventLog, OperatorAction, Phase, RunMetrics, Session, SessionError};

#[derive(Debug, Error)]
pub enum ScriptError {
    #[error("script step {step}: '{action}' is not valid in phase {phase:?}")]
    ScriptPhaseMismatch { step: usize, phase: Phase, action: String },
    #[error("script step {step}: run did not finish within {max_s} s")]
    Timeout { step: usize, max_s: f64 },
    #[error("script: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("script: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("script step {step}: {source}")]
    Session { step: usize, source: SessionError },
}

/// Correction held between `from_s` and `to_s`, measured from the start of
/// the enclosing run step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct CorrectionWindow {
    pub from_s: f64,
    pub to_s: f64,
    pub input: CorrectionInput,
}

fn default_max_s() -> f64 {
    3600.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct RunStep {
    /// Stop after this long; absent means run until execution ends.
    #[serde(default)]
    pub seconds: Option<f64>,
    #[serde(default = "default_max_s")]
    pub max_s: f64,
    #[serde(default)]
    pub corrections: Vec<CorrectionWindow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum ScriptStep {
    Action(OperatorAction),
    /// Seconds of operator time outside execution.
    Idle(f64),
    Run(RunStep),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct OperatorScript {
    pub steps: Vec<ScriptStep>,
}

impl OperatorScript {
    pub fn from_json_str(s: &str) -> Result<Self, ScriptError> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn from_path(path: &Path) -> Result<Self, ScriptError> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn schema_json() -> String {
        serde_json::to_string_pretty(&schemars::schema_for!(OperatorScript)).expect("schema serialises")
    }
}

#[derive(Debug)]
pub struct HeadlessRun {
    pub metrics: RunMetrics,
    pub log: EventLog,
    pub session: Session,
}

fn session_err(step: usize) -> impl Fn(SessionError) -> ScriptError {
    move |source| match source {
        SessionError::InvalidAction { phase, action } => ScriptError::ScriptPhaseMismatch { step, phase, action },
        source => ScriptError::Session { step, source },
    }
}

/// Plays `script` against a driver until the script ends.
pub fn play(driver: &mut Driver, script: &OperatorScript) -> Result<(), ScriptError> {
    for (i, step) in script.steps.iter().enumerate() {
        let err = session_err(i);
        match step {
            ScriptStep::Action(a) => driver.apply_action(a.clone()).map_err(&err)?,
            ScriptStep::Idle(s) => {
                if driver.phase() == Phase::Executing {
                    return Err(ScriptError::ScriptPhaseMismatch { step: i, phase: Phase::Executing, action: "idle".into() });
                }
                let n = (s / driver.dt()).round().max(0.0) as u64;
                driver.run_steps(n).map_err(&err)?;
            }
            ScriptStep::Run(run) => {
                if driver.phase() != Phase::Executing {
                    return Err(ScriptError::ScriptPhaseMismatch { step: i, phase: driver.phase(), action: "run".into() });
                }
                let limit = run.seconds.unwrap_or(run.max_s);
                let n_max = (limit / driver.dt()).round() as u64;
                let mut held: Option<CorrectionInput> = None;
                let mut k = 0u64;
                while driver.phase() == Phase::Executing && k < n_max {
                    let t = k as f64 * driver.dt();
                    let want = run
                        .corrections
                        .iter()
                        .find(|w| t >= w.from_s && t < w.to_s)
                        .map_or_else(CorrectionInput::neutral, |w| w.input);
                    if held != Some(want) {
                        driver.apply(&DriverInput::Correction { input: want, seq: None }).map_err(&err)?;
                        held = Some(want);
                    }
                    driver.step().map_err(&err)?;
                    k += 1;
                }
                if held.is_some_and(|h| !h.is_neutral()) {
                    driver.post_correction(CorrectionInput::neutral());
                }
                if run.seconds.is_none() && driver.phase() == Phase::Executing {
                    return Err(ScriptError::Timeout { step: i, max_s: run.max_s });
                }
            }
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default)]
pub struct HeadlessOptions {
    pub parallelism: Parallelism,
    pub keep_scans: bool,
}

/// Deterministic full episode: same scenario, script and seed give
/// identical metrics and logs.
pub fn run_headless(
    scenario: &Scenario,
    script: &OperatorScript,
    seed: u64,
    base_dir: Option<&Path>,
) -> Result<HeadlessRun, ScriptError> {
    run_headless_with(scenario, script, seed, base_dir, HeadlessOptions::default())
}

pub fn run_headless_with(
    scenario: &Scenario,
    script: &OperatorScript,
    seed: u64,
    base_dir: Option<&Path>,
    options: HeadlessOptions,
) -> Result<HeadlessRun, ScriptError> {
    let robot = scenario.load_robot(base_dir)?;
    let session = Session::new(scenario.clone(), robot, seed)
        .map_err(session_err(0))?
        .with_parallelism(options.parallelism)
        .keep_scans(options.keep_scans);
    let mut driver = Driver::new(session);
    play(&mut driver, script)?;
    let session = driver.into_session();
    Ok(HeadlessRun { metrics: session.metrics(), log: session.log.clone(), session })
}
