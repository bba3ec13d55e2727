//! Recorded client traffic, stamped with the execution step it was applied at.

use std::io::Write;

use anyhow::{bail, Context};
use sandbot_core::autonomy::CorrectionInput;
use sandbot_core::driver::{Driver, DriverInput};
use sandbot_core::exec::Parallelism;
use sandbot_core::kinematics::RobotModel;
use sandbot_core::scenario::Scenario;
use sandbot_core::session::Session;
use serde::{Deserialize, Serialize};

use crate::protocol::{driver_input, ClientEnvelope};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum JournalLine {
    Message { step: u64, message: ClientEnvelope },
    /// Operator connection dropped; held corrections are released.
    Disconnect { step: u64, disconnect: bool },
    /// Loop stopped after `step` steps.
    End { step: u64, end: bool },
}

impl JournalLine {
    pub fn step(&self) -> u64 {
        match self {
            JournalLine::Message { step, .. } | JournalLine::Disconnect { step, .. } | JournalLine::End { step, .. } => {
                *step
            }
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        serde_json::to_writer(&mut *w, self)?;
        w.write_all(b"\n")
    }
}

/// Input a journal line feeds the driver, shared by the live loop and replay.
pub fn line_input(line: &JournalLine) -> Option<DriverInput> {
    match line {
        JournalLine::Message { message, .. } => driver_input(message),
        JournalLine::Disconnect { .. } => Some(DriverInput::Correction { input: CorrectionInput::neutral(), seq: None }),
        JournalLine::End { .. } => None,
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Journal {
    pub lines: Vec<JournalLine>,
}

impl Journal {
    pub fn parse(text: &str) -> anyhow::Result<Journal> {
        let mut lines = Vec::new();
        for (i, raw) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let line: JournalLine = serde_json::from_str(raw).with_context(|| format!("journal line {}", i + 1))?;
            if lines.last().is_some_and(|prev: &JournalLine| prev.step() > line.step()) {
                bail!("journal line {}: steps go backwards", i + 1);
            }
            lines.push(line);
        }
        Ok(Journal { lines })
    }

    /// Step count to replay to: the end marker, else the last stamped step.
    pub fn end_step(&self) -> u64 {
        self.lines
            .iter()
            .rev()
            .find_map(|l| match l {
                JournalLine::End { step, .. } => Some(*step),
                _ => None,
            })
            .unwrap_or_else(|| self.lines.last().map_or(0, JournalLine::step))
    }
}

/// Re-runs a recorded live session headless.
pub fn replay(
    scenario: &Scenario,
    robot: RobotModel,
    seed: u64,
    journal: &Journal,
    par: Parallelism,
) -> anyhow::Result<Session> {
    let session = Session::new(scenario.clone(), robot, seed)?.with_parallelism(par);
    let mut driver = Driver::new(session);
    let end = journal.end_step();
    let mut lines = journal.lines.iter().peekable();
    for step in 0..end {
        while let Some(line) = lines.next_if(|l| l.step() == step) {
            if let Some(input) = line_input(line) {
                let _ = driver.apply(&input);
            }
        }
        driver.step()?;
    }
    Ok(driver.into_session())
}
