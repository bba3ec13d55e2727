//! Fixed-step driver around a [`Session`]. Inputs are applied between steps
//! and stamped with the step index, so a recorded input stream replays to
//! the same event log.

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autonomy::{CorrectionInput, CorrectionMailbox};
use crate::session::{OperatorAction, Phase, Session, SessionError, TickReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum DriverInput {
    Action { action: OperatorAction },
    Correction { input: CorrectionInput, seq: Option<u64> },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepOutcome {
    Ticked(TickReport),
    Idled,
}

#[derive(Debug)]
pub struct Driver {
    pub session: Session,
    mailbox: CorrectionMailbox,
    step: u64,
    dt: f64,
    consumed_seq: u64,
}

impl Driver {
    pub fn new(session: Session) -> Self {
        let dt = session.scenario.tick_dt_s;
        Driver { session, mailbox: CorrectionMailbox::new(), step: 0, dt, consumed_seq: 0 }
    }

    pub fn step_index(&self) -> u64 {
        self.step
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn phase(&self) -> Phase {
        self.session.phase
    }

    /// Applies one input before the next step. Rejected actions are logged
    /// and leave the session unchanged.
    pub fn apply(&mut self, input: &DriverInput) -> Result<(), SessionError> {
        match input {
            DriverInput::Action { action } => self.session.apply(action).inspect_err(|e| {
                self.session.log_event("action_rejected", json!({ "action": action, "error": e.to_string() }));
            }),
            DriverInput::Correction { input, seq } => {
                self.mailbox.post_with_seq(*input, *seq);
                Ok(())
            }
        }
    }

    pub fn apply_action(&mut self, action: OperatorAction) -> Result<(), SessionError> {
        self.apply(&DriverInput::Action { action })
    }

    pub fn post_correction(&mut self, input: CorrectionInput) {
        let _ = self.apply(&DriverInput::Correction { input, seq: None });
    }

    /// One fixed step: a sanding tick with the latest correction while
    /// executing, otherwise the clock advances.
    pub fn step(&mut self) -> Result<StepOutcome, SessionError> {
        let out = if self.session.phase == Phase::Executing {
            let slot = self.mailbox.take_latest();
            if slot.seq != self.consumed_seq {
                self.consumed_seq = slot.seq;
                self.session.log_event(
                    "correction_consumed",
                    json!({ "seq": slot.seq, "superseded": slot.superseded, "input": slot.input }),
                );
            }
            StepOutcome::Ticked(self.session.tick(&slot.input, self.dt)?)
        } else {
            self.session.idle(self.dt)?;
            StepOutcome::Idled
        };
        self.step += 1;
        Ok(out)
    }

    pub fn run_steps(&mut self, n: u64) -> Result<(), SessionError> {
        for _ in 0..n {
            self.step()?;
        }
        Ok(())
    }

    pub fn into_session(self) -> Session {
        self.session
    }
}
