//! Operator corrections on top of nominal task commands: `x = clamp(x_n + dx)`
//! with `dx` bounded by a per-axis saturation set.

use std::sync::Mutex;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AutonomyError {
    #[error("coupling weights must have max |w| = 1, got {0}")]
    CouplingNorm(f64),
    #[error("saturation bounds must be finite and non-negative")]
    NegativeSaturation,
    #[error("safety box is empty or non-finite")]
    InvalidBox,
}

/// Controlled variables. `feed_scale` multiplies the nominal feed; negative
/// values run the path backwards.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct CommandVector {
    pub feed_scale: f64,
    pub force_n: f64,
    pub pitch_rad: f64,
    pub lateral_mm: f64,
}

impl CommandVector {
    pub const ZERO: CommandVector = CommandVector { feed_scale: 0.0, force_n: 0.0, pitch_rad: 0.0, lateral_mm: 0.0 };

    pub fn to_array(self) -> [f64; 4] {
        [self.feed_scale, self.force_n, self.pitch_rad, self.lateral_mm]
    }

    pub fn from_array([feed_scale, force_n, pitch_rad, lateral_mm]: [f64; 4]) -> Self {
        CommandVector { feed_scale, force_n, pitch_rad, lateral_mm }
    }
}

/// Symmetric per-axis bounds on the correction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct SaturationSet {
    pub feed_scale: f64,
    pub force_n: f64,
    pub pitch_rad: f64,
    pub lateral_mm: f64,
}

impl Default for SaturationSet {
    fn default() -> Self {
        SaturationSet { feed_scale: 0.5, force_n: 10.0, pitch_rad: 0.05, lateral_mm: 10.0 }
    }
}

impl SaturationSet {
    pub fn to_array(self) -> [f64; 4] {
        [self.feed_scale, self.force_n, self.pitch_rad, self.lateral_mm]
    }

    pub fn validate(&self) -> Result<(), AutonomyError> {
        if self.to_array().iter().all(|b| b.is_finite() && *b >= 0.0) {
            Ok(())
        } else {
            Err(AutonomyError::NegativeSaturation)
        }
    }
}

/// Hard limits applied after every correction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct SafetyBox {
    pub feed_scale: [f64; 2],
    pub force_n: [f64; 2],
    pub pitch_max_rad: f64,
    pub lateral_max_mm: f64,
}

impl Default for SafetyBox {
    fn default() -> Self {
        SafetyBox { feed_scale: [-1.0, 3.0], force_n: [0.0, 50.0], pitch_max_rad: 0.15, lateral_max_mm: 30.0 }
    }
}

impl SafetyBox {
    pub fn bounds(&self) -> [[f64; 2]; 4] {
        [
            self.feed_scale,
            self.force_n,
            [-self.pitch_max_rad, self.pitch_max_rad],
            [-self.lateral_max_mm, self.lateral_max_mm],
        ]
    }

    pub fn validate(&self) -> Result<(), AutonomyError> {
        let ok = self.bounds().iter().all(|[lo, hi]| lo.is_finite() && hi.is_finite() && lo <= hi);
        if ok { Ok(()) } else { Err(AutonomyError::InvalidBox) }
    }

    pub fn contains(&self, x: &CommandVector) -> bool {
        x.to_array().iter().zip(self.bounds()).all(|(v, [lo, hi])| *v >= lo && *v <= hi)
    }

    pub fn clamp(&self, x: CommandVector) -> CommandVector {
        let b = self.bounds();
        let a = x.to_array();
        CommandVector::from_array(std::array::from_fn(|i| a[i].clamp(b[i][0], b[i][1])))
    }
}

/// Direction of the single coupled axis in command space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct CouplingWeights(pub [f64; 4]);

impl Default for CouplingWeights {
    /// Positive input raises force and pitch and slows the feed.
    fn default() -> Self {
        CouplingWeights([-0.5, 1.0, 0.5, 0.0])
    }
}

impl CouplingWeights {
    pub fn validate(&self) -> Result<(), AutonomyError> {
        let m = self.0.iter().fold(0.0f64, |m, w| m.max(w.abs()));
        if (m - 1.0).abs() <= 1e-12 && self.0.iter().all(|w| w.is_finite()) {
            Ok(())
        } else {
            Err(AutonomyError::CouplingNorm(m))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum CorrectionMode {
    /// One scalar axis mapped through the coupling weights.
    Coupled { u: f64 },
    /// One axis per controlled variable.
    Independent { axes: [f64; 4] },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct CorrectionInput {
    #[serde(flatten)]
    pub mode: CorrectionMode,
    #[serde(default)]
    pub backtrack: bool,
}

fn unit(v: f64) -> f64 {
    if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) }
}

impl CorrectionInput {
    pub fn neutral() -> Self {
        CorrectionInput { mode: CorrectionMode::Coupled { u: 0.0 }, backtrack: false }
    }

    pub fn coupled(u: f64) -> Self {
        CorrectionInput { mode: CorrectionMode::Coupled { u }, backtrack: false }.sanitized()
    }

    pub fn independent(axes: [f64; 4]) -> Self {
        CorrectionInput { mode: CorrectionMode::Independent { axes }, backtrack: false }.sanitized()
    }

    pub fn with_backtrack(mut self, backtrack: bool) -> Self {
        self.backtrack = backtrack;
        self
    }

    /// Components clamped to [-1, 1]; NaN reads as released (0).
    pub fn sanitized(self) -> Self {
        let mode = match self.mode {
            CorrectionMode::Coupled { u } => CorrectionMode::Coupled { u: unit(u) },
            CorrectionMode::Independent { axes } => CorrectionMode::Independent { axes: axes.map(unit) },
        };
        CorrectionInput { mode, backtrack: self.backtrack }
    }

    pub fn is_neutral(&self) -> bool {
        !self.backtrack
            && match self.mode {
                CorrectionMode::Coupled { u } => u == 0.0,
                CorrectionMode::Independent { axes } => axes.iter().all(|a| *a == 0.0),
            }
    }
}

impl Default for CorrectionInput {
    fn default() -> Self {
        CorrectionInput::neutral()
    }
}

/// Operator input to a correction inside the saturation set.
pub fn map_correction(input: &CorrectionInput, sat: &SaturationSet, w: &CouplingWeights) -> CommandVector {
    let s = sat.to_array();
    let d: [f64; 4] = match input.sanitized().mode {
        CorrectionMode::Coupled { u } => std::array::from_fn(|i| u * w.0[i] * s[i]),
        CorrectionMode::Independent { axes } => std::array::from_fn(|i| axes[i] * s[i]),
    };
    CommandVector::from_array(d)
}

/// `clamp_box(x_n + dx)`. A zero component leaves the nominal value untouched,
/// so a released input reproduces `x_n` bit for bit.
pub fn arbitrate(nominal: &CommandVector, delta: &CommandVector, safety: &SafetyBox) -> CommandVector {
    let (n, d) = (nominal.to_array(), delta.to_array());
    let sum = CommandVector::from_array(std::array::from_fn(|i| if d[i] == 0.0 { n[i] } else { n[i] + d[i] }));
    safety.clamp(sum)
}

/// Full command for one tick. Backtracking overrides the feed with full
/// reverse at nominal speed and keeps the other corrections.
pub fn command(
    nominal: &CommandVector,
    input: &CorrectionInput,
    sat: &SaturationSet,
    w: &CouplingWeights,
    safety: &SafetyBox,
) -> CommandVector {
    let mut x = arbitrate(nominal, &map_correction(input, sat, w), safety);
    if input.backtrack {
        x.feed_scale = -1.0;
    }
    x
}

/// Signed progress rate along the path, in the units of `nominal_feed`.
pub fn backtrack_rate(input: &CorrectionInput, nominal_feed: f64, feed_scale: f64) -> f64 {
    if input.backtrack { -nominal_feed } else { feed_scale * nominal_feed }
}

/// Latest-value slot shared between input ingest and the execution tick.
/// Posting overwrites; reading never blocks on the producer for more than the
/// copy.
#[derive(Debug, Default)]
pub struct CorrectionMailbox {
    slot: Mutex<MailboxSlot>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MailboxSlot {
    pub input: CorrectionInput,
    /// Sequence number of the value in the slot (0 = nothing posted yet).
    pub seq: u64,
    /// Values overwritten before any tick read them.
    pub superseded: u64,
    read_seq: u64,
}

impl CorrectionMailbox {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn post(&self, input: CorrectionInput) -> u64 {
        self.post_with_seq(input, None)
    }

    /// Posts with an explicit sequence number (e.g. the client message seq).
    pub fn post_with_seq(&self, input: CorrectionInput, seq: Option<u64>) -> u64 {
        let mut s = self.slot.lock().unwrap_or_else(|e| e.into_inner());
        if s.seq != 0 && s.read_seq != s.seq {
            s.superseded += 1;
        }
        s.seq = seq.unwrap_or(s.seq + 1);
        s.input = input.sanitized();
        s.seq
    }

    /// Current value; marks it as read.
    pub fn take_latest(&self) -> MailboxSlot {
        let mut s = self.slot.lock().unwrap_or_else(|e| e.into_inner());
        s.read_seq = s.seq;
        *s
    }

    pub fn peek(&self) -> MailboxSlot {
        *self.slot.lock().unwrap_or_else(|e| e.into_inner())
    }
}
