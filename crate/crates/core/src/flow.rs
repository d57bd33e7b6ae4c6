//! Rectified-flow state, schedules and the Euler sampler.
//!
//! Time runs from `t = 0` (noise) to `t = 1` (data). The straight path is
//! `x_t = t·x1 + (1 − t)·x0` with constant velocity `x1 − x0`. Velocities are
//! only ever requested at the left endpoint of a step, so `t = 1` is never
//! passed to a velocity source.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;

/// A point `(x_t, t)` on a flow trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub x: Grid,
    pub t: f64,
}

impl FlowState {
    pub fn new(x: Grid, t: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Parameter(format!("flow time {t} outside [0, 1]")));
        }
        Ok(Self { x, t })
    }
}

/// Strictly increasing times from 0 to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct TimeSchedule {
    times: Vec<f64>,
}

impl TimeSchedule {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::Parameter("a schedule needs at least the two endpoints".into()));
        }
        if times[0] != 0.0 || *times.last().unwrap() != 1.0 {
            return Err(Error::Parameter("a schedule must start at 0 and end at 1".into()));
        }
        if let Some(w) = times.windows(2).find(|w| !(w[1] > w[0])) {
            return Err(Error::Parameter(format!(
                "schedule not strictly increasing at {} -> {}",
                w[0], w[1]
            )));
        }
        Ok(Self { times })
    }

    /// `steps + 1` equally spaced times.
    pub fn uniform(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Parameter("step count must be positive".into()));
        }
        let mut times: Vec<f64> = (0..steps).map(|i| i as f64 / steps as f64).collect();
        times.push(1.0);
        Self::new(times)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    /// Times strictly between 0 and 1.
    pub fn interior(&self) -> &[f64] {
        &self.times[1..self.times.len() - 1]
    }
}

impl TryFrom<Vec<f64>> for TimeSchedule {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<TimeSchedule> for Vec<f64> {
    fn from(s: TimeSchedule) -> Self {
        s.times
    }
}

/// Native and extrapolated token (or pixel) counts and `s = √(L_extra / L_native)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalePair {
    pub native_len: usize,
    pub extra_len: usize,
}

impl ScalePair {
    pub fn new(native_len: usize, extra_len: usize) -> Result<Self> {
        if native_len == 0 {
            return Err(Error::Parameter("native length must be positive".into()));
        }
        if extra_len < native_len {
            return Err(Error::Parameter(format!(
                "extrapolated length {extra_len} is below native length {native_len}"
            )));
        }
        Ok(Self { native_len, extra_len })
    }

    /// Scale pair for square grids of the given side lengths.
    pub fn square(native_side: usize, extra_side: usize) -> Result<Self> {
        Self::new(native_side * native_side, extra_side * extra_side)
    }

    pub fn s(&self) -> f64 {
        (self.extra_len as f64 / self.native_len as f64).sqrt()
    }

    /// `s²` when the length ratio is an exact integer.
    pub fn integer_s_squared(&self) -> Option<usize> {
        self.extra_len.is_multiple_of(self.native_len).then(|| self.extra_len / self.native_len)
    }

    /// `s` when it is an exact integer.
    pub fn integer_s(&self) -> Option<usize> {
        let s2 = self.integer_s_squared()?;
        let r = (s2 as f64).sqrt().round() as usize;
        (r * r == s2).then_some(r)
    }
}

/// `t·x1 + (1 − t)·x0`.
pub fn interpolate(x0: &Grid, x1: &Grid, t: f64) -> Result<Grid> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Parameter(format!("interpolation time {t} outside [0, 1]")));
    }
    x0.zip_map(x1, |a, b| t * b + (1.0 - t) * a)
}

/// One explicit Euler step.
pub fn euler_step(state: &FlowState, v: &Grid, dt: f64) -> Result<FlowState> {
    if !(dt > 0.0) {
        return Err(Error::Parameter(format!("Euler step size must be positive, got {dt}")));
    }
    let t_next = state.t + dt;
    if t_next > 1.0 + 1e-12 {
        return Err(Error::Parameter(format!("Euler step from t={} by {dt} overshoots t=1", state.t)));
    }
    let mut x = state.x.clone();
    x.add_scaled(dt, v)?;
    Ok(FlowState { x, t: t_next.min(1.0) })
}

/// Anything that predicts a velocity field `v(x, t)`. Sources are shared
/// across worker threads when a batch of seeds runs in parallel.
pub trait VelocitySource: Sync {
    fn velocity(&self, x: &Grid, t: f64) -> Result<Grid>;
}

impl<F> VelocitySource for F
where
    F: Fn(&Grid, f64) -> Result<Grid> + Sync,
{
    fn velocity(&self, x: &Grid, t: f64) -> Result<Grid> {
        self(x, t)
    }
}

/// A transformation applied to the predicted velocity before each step.
pub trait VelocityGuide {
    fn guide(&self, v: Grid, x: &Grid, t: f64) -> Result<Grid>;
}

/// Per-step record of a sampling run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub t: f64,
    pub dt: f64,
    /// RMS of the change the guide made to the velocity (0 when unguided).
    pub guidance_rms: f64,
}

#[derive(Debug, Clone)]
pub struct SampleRun {
    pub x: Grid,
    pub steps: Vec<StepRecord>,
}

/// Integrate from `x0` at `t = 0` to `t = 1`.
pub fn sample(
    source: &dyn VelocitySource,
    schedule: &TimeSchedule,
    x0: &Grid,
    guide: Option<&dyn VelocityGuide>,
) -> Result<Grid> {
    let start = FlowState { x: x0.clone(), t: 0.0 };
    Ok(sample_from(source, schedule, start, guide)?.x)
}

/// Integrate from an arbitrary start state to `t = 1`, stepping through the
/// schedule times that lie strictly after `start.t`.
pub fn sample_from(
    source: &dyn VelocitySource,
    schedule: &TimeSchedule,
    start: FlowState,
    guide: Option<&dyn VelocityGuide>,
) -> Result<SampleRun> {
    if !start.x.is_finite() {
        return Err(Error::Numeric { t: start.t, message: "initial state is not finite".into() });
    }
    let t_start = start.t;
    let mut state = start;
    let mut steps = Vec::with_capacity(schedule.steps());
    for &t_next in schedule.times().iter().filter(|&&t| t > t_start) {
        let t = state.t;
        let v = source.velocity(&state.x, t)?;
        state.x.ensure_same_shape(&v, "velocity")?;
        if !v.is_finite() {
            return Err(Error::Numeric { t, message: "velocity source returned a non-finite value".into() });
        }
        let (v, guidance_rms) = match guide {
            Some(g) => {
                let guided = g.guide(v.clone(), &state.x, t)?;
                if !guided.is_finite() {
                    return Err(Error::Numeric { t, message: "guided velocity is not finite".into() });
                }
                let rms = guided.rms_diff(&v)?;
                (guided, rms)
            }
            None => (v, 0.0),
        };
        let dt = t_next - t;
        state = euler_step(&state, &v, dt)?;
        state.t = t_next;
        steps.push(StepRecord { t, dt, guidance_rms });
    }
    Ok(SampleRun { x: state.x, steps })
}

/// Resolution time shift `t ↦ t / (s* − s*·t + t)`; endpoints stay fixed.
pub fn shift_time(t: f64, s_star: f64) -> f64 {
    if t <= 0.0 {
        0.0
    } else if t >= 1.0 {
        1.0
    } else {
        t / (s_star - s_star * t + t)
    }
}

/// Apply [`shift_time`] to every schedule time.
pub fn shift_schedule(schedule: &TimeSchedule, s_star: f64) -> Result<TimeSchedule> {
    if !(s_star >= 1.0) || !s_star.is_finite() {
        return Err(Error::Parameter(format!("time-shift s* must be >= 1, got {s_star}")));
    }
    TimeSchedule::new(schedule.times().iter().map(|&t| shift_time(t, s_star)).collect())
}
