//! Low-resolution guidance for extrapolated sampling.
//!
//! A native-resolution sample is upsampled onto the extrapolated grid and
//! used to steer the extrapolated flow. [`ProjectedFlowGuide`] corrects only
//! the projected (native-band) part of the velocity toward the straight line
//! ending at the native result; [`SkipResidualGuide`] and [`sdedit_start`]
//! are the two baseline strategies.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{
    interpolate, sample_from, FlowState, ScalePair, StepRecord, TimeSchedule, VelocityGuide, VelocitySource,
};
use crate::grid::{Grid, Shape};
use crate::projection::{lowpass, upsample_bandlimited, ProjectionConfig};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    None,
    ProjectedFlow,
    Sdedit,
    SkipResidual,
}

impl GuidanceMode {
    pub const ALL: [GuidanceMode; 4] =
        [GuidanceMode::None, GuidanceMode::Sdedit, GuidanceMode::SkipResidual, GuidanceMode::ProjectedFlow];

    pub fn name(self) -> &'static str {
        match self {
            GuidanceMode::None => "none",
            GuidanceMode::ProjectedFlow => "projected_flow",
            GuidanceMode::Sdedit => "sdedit",
            GuidanceMode::SkipResidual => "skip_residual",
        }
    }
}

impl std::str::FromStr for GuidanceMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        GuidanceMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown guidance mode '{s}'")))
    }
}

/// Guidance strength `α_t` of projected flow.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaSchedule {
    CosineDecay,
    Constant(f64),
}

impl AlphaSchedule {
    pub fn at(&self, t: f64) -> f64 {
        match *self {
            AlphaSchedule::CosineDecay => alpha_cosine(t),
            AlphaSchedule::Constant(a) => a,
        }
    }
}

/// Weight of the skip-residual pull.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightSchedule {
    /// `(1 + cos πt) / 2`, from 1 at `t = 0` down to 0 at `t = 1`.
    CosineRamp,
    Constant(f64),
}

impl WeightSchedule {
    pub fn at(&self, t: f64) -> f64 {
        match *self {
            WeightSchedule::CosineRamp => 0.5 * (1.0 + (PI * t).cos()),
            WeightSchedule::Constant(w) => w,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub mode: GuidanceMode,
    #[serde(default = "default_alpha")]
    pub alpha_schedule: AlphaSchedule,
    #[serde(default = "default_sdedit_start")]
    pub sdedit_start_t: f64,
    #[serde(default = "default_weight")]
    pub skip_residual_weight: WeightSchedule,
    /// Projection `P`; defaults to the ideal native-band filter.
    #[serde(default)]
    pub projection: Option<ProjectionConfig>,
}

fn default_alpha() -> AlphaSchedule {
    AlphaSchedule::CosineDecay
}

fn default_sdedit_start() -> f64 {
    0.6
}

fn default_weight() -> WeightSchedule {
    WeightSchedule::CosineRamp
}

impl GuidanceConfig {
    pub fn new(mode: GuidanceMode) -> Self {
        Self {
            mode,
            alpha_schedule: default_alpha(),
            sdedit_start_t: default_sdedit_start(),
            skip_residual_weight: default_weight(),
            projection: None,
        }
    }

    pub fn with_mode(mut self, mode: GuidanceMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sdedit_start_t > 0.0 && self.sdedit_start_t < 1.0) {
            return Err(Error::Parameter(format!(
                "sdedit start time {} outside (0, 1)",
                self.sdedit_start_t
            )));
        }
        if let Some(p) = &self.projection {
            p.validate()?;
        }
        Ok(())
    }

    /// The configured projection, or the native band of `scale`.
    pub fn projection_for(&self, native_side: usize, extra_side: usize) -> ProjectionConfig {
        self.projection.unwrap_or_else(|| ProjectionConfig::native_band(native_side, extra_side))
    }
}

/// `α_t = 1 + 0.5·cos(πt)`.
pub fn alpha_cosine(t: f64) -> f64 {
    1.0 + 0.5 * (PI * t).cos()
}

/// What the extrapolated run knows about the native result.
#[derive(Debug, Clone)]
pub struct GuidanceContext {
    /// Native sample, band-limited-upsampled onto the extrapolated grid.
    pub x1_native_up: Grid,
    /// Initial noise of the extrapolated run.
    pub x0_extra: Grid,
    pub scale: ScalePair,
}

impl GuidanceContext {
    pub fn new(x1_native: &Grid, x0_extra: Grid) -> Result<Self> {
        let (c, h, w) = x1_native.shape();
        let (ce, he, we) = x0_extra.shape();
        if c != ce || he % h != 0 || we % w != 0 || he / h != we / w {
            return Err(Error::Dimension(format!(
                "extrapolated grid {:?} is not an integer multiple of native grid {:?}",
                x0_extra.shape(),
                x1_native.shape()
            )));
        }
        let factor = he / h;
        Ok(Self {
            x1_native_up: upsample_bandlimited(x1_native, factor)?,
            x0_extra,
            scale: ScalePair::new(h * w, he * we)?,
        })
    }

    pub fn shape(&self) -> Shape {
        self.x0_extra.shape()
    }
}

fn check_open_time(t: f64) -> Result<()> {
    if !(0.0..1.0).contains(&t) {
        return Err(Error::Parameter(format!("guidance is undefined at t = {t}; needs t in [0, 1)")));
    }
    Ok(())
}

/// `v + α·((x̂1 − P x_t)/(1 − t) − P v)`.
pub fn projected_flow_velocity(
    v: &Grid,
    x_t: &Grid,
    ctx: &GuidanceContext,
    t: f64,
    alpha: f64,
    proj: &ProjectionConfig,
) -> Result<Grid> {
    check_open_time(t)?;
    v.ensure_same_shape(x_t, "projected flow state")?;
    v.ensure_same_shape(&ctx.x1_native_up, "projected flow guidance")?;
    if alpha == 0.0 {
        return Ok(v.clone());
    }
    let px = lowpass(x_t, proj);
    let pv = lowpass(v, proj);
    let inv = 1.0 / (1.0 - t);
    let mut out = v.clone();
    for (((o, g), p), q) in
        out.data_mut().iter_mut().zip(ctx.x1_native_up.data()).zip(px.data()).zip(pv.data())
    {
        *o += alpha * ((g - p) * inv - q);
    }
    Ok(out)
}

/// `v + w·(r_t − x_t)/(1 − t)` with `r_t` the straight-line state built from
/// the run's own initial noise.
pub fn skip_residual_velocity(
    v: &Grid,
    x_t: &Grid,
    ctx: &GuidanceContext,
    t: f64,
    weight: f64,
) -> Result<Grid> {
    check_open_time(t)?;
    v.ensure_same_shape(x_t, "skip residual state")?;
    if weight == 0.0 {
        return Ok(v.clone());
    }
    let reference = interpolate(&ctx.x0_extra, &ctx.x1_native_up, t)?;
    let residual = reference.sub(x_t)?;
    let mut out = v.clone();
    out.add_scaled(weight / (1.0 - t), &residual)?;
    Ok(out)
}

/// Noise the upsampled native result to `start_t` with fresh noise.
pub fn sdedit_start(ctx: &GuidanceContext, start_t: f64, seed: u64) -> Result<FlowState> {
    if !(start_t > 0.0 && start_t < 1.0) {
        return Err(Error::Parameter(format!("sdedit start time {start_t} outside (0, 1)")));
    }
    let noise = Grid::standard_normal(ctx.shape(), &mut rng::stream(seed, "sdedit-noise", 0));
    FlowState::new(interpolate(&noise, &ctx.x1_native_up, start_t)?, start_t)
}

pub struct ProjectedFlowGuide<'a> {
    pub ctx: &'a GuidanceContext,
    pub alpha: AlphaSchedule,
    pub projection: ProjectionConfig,
}

impl VelocityGuide for ProjectedFlowGuide<'_> {
    fn guide(&self, v: Grid, x: &Grid, t: f64) -> Result<Grid> {
        projected_flow_velocity(&v, x, self.ctx, t, self.alpha.at(t), &self.projection)
    }
}

pub struct SkipResidualGuide<'a> {
    pub ctx: &'a GuidanceContext,
    pub weight: WeightSchedule,
}

impl VelocityGuide for SkipResidualGuide<'_> {
    fn guide(&self, v: Grid, x: &Grid, t: f64) -> Result<Grid> {
        skip_residual_velocity(&v, x, self.ctx, t, self.weight.at(t))
    }
}

/// Root mean square of `P(x1_extra) − x̂1`.
pub fn projection_error(x1_extra: &Grid, ctx: &GuidanceContext, proj: &ProjectionConfig) -> Result<f64> {
    lowpass(x1_extra, proj).rms_diff(&ctx.x1_native_up)
}

/// Sources and schedules of a two-stage run.
pub struct TwoStageSetup<'a> {
    pub native_source: &'a dyn VelocitySource,
    pub extra_source: &'a dyn VelocitySource,
    pub native_shape: Shape,
    /// Per-axis integer extrapolation factor.
    pub factor: usize,
    pub native_schedule: &'a TimeSchedule,
    pub extra_schedule: &'a TimeSchedule,
}

impl TwoStageSetup<'_> {
    pub fn extra_shape(&self) -> Shape {
        let (c, h, w) = self.native_shape;
        (c, h * self.factor, w * self.factor)
    }
}

#[derive(Debug, Clone)]
pub struct TwoStageOutput {
    pub x1_native: Grid,
    pub x1_extra: Grid,
    pub context: GuidanceContext,
    pub steps: Vec<StepRecord>,
}

/// Stage 1: unguided sampling at the native resolution.
pub fn native_stage(setup: &TwoStageSetup<'_>, seed: u64) -> Result<Grid> {
    let x0 = Grid::standard_normal(setup.native_shape, &mut rng::stream(seed, "native-noise", 0));
    crate::flow::sample(setup.native_source, setup.native_schedule, &x0, None)
}

/// Stage 2: guided sampling at the extrapolated resolution from a native result.
pub fn extra_stage(
    setup: &TwoStageSetup<'_>,
    x1_native: &Grid,
    guidance: &GuidanceConfig,
    seed: u64,
) -> Result<TwoStageOutput> {
    guidance.validate()?;
    if setup.factor == 0 {
        return Err(Error::Parameter("extrapolation factor must be positive".into()));
    }
    let x0_extra = Grid::standard_normal(setup.extra_shape(), &mut rng::stream(seed, "extra-noise", 0));
    let ctx = GuidanceContext::new(x1_native, x0_extra)?;
    let proj = guidance.projection_for(setup.native_shape.2, setup.extra_shape().2);
    let start = FlowState::new(ctx.x0_extra.clone(), 0.0)?;
    let run = match guidance.mode {
        GuidanceMode::None => sample_from(setup.extra_source, setup.extra_schedule, start, None)?,
        GuidanceMode::ProjectedFlow => {
            let guide = ProjectedFlowGuide { ctx: &ctx, alpha: guidance.alpha_schedule, projection: proj };
            sample_from(setup.extra_source, setup.extra_schedule, start, Some(&guide))?
        }
        GuidanceMode::SkipResidual => {
            let guide = SkipResidualGuide { ctx: &ctx, weight: guidance.skip_residual_weight };
            sample_from(setup.extra_source, setup.extra_schedule, start, Some(&guide))?
        }
        GuidanceMode::Sdedit => {
            let start = sdedit_start(&ctx, guidance.sdedit_start_t, seed)?;
            sample_from(setup.extra_source, setup.extra_schedule, start, None)?
        }
    };
    Ok(TwoStageOutput { x1_native: x1_native.clone(), x1_extra: run.x, context: ctx, steps: run.steps })
}

/// Native stage followed by the guided extrapolated stage.
pub fn two_stage_sample(
    setup: &TwoStageSetup<'_>,
    guidance: &GuidanceConfig,
    seed: u64,
) -> Result<TwoStageOutput> {
    let x1_native = native_stage(setup, seed)?;
    extra_stage(setup, &x1_native, guidance, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::TimeSchedule;
    use crate::oracle::{DegradationConfig, DegradedOracle, ExactOracle, MixtureSpec};
    use proptest::prelude::*;

    fn noise(shape: Shape, seed: u64, label: &str) -> Grid {
        Grid::standard_normal(shape, &mut rng::stream(seed, label, 0))
    }

    fn context(seed: u64) -> GuidanceContext {
        GuidanceContext::new(&noise((1, 4, 4), seed, "n"), noise((1, 16, 16), seed, "e")).unwrap()
    }

    #[test]
    fn alpha_values() {
        assert_eq!(alpha_cosine(0.0), 1.5);
        assert!((alpha_cosine(0.5) - 1.0).abs() < 1e-15);
        assert_eq!(alpha_cosine(1.0), 0.5);
    }

    #[test]
    fn context_is_band_limited() {
        let ctx = context(1);
        let p = ProjectionConfig::native_band(4, 16);
        assert!(lowpass(&ctx.x1_native_up, &p).max_abs_diff(&ctx.x1_native_up).unwrap() < 1e-12);
        assert_eq!(ctx.scale.s(), 4.0);
        assert!(GuidanceContext::new(&Grid::zeros((1, 4, 4)), Grid::zeros((1, 10, 10))).is_err());
    }

    #[test]
    fn projected_flow_fixed_points() {
        let ctx = context(2);
        let p = ProjectionConfig::native_band(4, 16);
        let x = noise((1, 16, 16), 3, "x");
        let v = noise((1, 16, 16), 4, "v");
        assert_eq!(projected_flow_velocity(&v, &x, &ctx, 0.3, 0.0, &p).unwrap(), v);

        // v whose projection already equals the straight-line target
        let t = 0.3;
        let target = ctx.x1_native_up.sub(&lowpass(&x, &p)).unwrap().scale(1.0 / (1.0 - t));
        let hf = v.sub(&lowpass(&v, &p)).unwrap();
        let v_fixed = hf.add(&target).unwrap();
        for alpha in [0.5, 1.0, 2.7] {
            let out = projected_flow_velocity(&v_fixed, &x, &ctx, t, alpha, &p).unwrap();
            assert!(out.max_abs_diff(&v_fixed).unwrap() < 1e-12);
        }
        assert!(matches!(projected_flow_velocity(&v, &x, &ctx, 1.0, 1.0, &p), Err(Error::Parameter(_))));
    }

    #[test]
    fn skip_residual_fixed_points() {
        let ctx = context(5);
        let v = noise((1, 16, 16), 6, "v");
        let x = noise((1, 16, 16), 7, "x");
        assert_eq!(skip_residual_velocity(&v, &x, &ctx, 0.4, 0.0).unwrap(), v);
        let r = interpolate(&ctx.x0_extra, &ctx.x1_native_up, 0.4).unwrap();
        let out = skip_residual_velocity(&v, &r, &ctx, 0.4, 3.0).unwrap();
        assert!(out.max_abs_diff(&v).unwrap() < 1e-12);
        assert!(skip_residual_velocity(&v, &x, &ctx, 1.0, 1.0).is_err());
        assert_eq!(WeightSchedule::CosineRamp.at(0.0), 1.0);
        assert!(WeightSchedule::CosineRamp.at(1.0).abs() < 1e-15);
    }

    #[test]
    fn sdedit_limits() {
        let ctx = context(8);
        let near_one = sdedit_start(&ctx, 1.0 - 1e-9, 1).unwrap();
        assert!(near_one.x.max_abs_diff(&ctx.x1_native_up).unwrap() < 1e-7);
        let near_zero = sdedit_start(&ctx, 1e-9, 1).unwrap();
        let fresh = noise(ctx.shape(), 1, "sdedit-noise");
        assert!(near_zero.x.max_abs_diff(&fresh).unwrap() < 1e-7);
        assert!(sdedit_start(&ctx, 0.0, 1).is_err());
    }

    #[test]
    fn alpha_one_pins_the_projection_for_any_source() {
        // An adversarial velocity source: pure seeded noise, unrelated to x.
        let src = |x: &Grid, t: f64| Ok(noise(x.shape(), t.to_bits(), "junk").scale(5.0));
        let ctx = context(9);
        let p = ProjectionConfig::native_band(4, 16);
        let guide = ProjectedFlowGuide { ctx: &ctx, alpha: AlphaSchedule::Constant(1.0), projection: p };
        let sched = TimeSchedule::uniform(30).unwrap();
        let start = FlowState::new(ctx.x0_extra.clone(), 0.0).unwrap();
        let run = sample_from(&src, &sched, start, Some(&guide)).unwrap();
        assert!(projection_error(&run.x, &ctx, &p).unwrap() < 1e-10);
    }

    #[test]
    fn two_stage_is_deterministic_and_pf_beats_none() {
        let mut spec = MixtureSpec::testbed();
        spec.canonical_resolution = 32;
        spec.native_resolution = 8;
        let native = spec.at_resolution(8).unwrap();
        let extra = spec.at_resolution(32).unwrap();
        let deg = DegradedOracle { mixture: &extra, degradation: DegradationConfig::preset() };
        let sched = TimeSchedule::uniform(20).unwrap();
        let setup = TwoStageSetup {
            native_source: &ExactOracle(&native),
            extra_source: &deg,
            native_shape: native.shape(),
            factor: 4,
            native_schedule: &sched,
            extra_schedule: &sched,
        };
        let pf = GuidanceConfig::new(GuidanceMode::ProjectedFlow);
        let a = two_stage_sample(&setup, &pf, 11).unwrap();
        let b = two_stage_sample(&setup, &pf, 11).unwrap();
        assert_eq!(a.x1_extra, b.x1_extra);
        let none = two_stage_sample(&setup, &pf.with_mode(GuidanceMode::None), 11).unwrap();
        let p = pf.projection_for(8, 32);
        assert_eq!(none.x1_native, a.x1_native);
        assert!(
            projection_error(&a.x1_extra, &a.context, &p).unwrap()
                < projection_error(&none.x1_extra, &none.context, &p).unwrap()
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

        #[test]
        fn projected_flow_algebra(seed in 0u64..10_000, alpha in -3.0f64..3.0, t in 0.0f64..0.99) {
            let ctx = context(seed);
            let p = ProjectionConfig::native_band(4, 16);
            let x = noise((1, 16, 16), seed, "x");
            let v = noise((1, 16, 16), seed, "v");
            let out = projected_flow_velocity(&v, &x, &ctx, t, alpha, &p).unwrap();

            // high band passes through untouched
            let hf_out = out.sub(&lowpass(&out, &p)).unwrap();
            let hf_v = v.sub(&lowpass(&v, &p)).unwrap();
            prop_assert!(hf_out.max_abs_diff(&hf_v).unwrap() < 1e-9);

            // projected velocity is the α-blend of P v and the straight-line pull
            let pull = ctx.x1_native_up.sub(&lowpass(&x, &p)).unwrap().scale(1.0 / (1.0 - t));
            let mut expect = lowpass(&v, &p).scale(1.0 - alpha);
            expect.add_scaled(alpha, &pull).unwrap();
            prop_assert!(lowpass(&out, &p).max_abs_diff(&expect).unwrap() < 1e-9 * (1.0 + pull.rms()));

            // ±α average to the unguided velocity
            let neg = projected_flow_velocity(&v, &x, &ctx, t, -alpha, &p).unwrap();
            let avg = out.add(&neg).unwrap().scale(0.5);
            prop_assert!(avg.max_abs_diff(&v).unwrap() < 1e-9 * (1.0 + pull.rms()));
        }
    }
}
