//! Experiment descriptions and the runs that turn them into files.

pub mod output;

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::flow::{ScalePair, TimeSchedule};
use crate::grid::Grid;
use crate::guidance::{
    extra_stage, native_stage, projection_error, GuidanceConfig, GuidanceMode, TwoStageOutput, TwoStageSetup,
};
use crate::mmdit::{
    forward_audit, rope_angle_audit, AngleRow, AttnStats, ModelConfig, TokenSequence, ToyMmdit,
};
use crate::oracle::{
    loss_ratio_curve, DegradationConfig, DegradedOracle, ExactOracle, GaussianMixture, LossRatioPoint,
    MixtureSpec,
};
use crate::projection::highpass;
use crate::rng;
use crate::toolkit::{AttentionScaleMode, ToolkitChoice, ToolkitConfig, ToolkitSettings};

use output::{format_value, prepare_dir, write_grid, CsvTable, Window};

/// Environment variable that replaces the spec's output directory.
pub const OUT_DIR_ENV: &str = "RESX_OUT_DIR";

/// Settings of the velocity-loss diagnostic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSettings {
    pub timesteps: Vec<f64>,
    pub samples: usize,
}

impl Default for LossSettings {
    fn default() -> Self {
        Self { timesteps: (1..10).map(|i| i as f64 / 10.0).collect(), samples: 4096 }
    }
}

/// Settings of the toy-transformer audits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditSettings {
    pub model: ModelConfig,
    pub native_grid: usize,
    pub extra_grid: usize,
    pub text_len: usize,
    pub seeds: Vec<u64>,
}

impl Default for AuditSettings {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            native_grid: 16,
            extra_grid: 64,
            text_len: 32,
            seeds: (0..8).collect(),
        }
    }
}

/// One reproducible experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    pub mixture: MixtureSpec,
    pub native_res: usize,
    pub extra_res: usize,
    pub steps_native: usize,
    pub steps_extra: usize,
    pub guidance: GuidanceConfig,
    /// Modes compared by the guidance comparison.
    pub modes: Vec<GuidanceMode>,
    pub toolkit: ToolkitChoice,
    pub degradation: DegradationConfig,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub loss: LossSettings,
    pub audit: AuditSettings,
    pub window: Window,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            name: "testbed".into(),
            mixture: MixtureSpec::testbed(),
            native_res: 32,
            extra_res: 128,
            steps_native: 30,
            steps_extra: 30,
            guidance: GuidanceConfig::new(GuidanceMode::ProjectedFlow),
            modes: GuidanceMode::ALL.to_vec(),
            toolkit: ToolkitChoice::default(),
            degradation: DegradationConfig::preset(),
            seeds: (0..64).collect(),
            output_dir: PathBuf::from("resx-out"),
            loss: LossSettings::default(),
            audit: AuditSettings::default(),
            window: Window::default(),
        }
    }
}

/// Names accepted by [`ExperimentSpec::preset`].
pub const PRESETS: [&str; 2] = ["testbed", "loss-curve"];

impl ExperimentSpec {
    /// `testbed` is the guidance testbed; `loss-curve` swaps in the small
    /// mixture used by the loss diagnostic.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "testbed" => Ok(Self::default()),
            "loss-curve" => {
                let mixture = MixtureSpec::loss_testbed();
                Ok(Self {
                    name: "loss-curve".into(),
                    native_res: mixture.native_resolution,
                    extra_res: 2 * mixture.native_resolution,
                    mixture,
                    seeds: vec![1],
                    ..Self::default()
                })
            }
            other => Err(Error::Parameter(format!(
                "unknown preset '{other}', expected one of {}",
                PRESETS.join(", ")
            ))),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.mixture.validate()?;
        if self.native_res == 0
            || self.extra_res < self.native_res
            || !self.extra_res.is_multiple_of(self.native_res)
        {
            return Err(Error::Parameter(format!(
                "extrapolated resolution {} is not a positive multiple of native {}",
                self.extra_res, self.native_res
            )));
        }
        if self.mixture.native_resolution > self.native_res {
            return Err(Error::Parameter(format!(
                "mixture band {} exceeds native resolution {}",
                self.mixture.native_resolution, self.native_res
            )));
        }
        if self.extra_res > self.mixture.canonical_resolution {
            return Err(Error::Parameter(format!(
                "extrapolated resolution {} exceeds canonical resolution {}",
                self.extra_res, self.mixture.canonical_resolution
            )));
        }
        if self.steps_native == 0 || self.steps_extra == 0 {
            return Err(Error::Parameter("step counts must be positive".into()));
        }
        self.guidance.validate()?;
        self.degradation.validate()?;
        self.window.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Parameter("seed list is empty".into()));
        }
        if self.seeds.iter().collect::<HashSet<_>>().len() != self.seeds.len() {
            return Err(Error::Parameter("seeds must be distinct".into()));
        }
        self.toolkit.settings().resolve(self.scale()?)?;
        Ok(())
    }

    pub fn scale(&self) -> Result<ScalePair> {
        ScalePair::square(self.native_res, self.extra_res)
    }

    pub fn toolkit_config(&self) -> Result<ToolkitConfig> {
        self.toolkit.settings().resolve(self.scale()?)
    }

    /// Hex SHA-256 of the spec's JSON with the output directory blanked, so
    /// the same experiment hashes identically wherever it is written.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        let json = serde_json::to_vec(&canonical).expect("spec serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Replace the output directory with [`OUT_DIR_ENV`] when it is set.
    pub fn apply_env_override(&mut self) {
        if let Some(dir) = std::env::var_os(OUT_DIR_ENV).filter(|d| !d.is_empty()) {
            self.output_dir = PathBuf::from(dir);
        }
    }
}

/// One measurement, as written to metric tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub experiment: String,
    /// `None` for summary rows.
    pub seed: Option<u64>,
    pub mode: String,
    pub metric: String,
    pub t: Option<f64>,
    /// `None` marks an undefined value.
    pub value: Option<f64>,
}

const METRIC_HEADER: [&str; 6] = ["experiment", "seed", "mode", "metric", "t", "value"];

fn metric_table(rows: &[MetricRow]) -> CsvTable {
    let mut table = CsvTable::new(&METRIC_HEADER);
    for r in rows {
        table.push(vec![
            r.experiment.clone(),
            r.seed.map(|s| s.to_string()).unwrap_or_default(),
            r.mode.clone(),
            r.metric.clone(),
            r.t.map(|t| t.to_string()).unwrap_or_default(),
            format_value(r.value),
        ]);
    }
    table
}

/// Files written by a run, with the rows they contain.
#[derive(Debug, Clone, PartialEq)]
pub struct Artifacts {
    pub files: Vec<PathBuf>,
    pub metrics: Vec<MetricRow>,
}

/// Everything needed to run both sampling stages of a spec.
pub struct Testbed {
    pub native: GaussianMixture,
    pub extra: GaussianMixture,
    pub native_schedule: TimeSchedule,
    pub extra_schedule: TimeSchedule,
    pub factor: usize,
}

impl Testbed {
    pub fn new(spec: &ExperimentSpec) -> Result<Self> {
        spec.validate()?;
        let toolkit = spec.toolkit_config()?;
        Ok(Self {
            native: spec.mixture.at_resolution(spec.native_res)?,
            extra: spec.mixture.at_resolution(spec.extra_res)?,
            native_schedule: TimeSchedule::uniform(spec.steps_native)?,
            extra_schedule: toolkit.extra_schedule(&TimeSchedule::uniform(spec.steps_extra)?)?,
            factor: spec.extra_res / spec.native_res,
        })
    }

    /// Degraded source for one item; its noise stream is tied to the seed.
    fn degraded(&self, deg: &DegradationConfig, seed: u64) -> DegradedOracle<'_> {
        DegradedOracle {
            mixture: &self.extra,
            degradation: DegradationConfig { seed: rng::derive_seed(deg.seed, "degradation", seed), ..*deg },
        }
    }

    fn with_setup<T>(
        &self,
        deg: &DegradationConfig,
        seed: u64,
        f: impl FnOnce(&TwoStageSetup<'_>) -> Result<T>,
    ) -> Result<T> {
        let native = ExactOracle(&self.native);
        let extra = self.degraded(deg, seed);
        let setup = TwoStageSetup {
            native_source: &native,
            extra_source: &extra,
            native_shape: self.native.shape(),
            factor: self.factor,
            native_schedule: &self.native_schedule,
            extra_schedule: &self.extra_schedule,
        };
        f(&setup)
    }

    pub fn native_sample(&self, deg: &DegradationConfig, seed: u64) -> Result<Grid> {
        self.with_setup(deg, seed, |s| native_stage(s, seed))
    }

    pub fn extra_sample(
        &self,
        deg: &DegradationConfig,
        x1_native: &Grid,
        guidance: &GuidanceConfig,
        seed: u64,
    ) -> Result<TwoStageOutput> {
        self.with_setup(deg, seed, |s| extra_stage(s, x1_native, guidance, seed))
    }
}

fn endpoint_metrics(
    spec: &ExperimentSpec,
    seed: u64,
    mode: GuidanceMode,
    out: &TwoStageOutput,
    with_steps: bool,
) -> Result<Vec<MetricRow>> {
    let proj = spec.guidance.projection_for(spec.native_res, spec.extra_res);
    let row = |metric: &str, t: Option<f64>, value: f64| MetricRow {
        experiment: spec.name.clone(),
        seed: Some(seed),
        mode: mode.name().into(),
        metric: metric.into(),
        t,
        value: Some(value),
    };
    let mut rows = vec![
        row("projection_error", None, projection_error(&out.x1_extra, &out.context, &proj)?),
        row("high_band_energy", None, highpass(&out.x1_extra, &proj).mean_sq()),
    ];
    if with_steps {
        rows.extend(out.steps.iter().map(|s| row("guidance_rms", Some(s.t), s.guidance_rms)));
    }
    Ok(rows)
}

/// Two-stage sampling for every seed with the spec's guidance. Writes the
/// native and extrapolated results as PNGs and grid dumps plus a metric table.
pub fn run_sample(spec: &ExperimentSpec) -> Result<Artifacts> {
    spec.validate()?;
    let dir = prepare_dir(&spec.output_dir)?;
    let bed = Testbed::new(spec)?;
    let per_seed = spec
        .seeds
        .par_iter()
        .map(|&seed| -> Result<(Vec<PathBuf>, Vec<MetricRow>)> {
            let x1_native = bed.native_sample(&spec.degradation, seed)?;
            let out = bed.extra_sample(&spec.degradation, &x1_native, &spec.guidance, seed)?;
            let mut files = Vec::new();
            for (stage, grid) in [("native", &out.x1_native), ("extra", &out.x1_extra)] {
                let stem = format!("{}_{stage}_seed{seed}", spec.name);
                let raw = dir.join(format!("{stem}.rxg"));
                write_grid(&raw, grid)?;
                let png = dir.join(format!("{stem}.png"));
                output::render_png(grid, &png, spec.window)?;
                files.extend([raw, png]);
            }
            Ok((files, endpoint_metrics(spec, seed, spec.guidance.mode, &out, true)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut files = Vec::new();
    let mut metrics = Vec::new();
    for (f, m) in per_seed {
        files.extend(f);
        metrics.extend(m);
    }
    let table = dir.join(format!("{}_sample_metrics.csv", spec.name));
    metric_table(&metrics).write(&table, &spec.hash())?;
    files.push(table);
    Ok(Artifacts { files, metrics })
}

/// Per-mode projection errors of a paired comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    pub modes: Vec<GuidanceMode>,
    pub seeds: Vec<u64>,
    /// `errors[m][i]`: projection error of mode `m` on seed `i`.
    pub errors: Vec<Vec<f64>>,
    pub artifacts: Artifacts,
}

impl ComparisonReport {
    pub fn median(&self, mode: GuidanceMode) -> Option<f64> {
        let i = self.modes.iter().position(|&m| m == mode)?;
        Some(median(&self.errors[i]))
    }

    /// Seeds on which `a` has strictly smaller error than `b`.
    pub fn wins(&self, a: GuidanceMode, b: GuidanceMode) -> Option<usize> {
        let ia = self.modes.iter().position(|&m| m == a)?;
        let ib = self.modes.iter().position(|&m| m == b)?;
        Some(self.errors[ia].iter().zip(&self.errors[ib]).filter(|(x, y)| x < y).count())
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Every mode on the same seeds and the same native results.
pub fn run_guidance_comparison(spec: &ExperimentSpec, modes: &[GuidanceMode]) -> Result<ComparisonReport> {
    spec.validate()?;
    if modes.is_empty() {
        return Err(Error::Parameter("no guidance modes to compare".into()));
    }
    if modes.iter().collect::<HashSet<_>>().len() != modes.len() {
        return Err(Error::Parameter("guidance modes repeat".into()));
    }
    let dir = prepare_dir(&spec.output_dir)?;
    let bed = Testbed::new(spec)?;
    let per_seed = spec
        .seeds
        .par_iter()
        .map(|&seed| -> Result<Vec<(f64, Vec<MetricRow>)>> {
            let x1_native = bed.native_sample(&spec.degradation, seed)?;
            modes
                .iter()
                .map(|&mode| {
                    let out = bed.extra_sample(
                        &spec.degradation,
                        &x1_native,
                        &spec.guidance.with_mode(mode),
                        seed,
                    )?;
                    let rows = endpoint_metrics(spec, seed, mode, &out, modes.len() == 1)?;
                    Ok((rows[0].value.unwrap_or(f64::NAN), rows))
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;

    let mut errors = vec![Vec::with_capacity(spec.seeds.len()); modes.len()];
    let mut metrics = Vec::new();
    for seed_rows in per_seed {
        for (m, (err, rows)) in seed_rows.into_iter().enumerate() {
            errors[m].push(err);
            metrics.extend(rows);
        }
    }
    for (m, mode) in modes.iter().enumerate() {
        metrics.push(MetricRow {
            experiment: spec.name.clone(),
            seed: None,
            mode: mode.name().into(),
            metric: "median_projection_error".into(),
            t: None,
            value: Some(median(&errors[m])),
        });
    }
    let table = dir.join(format!("{}_guidance_comparison.csv", spec.name));
    metric_table(&metrics).write(&table, &spec.hash())?;
    Ok(ComparisonReport {
        modes: modes.to_vec(),
        seeds: spec.seeds.clone(),
        errors,
        artifacts: Artifacts { files: vec![table], metrics },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossCurveReport {
    pub points: Vec<LossRatioPoint>,
    pub file: PathBuf,
}

/// Loss of the exact native oracle and the degraded extrapolated oracle at
/// each timestep, with their ratio. Native rows carry a ratio of 1.
pub fn run_loss_curve(spec: &ExperimentSpec, timesteps: &[f64]) -> Result<LossCurveReport> {
    spec.validate()?;
    if timesteps.is_empty() || timesteps.iter().any(|&t| !(t > 0.0 && t < 1.0)) {
        return Err(Error::Parameter("loss timesteps must be nonempty and inside (0, 1)".into()));
    }
    if spec.loss.samples == 0 {
        return Err(Error::Parameter("loss needs at least one sample".into()));
    }
    let dir = prepare_dir(&spec.output_dir)?;
    let mut times = vec![0.0];
    times.extend_from_slice(timesteps);
    times.push(1.0);
    let schedule = TimeSchedule::new(times)?;
    let points = loss_ratio_curve(
        &spec.mixture,
        spec.native_res,
        spec.extra_res,
        &schedule,
        &spec.degradation,
        spec.loss.samples,
        spec.seeds[0],
    )?;
    let mut table = CsvTable::new(&["resolution", "t", "loss", "ratio"]);
    for p in &points {
        let self_ratio = (p.native_loss > 0.0).then_some(1.0);
        table.push(vec![
            spec.native_res.to_string(),
            p.t.to_string(),
            format_value(Some(p.native_loss)),
            format_value(self_ratio),
        ]);
    }
    for p in &points {
        table.push(vec![
            spec.extra_res.to_string(),
            p.t.to_string(),
            format_value(Some(p.extra_loss)),
            format_value(p.ratio),
        ]);
    }
    let file = dir.join(format!("{}_loss_curve.csv", spec.name));
    table.write(&file, &spec.hash())?;
    Ok(LossCurveReport { points, file })
}

/// Angle table for the toolkit's rotary settings over the audit grids.
pub fn run_rope_audit(spec: &ExperimentSpec) -> Result<(Vec<AngleRow>, PathBuf)> {
    spec.validate()?;
    let dir = prepare_dir(&spec.output_dir)?;
    let a = &spec.audit;
    let toolkit = spec.toolkit.settings().resolve(ScalePair::square(a.native_grid, a.extra_grid)?)?;
    let rows = rope_angle_audit(&toolkit.rope, (a.native_grid, a.native_grid), (a.extra_grid, a.extra_grid))?;
    let mut table = CsvTable::new(&[
        "dim",
        "base",
        "effective_base",
        "max_native_angle",
        "max_extra_angle_scaled",
        "max_extra_angle_unscaled",
    ]);
    for r in &rows {
        table.push(vec![
            r.dim.to_string(),
            toolkit.rope.base.to_string(),
            toolkit.rope.effective_base().to_string(),
            r.max_native_angle.to_string(),
            r.max_extra_angle_scaled.to_string(),
            r.max_extra_angle_unscaled.to_string(),
        ]);
    }
    let file = dir.join(format!("{}_rope_audit.csv", spec.name));
    table.write(&file, &spec.hash())?;
    Ok((rows, file))
}

/// Toolkit variants compared by the entropy audit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AuditVariant {
    /// Native grid with every adjustment off.
    Native,
    /// Extrapolated grid: configured rotary scaling, no attention scale, no duplication.
    ExtraPlain,
    /// As `ExtraPlain` with entropy-matching attention scale.
    ExtraScaled,
    /// As `ExtraPlain` with text duplication.
    ExtraDuplicated,
    /// Constant features on the extrapolated grid with the full toolkit.
    Uniform,
}

impl AuditVariant {
    pub const ALL: [AuditVariant; 5] = [
        AuditVariant::Native,
        AuditVariant::ExtraPlain,
        AuditVariant::ExtraScaled,
        AuditVariant::ExtraDuplicated,
        AuditVariant::Uniform,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AuditVariant::Native => "native",
            AuditVariant::ExtraPlain => "extra_plain",
            AuditVariant::ExtraScaled => "extra_scaled",
            AuditVariant::ExtraDuplicated => "extra_duplicated",
            AuditVariant::Uniform => "uniform",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditRun {
    pub variant: AuditVariant,
    pub seed: u64,
    pub sequence_len: usize,
    pub stats: Vec<AttnStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntropyAuditReport {
    pub runs: Vec<AuditRun>,
    pub file: PathBuf,
}

impl EntropyAuditReport {
    fn of(&self, variant: AuditVariant) -> impl Iterator<Item = &AuditRun> {
        self.runs.iter().filter(move |r| r.variant == variant)
    }

    /// Median over seeds, layers and heads of `|H_variant − H_native|`,
    /// pairing each head with the same head of the same seed's native run.
    pub fn median_entropy_gap(&self, variant: AuditVariant) -> f64 {
        let mut gaps = Vec::new();
        for run in self.of(variant) {
            let Some(native) = self.of(AuditVariant::Native).find(|r| r.seed == run.seed) else {
                continue;
            };
            for (a, b) in run.stats.iter().zip(&native.stats) {
                for (x, y) in a.per_head_entropy.iter().zip(&b.per_head_entropy) {
                    gaps.push((x - y).abs());
                }
            }
        }
        median(&gaps)
    }

    /// Mean over seeds, layers and heads of the text mass per image query.
    pub fn mean_text_mass(&self, variant: AuditVariant) -> f64 {
        let values: Vec<f64> = self
            .of(variant)
            .flat_map(|r| r.stats.iter().flat_map(|s| s.text_mass_per_image_token.iter().copied()))
            .collect();
        values.iter().sum::<f64>() / values.len() as f64
    }

    pub fn mean_entropy(&self, variant: AuditVariant) -> f64 {
        let values: Vec<f64> = self
            .of(variant)
            .flat_map(|r| r.stats.iter().flat_map(|s| s.per_head_entropy.iter().copied()))
            .collect();
        values.iter().sum::<f64>() / values.len() as f64
    }
}

fn audit_variant(
    spec: &ExperimentSpec,
    model: &ToyMmdit,
    variant: AuditVariant,
    seed: u64,
) -> Result<AuditRun> {
    let a = &spec.audit;
    let md = a.model.model_dim;
    let settings = ToolkitSettings { head_dim: a.model.head_dim, ..spec.toolkit.settings() };
    let scale = ScalePair::square(a.native_grid, a.extra_grid)?;
    let extra = (a.extra_grid, a.extra_grid);
    let (seq, toolkit) = match variant {
        AuditVariant::Native => {
            let native_settings = ToolkitSettings {
                head_dim: a.model.head_dim,
                base: settings.base,
                ..ToolkitSettings::disabled()
            };
            let len = a.native_grid * a.native_grid;
            (
                TokenSequence::joint(seed, md, a.text_len, (a.native_grid, a.native_grid), None)?,
                native_settings.resolve(ScalePair::new(len, len)?)?,
            )
        }
        AuditVariant::ExtraPlain | AuditVariant::ExtraScaled | AuditVariant::ExtraDuplicated => {
            let attention_scale_mode = if variant == AuditVariant::ExtraScaled {
                AttentionScaleMode::EntropyMatching
            } else {
                AttentionScaleMode::Off
            };
            let text_duplication = variant == AuditVariant::ExtraDuplicated;
            let toolkit =
                ToolkitSettings { attention_scale_mode, text_duplication, ..settings }.resolve(scale)?;
            let dup = text_duplication.then_some(scale);
            (TokenSequence::joint(seed, md, a.text_len, extra, dup)?, toolkit)
        }
        AuditVariant::Uniform => {
            (TokenSequence::uniform(a.text_len, extra, md, 0.5)?, settings.resolve(scale)?)
        }
    };
    Ok(AuditRun { variant, seed, sequence_len: seq.len(), stats: forward_audit(model, &seq, &toolkit)? })
}

/// Attention statistics of each toolkit variant on each audit seed.
pub fn run_entropy_audit(spec: &ExperimentSpec, variants: &[AuditVariant]) -> Result<EntropyAuditReport> {
    spec.validate()?;
    let a = &spec.audit;
    a.model.validate()?;
    if a.seeds.is_empty() || a.native_grid == 0 || a.extra_grid < a.native_grid {
        return Err(Error::Parameter(
            "audit needs seeds and an extrapolated grid at least as large as native".into(),
        ));
    }
    let dir = prepare_dir(&spec.output_dir)?;
    let jobs: Vec<(u64, AuditVariant)> =
        a.seeds.iter().flat_map(|&s| variants.iter().map(move |&v| (s, v))).collect();
    let runs = jobs
        .par_iter()
        .map(|&(seed, variant)| {
            let model = ToyMmdit::from_config(seed, a.model)?;
            audit_variant(spec, &model, variant, seed)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut table = CsvTable::new(&[
        "variant",
        "seed",
        "layer",
        "head",
        "sequence_length",
        "entropy",
        "text_mass",
        "max_logit",
    ]);
    for run in &runs {
        for s in &run.stats {
            for (h, (e, m)) in s.per_head_entropy.iter().zip(&s.text_mass_per_image_token).enumerate() {
                table.push(vec![
                    run.variant.name().into(),
                    run.seed.to_string(),
                    s.layer.to_string(),
                    h.to_string(),
                    run.sequence_len.to_string(),
                    format_value(Some(*e)),
                    format_value(Some(*m)),
                    format_value(Some(s.max_logit)),
                ]);
            }
        }
    }
    let file = dir.join(format!("{}_entropy_audit.csv", spec.name));
    table.write(&file, &spec.hash())?;
    Ok(EntropyAuditReport { runs, file })
}

/// Render a grid dump to a PNG.
pub fn render(grid_file: &Path, out: &Path, window: Window) -> Result<()> {
    window.validate()?;
    let grid = output::read_grid(grid_file)?;
    output::render_png(&grid, out, window)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(dir: &Path) -> ExperimentSpec {
        let mut mixture = MixtureSpec::testbed();
        mixture.canonical_resolution = 16;
        mixture.native_resolution = 4;
        ExperimentSpec {
            name: "tiny".into(),
            mixture,
            native_res: 4,
            extra_res: 16,
            steps_native: 6,
            steps_extra: 6,
            seeds: vec![3, 1, 2],
            output_dir: dir.to_path_buf(),
            loss: LossSettings { timesteps: vec![0.25, 0.5, 0.75], samples: 8 },
            audit: AuditSettings {
                model: ModelConfig { model_dim: 16, head_dim: 8, n_heads: 2, n_layers: 1 },
                native_grid: 2,
                extra_grid: 4,
                text_len: 3,
                seeds: vec![0, 1],
            },
            ..ExperimentSpec::default()
        }
    }

    #[test]
    fn spec_json_round_trip_and_defaults() {
        let spec = ExperimentSpec::default();
        assert_eq!(ExperimentSpec::from_json(&spec.to_json()).unwrap(), spec);
        let partial = ExperimentSpec::from_json(r#"{"name": "x", "toolkit": "flux"}"#).unwrap();
        assert_eq!(partial.native_res, 32);
        assert_eq!(partial.toolkit_config().unwrap().rope.effective_base(), 100_000.0);
        assert!(ExperimentSpec::from_json(r#"{"bogus": 1}"#).is_err());
        assert!(ExperimentSpec::preset("loss-curve").unwrap().validate().is_ok());
        assert!(ExperimentSpec::preset("nope").is_err());
    }

    #[test]
    fn spec_validation() {
        let base = ExperimentSpec::default();
        let bad = [
            ExperimentSpec { extra_res: 100, ..base.clone() },
            ExperimentSpec { seeds: vec![], ..base.clone() },
            ExperimentSpec { seeds: vec![1, 1], ..base.clone() },
            ExperimentSpec { steps_extra: 0, ..base.clone() },
            ExperimentSpec { native_res: 16, extra_res: 64, ..base.clone() },
        ];
        for s in bad {
            assert!(s.validate().is_err());
        }
    }

    #[test]
    fn hash_ignores_output_dir() {
        let a = ExperimentSpec::default();
        let b = ExperimentSpec { output_dir: "elsewhere".into(), ..a.clone() };
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        let c = ExperimentSpec { seeds: vec![9], ..a.clone() };
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn sample_and_comparison_are_deterministic() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let a = run_sample(&tiny(d1.path())).unwrap();
        let b = run_sample(&tiny(d2.path())).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.files.len(), 3 * 4 + 1);
        for (x, y) in a.files.iter().zip(&b.files) {
            assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
        }
        let report = run_guidance_comparison(&tiny(d1.path()), &GuidanceMode::ALL).unwrap();
        assert_eq!(report.errors.len(), 4);
        assert!(report.errors.iter().all(|e| e.len() == 3));
        assert!(
            report.median(GuidanceMode::ProjectedFlow).unwrap() < report.median(GuidanceMode::None).unwrap()
        );
        assert!(run_guidance_comparison(&tiny(d1.path()), &[]).is_err());
    }

    #[test]
    fn loss_curve_table_layout() {
        let d = tempfile::tempdir().unwrap();
        let report = run_loss_curve(&tiny(d.path()), &[0.25, 0.5, 0.75]).unwrap();
        assert_eq!(report.points.len(), 3);
        let (header, rows) = output::read_table(&report.file).unwrap();
        assert_eq!(header, vec!["resolution", "t", "loss", "ratio"]);
        assert_eq!(rows.len(), 6);
        assert!(run_loss_curve(&tiny(d.path()), &[0.0]).is_err());
    }

    #[test]
    fn audits_run_on_small_models() {
        let d = tempfile::tempdir().unwrap();
        let spec = tiny(d.path());
        let (rows, _) = run_rope_audit(&spec).unwrap();
        assert_eq!(rows.len(), spec.toolkit.settings().head_dim / 4);
        let report = run_entropy_audit(&spec, &AuditVariant::ALL).unwrap();
        assert_eq!(report.runs.len(), 10);
        for run in report.runs.iter().filter(|r| r.variant == AuditVariant::Uniform) {
            let expected = (run.sequence_len as f64).ln();
            assert!(run.stats.iter().all(|s| s.per_head_entropy.iter().all(|h| (h - expected).abs() < 1e-6)));
        }
    }

    #[test]
    fn unwritable_output_fails_before_work() {
        let d = tempfile::tempdir().unwrap();
        let blocker = d.path().join("file");
        std::fs::write(&blocker, b"x").unwrap();
        let spec = ExperimentSpec { output_dir: blocker.join("sub"), ..tiny(d.path()) };
        assert!(matches!(run_sample(&spec), Err(Error::Io { .. })));
    }
}
