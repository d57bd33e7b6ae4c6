//! Analytic velocity fields.
//!
//! The "image distribution" is a Gaussian mixture whose component means are
//! smooth random fields band-limited below the native Nyquist frequency. For
//! the straight path `x_t = t·x1 + (1 − t)·x0` with unit Gaussian noise the
//! marginal velocity `E[x1 − x0 | x_t = x]` has a closed form at every
//! resolution. A controlled degradation stands in for a model that
//! generalises poorly beyond its native resolution.

use rand::Rng;
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{interpolate, TimeSchedule, VelocitySource};
use crate::grid::{Grid, Shape};
use crate::projection::{self, lowpass, ProjectionConfig};
use crate::rng;

/// One mixture component: its weight and the seed of its mean image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComponentSpec {
    pub weight: f64,
    pub seed: u64,
}

/// Serializable recipe for the mixture. Mean images are regenerated from
/// their seeds on demand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub components: Vec<ComponentSpec>,
    /// Per-pixel standard deviation of data around a component mean.
    pub data_spread: f64,
    /// Side length at which mean images are defined.
    pub canonical_resolution: usize,
    /// Mean images contain only frequencies strictly below this grid's Nyquist.
    pub native_resolution: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    /// RMS of each mean image.
    #[serde(default = "default_amplitude")]
    pub mean_amplitude: f64,
}

fn default_channels() -> usize {
    1
}

fn default_amplitude() -> f64 {
    1.0
}

impl MixtureSpec {
    /// The default testbed: four equally weighted smooth fields.
    pub fn testbed() -> Self {
        Self {
            components: (0..4).map(|k| ComponentSpec { weight: 0.25, seed: 1000 + k }).collect(),
            data_spread: 3.0,
            canonical_resolution: 128,
            native_resolution: 32,
            channels: 1,
            mean_amplitude: 1.5,
        }
    }

    /// Small-grid variant used by the loss diagnostic: with few pixels the
    /// component posterior stays uncertain long enough for the corrupted
    /// posterior to matter at intermediate times.
    pub fn loss_testbed() -> Self {
        Self { native_resolution: 8, ..Self::testbed() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::Parameter("mixture needs at least one component".into()));
        }
        if let Some(c) = self.components.iter().find(|c| !(c.weight > 0.0)) {
            return Err(Error::Parameter(format!("component weight {} is not positive", c.weight)));
        }
        let total: f64 = self.components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Parameter(format!("mixture weights sum to {total}, not 1")));
        }
        if !(self.data_spread >= 0.0) || !self.data_spread.is_finite() {
            return Err(Error::Parameter("data spread must be finite and >= 0".into()));
        }
        if !(self.mean_amplitude >= 0.0) || !self.mean_amplitude.is_finite() {
            return Err(Error::Parameter("mean amplitude must be finite and >= 0".into()));
        }
        if self.channels == 0 || self.native_resolution == 0 {
            return Err(Error::Parameter("channels and native resolution must be positive".into()));
        }
        if self.native_resolution > self.canonical_resolution {
            return Err(Error::Parameter(format!(
                "native resolution {} exceeds canonical resolution {}",
                self.native_resolution, self.canonical_resolution
            )));
        }
        Ok(())
    }

    /// Mean image of component `k` at the canonical resolution.
    pub fn canonical_mean(&self, k: usize) -> Grid {
        let r = self.canonical_resolution;
        let fmax = (self.native_resolution as i64 - 1) / 2;
        let f0 = (self.native_resolution as f64 / 8.0).max(1.0);
        let decay = |fy: i64, fx: i64| 1.0 / (1.0 + ((fy * fy + fx * fx) as f64) / (f0 * f0));
        let wrap = |f: i64| f.rem_euclid(r as i64) as usize;

        let mut data = Vec::with_capacity(self.channels * r * r);
        for c in 0..self.channels {
            let mut rng = rng::stream(self.components[k].seed, "mean-image", c as u64);
            let mut spectrum = vec![Complex64::new(0.0, 0.0); r * r];
            let mut mean_sq = 0.0;
            let dc: f64 = rng.sample(rand_distr::StandardNormal);
            spectrum[0] = Complex64::new(dc, 0.0);
            mean_sq += dc * dc;
            for fy in 0..=fmax {
                for fx in -fmax..=fmax {
                    if fy == 0 && fx <= 0 {
                        continue;
                    }
                    let a: f64 = rng.sample::<f64, _>(rand_distr::StandardNormal) * decay(fy, fx);
                    let b: f64 = rng.sample::<f64, _>(rand_distr::StandardNormal) * decay(fy, fx);
                    // a·cos θ + b·sin θ = c·e^{iθ} + c̄·e^{−iθ} with c = (a − ib)/2
                    let coef = Complex64::new(a, -b) * 0.5;
                    spectrum[wrap(fy) * r + wrap(fx)] += coef;
                    spectrum[wrap(-fy) * r + wrap(-fx)] += coef.conj();
                    mean_sq += 0.5 * (a * a + b * b);
                }
            }
            let gain = if mean_sq > 0.0 { self.mean_amplitude / mean_sq.sqrt() } else { 0.0 };
            for z in spectrum.iter_mut() {
                *z *= gain;
            }
            data.extend(projection::inverse_dft2_real(&mut spectrum, r, r));
        }
        Grid::from_parts((self.channels, r, r), data)
    }

    /// Resolve the mixture on a `resolution × resolution` grid.
    pub fn at_resolution(&self, resolution: usize) -> Result<GaussianMixture> {
        self.validate()?;
        if resolution == 0 || resolution > self.canonical_resolution {
            return Err(Error::Parameter(format!(
                "resolution {resolution} outside 1..={}",
                self.canonical_resolution
            )));
        }
        let means = (0..self.components.len())
            .map(|k| projection::resample_spectral(&self.canonical_mean(k), resolution, resolution))
            .collect::<Result<Vec<_>>>()?;
        GaussianMixture::new(self.components.iter().map(|c| c.weight).collect(), means, self.data_spread)
            .map(|m| m.with_native_resolution(self.native_resolution))
    }
}

/// A mixture resolved on a concrete grid: `π_1 = Σ_k w_k N(μ_k, σ²I)`.
#[derive(Debug, Clone)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<Grid>,
    spread: f64,
    native_resolution: Option<usize>,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<Grid>, spread: f64) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() {
            return Err(Error::Dimension(format!(
                "{} weights for {} mean images",
                weights.len(),
                means.len()
            )));
        }
        for m in &means[1..] {
            means[0].ensure_same_shape(m, "mixture means")?;
        }
        if weights.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::Parameter("mixture weights must be positive".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Parameter(format!("mixture weights sum to {total}, not 1")));
        }
        if !(spread >= 0.0) {
            return Err(Error::Parameter("data spread must be >= 0".into()));
        }
        Ok(Self { weights, means, spread, native_resolution: None })
    }

    fn with_native_resolution(mut self, native: usize) -> Self {
        self.native_resolution = Some(native);
        self
    }

    pub fn shape(&self) -> Shape {
        self.means[0].shape()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Grid] {
        &self.means
    }

    pub fn spread(&self) -> f64 {
        self.spread
    }

    /// Projection onto the native band on this grid (identity when unknown).
    pub fn native_band(&self) -> ProjectionConfig {
        let side = self.shape().2;
        let native = self.native_resolution.unwrap_or(side).min(side);
        ProjectionConfig::native_band(native, side)
    }

    /// `Σ_k w_k μ_k`.
    pub fn weighted_mean(&self) -> Grid {
        self.blend_means(&self.weights)
    }

    fn blend_means(&self, w: &[f64]) -> Grid {
        let mut out = Grid::zeros(self.shape());
        for (wk, m) in w.iter().zip(&self.means) {
            out.add_scaled(*wk, m).expect("means share a shape");
        }
        out
    }

    /// Marginal variance `t²σ² + (1 − t)²` of `x_t` given a component.
    pub fn marginal_variance(&self, t: f64) -> f64 {
        t * t * self.spread * self.spread + (1.0 - t) * (1.0 - t)
    }

    /// Posterior component weights given `x_t = x`, tempered by `temperature`
    /// (1 is the exact posterior). Computed in log space.
    pub fn posterior(&self, x: &Grid, t: f64, temperature: f64) -> Result<Vec<f64>> {
        check_time(t)?;
        if !(temperature > 0.0) {
            return Err(Error::Parameter(format!(
                "posterior temperature must be positive, got {temperature}"
            )));
        }
        x.ensure_same_shape(&self.means[0], "posterior")?;
        let var = self.marginal_variance(t);
        let logits: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.means)
            .map(|(w, m)| {
                let d2: f64 = x
                    .data()
                    .iter()
                    .zip(m.data())
                    .map(|(xv, mv)| {
                        let d = xv - t * mv;
                        d * d
                    })
                    .sum();
                (w.ln() - d2 / (2.0 * var)) / temperature
            })
            .collect();
        Ok(softmax(&logits))
    }

    /// `E[x1 | x_t = x]` under the given component weights.
    fn conditional_mean_with(&self, x: &Grid, t: f64, post: &[f64]) -> Grid {
        let var = self.marginal_variance(t);
        let gain_x = t * self.spread * self.spread / var;
        let gain_mu = (1.0 - t) * (1.0 - t) / var;
        let mut out = x.scale(gain_x);
        out.add_scaled(gain_mu, &self.blend_means(post)).expect("shapes checked");
        out
    }

    /// `E[x1 | x_t = x]`.
    pub fn conditional_mean(&self, x: &Grid, t: f64) -> Result<Grid> {
        let post = self.posterior(x, t, 1.0)?;
        Ok(self.conditional_mean_with(x, t, &post))
    }

    /// Marginal velocity `(E[x1 | x_t = x] − x) / (1 − t)`.
    pub fn velocity(&self, x: &Grid, t: f64) -> Result<Grid> {
        let mean = self.conditional_mean(x, t)?;
        Ok(to_velocity(&mean, x, t))
    }

    /// Draw `(x0, x1)`: unit noise and a mixture sample.
    pub fn sample_pair(&self, seed: u64) -> (Grid, Grid) {
        let mut rng = rng::stream(seed, "pair", 0);
        let shape = self.shape();
        let x0 = Grid::standard_normal(shape, &mut rng);
        let u: f64 = rng.random();
        let mut k = self.weights.len() - 1;
        let mut acc = 0.0;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        let mut x1 = Grid::standard_normal(shape, &mut rng).scale(self.spread);
        x1.add_scaled(1.0, &self.means[k]).expect("same shape");
        (x0, x1)
    }
}

fn check_time(t: f64) -> Result<()> {
    if t >= 1.0 {
        return Err(Error::Parameter("velocity is undefined at t = 1".into()));
    }
    if !(t >= 0.0) {
        return Err(Error::Parameter(format!("time {t} outside [0, 1)")));
    }
    Ok(())
}

fn to_velocity(target: &Grid, x: &Grid, t: f64) -> Grid {
    let inv = 1.0 / (1.0 - t);
    target.zip_map(x, |m, xv| (m - xv) * inv).expect("same shape")
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Draw `(x0, x1)` from `spec` at `resolution`.
pub fn sample_pair(spec: &MixtureSpec, resolution: usize, seed: u64) -> Result<(Grid, Grid)> {
    Ok(spec.at_resolution(resolution)?.sample_pair(seed))
}

/// Exact marginal velocity of `spec` at `x`'s resolution.
pub fn mixture_velocity(x: &Grid, t: f64, spec: &MixtureSpec) -> Result<Grid> {
    check_time(t)?;
    spec.at_resolution(x.width())?.velocity(x, t)
}

/// How a stand-in model departs from the exact velocity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegradationConfig {
    /// Blend strength γ in `[0, 1]`; 0 reproduces the exact oracle.
    pub gap: f64,
    /// Scale of seeded noise added to the high band.
    pub hf_noise_scale: f64,
    /// Temperature of the corrupted posterior.
    pub posterior_temperature: f64,
    pub seed: u64,
}

impl DegradationConfig {
    pub fn exact() -> Self {
        Self { gap: 0.0, hf_noise_scale: 0.0, posterior_temperature: 1.0, seed: 0 }
    }

    /// Default strong degradation used by the guidance testbed.
    pub fn preset() -> Self {
        Self { gap: 1.0, hf_noise_scale: 0.1, posterior_temperature: 1000.0, seed: 0 }
    }

    pub fn with_gap(mut self, gap: f64) -> Self {
        self.gap = gap;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gap) {
            return Err(Error::Parameter(format!("gap {} outside [0, 1]", self.gap)));
        }
        if !(self.hf_noise_scale >= 0.0) {
            return Err(Error::Parameter("hf noise scale must be >= 0".into()));
        }
        if !(self.posterior_temperature > 0.0) {
            return Err(Error::Parameter("posterior temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Velocity of the degraded model: the native band blends the exact velocity
/// with one built from a tempered posterior; the high band gets seeded noise.
pub fn degraded_velocity(
    x: &Grid,
    t: f64,
    mixture: &GaussianMixture,
    deg: &DegradationConfig,
) -> Result<Grid> {
    deg.validate()?;
    let exact_post = mixture.posterior(x, t, 1.0)?;
    let exact = to_velocity(&mixture.conditional_mean_with(x, t, &exact_post), x, t);
    if deg.gap == 0.0 {
        return Ok(exact);
    }
    let band = mixture.native_band();
    let mut out = exact;
    if deg.posterior_temperature != 1.0 {
        let post = mixture.posterior(x, t, deg.posterior_temperature)?;
        let diff: Vec<f64> = post.iter().zip(&exact_post).map(|(a, b)| a - b).collect();
        // corrupted − exact = (1 − t)/v_t · Σ (w̃_k − w_k) μ_k
        let scale = (1.0 - t) / mixture.marginal_variance(t);
        let delta = mixture.blend_means(&diff).scale(scale);
        out.add_scaled(deg.gap, &lowpass(&delta, &band))?;
    }
    if deg.hf_noise_scale > 0.0 {
        let mut r = rng::stream(deg.seed, "hf-noise", t.to_bits());
        let xi = Grid::standard_normal(x.shape(), &mut r);
        let high = projection::highpass(&xi, &band);
        out.add_scaled(deg.hf_noise_scale * deg.gap, &high)?;
    }
    Ok(out)
}

/// The exact marginal velocity as a [`VelocitySource`].
#[derive(Debug, Clone, Copy)]
pub struct ExactOracle<'a>(pub &'a GaussianMixture);

impl VelocitySource for ExactOracle<'_> {
    fn velocity(&self, x: &Grid, t: f64) -> Result<Grid> {
        self.0.velocity(x, t)
    }
}

/// The degraded velocity as a [`VelocitySource`].
#[derive(Debug, Clone, Copy)]
pub struct DegradedOracle<'a> {
    pub mixture: &'a GaussianMixture,
    pub degradation: DegradationConfig,
}

impl VelocitySource for DegradedOracle<'_> {
    fn velocity(&self, x: &Grid, t: f64) -> Result<Grid> {
        degraded_velocity(x, t, self.mixture, &self.degradation)
    }
}

/// Mean per-value squared error of `source` against the per-sample target
/// `x1 − x0`, over `n_samples` seeded pairs noised to time `t`.
pub fn velocity_loss(
    source: &dyn VelocitySource,
    mixture: &GaussianMixture,
    t: f64,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    check_time(t)?;
    if n_samples == 0 {
        return Err(Error::Parameter("velocity loss needs at least one sample".into()));
    }
    let per_sample = (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let (x0, x1) = mixture.sample_pair(rng::derive_seed(seed, "loss-pair", i as u64));
            let xt = interpolate(&x0, &x1, t)?;
            let v = source.velocity(&xt, t)?;
            let target = x1.sub(&x0)?;
            Ok(v.sub(&target)?.mean_sq())
        })
        .collect::<Result<Vec<f64>>>()?;
    // summed in index order so the result does not depend on thread count
    Ok(per_sample.iter().sum::<f64>() / n_samples as f64)
}

/// `extra / native`, or `None` when the native loss vanishes.
pub fn loss_ratio(loss_extra: f64, loss_native: f64) -> Option<f64> {
    (loss_native > 0.0).then(|| loss_extra / loss_native)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRatioPoint {
    pub t: f64,
    pub native_loss: f64,
    pub extra_loss: f64,
    pub ratio: Option<f64>,
}

/// Ratio of degraded extrapolated-resolution loss to exact native loss at
/// every interior schedule time.
pub fn loss_ratio_curve(
    spec: &MixtureSpec,
    native_res: usize,
    extra_res: usize,
    schedule: &TimeSchedule,
    deg: &DegradationConfig,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<LossRatioPoint>> {
    if extra_res <= native_res {
        return Err(Error::Parameter(format!(
            "extrapolated resolution {extra_res} must exceed native {native_res}"
        )));
    }
    let native = spec.at_resolution(native_res)?;
    let extra = spec.at_resolution(extra_res)?;
    let degraded = DegradedOracle { mixture: &extra, degradation: *deg };
    schedule
        .interior()
        .iter()
        .map(|&t| {
            let native_loss = velocity_loss(&ExactOracle(&native), &native, t, n_samples, seed)?;
            let extra_loss = velocity_loss(&degraded, &extra, t, n_samples, seed)?;
            Ok(LossRatioPoint { t, native_loss, extra_loss, ratio: loss_ratio(extra_loss, native_loss) })
        })
        .collect()
}
