//! Frequency-domain projection onto the native band, band-limited resampling
//! and average pooling.
//!
//! All spectral operators are separable: a 1D transform is applied along the
//! rows, then along the columns, independently per channel.

use std::cell::RefCell;
use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn fft_in_place(buf: &mut [Complex64], inverse: bool) {
    let plan = PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(buf.len())
        } else {
            p.plan_fft_forward(buf.len())
        }
    });
    plan.process(buf);
}

/// Signed frequency of DFT bin `k` for length `n`; the even-length Nyquist bin
/// maps to `+n/2`.
pub fn signed_frequency(k: usize, n: usize) -> i64 {
    if k <= n / 2 {
        k as i64
    } else {
        k as i64 - n as i64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterKind {
    Ideal,
    RaisedCosine,
}

/// Configuration of the low-pass projection `P`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectionConfig {
    /// Per-axis fraction of the grid's Nyquist frequency that is kept.
    pub cutoff_fraction: f64,
    pub filter_kind: FilterKind,
    /// Width of the cosine taper as a fraction of the pass band.
    #[serde(default)]
    pub transition_width: f64,
}

impl ProjectionConfig {
    pub fn ideal(cutoff_fraction: f64) -> Self {
        Self { cutoff_fraction, filter_kind: FilterKind::Ideal, transition_width: 0.0 }
    }

    /// Ideal projection onto the band of a `native`-sided grid, applied on an
    /// `extra`-sided grid.
    pub fn native_band(native_side: usize, extra_side: usize) -> Self {
        Self::ideal(native_side as f64 / extra_side as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cutoff_fraction > 0.0 && self.cutoff_fraction <= 1.0) {
            return Err(Error::Parameter(format!("cutoff fraction {} outside (0, 1]", self.cutoff_fraction)));
        }
        if !(0.0..=1.0).contains(&self.transition_width) {
            return Err(Error::Parameter(format!(
                "transition width {} outside [0, 1]",
                self.transition_width
            )));
        }
        Ok(())
    }

    fn is_identity(&self) -> bool {
        self.filter_kind == FilterKind::Ideal && self.cutoff_fraction >= 1.0
    }

    /// Gain applied to signed frequency `f` on an axis of length `n`.
    pub fn gain(&self, f: i64, n: usize) -> f64 {
        let fc = self.cutoff_fraction * n as f64 / 2.0;
        let a = f.unsigned_abs() as f64;
        match self.filter_kind {
            FilterKind::Ideal => {
                if a <= fc + 1e-9 {
                    1.0
                } else {
                    0.0
                }
            }
            FilterKind::RaisedCosine => {
                let pass = fc * (1.0 - self.transition_width);
                if a <= pass + 1e-9 {
                    1.0
                } else if a > fc + 1e-9 {
                    0.0
                } else {
                    0.5 * (1.0 + (PI * (a - pass) / (fc - pass)).cos())
                }
            }
        }
    }
}

/// Apply `op` to every row, then to every column of each channel.
fn separable(
    x: &Grid,
    out_h: usize,
    out_w: usize,
    op: impl Fn(&[f64], usize, &mut Vec<Complex64>) -> Vec<f64>,
) -> Grid {
    let (c, h, w) = x.shape();
    let mut scratch = Vec::new();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ci in 0..c {
        let chan = x.channel(ci);
        let mut rows = Vec::with_capacity(h * out_w);
        for y in 0..h {
            rows.extend(op(&chan[y * w..(y + 1) * w], out_w, &mut scratch));
        }
        let mut cols = vec![0.0; out_h * out_w];
        let mut column = vec![0.0; h];
        for xi in 0..out_w {
            for y in 0..h {
                column[y] = rows[y * out_w + xi];
            }
            for (y, v) in op(&column, out_h, &mut scratch).into_iter().enumerate() {
                cols[y * out_w + xi] = v;
            }
        }
        out.extend(cols);
    }
    Grid::from_parts((c, out_h, out_w), out)
}

fn filter_1d(signal: &[f64], cfg: &ProjectionConfig, buf: &mut Vec<Complex64>) -> Vec<f64> {
    let n = signal.len();
    buf.clear();
    buf.extend(signal.iter().map(|&v| Complex64::new(v, 0.0)));
    fft_in_place(buf, false);
    for (k, z) in buf.iter_mut().enumerate() {
        *z *= cfg.gain(signed_frequency(k, n), n);
    }
    fft_in_place(buf, true);
    let norm = 1.0 / n as f64;
    buf.iter().map(|z| z.re * norm).collect()
}

/// Fourier resampling of a real periodic signal to `m` samples.
///
/// Upsampling splits an even-length Nyquist bin evenly between `±n/2`;
/// downsampling folds the bins at `±m/2` together. Pointwise values of
/// band-limited signals are preserved.
fn resample_1d(signal: &[f64], m: usize, buf: &mut Vec<Complex64>) -> Vec<f64> {
    let n = signal.len();
    if m == n {
        return signal.to_vec();
    }
    buf.clear();
    buf.extend(signal.iter().map(|&v| Complex64::new(v, 0.0)));
    fft_in_place(buf, false);
    let mut out = vec![Complex64::new(0.0, 0.0); m];
    let common = n.min(m);
    let half = common.div_ceil(2); // bins 0..half are strictly below Nyquist
    out[..half].copy_from_slice(&buf[..half]);
    for k in 1..half {
        out[m - k] = buf[n - k];
    }
    if common.is_multiple_of(2) {
        let nyq = common / 2;
        if m > n {
            let v = buf[nyq] * 0.5;
            out[nyq] += v;
            out[m - nyq] += v;
        } else {
            out[nyq] = buf[nyq] + buf[n - nyq];
        }
    }
    fft_in_place(&mut out, true);
    let norm = 1.0 / n as f64;
    out.iter().map(|z| z.re * norm).collect()
}

/// Unnormalized inverse 2D DFT of a `height × width` spectrum, returning the
/// real part. Used to synthesise band-limited fields from their coefficients.
pub(crate) fn inverse_dft2_real(spectrum: &mut [Complex64], height: usize, width: usize) -> Vec<f64> {
    debug_assert_eq!(spectrum.len(), height * width);
    for row in spectrum.chunks_exact_mut(width) {
        fft_in_place(row, true);
    }
    let mut column = vec![Complex64::new(0.0, 0.0); height];
    for x in 0..width {
        for y in 0..height {
            column[y] = spectrum[y * width + x];
        }
        fft_in_place(&mut column, true);
        for y in 0..height {
            spectrum[y * width + x] = column[y];
        }
    }
    spectrum.iter().map(|z| z.re).collect()
}

/// Same-size low-pass projection.
pub fn lowpass(x: &Grid, cfg: &ProjectionConfig) -> Grid {
    if cfg.is_identity() {
        return x.clone();
    }
    separable(x, x.height(), x.width(), |s, _, buf| filter_1d(s, cfg, buf))
}

/// `x − lowpass(x)`.
pub fn highpass(x: &Grid, cfg: &ProjectionConfig) -> Grid {
    let low = lowpass(x, cfg);
    x.sub(&low).expect("lowpass preserves shape")
}

/// Fourier resampling to an arbitrary `height × width`.
pub fn resample_spectral(x: &Grid, height: usize, width: usize) -> Result<Grid> {
    if height == 0 || width == 0 {
        return Err(Error::Dimension("resample target must be nonempty".into()));
    }
    Ok(separable(x, height, width, resample_1d))
}

/// Band-limited upsampling by frequency-domain zero padding.
pub fn upsample_bandlimited(x: &Grid, factor: usize) -> Result<Grid> {
    if factor == 0 {
        return Err(Error::Parameter("upsampling factor must be positive".into()));
    }
    if factor == 1 {
        return Ok(x.clone());
    }
    resample_spectral(x, x.height() * factor, x.width() * factor)
}

/// Non-overlapping `factor × factor` average pooling.
pub fn downsample(x: &Grid, factor: usize) -> Result<Grid> {
    if factor == 0 {
        return Err(Error::Parameter("downsampling factor must be positive".into()));
    }
    let (c, h, w) = x.shape();
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::Dimension(format!("{h}x{w} grid is not divisible by pooling factor {factor}")));
    }
    if factor == 1 {
        return Ok(x.clone());
    }
    let (oh, ow) = (h / factor, w / factor);
    let inv = 1.0 / (factor * factor) as f64;
    Ok(Grid::from_fn((c, oh, ow), |ci, y, xi| {
        let mut s = 0.0;
        for dy in 0..factor {
            for dx in 0..factor {
                s += x.get(ci, y * factor + dy, xi * factor + dx);
            }
        }
        s * inv
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    fn noise(shape: (usize, usize, usize), seed: u64) -> Grid {
        Grid::standard_normal(shape, &mut rng::stream(seed, "proj", 0))
    }

    /// Sum of a few sinusoids strictly below `band/2` cycles per side.
    fn smooth(shape: (usize, usize, usize), band: usize, seed: u64) -> Grid {
        let mut r = rng::stream(seed, "smooth", 0);
        let terms: Vec<(f64, f64, f64, f64)> = (0..6)
            .map(|_| {
                use rand::Rng;
                let fy = r.random_range(0..band / 2) as f64;
                let fx = r.random_range(0..band / 2) as f64;
                (fy, fx, r.random_range(-1.0..1.0), r.random_range(0.0..std::f64::consts::TAU))
            })
            .collect();
        let (_, h, w) = shape;
        Grid::from_fn(shape, |c, y, x| {
            terms
                .iter()
                .map(|&(fy, fx, a, p)| {
                    a * (2.0 * PI * (fy * y as f64 / h as f64 + fx * x as f64 / w as f64) + p + c as f64)
                        .cos()
                })
                .sum()
        })
    }

    /// Direct O(n²) DFT magnitude at bin (ky, kx) of channel 0.
    fn dft_mag(x: &Grid, ky: usize, kx: usize) -> f64 {
        let (_, h, w) = x.shape();
        let mut z = Complex64::new(0.0, 0.0);
        for y in 0..h {
            for xi in 0..w {
                let ph = -2.0 * PI * (ky as f64 * y as f64 / h as f64 + kx as f64 * xi as f64 / w as f64);
                z += Complex64::from_polar(x.get(0, y, xi), ph);
            }
        }
        z.norm()
    }

    #[test]
    fn constant_survives_any_cutoff() {
        let g = Grid::filled((2, 8, 8), 3.25);
        for cut in [0.05, 0.25, 0.5, 1.0] {
            for kind in [FilterKind::Ideal, FilterKind::RaisedCosine] {
                let cfg = ProjectionConfig { cutoff_fraction: cut, filter_kind: kind, transition_width: 0.5 };
                assert!(lowpass(&g, &cfg).max_abs_diff(&g).unwrap() < 1e-12);
            }
        }
    }

    #[test]
    fn checkerboard_at_nyquist_is_removed() {
        let g = Grid::from_fn((1, 16, 16), |_, y, x| if (x + y) % 2 == 0 { 1.0 } else { -1.0 });
        // The oracle: all energy sits in DFT bin (8, 8), which is above a quarter band.
        assert!((dft_mag(&g, 8, 8) - 256.0).abs() < 1e-9);
        assert!(dft_mag(&g, 0, 0) < 1e-9);
        let out = lowpass(&g, &ProjectionConfig::ideal(0.25));
        assert!(out.max_abs_diff(&Grid::zeros(g.shape())).unwrap() < 1e-12);
    }

    #[test]
    fn full_band_ideal_is_identity() {
        let g = noise((1, 6, 10), 1);
        assert_eq!(lowpass(&g, &ProjectionConfig::ideal(1.0)), g);
    }

    #[test]
    fn removed_bins_match_direct_dft() {
        let g = noise((1, 12, 12), 9);
        let out = lowpass(&g, &ProjectionConfig::ideal(0.5));
        for ky in 0..12 {
            for kx in 0..12 {
                let keep = signed_frequency(ky, 12).abs() <= 3 && signed_frequency(kx, 12).abs() <= 3;
                let expect = if keep { dft_mag(&g, ky, kx) } else { 0.0 };
                assert!((dft_mag(&out, ky, kx) - expect).abs() < 1e-9, "bin {ky},{kx}");
            }
        }
    }

    #[test]
    fn upsample_constant_and_band() {
        let g = Grid::filled((1, 4, 4), -1.5);
        let up = upsample_bandlimited(&g, 4).unwrap();
        assert_eq!(up.shape(), (1, 16, 16));
        assert!(up.max_abs_diff(&Grid::filled((1, 16, 16), -1.5)).unwrap() < 1e-12);

        let x = noise((2, 8, 8), 3);
        let up = upsample_bandlimited(&x, 4).unwrap();
        let p = ProjectionConfig::native_band(8, 32);
        assert!(lowpass(&up, &p).max_abs_diff(&up).unwrap() < 1e-12);
        // values at the coarse sample sites are preserved
        for y in 0..8 {
            for xi in 0..8 {
                assert!((up.get(1, 4 * y, 4 * xi) - x.get(1, y, xi)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn spectral_round_trip_on_band_limited_fields() {
        for seed in 0..5 {
            let x = smooth((1, 8, 8), 8, seed);
            let up = upsample_bandlimited(&x, 4).unwrap();
            let back = resample_spectral(&up, 8, 8).unwrap();
            assert!(back.max_abs_diff(&x).unwrap() < 1e-8);
        }
        // even with content at the native Nyquist bin
        let x = noise((1, 8, 8), 11);
        let back = resample_spectral(&upsample_bandlimited(&x, 3).unwrap(), 8, 8).unwrap();
        assert!(back.max_abs_diff(&x).unwrap() < 1e-10);
    }

    #[test]
    fn pooling_after_upsampling_is_a_box_filter() {
        // Average pooling of a band-limited interpolant equals the coarse signal
        // convolved with the box response: for a pure cosine of frequency k the
        // pooled value is scaled by D(k) = (1/f)·Σ_j cos(2π k j /(f n)) and
        // phase-shifted by π k (f−1)/(f n).
        let (n, f, k) = (16usize, 4usize, 3usize);
        let x = Grid::from_fn((1, 1, n), |_, _, i| (2.0 * PI * k as f64 * i as f64 / n as f64).cos());
        let pooled = downsample(&resample_spectral(&x, f, n * f).unwrap(), f).unwrap();
        // average over the f-row block in y too (constant along y)
        let step = 2.0 * PI * k as f64 / (f * n) as f64;
        let (mut re, mut im) = (0.0, 0.0);
        for j in 0..f {
            re += (step * j as f64).cos();
            im += (step * j as f64).sin();
        }
        let (amp, phase) = ((re * re + im * im).sqrt() / f as f64, im.atan2(re));
        for i in 0..n {
            let expect = amp * (2.0 * PI * k as f64 * i as f64 / n as f64 + phase).cos();
            assert!((pooled.get(0, 0, i) - expect).abs() < 1e-12);
        }
        assert!(amp < 0.99);
    }

    #[test]
    fn downsample_cases() {
        let g = Grid::filled((1, 8, 8), 2.0);
        assert_eq!(downsample(&g, 4).unwrap(), Grid::filled((1, 2, 2), 2.0));
        let x = noise((1, 6, 6), 5);
        assert_eq!(downsample(&x, 1).unwrap(), x);
        assert!(matches!(downsample(&x, 4), Err(Error::Dimension(_))));
    }

    #[test]
    fn raised_cosine_gain_is_monotone() {
        let cfg = ProjectionConfig {
            cutoff_fraction: 0.5,
            filter_kind: FilterKind::RaisedCosine,
            transition_width: 0.5,
        };
        let gains: Vec<f64> = (0..=32).map(|f| cfg.gain(f, 64)).collect();
        assert_eq!(gains[0], 1.0);
        assert_eq!(gains[8], 1.0);
        assert!(gains.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(gains[17], 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig { cases: 32, ..ProptestConfig::default() })]

        #[test]
        fn ideal_lowpass_is_an_orthogonal_projection(seed in 0u64..10_000, a in -3.0f64..3.0, b in -3.0f64..3.0, cut in 0.1f64..1.0) {
            let cfg = ProjectionConfig::ideal(cut);
            let x = noise((2, 8, 12), seed);
            let y = noise((2, 8, 12), seed + 1);
            let px = lowpass(&x, &cfg);
            let ppx = lowpass(&px, &cfg);
            let scale = px.rms().max(1e-300);
            prop_assert!(ppx.max_abs_diff(&px).unwrap() / scale < 1e-10);
            prop_assert!(px.sum_sq() <= x.sum_sq() * (1.0 + 1e-12));

            let mut lin = x.scale(a);
            lin.add_scaled(b, &y).unwrap();
            let lhs = lowpass(&lin, &cfg);
            let mut rhs = px.scale(a);
            rhs.add_scaled(b, &lowpass(&y, &cfg)).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-10 * (1.0 + lhs.rms()));
        }
    }
}
