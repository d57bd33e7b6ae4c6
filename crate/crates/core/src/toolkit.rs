//! Inference-time adjustments for running a transformer beyond its native
//! sequence length: NTK-style rotary base scaling, a length-dependent
//! attention temperature, text-token duplication and the timestep shift.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{shift_schedule, ScalePair, TimeSchedule};

/// 2D rotary embedding settings for one attention head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RopeConfig {
    pub head_dim: usize,
    pub base: f64,
    /// Extra factor on top of the `s`-proportional base growth.
    pub base_multiplier: f64,
    pub scale: ScalePair,
}

impl RopeConfig {
    pub fn new(head_dim: usize, base: f64, base_multiplier: f64, scale: ScalePair) -> Result<Self> {
        let cfg = Self { head_dim, base, base_multiplier, scale };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        check_head_dim(self.head_dim)?;
        check_base(self.base)?;
        if !(self.base_multiplier > 0.0) || !self.base_multiplier.is_finite() {
            return Err(Error::Parameter(format!(
                "base multiplier must be positive, got {}",
                self.base_multiplier
            )));
        }
        ScalePair::new(self.scale.native_len, self.scale.extra_len)?;
        Ok(())
    }

    pub fn effective_base(&self) -> f64 {
        ntk_scaled_base(self)
    }

    /// Frequencies at the scaled base.
    pub fn frequencies(&self) -> Result<Vec<f64>> {
        rope_frequencies(self.head_dim, self.effective_base())
    }
}

fn check_head_dim(head_dim: usize) -> Result<()> {
    if head_dim == 0 || !head_dim.is_multiple_of(4) {
        return Err(Error::Parameter(format!(
            "head dimension must be a positive multiple of 4, got {head_dim}"
        )));
    }
    Ok(())
}

fn check_base(base: f64) -> Result<()> {
    if !(base > 1.0) || !base.is_finite() {
        return Err(Error::Parameter(format!("rotary base must exceed 1, got {base}")));
    }
    Ok(())
}

/// `θ_d = base^(−4d / head_dim)` for `d = 1..=head_dim/4`.
pub fn rope_frequencies(head_dim: usize, base: f64) -> Result<Vec<f64>> {
    check_head_dim(head_dim)?;
    check_base(base)?;
    let exponent = -4.0 / head_dim as f64;
    Ok((1..=head_dim / 4).map(|d| base.powf(exponent * d as f64)).collect())
}

/// `multiplier · base · s`.
pub fn ntk_scaled_base(cfg: &RopeConfig) -> f64 {
    cfg.base_multiplier * cfg.base * cfg.scale.s()
}

/// Rotate `vector` in place: pairs in the first half turn by `row·θ`, pairs in
/// the second half by `col·θ`.
pub fn rotate_in_place(position: (usize, usize), vector: &mut [f64], freqs: &[f64]) -> Result<()> {
    let half = freqs.len() * 2;
    if vector.len() != 2 * half {
        return Err(Error::Dimension(format!(
            "vector of length {} does not match {} rotary frequencies",
            vector.len(),
            freqs.len()
        )));
    }
    let (first, second) = vector.split_at_mut(half);
    for (part, pos) in [(first, position.0), (second, position.1)] {
        for (pair, &theta) in part.chunks_exact_mut(2).zip(freqs) {
            let (sin, cos) = (pos as f64 * theta).sin_cos();
            let (a, b) = (pair[0], pair[1]);
            pair[0] = a * cos - b * sin;
            pair[1] = a * sin + b * cos;
        }
    }
    Ok(())
}

/// Rotary embedding of `vector` at a 2D grid position, using the scaled base.
pub fn rope_rotate(position: (usize, usize), vector: &[f64], cfg: &RopeConfig) -> Result<Vec<f64>> {
    if vector.len() != cfg.head_dim {
        return Err(Error::Dimension(format!(
            "vector length {} differs from head dimension {}",
            vector.len(),
            cfg.head_dim
        )));
    }
    let freqs = cfg.frequencies()?;
    let mut out = vector.to_vec();
    rotate_in_place(position, &mut out, &freqs)?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionScaleMode {
    Off,
    EntropyMatching,
}

/// Logit multiplier keeping softmax entropy roughly length-invariant.
pub fn attn_scale(scale: ScalePair, mode: AttentionScaleMode) -> Result<f64> {
    if scale.native_len < 2 || scale.extra_len < 2 {
        return Err(Error::Parameter(format!(
            "attention scale needs sequence lengths of at least 2, got {} and {}",
            scale.native_len, scale.extra_len
        )));
    }
    if scale.extra_len < scale.native_len {
        return Err(Error::Parameter("extrapolated length below native length".into()));
    }
    Ok(match mode {
        AttentionScaleMode::Off => 1.0,
        AttentionScaleMode::EntropyMatching => {
            ((scale.extra_len as f64).ln() / (scale.native_len as f64).ln()).sqrt()
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenRole {
    Text,
    Image,
}

/// Placement of one text token in a (possibly duplicated) text block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextToken {
    pub role: TokenRole,
    pub copy_index: usize,
    pub index_in_copy: usize,
    pub position: (usize, usize),
}

/// Repeat the text block `s²` times; copy `k` sits at the top-left corner of
/// block `k` of an `s × s` partition of the image grid.
pub fn duplicate_text(
    text_len: usize,
    scale: ScalePair,
    image_grid: (usize, usize),
) -> Result<Vec<TextToken>> {
    let (rows, cols) = image_grid;
    if rows == 0 || cols == 0 {
        return Err(Error::Dimension("image grid must be nonempty".into()));
    }
    let s2 = scale.integer_s_squared().ok_or_else(|| {
        Error::Parameter(format!(
            "text duplication needs an integer length ratio, got {}/{}",
            scale.extra_len, scale.native_len
        ))
    })?;
    let s = scale
        .integer_s()
        .ok_or_else(|| Error::Parameter(format!("copy count {s2} does not tile a square block grid")))?;
    let mut tokens = Vec::with_capacity(text_len * s2);
    for copy in 0..s2 {
        let position = ((copy / s) * (rows / s), (copy % s) * (cols / s));
        tokens.extend((0..text_len).map(|i| TextToken {
            role: TokenRole::Text,
            copy_index: copy,
            index_in_copy: i,
            position,
        }));
    }
    Ok(tokens)
}

/// Named parameter sets for the two model families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolkitPreset {
    Lumina,
    Flux,
}

impl ToolkitPreset {
    pub fn name(self) -> &'static str {
        match self {
            ToolkitPreset::Lumina => "lumina",
            ToolkitPreset::Flux => "flux",
        }
    }

    pub fn settings(self) -> ToolkitSettings {
        let (base_multiplier, s_star_multiplier, text_duplication) = match self {
            ToolkitPreset::Lumina => (1.0, 1.0, false),
            ToolkitPreset::Flux => (2.5, 1.5, true),
        };
        ToolkitSettings {
            head_dim: 64,
            base: 10_000.0,
            base_multiplier,
            s_star_multiplier,
            attention_scale_mode: AttentionScaleMode::EntropyMatching,
            text_duplication,
            time_shift: true,
        }
    }
}

/// Toolkit knobs independent of any particular resolution pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolkitSettings {
    pub head_dim: usize,
    pub base: f64,
    pub base_multiplier: f64,
    pub s_star_multiplier: f64,
    pub attention_scale_mode: AttentionScaleMode,
    pub text_duplication: bool,
    /// Whether the extrapolated-resolution schedule is shifted by `s*`.
    pub time_shift: bool,
}

impl ToolkitSettings {
    /// Everything switched off: unscaled base, no attention scaling, no
    /// duplication, no time shift.
    pub fn disabled() -> Self {
        Self {
            head_dim: 64,
            base: 10_000.0,
            base_multiplier: 1.0,
            s_star_multiplier: 1.0,
            attention_scale_mode: AttentionScaleMode::Off,
            text_duplication: false,
            time_shift: false,
        }
    }

    pub fn resolve(&self, scale: ScalePair) -> Result<ToolkitConfig> {
        let cfg = ToolkitConfig {
            rope: RopeConfig::new(self.head_dim, self.base, self.base_multiplier, scale)?,
            s_star_multiplier: self.s_star_multiplier,
            attention_scale_mode: self.attention_scale_mode,
            text_duplication: self.text_duplication,
            time_shift: self.time_shift,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// A preset name or explicit settings, as written in experiment files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ToolkitChoice {
    Preset(ToolkitPreset),
    Custom(ToolkitSettings),
}

impl ToolkitChoice {
    pub fn settings(&self) -> ToolkitSettings {
        match self {
            ToolkitChoice::Preset(p) => p.settings(),
            ToolkitChoice::Custom(s) => *s,
        }
    }
}

impl Default for ToolkitChoice {
    fn default() -> Self {
        ToolkitChoice::Preset(ToolkitPreset::Lumina)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToolkitConfig {
    pub rope: RopeConfig,
    pub s_star_multiplier: f64,
    pub attention_scale_mode: AttentionScaleMode,
    pub text_duplication: bool,
    pub time_shift: bool,
}

impl ToolkitConfig {
    pub fn preset(preset: ToolkitPreset, scale: ScalePair) -> Result<Self> {
        preset.settings().resolve(scale)
    }

    pub fn validate(&self) -> Result<()> {
        self.rope.validate()?;
        if !(self.s_star_multiplier > 0.0) || !self.s_star_multiplier.is_finite() {
            return Err(Error::Parameter(format!(
                "s* multiplier must be positive, got {}",
                self.s_star_multiplier
            )));
        }
        Ok(())
    }

    pub fn scale(&self) -> ScalePair {
        self.rope.scale
    }

    /// `s* = multiplier · s`.
    pub fn s_star(&self) -> f64 {
        self.s_star_multiplier * self.rope.scale.s()
    }

    pub fn attention_scale(&self) -> Result<f64> {
        attn_scale(self.rope.scale, self.attention_scale_mode)
    }

    /// The schedule to use at the extrapolated resolution.
    pub fn extra_schedule(&self, schedule: &TimeSchedule) -> Result<TimeSchedule> {
        if self.time_shift {
            shift_schedule(schedule, self.s_star())
        } else {
            Ok(schedule.clone())
        }
    }
}
