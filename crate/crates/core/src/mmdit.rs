//! A forward-only joint text/image attention stack with random weights.
//!
//! Nothing here is trained. The model exists to measure what the toolkit
//! does to attention at long sequence lengths: row entropy, how much mass
//! image queries put on text keys, and logit ranges.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::ScalePair;
use crate::rng;
use crate::toolkit::{duplicate_text, rope_frequencies, RopeConfig, TokenRole, ToolkitConfig};

const LN_EPS: f32 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub model_dim: usize,
    pub head_dim: usize,
    pub n_heads: usize,
    pub n_layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { model_dim: 256, head_dim: 64, n_heads: 4, n_layers: 2 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.head_dim == 0 || !self.head_dim.is_multiple_of(4) {
            return Err(Error::Parameter(format!(
                "head dimension must be a positive multiple of 4, got {}",
                self.head_dim
            )));
        }
        if self.n_heads == 0 || self.model_dim != self.head_dim * self.n_heads {
            return Err(Error::Parameter(format!(
                "model dimension {} is not {} heads of {}",
                self.model_dim, self.n_heads, self.head_dim
            )));
        }
        Ok(())
    }
}

/// Square `dim × dim` matrix stored row-major; `y = x · W`.
#[derive(Debug, Clone, PartialEq)]
struct Matrix {
    dim: usize,
    data: Vec<f32>,
}

impl Matrix {
    fn random(dim: usize, seed: u64, index: u64) -> Self {
        let mut r = rng::stream(seed, "mmdit-weight", index);
        let std = 1.0 / (dim as f64).sqrt();
        let data = (0..dim * dim).map(|_| (r.sample::<f64, _>(StandardNormal) * std) as f32).collect();
        Self { dim, data }
    }

    fn apply(&self, rows: &[f32]) -> Vec<f32> {
        let d = self.dim;
        let mut out = vec![0.0f32; rows.len()];
        for (x, y) in rows.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            for (&a, w) in x.iter().zip(self.data.chunks_exact(d)) {
                for (yj, &wj) in y.iter_mut().zip(w) {
                    *yj += a * wj;
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    wo: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyMmdit {
    config: ModelConfig,
    seed: u64,
    layers: Vec<Layer>,
}

/// Random weights with standard deviation `1/√model_dim`, fixed by `seed`.
pub fn build_model(
    seed: u64,
    model_dim: usize,
    head_dim: usize,
    n_heads: usize,
    n_layers: usize,
) -> Result<ToyMmdit> {
    let config = ModelConfig { model_dim, head_dim, n_heads, n_layers };
    config.validate()?;
    let layers = (0..n_layers as u64)
        .map(|l| Layer {
            wq: Matrix::random(model_dim, seed, 4 * l),
            wk: Matrix::random(model_dim, seed, 4 * l + 1),
            wv: Matrix::random(model_dim, seed, 4 * l + 2),
            wo: Matrix::random(model_dim, seed, 4 * l + 3),
        })
        .collect();
    Ok(ToyMmdit { config, seed, layers })
}

impl ToyMmdit {
    pub fn from_config(seed: u64, config: ModelConfig) -> Result<Self> {
        build_model(seed, config.model_dim, config.head_dim, config.n_heads, config.n_layers)
    }

    pub fn config(&self) -> ModelConfig {
        self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Sum of the first layer's weights; 0 for an empty stack.
    pub fn checksum(&self) -> f64 {
        self.layers.first().map_or(0.0, |l| {
            [&l.wq, &l.wk, &l.wv, &l.wo].iter().flat_map(|m| m.data.iter()).map(|&w| w as f64).sum()
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Token {
    pub role: TokenRole,
    pub position: (usize, usize),
    pub features: Vec<f32>,
}

/// Text tokens followed by an image grid, in one joint sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSequence {
    tokens: Vec<Token>,
    grid: (usize, usize),
}

impl TokenSequence {
    /// Validates that image tokens tile a complete grid exactly once.
    pub fn new(tokens: Vec<Token>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Dimension("token sequence is empty".into()));
        }
        let dim = tokens[0].features.len();
        if dim == 0 || tokens.iter().any(|t| t.features.len() != dim) {
            return Err(Error::Dimension("tokens must share a nonzero feature width".into()));
        }
        let images: Vec<_> = tokens.iter().filter(|t| t.role == TokenRole::Image).collect();
        let grid = if images.is_empty() {
            (0, 0)
        } else {
            let rows = images.iter().map(|t| t.position.0).max().unwrap_or(0) + 1;
            let cols = images.iter().map(|t| t.position.1).max().unwrap_or(0) + 1;
            let mut seen = vec![false; rows * cols];
            for t in &images {
                let idx = t.position.0 * cols + t.position.1;
                if seen[idx] {
                    return Err(Error::Dimension(format!("duplicate image position {:?}", t.position)));
                }
                seen[idx] = true;
            }
            if images.len() != rows * cols {
                return Err(Error::Dimension(format!(
                    "{} image tokens do not fill a {rows}x{cols} grid",
                    images.len()
                )));
            }
            (rows, cols)
        };
        if grid != (0, 0) {
            for t in tokens.iter().filter(|t| t.role == TokenRole::Text) {
                if t.position.0 >= grid.0 || t.position.1 >= grid.1 {
                    return Err(Error::Dimension(format!(
                        "text position {:?} lies outside the {}x{} image grid",
                        t.position, grid.0, grid.1
                    )));
                }
            }
        }
        Ok(Self { tokens, grid })
    }

    /// Seeded random features. Text features depend only on the index within
    /// the text block, so duplicated copies are identical and a native and
    /// an extrapolated sequence built from one seed share their prompt.
    pub fn joint(
        seed: u64,
        model_dim: usize,
        text_len: usize,
        grid: (usize, usize),
        duplication: Option<ScalePair>,
    ) -> Result<Self> {
        let features = |label: &str, i: usize| -> Vec<f32> {
            let mut r = rng::stream(seed, label, i as u64);
            (0..model_dim).map(|_| r.sample::<f64, _>(StandardNormal) as f32).collect()
        };
        let text = match duplication {
            Some(scale) => duplicate_text(text_len, scale, grid)?,
            None => duplicate_text(text_len, ScalePair::new(1, 1)?, grid)?,
        };
        let mut tokens: Vec<Token> = text
            .iter()
            .map(|t| Token {
                role: TokenRole::Text,
                position: t.position,
                features: features("mmdit-text", t.index_in_copy),
            })
            .collect();
        for r in 0..grid.0 {
            for c in 0..grid.1 {
                tokens.push(Token {
                    role: TokenRole::Image,
                    position: (r, c),
                    features: features("mmdit-image", r * grid.1 + c),
                });
            }
        }
        Self::new(tokens)
    }

    /// Every token carries the same feature vector.
    pub fn uniform(text_len: usize, grid: (usize, usize), model_dim: usize, value: f32) -> Result<Self> {
        let mut tokens: Vec<Token> = (0..text_len)
            .map(|_| Token { role: TokenRole::Text, position: (0, 0), features: vec![value; model_dim] })
            .collect();
        for r in 0..grid.0 {
            for c in 0..grid.1 {
                tokens.push(Token {
                    role: TokenRole::Image,
                    position: (r, c),
                    features: vec![value; model_dim],
                });
            }
        }
        Self::new(tokens)
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn text_len(&self) -> usize {
        self.tokens.iter().filter(|t| t.role == TokenRole::Text).count()
    }

    pub fn image_len(&self) -> usize {
        self.grid.0 * self.grid.1
    }
}

/// Attention statistics of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttnStats {
    pub layer: usize,
    /// Mean row entropy per head, in nats.
    pub per_head_entropy: Vec<f64>,
    /// Per head: attention mass an image query puts on text keys, averaged
    /// over image queries. Zero when the sequence has no image tokens.
    pub text_mass_per_image_token: Vec<f64>,
    pub max_logit: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub features: Vec<Vec<f32>>,
    pub stats: Vec<AttnStats>,
}

struct HeadStats {
    entropy: f64,
    text_mass: f64,
    max_logit: f64,
    output: Vec<f32>,
}

fn layer_norm(x: &[f32], d: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(d) {
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var as f32 + LN_EPS).sqrt();
        out.extend(row.iter().map(|&v| (v - mean as f32) * inv));
    }
    out
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f32 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    acc.iter().sum::<f32>() + tail
}

/// Cosine/sine tables indexed by `[position][frequency]`.
struct RotaryTable {
    cos: Vec<f32>,
    sin: Vec<f32>,
    n_freq: usize,
}

impl RotaryTable {
    fn new(freqs: &[f64], max_pos: usize) -> Self {
        let n_freq = freqs.len();
        let mut cos = Vec::with_capacity((max_pos + 1) * n_freq);
        let mut sin = Vec::with_capacity((max_pos + 1) * n_freq);
        for p in 0..=max_pos {
            for &f in freqs {
                let (s, c) = (p as f64 * f).sin_cos();
                cos.push(c as f32);
                sin.push(s as f32);
            }
        }
        Self { cos, sin, n_freq }
    }

    fn rotate(&self, v: &mut [f32], position: (usize, usize)) {
        let half = self.n_freq * 2;
        let (first, second) = v.split_at_mut(half);
        for (part, p) in [(first, position.0), (second, position.1)] {
            let base = p * self.n_freq;
            for (i, pair) in part.chunks_exact_mut(2).enumerate() {
                let (c, s) = (self.cos[base + i], self.sin[base + i]);
                let (a, b) = (pair[0], pair[1]);
                pair[0] = a * c - b * s;
                pair[1] = a * s + b * c;
            }
        }
    }
}

fn attend_head(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    hd: usize,
    logit_scale: f32,
    is_text: &[bool],
    layer: usize,
) -> Result<HeadStats> {
    let n = is_text.len();
    let mut logits = vec![0.0f32; n];
    let mut weights = vec![0.0f64; n];
    let mut output = vec![0.0f32; n * hd];
    let mut entropy_sum = 0.0;
    let mut text_mass_sum = 0.0;
    let mut image_rows = 0usize;
    let mut max_logit = f64::NEG_INFINITY;
    for i in 0..n {
        let qi = &q[i * hd..(i + 1) * hd];
        let mut m = f32::NEG_INFINITY;
        for (j, l) in logits.iter_mut().enumerate() {
            *l = logit_scale * dot(qi, &k[j * hd..(j + 1) * hd]);
            m = m.max(*l);
        }
        if !m.is_finite() {
            return Err(Error::Numeric {
                t: layer as f64,
                message: format!("non-finite attention logit in layer {layer}"),
            });
        }
        max_logit = max_logit.max(m as f64);
        let mut z = 0.0f64;
        for (w, &l) in weights.iter_mut().zip(&logits) {
            *w = ((l - m) as f64).exp();
            z += *w;
        }
        let mut row_sum = 0.0;
        let mut h = 0.0;
        let mut text_mass = 0.0;
        let out = &mut output[i * hd..(i + 1) * hd];
        for (j, (w, &l)) in weights.iter_mut().zip(&logits).enumerate() {
            let p = *w / z;
            *w = p;
            row_sum += p;
            h -= p * (l - m) as f64;
            if is_text[j] {
                text_mass += p;
            }
            let pf = p as f32;
            for (o, &vj) in out.iter_mut().zip(&v[j * hd..(j + 1) * hd]) {
                *o += pf * vj;
            }
        }
        if (row_sum - 1.0).abs() > 1e-6 {
            return Err(Error::Numeric {
                t: layer as f64,
                message: format!("attention row {i} in layer {layer} sums to {row_sum}"),
            });
        }
        // H = ln Z − Σ p (l − m)
        entropy_sum += z.ln() + h;
        if !is_text[i] {
            text_mass_sum += text_mass;
            image_rows += 1;
        }
    }
    Ok(HeadStats {
        entropy: entropy_sum / n as f64,
        text_mass: if image_rows > 0 { text_mass_sum / image_rows as f64 } else { 0.0 },
        max_logit,
        output,
    })
}

/// Run the stack, returning final features and per-layer statistics.
pub fn forward(model: &ToyMmdit, seq: &TokenSequence, toolkit: &ToolkitConfig) -> Result<ForwardOutput> {
    let cfg = model.config;
    if seq.is_empty() {
        return Err(Error::Dimension("token sequence is empty".into()));
    }
    if seq.tokens[0].features.len() != cfg.model_dim {
        return Err(Error::Dimension(format!(
            "token width {} differs from model dimension {}",
            seq.tokens[0].features.len(),
            cfg.model_dim
        )));
    }
    if toolkit.rope.head_dim != cfg.head_dim {
        return Err(Error::Parameter(format!(
            "toolkit head dimension {} differs from model head dimension {}",
            toolkit.rope.head_dim, cfg.head_dim
        )));
    }
    let d = cfg.model_dim;
    let hd = cfg.head_dim;
    let n = seq.len();
    let freqs = toolkit.rope.frequencies()?;
    let max_pos = seq.tokens.iter().map(|t| t.position.0.max(t.position.1)).max().unwrap_or(0);
    let table = RotaryTable::new(&freqs, max_pos);
    let logit_scale = (toolkit.attention_scale()? / (hd as f64).sqrt()) as f32;
    let is_text: Vec<bool> = seq.tokens.iter().map(|t| t.role == TokenRole::Text).collect();
    let positions: Vec<(usize, usize)> = seq.tokens.iter().map(|t| t.position).collect();

    let mut x: Vec<f32> = seq.tokens.iter().flat_map(|t| t.features.iter().copied()).collect();
    let mut stats = Vec::with_capacity(model.layers.len());
    for (li, layer) in model.layers.iter().enumerate() {
        let h = layer_norm(&x, d);
        let (q, k, v) = (layer.wq.apply(&h), layer.wk.apply(&h), layer.wv.apply(&h));
        let heads = (0..cfg.n_heads)
            .into_par_iter()
            .map(|head| {
                let gather = |m: &[f32], rotate: bool| -> Vec<f32> {
                    let mut out = Vec::with_capacity(n * hd);
                    for (row, &pos) in m.chunks_exact(d).zip(&positions) {
                        let start = out.len();
                        out.extend_from_slice(&row[head * hd..(head + 1) * hd]);
                        if rotate {
                            table.rotate(&mut out[start..], pos);
                        }
                    }
                    out
                };
                attend_head(
                    &gather(&q, true),
                    &gather(&k, true),
                    &gather(&v, false),
                    hd,
                    logit_scale,
                    &is_text,
                    li,
                )
            })
            .collect::<Result<Vec<HeadStats>>>()?;
        let mut concat = vec![0.0f32; n * d];
        for (head, hs) in heads.iter().enumerate() {
            for (dst, src) in concat.chunks_exact_mut(d).zip(hs.output.chunks_exact(hd)) {
                dst[head * hd..(head + 1) * hd].copy_from_slice(src);
            }
        }
        let o = layer.wo.apply(&concat);
        for (xi, oi) in x.iter_mut().zip(&o) {
            *xi += oi;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                t: li as f64,
                message: format!("non-finite features after layer {li}"),
            });
        }
        stats.push(AttnStats {
            layer: li,
            per_head_entropy: heads.iter().map(|h| h.entropy).collect(),
            text_mass_per_image_token: heads.iter().map(|h| h.text_mass).collect(),
            max_logit: heads.iter().map(|h| h.max_logit).fold(f64::NEG_INFINITY, f64::max),
        });
    }
    Ok(ForwardOutput { features: x.chunks_exact(d).map(|c| c.to_vec()).collect(), stats })
}

/// Attention statistics per layer.
pub fn forward_audit(
    model: &ToyMmdit,
    seq: &TokenSequence,
    toolkit: &ToolkitConfig,
) -> Result<Vec<AttnStats>> {
    Ok(forward(model, seq, toolkit)?.stats)
}

/// Largest rotation angle per frequency over a square grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngleRow {
    pub dim: usize,
    pub max_native_angle: f64,
    pub max_extra_angle_scaled: f64,
    pub max_extra_angle_unscaled: f64,
}

/// Per-frequency angle ranges. Positions along an axis span the grid side,
/// so the extent used is the side length itself: this makes the lowest
/// frequency's extrapolated angle under a base scaled by `s` land exactly on
/// the native one.
pub fn rope_angle_audit(
    cfg: &RopeConfig,
    native_grid: (usize, usize),
    extra_grid: (usize, usize),
) -> Result<Vec<AngleRow>> {
    if native_grid.0 != native_grid.1 || extra_grid.0 != extra_grid.1 {
        return Err(Error::Dimension(format!(
            "angle audit needs square grids, got {native_grid:?} and {extra_grid:?}"
        )));
    }
    cfg.validate()?;
    let plain = rope_frequencies(cfg.head_dim, cfg.base)?;
    let scaled = cfg.frequencies()?;
    let (n_native, n_extra) = (native_grid.0 as f64, extra_grid.0 as f64);
    Ok(plain
        .iter()
        .zip(&scaled)
        .enumerate()
        .map(|(i, (&p, &s))| AngleRow {
            dim: i + 1,
            max_native_angle: n_native * p,
            max_extra_angle_scaled: n_extra * s,
            max_extra_angle_unscaled: n_extra * p,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toolkit::{AttentionScaleMode, ToolkitPreset, ToolkitSettings};

    fn small() -> ToyMmdit {
        build_model(3, 32, 8, 4, 2).unwrap()
    }

    fn toolkit(head_dim: usize, scale: ScalePair) -> ToolkitConfig {
        ToolkitSettings { head_dim, ..ToolkitSettings::disabled() }.resolve(scale).unwrap()
    }

    #[test]
    fn model_construction() {
        assert_eq!(small(), small());
        assert_ne!(small().checksum(), build_model(4, 32, 8, 4, 2).unwrap().checksum());
        assert!(build_model(0, 30, 8, 4, 1).is_err());
        assert!(build_model(0, 24, 6, 4, 1).is_err());
    }

    #[test]
    fn empty_stack_is_identity() {
        let m = build_model(1, 32, 8, 4, 0).unwrap();
        let seq = TokenSequence::joint(2, 32, 3, (4, 4), None).unwrap();
        let out = forward(&m, &seq, &toolkit(8, ScalePair::new(16, 16).unwrap())).unwrap();
        assert!(out.stats.is_empty());
        for (f, t) in out.features.iter().zip(seq.tokens()) {
            assert_eq!(f, &t.features);
        }
    }

    #[test]
    fn uniform_features_give_uniform_rows() {
        let seq = TokenSequence::uniform(5, (6, 6), 32, 0.7).unwrap();
        let scale = ScalePair::new(9, 36).unwrap();
        let tk = ToolkitConfig::preset(ToolkitPreset::Flux, scale).map(|mut c| {
            c.rope.head_dim = 8;
            c
        });
        let stats = forward_audit(&small(), &seq, &tk.unwrap()).unwrap();
        let expected = (seq.len() as f64).ln();
        for s in &stats {
            for h in &s.per_head_entropy {
                assert!((h - expected).abs() < 1e-6, "{h} vs {expected}");
            }
            for m in &s.text_mass_per_image_token {
                assert!((m - 5.0 / 41.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn sequence_validation() {
        let feat = vec![0.0f32; 4];
        let img = |p| Token { role: TokenRole::Image, position: p, features: feat.clone() };
        assert!(TokenSequence::new(vec![img((0, 0)), img((0, 1)), img((1, 0))]).is_err());
        assert!(TokenSequence::new(vec![img((0, 0)), img((0, 0))]).is_err());
        assert!(TokenSequence::new(vec![]).is_err());
        let ok = TokenSequence::new(vec![img((0, 0)), img((0, 1)), img((1, 0)), img((1, 1))]).unwrap();
        assert_eq!(ok.grid(), (2, 2));
    }

    #[test]
    fn duplicated_copies_share_features() {
        let seq = TokenSequence::joint(9, 16, 3, (8, 8), Some(ScalePair::square(4, 8).unwrap())).unwrap();
        assert_eq!(seq.text_len(), 12);
        let text: Vec<_> = seq.tokens().iter().filter(|t| t.role == TokenRole::Text).collect();
        assert_eq!(text[0].features, text[3].features);
        assert_eq!(text[3].position, (0, 4));
    }

    #[test]
    fn forward_is_deterministic_and_scaling_sharpens() {
        let m = small();
        let seq = TokenSequence::joint(5, 32, 4, (8, 8), None).unwrap();
        let scale = ScalePair::square(2, 8).unwrap();
        let mut tk = toolkit(8, scale);
        let a = forward_audit(&m, &seq, &tk).unwrap();
        assert_eq!(a, forward_audit(&m, &seq, &tk).unwrap());
        tk.attention_scale_mode = AttentionScaleMode::EntropyMatching;
        let b = forward_audit(&m, &seq, &tk).unwrap();
        assert!(b[0].per_head_entropy.iter().zip(&a[0].per_head_entropy).all(|(x, y)| x < y));
    }

    #[test]
    fn angle_table() {
        let cfg = RopeConfig::new(64, 10_000.0, 1.0, ScalePair::square(16, 64).unwrap()).unwrap();
        let rows = rope_angle_audit(&cfg, (16, 16), (64, 64)).unwrap();
        let last = rows.last().unwrap();
        assert!((last.max_extra_angle_scaled - last.max_native_angle).abs() <= 1e-12 * last.max_native_angle);
        assert!(rows.iter().all(|r| r.max_extra_angle_scaled <= r.max_extra_angle_unscaled));

        let same = RopeConfig::new(64, 10_000.0, 1.0, ScalePair::square(16, 16).unwrap()).unwrap();
        for r in rope_angle_audit(&same, (16, 16), (16, 16)).unwrap() {
            assert_eq!(r.max_extra_angle_scaled, r.max_extra_angle_unscaled);
        }
        assert!(rope_angle_audit(&cfg, (16, 8), (64, 64)).is_err());
    }
}
