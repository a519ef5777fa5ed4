//! Region scores: pluggable scorers plus the normalization that turns raw
//! scores into a per-sample probability distribution over the score grid.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{DartError, Result};
use crate::image::{FrameStack, Image};

/// Variance smoothing inside the per-cell std feature, so the feature stays
/// differentiable on constant cells.
const STD_SMOOTH: f64 = 1e-12;

/// Standardization divides by at least this, so constant maps are well
/// defined (and normalize to the uniform distribution).
const STD_FLOOR: f64 = 1e-6;

/// Unbounded per-cell scores on an H' x W' grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RawScoreMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl RawScoreMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(DartError::invalid("score grid", format!("{height}x{width}")));
        }
        if values.len() != height * width {
            return Err(DartError::DimMismatch {
                what: "score values",
                expected: (height * width).to_string(),
                actual: values.len().to_string(),
            });
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(DartError::NonFinite {
                row: pos / width,
                col: pos % width,
                value: values[pos],
            });
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        (best / self.width, best % self.width)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        parse_score_csv(&text)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_score_csv(path, self.height, self.width, &self.values)
    }

    pub fn read_binary(path: &Path) -> Result<Self> {
        let (h, w, values) = read_score_binary(path)?;
        RawScoreMap::new(h, w, values)
    }

    pub fn write_binary(&self, path: &Path) -> Result<()> {
        write_score_binary(path, self.height, self.width, &self.values)
    }
}

/// Strictly positive per-cell distribution that sums to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl ScoreMap {
    /// Wrap pre-normalized values; rejects maps that are not a strictly
    /// positive distribution.
    pub fn from_values(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width || height == 0 || width == 0 {
            return Err(DartError::DimMismatch {
                what: "score values",
                expected: format!("{height}x{width}"),
                actual: values.len().to_string(),
            });
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(DartError::invalid("score map", format!("sum {sum} != 1")));
        }
        if values.iter().any(|&v| !(v > 0.0)) {
            return Err(DartError::invalid("score map", "non-positive entry"));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn uniform(height: usize, width: usize) -> Self {
        let v = 1.0 / (height * width) as f64;
        Self {
            height,
            width,
            values: vec![v; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_score_csv(path, self.height, self.width, &self.values)
    }

    pub fn write_binary(&self, path: &Path) -> Result<()> {
        write_score_binary(path, self.height, self.width, &self.values)
    }
}

/// Floor added to every sigmoid output before the final normalization; keeps
/// all quantiles unique by guaranteeing strictly positive mass everywhere.
pub fn score_floor(height: usize, width: usize) -> f64 {
    1e-6 / (height * width) as f64
}

/// Standardize per sample, squash through a sigmoid, floor, and normalize to
/// a probability distribution.
pub fn normalize_scores(raw: &RawScoreMap) -> Result<ScoreMap> {
    normalize_scores_tape(raw).map(|(s, _)| s)
}

/// As [`normalize_scores`], also returning the reverse-pass record.
pub fn normalize_scores_tape(raw: &RawScoreMap) -> Result<(ScoreMap, NormalizeTape)> {
    let n = raw.values.len() as f64;
    let mean = raw.values.iter().sum::<f64>() / n;
    let var = raw
        .values
        .iter()
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / n;
    let std = var.sqrt();
    let floored = std < STD_FLOOR;
    let sigma = if floored { STD_FLOOR } else { std };

    let z: Vec<f64> = raw.values.iter().map(|v| (v - mean) / sigma).collect();
    let g: Vec<f64> = z.iter().map(|&z| 1.0 / (1.0 + (-z).exp())).collect();
    let eps = score_floor(raw.height, raw.width);
    let sum_u: f64 = g.iter().map(|&g| g + eps).sum();
    let values: Vec<f64> = g.iter().map(|&g| (g + eps) / sum_u).collect();

    let map = ScoreMap {
        height: raw.height,
        width: raw.width,
        values,
    };
    let tape = NormalizeTape {
        z,
        g,
        sigma,
        floored,
        sum_u,
        eps,
    };
    Ok((map, tape))
}

/// Reverse-pass record for [`normalize_scores_tape`].
#[derive(Debug, Clone)]
pub struct NormalizeTape {
    z: Vec<f64>,
    g: Vec<f64>,
    sigma: f64,
    floored: bool,
    sum_u: f64,
    eps: f64,
}

impl NormalizeTape {
    /// Pull gradients on the normalized map back to the raw map.
    pub fn vjp(&self, upstream: &[f64]) -> Vec<f64> {
        let n = self.z.len();
        debug_assert_eq!(upstream.len(), n);
        let t = self.sum_u;
        let s: f64 = upstream
            .iter()
            .zip(&self.g)
            .map(|(u, &g)| u * (g + self.eps))
            .sum::<f64>()
            / t;
        // through out = u / sum(u), then the sigmoid
        let dz: Vec<f64> = (0..n)
            .map(|i| {
                let du = (upstream[i] - s) / t;
                du * self.g[i] * (1.0 - self.g[i])
            })
            .collect();
        let mut dd: Vec<f64> = dz.iter().map(|d| d / self.sigma).collect();
        if !self.floored {
            // sigma depends on the deviations
            let dsigma: f64 = -dz
                .iter()
                .zip(&self.z)
                .map(|(d, &z)| d * z / self.sigma)
                .sum::<f64>();
            for (d, &z) in dd.iter_mut().zip(&self.z) {
                *d += dsigma * z / n as f64;
            }
        }
        let mean_dd: f64 = dd.iter().sum::<f64>() / n as f64;
        dd.iter_mut().for_each(|d| *d -= mean_dd);
        dd
    }
}

/// Two-layer perceptron applied independently to each cell's pooled feature
/// vector (per-channel mean and standard deviation).
#[derive(Debug, Clone, PartialEq)]
pub struct CellMlpWeights {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl CellMlpWeights {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        Self {
            w1: vec![0.0; hidden_dim * input_dim],
            b1: vec![0.0; hidden_dim],
            w2: vec![0.0; hidden_dim],
            b2: 0.0,
            input_dim,
            hidden_dim,
        }
    }

    pub fn seeded(input_dim: usize, hidden_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s1 = (1.0 / input_dim as f64).sqrt();
        let s2 = (1.0 / hidden_dim as f64).sqrt();
        Self {
            w1: (0..hidden_dim * input_dim)
                .map(|_| rng.gen_range(-s1..s1))
                .collect(),
            b1: vec![0.0; hidden_dim],
            w2: (0..hidden_dim).map(|_| rng.gen_range(-s2..s2)).collect(),
            b2: 0.0,
            input_dim,
            hidden_dim,
        }
    }

    fn validate(&self, input_dim: usize) -> Result<()> {
        if self.input_dim != input_dim
            || self.w1.len() != self.hidden_dim * self.input_dim
            || self.b1.len() != self.hidden_dim
            || self.w2.len() != self.hidden_dim
        {
            return Err(DartError::DimMismatch {
                what: "cell mlp weights",
                expected: format!("input_dim {input_dim}, hidden {}", self.hidden_dim),
                actual: format!(
                    "input_dim {}, w1 {}, b1 {}, w2 {}",
                    self.input_dim,
                    self.w1.len(),
                    self.b1.len(),
                    self.w2.len()
                ),
            });
        }
        Ok(())
    }

    fn forward(&self, features: &[f64]) -> (f64, Vec<f64>) {
        let mut hidden = Vec::with_capacity(self.hidden_dim);
        for j in 0..self.hidden_dim {
            let mut acc = self.b1[j];
            let row = &self.w1[j * self.input_dim..(j + 1) * self.input_dim];
            for (w, f) in row.iter().zip(features) {
                acc += w * f;
            }
            hidden.push(acc.tanh());
        }
        let out = self.b2
            + self
                .w2
                .iter()
                .zip(&hidden)
                .map(|(w, h)| w * h)
                .sum::<f64>();
        (out, hidden)
    }
}

/// Gradients matching [`CellMlpWeights`] layout.
#[derive(Debug, Clone)]
pub struct CellMlpGrads {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

impl CellMlpGrads {
    pub fn zeros(weights: &CellMlpWeights) -> Self {
        Self {
            w1: vec![0.0; weights.w1.len()],
            b1: vec![0.0; weights.b1.len()],
            w2: vec![0.0; weights.w2.len()],
            b2: 0.0,
        }
    }
}

/// Region scorer choices.
#[derive(Debug, Clone)]
pub enum Scorer {
    /// Caller-supplied raw scores (e.g. loaded from a file).
    External(RawScoreMap),
    /// Mean gradient-magnitude per cell; non-learned baseline.
    PixelEnergy,
    /// Learnable per-cell MLP over pooled pixel statistics.
    CellMlp(CellMlpWeights),
    /// Learnable MLP over per-frame statistics concatenated with absolute
    /// consecutive-frame feature differences; frame stacks only.
    TemporalDiff(CellMlpWeights),
}

impl Scorer {
    /// Raw scores for a single image on the given grid.
    pub fn raw_scores(&self, image: &Image, grid: (usize, usize)) -> Result<RawScoreMap> {
        match self {
            Scorer::External(raw) => {
                if (raw.height, raw.width) != grid {
                    return Err(DartError::DimMismatch {
                        what: "external score grid",
                        expected: format!("{}x{}", grid.0, grid.1),
                        actual: format!("{}x{}", raw.height, raw.width),
                    });
                }
                Ok(raw.clone())
            }
            Scorer::PixelEnergy => score_pixel_energy(image, grid),
            Scorer::CellMlp(w) => score_learnable(image, grid, w).map(|(raw, _)| raw),
            Scorer::TemporalDiff(_) => Err(DartError::invalid(
                "scorer",
                "temporal-diff scorer requires a frame stack",
            )),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Scorer::External(_) => "external-file",
            Scorer::PixelEnergy => "pixel-energy",
            Scorer::CellMlp(_) => "learnable-cell-mlp",
            Scorer::TemporalDiff(_) => "temporal-diff",
        }
    }
}

fn cell_shape(image: &Image, grid: (usize, usize)) -> Result<(usize, usize)> {
    let (gh, gw) = grid;
    if gh == 0 || gw == 0 {
        return Err(DartError::invalid("score grid", "zero dimension"));
    }
    if image.height() < gh || image.width() < gw {
        return Err(DartError::invalid(
            "score grid",
            format!(
                "image {}x{} smaller than grid {gh}x{gw}",
                image.height(),
                image.width()
            ),
        ));
    }
    if image.height() % gh != 0 || image.width() % gw != 0 {
        return Err(DartError::invalid(
            "score grid",
            format!(
                "image {}x{} not divisible by grid {gh}x{gw}",
                image.height(),
                image.width()
            ),
        ));
    }
    Ok((image.height() / gh, image.width() / gw))
}

/// Mean gradient magnitude of the luminance (central differences, clamped at
/// the borders), pooled per grid cell.
pub fn score_pixel_energy(image: &Image, grid: (usize, usize)) -> Result<RawScoreMap> {
    let (ch_h, ch_w) = cell_shape(image, grid)?;
    let (h, w) = (image.height(), image.width());
    let lum: Vec<f64> = (0..h * w)
        .map(|i| image.luminance(i / w, i % w))
        .collect();
    let mut values = vec![0.0; grid.0 * grid.1];
    for y in 0..h {
        for x in 0..w {
            let xl = x.saturating_sub(1);
            let xr = (x + 1).min(w - 1);
            let yu = y.saturating_sub(1);
            let yd = (y + 1).min(h - 1);
            let gx = (lum[y * w + xr] - lum[y * w + xl]) / 2.0;
            let gy = (lum[yd * w + x] - lum[yu * w + x]) / 2.0;
            let g = (gx * gx + gy * gy).sqrt();
            values[(y / ch_h) * grid.1 + x / ch_w] += g;
        }
    }
    let cell_px = (ch_h * ch_w) as f64;
    values.iter_mut().for_each(|v| *v /= cell_px);
    RawScoreMap::new(grid.0, grid.1, values)
}

/// Per-cell pooled features: channel means then smoothed channel standard
/// deviations, `2 * channels` per cell.
pub fn cell_features(image: &Image, grid: (usize, usize)) -> Result<CellFeatures> {
    let (ch_h, ch_w) = cell_shape(image, grid)?;
    let ch = image.channels();
    let dim = 2 * ch;
    let cells = grid.0 * grid.1;
    let mut features = vec![0.0; cells * dim];
    for gy in 0..grid.0 {
        for gx in 0..grid.1 {
            let cell = gy * grid.1 + gx;
            let f = &mut features[cell * dim..(cell + 1) * dim];
            let n_px = (ch_h * ch_w) as f64;
            for c in 0..ch {
                let mut sum = 0.0;
                let mut sq = 0.0;
                for y in gy * ch_h..(gy + 1) * ch_h {
                    for x in gx * ch_w..(gx + 1) * ch_w {
                        let v = image.get(y, x, c);
                        sum += v;
                        sq += v * v;
                    }
                }
                let mean = sum / n_px;
                let var = (sq / n_px - mean * mean).max(0.0);
                f[c] = mean;
                f[ch + c] = (var + STD_SMOOTH).sqrt();
            }
        }
    }
    Ok(CellFeatures {
        grid,
        cell_px: (ch_h, ch_w),
        channels: ch,
        dim,
        features,
    })
}

/// Pooled statistics of every cell, reused across scorer evaluations of the
/// same image.
#[derive(Debug, Clone)]
pub struct CellFeatures {
    grid: (usize, usize),
    cell_px: (usize, usize),
    channels: usize,
    dim: usize,
    features: Vec<f64>,
}

impl CellFeatures {
    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cell(&self, idx: usize) -> &[f64] {
        &self.features[idx * self.dim..(idx + 1) * self.dim]
    }
}

/// Learnable scorer forward pass; the tape carries everything the reverse
/// pass needs.
pub fn score_learnable(
    image: &Image,
    grid: (usize, usize),
    weights: &CellMlpWeights,
) -> Result<(RawScoreMap, CellMlpTape)> {
    let features = cell_features(image, grid)?;
    score_mlp_over_features(&features, weights)
}

/// MLP forward over precomputed features (shared by the learnable and the
/// temporal scorers, and by training loops that cache features).
pub fn score_mlp_over_features(
    features: &CellFeatures,
    weights: &CellMlpWeights,
) -> Result<(RawScoreMap, CellMlpTape)> {
    weights.validate(features.dim)?;
    let cells = features.grid.0 * features.grid.1;
    let mut values = Vec::with_capacity(cells);
    let mut hidden = Vec::with_capacity(cells * weights.hidden_dim);
    for cell in 0..cells {
        let (out, h) = weights.forward(features.cell(cell));
        values.push(out);
        hidden.extend_from_slice(&h);
    }
    let raw = RawScoreMap::new(features.grid.0, features.grid.1, values)?;
    let tape = CellMlpTape {
        features: features.clone(),
        hidden,
        hidden_dim: weights.hidden_dim,
    };
    Ok((raw, tape))
}

/// Reverse-pass record for the cell MLP scorer.
#[derive(Debug, Clone)]
pub struct CellMlpTape {
    features: CellFeatures,
    hidden: Vec<f64>,
    hidden_dim: usize,
}

impl CellMlpTape {
    /// Weight gradients for an upstream gradient on the raw score cells.
    pub fn vjp_weights(&self, weights: &CellMlpWeights, upstream: &[f64]) -> CellMlpGrads {
        let mut grads = CellMlpGrads::zeros(weights);
        let dim = self.features.dim;
        for (cell, &up) in upstream.iter().enumerate() {
            if up == 0.0 {
                continue;
            }
            let f = self.features.cell(cell);
            let h = &self.hidden[cell * self.hidden_dim..(cell + 1) * self.hidden_dim];
            grads.b2 += up;
            for j in 0..self.hidden_dim {
                grads.w2[j] += up * h[j];
                let dpre = up * weights.w2[j] * (1.0 - h[j] * h[j]);
                grads.b1[j] += dpre;
                let row = &mut grads.w1[j * dim..(j + 1) * dim];
                for (g, &fv) in row.iter_mut().zip(f) {
                    *g += dpre * fv;
                }
            }
        }
        grads
    }

    /// Pixel gradients for an upstream gradient on the raw score cells.
    pub fn vjp_pixels(
        &self,
        weights: &CellMlpWeights,
        upstream: &[f64],
        image: &Image,
    ) -> Image {
        let dim = self.features.dim;
        let ch = self.features.channels;
        let (ch_h, ch_w) = self.features.cell_px;
        let n_px = (ch_h * ch_w) as f64;
        let (_, gw) = self.features.grid;
        let mut grad = Image::zeros(image.height(), image.width(), ch);
        for (cell, &up) in upstream.iter().enumerate() {
            if up == 0.0 {
                continue;
            }
            let f = self.features.cell(cell);
            let h = &self.hidden[cell * self.hidden_dim..(cell + 1) * self.hidden_dim];
            // d raw / d features for this cell
            let mut dfeat = vec![0.0; dim];
            for j in 0..self.hidden_dim {
                let dpre = up * weights.w2[j] * (1.0 - h[j] * h[j]);
                for (df, &w) in dfeat.iter_mut().zip(&weights.w1[j * dim..(j + 1) * dim]) {
                    *df += dpre * w;
                }
            }
            let gy = cell / gw;
            let gx = cell % gw;
            for c in 0..ch {
                let dmean = dfeat[c];
                let dstd = dfeat[ch + c];
                let mean = f[c];
                let std = f[ch + c];
                for y in gy * ch_h..(gy + 1) * ch_h {
                    for x in gx * ch_w..(gx + 1) * ch_w {
                        let v = image.get(y, x, c);
                        let g = dmean / n_px + dstd * (v - mean) / (n_px * std);
                        grad.set(y, x, c, grad.get(y, x, c) + g);
                    }
                }
            }
        }
        grad
    }
}

/// Temporal scorer: per-frame pooled features concatenated with the absolute
/// difference against the previous frame (zeros for the first frame), scored
/// by a shared MLP and stacked vertically in frame order.
pub fn score_temporal(
    frames: &FrameStack,
    grid: (usize, usize),
    weights: &CellMlpWeights,
) -> Result<RawScoreMap> {
    let f = frames.len();
    let per_frame: Vec<CellFeatures> = frames
        .frames()
        .iter()
        .map(|img| cell_features(img, grid))
        .collect::<Result<_>>()?;
    let dim = per_frame[0].dim;
    weights.validate(2 * dim)?;
    let cells = grid.0 * grid.1;
    let mut values = Vec::with_capacity(f * cells);
    let mut input = vec![0.0; 2 * dim];
    for fi in 0..f {
        for cell in 0..cells {
            let cur = per_frame[fi].cell(cell);
            input[..dim].copy_from_slice(cur);
            if fi == 0 {
                input[dim..].fill(0.0);
            } else {
                let prev = per_frame[fi - 1].cell(cell);
                for (slot, (a, b)) in input[dim..].iter_mut().zip(cur.iter().zip(prev)) {
                    *slot = (a - b).abs();
                }
            }
            let (out, _) = weights.forward(&input);
            values.push(out);
        }
    }
    RawScoreMap::new(f * grid.0, grid.1, values)
}

// --- file formats ---

const SCORE_MAGIC: &[u8; 8] = b"DARTSCR1";

fn parse_score_csv(text: &str) -> Result<RawScoreMap> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|tok| {
                tok.trim()
                    .parse::<f64>()
                    .map_err(|e| DartError::format("score csv", format!("line {}: {e}", ln + 1)))
            })
            .collect::<Result<_>>()?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(DartError::format(
                    "score csv",
                    format!("line {} has {} values, expected {}", ln + 1, row.len(), first.len()),
                ));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(DartError::format("score csv", "no rows"));
    }
    let h = rows.len();
    let w = rows[0].len();
    RawScoreMap::new(h, w, rows.into_iter().flatten().collect())
}

fn write_score_csv(path: &Path, height: usize, width: usize, values: &[f64]) -> Result<()> {
    let mut out = String::new();
    for r in 0..height {
        for c in 0..width {
            if c > 0 {
                out.push(',');
            }
            out.push_str(&format!("{}", values[r * width + c]));
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn write_score_binary(path: &Path, height: usize, width: usize, values: &[f64]) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    file.write_all(SCORE_MAGIC)?;
    file.write_all(&(height as u32).to_le_bytes())?;
    file.write_all(&(width as u32).to_le_bytes())?;
    let mut buf = Vec::with_capacity(values.len() * 8);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    file.write_all(&buf)?;
    Ok(())
}

fn read_score_binary(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let mut file = std::fs::File::open(path)?;
    let mut header = [0u8; 16];
    file.read_exact(&mut header)?;
    if &header[..8] != SCORE_MAGIC {
        return Err(DartError::format("score binary", "bad magic"));
    }
    let h = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
    let mut payload = Vec::new();
    file.read_to_end(&mut payload)?;
    if payload.len() != h * w * 8 {
        return Err(DartError::format(
            "score binary",
            format!("payload {} bytes, expected {}", payload.len(), h * w * 8),
        ));
    }
    let values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((h, w, values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn constant_map_normalizes_to_uniform() {
        let raw = RawScoreMap::new(3, 4, vec![5.0; 12]).unwrap();
        let s = normalize_scores(&raw).unwrap();
        for &v in s.values() {
            assert!((v - 1.0 / 12.0).abs() < 1e-15);
        }
    }

    #[test]
    fn normalization_sums_to_one_and_keeps_argmax() {
        let raw = RawScoreMap::new(2, 2, vec![0.0, 0.0, 0.0, 10.0]).unwrap();
        let s = normalize_scores(&raw).unwrap();
        assert!((s.values().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let max = s.values().iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(s.at(1, 1), max);
        for (i, &v) in s.values().iter().enumerate() {
            if i != 3 {
                assert!(v < max);
            }
        }
    }

    #[test]
    fn normalization_handles_extreme_magnitudes() {
        let raw = RawScoreMap::new(2, 2, vec![1e8, -1e8, 3.0, -7.0]).unwrap();
        let s = normalize_scores(&raw).unwrap();
        assert!((s.values().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(s.values().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn raw_map_rejects_non_finite_with_index() {
        let err = RawScoreMap::new(2, 3, vec![0.0, 1.0, 2.0, 3.0, f64::INFINITY, 5.0]).unwrap_err();
        match err {
            DartError::NonFinite { row, col, .. } => assert_eq!((row, col), (1, 1)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn normalize_vjp_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(3);
        let h = 1e-6;
        for _ in 0..10 {
            let vals: Vec<f64> = (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let raw = RawScoreMap::new(3, 4, vals.clone()).unwrap();
            let (_, tape) = normalize_scores_tape(&raw).unwrap();
            let upstream: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let analytic = tape.vjp(&upstream);
            for i in 0..12 {
                let mut plus = vals.clone();
                plus[i] += h;
                let mut minus = vals.clone();
                minus[i] -= h;
                let sp = normalize_scores(&RawScoreMap::new(3, 4, plus).unwrap()).unwrap();
                let sm = normalize_scores(&RawScoreMap::new(3, 4, minus).unwrap()).unwrap();
                let fd: f64 = sp
                    .values()
                    .iter()
                    .zip(sm.values())
                    .zip(&upstream)
                    .map(|((p, m), u)| u * (p - m) / (2.0 * h))
                    .sum();
                assert!(
                    rel_err(analytic[i], fd) < 1e-5,
                    "i={i}: {} vs {}",
                    analytic[i],
                    fd
                );
            }
        }
    }

    #[test]
    fn pixel_energy_constant_image_is_constant() {
        let img = Image::constant(8, 8, 3, 0.5);
        let raw = score_pixel_energy(&img, (4, 4)).unwrap();
        assert!(raw.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pixel_energy_checkerboard_symmetric() {
        let img = Image::from_fn(4, 4, 1, |y, x, _| ((x + y) % 2) as f64);
        let raw = score_pixel_energy(&img, (2, 2)).unwrap();
        let first = raw.values()[0];
        assert!(raw.values().iter().all(|&v| (v - first).abs() < 1e-15));
    }

    #[test]
    fn pixel_energy_peaks_on_square_border() {
        // bright 6x6 square on black; grid cells are 2x2 px
        let img = Image::from_fn(8, 8, 1, |y, x, _| {
            if (1..=6).contains(&y) && (1..=6).contains(&x) {
                1.0
            } else {
                0.0
            }
        });
        let raw = score_pixel_energy(&img, (4, 4)).unwrap();
        let max = raw.values().iter().cloned().fold(f64::MIN, f64::max);
        // interior cells (fully inside the square) see zero gradient
        for (r, c) in [(1, 1), (1, 2), (2, 1), (2, 2)] {
            assert!(raw.at(r, c) < max);
        }
        let (r, c) = raw.argmax();
        assert!(!((1..=2).contains(&r) && (1..=2).contains(&c)));
    }

    #[test]
    fn pixel_energy_rejects_small_or_indivisible() {
        let img = Image::constant(3, 3, 1, 0.0);
        assert!(score_pixel_energy(&img, (4, 4)).is_err());
        assert!(score_pixel_energy(&img, (2, 2)).is_err());
    }

    #[test]
    fn learnable_zero_weights_constant_map() {
        let img = Image::from_fn(8, 8, 3, |y, x, c| (y * x + c) as f64 / 64.0);
        let w = CellMlpWeights::zeros(6, 16);
        let (raw, _) = score_learnable(&img, (4, 4), &w).unwrap();
        assert!(raw.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn learnable_is_deterministic() {
        let img = Image::from_fn(8, 8, 3, |y, x, c| ((y + 2 * x + c) % 5) as f64 / 4.0);
        let w = CellMlpWeights::seeded(6, 16, 42);
        let (a, _) = score_learnable(&img, (4, 4), &w).unwrap();
        let (b, _) = score_learnable(&img, (4, 4), &w).unwrap();
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn learnable_rejects_shape_mismatch() {
        let img = Image::constant(8, 8, 3, 0.2);
        let w = CellMlpWeights::seeded(4, 16, 0);
        let err = score_learnable(&img, (4, 4), &w).unwrap_err();
        assert!(matches!(err, DartError::DimMismatch { .. }));
    }

    #[test]
    fn learnable_weight_gradients_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(5);
        let img = Image::from_fn(8, 8, 3, |_, _, _| rng.gen_range(0.0..1.0));
        let w = CellMlpWeights::seeded(6, 8, 9);
        let (raw, tape) = score_learnable(&img, (4, 4), &w).unwrap();
        let upstream: Vec<f64> = (0..raw.values().len())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let grads = tape.vjp_weights(&w, &upstream);
        let h = 1e-6;
        let eval = |w: &CellMlpWeights| -> f64 {
            let (raw, _) = score_learnable(&img, (4, 4), w).unwrap();
            raw.values()
                .iter()
                .zip(&upstream)
                .map(|(v, u)| v * u)
                .sum()
        };
        // spot-check a few coordinates of every weight tensor
        for idx in [0usize, 7, 23, 47] {
            let mut wp = w.clone();
            wp.w1[idx] += h;
            let mut wm = w.clone();
            wm.w1[idx] -= h;
            let fd = (eval(&wp) - eval(&wm)) / (2.0 * h);
            assert!(rel_err(grads.w1[idx], fd) < 1e-5, "w1[{idx}]");
        }
        for idx in [0usize, 3, 7] {
            let mut wp = w.clone();
            wp.w2[idx] += h;
            let mut wm = w.clone();
            wm.w2[idx] -= h;
            let fd = (eval(&wp) - eval(&wm)) / (2.0 * h);
            assert!(rel_err(grads.w2[idx], fd) < 1e-5, "w2[{idx}]");
            let mut bp = w.clone();
            bp.b1[idx] += h;
            let mut bm = w.clone();
            bm.b1[idx] -= h;
            let fd = (eval(&bp) - eval(&bm)) / (2.0 * h);
            assert!(rel_err(grads.b1[idx], fd) < 1e-5, "b1[{idx}]");
        }
        let mut bp = w.clone();
        bp.b2 += h;
        let mut bm = w.clone();
        bm.b2 -= h;
        let fd = (eval(&bp) - eval(&bm)) / (2.0 * h);
        assert!(rel_err(grads.b2, fd) < 1e-5, "b2");
    }

    #[test]
    fn learnable_pixel_gradients_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(17);
        let img = Image::from_fn(4, 4, 3, |_, _, _| rng.gen_range(0.1..0.9));
        let w = CellMlpWeights::seeded(6, 8, 2);
        let (raw, tape) = score_learnable(&img, (2, 2), &w).unwrap();
        let upstream: Vec<f64> = (0..raw.values().len())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let grad = tape.vjp_pixels(&w, &upstream, &img);
        let h = 1e-6;
        for (y, x, c) in [(0, 0, 0), (1, 2, 1), (3, 3, 2), (2, 1, 0)] {
            let mut ip = img.clone();
            ip.set(y, x, c, img.get(y, x, c) + h);
            let mut im = img.clone();
            im.set(y, x, c, img.get(y, x, c) - h);
            let (rp, _) = score_learnable(&ip, (2, 2), &w).unwrap();
            let (rm, _) = score_learnable(&im, (2, 2), &w).unwrap();
            let fd: f64 = rp
                .values()
                .iter()
                .zip(rm.values())
                .zip(&upstream)
                .map(|((p, m), u)| u * (p - m) / (2.0 * h))
                .sum();
            assert!(
                rel_err(grad.get(y, x, c), fd) < 1e-4,
                "pixel ({y},{x},{c}): {} vs {}",
                grad.get(y, x, c),
                fd
            );
        }
    }

    #[test]
    fn temporal_identical_frames_identical_blocks() {
        let frame = Image::from_fn(8, 8, 3, |y, x, c| ((y * 3 + x + c) % 7) as f64 / 6.0);
        let frames = FrameStack::new(vec![frame.clone(), frame.clone(), frame]).unwrap();
        let w = CellMlpWeights::seeded(12, 16, 1);
        let raw = score_temporal(&frames, (4, 4), &w).unwrap();
        assert_eq!(raw.height(), 12);
        let block: Vec<f64> = raw.values()[16..32].to_vec();
        assert_eq!(&raw.values()[32..48], block.as_slice());
        // frame 0 uses a zero diff against itself, which differs from the
        // later frames' zero diff only if the MLP treats the diff features
        // nonlinearly; with identical frames all diffs are zero, so frame 0
        // matches as well.
        assert_eq!(&raw.values()[..16], block.as_slice());
    }

    #[test]
    fn temporal_motion_raises_score() {
        let base = Image::constant(8, 8, 3, 0.1);
        let mut moved = base.clone();
        // brighten one 2x2 cell in frame 2
        for y in 2..4 {
            for x in 4..6 {
                for c in 0..3 {
                    moved.set(y, x, c, 1.0);
                }
            }
        }
        // weights that respond positively to diff features
        let mut w = CellMlpWeights::zeros(12, 2);
        for j in 0..2 {
            for i in 6..12 {
                w.w1[j * 12 + i] = 0.1;
            }
        }
        w.w2 = vec![1.0, 1.0];
        let frames = FrameStack::new(vec![base, moved]).unwrap();
        let raw = score_temporal(&frames, (4, 4), &w).unwrap();
        // cell (1, 2) of frame 2 vs the same cell of frame 1
        let f1 = raw.at(1, 2);
        let f2 = raw.at(4 + 1, 2);
        assert!(f2 > f1, "{f2} <= {f1}");
    }

    #[test]
    fn csv_and_binary_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let raw = RawScoreMap::new(2, 3, vec![0.1, -2.5, 3.75, 1e-9, 42.0, 0.30000000000000004])
            .unwrap();
        let csv = dir.path().join("scores.csv");
        raw.write_csv(&csv).unwrap();
        assert_eq!(RawScoreMap::read_csv(&csv).unwrap(), raw);
        let bin = dir.path().join("scores.dsb");
        raw.write_binary(&bin).unwrap();
        assert_eq!(RawScoreMap::read_binary(&bin).unwrap(), raw);
        let bytes = std::fs::read(&bin).unwrap();
        assert_eq!(&bytes[..8], b"DARTSCR1");
        assert_eq!(bytes.len(), 16 + 6 * 8);
    }
}
