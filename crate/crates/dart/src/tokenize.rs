//! End-to-end tokenizer: scores -> partition -> resampled patches -> linear
//! projection plus resampled positional embeddings. A drop-in replacement for
//! the fixed-grid patch tokenizer: the token count is `rows * cols` no matter
//! the input resolution, and uniform scores reproduce the fixed grid exactly.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DartError, Result};
use crate::image::Image;
use crate::partition::{
    partition_irregular, partition_regular, Partition, PartitionMode, PartitionSpec, PartitionTape,
};
use crate::resample::{
    posembed_vjp, resample_patch, resample_posembed, resample_region, resample_vjp_rect,
    PatchTensor, PosEmbedMap, Rect, RectGrad,
};
use crate::scoremap::{
    normalize_scores_tape, score_learnable, CellMlpGrads, CellMlpTape, NormalizeTape, ScoreMap,
    Scorer,
};

/// Full tokenizer configuration. `rows * cols` is the token budget.
#[derive(Debug, Clone)]
pub struct TokenizerConfig {
    pub rows: usize,
    pub cols: usize,
    /// Patch side length p; every region is resampled to p x p.
    pub patch: usize,
    /// Embedding dimension D.
    pub dim: usize,
    pub mode: PartitionMode,
    pub scorer: Scorer,
    /// Positional embeddings are averaged over q x q samples per token.
    pub pe_samples: usize,
    /// Resize target (height, width); None keeps the input resolution.
    pub resize: Option<(usize, usize)>,
    /// Score grid (H', W'); None derives height/4 x width/4.
    pub score_grid: Option<(usize, usize)>,
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 || self.patch == 0 || self.dim == 0 {
            return Err(DartError::invalid(
                "tokenizer config",
                format!(
                    "rows {} cols {} patch {} dim {}",
                    self.rows, self.cols, self.patch, self.dim
                ),
            ));
        }
        if self.pe_samples == 0 {
            return Err(DartError::invalid("pe_samples", "0"));
        }
        Ok(())
    }

    pub fn seqlen(&self) -> usize {
        self.rows * self.cols
    }

    /// Flattened patch length fed to the projection.
    pub fn patch_features(&self, channels: usize) -> usize {
        self.patch * self.patch * channels
    }

    fn effective_grid(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        if let Some(grid) = self.score_grid {
            return Ok(grid);
        }
        if let Scorer::External(raw) = &self.scorer {
            return Ok((raw.height(), raw.width()));
        }
        if height < 4 || width < 4 {
            return Err(DartError::invalid(
                "score grid",
                format!("cannot derive a grid from a {height}x{width} image"),
            ));
        }
        Ok((height / 4, width / 4))
    }

    pub fn echo_json(&self) -> serde_json::Value {
        serde_json::json!({
            "rows": self.rows,
            "cols": self.cols,
            "patch": self.patch,
            "dim": self.dim,
            "mode": self.mode.to_string(),
            "scorer": self.scorer.kind(),
            "pe_samples": self.pe_samples,
            "resize": self.resize.map(|(h, w)| vec![h, w]),
            "score_grid": self.score_grid.map(|(h, w)| vec![h, w]),
        })
    }
}

/// Linear projection from flattened patches to token embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionWeights {
    /// D x F, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub dim: usize,
    pub features: usize,
}

impl ProjectionWeights {
    pub fn zeros(dim: usize, features: usize) -> Self {
        Self {
            weights: vec![0.0; dim * features],
            bias: vec![0.0; dim],
            dim,
            features,
        }
    }

    pub fn seeded(dim: usize, features: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = (1.0 / features as f64).sqrt();
        Self {
            weights: (0..dim * features).map(|_| rng.gen_range(-s..s)).collect(),
            bias: vec![0.0; dim],
            dim,
            features,
        }
    }

    fn validate(&self, dim: usize, features: usize) -> Result<()> {
        if self.dim != dim
            || self.features != features
            || self.weights.len() != dim * features
            || self.bias.len() != dim
        {
            return Err(DartError::DimMismatch {
                what: "projection weights",
                expected: format!("{dim}x{features}"),
                actual: format!("{}x{}", self.dim, self.features),
            });
        }
        Ok(())
    }
}

/// Output of the tokenizer: `seqlen` tokens of dimension D plus the patches,
/// source rects, and the score distribution that produced them.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    pub tokens: Vec<f64>,
    pub patches: Vec<PatchTensor>,
    pub rects: Vec<Rect>,
    pub scores: ScoreMap,
    pub seqlen: usize,
    pub dim: usize,
}

impl TokenBatch {
    pub fn token(&self, k: usize) -> &[f64] {
        &self.tokens[k * self.dim..(k + 1) * self.dim]
    }
}

/// Stage-structured reverse record of one tokenize call.
#[derive(Debug, Clone)]
pub struct TokenizeTape {
    resized: Image,
    rects: Vec<Rect>,
    patch_flats: Vec<Vec<f64>>,
    rows: usize,
    cols: usize,
    patch: usize,
    pe_samples: usize,
    /// x scale from score grid to image coords; rect.x = bound * sx.
    sx: f64,
    sy: f64,
    /// rect (image coords) to embedding-grid coords.
    pe_sx: f64,
    pe_sy: f64,
    norm: Option<NormalizeTape>,
    partition: Option<PartitionTape>,
    scorer: Option<CellMlpTape>,
}

/// Gradients for every trainable leaf reachable from the tokens.
#[derive(Debug, Clone)]
pub struct TokenizerGrads {
    pub projection_w: Vec<f64>,
    pub projection_b: Vec<f64>,
    pub pos_embed: Vec<f64>,
    /// Gradient on the normalized score distribution (irregular mode only).
    pub norm_scores: Option<Vec<f64>>,
    /// Gradient on the raw scorer output (irregular mode only).
    pub raw_scores: Option<Vec<f64>>,
    /// Scorer weight gradients when the scorer is a learnable MLP.
    pub scorer: Option<CellMlpGrads>,
}

fn full_rect(img: &Image) -> Rect {
    Rect {
        x0: 0.0,
        x1: img.width() as f64,
        y0: 0.0,
        y1: img.height() as f64,
    }
}

fn resize_if_needed(img: &Image, target: Option<(usize, usize)>) -> Result<Image> {
    match target {
        Some((h, w)) if (h, w) != (img.height(), img.width()) => {
            resample_region(img, &full_rect(img), h, w).map_err(|e| e.in_stage("resize"))
        }
        _ => Ok(img.clone()),
    }
}

/// Content-dependent tokenization with the full reverse tape.
pub fn tokenize(
    img: &Image,
    cfg: &TokenizerConfig,
    proj: &ProjectionWeights,
    pe: &PosEmbedMap,
) -> Result<(TokenBatch, TokenizeTape)> {
    cfg.validate()?;
    let resized = resize_if_needed(img, cfg.resize)?;
    let grid = cfg
        .effective_grid(resized.height(), resized.width())
        .map_err(|e| e.in_stage("scorer"))?;

    let (raw, scorer_tape) = match &cfg.scorer {
        Scorer::CellMlp(w) => {
            let (raw, tape) =
                score_learnable(&resized, grid, w).map_err(|e| e.in_stage("scorer"))?;
            (raw, Some(tape))
        }
        other => (
            other
                .raw_scores(&resized, grid)
                .map_err(|e| e.in_stage("scorer"))?,
            None,
        ),
    };
    let (scores, norm_tape) = normalize_scores_tape(&raw).map_err(|e| e.in_stage("normalize"))?;

    let spec = PartitionSpec::new(cfg.rows, cfg.cols, cfg.mode)?;
    let (part_scores, part_tape) = match cfg.mode {
        PartitionMode::Irregular => {
            let (p, t) = partition_irregular(&scores, &spec).map_err(|e| e.in_stage("partition"))?;
            (p, Some(t))
        }
        PartitionMode::Regular => (
            partition_regular(&scores, &spec).map_err(|e| e.in_stage("partition"))?,
            None,
        ),
    };
    let part = part_scores
        .scaled_to(resized.height() as f64, resized.width() as f64)
        .map_err(|e| e.in_stage("partition"))?;

    let tape_base = TokenizeTape {
        sx: resized.width() as f64 / grid.1 as f64,
        sy: resized.height() as f64 / grid.0 as f64,
        pe_sx: pe.grid() as f64 / resized.width() as f64,
        pe_sy: pe.grid() as f64 / resized.height() as f64,
        resized: resized.clone(),
        rects: Vec::new(),
        patch_flats: Vec::new(),
        rows: cfg.rows,
        cols: cfg.cols,
        patch: cfg.patch,
        pe_samples: cfg.pe_samples,
        norm: Some(norm_tape),
        partition: part_tape,
        scorer: scorer_tape,
    };
    project_cells(&resized, &part, scores, cfg, proj, pe, tape_base)
}

/// Conventional fixed-grid tokenizer sharing the resampling and projection
/// path; the control arm for degeneracy checks and uniform-mode training.
pub fn tokenize_uniform_baseline(
    img: &Image,
    cfg: &TokenizerConfig,
    proj: &ProjectionWeights,
    pe: &PosEmbedMap,
) -> Result<(TokenBatch, TokenizeTape)> {
    cfg.validate()?;
    let resized = resize_if_needed(img, cfg.resize)?;
    let part = Partition::uniform(
        cfg.rows,
        cfg.cols,
        resized.height() as f64,
        resized.width() as f64,
        cfg.mode,
    );
    let scores = ScoreMap::uniform(cfg.rows, cfg.cols);
    let tape_base = TokenizeTape {
        sx: 1.0,
        sy: 1.0,
        pe_sx: pe.grid() as f64 / resized.width() as f64,
        pe_sy: pe.grid() as f64 / resized.height() as f64,
        resized: resized.clone(),
        rects: Vec::new(),
        patch_flats: Vec::new(),
        rows: cfg.rows,
        cols: cfg.cols,
        patch: cfg.patch,
        pe_samples: cfg.pe_samples,
        norm: None,
        partition: None,
        scorer: None,
    };
    project_cells(&resized, &part, scores, cfg, proj, pe, tape_base)
}

fn project_cells(
    resized: &Image,
    part: &Partition,
    scores: ScoreMap,
    cfg: &TokenizerConfig,
    proj: &ProjectionWeights,
    pe: &PosEmbedMap,
    mut tape: TokenizeTape,
) -> Result<(TokenBatch, TokenizeTape)> {
    let ch = resized.channels();
    let features = cfg.patch_features(ch);
    proj.validate(cfg.dim, features)?;
    let seqlen = cfg.seqlen();
    let mut tokens = vec![0.0; seqlen * cfg.dim];
    let mut patches = Vec::with_capacity(seqlen);
    let mut rects = Vec::with_capacity(seqlen);
    tape.patch_flats.reserve(seqlen);

    for (k, rect) in part.cell_rects().into_iter().enumerate() {
        let patch = resample_patch(resized, &rect, cfg.patch).map_err(|e| e.in_stage("resample"))?;
        let token = &mut tokens[k * cfg.dim..(k + 1) * cfg.dim];
        for (d, t) in token.iter_mut().enumerate() {
            let row = &proj.weights[d * features..(d + 1) * features];
            *t = proj.bias[d]
                + row
                    .iter()
                    .zip(&patch.values)
                    .map(|(w, v)| w * v)
                    .sum::<f64>();
        }
        let pe_rect = rect.scaled(tape.pe_sx, tape.pe_sy);
        let emb = resample_posembed(pe, &pe_rect, cfg.pe_samples)
            .map_err(|e| e.in_stage("posembed"))?;
        for (t, e) in token.iter_mut().zip(&emb) {
            *t += e;
        }
        tape.patch_flats.push(patch.values.clone());
        rects.push(rect);
        patches.push(patch);
    }
    tape.rects = rects.clone();
    let batch = TokenBatch {
        tokens,
        patches,
        rects,
        scores,
        seqlen,
        dim: cfg.dim,
    };
    Ok((batch, tape))
}

impl TokenizeTape {
    /// Pull an upstream gradient on the tokens (`seqlen * D`) back to every
    /// trainable leaf.
    pub fn backward(
        &self,
        upstream: &[f64],
        cfg: &TokenizerConfig,
        proj: &ProjectionWeights,
        pe: &PosEmbedMap,
    ) -> Result<TokenizerGrads> {
        let seqlen = self.rows * self.cols;
        let dim = cfg.dim;
        if upstream.len() != seqlen * dim {
            return Err(DartError::DimMismatch {
                what: "token upstream",
                expected: (seqlen * dim).to_string(),
                actual: upstream.len().to_string(),
            });
        }
        let features = self.patch_flats[0].len();
        let mut d_w = vec![0.0; dim * features];
        let mut d_b = vec![0.0; dim];
        let mut d_pe = vec![0.0; pe.data().len()];
        let mut d_y = vec![0.0; self.rows.saturating_sub(1)];
        let mut d_x = vec![vec![0.0; self.cols - 1]; self.rows];

        for k in 0..seqlen {
            let u = &upstream[k * dim..(k + 1) * dim];
            let flat = &self.patch_flats[k];
            let rect = &self.rects[k];
            // projection
            let mut d_flat = vec![0.0; features];
            for d in 0..dim {
                let ud = u[d];
                if ud == 0.0 {
                    continue;
                }
                d_b[d] += ud;
                let wrow = &proj.weights[d * features..(d + 1) * features];
                let grow = &mut d_w[d * features..(d + 1) * features];
                for f in 0..features {
                    grow[f] += ud * flat[f];
                    d_flat[f] += ud * wrow[f];
                }
            }
            // bilinear resampling back to the rect
            let mut rect_grad = resample_vjp_rect(&self.resized, rect, self.patch, &d_flat)?;
            // positional embedding back to the rect and the grid
            let pe_rect = rect.scaled(self.pe_sx, self.pe_sy);
            let pe_grad = posembed_vjp(pe, &pe_rect, self.pe_samples, u, &mut d_pe)?;
            rect_grad.add(&pe_grad.scaled(self.pe_sx, self.pe_sy));

            if self.partition.is_some() {
                // rect coords are score-grid bounds scaled by (sx, sy)
                let bound_grad = RectGrad {
                    x0: rect_grad.x0 * self.sx,
                    x1: rect_grad.x1 * self.sx,
                    y0: rect_grad.y0 * self.sy,
                    y1: rect_grad.y1 * self.sy,
                };
                let (r, c) = (k / self.cols, k % self.cols);
                if c > 0 {
                    d_x[r][c - 1] += bound_grad.x0;
                }
                if c + 1 < self.cols {
                    d_x[r][c] += bound_grad.x1;
                }
                if r > 0 {
                    d_y[r - 1] += bound_grad.y0;
                }
                if r + 1 < self.rows {
                    d_y[r] += bound_grad.y1;
                }
            }
        }

        let mut norm_scores = None;
        let mut raw_scores = None;
        let mut scorer = None;
        if let Some(ptape) = &self.partition {
            let d_scores = ptape.vjp(&d_y, &d_x)?;
            if let Some(norm) = &self.norm {
                let d_raw = norm.vjp(&d_scores);
                if let (Some(mlp_tape), Scorer::CellMlp(w)) = (&self.scorer, &cfg.scorer) {
                    scorer = Some(mlp_tape.vjp_weights(w, &d_raw));
                }
                raw_scores = Some(d_raw);
            }
            norm_scores = Some(d_scores);
        }
        Ok(TokenizerGrads {
            projection_w: d_w,
            projection_b: d_b,
            pos_embed: d_pe,
            norm_scores,
            raw_scores,
            scorer,
        })
    }
}

impl Partition {
    /// Fixed uniform grid over an arbitrary extent; what the conventional
    /// tokenizer uses.
    pub fn uniform(
        rows: usize,
        cols: usize,
        height: f64,
        width: f64,
        mode: PartitionMode,
    ) -> Partition {
        let y: Vec<f64> = (0..=rows).map(|r| r as f64 * height / rows as f64).collect();
        let xs: Vec<f64> = (0..=cols).map(|c| c as f64 * width / cols as f64).collect();
        Partition::from_bounds(mode, (height, width), y, vec![xs; rows])
    }
}

/// Arithmetic cost accounting: the tokenizer's own work plus the backbone
/// cost implied by the token budget. Resolution does not appear anywhere:
/// with a fixed budget the cost is resolution-independent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRecord {
    pub seqlen: usize,
    pub patch: usize,
    pub dim: usize,
    pub channels: usize,
    pub pe_samples: usize,
    /// seqlen * p^2 * (9 * ch + 10): nine flops per interpolated scalar plus
    /// ten for each sample point's coordinates.
    pub resample_flops: u64,
    /// Same bilinear count over the q^2 embedding samples plus the average.
    pub posembed_flops: u64,
    /// seqlen * dim * p^2 * ch multiply-adds.
    pub projection_macs: u64,
    /// resample + posembed + 2 * projection_macs.
    pub tokenizer_flops: u64,
    /// seqlen * backbone_per_token_flops.
    pub backbone_flops: f64,
    /// tokenizer_flops / backbone_flops.
    pub tokenizer_share: f64,
}

pub fn count_cost(cfg: &TokenizerConfig, backbone_per_token_flops: f64) -> CostRecord {
    let seqlen = cfg.seqlen() as u64;
    let ch = 3u64;
    let p2 = (cfg.patch * cfg.patch) as u64;
    let q2 = (cfg.pe_samples * cfg.pe_samples) as u64;
    let dim = cfg.dim as u64;
    let resample_flops = seqlen * p2 * (9 * ch + 10);
    let posembed_flops = seqlen * (q2 * (9 * dim + 10) + dim);
    let projection_macs = seqlen * dim * p2 * ch;
    let tokenizer_flops = resample_flops + posembed_flops + 2 * projection_macs;
    let backbone_flops = cfg.seqlen() as f64 * backbone_per_token_flops;
    CostRecord {
        seqlen: cfg.seqlen(),
        patch: cfg.patch,
        dim: cfg.dim,
        channels: 3,
        pe_samples: cfg.pe_samples,
        resample_flops,
        posembed_flops,
        projection_macs,
        tokenizer_flops,
        backbone_flops,
        tokenizer_share: if backbone_flops > 0.0 {
            tokenizer_flops as f64 / backbone_flops
        } else {
            f64::INFINITY
        },
    }
}

// --- token and patch dumps ---

const TOKEN_MAGIC: &[u8; 8] = b"DARTTOK1";
const PATCH_MAGIC: &[u8; 8] = b"DARTPAT1";

fn rect_json(r: &Rect) -> serde_json::Value {
    serde_json::json!({ "x0": r.x0, "x1": r.x1, "y0": r.y0, "y1": r.y1 })
}

/// JSON header followed by the token payload as little-endian f32.
pub fn write_token_dump(path: &Path, batch: &TokenBatch, cfg: &TokenizerConfig) -> Result<()> {
    let header = serde_json::json!({
        "config": cfg.echo_json(),
        "seqlen": batch.seqlen,
        "dim": batch.dim,
        "rects": batch.rects.iter().map(rect_json).collect::<Vec<_>>(),
    });
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| DartError::format("token dump", e.to_string()))?;
    let mut file = std::fs::File::create(path)?;
    file.write_all(TOKEN_MAGIC)?;
    file.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    file.write_all(&header_bytes)?;
    let mut payload = Vec::with_capacity(batch.tokens.len() * 4);
    for &t in &batch.tokens {
        payload.extend_from_slice(&(t as f32).to_le_bytes());
    }
    file.write_all(&payload)?;
    Ok(())
}

pub fn read_token_dump(path: &Path) -> Result<(serde_json::Value, Vec<f32>)> {
    let mut file = std::fs::File::open(path)?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)?;
    if &magic != TOKEN_MAGIC {
        return Err(DartError::format("token dump", "bad magic"));
    }
    let mut len = [0u8; 4];
    file.read_exact(&mut len)?;
    let mut header = vec![0u8; u32::from_le_bytes(len) as usize];
    file.read_exact(&mut header)?;
    let header: serde_json::Value = serde_json::from_slice(&header)
        .map_err(|e| DartError::format("token dump", e.to_string()))?;
    let mut payload = Vec::new();
    file.read_to_end(&mut payload)?;
    if payload.len() % 4 != 0 {
        return Err(DartError::format("token dump", "payload not f32-aligned"));
    }
    let tokens = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, tokens))
}

/// Raw patch payload with a sidecar JSON of source rects at `<path>.json`.
pub fn write_patch_dump(path: &Path, patches: &[PatchTensor]) -> Result<()> {
    if patches.is_empty() {
        return Err(DartError::Empty { what: "patches" });
    }
    let p = patches[0].size;
    let ch = patches[0].channels;
    let mut file = std::fs::File::create(path)?;
    file.write_all(PATCH_MAGIC)?;
    file.write_all(&(patches.len() as u32).to_le_bytes())?;
    file.write_all(&(p as u32).to_le_bytes())?;
    file.write_all(&(ch as u32).to_le_bytes())?;
    let mut payload = Vec::with_capacity(patches.len() * p * p * ch * 4);
    for patch in patches {
        for &v in &patch.values {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    file.write_all(&payload)?;
    let rects = serde_json::json!({
        "rects": patches.iter().map(|p| rect_json(&p.source)).collect::<Vec<_>>(),
    });
    let mut sidecar = path.as_os_str().to_owned();
    sidecar.push(".json");
    std::fs::write(
        sidecar,
        serde_json::to_string_pretty(&rects)
            .map_err(|e| DartError::format("patch dump", e.to_string()))?,
    )?;
    Ok(())
}
