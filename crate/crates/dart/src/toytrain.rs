//! Desk-scale end-to-end training: sparse-glyph classification with a
//! mean-pool + affine + softmax head and a manual backward pass through the
//! whole tokenizer, so the region scorer is trained by the task loss alone.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DartError, Result};
use crate::image::Image;
use crate::partition::{overlap_weights, PartitionMode};
use crate::quantile::{MassMode, PiecewiseDistribution};
use crate::resample::{
    posembed_vjp, resample_patch, resample_posembed, resample_vjp_pixels, resample_vjp_rect,
    PosEmbedMap, Rect,
};
use crate::scoremap::{
    normalize_scores, normalize_scores_tape, score_learnable, CellMlpGrads, CellMlpWeights,
    RawScoreMap, Scorer,
};
use crate::tokenize::{
    tokenize, tokenize_uniform_baseline, ProjectionWeights, TokenizerConfig, TokenizerGrads,
};

/// Synthetic dataset shape: one bright glyph per noisy canvas.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub canvas: usize,
    pub glyph: usize,
    pub classes: usize,
    /// Background noise is i.i.d. uniform in [0, noise_max].
    pub noise_max: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            canvas: 112,
            glyph: 14,
            classes: 10,
            noise_max: 0.3,
        }
    }
}

/// One labeled canvas; the bbox is (y, x, h, w) of the glyph in pixels.
#[derive(Debug, Clone)]
pub struct SynthSample {
    pub canvas: Image,
    pub label: usize,
    pub bbox: (usize, usize, usize, usize),
}

/// Procedurally generated binary glyph masks, one per class.
pub fn gen_glyphs(cfg: &SynthConfig, seed: u64) -> Vec<Vec<bool>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e3779b97f4a7c15);
    (0..cfg.classes)
        .map(|_| (0..cfg.glyph * cfg.glyph).map(|_| rng.gen::<bool>()).collect())
        .collect()
}

/// Deterministic per seed; labels are balanced round-robin, then shuffled.
pub fn gen_dataset(cfg: &SynthConfig, seed: u64, n: usize) -> Result<Vec<SynthSample>> {
    if n == 0 {
        return Err(DartError::Empty { what: "dataset" });
    }
    if cfg.glyph * cfg.glyph * 100 > cfg.canvas * cfg.canvas * 12 {
        return Err(DartError::invalid(
            "glyph size",
            format!(
                "{0}x{0} glyph exceeds 12% of a {1}x{1} canvas",
                cfg.glyph, cfg.canvas
            ),
        ));
    }
    let glyphs = gen_glyphs(cfg, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = (0..n).map(|i| i % cfg.classes).collect();
    labels.shuffle(&mut rng);
    let span = cfg.canvas - cfg.glyph;
    let mut samples = Vec::with_capacity(n);
    for label in labels {
        let mut canvas = Image::from_fn(cfg.canvas, cfg.canvas, 3, |_, _, _| {
            rng.gen_range(0.0..cfg.noise_max)
        });
        let gy = rng.gen_range(0..=span);
        let gx = rng.gen_range(0..=span);
        let glyph = &glyphs[label];
        for y in 0..cfg.glyph {
            for x in 0..cfg.glyph {
                if glyph[y * cfg.glyph + x] {
                    for c in 0..3 {
                        canvas.set(gy + y, gx + x, c, 1.0);
                    }
                }
            }
        }
        samples.push(SynthSample {
            canvas,
            label,
            bbox: (gy, gx, cfg.glyph, cfg.glyph),
        });
    }
    Ok(samples)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Content-dependent partitioning; gradients reach the scorer.
    Dart,
    /// Fixed-grid control arm; the scorer stays untouched.
    Uniform,
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TrainMode::Dart => write!(f, "dart"),
            TrainMode::Uniform => write!(f, "uniform"),
        }
    }
}

impl std::str::FromStr for TrainMode {
    type Err = DartError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dart" => Ok(TrainMode::Dart),
            "uniform" => Ok(TrainMode::Uniform),
            other => Err(DartError::invalid("train mode", other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub synth: SynthConfig,
    pub rows: usize,
    pub cols: usize,
    pub patch: usize,
    pub dim: usize,
    pub pe_samples: usize,
    pub scorer_hidden: usize,
    /// Worker threads for the per-sample forward/backward; gradients are
    /// reduced in sample order, so the result is thread-count independent.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Dart,
            epochs: 20,
            batch: 32,
            lr: 0.05,
            momentum: 0.9,
            seed: 0,
            n_train: 2000,
            n_test: 500,
            synth: SynthConfig::default(),
            rows: 4,
            cols: 4,
            patch: 8,
            dim: 16,
            pe_samples: 1,
            scorer_hidden: 16,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn score_grid(&self) -> (usize, usize) {
        (self.synth.canvas / 4, self.synth.canvas / 4)
    }

    pub fn tokenizer_config(&self, scorer: Scorer) -> TokenizerConfig {
        TokenizerConfig {
            rows: self.rows,
            cols: self.cols,
            patch: self.patch,
            dim: self.dim,
            mode: PartitionMode::Irregular,
            scorer,
            pe_samples: self.pe_samples,
            resize: None,
            score_grid: Some(self.score_grid()),
        }
    }
}

/// Mean-pool over tokens, affine to class logits, softmax cross-entropy.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyHead {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub classes: usize,
    pub dim: usize,
}

impl ToyHead {
    pub fn seeded(classes: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = (1.0 / dim as f64).sqrt();
        Self {
            weights: (0..classes * dim).map(|_| rng.gen_range(-s..s)).collect(),
            bias: vec![0.0; classes],
            classes,
            dim,
        }
    }

    fn logits(&self, pooled: &[f64]) -> Vec<f64> {
        (0..self.classes)
            .map(|l| {
                self.bias[l]
                    + self.weights[l * self.dim..(l + 1) * self.dim]
                        .iter()
                        .zip(pooled)
                        .map(|(w, p)| w * p)
                        .sum::<f64>()
            })
            .collect()
    }

    /// (loss, predicted class, softmax probabilities).
    fn forward(&self, pooled: &[f64], label: usize) -> (f64, usize, Vec<f64>) {
        let logits = self.logits(pooled);
        let max = logits.iter().cloned().fold(f64::MIN, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let loss = z.ln() + max - logits[label];
        let pred = logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        let probs = exps.iter().map(|e| e / z).collect();
        (loss, pred, probs)
    }
}

#[derive(Debug, Clone)]
struct HeadGrads {
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl HeadGrads {
    fn zeros(head: &ToyHead) -> Self {
        Self {
            weights: vec![0.0; head.weights.len()],
            bias: vec![0.0; head.bias.len()],
        }
    }
}

/// All trainable leaves plus optimizer state.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub scorer: CellMlpWeights,
    pub projection: ProjectionWeights,
    pub pos_embed: PosEmbedMap,
    pub head: ToyHead,
    pub seed: u64,
    pub epoch: usize,
    pub step: usize,
    momentum: MomentumState,
}

#[derive(Debug, Clone)]
struct MomentumState {
    scorer_w1: Vec<f64>,
    scorer_b1: Vec<f64>,
    scorer_w2: Vec<f64>,
    scorer_b2: f64,
    proj_w: Vec<f64>,
    proj_b: Vec<f64>,
    pe: Vec<f64>,
    head_w: Vec<f64>,
    head_b: Vec<f64>,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Self {
        let features = cfg.patch * cfg.patch * 3;
        let scorer = CellMlpWeights::seeded(6, cfg.scorer_hidden, cfg.seed ^ 0xA5);
        let projection = ProjectionWeights::seeded(cfg.dim, features, cfg.seed ^ 0xB6);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xC7);
        let g = cfg.rows;
        let pos_embed = PosEmbedMap::new(
            g,
            cfg.dim,
            (0..g * g * cfg.dim)
                .map(|_| rng.gen_range(-0.02..0.02))
                .collect(),
        )
        .expect("valid dims");
        let head = ToyHead::seeded(cfg.synth.classes, cfg.dim, cfg.seed ^ 0xD8);
        let momentum = MomentumState {
            scorer_w1: vec![0.0; scorer.w1.len()],
            scorer_b1: vec![0.0; scorer.b1.len()],
            scorer_w2: vec![0.0; scorer.w2.len()],
            scorer_b2: 0.0,
            proj_w: vec![0.0; projection.weights.len()],
            proj_b: vec![0.0; projection.bias.len()],
            pe: vec![0.0; pos_embed.data().len()],
            head_w: vec![0.0; head.weights.len()],
            head_b: vec![0.0; head.bias.len()],
        };
        TrainState {
            scorer,
            projection,
            pos_embed,
            head,
            seed: cfg.seed,
            epoch: 0,
            step: 0,
            momentum,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Test loss/accuracy before any update; close to ln(classes) at init.
    pub initial_test: (f64, f64),
    pub history: Vec<EpochMetrics>,
    pub final_test: (f64, f64),
    pub state: TrainState,
    pub diverged: bool,
}

struct SampleGrads {
    loss: f64,
    correct: bool,
    tok: TokenizerGrads,
    head: HeadGrads,
}

fn pooled_tokens(batch: &crate::tokenize::TokenBatch) -> Vec<f64> {
    let k = batch.seqlen as f64;
    let mut pooled = vec![0.0; batch.dim];
    for t in 0..batch.seqlen {
        for (p, v) in pooled.iter_mut().zip(batch.token(t)) {
            *p += v / k;
        }
    }
    pooled
}

fn forward_backward(
    sample: &SynthSample,
    cfg: &TrainConfig,
    state: &TrainState,
) -> Result<SampleGrads> {
    let tok_cfg = cfg.tokenizer_config(Scorer::CellMlp(state.scorer.clone()));
    let (batch, tape) = match cfg.mode {
        TrainMode::Dart => tokenize(&sample.canvas, &tok_cfg, &state.projection, &state.pos_embed)?,
        TrainMode::Uniform => tokenize_uniform_baseline(
            &sample.canvas,
            &tok_cfg,
            &state.projection,
            &state.pos_embed,
        )?,
    };
    let pooled = pooled_tokens(&batch);
    let (loss, pred, probs) = state.head.forward(&pooled, sample.label);
    // softmax cross-entropy backward
    let mut head = HeadGrads::zeros(&state.head);
    let mut d_pooled = vec![0.0; state.head.dim];
    for l in 0..state.head.classes {
        let dl = probs[l] - if l == sample.label { 1.0 } else { 0.0 };
        head.bias[l] += dl;
        let wrow = &state.head.weights[l * state.head.dim..(l + 1) * state.head.dim];
        let grow = &mut head.weights[l * state.head.dim..(l + 1) * state.head.dim];
        for d in 0..state.head.dim {
            grow[d] += dl * pooled[d];
            d_pooled[d] += dl * wrow[d];
        }
    }
    let k = batch.seqlen as f64;
    let mut d_tokens = vec![0.0; batch.seqlen * batch.dim];
    for t in 0..batch.seqlen {
        for (slot, dp) in d_tokens[t * batch.dim..(t + 1) * batch.dim]
            .iter_mut()
            .zip(&d_pooled)
        {
            *slot = dp / k;
        }
    }
    let tok = tape.backward(&d_tokens, &tok_cfg, &state.projection, &state.pos_embed)?;
    Ok(SampleGrads {
        loss,
        correct: pred == sample.label,
        tok,
        head,
    })
}

fn forward_eval(
    sample: &SynthSample,
    cfg: &TrainConfig,
    state: &TrainState,
) -> Result<(f64, bool)> {
    let tok_cfg = cfg.tokenizer_config(Scorer::CellMlp(state.scorer.clone()));
    let (batch, _) = match cfg.mode {
        TrainMode::Dart => tokenize(&sample.canvas, &tok_cfg, &state.projection, &state.pos_embed)?,
        TrainMode::Uniform => tokenize_uniform_baseline(
            &sample.canvas,
            &tok_cfg,
            &state.projection,
            &state.pos_embed,
        )?,
    };
    let pooled = pooled_tokens(&batch);
    let (loss, pred, _) = state.head.forward(&pooled, sample.label);
    Ok((loss, pred == sample.label))
}

/// Run a closure over samples on up to `threads` workers, collecting results
/// in sample order so reductions are deterministic for any thread count.
fn map_samples<T: Send>(
    samples: &[&SynthSample],
    threads: usize,
    f: impl Fn(&SynthSample) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    let threads = threads.max(1).min(samples.len().max(1));
    if threads == 1 {
        return samples.iter().map(|s| f(s)).collect();
    }
    let mut out: Vec<Option<Result<T>>> = (0..samples.len()).map(|_| None).collect();
    let chunk = samples.len().div_ceil(threads);
    std::thread::scope(|scope| {
        for (slice, results) in samples.chunks(chunk).zip(out.chunks_mut(chunk)) {
            let f = &f;
            scope.spawn(move || {
                for (s, slot) in slice.iter().zip(results.iter_mut()) {
                    *slot = Some(f(s));
                }
            });
        }
    });
    out.into_iter()
        .map(|r| r.expect("worker filled slot"))
        .collect()
}

pub fn evaluate(
    samples: &[SynthSample],
    cfg: &TrainConfig,
    state: &TrainState,
) -> Result<(f64, f64)> {
    let refs: Vec<&SynthSample> = samples.iter().collect();
    let results = map_samples(&refs, cfg.threads, |s| forward_eval(s, cfg, state))?;
    let n = results.len() as f64;
    let loss: f64 = results.iter().map(|(l, _)| l).sum::<f64>() / n;
    let acc = results.iter().filter(|(_, c)| *c).count() as f64 / n;
    Ok((loss, acc))
}

fn sgd_step(v: &mut [f64], w: &mut [f64], g: &[f64], lr: f64, mu: f64, scale: f64) {
    for ((v, w), g) in v.iter_mut().zip(w.iter_mut()).zip(g) {
        *v = mu * *v + g * scale;
        *w -= lr * *v;
    }
}

/// Gradient descent with momentum on cross-entropy; in dart mode the region
/// scorer is a trainable leaf, in uniform mode the partition stays fixed.
pub fn train(cfg: &TrainConfig) -> Result<TrainReport> {
    let train_set = gen_dataset(&cfg.synth, cfg.seed, cfg.n_train)?;
    let test_set = gen_dataset(&cfg.synth, cfg.seed ^ 0xFEED, cfg.n_test)?;
    let mut state = TrainState::new(cfg);
    let mut history = Vec::with_capacity(cfg.epochs * 2);
    let initial_test = evaluate(&test_set, cfg, &state)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut diverged = false;

    'epochs: for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut epoch_correct = 0usize;
        for chunk in order.chunks(cfg.batch) {
            let batch_samples: Vec<&SynthSample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let grads = map_samples(&batch_samples, cfg.threads, |s| {
                forward_backward(s, cfg, &state)
            })?;
            let batch_loss: f64 = grads.iter().map(|g| g.loss).sum::<f64>();
            if !batch_loss.is_finite() {
                diverged = true;
                break 'epochs;
            }
            epoch_loss += batch_loss;
            epoch_correct += grads.iter().filter(|g| g.correct).count();
            let scale = 1.0 / chunk.len() as f64;

            let mut proj_w = vec![0.0; state.projection.weights.len()];
            let mut proj_b = vec![0.0; state.projection.bias.len()];
            let mut pe = vec![0.0; state.pos_embed.data().len()];
            let mut head = HeadGrads::zeros(&state.head);
            let mut scorer = CellMlpGrads::zeros(&state.scorer);
            let mut any_scorer = false;
            for g in &grads {
                add_assign(&mut proj_w, &g.tok.projection_w);
                add_assign(&mut proj_b, &g.tok.projection_b);
                add_assign(&mut pe, &g.tok.pos_embed);
                add_assign(&mut head.weights, &g.head.weights);
                add_assign(&mut head.bias, &g.head.bias);
                if let Some(sg) = &g.tok.scorer {
                    any_scorer = true;
                    add_assign(&mut scorer.w1, &sg.w1);
                    add_assign(&mut scorer.b1, &sg.b1);
                    add_assign(&mut scorer.w2, &sg.w2);
                    scorer.b2 += sg.b2;
                }
            }
            let lr = cfg.lr;
            let mu = cfg.momentum;
            let m = &mut state.momentum;
            sgd_step(&mut m.proj_w, &mut state.projection.weights, &proj_w, lr, mu, scale);
            sgd_step(&mut m.proj_b, &mut state.projection.bias, &proj_b, lr, mu, scale);
            sgd_step(&mut m.pe, state.pos_embed.data_mut(), &pe, lr, mu, scale);
            sgd_step(&mut m.head_w, &mut state.head.weights, &head.weights, lr, mu, scale);
            sgd_step(&mut m.head_b, &mut state.head.bias, &head.bias, lr, mu, scale);
            if any_scorer {
                sgd_step(&mut m.scorer_w1, &mut state.scorer.w1, &scorer.w1, lr, mu, scale);
                sgd_step(&mut m.scorer_b1, &mut state.scorer.b1, &scorer.b1, lr, mu, scale);
                sgd_step(&mut m.scorer_w2, &mut state.scorer.w2, &scorer.w2, lr, mu, scale);
                m.scorer_b2 = mu * m.scorer_b2 + scorer.b2 * scale;
                state.scorer.b2 -= lr * m.scorer_b2;
            }
            state.step += 1;
        }
        state.epoch = epoch;
        let n = train_set.len() as f64;
        history.push(EpochMetrics {
            epoch,
            split: "train".into(),
            loss: epoch_loss / n,
            accuracy: epoch_correct as f64 / n,
        });
        let (test_loss, test_acc) = evaluate(&test_set, cfg, &state)?;
        history.push(EpochMetrics {
            epoch,
            split: "test".into(),
            loss: test_loss,
            accuracy: test_acc,
        });
    }

    let final_test = history
        .iter()
        .rev()
        .find(|m| m.split == "test")
        .map(|m| (m.loss, m.accuracy))
        .unwrap_or(initial_test);
    Ok(TrainReport {
        initial_test,
        history,
        final_test,
        state,
        diverged,
    })
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Ratio of mean score density inside the glyph bbox to the uniform density,
/// plus the fraction of samples at or above 2x.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConcentrationStats {
    pub mean_ratio: f64,
    pub frac_at_least_2x: f64,
}

pub fn score_concentration(
    scorer: &CellMlpWeights,
    samples: &[SynthSample],
    grid: (usize, usize),
) -> Result<ConcentrationStats> {
    let mut ratios = Vec::with_capacity(samples.len());
    for sample in samples {
        let (raw, _) = score_learnable(&sample.canvas, grid, scorer)?;
        let scores = normalize_scores(&raw)?;
        let cell_h = sample.canvas.height() as f64 / grid.0 as f64;
        let cell_w = sample.canvas.width() as f64 / grid.1 as f64;
        let (by, bx, bh, bw) = sample.bbox;
        // bbox in cell units
        let y0 = by as f64 / cell_h;
        let y1 = (by + bh) as f64 / cell_h;
        let x0 = bx as f64 / cell_w;
        let x1 = (bx + bw) as f64 / cell_w;
        let wy = overlap_weights(y0, y1, grid.0);
        let wx = overlap_weights(x0, x1, grid.1);
        let mut inside = 0.0;
        for (i, &a) in wy.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            for (j, &b) in wx.iter().enumerate() {
                inside += a * b * scores.at(i, j);
            }
        }
        let area = (y1 - y0) * (x1 - x0);
        let density = inside / area;
        let uniform = 1.0 / (grid.0 * grid.1) as f64;
        ratios.push(density / uniform);
    }
    let n = ratios.len() as f64;
    Ok(ConcentrationStats {
        mean_ratio: ratios.iter().sum::<f64>() / n,
        frac_at_least_2x: ratios.iter().filter(|&&r| r >= 2.0).count() as f64 / n,
    })
}

pub fn write_metrics_csv(path: &Path, history: &[EpochMetrics]) -> Result<()> {
    let mut out = String::from("epoch,split,loss,accuracy\n");
    for m in history {
        out.push_str(&format!(
            "{},{},{},{}\n",
            m.epoch, m.split, m.loss, m.accuracy
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

// --- checkpoints ---

const CKPT_MAGIC: &[u8; 8] = b"DARTCKP1";

/// Named f64 tensors with a JSON manifest, in one binary blob.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.tensors
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, _, v)| v.as_slice())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let manifest = serde_json::json!({
            "meta": self.meta,
            "entries": self
                .tensors
                .iter()
                .map(|(name, shape, _)| serde_json::json!({ "name": name, "shape": shape }))
                .collect::<Vec<_>>(),
        });
        let manifest_bytes = serde_json::to_vec(&manifest)
            .map_err(|e| DartError::format("checkpoint", e.to_string()))?;
        let mut file = std::fs::File::create(path)?;
        file.write_all(CKPT_MAGIC)?;
        file.write_all(&(manifest_bytes.len() as u32).to_le_bytes())?;
        file.write_all(&manifest_bytes)?;
        let mut payload = Vec::new();
        for (_, _, values) in &self.tensors {
            for v in values {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        file.write_all(&payload)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Checkpoint> {
        let mut file = std::fs::File::open(path)?;
        let mut magic = [0u8; 8];
        file.read_exact(&mut magic)?;
        if &magic != CKPT_MAGIC {
            return Err(DartError::format("checkpoint", "bad magic"));
        }
        let mut len = [0u8; 4];
        file.read_exact(&mut len)?;
        let mut manifest = vec![0u8; u32::from_le_bytes(len) as usize];
        file.read_exact(&mut manifest)?;
        let manifest: serde_json::Value = serde_json::from_slice(&manifest)
            .map_err(|e| DartError::format("checkpoint", e.to_string()))?;
        let mut payload = Vec::new();
        file.read_to_end(&mut payload)?;
        let mut values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let mut tensors = Vec::new();
        for entry in manifest["entries"]
            .as_array()
            .ok_or_else(|| DartError::format("checkpoint", "missing entries"))?
        {
            let name = entry["name"]
                .as_str()
                .ok_or_else(|| DartError::format("checkpoint", "entry name"))?
                .to_string();
            let shape: Vec<usize> = serde_json::from_value(entry["shape"].clone())
                .map_err(|e| DartError::format("checkpoint", e.to_string()))?;
            let count: usize = shape.iter().product();
            let data: Vec<f64> = values.by_ref().take(count).collect();
            if data.len() != count {
                return Err(DartError::format("checkpoint", "payload truncated"));
            }
            tensors.push((name, shape, data));
        }
        Ok(Checkpoint {
            meta: manifest["meta"].clone(),
            tensors,
        })
    }
}

impl TrainState {
    pub fn to_checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        let meta = serde_json::json!({
            "config": serde_json::to_value(cfg).unwrap_or_default(),
            "seed": self.seed,
            "epoch": self.epoch,
            "step": self.step,
        });
        let m = &self.momentum;
        let g = self.pos_embed.grid();
        let tensors = vec![
            (
                "scorer.w1".into(),
                vec![self.scorer.hidden_dim, self.scorer.input_dim],
                self.scorer.w1.clone(),
            ),
            ("scorer.b1".into(), vec![self.scorer.hidden_dim], self.scorer.b1.clone()),
            ("scorer.w2".into(), vec![self.scorer.hidden_dim], self.scorer.w2.clone()),
            ("scorer.b2".into(), vec![1], vec![self.scorer.b2]),
            (
                "projection.w".into(),
                vec![self.projection.dim, self.projection.features],
                self.projection.weights.clone(),
            ),
            ("projection.b".into(), vec![self.projection.dim], self.projection.bias.clone()),
            (
                "pos_embed".into(),
                vec![g, g, self.pos_embed.dim()],
                self.pos_embed.data().to_vec(),
            ),
            ("head.w".into(), vec![self.head.classes, self.head.dim], self.head.weights.clone()),
            ("head.b".into(), vec![self.head.classes], self.head.bias.clone()),
            ("momentum.scorer.w1".into(), vec![m.scorer_w1.len()], m.scorer_w1.clone()),
            ("momentum.scorer.b1".into(), vec![m.scorer_b1.len()], m.scorer_b1.clone()),
            ("momentum.scorer.w2".into(), vec![m.scorer_w2.len()], m.scorer_w2.clone()),
            ("momentum.scorer.b2".into(), vec![1], vec![m.scorer_b2]),
            ("momentum.projection.w".into(), vec![m.proj_w.len()], m.proj_w.clone()),
            ("momentum.projection.b".into(), vec![m.proj_b.len()], m.proj_b.clone()),
            ("momentum.pos_embed".into(), vec![m.pe.len()], m.pe.clone()),
            ("momentum.head.w".into(), vec![m.head_w.len()], m.head_w.clone()),
            ("momentum.head.b".into(), vec![m.head_b.len()], m.head_b.clone()),
        ];
        Checkpoint { meta, tensors }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<TrainState> {
        let cfg: TrainConfig = serde_json::from_value(ckpt.meta["config"].clone())
            .map_err(|e| DartError::format("checkpoint", e.to_string()))?;
        let mut state = TrainState::new(&cfg);
        let need = |name: &str| -> Result<&[f64]> {
            ckpt.tensor(name)
                .ok_or_else(|| DartError::format("checkpoint", format!("missing tensor {name}")))
        };
        state.scorer.w1 = need("scorer.w1")?.to_vec();
        state.scorer.b1 = need("scorer.b1")?.to_vec();
        state.scorer.w2 = need("scorer.w2")?.to_vec();
        state.scorer.b2 = need("scorer.b2")?[0];
        state.projection.weights = need("projection.w")?.to_vec();
        state.projection.bias = need("projection.b")?.to_vec();
        let pe = need("pos_embed")?.to_vec();
        state.pos_embed = PosEmbedMap::new(state.pos_embed.grid(), state.pos_embed.dim(), pe)?;
        state.head.weights = need("head.w")?.to_vec();
        state.head.bias = need("head.b")?.to_vec();
        state.momentum.scorer_w1 = need("momentum.scorer.w1")?.to_vec();
        state.momentum.scorer_b1 = need("momentum.scorer.b1")?.to_vec();
        state.momentum.scorer_w2 = need("momentum.scorer.w2")?.to_vec();
        state.momentum.scorer_b2 = need("momentum.scorer.b2")?[0];
        state.momentum.proj_w = need("momentum.projection.w")?.to_vec();
        state.momentum.proj_b = need("momentum.projection.b")?.to_vec();
        state.momentum.pe = need("momentum.pos_embed")?.to_vec();
        state.momentum.head_w = need("momentum.head.w")?.to_vec();
        state.momentum.head_b = need("momentum.head.b")?.to_vec();
        state.seed = ckpt.meta["seed"].as_u64().unwrap_or(0);
        state.epoch = ckpt.meta["epoch"].as_u64().unwrap_or(0) as usize;
        state.step = ckpt.meta["step"].as_u64().unwrap_or(0) as usize;
        Ok(state)
    }
}

// --- gradient check suite ---

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradcheckEntry {
    pub leaf: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub entries: Vec<GradcheckEntry>,
    pub pass: bool,
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Finite-difference verification of every reverse pass at a small, fixed
/// configuration: per-stage checks at 1e-5, whole-pipeline checks at 1e-3.
pub fn gradcheck_all(seed: u64) -> Result<GradcheckReport> {
    let mut entries = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // stage: quantiles
    {
        let mut max_err: f64 = 0.0;
        let mut done = 0;
        while done < 20 {
            let n = rng.gen_range(2..=12);
            let k = rng.gen_range(2..=n);
            let masses: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..10.0)).collect();
            let d = PiecewiseDistribution::new(masses.clone())?;
            let q = d.uniform_quantiles(k)?;
            if q.points().iter().any(|p| (p - p.round()).abs() < 1e-4) {
                continue;
            }
            done += 1;
            let jac = d.quantile_jacobian(k, MassMode::Free)?;
            let h = 1e-6;
            for i in 0..n {
                let mut plus = masses.clone();
                plus[i] += h;
                let mut minus = masses.clone();
                minus[i] -= h;
                let qp = PiecewiseDistribution::new(plus)?.uniform_quantiles(k)?;
                let qm = PiecewiseDistribution::new(minus)?.uniform_quantiles(k)?;
                for r in 0..k - 1 {
                    let fd = (qp.points()[r] - qm.points()[r]) / (2.0 * h);
                    max_err = max_err.max(rel_err(jac.at(r, i), fd));
                }
            }
        }
        push_entry(&mut entries, "quantile-jacobian", max_err, 1e-5);
    }

    // stage: score normalization
    {
        let vals: Vec<f64> = (0..64).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let raw = RawScoreMap::new(8, 8, vals.clone())?;
        let (_, tape) = normalize_scores_tape(&raw)?;
        let upstream: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let analytic = tape.vjp(&upstream);
        let h = 1e-6;
        let mut max_err: f64 = 0.0;
        for i in 0..64 {
            let mut plus = vals.clone();
            plus[i] += h;
            let mut minus = vals.clone();
            minus[i] -= h;
            let sp = normalize_scores(&RawScoreMap::new(8, 8, plus)?)?;
            let sm = normalize_scores(&RawScoreMap::new(8, 8, minus)?)?;
            let fd: f64 = sp
                .values()
                .iter()
                .zip(sm.values())
                .zip(&upstream)
                .map(|((p, m), u)| u * (p - m) / (2.0 * h))
                .sum();
            max_err = max_err.max(rel_err(analytic[i], fd));
        }
        push_entry(&mut entries, "normalize-scores", max_err, 1e-5);
    }

    // stage: bilinear resampling, rect and pixel derivatives
    {
        let img = Image::from_fn(8, 8, 1, |_, _, _| rng.gen_range(-1.0..1.0));
        let rect = Rect::new(0.83, 6.21, 1.17, 5.64)?;
        let p = 4;
        let upstream: Vec<f64> = (0..p * p).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let grad = resample_vjp_rect(&img, &rect, p, &upstream)?;
        let h = 1e-6;
        let loss = |r: &Rect, img: &Image| -> f64 {
            resample_patch(img, r, p)
                .unwrap()
                .values
                .iter()
                .zip(&upstream)
                .map(|(v, u)| v * u)
                .sum()
        };
        let mut max_err: f64 = 0.0;
        for idx in 0..4 {
            let mut rp = rect;
            let mut rm = rect;
            match idx {
                0 => {
                    rp.x0 += h;
                    rm.x0 -= h;
                }
                1 => {
                    rp.x1 += h;
                    rm.x1 -= h;
                }
                2 => {
                    rp.y0 += h;
                    rm.y0 -= h;
                }
                _ => {
                    rp.y1 += h;
                    rm.y1 -= h;
                }
            }
            let analytic = [grad.x0, grad.x1, grad.y0, grad.y1][idx];
            let fd = (loss(&rp, &img) - loss(&rm, &img)) / (2.0 * h);
            max_err = max_err.max(rel_err(analytic, fd));
        }
        push_entry(&mut entries, "resample-rect", max_err, 1e-5);

        let mut grad_img = Image::zeros(8, 8, 1);
        resample_vjp_pixels(&img, &rect, p, &upstream, &mut grad_img)?;
        let mut max_err: f64 = 0.0;
        for (y, x) in [(1usize, 1usize), (3, 4), (6, 2), (5, 5)] {
            let mut ip = img.clone();
            ip.set(y, x, 0, img.get(y, x, 0) + h);
            let mut im = img.clone();
            im.set(y, x, 0, img.get(y, x, 0) - h);
            let fd = (loss(&rect, &ip) - loss(&rect, &im)) / (2.0 * h);
            let a = grad_img.get(y, x, 0);
            if a.abs().max(fd.abs()) > 1e-9 {
                max_err = max_err.max(rel_err(a, fd));
            }
        }
        push_entry(&mut entries, "resample-pixels", max_err, 1e-5);
    }

    // stage: positional embedding resampling
    {
        let g = 4;
        let d = 6;
        let data: Vec<f64> = (0..g * g * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let pe = PosEmbedMap::new(g, d, data.clone())?;
        let rect = Rect::new(0.4, 3.1, 0.9, 3.7)?;
        let upstream: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut grid_grad = vec![0.0; data.len()];
        let rect_grad = posembed_vjp(&pe, &rect, 2, &upstream, &mut grid_grad)?;
        let h = 1e-6;
        let loss = |pe: &PosEmbedMap, rect: &Rect| -> f64 {
            resample_posembed(pe, rect, 2)
                .unwrap()
                .iter()
                .zip(&upstream)
                .map(|(v, u)| v * u)
                .sum()
        };
        let mut max_err: f64 = 0.0;
        let mut rp = rect;
        rp.y1 += h;
        let mut rm = rect;
        rm.y1 -= h;
        let fd = (loss(&pe, &rp) - loss(&pe, &rm)) / (2.0 * h);
        max_err = max_err.max(rel_err(rect_grad.y1, fd));
        for idx in [0usize, 33, 71] {
            let mut dp = data.clone();
            dp[idx] += h;
            let mut dm = data.clone();
            dm[idx] -= h;
            let fd = (loss(&PosEmbedMap::new(g, d, dp)?, &rect)
                - loss(&PosEmbedMap::new(g, d, dm)?, &rect))
                / (2.0 * h);
            if grid_grad[idx].abs().max(fd.abs()) > 1e-9 {
                max_err = max_err.max(rel_err(grid_grad[idx], fd));
            }
        }
        push_entry(&mut entries, "posembed", max_err, 1e-5);
    }

    // whole pipeline at 32x32, R=C=4, p=4, D=8
    {
        let img = Image::from_fn(32, 32, 3, |_, _, _| rng.gen_range(0.0..1.0));
        let proj = ProjectionWeights::seeded(8, 48, seed ^ 1);
        let pe_data: Vec<f64> = (0..4 * 4 * 8).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let pe = PosEmbedMap::new(4, 8, pe_data.clone())?;
        let upstream: Vec<f64> = (0..16 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let h = 1e-5;

        let mk_cfg = |scorer: Scorer| TokenizerConfig {
            rows: 4,
            cols: 4,
            patch: 4,
            dim: 8,
            mode: PartitionMode::Irregular,
            scorer,
            pe_samples: 2,
            resize: None,
            score_grid: None,
        };
        let loss_with =
            |cfg: &TokenizerConfig, proj: &ProjectionWeights, pe: &PosEmbedMap| -> Result<f64> {
                let (batch, _) = tokenize(&img, cfg, proj, pe)?;
                Ok(batch.tokens.iter().zip(&upstream).map(|(t, u)| t * u).sum())
            };

        // leaf: raw scores (external scorer)
        let raw_vals: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cfg = mk_cfg(Scorer::External(RawScoreMap::new(8, 8, raw_vals.clone())?));
        let (_, tape) = tokenize(&img, &cfg, &proj, &pe)?;
        let grads = tape.backward(&upstream, &cfg, &proj, &pe)?;
        let d_raw = grads.raw_scores.clone().expect("irregular mode");
        let mut max_err: f64 = 0.0;
        for i in 0..64 {
            let mut plus = raw_vals.clone();
            plus[i] += h;
            let mut minus = raw_vals.clone();
            minus[i] -= h;
            let lp = loss_with(
                &mk_cfg(Scorer::External(RawScoreMap::new(8, 8, plus)?)),
                &proj,
                &pe,
            )?;
            let lm = loss_with(
                &mk_cfg(Scorer::External(RawScoreMap::new(8, 8, minus)?)),
                &proj,
                &pe,
            )?;
            let fd = (lp - lm) / (2.0 * h);
            if d_raw[i].abs().max(fd.abs()) > 1e-7 {
                max_err = max_err.max(rel_err(d_raw[i], fd));
            }
        }
        push_entry(&mut entries, "pipeline-scores", max_err, 1e-3);

        // zero upstream gives zero gradients everywhere
        let zeros = vec![0.0; 16 * 8];
        let zg = tape.backward(&zeros, &cfg, &proj, &pe)?;
        let all_zero = zg.projection_w.iter().all(|&g| g == 0.0)
            && zg.projection_b.iter().all(|&g| g == 0.0)
            && zg.pos_embed.iter().all(|&g| g == 0.0)
            && zg
                .raw_scores
                .map(|g| g.iter().all(|&v| v == 0.0))
                .unwrap_or(false);
        push_entry(
            &mut entries,
            "zero-upstream",
            if all_zero { 0.0 } else { 1.0 },
            1e-12,
        );

        // leaf: scorer weights (learnable scorer)
        let weights = CellMlpWeights::seeded(6, 8, seed ^ 2);
        let cfg_mlp = mk_cfg(Scorer::CellMlp(weights.clone()));
        let (_, tape_mlp) = tokenize(&img, &cfg_mlp, &proj, &pe)?;
        let g_mlp = tape_mlp.backward(&upstream, &cfg_mlp, &proj, &pe)?;
        let sg = g_mlp.scorer.expect("mlp scorer");
        let mut max_err: f64 = 0.0;
        {
            let mut check = |edit: &dyn Fn(&mut CellMlpWeights, f64), analytic: f64| -> Result<()> {
                let mut wp = weights.clone();
                edit(&mut wp, h);
                let mut wm = weights.clone();
                edit(&mut wm, -h);
                let lp = loss_with(&mk_cfg(Scorer::CellMlp(wp)), &proj, &pe)?;
                let lm = loss_with(&mk_cfg(Scorer::CellMlp(wm)), &proj, &pe)?;
                let fd = (lp - lm) / (2.0 * h);
                if analytic.abs().max(fd.abs()) > 1e-7 {
                    max_err = max_err.max(rel_err(analytic, fd));
                }
                Ok(())
            };
            for idx in 0..weights.w1.len() {
                check(&|w, d| w.w1[idx] += d, sg.w1[idx])?;
            }
            for idx in 0..weights.w2.len() {
                check(&|w, d| w.w2[idx] += d, sg.w2[idx])?;
                check(&|w, d| w.b1[idx] += d, sg.b1[idx])?;
            }
            check(&|w, d| w.b2 += d, sg.b2)?;
        }
        push_entry(&mut entries, "pipeline-scorer-weights", max_err, 1e-3);

        // leaf: projection
        let mut max_err: f64 = 0.0;
        for idx in (0..proj.weights.len()).step_by(7) {
            let mut pp = proj.clone();
            pp.weights[idx] += h;
            let mut pm = proj.clone();
            pm.weights[idx] -= h;
            let fd = (loss_with(&cfg, &pp, &pe)? - loss_with(&cfg, &pm, &pe)?) / (2.0 * h);
            if grads.projection_w[idx].abs().max(fd.abs()) > 1e-7 {
                max_err = max_err.max(rel_err(grads.projection_w[idx], fd));
            }
        }
        for idx in 0..proj.bias.len() {
            let mut pp = proj.clone();
            pp.bias[idx] += h;
            let mut pm = proj.clone();
            pm.bias[idx] -= h;
            let fd = (loss_with(&cfg, &pp, &pe)? - loss_with(&cfg, &pm, &pe)?) / (2.0 * h);
            max_err = max_err.max(rel_err(grads.projection_b[idx], fd));
        }
        push_entry(&mut entries, "pipeline-projection", max_err, 1e-3);

        // leaf: positional embeddings
        let mut max_err: f64 = 0.0;
        for idx in (0..pe_data.len()).step_by(3) {
            let mut dp = pe_data.clone();
            dp[idx] += h;
            let mut dm = pe_data.clone();
            dm[idx] -= h;
            let fd = (loss_with(&cfg, &proj, &PosEmbedMap::new(4, 8, dp)?)?
                - loss_with(&cfg, &proj, &PosEmbedMap::new(4, 8, dm)?)?)
                / (2.0 * h);
            if grads.pos_embed[idx].abs().max(fd.abs()) > 1e-7 {
                max_err = max_err.max(rel_err(grads.pos_embed[idx], fd));
            }
        }
        push_entry(&mut entries, "pipeline-posembed", max_err, 1e-3);
    }

    let pass = entries.iter().all(|e| e.pass);
    Ok(GradcheckReport {
        seed,
        entries,
        pass,
    })
}

fn push_entry(entries: &mut Vec<GradcheckEntry>, leaf: &str, max_rel_err: f64, tolerance: f64) {
    entries.push(GradcheckEntry {
        leaf: leaf.to_string(),
        max_rel_err,
        tolerance,
        pass: max_rel_err <= tolerance,
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_synth() -> SynthConfig {
        SynthConfig {
            canvas: 56,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn datasets_are_deterministic_and_balanced() {
        let cfg = small_synth();
        let a = gen_dataset(&cfg, 42, 100).unwrap();
        let b = gen_dataset(&cfg, 42, 100).unwrap();
        assert_eq!(a.len(), 100);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.label, y.label);
            assert_eq!(x.bbox, y.bbox);
            assert_eq!(x.canvas.data(), y.canvas.data());
        }
        let mut hist = vec![0usize; cfg.classes];
        for s in &a {
            hist[s.label] += 1;
        }
        let min = *hist.iter().min().unwrap();
        let max = *hist.iter().max().unwrap();
        assert!(max - min <= 1, "{hist:?}");
        // constructive area bound
        for s in &a {
            let (_, _, h, w) = s.bbox;
            assert!((h * w) as f64 / (cfg.canvas * cfg.canvas) as f64 <= 0.12);
        }
    }

    #[test]
    fn glyph_too_large_is_rejected() {
        let cfg = SynthConfig {
            canvas: 20,
            glyph: 14,
            ..SynthConfig::default()
        };
        assert!(gen_dataset(&cfg, 0, 4).is_err());
    }

    #[test]
    fn initial_loss_near_log_classes() {
        let cfg = TrainConfig {
            epochs: 0,
            n_train: 20,
            n_test: 40,
            synth: small_synth(),
            ..TrainConfig::default()
        };
        let report = train(&cfg).unwrap();
        let expect = (cfg.synth.classes as f64).ln();
        assert!(
            (report.initial_test.0 - expect).abs() / expect < 0.1,
            "initial loss {} vs ln(L) {expect}",
            report.initial_test.0
        );
    }

    #[test]
    fn short_training_decreases_loss_and_is_seeded() {
        let cfg = TrainConfig {
            epochs: 3,
            n_train: 96,
            n_test: 32,
            synth: small_synth(),
            ..TrainConfig::default()
        };
        let a = train(&cfg).unwrap();
        assert!(!a.diverged);
        let train_losses: Vec<f64> = a
            .history
            .iter()
            .filter(|m| m.split == "train")
            .map(|m| m.loss)
            .collect();
        assert_eq!(train_losses.len(), 3);
        assert!(
            train_losses[1] <= train_losses[0] && train_losses[2] <= train_losses[1],
            "{train_losses:?}"
        );
        let b = train(&cfg).unwrap();
        for (x, y) in a.history.iter().zip(&b.history) {
            assert_eq!(x.loss, y.loss);
            assert_eq!(x.accuracy, y.accuracy);
        }
    }

    #[test]
    fn threaded_training_matches_single_thread() {
        let base = TrainConfig {
            epochs: 1,
            n_train: 24,
            n_test: 8,
            batch: 8,
            synth: small_synth(),
            ..TrainConfig::default()
        };
        let a = train(&base).unwrap();
        let threaded = TrainConfig { threads: 3, ..base };
        let b = train(&threaded).unwrap();
        for (x, y) in a.history.iter().zip(&b.history) {
            assert_eq!(x.loss, y.loss);
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let cfg = TrainConfig {
            epochs: 1,
            n_train: 16,
            n_test: 8,
            batch: 8,
            synth: small_synth(),
            ..TrainConfig::default()
        };
        let report = train(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.ckpt");
        report.state.to_checkpoint(&cfg).write(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], b"DARTCKP1");
        let back = TrainState::from_checkpoint(&Checkpoint::read(&path).unwrap()).unwrap();
        assert_eq!(back.scorer, report.state.scorer);
        assert_eq!(back.projection, report.state.projection);
        assert_eq!(back.pos_embed, report.state.pos_embed);
        assert_eq!(back.head, report.state.head);
        assert_eq!(back.epoch, 1);
    }

    #[test]
    fn metrics_csv_has_expected_shape() {
        let history = vec![
            EpochMetrics {
                epoch: 1,
                split: "train".into(),
                loss: 2.0,
                accuracy: 0.25,
            },
            EpochMetrics {
                epoch: 1,
                split: "test".into(),
                loss: 2.1,
                accuracy: 0.2,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        write_metrics_csv(&path, &history).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "epoch,split,loss,accuracy");
        assert_eq!(lines.len(), 3);
    }

    #[test]
    fn gradcheck_all_passes_and_is_deterministic() {
        let a = gradcheck_all(7).unwrap();
        assert!(a.pass, "{:#?}", a.entries);
        let b = gradcheck_all(7).unwrap();
        for (x, y) in a.entries.iter().zip(&b.entries) {
            assert_eq!(x.max_rel_err, y.max_rel_err);
        }
    }
}
