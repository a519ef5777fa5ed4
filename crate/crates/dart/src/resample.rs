//! Differentiable bilinear resampling of image regions to fixed-size patches,
//! positional-embedding resampling, and regular-grid stitch-back.
//!
//! Sampling conventions: pixel `i`'s center is at `i + 0.5`; a patch of size
//! `p` samples the rect at cell centers `x0 + (a + 0.5) * (x1 - x0) / p`;
//! samples beyond the border clamp to the nearest pixel. These choices make a
//! rect aligned to an integer pixel block an exact copy, which the uniform
//! degeneracy guarantee depends on. Derivatives at bilinear kinks take the
//! right-hand segment, mirroring the quantile convention.

use crate::error::{DartError, Result};
use crate::image::Image;
use crate::partition::{Partition, PartitionMode};

/// Axis-aligned region in image coordinates, pixel `i` occupying `[i, i+1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, x1: f64, y0: f64, y1: f64) -> Result<Self> {
        let r = Rect { x0, x1, y0, y1 };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.x0.is_finite()
            && self.x1.is_finite()
            && self.y0.is_finite()
            && self.y1.is_finite()
            && self.x0 < self.x1
            && self.y0 < self.y1;
        if ok {
            Ok(())
        } else {
            Err(DartError::DegenerateRect {
                x0: self.x0,
                x1: self.x1,
                y0: self.y0,
                y1: self.y1,
            })
        }
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    /// Rescale by independent x/y factors (e.g. image to embedding grid).
    pub fn scaled(&self, sx: f64, sy: f64) -> Rect {
        Rect {
            x0: self.x0 * sx,
            x1: self.x1 * sx,
            y0: self.y0 * sy,
            y1: self.y1 * sy,
        }
    }
}

/// Fixed-size resampled patch together with its source region.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchTensor {
    pub values: Vec<f64>,
    pub size: usize,
    pub channels: usize,
    pub source: Rect,
}

/// Gradient of a scalar loss with respect to a rect's four coordinates.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RectGrad {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl RectGrad {
    pub fn scaled(&self, sx: f64, sy: f64) -> RectGrad {
        RectGrad {
            x0: self.x0 * sx,
            x1: self.x1 * sx,
            y0: self.y0 * sy,
            y1: self.y1 * sy,
        }
    }

    pub fn add(&mut self, other: &RectGrad) {
        self.x0 += other.x0;
        self.x1 += other.x1;
        self.y0 += other.y0;
        self.y1 += other.y1;
    }
}

#[derive(Debug, Clone, Copy)]
struct Taps {
    i0: usize,
    i1: usize,
    t: f64,
}

/// Clamped bilinear taps along one axis of length `n` at continuous
/// coordinate `u` (pixel centers at i + 0.5).
#[inline]
fn axis_taps(u: f64, n: usize) -> Taps {
    let f = u - 0.5;
    let i = f.floor();
    let t = f - i;
    let i = i as isize;
    let clamp = |v: isize| v.clamp(0, n as isize - 1) as usize;
    Taps {
        i0: clamp(i),
        i1: clamp(i + 1),
        t,
    }
}

/// Resample `rect` of `img` to an `out_h x out_w` grid of bilinear samples.
pub fn resample_region(img: &Image, rect: &Rect, out_h: usize, out_w: usize) -> Result<Image> {
    rect.validate()?;
    if out_h == 0 || out_w == 0 {
        return Err(DartError::invalid("output size", "zero dimension"));
    }
    let ch = img.channels();
    let (h, w) = (img.height(), img.width());
    let mut out = Image::zeros(out_h, out_w, ch);
    for b in 0..out_h {
        let v = rect.y0 + (b as f64 + 0.5) * rect.height() / out_h as f64;
        let ty = axis_taps(v, h);
        for a in 0..out_w {
            let u = rect.x0 + (a as f64 + 0.5) * rect.width() / out_w as f64;
            let tx = axis_taps(u, w);
            for c in 0..ch {
                let v00 = img.get(ty.i0, tx.i0, c);
                let v01 = img.get(ty.i0, tx.i1, c);
                let v10 = img.get(ty.i1, tx.i0, c);
                let v11 = img.get(ty.i1, tx.i1, c);
                let top = v00 + (v01 - v00) * tx.t;
                let bot = v10 + (v11 - v10) * tx.t;
                out.set(b, a, c, top + (bot - top) * ty.t);
            }
        }
    }
    Ok(out)
}

/// Resample a region to a square `p x p` patch.
pub fn resample_patch(img: &Image, rect: &Rect, p: usize) -> Result<PatchTensor> {
    let out = resample_region(img, rect, p, p)?;
    Ok(PatchTensor {
        values: out.data().to_vec(),
        size: p,
        channels: img.channels(),
        source: *rect,
    })
}

/// Pull an upstream gradient on the patch values back to the rect
/// coordinates.
pub fn resample_vjp_rect(
    img: &Image,
    rect: &Rect,
    p: usize,
    upstream: &[f64],
) -> Result<RectGrad> {
    rect.validate()?;
    let ch = img.channels();
    if upstream.len() != p * p * ch {
        return Err(DartError::DimMismatch {
            what: "patch upstream",
            expected: (p * p * ch).to_string(),
            actual: upstream.len().to_string(),
        });
    }
    let (h, w) = (img.height(), img.width());
    let mut grad = RectGrad::default();
    for b in 0..p {
        let fy = (b as f64 + 0.5) / p as f64;
        let v = rect.y0 + fy * rect.height();
        let ty = axis_taps(v, h);
        for a in 0..p {
            let fx = (a as f64 + 0.5) / p as f64;
            let u = rect.x0 + fx * rect.width();
            let tx = axis_taps(u, w);
            for c in 0..ch {
                let up = upstream[(b * p + a) * ch + c];
                if up == 0.0 {
                    continue;
                }
                let v00 = img.get(ty.i0, tx.i0, c);
                let v01 = img.get(ty.i0, tx.i1, c);
                let v10 = img.get(ty.i1, tx.i0, c);
                let v11 = img.get(ty.i1, tx.i1, c);
                // clamped taps make the slope vanish at the borders
                let dv_du = (v01 - v00) * (1.0 - ty.t) + (v11 - v10) * ty.t;
                let dv_dv = (v10 - v00) * (1.0 - tx.t) + (v11 - v01) * tx.t;
                grad.x0 += up * dv_du * (1.0 - fx);
                grad.x1 += up * dv_du * fx;
                grad.y0 += up * dv_dv * (1.0 - fy);
                grad.y1 += up * dv_dv * fy;
            }
        }
    }
    Ok(grad)
}

/// Accumulate an upstream gradient on the patch values into a pixel-gradient
/// buffer shaped like the source image.
pub fn resample_vjp_pixels(
    img: &Image,
    rect: &Rect,
    p: usize,
    upstream: &[f64],
    grad: &mut Image,
) -> Result<()> {
    rect.validate()?;
    let ch = img.channels();
    if upstream.len() != p * p * ch {
        return Err(DartError::DimMismatch {
            what: "patch upstream",
            expected: (p * p * ch).to_string(),
            actual: upstream.len().to_string(),
        });
    }
    if grad.height() != img.height() || grad.width() != img.width() || grad.channels() != ch {
        return Err(DartError::DimMismatch {
            what: "pixel gradient buffer",
            expected: format!("{}x{}x{}", img.height(), img.width(), ch),
            actual: format!("{}x{}x{}", grad.height(), grad.width(), grad.channels()),
        });
    }
    let (h, w) = (img.height(), img.width());
    for b in 0..p {
        let v = rect.y0 + (b as f64 + 0.5) * rect.height() / p as f64;
        let ty = axis_taps(v, h);
        for a in 0..p {
            let u = rect.x0 + (a as f64 + 0.5) * rect.width() / p as f64;
            let tx = axis_taps(u, w);
            for c in 0..ch {
                let up = upstream[(b * p + a) * ch + c];
                if up == 0.0 {
                    continue;
                }
                grad.set(
                    ty.i0,
                    tx.i0,
                    c,
                    grad.get(ty.i0, tx.i0, c) + up * (1.0 - ty.t) * (1.0 - tx.t),
                );
                grad.set(
                    ty.i0,
                    tx.i1,
                    c,
                    grad.get(ty.i0, tx.i1, c) + up * (1.0 - ty.t) * tx.t,
                );
                grad.set(
                    ty.i1,
                    tx.i0,
                    c,
                    grad.get(ty.i1, tx.i0, c) + up * ty.t * (1.0 - tx.t),
                );
                grad.set(
                    ty.i1,
                    tx.i1,
                    c,
                    grad.get(ty.i1, tx.i1, c) + up * ty.t * tx.t,
                );
            }
        }
    }
    Ok(())
}

/// Base positional embeddings laid out on a G x G spatial grid, D channels.
#[derive(Debug, Clone, PartialEq)]
pub struct PosEmbedMap {
    grid: usize,
    dim: usize,
    data: Vec<f64>,
}

impl PosEmbedMap {
    pub fn new(grid: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if grid == 0 || dim == 0 || data.len() != grid * grid * dim {
            return Err(DartError::DimMismatch {
                what: "positional embedding grid",
                expected: format!("{grid}x{grid}x{dim}"),
                actual: data.len().to_string(),
            });
        }
        Ok(Self { grid, dim, data })
    }

    pub fn zeros(grid: usize, dim: usize) -> Self {
        Self {
            grid,
            dim,
            data: vec![0.0; grid * grid * dim],
        }
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, gy: usize, gx: usize, d: usize) -> f64 {
        self.data[(gy * self.grid + gx) * self.dim + d]
    }

    fn as_image(&self) -> Image {
        Image::new(self.grid, self.grid, self.dim, self.data.clone())
            .expect("validated at construction")
    }
}

/// Average of `q x q` bilinear samples of the embedding grid inside `rect`
/// (rect already expressed in grid units, i.e. within `[0, G]^2`).
pub fn resample_posembed(pe: &PosEmbedMap, rect: &Rect, q: usize) -> Result<Vec<f64>> {
    if q == 0 {
        return Err(DartError::invalid("posembed samples", "0"));
    }
    let samples = resample_region(&pe.as_image(), rect, q, q)?;
    let mut out = vec![0.0; pe.dim];
    for chunk in samples.data().chunks_exact(pe.dim) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    let inv = 1.0 / (q * q) as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    Ok(out)
}

/// Reverse pass of [`resample_posembed`]: rect gradient plus accumulation
/// into a grid-gradient buffer laid out like the embedding data.
pub fn posembed_vjp(
    pe: &PosEmbedMap,
    rect: &Rect,
    q: usize,
    upstream: &[f64],
    grid_grad: &mut [f64],
) -> Result<RectGrad> {
    if upstream.len() != pe.dim || grid_grad.len() != pe.data.len() {
        return Err(DartError::DimMismatch {
            what: "posembed upstream",
            expected: format!("{} / {}", pe.dim, pe.data.len()),
            actual: format!("{} / {}", upstream.len(), grid_grad.len()),
        });
    }
    let img = pe.as_image();
    // every sample contributes upstream / q^2 to each channel
    let inv = 1.0 / (q * q) as f64;
    let mut per_sample = Vec::with_capacity(q * q * pe.dim);
    for _ in 0..q * q {
        per_sample.extend(upstream.iter().map(|u| u * inv));
    }
    let rect_grad = resample_vjp_rect(&img, rect, q, &per_sample)?;
    let mut grad_img = Image::zeros(pe.grid, pe.grid, pe.dim);
    resample_vjp_pixels(&img, rect, q, &per_sample, &mut grad_img)?;
    for (g, v) in grid_grad.iter_mut().zip(grad_img.data()) {
        *g += v;
    }
    Ok(rect_grad)
}

/// Reassemble regular-mode patches into an `(R*p) x (C*p)` image for
/// grid-based backbones.
pub fn stitch_regular(partition: &Partition, patches: &[PatchTensor], p: usize) -> Result<Image> {
    if partition.mode() != PartitionMode::Regular {
        return Err(DartError::IrregularStitch);
    }
    let (rows, cols) = (partition.rows(), partition.cols());
    if patches.len() != rows * cols {
        return Err(DartError::DimMismatch {
            what: "patch count",
            expected: (rows * cols).to_string(),
            actual: patches.len().to_string(),
        });
    }
    let ch = patches[0].channels;
    let mut out = Image::zeros(rows * p, cols * p, ch);
    for r in 0..rows {
        for c in 0..cols {
            let patch = &patches[r * cols + c];
            if patch.size != p || patch.channels != ch {
                return Err(DartError::DimMismatch {
                    what: "patch shape",
                    expected: format!("{p}x{p}x{ch}"),
                    actual: format!("{}x{}x{}", patch.size, patch.size, patch.channels),
                });
            }
            for y in 0..p {
                for x in 0..p {
                    for k in 0..ch {
                        out.set(
                            r * p + y,
                            c * p + x,
                            k,
                            patch.values[(y * p + x) * ch + k],
                        );
                    }
                }
            }
        }
    }
    Ok(out)
}
