//! Binary cloud masks and the Gaussian-smoothed noise cloud generator.
//!
//! A mask value of 1 marks cloud at `(t, y, x)` for every channel of frame `t`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Real,
    Synthetic,
    Union,
}

/// Binary occlusion mask `T×H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct CloudMask {
    mask: Tensor,
    provenance: Provenance,
}

impl CloudMask {
    pub fn new(mask: Tensor, provenance: Provenance) -> Result<Self> {
        if mask.ndim() != 3 {
            return Err(shape_err!("cloud mask must be T×H×W, got {:?}", mask.shape()));
        }
        if let Some(v) = mask.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidArgument(format!("cloud mask must be binary, found {v}")));
        }
        Ok(Self { mask, provenance })
    }

    pub fn zeros(t: usize, h: usize, w: usize, provenance: Provenance) -> Self {
        Self { mask: Tensor::zeros([t, h, w]), provenance }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.mask
    }

    pub fn into_tensor(self) -> Tensor {
        self.mask
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.mask.shape();
        [s[0], s[1], s[2]]
    }

    /// Mean over `T×H×W`.
    pub fn coverage(&self) -> f64 {
        coverage(self)
    }

    pub fn frame_coverage(&self, t: usize) -> f64 {
        let [_, h, w] = self.shape();
        let plane = &self.mask.data()[t * h * w..(t + 1) * h * w];
        plane.iter().map(|&v| v as f64).sum::<f64>() / (h * w) as f64
    }

    pub fn is_set(&self, t: usize, y: usize, x: usize) -> bool {
        self.mask.at(&[t, y, x]) != 0.0
    }
}

/// Parameters of the synthetic cloud generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CloudGenConfig {
    pub n_clouds: usize,
    /// Base footprint scale as a fraction of `min(H, W)`.
    pub cloud_size: f64,
    /// Gaussian sigma relative to the footprint radius.
    pub blur_sigma: f64,
    pub threshold_quantile: f64,
    /// Footprint radius is uniform in `[radius_min, radius_max] · cloud_size · min(H, W)`.
    pub radius_min: f64,
    pub radius_max: f64,
    pub seed: u64,
}

impl Default for CloudGenConfig {
    fn default() -> Self {
        Self {
            n_clouds: 10,
            cloud_size: 0.3,
            blur_sigma: 0.35,
            threshold_quantile: 0.5,
            radius_min: 1.0,
            radius_max: 2.0,
            seed: 0,
        }
    }
}

impl CloudGenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.cloud_size > 0.0 && self.cloud_size <= 1.0) {
            return bad(format!("cloud_size must lie in (0, 1], got {}", self.cloud_size));
        }
        if !(self.blur_sigma > 0.0) || !self.blur_sigma.is_finite() {
            return bad(format!("blur_sigma must be positive, got {}", self.blur_sigma));
        }
        if !(self.threshold_quantile > 0.0 && self.threshold_quantile < 1.0) {
            return bad(format!("threshold_quantile must lie in (0, 1), got {}", self.threshold_quantile));
        }
        if !(self.radius_min > 0.0 && self.radius_max >= self.radius_min && self.radius_max.is_finite()) {
            return bad(format!("invalid radius range [{}, {}]", self.radius_min, self.radius_max));
        }
        Ok(())
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let half = (3.0 * sigma).ceil().max(1.0) as isize;
    let k: Vec<f64> = (-half..=half).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with zero padding on an `h×w` field.
fn blur(field: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let half = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, &kv) in k.iter().enumerate() {
                let xx = x as isize + j as isize - half;
                if xx >= 0 && (xx as usize) < w {
                    acc += kv * field[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, &kv) in k.iter().enumerate() {
                let yy = y as isize + j as isize - half;
                if yy >= 0 && (yy as usize) < h {
                    acc += kv * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// One sampled blob, exposed for containment checks.
#[derive(Clone, Debug, PartialEq)]
pub struct CloudBlob {
    pub frame: usize,
    pub center_y: f64,
    pub center_x: f64,
    pub radius: f64,
    /// Pixels `(y, x)` set by this blob.
    pub pixels: Vec<(usize, usize)>,
}

fn in_disk(y: usize, x: usize, cy: f64, cx: f64, r: f64) -> bool {
    let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
    dy * dy + dx * dx <= r * r
}

/// Draws the blobs for `cfg` without rasterizing them into a mask.
pub fn sample_blobs(cfg: &CloudGenConfig, t: usize, h: usize, w: usize) -> Result<Vec<CloudBlob>> {
    cfg.validate()?;
    if h < 8 || w < 8 || t == 0 {
        return Err(Error::InvalidArgument(format!("cloud masks need T ≥ 1 and H, W ≥ 8, got {t}x{h}x{w}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let s = cfg.cloud_size * h.min(w) as f64;
    let mut blobs = Vec::with_capacity(cfg.n_clouds);
    for _ in 0..cfg.n_clouds {
        let frame = rng.gen_range(0..t);
        let cy = rng.gen::<f64>() * h as f64;
        let cx = rng.gen::<f64>() * w as f64;
        let r = s * (cfg.radius_min + (cfg.radius_max - cfg.radius_min) * rng.gen::<f64>());
        let y0 = (cy - r).floor().max(0.0) as usize;
        let y1 = ((cy + r).ceil() as usize).min(h);
        let x0 = (cx - r).floor().max(0.0) as usize;
        let x1 = ((cx + r).ceil() as usize).min(w);
        let (bh, bw) = (y1 - y0, x1 - x0);
        let noise: Vec<f64> = (0..bh * bw).map(|_| rng.sample(StandardNormal)).collect();
        let smooth = blur(&noise, bh, bw, cfg.blur_sigma * r);
        let mut inside: Vec<f64> = Vec::new();
        for by in 0..bh {
            for bx in 0..bw {
                if in_disk(y0 + by, x0 + bx, cy, cx, r) {
                    inside.push(smooth[by * bw + bx]);
                }
            }
        }
        let mut pixels = Vec::new();
        if !inside.is_empty() {
            inside.sort_by(f64::total_cmp);
            let idx = (cfg.threshold_quantile * (inside.len() - 1) as f64).floor() as usize;
            let thresh = inside[idx];
            for by in 0..bh {
                for bx in 0..bw {
                    let (y, x) = (y0 + by, x0 + bx);
                    if in_disk(y, x, cy, cx, r) && smooth[by * bw + bx] > thresh {
                        pixels.push((y, x));
                    }
                }
            }
        }
        blobs.push(CloudBlob { frame, center_y: cy, center_x: cx, radius: r, pixels });
    }
    Ok(blobs)
}

/// Synthetic mask of `n_clouds` thresholded noise blobs, each on one frame.
pub fn generate_mask(cfg: &CloudGenConfig, t: usize, h: usize, w: usize) -> Result<CloudMask> {
    let blobs = sample_blobs(cfg, t, h, w)?;
    let mut data = vec![0.0f32; t * h * w];
    for b in &blobs {
        for &(y, x) in &b.pixels {
            data[(b.frame * h + y) * w + x] = 1.0;
        }
    }
    Ok(CloudMask { mask: Tensor::new([t, h, w], data)?, provenance: Provenance::Synthetic })
}

/// `x(t,c,y,x) · (1 − m(t,y,x))`; unmasked values are copied unchanged.
pub fn apply_mask(x: &Tensor, m: &CloudMask) -> Result<Tensor> {
    let [t, h, w] = m.shape();
    if x.ndim() != 4 || x.shape()[0] != t || x.shape()[2] != h || x.shape()[3] != w {
        return Err(shape_err!("apply_mask: data {:?} vs mask {:?}", x.shape(), m.mask.shape()));
    }
    let c = x.shape()[1];
    let hw = h * w;
    let mut out = x.data().to_vec();
    for ti in 0..t {
        let plane = &m.mask.data()[ti * hw..(ti + 1) * hw];
        for ci in 0..c {
            let base = (ti * c + ci) * hw;
            for (p, &mv) in plane.iter().enumerate() {
                if mv != 0.0 {
                    out[base + p] = 0.0;
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub fn coverage(m: &CloudMask) -> f64 {
    m.mask.data().iter().map(|&v| v as f64).sum::<f64>() / m.mask.numel() as f64
}

/// Elementwise OR.
pub fn union(a: &CloudMask, b: &CloudMask) -> Result<CloudMask> {
    if a.mask.shape() != b.mask.shape() {
        return Err(shape_err!("union: {:?} vs {:?}", a.mask.shape(), b.mask.shape()));
    }
    let data = a
        .mask
        .data()
        .iter()
        .zip(b.mask.data())
        .map(|(&x, &y)| if x != 0.0 || y != 0.0 { 1.0 } else { 0.0 })
        .collect();
    Ok(CloudMask { mask: Tensor::new(a.mask.shape().to_vec(), data)?, provenance: Provenance::Union })
}
