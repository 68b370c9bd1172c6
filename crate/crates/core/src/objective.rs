//! Masked MSE, spectral angle, and their multi-scale weighted sum.
//!
//! Predictions are `(T·C)×H×W` stacks of `T` frames with `C` bands each; the
//! validity mask is `T×H×W` with 1 on supervised pixels.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::kernels::bilinear_resize;
use crate::tensor::{CustomOp, Graph, Real, Tensor, Var};

/// Smallest `1 − cos²` used in the arccos derivative.
const SAM_GRAD_FLOOR: f64 = 1.0 - (1.0 - 1e-7) * (1.0 - 1e-7);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub scales: Vec<f64>,
    pub w_mse: f64,
    pub w_sam: f64,
    pub sam_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { scales: vec![1.0, 0.5, 0.25], w_mse: 0.5, w_sam: 0.5, sam_eps: 1e-8 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::InvalidArgument("loss scales list is empty".into()));
        }
        for (i, &s) in self.scales.iter().enumerate() {
            if !(s > 0.0 && s <= 1.0) {
                return Err(Error::InvalidArgument(format!("loss scale {s} outside (0, 1]")));
            }
            if self.scales[..i].contains(&s) {
                return Err(Error::InvalidArgument(format!("duplicate loss scale {s}")));
            }
        }
        if !(self.sam_eps > 0.0) || !self.w_mse.is_finite() || !self.w_sam.is_finite() {
            return Err(Error::InvalidArgument(format!("invalid loss weights or eps: {self:?}")));
        }
        Ok(())
    }
}

/// `(frames, bands, pixels)` of a prediction against its validity mask.
fn layout<F: Real>(pred: &Tensor<F>, target: &Tensor<F>, valid: &Tensor<F>) -> Result<(usize, usize, usize)> {
    if pred.shape() != target.shape() {
        return Err(shape_err!("prediction {:?} vs target {:?}", pred.shape(), target.shape()));
    }
    let (ps, vs) = (pred.shape(), valid.shape());
    if ps.len() != 3 || vs.len() != 3 || ps[1..] != vs[1..] || vs[0] == 0 || ps[0] % vs[0] != 0 {
        return Err(shape_err!("prediction {:?} incompatible with validity mask {:?}", ps, vs));
    }
    Ok((vs[0], ps[0] / vs[0], vs[1] * vs[2]))
}

/// `Σ valid·(p−t)² / (Σ valid · C)`, or 0 with no valid pixel.
pub fn mse_loss<F: Real>(pred: &Tensor<F>, target: &Tensor<F>, valid: &Tensor<F>) -> Result<f64> {
    let (t, c, hw) = layout(pred, target, valid)?;
    Ok(mse_parts(pred.data(), target.data(), valid.data(), t, c, hw).0)
}

fn mse_parts<F: Real>(p: &[F], q: &[F], valid: &[F], t: usize, c: usize, hw: usize) -> (f64, f64) {
    let mut num = 0.0f64;
    let mut count = 0.0f64;
    for ti in 0..t {
        for px in 0..hw {
            let v = valid[ti * hw + px].as_f64();
            if v == 0.0 {
                continue;
            }
            count += v;
            for ci in 0..c {
                let i = (ti * c + ci) * hw + px;
                let d = p[i].as_f64() - q[i].as_f64();
                num += v * d * d;
            }
        }
    }
    let denom = count * c as f64;
    if denom == 0.0 {
        (0.0, 0.0)
    } else {
        (num / denom, denom)
    }
}

/// Mean spectral angle in radians over valid `(frame, pixel)` positions.
pub fn sam_loss<F: Real>(pred: &Tensor<F>, target: &Tensor<F>, valid: &Tensor<F>, eps: f64) -> Result<f64> {
    let (t, c, hw) = layout(pred, target, valid)?;
    Ok(sam_forward(pred.data(), target.data(), valid.data(), t, c, hw, eps))
}

struct Spectra {
    dot: f64,
    np: f64,
    nt: f64,
}

fn spectra<F: Real>(p: &[F], q: &[F], ti: usize, px: usize, c: usize, hw: usize) -> Spectra {
    let (mut dot, mut pp, mut qq) = (0.0f64, 0.0f64, 0.0f64);
    for ci in 0..c {
        let i = (ti * c + ci) * hw + px;
        let (a, b) = (p[i].as_f64(), q[i].as_f64());
        dot += a * b;
        pp += a * a;
        qq += b * b;
    }
    Spectra { dot, np: pp.sqrt(), nt: qq.sqrt() }
}

/// Angle between two spectra; `2·atan2(‖p̂−t̂‖, ‖p̂+t̂‖)` away from zero vectors,
/// which stays exact for parallel inputs where `acos` loses precision.
fn spectral_angle<F: Real>(p: &[F], q: &[F], ti: usize, px: usize, c: usize, hw: usize, eps: f64) -> f64 {
    let s = spectra(p, q, ti, px, c, hw);
    if s.np * s.nt <= eps {
        return (s.dot / eps).clamp(-1.0, 1.0).acos();
    }
    let (mut diff, mut sum) = (0.0f64, 0.0f64);
    for ci in 0..c {
        let i = (ti * c + ci) * hw + px;
        let (a, b) = (p[i].as_f64() / s.np, q[i].as_f64() / s.nt);
        diff += (a - b) * (a - b);
        sum += (a + b) * (a + b);
    }
    2.0 * diff.sqrt().atan2(sum.sqrt())
}

fn sam_forward<F: Real>(p: &[F], q: &[F], valid: &[F], t: usize, c: usize, hw: usize, eps: f64) -> f64 {
    let mut sum = 0.0f64;
    let mut count = 0.0f64;
    for ti in 0..t {
        for px in 0..hw {
            let v = valid[ti * hw + px].as_f64();
            if v == 0.0 {
                continue;
            }
            sum += v * spectral_angle(p, q, ti, px, c, hw, eps);
            count += v;
        }
    }
    if count == 0.0 {
        0.0
    } else {
        sum / count
    }
}

struct MseOp<F: Real> {
    target: Arc<Tensor<F>>,
    valid: Arc<Tensor<F>>,
    dims: (usize, usize, usize),
}

impl<F: Real> CustomOp<F> for MseOp<F> {
    fn name(&self) -> &str {
        "masked_mse"
    }

    fn forward(&self, input: &Tensor<F>) -> Result<Tensor<F>> {
        let (t, c, hw) = self.dims;
        let (v, _) = mse_parts(input.data(), self.target.data(), self.valid.data(), t, c, hw);
        Ok(Tensor::scalar(F::lit(v)))
    }

    fn backward(&self, input: &Tensor<F>, _output: &Tensor<F>, grad_out: &Tensor<F>) -> Tensor<F> {
        let (t, c, hw) = self.dims;
        let (_, denom) = mse_parts(input.data(), self.target.data(), self.valid.data(), t, c, hw);
        let mut g = vec![F::zero(); input.numel()];
        if denom > 0.0 {
            let k = 2.0 * grad_out.item().as_f64() / denom;
            for ti in 0..t {
                for px in 0..hw {
                    let v = self.valid.data()[ti * hw + px].as_f64();
                    if v == 0.0 {
                        continue;
                    }
                    for ci in 0..c {
                        let i = (ti * c + ci) * hw + px;
                        let d = input.data()[i].as_f64() - self.target.data()[i].as_f64();
                        g[i] = F::lit(k * v * d);
                    }
                }
            }
        }
        Tensor::new(input.shape().to_vec(), g).expect("gradient matches input shape")
    }
}

struct SamOp<F: Real> {
    target: Arc<Tensor<F>>,
    valid: Arc<Tensor<F>>,
    dims: (usize, usize, usize),
    eps: f64,
}

impl<F: Real> CustomOp<F> for SamOp<F> {
    fn name(&self) -> &str {
        "masked_sam"
    }

    fn forward(&self, input: &Tensor<F>) -> Result<Tensor<F>> {
        let (t, c, hw) = self.dims;
        let v = sam_forward(input.data(), self.target.data(), self.valid.data(), t, c, hw, self.eps);
        Ok(Tensor::scalar(F::lit(v)))
    }

    fn backward(&self, input: &Tensor<F>, _output: &Tensor<F>, grad_out: &Tensor<F>) -> Tensor<F> {
        let (t, c, hw) = self.dims;
        let (p, q, valid) = (input.data(), self.target.data(), self.valid.data());
        let count: f64 = valid.iter().map(|v| v.as_f64()).sum();
        let mut g = vec![F::zero(); input.numel()];
        if count == 0.0 {
            return Tensor::new(input.shape().to_vec(), g).expect("gradient matches input shape");
        }
        let go = grad_out.item().as_f64() / count;
        for ti in 0..t {
            for px in 0..hw {
                let v = valid[ti * hw + px].as_f64();
                if v == 0.0 {
                    continue;
                }
                let s = spectra(p, q, ti, px, c, hw);
                let denom = s.np * s.nt;
                let guarded = denom <= self.eps;
                let cos = s.dot / denom.max(self.eps);
                let dacos = -1.0 / (1.0 - cos * cos).max(SAM_GRAD_FLOOR).sqrt();
                for ci in 0..c {
                    let i = (ti * c + ci) * hw + px;
                    let (a, b) = (p[i].as_f64(), q[i].as_f64());
                    let dcos = if guarded { b / self.eps } else { b / denom - cos * a / (s.np * s.np) };
                    g[i] = F::lit(go * v * dacos * dcos);
                }
            }
        }
        Tensor::new(input.shape().to_vec(), g).expect("gradient matches input shape")
    }
}

/// Records the masked MSE of `pred` against a fixed target.
pub fn mse_node<F: Real>(g: &mut Graph<F>, pred: Var, target: &Tensor<F>, valid: &Tensor<F>) -> Result<Var> {
    mse_node_shared(g, pred, Arc::new(target.clone()), Arc::new(valid.clone()))
}

fn mse_node_shared<F: Real>(g: &mut Graph<F>, pred: Var, target: Arc<Tensor<F>>, valid: Arc<Tensor<F>>) -> Result<Var> {
    let dims = layout(g.value(pred), &target, &valid)?;
    g.custom(pred, Box::new(MseOp { target, valid, dims }))
}

/// Records the mean spectral angle of `pred` against a fixed target.
pub fn sam_node<F: Real>(g: &mut Graph<F>, pred: Var, target: &Tensor<F>, valid: &Tensor<F>, eps: f64) -> Result<Var> {
    sam_node_shared(g, pred, Arc::new(target.clone()), Arc::new(valid.clone()), eps)
}

fn sam_node_shared<F: Real>(
    g: &mut Graph<F>,
    pred: Var,
    target: Arc<Tensor<F>>,
    valid: Arc<Tensor<F>>,
    eps: f64,
) -> Result<Var> {
    let dims = layout(g.value(pred), &target, &valid)?;
    g.custom(pred, Box::new(SamOp { target, valid, dims, eps }))
}

/// Unweighted term values at one scale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScaleTerms {
    pub scale: f64,
    pub mse: f64,
    pub sam: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub per_scale: Vec<ScaleTerms>,
}

impl LossTerms {
    pub fn mse_sum(&self) -> f64 {
        self.per_scale.iter().map(|s| s.mse).sum()
    }

    pub fn sam_sum(&self) -> f64 {
        self.per_scale.iter().map(|s| s.sam).sum()
    }
}

fn resize3<F: Real>(x: &Tensor<F>, scale: f64) -> Result<Tensor<F>> {
    let s = x.shape().to_vec();
    let r = bilinear_resize(&x.clone().reshape([1, s[0], s[1], s[2]])?, scale)?;
    let rs = r.shape().to_vec();
    r.reshape([rs[1], rs[2], rs[3]])
}

/// Target and validity mask resampled once per loss scale, reusable across steps.
#[derive(Clone, Debug)]
pub struct ScaledTargets<F: Real> {
    shape: Vec<usize>,
    levels: Vec<(f64, Arc<Tensor<F>>, Arc<Tensor<F>>)>,
}

impl<F: Real> ScaledTargets<F> {
    pub fn new(target: &Tensor<F>, valid: &Tensor<F>, cfg: &LossConfig) -> Result<Self> {
        cfg.validate()?;
        layout(target, target, valid)?;
        let mut levels = Vec::with_capacity(cfg.scales.len());
        for &s in &cfg.scales {
            let (t_s, v_s) = if s == 1.0 {
                (target.clone(), valid.clone())
            } else {
                let v_s = resize3(valid, s)?.map(|v| if v >= F::lit(0.5) { F::one() } else { F::zero() });
                (resize3(target, s)?, v_s)
            };
            levels.push((s, Arc::new(t_s), Arc::new(v_s)));
        }
        Ok(Self { shape: target.shape().to_vec(), levels })
    }

    pub fn scales(&self) -> impl Iterator<Item = f64> + '_ {
        self.levels.iter().map(|l| l.0)
    }
}

/// Builds `Σ_s w_mse·mse_s + w_sam·sam_s` on the tape.
pub fn multi_scale_loss_node<F: Real>(
    g: &mut Graph<F>,
    pred: Var,
    target: &Tensor<F>,
    valid: &Tensor<F>,
    cfg: &LossConfig,
) -> Result<(Var, LossTerms)> {
    let targets = ScaledTargets::new(target, valid, cfg)?;
    multi_scale_loss_scaled(g, pred, &targets, cfg)
}

/// [`multi_scale_loss_node`] against targets already resampled for `cfg.scales`.
pub fn multi_scale_loss_scaled<F: Real>(
    g: &mut Graph<F>,
    pred: Var,
    targets: &ScaledTargets<F>,
    cfg: &LossConfig,
) -> Result<(Var, LossTerms)> {
    if !targets.scales().eq(cfg.scales.iter().copied()) {
        return Err(Error::InvalidArgument(format!("targets prepared for other scales than {:?}", cfg.scales)));
    }
    let ps = g.value(pred).shape().to_vec();
    if ps != targets.shape {
        return Err(shape_err!("prediction {:?} vs target {:?}", ps, targets.shape));
    }
    let pred4 = g.reshape(pred, &[1, ps[0], ps[1], ps[2]])?;
    let mut total: Option<Var> = None;
    let mut per_scale = Vec::with_capacity(cfg.scales.len());
    for (s, t_s, v_s) in &targets.levels {
        let p_s = if *s == 1.0 {
            pred
        } else {
            let r = g.bilinear_resize(pred4, *s)?;
            let rs = g.value(r).shape().to_vec();
            g.reshape(r, &[rs[1], rs[2], rs[3]])?
        };
        let mse = mse_node_shared(g, p_s, t_s.clone(), v_s.clone())?;
        let sam = sam_node_shared(g, p_s, t_s.clone(), v_s.clone(), cfg.sam_eps)?;
        per_scale.push(ScaleTerms { scale: *s, mse: g.value(mse).item().as_f64(), sam: g.value(sam).item().as_f64() });
        let wm = g.scale(mse, F::lit(cfg.w_mse));
        let ws = g.scale(sam, F::lit(cfg.w_sam));
        let term = g.add(wm, ws)?;
        total = Some(match total {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    let total = total.expect("scales validated non-empty");
    let terms = LossTerms { total: g.value(total).item().as_f64(), per_scale };
    Ok((total, terms))
}

/// Value-only multi-scale loss.
pub fn multi_scale_loss<F: Real>(pred: &Tensor<F>, target: &Tensor<F>, valid: &Tensor<F>, cfg: &LossConfig) -> Result<LossTerms> {
    let mut g = Graph::new();
    let p = g.constant(pred.clone());
    Ok(multi_scale_loss_node(&mut g, p, target, valid, cfg)?.1)
}
