//! Finite-difference checks for every differentiable op and the full tiny
//! model, run in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cloudsim::{CloudGenConfig, generate_mask};
use crate::dataio::{TileSample, DEFAULT_MSI_DAYS, DEFAULT_SAR_DAYS, N_MSI_BANDS, N_SAR_BANDS, T_MSI, T_SAR};
use crate::error::Result;
use crate::objective::{mse_node, multi_scale_loss_node, multi_scale_loss_scaled, sam_node, LossConfig, ScaledTargets};
use crate::tensor::{analytic_grads, max_rel_error, numeric_grad, Graph, Tensor, Var};
use crate::vit::{forward_packed, pack_input, target_for, ModelParams, Variant, ViTConfig};

pub const TOLERANCE: f64 = 1e-3;
/// Central-difference step for the op checks. At 1e-3 the truncation error of
/// arccos-based losses exceeds the tolerance on small gradient elements.
pub const EPS: f64 = 1e-4;
/// Step for the full-model check.
pub const MODEL_EPS: f64 = 1e-4;

/// Outcome of one check.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub n_checked: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

/// `corrupt` multiplies every analytic gradient before comparison; `1.0` is a
/// faithful check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SuiteOptions {
    pub seed: u64,
    pub corrupt: f64,
    /// Finite-difference step for the full-model check.
    pub model_eps: f64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self { seed: 0, corrupt: 1.0, model_eps: MODEL_EPS }
    }
}

type Fun = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + Sync;

fn check(name: &str, f: &Fun, xs: &[Tensor<f64>], opts: SuiteOptions) -> Result<CheckResult> {
    let (_, grads) = analytic_grads(f, xs)?;
    let mut worst = 0.0f64;
    let mut n = 0;
    for (i, a) in grads.iter().enumerate() {
        let a = a.map(|v| v * opts.corrupt);
        let num = numeric_grad(f, xs, i, EPS)?;
        worst = worst.max(max_rel_error(&a, &num));
        n += a.numel();
    }
    Ok(CheckResult { name: name.to_string(), max_rel_err: worst, n_checked: n })
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Weighted sum `Σ w⊙y` so every output element carries a distinct cotangent.
fn project(g: &mut Graph<f64>, y: Var, w: &Tensor<f64>) -> Result<Var> {
    let wv = g.constant(w.clone());
    let p = g.mul(y, wv)?;
    Ok(g.sum(p))
}

fn proj_for(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    rand_t(rng, shape, -1.0, 1.0)
}

/// Checks of the individual tape operations on random small shapes.
pub fn op_checks(opts: SuiteOptions) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut out = Vec::new();
    let (m, k, n) = (rng.gen_range(2..5), rng.gen_range(2..6), rng.gen_range(2..5));

    let w = proj_for(&mut rng, &[m, n]);
    let xs = [rand_t(&mut rng, &[m, k], -1.0, 1.0), rand_t(&mut rng, &[k, n], -1.0, 1.0)];
    out.push(check("matmul", &move |g, v| {
        let y = g.matmul(v[0], v[1])?;
        project(g, y, &w)
    }, &xs, opts)?);

    let w = proj_for(&mut rng, &[m, k]);
    let xs = [rand_t(&mut rng, &[m, k], -1.0, 1.0), rand_t(&mut rng, &[m, k], -1.0, 1.0)];
    out.push(check("add_mul", &move |g, v| {
        let s = g.add(v[0], v[1])?;
        let p = g.mul(s, v[1])?;
        let p = g.scale(p, 0.7);
        project(g, p, &w)
    }, &xs, opts)?);

    let w = proj_for(&mut rng, &[m, k]);
    let xs = [rand_t(&mut rng, &[m, k], -1.0, 1.0), rand_t(&mut rng, &[k], -1.0, 1.0)];
    out.push(check("add_bias", &move |g, v| {
        let y = g.add_bias(v[0], v[1])?;
        project(g, y, &w)
    }, &xs, opts)?);

    let w = proj_for(&mut rng, &[k + 2, m]);
    let xs = [rand_t(&mut rng, &[m, k], -1.0, 1.0), rand_t(&mut rng, &[m, 2], -1.0, 1.0)];
    out.push(check("transpose_slice_concat", &move |g, v| {
        let c = g.concat_last(&[v[0], v[1]])?;
        let t = g.transpose2d(c)?;
        let s = g.slice_cols(t, 0, m)?;
        let r = g.reshape(s, &[(k + 2) * m])?;
        let r = g.reshape(r, &[k + 2, m])?;
        project(g, r, &w)
    }, &xs, opts)?);

    let w = proj_for(&mut rng, &[m, k]);
    let xs = [rand_t(&mut rng, &[m, k], -3.0, 3.0)];
    out.push(check("gelu", &move |g, v| {
        let y = g.gelu(v[0]);
        project(g, y, &w)
    }, &xs, opts)?);

    let w = proj_for(&mut rng, &[m, 7]);
    let xs = [rand_t(&mut rng, &[m, 7], -2.0, 2.0)];
    out.push(check("softmax_lastdim", &move |g, v| {
        let y = g.softmax_lastdim(v[0]);
        project(g, y, &w)
    }, &xs, opts)?);

    let d = rng.gen_range(3..7);
    let w = proj_for(&mut rng, &[m, d]);
    let xs = [
        rand_t(&mut rng, &[m, d], -2.0, 2.0),
        rand_t(&mut rng, &[d], 0.5, 1.5),
        rand_t(&mut rng, &[d], -0.5, 0.5),
    ];
    out.push(check("layer_norm", &move |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
        project(g, y, &w)
    }, &xs, opts)?);

    let (b, c, dd, kk) = (rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..4));
    let stride = rng.gen_range(1..3);
    let hw = rng.gen_range(kk..kk + 5);
    let ho = (hw - kk) / stride + 1;
    let w = proj_for(&mut rng, &[b, dd, ho, ho]);
    let xs = [
        rand_t(&mut rng, &[b, c, hw, hw], -1.0, 1.0),
        rand_t(&mut rng, &[dd, c, kk, kk], -1.0, 1.0),
        rand_t(&mut rng, &[dd], -1.0, 1.0),
    ];
    out.push(check("conv2d", &move |g, v| {
        let y = g.conv2d(v[0], v[1], v[2], stride)?;
        project(g, y, &w)
    }, &xs, opts)?);

    for scale in [0.5, 0.25] {
        let side = rng.gen_range(4..11);
        let os = crate::tensor::kernels::scaled_extent(side, scale);
        let w = proj_for(&mut rng, &[1, 2, os, os]);
        let xs = [rand_t(&mut rng, &[1, 2, side, side], -1.0, 1.0)];
        out.push(check(&format!("bilinear_resize@{scale}"), &move |g, v| {
            let y = g.bilinear_resize(v[0], scale)?;
            project(g, y, &w)
        }, &xs, opts)?);
    }

    // Losses over 2 frames of 11 bands; positive spectra keep cosines away from 1.
    let side = 4;
    let target = rand_t(&mut rng, &[22, side, side], 0.05, 1.0);
    let mut valid = Tensor::<f64>::full([2, side, side], 1.0);
    valid.data_mut()[3] = 0.0;
    valid.data_mut()[side * side + 5] = 0.0;
    let pred = [rand_t(&mut rng, &[22, side, side], 0.05, 1.0)];
    let (t1, v1) = (target.clone(), valid.clone());
    out.push(check("mse_loss", &move |g, v| mse_node(g, v[0], &t1, &v1), &pred, opts)?);
    let (t2, v2) = (target.clone(), valid.clone());
    out.push(check("sam_loss", &move |g, v| sam_node(g, v[0], &t2, &v2, 1e-8), &pred, opts)?);
    let side = 8;
    let target = rand_t(&mut rng, &[22, side, side], 0.05, 1.0);
    let valid = Tensor::<f64>::from_fn([2, side, side], |i| if i % 7 == 3 { 0.0 } else { 1.0 });
    let pred = [rand_t(&mut rng, &[22, side, side], 0.05, 1.0)];
    out.push(check("multi_scale_loss", &move |g, v| {
        Ok(multi_scale_loss_node(g, v[0], &target, &valid, &LossConfig::default())?.0)
    }, &pred, opts)?);
    Ok(out)
}

/// The tiny configuration used for the end-to-end check.
pub fn tiny_config(variant: Variant) -> ViTConfig {
    ViTConfig { variant, patch: 5, depth: 2, heads: 2, dim: 16, mlp_ratio: 4.0, include_mask_channels: true, image_size: 10 }
}

fn tiny_sample(rng: &mut ChaCha8Rng, size: usize) -> TileSample {
    let mut r = |shape: [usize; 4]| Tensor::from_fn(shape, |_| rng.gen_range(0.05f32..0.6));
    let msi = r([T_MSI, N_MSI_BANDS, size, size]);
    let sar = r([T_SAR, N_SAR_BANDS, size, size]);
    TileSample {
        scene_id: "gradcheck".into(),
        row: 0,
        col: 0,
        msi,
        sar,
        real_cloud: Tensor::zeros([T_MSI, size, size]),
        msi_days: DEFAULT_MSI_DAYS.to_vec(),
        sar_days: DEFAULT_SAR_DAYS.to_vec(),
    }
}

type ModelFun = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + Send + Sync>;

/// Loss closure, inputs and parameter-tensor count of the full-model check.
pub fn model_problem(seed: u64) -> Result<(ModelFun, Vec<Tensor<f64>>, usize)> {
    let cfg = tiny_config(Variant::SmtsVit);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let sample = tiny_sample(&mut rng, cfg.image_size);
    let mask = generate_mask(&CloudGenConfig { n_clouds: 4, seed, ..Default::default() }, T_MSI, 10, 10)?;
    let x = pack_input(&sample, &mask, &cfg, None)?.cast::<f64>();
    let (target, valid) = target_for(&sample, &cfg, None)?;
    let loss_cfg = LossConfig::default();
    let targets = ScaledTargets::new(&target.cast::<f64>(), &valid.cast::<f64>(), &loss_cfg)?;
    let params = ModelParams::<f64>::init(&cfg, seed)?;
    let n_params = params.tensors().len();
    // random positional table so the zero init does not hide its gradient path
    let mut xs: Vec<Tensor<f64>> = params.tensors().to_vec();
    xs[2] = rand_t(&mut rng, xs[2].shape(), -0.1, 0.1);
    xs.push(x);
    let f = move |g: &mut Graph<f64>, v: &[Var]| -> Result<Var> {
        let pv = crate::vit::ParamVars::from_vars(v[..n_params].to_vec(), cfg.depth);
        let y = forward_packed(g, v[n_params], &pv, &cfg)?;
        Ok(multi_scale_loss_scaled(g, y, &targets, &loss_cfg)?.0)
    };
    Ok((Box::new(f), xs, n_params))
}

/// Multi-scale loss of the tiny SMTS model with respect to every parameter tensor.
pub fn model_check(opts: SuiteOptions) -> Result<CheckResult> {
    let (f, xs, n_params) = model_problem(opts.seed)?;
    let (_, grads) = analytic_grads(&*f, &xs)?;
    let mut worst = 0.0f64;
    let mut n = 0;
    for (i, a) in grads.iter().enumerate().take(n_params) {
        let a = a.map(|v| v * opts.corrupt);
        let num = numeric_grad(&*f, &xs, i, opts.model_eps)?;
        let e = max_rel_error(&a, &num);
        worst = worst.max(e);
        n += a.numel();
    }
    Ok(CheckResult { name: "smts_vit_tiny".into(), max_rel_err: worst, n_checked: n })
}

/// Every op check followed by the full-model check.
pub fn run_suite(opts: SuiteOptions) -> Result<Vec<CheckResult>> {
    let mut out = op_checks(opts)?;
    out.push(model_check(opts)?);
    Ok(out)
}
