//! Time-series vision transformer: channel-time packing, convolutional patch
//! projection, pre-norm multi-head self-attention blocks and a linear patch
//! decoder.

use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cloudsim::{apply_mask, CloudMask};
use crate::dataio::{TileSample, N_MSI_BANDS, N_SAR_BANDS, T_MSI, T_SAR};
use crate::error::{shape_err, Error, Result};
use crate::tensor::io::{load_checkpoint, save_checkpoint};
use crate::tensor::{Graph, Real, Tensor, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    SVit,
    MtsVit,
    SmtsVit,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::SVit, Variant::MtsVit, Variant::SmtsVit];

    pub fn is_time_series(self) -> bool {
        self != Variant::SVit
    }

    /// Identifier used in file names and CSV rows.
    pub fn key(self) -> &'static str {
        match self {
            Variant::SVit => "s_vit",
            Variant::MtsVit => "mts_vit",
            Variant::SmtsVit => "smts_vit",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "s_vit" | "svit" => Ok(Variant::SVit),
            "mts_vit" | "mtsvit" => Ok(Variant::MtsVit),
            "smts_vit" | "smtsvit" => Ok(Variant::SmtsVit),
            _ => Err(Error::InvalidArgument(format!("unknown variant {s:?}"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::SVit => "S-ViT",
            Variant::MtsVit => "MTS-ViT",
            Variant::SmtsVit => "SMTS-ViT",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ViTConfig {
    pub variant: Variant,
    pub patch: usize,
    pub depth: usize,
    pub heads: usize,
    pub dim: usize,
    pub mlp_ratio: f64,
    pub include_mask_channels: bool,
    pub image_size: usize,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            variant: Variant::SmtsVit,
            patch: 5,
            depth: 6,
            heads: 8,
            dim: 64,
            mlp_ratio: 4.0,
            include_mask_channels: true,
            image_size: 60,
        }
    }
}

impl ViTConfig {
    pub fn with_variant(variant: Variant) -> Self {
        Self { variant, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch == 0 || self.depth == 0 || self.heads == 0 || self.dim == 0 || self.image_size == 0 {
            return bad(format!("vit extents must be positive: {self:?}"));
        }
        if self.dim % self.heads != 0 {
            return bad(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if self.image_size % self.patch != 0 {
            return bad(format!("image_size {} not divisible by patch {}", self.image_size, self.patch));
        }
        if !(self.mlp_ratio > 0.0) || self.hidden() == 0 {
            return bad(format!("mlp_ratio must give a positive hidden width, got {}", self.mlp_ratio));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn n_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn hidden(&self) -> usize {
        (self.dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// MSI frames consumed per forward pass.
    pub fn frames_in(&self) -> usize {
        if self.variant.is_time_series() {
            T_MSI
        } else {
            1
        }
    }

    pub fn output_channels(&self) -> usize {
        self.frames_in() * N_MSI_BANDS
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

/// Packed input channels `C′`.
pub fn input_channels(cfg: &ViTConfig) -> usize {
    let data = match cfg.variant {
        Variant::SVit => N_MSI_BANDS,
        Variant::MtsVit => T_MSI * N_MSI_BANDS,
        Variant::SmtsVit => T_MSI * N_MSI_BANDS + T_SAR * N_SAR_BANDS,
    };
    data + if cfg.include_mask_channels { cfg.frames_in() } else { 0 }
}

/// Concatenates masked MSI, SAR (SMTS only) and mask planes into `C′×H×W`.
///
/// `frame` selects the single MSI frame for S-ViT and must be `None` otherwise.
pub fn pack_input(sample: &TileSample, mask: &CloudMask, cfg: &ViTConfig, frame: Option<usize>) -> Result<Tensor> {
    let [t, h, w] = mask.shape();
    let ms = sample.msi.shape();
    if ms != [t, N_MSI_BANDS, h, w] || t != T_MSI {
        return Err(shape_err!("sample msi {:?} vs mask {:?}", ms, mask.tensor().shape()));
    }
    if h != cfg.image_size || w != cfg.image_size {
        return Err(shape_err!("tile is {}x{}, model expects {}", h, w, cfg.image_size));
    }
    let frames: Vec<usize> = match (cfg.variant.is_time_series(), frame) {
        (true, None) => (0..t).collect(),
        (false, Some(f)) if f < t => vec![f],
        (false, Some(f)) => return Err(Error::InvalidArgument(format!("frame {f} out of range for {t} frames"))),
        (true, Some(_)) => return Err(Error::InvalidArgument("time-series variants take every frame".into())),
        (false, None) => return Err(Error::InvalidArgument("S-ViT needs a frame index".into())),
    };
    let masked = apply_mask(&sample.msi, mask)?;
    let hw = h * w;
    let band_block = N_MSI_BANDS * hw;
    let mut data = Vec::with_capacity(input_channels(cfg) * hw);
    for &f in &frames {
        data.extend_from_slice(&masked.data()[f * band_block..(f + 1) * band_block]);
    }
    if cfg.variant == Variant::SmtsVit {
        if sample.sar.shape() != [T_SAR, N_SAR_BANDS, h, w] {
            return Err(shape_err!("sample sar {:?} must be [{}, {}, {}, {}]", sample.sar.shape(), T_SAR, N_SAR_BANDS, h, w));
        }
        data.extend_from_slice(sample.sar.data());
    }
    if cfg.include_mask_channels {
        for &f in &frames {
            data.extend_from_slice(&mask.tensor().data()[f * hw..(f + 1) * hw]);
        }
    }
    Tensor::new([input_channels(cfg), h, w], data)
}

/// Target stack and validity mask for one forward pass.
pub fn target_for(sample: &TileSample, cfg: &ViTConfig, frame: Option<usize>) -> Result<(Tensor, Tensor)> {
    let h = sample.size();
    let valid = sample.validity();
    match (cfg.variant.is_time_series(), frame) {
        (true, None) => Ok((sample.msi.clone().reshape([T_MSI * N_MSI_BANDS, h, h])?, valid)),
        (false, Some(f)) => Ok((sample.msi.index_axis0(f)?, valid.index_axis0(f)?.reshape([1, h, h])?)),
        _ => Err(Error::InvalidArgument("frame index must be given exactly for S-ViT".into())),
    }
}

/// Per-block parameter slots, in storage order.
pub const BLOCK_PARAMS: [&str; 12] = [
    "ln1.gain", "ln1.shift", "attn.qkv.weight", "attn.qkv.bias", "attn.out.weight", "attn.out.bias", "ln2.gain",
    "ln2.shift", "mlp.fc1.weight", "mlp.fc1.bias", "mlp.fc2.weight", "mlp.fc2.bias",
];
const HEAD_PARAMS: usize = 3;

/// Model weights in a fixed order: patch kernel, patch bias, positional
/// table, `depth` blocks of [`BLOCK_PARAMS`], decoder weight, decoder bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<F: Real = f32> {
    pub cfg: ViTConfig,
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
}

fn shapes(cfg: &ViTConfig) -> Vec<(String, Vec<usize>)> {
    let (d, p, hid) = (cfg.dim, cfg.patch, cfg.hidden());
    let mut out = vec![
        ("patch.kernel".to_string(), vec![d, input_channels(cfg), p, p]),
        ("patch.bias".to_string(), vec![d]),
        ("pos".to_string(), vec![cfg.n_tokens(), d]),
    ];
    for b in 0..cfg.depth {
        let s: [Vec<usize>; 12] = [
            vec![d],
            vec![d],
            vec![d, 3 * d],
            vec![3 * d],
            vec![d, d],
            vec![d],
            vec![d],
            vec![d],
            vec![d, hid],
            vec![hid],
            vec![hid, d],
            vec![d],
        ];
        for (name, shape) in BLOCK_PARAMS.iter().zip(s) {
            out.push((format!("blocks.{b}.{name}"), shape));
        }
    }
    out.push(("decoder.weight".to_string(), vec![d, p * p * cfg.output_channels()]));
    out.push(("decoder.bias".to_string(), vec![p * p * cfg.output_channels()]));
    out
}

/// Number of scalar parameters implied by `cfg`.
pub fn param_count(cfg: &ViTConfig) -> usize {
    shapes(cfg).iter().map(|(_, s)| s.iter().product::<usize>()).sum()
}

impl<F: Real> ModelParams<F> {
    /// Linear and convolution weights and biases uniform in `±√(1/fan_in)`;
    /// norm gains 1, shifts 0, positional table 0.
    pub fn init(cfg: &ViTConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let patch_fan = input_channels(cfg) * cfg.patch * cfg.patch;
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape) in shapes(cfg) {
            let fan_in = if name.starts_with("patch.") {
                Some(patch_fan)
            } else if name.ends_with(".weight") {
                Some(shape[0])
            } else if name.ends_with(".bias") {
                // fan-in of the weight stored just before
                tensors.last().map(|w: &Tensor<F>| w.shape()[0])
            } else {
                None
            };
            let t = match fan_in {
                Some(fan) => {
                    let bound = (1.0 / fan as f64).sqrt();
                    Tensor::from_fn(shape, |_| F::lit(rng.gen_range(-bound..bound)))
                }
                None if name.ends_with(".gain") => Tensor::full(shape, F::one()),
                None => Tensor::zeros(shape),
            };
            names.push(name);
            tensors.push(t);
        }
        Ok(Self { cfg: cfg.clone(), names, tensors })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.tensors[i])
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.all_finite())
    }

    pub fn cast<G: Real>(&self) -> ModelParams<G> {
        ModelParams { cfg: self.cfg.clone(), names: self.names.clone(), tensors: self.tensors.iter().map(|t| t.cast()).collect() }
    }

    /// Registers every tensor on `g`; trainable ones record gradients.
    pub fn register(&self, g: &mut Graph<F>, trainable: bool) -> ParamVars {
        ParamVars {
            vars: self
                .tensors
                .iter()
                .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
                .collect(),
            depth: self.cfg.depth,
        }
    }
}

/// Graph handles of a registered [`ModelParams`], in the same order.
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub vars: Vec<Var>,
    depth: usize,
}

impl ParamVars {
    /// Wraps handles registered in [`ModelParams`] order.
    pub fn from_vars(vars: Vec<Var>, depth: usize) -> Self {
        Self { vars, depth }
    }

    fn block(&self, b: usize) -> &[Var] {
        assert!(b < self.depth);
        let start = HEAD_PARAMS + b * BLOCK_PARAMS.len();
        &self.vars[start..start + BLOCK_PARAMS.len()]
    }

    fn decoder(&self) -> (Var, Var) {
        let n = self.vars.len();
        (self.vars[n - 2], self.vars[n - 1])
    }
}

/// Patch tokens `N×dim`: strided convolution, row-major flatten, plus positions.
pub fn cpp_embed<F: Real>(g: &mut Graph<F>, x: Var, pv: &ParamVars, cfg: &ViTConfig) -> Result<Var> {
    let xs = g.value(x).shape().to_vec();
    let [c, h, w] = xs[..] else {
        return Err(shape_err!("cpp_embed expects C×H×W, got {:?}", xs));
    };
    if h % cfg.patch != 0 || w % cfg.patch != 0 || h != cfg.image_size || w != cfg.image_size {
        return Err(shape_err!("input {}x{} incompatible with patch {} / image {}", h, w, cfg.patch, cfg.image_size));
    }
    let x4 = g.reshape(x, &[1, c, h, w])?;
    let conv = g.conv2d(x4, pv.vars[0], pv.vars[1], cfg.patch)?;
    let n = cfg.n_tokens();
    let flat = g.reshape(conv, &[cfg.dim, n])?;
    let tokens = g.transpose2d(flat)?;
    g.add(tokens, pv.vars[2])
}

fn linear<F: Real>(g: &mut Graph<F>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_bias(y, b)
}

/// Multi-head attention weights `softmax(QKᵀ/√d_h)` for each head, from normalized tokens.
pub fn attention_maps<F: Real>(g: &mut Graph<F>, qkv: Var, cfg: &ViTConfig) -> Result<Vec<(Var, Var)>> {
    let (d, hd) = (cfg.dim, cfg.head_dim());
    let inv = F::lit(1.0 / (hd as f64).sqrt());
    let mut out = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let q = g.slice_cols(qkv, h * hd, hd)?;
        let k = g.slice_cols(qkv, d + h * hd, hd)?;
        let v = g.slice_cols(qkv, 2 * d + h * hd, hd)?;
        let kt = g.transpose2d(k)?;
        let s = g.matmul(q, kt)?;
        let s = g.scale(s, inv);
        let a = g.softmax_lastdim(s);
        out.push((a, v));
    }
    Ok(out)
}

/// `t + MHSA(LN(t))` followed by `t + MLP(LN(t))`.
pub fn encoder_block<F: Real>(g: &mut Graph<F>, t: Var, pv: &ParamVars, b: usize, cfg: &ViTConfig) -> Result<Var> {
    let p = pv.block(b);
    let eps = F::lit(LN_EPS);
    let n1 = g.layer_norm(t, p[0], p[1], eps)?;
    let qkv = linear(g, n1, p[2], p[3])?;
    let mut heads = Vec::with_capacity(cfg.heads);
    for (a, v) in attention_maps(g, qkv, cfg)? {
        heads.push(g.matmul(a, v)?);
    }
    let cat = g.concat_last(&heads)?;
    let proj = linear(g, cat, p[4], p[5])?;
    let t1 = g.add(t, proj)?;
    let n2 = g.layer_norm(t1, p[6], p[7], eps)?;
    let h1 = linear(g, n2, p[8], p[9])?;
    let h1 = g.gelu(h1);
    let h2 = linear(g, h1, p[10], p[11])?;
    g.add(t1, h2)
}

thread_local! {
    static UNPATCHIFY: std::cell::RefCell<Option<((usize, usize, usize), Vec<usize>)>> = const { std::cell::RefCell::new(None) };
}

/// Gather index mapping decoder rows `[N, C·p·p]` to an image `C×H×W`,
/// memoized per thread for the last geometry seen.
fn unpatchify_index(cfg: &ViTConfig) -> Vec<usize> {
    let key = (cfg.patch, cfg.image_size, cfg.output_channels());
    UNPATCHIFY.with(|cell| {
        let mut slot = cell.borrow_mut();
        match &*slot {
            Some((k, idx)) if *k == key => idx.clone(),
            _ => {
                let idx = build_unpatchify_index(cfg);
                *slot = Some((key, idx.clone()));
                idx
            }
        }
    })
}

fn build_unpatchify_index(cfg: &ViTConfig) -> Vec<usize> {
    let (p, gs, c) = (cfg.patch, cfg.grid(), cfg.output_channels());
    let size = cfg.image_size;
    let row = c * p * p;
    let mut idx = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for y in 0..size {
            for x in 0..size {
                let n = (y / p) * gs + x / p;
                idx.push(n * row + ch * p * p + (y % p) * p + x % p);
            }
        }
    }
    idx
}

/// Per-token linear map to a `p×p` patch of every output channel.
pub fn decode<F: Real>(g: &mut Graph<F>, tokens: Var, pv: &ParamVars, cfg: &ViTConfig) -> Result<Var> {
    let (w, b) = pv.decoder();
    let rows = linear(g, tokens, w, b)?;
    let s = cfg.image_size;
    g.gather(rows, unpatchify_index(cfg), &[cfg.output_channels(), s, s])
}

/// Full forward on a packed `C′×H×W` input.
pub fn forward_packed<F: Real>(g: &mut Graph<F>, x: Var, pv: &ParamVars, cfg: &ViTConfig) -> Result<Var> {
    let mut t = cpp_embed(g, x, pv, cfg)?;
    for b in 0..cfg.depth {
        t = encoder_block(g, t, pv, b, cfg)?;
    }
    decode(g, t, pv, cfg)
}

/// Packs `sample` under `mask` and runs the model. Returns `C_out×H×W`.
pub fn forward(params: &ModelParams, sample: &TileSample, mask: &CloudMask, frame: Option<usize>) -> Result<Tensor> {
    let x = pack_input(sample, mask, &params.cfg, frame)?;
    let mut g = Graph::new();
    let pv = params.register(&mut g, false);
    let xv = g.constant(x);
    let y = forward_packed(&mut g, xv, &pv, &params.cfg)?;
    Ok(g.value(y).clone())
}

/// Full `(T·11)×H×W` reconstruction; S-ViT runs once per frame.
pub fn reconstruct(params: &ModelParams, sample: &TileSample, mask: &CloudMask) -> Result<Tensor> {
    if params.cfg.variant.is_time_series() {
        return forward(params, sample, mask, None);
    }
    let t = sample.n_msi_frames();
    let frames = (0..t).map(|f| forward(params, sample, mask, Some(f))).collect::<Result<Vec<_>>>()?;
    let h = sample.size();
    Tensor::stack(&frames)?.reshape([t * N_MSI_BANDS, h, h])
}

/// Writes the parameters with the config and its hash in `index.json`.
pub fn save_params(dir: &Path, params: &ModelParams, extra: serde_json::Value) -> Result<()> {
    let meta = serde_json::json!({
        "config": params.cfg,
        "config_hash": params.cfg.hash(),
        "extra": extra,
    });
    save_checkpoint(dir, params.names.iter().cloned().zip(params.tensors.iter()), meta)
}

/// Loads a checkpoint, refusing a config hash mismatch.
///
/// With `expected` set, the stored config must equal it as well.
pub fn load_params(dir: &Path, expected: Option<&ViTConfig>) -> Result<(ModelParams, serde_json::Value)> {
    let (mut map, meta) = load_checkpoint(dir)?;
    let cfg: ViTConfig = serde_json::from_value(meta["config"].clone())
        .map_err(|e| Error::Format(format!("checkpoint {} has no readable config: {e}", dir.display())))?;
    let stored = meta["config_hash"].as_str().unwrap_or_default();
    if stored != cfg.hash() {
        return Err(Error::Format(format!("checkpoint {} config hash mismatch", dir.display())));
    }
    if let Some(exp) = expected {
        if exp.hash() != stored {
            return Err(Error::Config(format!(
                "checkpoint {} was written for a different model config",
                dir.display()
            )));
        }
    }
    cfg.validate()?;
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for (name, shape) in shapes(&cfg) {
        let t = map
            .remove(&name)
            .ok_or_else(|| Error::Format(format!("checkpoint {} lacks tensor {name}", dir.display())))?;
        if t.shape() != shape.as_slice() {
            return Err(shape_err!("checkpoint tensor {} is {:?}, expected {:?}", name, t.shape(), shape));
        }
        names.push(name);
        tensors.push(t);
    }
    if let Some(extra) = map.keys().next() {
        return Err(Error::Format(format!("checkpoint {} has unexpected tensor {extra}", dir.display())));
    }
    let extra = meta.get("extra").cloned().unwrap_or(serde_json::Value::Null);
    Ok((ModelParams { cfg, names, tensors }, extra))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloudsim::Provenance;

    fn tiny(variant: Variant) -> ViTConfig {
        ViTConfig { variant, patch: 5, depth: 2, heads: 2, dim: 16, mlp_ratio: 2.0, include_mask_channels: true, image_size: 10 }
    }

    fn sample(size: usize) -> TileSample {
        TileSample {
            scene_id: "t".into(),
            row: 0,
            col: 0,
            msi: Tensor::from_fn([T_MSI, 11, size, size], |i| ((i * 31) % 89) as f32 / 89.0),
            sar: Tensor::from_fn([T_SAR, 2, size, size], |i| ((i * 17) % 43) as f32 / 43.0),
            real_cloud: Tensor::zeros([T_MSI, size, size]),
            msi_days: crate::dataio::DEFAULT_MSI_DAYS.to_vec(),
            sar_days: crate::dataio::DEFAULT_SAR_DAYS.to_vec(),
        }
    }

    #[test]
    fn channel_counts() {
        let mut c = ViTConfig::with_variant(Variant::MtsVit);
        c.include_mask_channels = false;
        assert_eq!(input_channels(&c), 66);
        c.variant = Variant::SmtsVit;
        assert_eq!(input_channels(&c), 76);
        c.variant = Variant::SVit;
        assert_eq!(input_channels(&c), 11);
        c.include_mask_channels = true;
        assert_eq!(input_channels(&c), 12);
        c.variant = Variant::MtsVit;
        assert_eq!(input_channels(&c), 72);
        c.variant = Variant::SmtsVit;
        assert_eq!(input_channels(&c), 82);
        assert_eq!(c.n_tokens(), 144);
    }

    #[test]
    fn pack_layout() {
        let cfg = ViTConfig::default();
        let s = sample(60);
        let zero = CloudMask::zeros(6, 60, 60, Provenance::Synthetic);
        let x = pack_input(&s, &zero, &cfg, None).unwrap();
        assert_eq!(x.shape(), &[82, 60, 60]);
        assert_eq!(&x.data()[..66 * 3600], s.msi.data());
        let mut m = Tensor::zeros([6, 60, 60]);
        for v in &mut m.data_mut()[3 * 3600..4 * 3600] {
            *v = 1.0;
        }
        let mask = CloudMask::new(m, Provenance::Synthetic).unwrap();
        let x = pack_input(&s, &mask, &cfg, None).unwrap();
        assert!(x.data()[33 * 3600..44 * 3600].iter().all(|&v| v == 0.0));
        assert!(x.data()[(76 + 3) * 3600..(77 + 3) * 3600].iter().all(|&v| v == 1.0));
        assert!(x.data()[76 * 3600..77 * 3600].iter().all(|&v| v == 0.0));
        assert!(pack_input(&s, &mask, &cfg, Some(0)).is_err());
        let sv = ViTConfig::with_variant(Variant::SVit);
        assert_eq!(pack_input(&s, &mask, &sv, Some(3)).unwrap().shape(), &[12, 60, 60]);
        assert!(pack_input(&s, &mask, &sv, None).is_err());
    }

    #[test]
    fn default_param_count_is_pinned() {
        assert_eq!(param_count(&ViTConfig::default()), 547_634);
        let p = ModelParams::<f32>::init(&ViTConfig::default(), 42).unwrap();
        assert_eq!(p.count(), 547_634);
        assert!(p.all_finite());
    }

    #[test]
    fn init_bounds() {
        let cfg = tiny(Variant::SmtsVit);
        let p = ModelParams::<f32>::init(&cfg, 1).unwrap();
        let bound = (1.0f32 / (82.0 * 25.0)).sqrt();
        assert!(p.get("patch.kernel").unwrap().data().iter().all(|v| v.abs() <= bound));
        assert!(p.get("patch.bias").unwrap().data().iter().all(|v| v.abs() <= bound));
        assert!(p.get("pos").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(p.get("blocks.0.ln1.gain").unwrap().data().iter().all(|&v| v == 1.0));
        assert!(p.get("blocks.1.ln2.shift").unwrap().data().iter().all(|&v| v == 0.0));
        let b = 1.0f32 / 4.0;
        assert!(p.get("blocks.0.attn.qkv.bias").unwrap().data().iter().all(|v| v.abs() <= b));
        assert!(p.get("blocks.0.attn.qkv.bias").unwrap().data().iter().any(|&v| v != 0.0));
        let b2 = (1.0f32 / 32.0).sqrt();
        assert!(p.get("blocks.0.mlp.fc2.bias").unwrap().data().iter().all(|v| v.abs() <= b2));
    }

    #[test]
    fn output_shapes() {
        let s = sample(10);
        let m = CloudMask::zeros(6, 10, 10, Provenance::Synthetic);
        let p = ModelParams::init(&tiny(Variant::SmtsVit), 3).unwrap();
        assert_eq!(forward(&p, &s, &m, None).unwrap().shape(), &[66, 10, 10]);
        let p = ModelParams::init(&tiny(Variant::SVit), 3).unwrap();
        assert_eq!(forward(&p, &s, &m, Some(2)).unwrap().shape(), &[11, 10, 10]);
        assert_eq!(reconstruct(&p, &s, &m).unwrap().shape(), &[66, 10, 10]);
    }

    #[test]
    fn checkpoint_roundtrip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(Variant::MtsVit);
        let p = ModelParams::init(&cfg, 9).unwrap();
        save_params(dir.path(), &p, serde_json::json!({"epoch": 1})).unwrap();
        let (q, extra) = load_params(dir.path(), Some(&cfg)).unwrap();
        assert_eq!(extra["epoch"], 1);
        assert!(p.tensors().iter().zip(q.tensors()).all(|(a, b)| a.bit_eq(b)));
        assert!(load_params(dir.path(), Some(&tiny(Variant::SmtsVit))).is_err());
    }

    #[test]
    fn variant_names() {
        for v in Variant::ALL {
            assert_eq!(Variant::parse(v.key()).unwrap(), v);
        }
        assert_eq!(Variant::parse("SMTS-ViT").unwrap(), Variant::SmtsVit);
        assert!(Variant::parse("cnn").is_err());
    }
}
