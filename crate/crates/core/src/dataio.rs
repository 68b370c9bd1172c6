//! Scene ingestion, normalization, tiling, splitting, revisit aggregation and
//! the procedural field-mosaic generator used for desk-scale runs.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::io::{read_tensor, write_tensor};
use crate::tensor::Tensor;

/// Sentinel-2 bands in packing order.
pub const MSI_BANDS: [&str; 11] = ["B1", "B2", "B3", "B4", "B5", "B6", "B7", "B8", "B8A", "B11", "B12"];
/// Sentinel-1 polarizations in packing order.
pub const SAR_BANDS: [&str; 2] = ["VV", "VH"];
pub const N_MSI_BANDS: usize = 11;
pub const N_SAR_BANDS: usize = 2;
pub const T_MSI: usize = 6;
pub const T_SAR: usize = 5;
pub const TILE: usize = 60;
/// Longest allowed span of MSI acquisition days.
pub const MAX_SPAN_DAYS: u32 = 60;

/// Day-of-year stamps of the aggregated 10-day MSI windows starting May 1st.
pub const DEFAULT_MSI_DAYS: [u32; T_MSI] = [126, 136, 146, 156, 166, 176];
/// Day-of-year stamps of the aggregated 12-day SAR windows starting May 1st.
pub const DEFAULT_SAR_DAYS: [u32; T_SAR] = [127, 139, 151, 163, 175];

/// One spatial scene: MSI and SAR frame stacks plus the real-cloud mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSeries {
    pub scene_id: String,
    /// `T_MSI×11×H×W` reflectance in `[0, 1]`.
    pub msi: Tensor,
    /// `T_SAR×2×H×W` normalized backscatter in `[0, 1]`.
    pub sar: Tensor,
    pub msi_days: Vec<u32>,
    pub sar_days: Vec<u32>,
    /// `T_MSI×H×W`, 1 where the MSI pixel is cloud.
    pub real_cloud: Tensor,
}

fn check_days(days: &[u32], what: &str) -> Result<()> {
    if days.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument(format!("{what} days must be strictly increasing: {days:?}")));
    }
    Ok(())
}

fn check_unit_range(t: &Tensor, what: &str) -> Result<()> {
    if let Some(v) = t.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidArgument(format!("{what} value {v} outside [0, 1]")));
    }
    Ok(())
}

fn check_binary(t: &Tensor, what: &str) -> Result<()> {
    if let Some(v) = t.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidArgument(format!("{what} must be binary, found {v}")));
    }
    Ok(())
}

impl SceneSeries {
    pub fn height(&self) -> usize {
        self.msi.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.msi.shape()[3]
    }

    pub fn validate(&self) -> Result<()> {
        let [t, c, h, w] = *self.msi.shape() else {
            return Err(shape_err!("msi must be T×11×H×W, got {:?}", self.msi.shape()));
        };
        if c != N_MSI_BANDS {
            return Err(shape_err!("msi must carry {} bands, got {}", N_MSI_BANDS, c));
        }
        let [ts, cs, hs, ws] = *self.sar.shape() else {
            return Err(shape_err!("sar must be T×2×H×W, got {:?}", self.sar.shape()));
        };
        if cs != N_SAR_BANDS || hs != h || ws != w {
            return Err(shape_err!("sar {:?} inconsistent with msi {:?}", self.sar.shape(), self.msi.shape()));
        }
        if self.real_cloud.shape() != [t, h, w] {
            return Err(shape_err!("real_cloud {:?} must be [{}, {}, {}]", self.real_cloud.shape(), t, h, w));
        }
        if self.msi_days.len() != t || self.sar_days.len() != ts {
            return Err(shape_err!(
                "{} msi / {} sar day stamps for {} / {} frames",
                self.msi_days.len(),
                self.sar_days.len(),
                t,
                ts
            ));
        }
        check_days(&self.msi_days, "msi")?;
        check_days(&self.sar_days, "sar")?;
        if self.msi_days.last().unwrap() - self.msi_days[0] > MAX_SPAN_DAYS {
            return Err(Error::InvalidArgument(format!("msi days span more than {MAX_SPAN_DAYS} days")));
        }
        check_unit_range(&self.msi, "msi")?;
        check_unit_range(&self.sar, "sar")?;
        check_binary(&self.real_cloud, "real_cloud")
    }
}

/// A fixed-size crop of a scene.
#[derive(Clone, Debug, PartialEq)]
pub struct TileSample {
    pub scene_id: String,
    pub row: usize,
    pub col: usize,
    pub msi: Tensor,
    pub sar: Tensor,
    pub real_cloud: Tensor,
    pub msi_days: Vec<u32>,
    pub sar_days: Vec<u32>,
}

impl TileSample {
    pub fn id(&self) -> String {
        format!("{}@{},{}", self.scene_id, self.row, self.col)
    }

    pub fn size(&self) -> usize {
        self.msi.shape()[2]
    }

    pub fn n_msi_frames(&self) -> usize {
        self.msi.shape()[0]
    }

    /// `1 − real_cloud`: pixels where the target is observed.
    pub fn validity(&self) -> Tensor {
        self.real_cloud.map(|v| 1.0 - v)
    }
}

/// Crops the trailing two axes to `[r0, r0+h) × [c0, c0+w)`.
pub fn crop_spatial(t: &Tensor, r0: usize, c0: usize, h: usize, w: usize) -> Result<Tensor> {
    let nd = t.ndim();
    if nd < 2 {
        return Err(shape_err!("crop needs at least 2 axes, got {:?}", t.shape()));
    }
    let (th, tw) = (t.shape()[nd - 2], t.shape()[nd - 1]);
    if r0 + h > th || c0 + w > tw {
        return Err(shape_err!("crop {}+{} x {}+{} outside {:?}", r0, h, c0, w, t.shape()));
    }
    let lead: usize = t.shape()[..nd - 2].iter().product();
    let mut data = Vec::with_capacity(lead * h * w);
    for p in 0..lead {
        let plane = &t.data()[p * th * tw..(p + 1) * th * tw];
        for r in r0..r0 + h {
            data.extend_from_slice(&plane[r * tw + c0..r * tw + c0 + w]);
        }
    }
    let mut shape = t.shape()[..nd - 2].to_vec();
    shape.extend([h, w]);
    Tensor::new(shape, data)
}

/// Global scaling constants mapping raw rasters to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub msi_divisor: f64,
    pub sar_db_min: f64,
    pub sar_db_max: f64,
}

impl Default for Normalization {
    fn default() -> Self {
        Self { msi_divisor: 10_000.0, sar_db_min: -30.0, sar_db_max: 0.0 }
    }
}

/// Maps raw reflectance ×10⁴ and SAR dB into `[0, 1]` with clamping.
pub fn normalize_scene(raw_msi: &Tensor, raw_sar: &Tensor, norm: &Normalization) -> Result<(Tensor, Tensor)> {
    if !raw_msi.all_finite() || !raw_sar.all_finite() {
        return Err(Error::NonFinite("raw scene contains non-finite values".into()));
    }
    if !(norm.msi_divisor > 0.0) || !(norm.sar_db_max > norm.sar_db_min) {
        return Err(Error::InvalidArgument(format!("invalid normalization constants {norm:?}")));
    }
    let range = norm.sar_db_max - norm.sar_db_min;
    let msi = raw_msi.map(|v| ((v as f64 / norm.msi_divisor).clamp(0.0, 1.0)) as f32);
    let sar = raw_sar.map(|v| (((v as f64 - norm.sar_db_min) / range).clamp(0.0, 1.0)) as f32);
    Ok((msi, sar))
}

/// Inverse of [`normalize_scene`] for values inside the clamp range.
pub fn denormalize_scene(msi: &Tensor, sar: &Tensor, norm: &Normalization) -> (Tensor, Tensor) {
    let range = norm.sar_db_max - norm.sar_db_min;
    (
        msi.map(|v| (v as f64 * norm.msi_divisor) as f32),
        sar.map(|v| (v as f64 * range + norm.sar_db_min) as f32),
    )
}

/// Non-overlapping row-major tiling; edge remainders are dropped.
pub fn tile_scene(scene: &SceneSeries, tile: usize) -> Result<Vec<TileSample>> {
    let (h, w) = (scene.height(), scene.width());
    if tile == 0 || h < tile || w < tile {
        return Err(Error::InvalidArgument(format!(
            "scene {} is {}x{}, smaller than one {}px tile",
            scene.scene_id, h, w, tile
        )));
    }
    let mut out = Vec::with_capacity((h / tile) * (w / tile));
    for gy in 0..h / tile {
        for gx in 0..w / tile {
            let (r, c) = (gy * tile, gx * tile);
            out.push(TileSample {
                scene_id: scene.scene_id.clone(),
                row: r,
                col: c,
                msi: crop_spatial(&scene.msi, r, c, tile, tile)?,
                sar: crop_spatial(&scene.sar, r, c, tile, tile)?,
                real_cloud: crop_spatial(&scene.real_cloud, r, c, tile, tile)?,
                msi_days: scene.msi_days.clone(),
                sar_days: scene.sar_days.clone(),
            });
        }
    }
    Ok(out)
}

/// Seeded shuffle followed by a prefix split into `(train, val)`.
pub fn split_tiles<T>(mut tiles: Vec<T>, ratio: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if tiles.len() < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 tiles to split, got {}", tiles.len())));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!("split ratio must lie in (0, 1), got {ratio}")));
    }
    let n = tiles.len();
    let n_train = ((ratio * n as f64).round() as usize).clamp(1, n - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    tiles.shuffle(&mut rng);
    let val = tiles.split_off(n_train);
    Ok((tiles, val))
}

/// Merges two revisit frames. Masks use 1 = cloud/missing.
pub fn aggregate_revisits(frame_a: &Tensor, mask_a: &Tensor, frame_b: &Tensor, mask_b: &Tensor) -> Result<(Tensor, Tensor)> {
    let [c, h, w] = *frame_a.shape() else {
        return Err(shape_err!("revisit frame must be C×H×W, got {:?}", frame_a.shape()));
    };
    if frame_b.shape() != frame_a.shape() || mask_a.shape() != [h, w] || mask_b.shape() != [h, w] {
        return Err(shape_err!(
            "revisit shapes disagree: {:?}/{:?} frames, {:?}/{:?} masks",
            frame_a.shape(),
            frame_b.shape(),
            mask_a.shape(),
            mask_b.shape()
        ));
    }
    let hw = h * w;
    let mut out = vec![0.0f32; c * hw];
    let mut mask = vec![0.0f32; hw];
    for p in 0..hw {
        let (ca, cb) = (mask_a.data()[p] != 0.0, mask_b.data()[p] != 0.0);
        mask[p] = if ca && cb { 1.0 } else { 0.0 };
        for ch in 0..c {
            let (a, b) = (frame_a.data()[ch * hw + p], frame_b.data()[ch * hw + p]);
            out[ch * hw + p] = match (ca, cb) {
                (false, false) => (a + b) / 2.0,
                (false, true) => a,
                (true, false) => b,
                (true, true) => 0.0,
            };
        }
    }
    Ok((Tensor::new([c, h, w], out)?, Tensor::new([h, w], mask)?))
}

/// Crop archetypes of the synthetic field mosaic.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Archetype {
    Corn,
    Soy,
    Wheat,
    Fallow,
}

impl Archetype {
    pub const ALL: [Archetype; 4] = [Archetype::Corn, Archetype::Soy, Archetype::Wheat, Archetype::Fallow];

    /// Canopy fraction in `[0, 1]` at `day` for a field shifted by `offset` days.
    pub fn canopy(self, day: f64, offset: f64, vigor: f64) -> f64 {
        let logistic = |center: f64, width: f64| 1.0 / (1.0 + (-(day - center - offset) / width).exp());
        let g = match self {
            Archetype::Corn => 0.92 * logistic(158.0, 6.0),
            Archetype::Soy => 0.85 * logistic(166.0, 4.5),
            Archetype::Wheat => {
                let z = (day - 148.0 - offset) / 14.0;
                0.08 + 0.8 * (-z * z).exp()
            }
            Archetype::Fallow => 0.04 + 0.25 * logistic(185.0, 8.0),
        };
        (g * vigor).clamp(0.0, 1.0)
    }

    fn soil_brightness(self) -> f64 {
        match self {
            Archetype::Corn => 1.0,
            Archetype::Soy => 0.82,
            Archetype::Wheat => 1.18,
            Archetype::Fallow => 1.35,
        }
    }

    fn nir_factor(self) -> f64 {
        match self {
            Archetype::Corn => 1.0,
            Archetype::Soy => 1.12,
            Archetype::Wheat => 0.9,
            Archetype::Fallow => 0.95,
        }
    }

    fn sar_bias(self) -> (f64, f64) {
        match self {
            Archetype::Corn => (0.02, 0.0),
            Archetype::Soy => (-0.02, 0.03),
            Archetype::Wheat => (0.04, -0.02),
            Archetype::Fallow => (-0.05, -0.04),
        }
    }
}

const SOIL: [f64; 11] = [0.08, 0.09, 0.11, 0.14, 0.17, 0.19, 0.21, 0.23, 0.24, 0.30, 0.26];
const CANOPY: [f64; 11] = [0.03, 0.04, 0.08, 0.04, 0.12, 0.30, 0.40, 0.45, 0.47, 0.22, 0.11];
/// Bands scaled by the archetype's near-infrared factor (B6..B8A).
const NIR_BANDS: std::ops::Range<usize> = 5..9;

/// Voronoi layout behind a synthetic scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthLayout {
    /// Region index per pixel, row-major `H×W`.
    pub region: Vec<usize>,
    pub archetype: Vec<Archetype>,
    pub offset_days: Vec<f64>,
    pub vigor: Vec<f64>,
}

/// Procedural field mosaic with smooth nonlinear phenology and correlated SAR.
pub fn synth_scene(seed: u64, height: usize, width: usize) -> Result<SceneSeries> {
    Ok(synth_scene_with_layout(seed, height, width)?.0)
}

pub fn synth_scene_with_layout(seed: u64, height: usize, width: usize) -> Result<(SceneSeries, SynthLayout)> {
    if height < TILE || width < TILE {
        return Err(Error::InvalidArgument(format!(
            "synthetic scenes must be at least {TILE}x{TILE}, got {height}x{width}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_regions = ((height * width) / (18 * 18)).max(6);
    let centers: Vec<(f64, f64)> = (0..n_regions)
        .map(|_| (rng.gen::<f64>() * height as f64, rng.gen::<f64>() * width as f64))
        .collect();
    let archetype: Vec<Archetype> = (0..n_regions)
        .map(|i| if i < 4 { Archetype::ALL[i] } else { Archetype::ALL[rng.gen_range(0..4)] })
        .collect();
    let offset_days: Vec<f64> = (0..n_regions).map(|_| rng.gen_range(-8.0..8.0)).collect();
    let vigor: Vec<f64> = (0..n_regions).map(|_| rng.gen_range(0.85..1.1)).collect();
    let region: Vec<usize> = (0..height * width)
        .map(|p| {
            let (y, x) = ((p / width) as f64 + 0.5, (p % width) as f64 + 0.5);
            let mut best = (f64::INFINITY, 0);
            for (i, &(cy, cx)) in centers.iter().enumerate() {
                let d = (y - cy).powi(2) + (x - cx).powi(2);
                if d < best.0 {
                    best = (d, i);
                }
            }
            best.1
        })
        .collect();

    let hw = height * width;
    // time-constant per-pixel texture shared by all frames
    let texture: Vec<f64> = (0..hw).map(|_| 0.012 * rng.sample::<f64, _>(StandardNormal)).collect();
    let mut msi = vec![0.0f32; T_MSI * N_MSI_BANDS * hw];
    for (t, &day) in DEFAULT_MSI_DAYS.iter().enumerate() {
        for p in 0..hw {
            let r = region[p];
            let a = archetype[r];
            let g = a.canopy(day as f64, offset_days[r], vigor[r]);
            for b in 0..N_MSI_BANDS {
                let soil = SOIL[b] * a.soil_brightness();
                let mut canopy = CANOPY[b];
                if NIR_BANDS.contains(&b) {
                    canopy *= a.nir_factor();
                }
                let noise = 0.004 * rng.sample::<f64, _>(StandardNormal);
                let v = (1.0 - g) * soil + g * canopy + texture[p] + noise;
                msi[(t * N_MSI_BANDS + b) * hw + p] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    let mut sar = vec![0.0f32; T_SAR * N_SAR_BANDS * hw];
    for (t, &day) in DEFAULT_SAR_DAYS.iter().enumerate() {
        for p in 0..hw {
            let r = region[p];
            let a = archetype[r];
            let g = a.canopy(day as f64, offset_days[r], vigor[r]);
            let (bvv, bvh) = a.sar_bias();
            let vv = 0.45 + 0.18 * g + bvv + 0.02 * rng.sample::<f64, _>(StandardNormal);
            let vh = 0.22 + 0.38 * g + bvh + 0.02 * rng.sample::<f64, _>(StandardNormal);
            sar[(t * N_SAR_BANDS) * hw + p] = vv.clamp(0.0, 1.0) as f32;
            sar[(t * N_SAR_BANDS + 1) * hw + p] = vh.clamp(0.0, 1.0) as f32;
        }
    }
    let scene = SceneSeries {
        scene_id: format!("synth-{seed}"),
        msi: Tensor::new([T_MSI, N_MSI_BANDS, height, width], msi)?,
        sar: Tensor::new([T_SAR, N_SAR_BANDS, height, width], sar)?,
        msi_days: DEFAULT_MSI_DAYS.to_vec(),
        sar_days: DEFAULT_SAR_DAYS.to_vec(),
        real_cloud: Tensor::zeros([T_MSI, height, width]),
    };
    Ok((scene, SynthLayout { region, archetype, offset_days, vigor }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub id: String,
    pub msi_path: String,
    pub sar_path: String,
    pub cloud_path: String,
    pub msi_days: Vec<u32>,
    pub sar_days: Vec<u32>,
    pub bands: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    pub ratio: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { seed: 42, ratio: 0.8 }
    }
}

/// `manifest.json`: scenes on disk plus normalization and split settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub scenes: Vec<SceneEntry>,
    pub normalization: Normalization,
    pub split: SplitSpec,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let pb = PathBuf::from(p);
    if pb.is_absolute() {
        pb
    } else {
        base.join(pb)
    }
}

/// Reads and normalizes one manifest entry. Raster paths are relative to `base`.
pub fn load_scene(entry: &SceneEntry, norm: &Normalization, base: &Path) -> Result<SceneSeries> {
    let raw_msi = read_tensor(resolve(base, &entry.msi_path))?;
    let raw_sar = read_tensor(resolve(base, &entry.sar_path))?;
    let real_cloud = read_tensor(resolve(base, &entry.cloud_path))?;
    let (msi, sar) = normalize_scene(&raw_msi, &raw_sar, norm)?;
    let scene = SceneSeries {
        scene_id: entry.id.clone(),
        msi,
        sar,
        msi_days: entry.msi_days.clone(),
        sar_days: entry.sar_days.clone(),
        real_cloud,
    };
    scene.validate()?;
    Ok(scene)
}

/// Tiles of every scene in a manifest, split into train and validation.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub train: Vec<TileSample>,
    pub val: Vec<TileSample>,
}

impl Dataset {
    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        Self::load_tiled(manifest_path, TILE)
    }

    /// Like [`Dataset::load`] with `tile`-sized crops, for models with a
    /// smaller input extent.
    pub fn load_tiled(manifest_path: impl AsRef<Path>, tile: usize) -> Result<Self> {
        let manifest_path = manifest_path.as_ref();
        let manifest = DatasetManifest::load(manifest_path)?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let mut tiles = Vec::new();
        for entry in &manifest.scenes {
            let scene = load_scene(entry, &manifest.normalization, base)?;
            tiles.extend(tile_scene(&scene, tile)?);
        }
        let (train, val) = if tiles.len() >= 2 {
            split_tiles(tiles, manifest.split.ratio, manifest.split.seed)?
        } else {
            (tiles, Vec::new())
        };
        Ok(Self { manifest, train, val })
    }

    /// Every tile, training tiles first.
    pub fn all_tiles(&self) -> Vec<TileSample> {
        self.train.iter().chain(&self.val).cloned().collect()
    }
}

/// Writes `n_scenes` synthetic scenes as raw rasters plus `manifest.json`.
pub fn write_synthetic_dataset(out_dir: &Path, seed: u64, n_scenes: usize, height: usize, width: usize) -> Result<DatasetManifest> {
    if height < TILE || width < TILE {
        return Err(Error::InvalidArgument(format!("synthetic scenes must be at least {TILE}x{TILE}, got {height}x{width}")));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let norm = Normalization::default();
    let bands: Vec<String> = MSI_BANDS.iter().chain(SAR_BANDS.iter()).map(|s| s.to_string()).collect();
    let mut scenes = Vec::with_capacity(n_scenes);
    for i in 0..n_scenes {
        let scene_seed = seed.wrapping_mul(1000).wrapping_add(i as u64);
        let mut scene = synth_scene(scene_seed, height, width)?;
        scene.scene_id = format!("scene-{i:03}");
        let (raw_msi, raw_sar) = denormalize_scene(&scene.msi, &scene.sar, &norm);
        let entry = SceneEntry {
            id: scene.scene_id.clone(),
            msi_path: format!("{}_msi.tsr", scene.scene_id),
            sar_path: format!("{}_sar.tsr", scene.scene_id),
            cloud_path: format!("{}_cloud.tsr", scene.scene_id),
            msi_days: scene.msi_days.clone(),
            sar_days: scene.sar_days.clone(),
            bands: bands.clone(),
        };
        write_tensor(out_dir.join(&entry.msi_path), &raw_msi)?;
        write_tensor(out_dir.join(&entry.sar_path), &raw_sar)?;
        write_tensor(out_dir.join(&entry.cloud_path), &scene.real_cloud)?;
        scenes.push(entry);
    }
    let manifest = DatasetManifest { scenes, normalization: norm, split: SplitSpec { seed, ratio: 0.8 } };
    manifest.save(out_dir.join("manifest.json"))?;
    Ok(manifest)
}
