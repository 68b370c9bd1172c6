//! Reconstruction metrics (MSE, spectral angle, PSNR, SSIM), their cloud-region
//! variants, tile/seed aggregation and the temporal interpolation baseline.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cloudsim::CloudMask;
use crate::dataio::TileSample;
use crate::error::{shape_err, Error, Result};
use crate::objective::{mse_loss, sam_loss};
use crate::tensor::{Real, Tensor};

/// Below this MSE the PSNR is reported as `f64::INFINITY`.
pub const PSNR_MSE_FLOOR: f64 = 1e-12;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
/// Zero-norm guard of the spectral angle metric.
pub const SAM_EPS: f64 = 1e-8;

pub fn clamp_unit<F: Real>(t: &Tensor<F>) -> Tensor<F> {
    t.map(|v| v.max(F::zero()).min(F::one()))
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse < PSNR_MSE_FLOOR {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

/// PSNR in dB of the clamped prediction over valid pixels.
pub fn psnr<F: Real>(pred: &Tensor<F>, target: &Tensor<F>, valid: &Tensor<F>, peak: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse_loss(&clamp_unit(pred), target, valid)?, peak))
}

/// Normalized 1-D Gaussian of length `n` centred on the window.
fn gaussian(n: usize) -> Vec<f64> {
    let c = (n as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..n).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable window filter over valid positions only.
struct Window {
    h: usize,
    w: usize,
    gy: Vec<f64>,
    gx: Vec<f64>,
}

impl Window {
    /// The standard window, shrunk to the image when the image is smaller.
    fn for_image(h: usize, w: usize) -> Self {
        Self { h, w, gy: gaussian(SSIM_WINDOW.min(h)), gx: gaussian(SSIM_WINDOW.min(w)) }
    }

    fn out_dims(&self) -> (usize, usize) {
        (self.h - self.gy.len() + 1, self.w - self.gx.len() + 1)
    }

    fn filter(&self, img: &[f64]) -> Vec<f64> {
        let (oh, ow) = self.out_dims();
        let mut rows = vec![0.0; self.h * ow];
        for y in 0..self.h {
            for x in 0..ow {
                rows[y * ow + x] = self.gx.iter().enumerate().map(|(k, g)| g * img[y * self.w + x + k]).sum();
            }
        }
        let mut out = vec![0.0; oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                out[y * ow + x] = self.gy.iter().enumerate().map(|(k, g)| g * rows[(y + k) * ow + x]).sum();
            }
        }
        out
    }

    fn ssim_map(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        let prod = |f: &dyn Fn(f64, f64) -> f64| a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect::<Vec<_>>();
        let (ma, mb) = (self.filter(a), self.filter(b));
        let saa = self.filter(&prod(&|x, _| x * x));
        let sbb = self.filter(&prod(&|_, y| y * y));
        let sab = self.filter(&prod(&|x, y| x * y));
        (0..ma.len())
            .map(|i| {
                let (mx, my) = (ma[i], mb[i]);
                let (vx, vy, cxy) = (saa[i] - mx * mx, sbb[i] - my * my, sab[i] - mx * my);
                ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                    / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2))
            })
            .collect()
    }
}

/// `(planes, h, w)` of a 2-D image or a channel stack.
fn planes<F: Real>(t: &Tensor<F>) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [h, w] if h > 0 && w > 0 => Ok((1, h, w)),
        [c, h, w] if c > 0 && h > 0 && w > 0 => Ok((c, h, w)),
        _ => Err(shape_err!("SSIM needs a non-empty H×W or C×H×W image, got {:?}", t.shape())),
    }
}

fn to_f64<F: Real>(s: &[F]) -> Vec<f64> {
    s.iter().map(|v| v.as_f64()).collect()
}

/// Mean SSIM over valid window positions, averaged over channels of a stack.
pub fn ssim<F: Real>(pred: &Tensor<F>, target: &Tensor<F>) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(shape_err!("SSIM of {:?} vs {:?}", pred.shape(), target.shape()));
    }
    let (c, h, w) = planes(pred)?;
    let win = Window::for_image(h, w);
    let (p, t) = (to_f64(pred.data()), to_f64(target.data()));
    let total: f64 = (0..c)
        .map(|i| {
            let r = i * h * w..(i + 1) * h * w;
            let m = win.ssim_map(&p[r.clone()], &t[r]);
            m.iter().sum::<f64>() / m.len() as f64
        })
        .sum();
    Ok(total / c as f64)
}

/// SSIM of a `(T·C)×H×W` stack restricted to a `T×H×W` region: each window
/// position is weighted by the window-weighted share of region pixels it
/// covers, so a full region reduces to [`ssim`]. Planes whose frame has no
/// region pixel are skipped; `None` when no plane remains.
pub fn ssim_region<F: Real>(pred: &Tensor<F>, target: &Tensor<F>, region: &Tensor<F>) -> Result<Option<f64>> {
    if pred.shape() != target.shape() {
        return Err(shape_err!("SSIM of {:?} vs {:?}", pred.shape(), target.shape()));
    }
    let (n, h, w) = planes(pred)?;
    let (t, rh, rw) = planes(region)?;
    if (rh, rw) != (h, w) || n % t != 0 {
        return Err(shape_err!("SSIM region {:?} incompatible with {:?}", region.shape(), pred.shape()));
    }
    let c = n / t;
    let win = Window::for_image(h, w);
    let (p, q, reg) = (to_f64(pred.data()), to_f64(target.data()), to_f64(region.data()));
    let (mut sum, mut count) = (0.0, 0usize);
    for ti in 0..t {
        let weights = win.filter(&reg[ti * h * w..(ti + 1) * h * w]);
        let wsum: f64 = weights.iter().sum();
        if wsum <= 0.0 {
            continue;
        }
        for ci in 0..c {
            let r = (ti * c + ci) * h * w..(ti * c + ci + 1) * h * w;
            let m = win.ssim_map(&p[r.clone()], &q[r]);
            sum += m.iter().zip(&weights).map(|(s, wt)| s * wt).sum::<f64>() / wsum;
            count += 1;
        }
    }
    Ok((count > 0).then(|| sum / count as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub sam: f64,
    /// `f64::INFINITY` when the MSE is below [`PSNR_MSE_FLOOR`].
    pub psnr: f64,
    pub ssim: f64,
}

/// Metrics of one reconstructed tile over all valid pixels and over the
/// synthetic-cloud region only. `None` marks an empty region; such entries are
/// left out of aggregation.
#[derive(Clone, Debug, PartialEq)]
pub struct TileRecord {
    pub tile_id: String,
    pub full: Option<Metrics>,
    pub masked: Option<Metrics>,
}

fn region_metrics(pred: &Tensor, target: &Tensor, region: &Tensor) -> Result<Option<Metrics>> {
    if region.data().iter().all(|&v| v == 0.0) {
        return Ok(None);
    }
    let mse = mse_loss(pred, target, region)?;
    let Some(ssim) = ssim_region(pred, target, region)? else {
        return Ok(None);
    };
    Ok(Some(Metrics { mse, sam: sam_loss(pred, target, region, SAM_EPS)?, psnr: psnr_from_mse(mse, 1.0), ssim }))
}

/// Scores a `(T·11)×H×W` reconstruction of `sample`; the prediction is clamped
/// to `[0, 1]` first.
pub fn evaluate_tile(pred: &Tensor, sample: &TileSample, synth_mask: &CloudMask, valid: &Tensor) -> Result<TileRecord> {
    let ms = sample.msi.shape();
    let target = sample.msi.clone().reshape([ms[0] * ms[1], ms[2], ms[3]])?;
    if pred.shape() != target.shape() {
        return Err(shape_err!("prediction {:?} vs tile {:?}", pred.shape(), target.shape()));
    }
    if valid.shape() != synth_mask.tensor().shape() || valid.shape() != sample.real_cloud.shape() {
        return Err(shape_err!("validity {:?} vs cloud mask {:?}", valid.shape(), synth_mask.tensor().shape()));
    }
    let pred = clamp_unit(pred);
    let masked = Tensor::from_fn(valid.shape().to_vec(), |i| valid.data()[i] * synth_mask.tensor().data()[i]);
    Ok(TileRecord {
        tile_id: sample.id(),
        full: region_metrics(&pred, &target, valid)?,
        masked: region_metrics(&pred, &target, &masked)?,
    })
}

/// Fills every occluded (synthetic or real cloud) frame of each pixel and band
/// by linear interpolation in day-of-year between the nearest clear frames,
/// holding the nearest clear frame at the ends and 0 when no frame is clear.
/// Returns `(T·C)×H×W`.
pub fn interp_baseline(sample: &TileSample, mask: &CloudMask) -> Result<Tensor> {
    let ms = sample.msi.shape().to_vec();
    let (t, c, hw) = (ms[0], ms[1], ms[2] * ms[3]);
    if mask.tensor().shape() != sample.real_cloud.shape() || sample.msi_days.len() != t {
        return Err(shape_err!("mask {:?} incompatible with tile {:?}", mask.tensor().shape(), ms));
    }
    let (x, m, real) = (sample.msi.data(), mask.tensor().data(), sample.real_cloud.data());
    let days: Vec<f64> = sample.msi_days.iter().map(|&d| d as f64).collect();
    let mut out = x.to_vec();
    let mut clear = Vec::with_capacity(t);
    for px in 0..hw {
        clear.clear();
        clear.extend((0..t).filter(|&ti| m[ti * hw + px] == 0.0 && real[ti * hw + px] == 0.0));
        for ti in (0..t).filter(|ti| !clear.contains(ti)) {
            let prev = clear.iter().rev().find(|&&k| k < ti).copied();
            let next = clear.iter().find(|&&k| k > ti).copied();
            for ci in 0..c {
                let at = |k: usize| x[(k * c + ci) * hw + px];
                out[(ti * c + ci) * hw + px] = match (prev, next) {
                    (Some(a), Some(b)) => {
                        let f = ((days[ti] - days[a]) / (days[b] - days[a])) as f32;
                        at(a) + f * (at(b) - at(a))
                    }
                    (Some(k), None) | (None, Some(k)) => at(k),
                    (None, None) => 0.0,
                };
            }
        }
    }
    Tensor::new([t * c, ms[2], ms[3]], out)
}

/// Identity of one metrics row.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ReportKey {
    pub model: String,
    pub variant: String,
    /// Seed number, or `AVG` for seed-averaged rows.
    pub seed: String,
    /// `None` for rows averaged over cloud counts.
    pub cloud_count: Option<usize>,
    pub split: String,
}

/// Aggregated metrics of one (model, seed, cloud count, split).
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub key: ReportKey,
    /// Tiles (or runs, for seed averages) contributing to `full`.
    pub n_tiles: usize,
    pub full: Metrics,
    /// `None` when no contributing entry had a synthetic-cloud region.
    pub masked: Option<Metrics>,
    pub n_masked: usize,
    /// Entries with an infinite PSNR, left out of the PSNR mean.
    pub n_psnr_inf: usize,
    pub n_psnr_inf_masked: usize,
}

struct Mean {
    n: usize,
    sums: [f64; 3],
    psnr: f64,
    n_psnr: usize,
    n_inf: usize,
}

impl Mean {
    fn new() -> Self {
        Self { n: 0, sums: [0.0; 3], psnr: 0.0, n_psnr: 0, n_inf: 0 }
    }

    fn push(&mut self, m: &Metrics) {
        self.n += 1;
        self.sums[0] += m.mse;
        self.sums[1] += m.sam;
        self.sums[2] += m.ssim;
        if m.psnr.is_finite() {
            self.psnr += m.psnr;
            self.n_psnr += 1;
        } else {
            self.n_inf += 1;
        }
    }

    fn finish(&self) -> Option<Metrics> {
        (self.n > 0).then(|| {
            let n = self.n as f64;
            let psnr = if self.n_psnr > 0 { self.psnr / self.n_psnr as f64 } else { f64::INFINITY };
            Metrics { mse: self.sums[0] / n, sam: self.sums[1] / n, psnr, ssim: self.sums[2] / n }
        })
    }
}

fn report(key: ReportKey, full: Mean, masked: Mean) -> Result<EvalReport> {
    let f = full.finish().ok_or_else(|| Error::InvalidArgument("no evaluable entries to aggregate".into()))?;
    Ok(EvalReport {
        key,
        n_tiles: full.n,
        full: f,
        masked: masked.finish(),
        n_masked: masked.n,
        n_psnr_inf: full.n_inf,
        n_psnr_inf_masked: masked.n_inf,
    })
}

/// Unweighted mean over tiles, in input order.
pub fn aggregate(records: &[TileRecord], key: ReportKey) -> Result<EvalReport> {
    let (mut full, mut masked) = (Mean::new(), Mean::new());
    for r in records {
        if let Some(m) = &r.full {
            full.push(m);
        }
        if let Some(m) = &r.masked {
            masked.push(m);
        }
    }
    report(key, full, masked)
}

/// Unweighted mean of per-run reports, e.g. across seeds.
pub fn average_reports(reports: &[EvalReport], key: ReportKey) -> Result<EvalReport> {
    let (mut full, mut masked) = (Mean::new(), Mean::new());
    for r in reports {
        full.push(&r.full);
        if let Some(m) = &r.masked {
            masked.push(m);
        }
    }
    report(key, full, masked)
}

/// One line of the metrics CSV; field order is the column order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub model: String,
    pub variant: String,
    pub seed: String,
    pub cloud_count: Option<usize>,
    pub split: String,
    pub n_tiles: usize,
    pub mse: f64,
    pub sam: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub mse_masked: Option<f64>,
    pub sam_masked: Option<f64>,
    pub psnr_masked: Option<f64>,
    pub ssim_masked: Option<f64>,
}

pub const CSV_HEADER: &str =
    "model,variant,seed,cloud_count,split,n_tiles,mse,sam,psnr,ssim,mse_masked,sam_masked,psnr_masked,ssim_masked";

impl From<&EvalReport> for MetricsRow {
    fn from(r: &EvalReport) -> Self {
        let k = &r.key;
        Self {
            model: k.model.clone(),
            variant: k.variant.clone(),
            seed: k.seed.clone(),
            cloud_count: k.cloud_count,
            split: k.split.clone(),
            n_tiles: r.n_tiles,
            mse: r.full.mse,
            sam: r.full.sam,
            psnr: r.full.psnr,
            ssim: r.full.ssim,
            mse_masked: r.masked.map(|m| m.mse),
            sam_masked: r.masked.map(|m| m.sam),
            psnr_masked: r.masked.map(|m| m.psnr),
            ssim_masked: r.masked.map(|m| m.ssim),
        }
    }
}

pub fn write_metrics_csv<W: Write>(out: W, reports: &[EvalReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if reports.is_empty() {
        w.write_record(CSV_HEADER.split(','))?;
    }
    for r in reports {
        w.serialize(MetricsRow::from(r))?;
    }
    w.flush().map_err(|e| Error::Csv(e.into()))?;
    Ok(())
}

pub fn save_metrics_csv(path: impl AsRef<Path>, reports: &[EvalReport]) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_metrics_csv(std::io::BufWriter::new(f), reports)
}

pub fn read_metrics_csv(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<MetricsRow>, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{DEFAULT_MSI_DAYS, DEFAULT_SAR_DAYS};

    fn tile(h: usize, f: impl Fn(usize) -> f32) -> TileSample {
        TileSample {
            scene_id: "t".into(),
            row: 0,
            col: 0,
            msi: Tensor::from_fn([6, 11, h, h], f),
            sar: Tensor::zeros([5, 2, h, h]),
            real_cloud: Tensor::zeros([6, h, h]),
            msi_days: DEFAULT_MSI_DAYS.to_vec(),
            sar_days: DEFAULT_SAR_DAYS.to_vec(),
        }
    }

    #[test]
    fn psnr_of_known_mse() {
        assert!((psnr_from_mse(0.01, 1.0) - 20.0).abs() < 1e-12);
        assert_eq!(psnr_from_mse(0.0, 1.0), f64::INFINITY);
        assert!((psnr_from_mse(0.009, 1.0) - 20.457).abs() < 1e-3);
    }

    #[test]
    fn ssim_identity_and_constants() {
        let x = Tensor::from_fn([3, 20, 17], |i| ((i * 37) % 101) as f32 / 100.0);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-9);
        let c = Tensor::full([16, 16], 0.5f32);
        assert!((ssim(&c, &c).unwrap() - 1.0).abs() < 1e-12);
        let small = Tensor::from_fn([5, 4], |i| i as f32 / 20.0);
        assert!((ssim(&small, &small).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn full_region_ssim_matches_plain_ssim() {
        let a = Tensor::from_fn([22, 12, 12], |i| ((i * 13) % 29) as f32 / 28.0);
        let b = Tensor::from_fn([22, 12, 12], |i| ((i * 7) % 31) as f32 / 30.0);
        let r = Tensor::full([2, 12, 12], 1.0f32);
        let s = ssim_region(&a, &b, &r).unwrap().unwrap();
        assert!((s - ssim(&a, &b).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_record() {
        let s = tile(8, |i| (i % 50) as f32 / 50.0 + 0.01);
        let pred = s.msi.clone().reshape([66, 8, 8]).unwrap();
        let m = crate::cloudsim::generate_mask(&Default::default(), 6, 8, 8).unwrap();
        let r = evaluate_tile(&pred, &s, &m, &s.validity()).unwrap();
        let f = r.full.unwrap();
        assert_eq!((f.mse, f.sam, f.psnr), (0.0, 0.0, f64::INFINITY));
        assert!((f.ssim - 1.0).abs() < 1e-9);
    }

    #[test]
    fn interp_midpoint_and_hold() {
        let s = tile(2, |i| ((i / 44) as f32 + 1.0) / 10.0);
        let mut m = Tensor::zeros([6, 2, 2]);
        m.data_mut()[3 * 4..4 * 4].fill(1.0);
        let out = interp_baseline(&s, &CloudMask::new(m, crate::cloudsim::Provenance::Synthetic).unwrap()).unwrap();
        assert!((out.at(&[3 * 11 + 5, 1, 1]) - 0.4).abs() < 1e-6);
        let mut m = Tensor::full([6, 2, 2], 1.0);
        m.data_mut()[5 * 4..].fill(0.0);
        let out = interp_baseline(&s, &CloudMask::new(m, crate::cloudsim::Provenance::Synthetic).unwrap()).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.6).abs() < 1e-6));
    }

    #[test]
    fn aggregation_means_and_sentinels() {
        let m = |mse: f64| Metrics { mse, sam: 0.1, psnr: psnr_from_mse(mse, 1.0), ssim: 0.5 };
        let key = ReportKey { model: "m".into(), variant: "v".into(), seed: "0".into(), cloud_count: Some(20), split: "val".into() };
        let recs = vec![
            TileRecord { tile_id: "a".into(), full: Some(m(0.01)), masked: Some(m(0.0)) },
            TileRecord { tile_id: "b".into(), full: Some(m(0.03)), masked: None },
            TileRecord { tile_id: "c".into(), full: None, masked: None },
        ];
        let r = aggregate(&recs, key.clone()).unwrap();
        assert_eq!(r.n_tiles, 2);
        assert!((r.full.mse - 0.02).abs() < 1e-15);
        assert_eq!((r.n_masked, r.n_psnr_inf_masked), (1, 1));
        assert_eq!(r.masked.unwrap().psnr, f64::INFINITY);
        assert!(aggregate(&[], key).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let key = ReportKey { model: "m".into(), variant: "v".into(), seed: "AVG".into(), cloud_count: None, split: "val".into() };
        let full = Metrics { mse: 0.1, sam: 0.2, psnr: f64::INFINITY, ssim: 0.9 };
        let rep = EvalReport { key, n_tiles: 3, full, masked: None, n_masked: 0, n_psnr_inf: 3, n_psnr_inf_masked: 0 };
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &[rep.clone()]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), CSV_HEADER);
        let row: MetricsRow = csv::Reader::from_reader(text.as_bytes()).deserialize().next().unwrap().unwrap();
        assert_eq!(row, MetricsRow::from(&rep));
    }
}
