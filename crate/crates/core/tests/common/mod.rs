#![allow(dead_code)]

use cloudfill_core::tensor::Tensor;

/// Direct-loop convolution with no padding.
pub fn conv_oracle(x: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>, stride: usize) -> Tensor<f64> {
    let (bn, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (d, ks) = (k.shape()[0], k.shape()[2]);
    let (oh, ow) = ((h - ks) / stride + 1, (w - ks) / stride + 1);
    let mut out = Tensor::zeros([bn, d, oh, ow]);
    for n in 0..bn {
        for o in 0..d {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = b.data()[o];
                    for ci in 0..c {
                        for u in 0..ks {
                            for v in 0..ks {
                                acc += x.at(&[n, ci, i * stride + u, j * stride + v]) * k.at(&[o, ci, u, v]);
                            }
                        }
                    }
                    let off = out.offset(&[n, o, i, j]);
                    out.data_mut()[off] = acc;
                }
            }
        }
    }
    out
}

/// Per-pixel bilinear sampling with half-pixel centres and edge clamping.
pub fn bilinear_oracle(x: &Tensor<f64>, oh: usize, ow: usize) -> Tensor<f64> {
    let (bn, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let sample = |n: usize, ci: usize, sy: f64, sx: f64| {
        let sy = sy.clamp(0.0, (h - 1) as f64);
        let sx = sx.clamp(0.0, (w - 1) as f64);
        let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
        let p = |y, xx| x.at(&[n, ci, y, xx]);
        (1.0 - fy) * ((1.0 - fx) * p(y0, x0) + fx * p(y0, x1)) + fy * ((1.0 - fx) * p(y1, x0) + fx * p(y1, x1))
    };
    let mut out = Vec::new();
    for n in 0..bn {
        for ci in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let sy = (i as f64 + 0.5) * h as f64 / oh as f64 - 0.5;
                    let sx = (j as f64 + 0.5) * w as f64 / ow as f64 - 0.5;
                    out.push(sample(n, ci, sy, sx));
                }
            }
        }
    }
    Tensor::new([bn, c, oh, ow], out).unwrap()
}

/// Straight-line SSIM: direct 11×11 Gaussian window at every valid position.
pub fn ssim_reference(a: &[f64], b: &[f64], n: usize) -> f64 {
    let k = 11;
    let g: Vec<f64> = (0..k).map(|i| (-((i as f64 - 5.0).powi(2)) / (2.0 * 1.5 * 1.5)).exp()).collect();
    let gs: f64 = g.iter().sum();
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let m = n - k + 1;
    let mut total = 0.0;
    for y in 0..m {
        for x in 0..m {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for u in 0..k {
                for v in 0..k {
                    let wt = g[u] * g[v] / (gs * gs);
                    let (p, q) = (a[(y + u) * n + x + v], b[(y + u) * n + x + v]);
                    ma += wt * p;
                    mb += wt * q;
                    saa += wt * p * p;
                    sbb += wt * q * q;
                    sab += wt * p * q;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    total / (m * m) as f64
}

pub fn checkerboard() -> Tensor<f64> {
    Tensor::from_fn([32, 32], |i| {
        let (y, x) = (i / 32, i % 32);
        let base = if (y / 4 + x / 4) % 2 == 0 { 0.15 } else { 0.85 };
        base + 0.002 * x as f64
    })
}
