//! Image-quality measures and the MSE + DSSIM training objective.
//!
//! SSIM here is the single-window form: one mean, variance and covariance
//! per image, population statistics (divisor `N`). A Gaussian-windowed
//! variant is provided for evaluation only.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::image::Image;

/// Stabilising constants `c1 = (0.01 L)^2`, `c2 = (0.03 L)^2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimConstants {
    pub c1: f64,
    pub c2: f64,
    pub dynamic_range: f64,
}

impl SsimConstants {
    pub fn for_range(l: f64) -> Self {
        Self {
            c1: (0.01 * l).powi(2),
            c2: (0.03 * l).powi(2),
            dynamic_range: l,
        }
    }
}

impl Default for SsimConstants {
    fn default() -> Self {
        Self::for_range(1.0)
    }
}

/// Whole-image first and second moments of a pair.
#[derive(Clone, Copy, Debug)]
pub(crate) struct GlobalStats {
    pub n: f64,
    pub mu_a: f64,
    pub mu_b: f64,
    pub var_a: f64,
    pub var_b: f64,
    pub cov: f64,
}

impl GlobalStats {
    pub fn of(a: &[f64], b: &[f64]) -> Self {
        let n = a.len() as f64;
        let mu_a = a.iter().sum::<f64>() / n;
        let mu_b = b.iter().sum::<f64>() / n;
        let (mut var_a, mut var_b, mut cov) = (0.0, 0.0, 0.0);
        for (x, y) in a.iter().zip(b) {
            let (dx, dy) = (x - mu_a, y - mu_b);
            var_a += dx * dx;
            var_b += dy * dy;
            cov += dx * dy;
        }
        Self {
            n,
            mu_a,
            mu_b,
            var_a: var_a / n,
            var_b: var_b / n,
            cov: cov / n,
        }
    }

    fn terms(&self, k: &SsimConstants) -> (f64, f64, f64, f64) {
        (
            2.0 * self.mu_a * self.mu_b + k.c1,
            2.0 * self.cov + k.c2,
            self.mu_a * self.mu_a + self.mu_b * self.mu_b + k.c1,
            self.var_a + self.var_b + k.c2,
        )
    }

    pub fn ssim(&self, k: &SsimConstants) -> f64 {
        let (a, b, c, d) = self.terms(k);
        a * b / (c * d)
    }

    /// Adds `scale * dSSIM/da_i` to `ga` and `scale * dSSIM/db_i` to `gb`.
    pub fn ssim_grad(
        &self,
        a: &[f64],
        b: &[f64],
        k: &SsimConstants,
        scale: f64,
        ga: &mut [f64],
        gb: &mut [f64],
    ) {
        let (ta, tb, tc, td) = self.terms(k);
        let s = ta * tb / (tc * td);
        let n = self.n;
        // Contributions of each moment, shared by every pixel.
        let ka = s * (2.0 * self.mu_b / ta - 2.0 * self.mu_a / tc) / n;
        let kb = s * (2.0 * self.mu_a / ta - 2.0 * self.mu_b / tc) / n;
        let kcov = s * 2.0 / (tb * n);
        let kvar = s * 2.0 / (td * n);
        for i in 0..a.len() {
            let (dx, dy) = (a[i] - self.mu_a, b[i] - self.mu_b);
            ga[i] += scale * (ka + kcov * dy - kvar * dx);
            gb[i] += scale * (kb + kcov * dx - kvar * dy);
        }
    }
}

pub fn mse(y: &Image, yhat: &Image) -> Result<f64> {
    y.check_same_shape(yhat, "mse")?;
    let s: f64 = y
        .data()
        .iter()
        .zip(yhat.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(s / y.len() as f64)
}

/// Structural dissimilarity `(1 - SSIM) / 2` from global statistics.
pub fn dssim(y: &Image, yhat: &Image, consts: &SsimConstants) -> Result<f64> {
    y.check_same_shape(yhat, "dssim")?;
    let st = GlobalStats::of(y.data(), yhat.data());
    let (a, b, c, d) = st.terms(consts);
    Ok(0.5 - a * b / (2.0 * c * d))
}

pub fn ssim(y: &Image, yhat: &Image, consts: &SsimConstants) -> Result<f64> {
    Ok(1.0 - 2.0 * dssim(y, yhat, consts)?)
}

/// Peak signal-to-noise ratio in dB; `+inf` for identical images.
pub fn psnr(y: &Image, yhat: &Image, dynamic_range: f64) -> Result<f64> {
    let m = mse(y, yhat)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (dynamic_range * dynamic_range / m).log10())
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let k: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

// Separable "valid" filtering of a row-major grid.
fn filter_valid(data: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * data[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean SSIM over 11x11 Gaussian windows (sigma 1.5), valid positions only.
/// The window shrinks to the smaller image extent (kept odd) for tiny images.
pub fn ssim_windowed(y: &Image, yhat: &Image, consts: &SsimConstants) -> Result<f64> {
    y.check_same_shape(yhat, "ssim_windowed")?;
    let (h, w) = y.shape();
    let mut size = 11.min(h).min(w);
    if size % 2 == 0 {
        size -= 1;
    }
    let k = gaussian_kernel(size.max(1), 1.5);
    let a = y.data();
    let b = yhat.data();
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
        a.iter().zip(b).map(|(&x, &z)| f(x, z)).collect()
    };
    let (mu_a, oh, ow) = filter_valid(a, h, w, &k);
    let (mu_b, ..) = filter_valid(b, h, w, &k);
    let (aa, ..) = filter_valid(&prod(&|x, _| x * x), h, w, &k);
    let (bb, ..) = filter_valid(&prod(&|_, z| z * z), h, w, &k);
    let (ab, ..) = filter_valid(&prod(&|x, z| x * z), h, w, &k);
    let mut total = 0.0;
    for i in 0..oh * ow {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cv = ab[i] - ma * mb;
        total += (2.0 * ma * mb + consts.c1) * (2.0 * cv + consts.c2)
            / ((ma * ma + mb * mb + consts.c1) * (va + vb + consts.c2));
    }
    Ok(total / (oh * ow) as f64)
}

/// Mean absolute error restricted to pixels where `region` is set.
/// `None` when the region is empty.
pub fn region_mae(y: &Image, yhat: &Image, region: &[bool]) -> Result<Option<f64>> {
    y.check_same_shape(yhat, "region_mae")?;
    let (mut s, mut n) = (0.0, 0usize);
    for ((a, b), &m) in y.data().iter().zip(yhat.data()).zip(region) {
        if m {
            s += (a - b).abs();
            n += 1;
        }
    }
    Ok((n > 0).then(|| s / n as f64))
}

/// MSE + DSSIM on differentiable tensors: mean squared error over every
/// element plus the batch-mean of per-image DSSIM.
pub fn composite_loss(g: &mut Graph, target: Var, pred: Var, consts: SsimConstants) -> Result<Var> {
    let m = g.mse(pred, target)?;
    let d = g.dssim(pred, target, consts)?;
    g.add(m, d)
}

fn ser_psnr<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() && *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

fn de_psnr<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }
    match Repr::deserialize(d)? {
        Repr::Num(v) => Ok(v),
        Repr::Str(s) if s == "inf" => Ok(f64::INFINITY),
        Repr::Str(s) => Err(serde::de::Error::custom(format!("bad psnr value {s:?}"))),
    }
}

/// Per-image evaluation record. PSNR of identical images serialises as the
/// string `"inf"`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub id: String,
    pub mse: f64,
    pub ssim: f64,
    pub dssim: f64,
    #[serde(serialize_with = "ser_psnr", deserialize_with = "de_psnr")]
    pub psnr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ssim_windowed: Option<f64>,
}

impl MetricReport {
    pub fn compute(id: impl Into<String>, y: &Image, yhat: &Image, consts: &SsimConstants) -> Result<Self> {
        let d = dssim(y, yhat, consts)?;
        Ok(Self {
            id: id.into(),
            mse: mse(y, yhat)?,
            ssim: 1.0 - 2.0 * d,
            dssim: d,
            psnr: psnr(y, yhat, consts.dynamic_range)?,
            ssim_windowed: Some(ssim_windowed(y, yhat, consts)?),
        })
    }
}
