//! Forward model of accelerated acquisition: centered orthonormal 2-D FFT,
//! phase-encode line masks, masking and zero-filled reconstruction.

use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Role};

/// Axis along which k-space lines are acquired.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhaseAxis {
    /// Rows: a "line" is one row of k-space.
    Height,
    /// Columns: a "line" is one column of k-space.
    #[default]
    Width,
}

/// Complex spectrum with DC at `(H/2, W/2)` (integer division).
#[derive(Clone, Debug, PartialEq)]
pub struct KSpace {
    height: usize,
    width: usize,
    data: Vec<Complex64>,
}

impl KSpace {
    pub fn new(height: usize, width: usize, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape("kspace", format!("{height}x{width} needs {} values, got {}", height * width, data.len())));
        }
        Ok(Self { height, width, data })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> Complex64 {
        self.data[y * self.width + x]
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).sum()
    }

    pub fn lines(&self, axis: PhaseAxis) -> usize {
        match axis {
            PhaseAxis::Height => self.height,
            PhaseAxis::Width => self.width,
        }
    }

    /// Energy carried by the given phase-encode lines.
    pub fn line_energy(&self, axis: PhaseAxis, line: usize) -> f64 {
        match axis {
            PhaseAxis::Height => self.data[line * self.width..(line + 1) * self.width]
                .iter()
                .map(|c| c.norm_sqr())
                .sum(),
            PhaseAxis::Width => (0..self.height).map(|y| self.get(y, line).norm_sqr()).sum(),
        }
    }
}

// In-place 1-D transforms along rows then columns, no scaling.
fn fft2_raw(data: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    let (row, col) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    for r in data.chunks_mut(w) {
        row.process(r);
    }
    let mut buf = vec![Complex64::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            buf[y] = data[y * w + x];
        }
        col.process(&mut buf);
        for y in 0..h {
            data[y * w + x] = buf[y];
        }
    }
}

// Cyclic shift moving index 0 to (h/2, w/2); `inverse` undoes it.
fn shift(data: &[Complex64], h: usize, w: usize, inverse: bool) -> Vec<Complex64> {
    let (sy, sx) = (h / 2, w / 2);
    let mut out = vec![Complex64::new(0.0, 0.0); data.len()];
    for y in 0..h {
        for x in 0..w {
            let (ty, tx) = if inverse {
                ((y + h - sy) % h, (x + w - sx) % w)
            } else {
                ((y + sy) % h, (x + sx) % w)
            };
            out[ty * w + tx] = data[y * w + x];
        }
    }
    out
}

/// Centered, orthonormal 2-D DFT.
pub fn fft2(image: &Image) -> KSpace {
    let (h, w) = image.shape();
    let mut data: Vec<Complex64> = image.data().iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft2_raw(&mut data, h, w, false);
    let scale = 1.0 / ((h * w) as f64).sqrt();
    for c in &mut data {
        *c *= scale;
    }
    KSpace {
        height: h,
        width: w,
        data: shift(&data, h, w, false),
    }
}

/// Result of an inverse transform: the real part plus the largest discarded
/// imaginary magnitude.
#[derive(Clone, Debug)]
pub struct Inverse {
    pub image: Image,
    pub max_imag: f64,
}

/// Inverse of [`fft2`], keeping the real part.
pub fn ifft2(kspace: &KSpace) -> Inverse {
    let (h, w) = kspace.shape();
    let mut data = shift(&kspace.data, h, w, true);
    fft2_raw(&mut data, h, w, true);
    let scale = 1.0 / ((h * w) as f64).sqrt();
    let max_imag = data.iter().map(|c| (c.im * scale).abs()).fold(0.0, f64::max);
    let real = data.iter().map(|c| c.re * scale).collect();
    Inverse {
        image: Image::new(h, w, real).expect("consistent extents"),
        max_imag,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    /// All kept lines form one central block.
    Center,
    /// A central block plus equidistant outer lines.
    Custom,
}

impl fmt::Display for MaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskKind::Center => "center",
            MaskKind::Custom => "custom",
        })
    }
}

impl FromStr for MaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "center" => Ok(MaskKind::Center),
            "custom" => Ok(MaskKind::Custom),
            other => Err(Error::Config(format!("unknown mask kind {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskConfig {
    /// Subsampling factor: total lines over kept lines.
    pub factor: f64,
    /// Fraction of kept lines placed contiguously at the center.
    pub center_fraction: f64,
    pub kind: MaskKind,
}

impl MaskConfig {
    pub fn center(factor: f64) -> Self {
        Self {
            factor,
            center_fraction: 1.0,
            kind: MaskKind::Center,
        }
    }

    pub fn custom(factor: f64, center_fraction: f64) -> Self {
        Self {
            factor,
            center_fraction,
            kind: MaskKind::Custom,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.factor.is_finite() && self.factor >= 1.0) {
            return Err(Error::Config(format!("subsampling factor must be >= 1, got {}", self.factor)));
        }
        if !(self.center_fraction > 0.0 && self.center_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "center fraction must lie in (0, 1], got {}",
                self.center_fraction
            )));
        }
        if self.kind == MaskKind::Center && self.center_fraction != 1.0 {
            return Err(Error::Config("a center mask keeps all lines at the center (fraction 1)".into()));
        }
        Ok(())
    }
}

/// Binary per-line mask over the phase-encode axis.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingMask {
    length: usize,
    kept: Vec<usize>,
    config: MaskConfig,
}

/// Round half away from zero, the single rounding rule for mask arithmetic.
fn round_half_away(v: f64) -> usize {
    v.round() as usize
}

impl SamplingMask {
    /// Builds the kept-line set for `n_lines` lines.
    ///
    /// `round(N / k)` lines are kept. `round(center_fraction * kept)` of them
    /// form a contiguous block starting at `N/2 - n_center/2`. The rest sit at
    /// equally spaced real positions `(j + 1/2) * M / n_outer - 1/2` along the
    /// `M` lines outside the block, each snapped to the nearest unused line
    /// (lower index on ties).
    pub fn new(n_lines: usize, config: MaskConfig) -> Result<Self> {
        config.validate()?;
        if n_lines < 4 {
            return Err(Error::Config(format!("need at least 4 lines, got {n_lines}")));
        }
        let n_keep = round_half_away(n_lines as f64 / config.factor);
        if n_keep < 2 {
            return Err(Error::Config(format!(
                "{n_lines} lines at factor {} keep fewer than 2 lines",
                config.factor
            )));
        }
        let n_center = round_half_away(config.center_fraction * n_keep as f64).clamp(1, n_keep);
        let start = (n_lines / 2).saturating_sub(n_center / 2).min(n_lines - n_center);
        let mut used = vec![false; n_lines];
        for u in &mut used[start..start + n_center] {
            *u = true;
        }
        let outside: Vec<usize> = (0..n_lines).filter(|&i| !used[i]).collect();
        let n_outer = n_keep - n_center;
        let m = outside.len();
        for j in 0..n_outer {
            let pos = (j as f64 + 0.5) * m as f64 / n_outer as f64 - 0.5;
            let slot = nearest_unused(pos, &outside, &used);
            used[outside[slot]] = true;
        }
        let kept = (0..n_lines).filter(|&i| used[i]).collect();
        Ok(Self {
            length: n_lines,
            kept,
            config,
        })
    }

    /// Keeps every line.
    pub fn full(n_lines: usize) -> Self {
        Self {
            length: n_lines,
            kept: (0..n_lines).collect(),
            config: MaskConfig::center(1.0),
        }
    }

    pub fn len(&self) -> usize {
        self.length
    }

    pub fn is_empty(&self) -> bool {
        self.length == 0
    }

    pub fn kept(&self) -> &[usize] {
        &self.kept
    }

    pub fn config(&self) -> &MaskConfig {
        &self.config
    }

    pub fn contains(&self, line: usize) -> bool {
        self.kept.binary_search(&line).is_ok()
    }

    pub fn as_bools(&self) -> Vec<bool> {
        let mut v = vec![false; self.length];
        for &i in &self.kept {
            v[i] = true;
        }
        v
    }

    /// Effective acceleration `N / |kept|`.
    pub fn acceleration(&self) -> f64 {
        self.length as f64 / self.kept.len() as f64
    }

    /// Short identifier such as `custom-k4-cf0.8-n64`.
    pub fn id(&self) -> String {
        format!(
            "{}-k{}-cf{}-n{}",
            self.config.kind, self.config.factor, self.config.center_fraction, self.length
        )
    }

    /// Two-line text form: `N k kind center_fraction`, then the kept indices.
    pub fn to_text(&self) -> String {
        let idx: Vec<String> = self.kept.iter().map(|i| i.to_string()).collect();
        format!(
            "{} {} {} {}\n{}\n",
            self.length,
            self.config.factor,
            self.config.kind,
            self.config.center_fraction,
            idx.join(" ")
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |d: String| Error::Config(format!("mask text: {d}"));
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("missing header".into()))?;
        let f: Vec<&str> = header.split_whitespace().collect();
        if f.len() != 4 {
            return Err(bad(format!("header needs 4 fields, got {}", f.len())));
        }
        let length: usize = f[0].parse().map_err(|_| bad(format!("bad line count {:?}", f[0])))?;
        let factor: f64 = f[1].parse().map_err(|_| bad(format!("bad factor {:?}", f[1])))?;
        let kind: MaskKind = f[2].parse()?;
        let center_fraction: f64 = f[3].parse().map_err(|_| bad(format!("bad center fraction {:?}", f[3])))?;
        let config = MaskConfig {
            factor,
            center_fraction,
            kind,
        };
        config.validate()?;
        let mut kept = Vec::new();
        for tok in lines.next().unwrap_or("").split_whitespace() {
            let i: usize = tok.parse().map_err(|_| bad(format!("bad index {tok:?}")))?;
            if i >= length {
                return Err(bad(format!("index {i} outside 0..{length}")));
            }
            kept.push(i);
        }
        if kept.windows(2).any(|p| p[0] >= p[1]) {
            return Err(bad("indices must be strictly increasing".into()));
        }
        Ok(Self {
            length,
            kept,
            config,
        })
    }
}

fn nearest_unused(pos: f64, outside: &[usize], used: &[bool]) -> usize {
    let mut best: Option<(f64, usize)> = None;
    for (slot, &line) in outside.iter().enumerate() {
        if used[line] {
            continue;
        }
        let d = (slot as f64 - pos).abs();
        // Strict comparison keeps the lower index on ties.
        if best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, slot));
        }
    }
    best.expect("fewer outer lines than free slots").1
}

/// Zeroes every phase-encode line not kept by `mask`.
pub fn apply_mask(kspace: &KSpace, mask: &SamplingMask, axis: PhaseAxis) -> Result<KSpace> {
    let n = kspace.lines(axis);
    if mask.len() != n {
        return Err(Error::shape(
            "apply_mask",
            format!("mask covers {} lines but k-space has {n} along {axis:?}", mask.len()),
        ));
    }
    let keep = mask.as_bools();
    let (h, w) = kspace.shape();
    let zero = Complex64::new(0.0, 0.0);
    let mut data = kspace.data.clone();
    for y in 0..h {
        for x in 0..w {
            let line = match axis {
                PhaseAxis::Height => y,
                PhaseAxis::Width => x,
            };
            if !keep[line] {
                data[y * w + x] = zero;
            }
        }
    }
    Ok(KSpace {
        height: h,
        width: w,
        data,
    })
}

/// Real part of the inverse transform of masked k-space, before clamping.
pub fn zero_filled_unclamped(image: &Image, mask: &SamplingMask, axis: PhaseAxis) -> Result<Image> {
    let k = apply_mask(&fft2(image), mask, axis)?;
    Ok(ifft2(&k).image)
}

/// Zero-filled reconstruction clamped to `[0, 1]`: the network's T2 input.
pub fn zero_filled_recon(image: &Image, mask: &SamplingMask, axis: PhaseAxis) -> Result<Image> {
    Ok(zero_filled_unclamped(image, mask, axis)?
        .clamp01()
        .with_role(Role::SubsampledInput))
}
