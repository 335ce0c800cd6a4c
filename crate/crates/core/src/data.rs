//! Paired synthetic phantoms, raw image files and dataset manifests.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Role};
use crate::kspace::{zero_filled_recon, PhaseAxis, SamplingMask};
use crate::par;

/// Monotone piecewise-linear map from a tissue parameter in `[0, 1]` to
/// intensity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastMap {
    knots: Vec<(f64, f64)>,
}

impl ContrastMap {
    pub fn new(knots: Vec<(f64, f64)>) -> Result<Self> {
        if knots.len() < 2 {
            return Err(Error::Config("a contrast map needs at least two knots".into()));
        }
        let ok = knots
            .windows(2)
            .all(|p| p[0].0 < p[1].0 && p[0].1 <= p[1].1);
        if !ok || knots.iter().any(|&(t, v)| !(0.0..=1.0).contains(&t) || !(0.0..=1.0).contains(&v)) {
            return Err(Error::Config(
                "contrast knots must be increasing in tissue, non-decreasing in intensity, within [0, 1]".into(),
            ));
        }
        Ok(Self { knots })
    }

    pub fn t2_like() -> Self {
        Self::new(vec![(0.0, 0.0), (0.2, 0.2), (0.45, 0.35), (0.65, 0.55), (0.85, 0.75), (1.0, 0.92)])
            .expect("valid knots")
    }

    pub fn flair_like() -> Self {
        Self::new(vec![(0.0, 0.0), (0.2, 0.3), (0.45, 0.5), (0.65, 0.6), (0.85, 0.7), (1.0, 0.97)])
            .expect("valid knots")
    }

    pub fn eval(&self, t: f64) -> f64 {
        let k = &self.knots;
        if t <= k[0].0 {
            return k[0].1;
        }
        for p in k.windows(2) {
            let ((t0, v0), (t1, v1)) = (p[0], p[1]);
            if t <= t1 {
                return v0 + (v1 - v0) * (t - t0) / (t1 - t0);
            }
        }
        k[k.len() - 1].1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub height: usize,
    pub width: usize,
    /// Interior structures inside the white matter.
    pub n_ellipses: usize,
    pub n_lesions: usize,
    pub seed: u64,
    pub t2_map: ContrastMap,
    pub flair_map: ContrastMap,
    /// Amplitude of the per-modality sinusoidal texture.
    pub texture: f64,
}

impl PhantomSpec {
    pub fn new(height: usize, width: usize, seed: u64) -> Self {
        Self {
            height,
            width,
            n_ellipses: 8,
            n_lesions: 3,
            seed,
            t2_map: ContrastMap::t2_like(),
            flair_map: ContrastMap::flair_like(),
            texture: 0.04,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

/// Co-registered modality pair with its lesion mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub t2: Image,
    pub flair: Image,
    /// 1 on lesion pixels, 0 elsewhere.
    pub lesions: Image,
}

impl Phantom {
    pub fn lesion_pixels(&self) -> Vec<bool> {
        self.lesions.data().iter().map(|&v| v > 0.5).collect()
    }
}

const SCALP: f64 = 0.6;
const SKULL: f64 = 0.1;
const GRAY: f64 = 0.65;
const WHITE: f64 = 0.45;
const LESION: f64 = 1.0;

struct Ellipse {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn random(rng: &mut ChaCha8Rng, span: f64, axes: (f64, f64), min_axis: f64) -> Self {
        let theta = rng.random_range(0.0..PI);
        Self {
            cy: rng.random_range(-span..span),
            cx: rng.random_range(-span..span),
            a: rng.random_range(axes.0..axes.1).max(min_axis),
            b: rng.random_range(axes.0..axes.1).max(min_axis),
            cos: theta.cos(),
            sin: theta.sin(),
        }
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

/// Brain-like axial slice: scalp, skull, cortex with a folded inner
/// boundary, white matter with interior structures, and small bright
/// lesions. Both modalities share the tissue map and differ only in
/// contrast and an independent low-amplitude texture.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    if spec.n_ellipses == 0 {
        return Err(Error::Config("a phantom needs at least one anatomy ellipse".into()));
    }
    if spec.height < 4 || spec.width < 4 {
        return Err(Error::Config(format!("phantom too small: {}x{}", spec.height, spec.width)));
    }
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let coord = |i: usize, n: usize| (i as f64 + 0.5) / n as f64 * 2.0 - 1.0;
    let radius = |y: f64, x: f64| ((x / 0.85).powi(2) + (y / 0.92).powi(2)).sqrt();

    let (f1, f2) = (rng.random_range(5..12) as f64, rng.random_range(13..20) as f64);
    let (p1, p2) = (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI));
    let fold = |y: f64, x: f64| {
        let th = y.atan2(x);
        0.04 * (f1 * th + p1).sin() + 0.03 * (f2 * th + p2).sin()
    };

    let mut tissue = vec![0.0; h * w];
    for yi in 0..h {
        for xi in 0..w {
            let (y, x) = (coord(yi, h), coord(xi, w));
            let r = radius(y, x);
            tissue[yi * w + xi] = if r <= 0.72 + fold(y, x) {
                WHITE
            } else if r <= 0.86 {
                GRAY
            } else if r <= 0.93 {
                SKULL
            } else if r <= 1.0 {
                SCALP
            } else {
                0.0
            };
        }
    }

    let pixel = 2.0 / h.min(w) as f64;
    for _ in 0..spec.n_ellipses {
        let e = Ellipse::random(&mut rng, 0.5, (0.04, 0.2), 0.6 * pixel);
        let level = rng.random_range(0.3..0.85);
        for yi in 0..h {
            for xi in 0..w {
                let (y, x) = (coord(yi, h), coord(xi, w));
                if radius(y, x) <= 0.7 && e.contains(y, x) {
                    tissue[yi * w + xi] = level;
                }
            }
        }
    }

    let mut lesion = vec![false; h * w];
    for _ in 0..spec.n_lesions {
        let mut placed = false;
        for _ in 0..100 {
            let e = Ellipse::random(&mut rng, 0.5, (0.05, 0.09), 1.2 * pixel);
            let mut pixels = Vec::new();
            let mut fits = true;
            for yi in 0..h {
                for xi in 0..w {
                    let (y, x) = (coord(yi, h), coord(xi, w));
                    if e.contains(y, x) {
                        if radius(y, x) > 0.62 || lesion[yi * w + xi] {
                            fits = false;
                        }
                        pixels.push(yi * w + xi);
                    }
                }
            }
            if fits && !pixels.is_empty() {
                for p in pixels {
                    lesion[p] = true;
                    tissue[p] = LESION;
                }
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Phantom {
                seed: spec.seed,
                detail: "lesion did not fit inside the white matter after 100 attempts".into(),
            });
        }
    }

    let mut render = |map: &ContrastMap| -> Image {
        let waves: Vec<(f64, f64, f64)> = (0..4)
            .map(|_| {
                let fx = rng.random_range(2.0..8.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                let fy = rng.random_range(2.0..8.0);
                (fx, fy, rng.random_range(0.0..2.0 * PI))
            })
            .collect();
        Image::from_fn(h, w, |yi, xi| {
            let i = yi * w + xi;
            let t = tissue[i];
            let mut v = map.eval(t);
            if t > 0.05 && !lesion[i] {
                let (y, x) = (coord(yi, h), coord(xi, w));
                let tex: f64 = waves
                    .iter()
                    .map(|&(fx, fy, ph)| (2.0 * PI * (fx * x + fy * y) + ph).sin())
                    .sum::<f64>()
                    / 4.0;
                v += spec.texture * tex;
            }
            v.clamp(0.0, 1.0)
        })
        .quantize_f32()
    };
    let t2 = render(&spec.t2_map).with_role(Role::Target);
    let flair = render(&spec.flair_map).with_role(Role::Flair);
    let lesions = Image::new(h, w, lesion.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect())?;
    Ok(Phantom { t2, flair, lesions })
}

/// SplitMix64 step, used to derive independent per-sample seeds.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(index.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// One training/evaluation example.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleTriple {
    pub id: String,
    pub seed: u64,
    pub mask_id: String,
    pub t2sub: Image,
    pub flair: Image,
    pub t2: Image,
    pub lesions: Vec<bool>,
}

/// Zero-filled input for `t2`, rounded to `f32` like every stored image.
pub fn subsample(t2: &Image, mask: &SamplingMask, axis: PhaseAxis) -> Result<Image> {
    Ok(zero_filled_recon(t2, mask, axis)?.quantize_f32())
}

pub fn make_triple(id: String, spec: &PhantomSpec, mask: &SamplingMask, axis: PhaseAxis) -> Result<SampleTriple> {
    let ph = generate_phantom(spec)?;
    let lesions = ph.lesion_pixels();
    Ok(SampleTriple {
        id,
        seed: spec.seed,
        mask_id: mask.id(),
        t2sub: subsample(&ph.t2, mask, axis)?,
        flair: ph.flair,
        t2: ph.t2,
        lesions,
    })
}

/// `n` triples with seeds derived from the template's seed.
pub fn build_dataset(
    n: usize,
    template: &PhantomSpec,
    mask: &SamplingMask,
    axis: PhaseAxis,
) -> Result<Vec<SampleTriple>> {
    par::map_range(n, |i| {
        let spec = template.with_seed(derive_seed(template.seed, i as u64));
        make_triple(format!("s{i:05}"), &spec, mask, axis)
    })
    .into_iter()
    .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub seed: u64,
    pub mask_id: String,
    pub paths: BTreeMap<String, String>,
    /// Flat indices of lesion pixels.
    #[serde(default)]
    pub lesion_pixels: Vec<u32>,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = Vec::new();
    for e in entries {
        serde_json::to_writer(&mut out, e).map_err(|source| Error::Json { path: path.into(), source })?;
        out.push(b'\n');
    }
    write_atomic(path, &out)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|source| Error::Json { path: path.into(), source }))
        .collect()
}

/// Writes three raw images per sample plus `manifest.jsonl`.
pub fn save_dataset(dir: &Path, samples: &[SampleTriple]) -> Result<Vec<ManifestEntry>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        let mut paths = BTreeMap::new();
        for (key, img) in [("t2", &s.t2), ("flair", &s.flair), ("t2sub", &s.t2sub)] {
            let name = format!("{}_{key}.raw", s.id);
            save_image(&dir.join(&name), img)?;
            paths.insert(key.to_string(), name);
        }
        entries.push(ManifestEntry {
            id: s.id.clone(),
            seed: s.seed,
            mask_id: s.mask_id.clone(),
            paths,
            lesion_pixels: s
                .lesions
                .iter()
                .enumerate()
                .filter_map(|(i, &l)| l.then_some(i as u32))
                .collect(),
        });
    }
    write_manifest(&dir.join(MANIFEST_FILE), &entries)?;
    Ok(entries)
}

pub fn load_dataset(dir: &Path) -> Result<Vec<SampleTriple>> {
    let entries = read_manifest(&dir.join(MANIFEST_FILE))?;
    entries
        .into_iter()
        .map(|e| {
            let get = |key: &str| -> Result<Image> {
                let name = e.paths.get(key).ok_or_else(|| Error::Format {
                    path: dir.join(MANIFEST_FILE),
                    offset: 0,
                    detail: format!("sample {} lacks a {key} path", e.id),
                })?;
                load_image(&dir.join(name))
            };
            let t2 = get("t2")?.with_role(Role::Target);
            let flair = get("flair")?.with_role(Role::Flair);
            let t2sub = get("t2sub")?.with_role(Role::SubsampledInput);
            let mut lesions = vec![false; t2.len()];
            for &p in &e.lesion_pixels {
                if let Some(l) = lesions.get_mut(p as usize) {
                    *l = true;
                }
            }
            Ok(SampleTriple {
                id: e.id,
                seed: e.seed,
                mask_id: e.mask_id,
                t2sub,
                flair,
                t2,
                lesions,
            })
        })
        .collect()
}

const RAW_MAGIC: &[u8; 8] = b"KSRRAW\0\0";
const RAW_VERSION: u32 = 1;
const RAW_HEADER: usize = 24;

/// Raw format: 8-byte magic, `u32` version, `u32` reserved, then `u32`
/// height and width, then `f32` pixels row-major, all little-endian.
pub fn encode_raw(image: &Image) -> Vec<u8> {
    let mut out = Vec::with_capacity(RAW_HEADER + 4 * image.len());
    out.extend_from_slice(RAW_MAGIC);
    out.extend_from_slice(&RAW_VERSION.to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    out.extend_from_slice(&(image.height() as u32).to_le_bytes());
    out.extend_from_slice(&(image.width() as u32).to_le_bytes());
    for &v in image.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_raw(bytes: &[u8], path: &Path) -> Result<Image> {
    let err = |offset: usize, detail: String| Error::Format {
        path: path.into(),
        offset: offset as u64,
        detail,
    };
    if bytes.len() < RAW_HEADER {
        return Err(err(
            bytes.len(),
            format!("expected a {RAW_HEADER}-byte header, found {} bytes", bytes.len()),
        ));
    }
    if &bytes[..8] != RAW_MAGIC {
        return Err(err(0, "bad magic".into()));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
    if word(8) != RAW_VERSION {
        return Err(err(8, format!("unsupported version {}", word(8))));
    }
    let (h, w) = (word(16) as usize, word(20) as usize);
    let expected = RAW_HEADER + 4 * h * w;
    if bytes.len() != expected {
        return Err(err(
            bytes.len().min(expected),
            format!("{h}x{w} image needs {expected} bytes, found {}", bytes.len()),
        ));
    }
    let data = bytes[RAW_HEADER..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Image::new(h, w, data)
}

pub fn save_image(path: &Path, image: &Image) -> Result<()> {
    write_atomic(path, &encode_raw(image))
}

pub fn load_image(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_raw(&bytes, path)
}

/// 8-bit quantisation: `round(clamp(v, 0, 1) * 255)`, halves away from zero.
pub fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Lossy 8-bit grayscale PNG for viewing.
pub fn export_png(path: &Path, image: &Image) -> Result<()> {
    let pixels: Vec<u8> = image.data().iter().map(|&v| quantize_u8(v)).collect();
    let buf = image::GrayImage::from_raw(image.width() as u32, image.height() as u32, pixels)
        .ok_or_else(|| Error::Encode("pixel buffer size mismatch".into()))?;
    let mut bytes = Vec::new();
    buf.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| Error::Encode(e.to_string()))?;
    write_atomic(path, &bytes)
}

/// Min-max scaled image and whether the input was constant (then all zeros).
#[derive(Clone, Debug)]
pub struct Normalized {
    pub image: Image,
    pub was_constant: bool,
}

pub fn normalize_intensity(height: usize, width: usize, values: &[f64]) -> Result<Normalized> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if values.is_empty() || !(hi > lo) {
        return Ok(Normalized {
            image: Image::new(height, width, vec![0.0; values.len()])?,
            was_constant: true,
        });
    }
    let span = hi - lo;
    let data = values.iter().map(|v| ((v - lo) / span).clamp(0.0, 1.0)).collect();
    Ok(Normalized {
        image: Image::new(height, width, data)?,
        was_constant: false,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interp {
    Nearest,
    Bilinear,
}

/// Resamples to `height x width` with half-pixel-centred coordinates.
pub fn resample(image: &Image, height: usize, width: usize, interp: Interp) -> Image {
    let (h, w) = image.shape();
    let src = |o: usize, n_out: usize, n_in: usize| ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
    Image::from_fn(height, width, |y, x| {
        let (sy, sx) = (src(y, height, h), src(x, width, w));
        match interp {
            Interp::Nearest => image.get(sy.round() as usize, sx.round() as usize),
            Interp::Bilinear => {
                let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
                (1.0 - fy) * ((1.0 - fx) * image.get(y0, x0) + fx * image.get(y0, x1))
                    + fy * ((1.0 - fx) * image.get(y1, x0) + fx * image.get(y1, x1))
            }
        }
    })
    .with_role(image.role())
}

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut tmp: PathBuf = path.to_path_buf();
    let name = path
        .file_name()
        .map(|n| format!(".{}.tmp", n.to_string_lossy()))
        .unwrap_or_else(|| ".tmp".into());
    tmp.set_file_name(name);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
