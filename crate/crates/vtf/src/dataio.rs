//! Paired visible/thermal datasets: manifest files, PNG IO, color jitter,
//! a deterministic synthetic face generator, and the epoch-shuffled loader.
//!
//! A dataset is a directory with a `manifest.json` listing image pairs:
//!
//! ```json
//! {
//!   "root": ".",
//!   "entries": [
//!     { "id": "pair_0000", "visible": "visible/pair_0000.png",
//!       "thermal": "thermal/pair_0000.png", "split": "train",
//!       "subject": "s000" }
//!   ]
//! }
//! ```
//!
//! `root` is resolved relative to the manifest's own directory. Loading
//! validates structure (unique ids, known splits, non-empty) and that every
//! referenced file exists.

use crate::error::{Error, Result};
use crate::image::{luminance, ImageTensor, RangeTag};
use crate::rng::RunSeed;
use crate::scalar::Scalar;
use ndarray::{Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

// ---------------------------------------------------------------------------
// Manifest

/// Which partition a pair belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One visible/thermal pair. Paths are relative to the manifest root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub visible: String,
    pub thermal: String,
    pub split: Split,
    pub subject: String,
}

/// On-disk JSON shape of a manifest.
#[derive(Serialize, Deserialize)]
struct ManifestFile {
    root: String,
    entries: Vec<ManifestEntry>,
}

/// A validated dataset listing with a resolved root directory.
#[derive(Debug, Clone)]
pub struct Manifest {
    root: PathBuf,
    entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// Builds a manifest from parts, checking structure (non-empty, unique
    /// ids) but not file existence.
    pub fn new(root: PathBuf, entries: Vec<ManifestEntry>) -> Result<Self> {
        let m = Manifest { root, entries };
        m.validate_structure()?;
        Ok(m)
    }

    /// Reads and fully validates a manifest: JSON shape, unique ids, known
    /// splits, and that every referenced image file exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let file: ManifestFile = serde_json::from_str(&text)
            .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let root = PathBuf::from(&file.root);
        let root = if root.is_relative() { dir.join(root) } else { root };
        let m = Manifest {
            root,
            entries: file.entries,
        };
        m.validate_structure()?;
        m.validate_files()?;
        Ok(m)
    }

    /// Writes the manifest as JSON. When the target sits directly inside the
    /// root directory the root is written as `"."` so the dataset stays
    /// relocatable.
    pub fn save(&self, path: &Path) -> Result<()> {
        let parent = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let root = if parent == self.root {
            ".".to_string()
        } else {
            self.root.display().to_string()
        };
        let file = ManifestFile {
            root,
            entries: self.entries.clone(),
        };
        let text = serde_json::to_string_pretty(&file)?;
        fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }

    fn validate_structure(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::Manifest("manifest has no entries".into()));
        }
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Manifest(format!("duplicate entry id {:?}", e.id)));
            }
        }
        Ok(())
    }

    fn validate_files(&self) -> Result<()> {
        for e in &self.entries {
            for rel in [&e.visible, &e.thermal] {
                let p = self.root.join(rel);
                if !p.is_file() {
                    return Err(Error::Manifest(format!(
                        "entry {:?} references missing file {}",
                        e.id,
                        p.display()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn entries_for(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    pub fn visible_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.visible)
    }

    pub fn thermal_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.thermal)
    }
}

// ---------------------------------------------------------------------------
// PNG IO

/// Loads a PNG as a byte-range RGB tensor (other color types are converted).
pub fn load_png<S: Scalar>(path: &Path) -> Result<ImageTensor<S>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    ImageTensor::from_u8_interleaved(img.as_raw(), 3, h as usize, w as usize)
}

/// Saves a byte-range tensor (1 or 3 channels) as a PNG.
pub fn save_png<S: Scalar>(path: &Path, img: &ImageTensor<S>) -> Result<()> {
    let buf = img.to_u8_interleaved()?;
    let (w, h) = (img.width() as u32, img.height() as u32);
    match img.channels() {
        3 => image::RgbImage::from_raw(w, h, buf)
            .expect("buffer sized from dims")
            .save_with_format(path, image::ImageFormat::Png)?,
        1 => image::GrayImage::from_raw(w, h, buf)
            .expect("buffer sized from dims")
            .save_with_format(path, image::ImageFormat::Png)?,
        c => {
            return Err(Error::InvalidArgument {
                context: "save_png",
                message: format!("expected 1 or 3 channels, got {c}"),
            })
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Color jitter

/// Jitter strengths. A factor-type strength `s` draws from
/// `[max(0, 1-s), 1+s]`; hue draws a shift from `[-s, s]` (`s ≤ 0.5`).
/// A zero strength disables that stage entirely, keeping the output
/// bit-identical for that component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JitterParams {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

impl Default for JitterParams {
    fn default() -> Self {
        JitterParams {
            brightness: 0.5,
            contrast: 0.75,
            saturation: 1.5,
            hue: 0.5,
        }
    }
}

/// A concrete draw: multiplicative factors plus an additive hue shift in
/// turns. Stages apply in the fixed order brightness → contrast →
/// saturation → hue.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JitterDraw {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

impl JitterDraw {
    /// The draw that leaves images untouched.
    pub fn identity() -> Self {
        JitterDraw {
            brightness: 1.0,
            contrast: 1.0,
            saturation: 1.0,
            hue: 0.0,
        }
    }
}

impl JitterParams {
    /// Draws concrete factors. Always consumes the generator in the fixed
    /// stage order; zero-strength stages draw nothing.
    pub fn draw(&self, rng: &mut ChaCha8Rng) -> JitterDraw {
        assert!(
            self.hue <= 0.5 && self.hue >= 0.0,
            "hue strength must sit in [0, 0.5], got {}",
            self.hue
        );
        let factor = |rng: &mut ChaCha8Rng, s: f64| -> f64 {
            if s <= 0.0 {
                1.0
            } else {
                rng.random_range((1.0 - s).max(0.0)..1.0 + s)
            }
        };
        let brightness = factor(rng, self.brightness);
        let contrast = factor(rng, self.contrast);
        let saturation = factor(rng, self.saturation);
        let hue = if self.hue <= 0.0 {
            0.0
        } else {
            rng.random_range(-self.hue..self.hue)
        };
        JitterDraw {
            brightness,
            contrast,
            saturation,
            hue,
        }
    }
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let maxc = r.max(g).max(b);
    let minc = r.min(g).min(b);
    let v = maxc;
    let delta = maxc - minc;
    if delta <= 0.0 {
        return (0.0, 0.0, v);
    }
    let s = delta / maxc;
    let h = if maxc == r {
        (g - b) / delta
    } else if maxc == g {
        2.0 + (b - r) / delta
    } else {
        4.0 + (r - g) / delta
    };
    ((h / 6.0).rem_euclid(1.0), s, v)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = (h6.floor() as i64).rem_euclid(6);
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Applies a jitter draw to a byte-range RGB image. Stages run in the fixed
/// order brightness → contrast → saturation → hue; each stage at its
/// identity factor is skipped outright, so an all-identity draw returns the
/// input bit-identically.
pub fn apply_jitter<S: Scalar>(img: &ImageTensor<S>, draw: &JitterDraw) -> Result<ImageTensor<S>> {
    if img.tag() != RangeTag::Byte {
        return Err(Error::InvalidArgument {
            context: "apply_jitter",
            message: "jitter operates on byte-range images".into(),
        });
    }
    if img.channels() != 3 {
        return Err(Error::InvalidArgument {
            context: "apply_jitter",
            message: format!("jitter needs 3 channels, got {}", img.channels()),
        });
    }
    if *draw == JitterDraw::identity() {
        return Ok(img.clone());
    }

    let mut work: Array3<f64> = img.data().mapv(|v| v.to_f64() / 255.0);
    if draw.brightness != 1.0 {
        let b = draw.brightness;
        work.mapv_inplace(|v| (v * b).clamp(0.0, 1.0));
    }
    if draw.contrast != 1.0 {
        let c = draw.contrast;
        let mean = luminance(&work).mean().expect("non-empty image");
        work.mapv_inplace(|v| (c * v + (1.0 - c) * mean).clamp(0.0, 1.0));
    }
    if draw.saturation != 1.0 {
        let s = draw.saturation;
        let gray = luminance(&work);
        let (h, w) = (work.shape()[1], work.shape()[2]);
        for y in 0..h {
            for x in 0..w {
                let g = gray[[y, x]];
                for ch in 0..3 {
                    let v = work[[ch, y, x]];
                    work[[ch, y, x]] = (s * v + (1.0 - s) * g).clamp(0.0, 1.0);
                }
            }
        }
    }
    if draw.hue != 0.0 {
        let (h, w) = (work.shape()[1], work.shape()[2]);
        for y in 0..h {
            for x in 0..w {
                let (hh, ss, vv) = rgb_to_hsv(work[[0, y, x]], work[[1, y, x]], work[[2, y, x]]);
                let (r, g, b) = hsv_to_rgb(hh + draw.hue, ss, vv);
                work[[0, y, x]] = r;
                work[[1, y, x]] = g;
                work[[2, y, x]] = b;
            }
        }
    }
    ImageTensor::new(work.mapv(|v| S::from_f64(v * 255.0)), RangeTag::Byte)
}

/// Collapses an RGB image to a single luma channel, preserving the range tag.
pub fn to_grayscale<S: Scalar>(img: &ImageTensor<S>) -> Result<ImageTensor<S>> {
    let (h, w) = (img.height(), img.width());
    let luma = img.luminance();
    let data = luma
        .into_shape_with_order((1, h, w))
        .expect("luma has h*w elements");
    ImageTensor::new(data, img.tag())
}

// ---------------------------------------------------------------------------
// Synthetic faces

/// Images sharing one face geometry (consecutive indices form a subject).
pub const IMAGES_PER_SUBJECT: u64 = 4;

/// Subject id of a pair index.
pub fn subject_of(index: u64) -> u64 {
    index / IMAGES_PER_SUBJECT
}

/// Layout and palette of one synthetic face, in normalized `[0, 1]²`
/// image coordinates. Drawn per subject, perturbed per image, and shared by
/// the visible and thermal renderers so the modalities stay aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceGeometry {
    pub center: (f64, f64),
    pub radii: (f64, f64),
    pub eye_dx: f64,
    pub eye_y: f64,
    pub eye_r: f64,
    pub nose_y: f64,
    pub mouth_y: f64,
    pub mouth_radii: (f64, f64),
    pub skin: [f64; 3],
    pub iris: [f64; 3],
    pub lip: [f64; 3],
    pub bg_top: [f64; 3],
    pub bg_bottom: [f64; 3],
    pub wave_freq: f64,
    pub wave_phase: f64,
    pub wave_amp: f64,
}

impl FaceGeometry {
    pub fn eye_centers(&self) -> [(f64, f64); 2] {
        let (cx, _) = self.center;
        [(cx - self.eye_dx, self.eye_y), (cx + self.eye_dx, self.eye_y)]
    }
}

/// The geometry of pair `index`: base layout drawn from the subject stream,
/// pose/palette perturbation from the per-image stream. Pure function of
/// `(seed, index)`.
pub fn face_geometry(seed: RunSeed, index: u64) -> FaceGeometry {
    let mut sub = seed.stream_indexed("face-geometry", &[subject_of(index)]);
    let mut r = |lo: f64, hi: f64| sub.random_range(lo..hi);
    let cx = r(0.47, 0.53);
    let cy = r(0.49, 0.55);
    let rx = r(0.30, 0.36);
    let ry = r(0.38, 0.44);
    let eye_dx = r(0.115, 0.15);
    let eye_y = cy - r(0.085, 0.115);
    let eye_r = r(0.035, 0.05);
    let nose_y = cy + r(0.05, 0.07);
    let mouth_y = cy + r(0.18, 0.22);
    let mouth_radii = (r(0.08, 0.12), r(0.02, 0.035));
    let skin = [r(0.72, 0.88), r(0.55, 0.70), r(0.45, 0.60)];
    let iris = [r(0.05, 0.25), r(0.05, 0.25), r(0.05, 0.30)];
    let lip = [r(0.55, 0.75), r(0.20, 0.30), r(0.25, 0.35)];
    let bg_top = [r(0.10, 0.45), r(0.10, 0.45), r(0.10, 0.45)];
    let bg_bottom = [r(0.10, 0.45), r(0.10, 0.45), r(0.10, 0.45)];
    let wave_freq = r(5.0, 9.0);
    let wave_phase = r(0.0, std::f64::consts::TAU);
    let wave_amp = r(0.01, 0.03);

    let mut pose = seed.stream_indexed("face-pose", &[index]);
    let mut p = |lo: f64, hi: f64| pose.random_range(lo..hi);
    let dcx = p(-0.012, 0.012);
    let dcy = p(-0.012, 0.012);
    let scale = p(0.97, 1.03);
    let d_eye = p(-0.004, 0.004);

    FaceGeometry {
        center: (cx + dcx, cy + dcy),
        radii: (rx * scale, ry * scale),
        eye_dx: eye_dx + d_eye,
        eye_y: eye_y + dcy,
        eye_r,
        nose_y: nose_y + dcy,
        mouth_y: mouth_y + dcy,
        mouth_radii,
        skin,
        iris,
        lip,
        bg_top,
        bg_bottom,
        wave_freq,
        wave_phase,
        wave_amp,
    }
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Normalized elliptical radius: 1 on the boundary, < 1 inside.
fn ellipse_r(u: f64, v: f64, c: (f64, f64), r: (f64, f64)) -> f64 {
    let du = (u - c.0) / r.0;
    let dv = (v - c.1) / r.1;
    (du * du + dv * dv).sqrt()
}

/// Anti-aliased inside-coverage of an ellipse (soft edge ~1.5 px wide).
fn ellipse_cover(u: f64, v: f64, c: (f64, f64), r: (f64, f64), size: usize) -> f64 {
    let aa = 1.5 / (size as f64 * r.0.min(r.1));
    1.0 - smoothstep(1.0 - aa, 1.0 + aa, ellipse_r(u, v, c, r))
}

fn gauss(u: f64, v: f64, c: (f64, f64), sigma: f64) -> f64 {
    let d2 = (u - c.0).powi(2) + (v - c.1).powi(2);
    (-d2 / (2.0 * sigma * sigma)).exp()
}

fn mix3(base: [f64; 3], top: [f64; 3], t: f64) -> [f64; 3] {
    [
        base[0] + (top[0] - base[0]) * t,
        base[1] + (top[1] - base[1]) * t,
        base[2] + (top[2] - base[2]) * t,
    ]
}

fn render_visible(geom: &FaceGeometry, size: usize) -> Array3<f64> {
    let mut out = Array3::zeros((3, size, size));
    let [eye_l, eye_r_c] = geom.eye_centers();
    let (cx, _) = geom.center;
    for y in 0..size {
        for x in 0..size {
            let u = (x as f64 + 0.5) / size as f64;
            let v = (y as f64 + 0.5) / size as f64;
            let wave = geom.wave_amp
                * (geom.wave_freq * std::f64::consts::TAU * u + geom.wave_phase).sin()
                * (geom.wave_freq * 1.7 * std::f64::consts::TAU * v + 0.7 * geom.wave_phase).sin();

            let mut color = mix3(geom.bg_top, geom.bg_bottom, v);

            // Face: shaded skin, brighter toward the center for roundness.
            let fr = ellipse_r(u, v, geom.center, geom.radii);
            let f_cover = ellipse_cover(u, v, geom.center, geom.radii, size);
            let shade = 0.90 + 0.10 * (1.0 - fr * fr).max(0.0) + wave;
            let skin = [
                geom.skin[0] * shade,
                geom.skin[1] * shade,
                geom.skin[2] * shade,
            ];
            color = mix3(color, skin, f_cover);

            for eye in [eye_l, eye_r_c] {
                // Sclera, iris, and a soft brow band above.
                let sclera = ellipse_cover(u, v, eye, (geom.eye_r * 1.6, geom.eye_r), size);
                color = mix3(color, [0.93, 0.93, 0.90], sclera);
                let iris =
                    ellipse_cover(u, v, eye, (geom.eye_r * 0.55, geom.eye_r * 0.55), size);
                color = mix3(color, geom.iris, iris);
                let brow = gauss(u, (v - (eye.1 - geom.eye_r * 2.2)) * 3.0 + eye.1, eye, 0.05);
                color = mix3(color, [0.15, 0.10, 0.08], 0.6 * brow * f_cover);
            }

            // Nose: a subtle vertical shadow ending at the tip.
            let nose = gauss(u * 2.0 - cx, v, (cx, geom.nose_y), 0.035);
            color = mix3(
                color,
                [color[0] * 0.75, color[1] * 0.75, color[2] * 0.75],
                0.5 * nose * f_cover,
            );

            // Mouth.
            let mouth = ellipse_cover(u, v, (cx, geom.mouth_y), geom.mouth_radii, size);
            color = mix3(color, geom.lip, mouth * f_cover);

            for (c, val) in color.iter().enumerate() {
                out[[c, y, x]] = val.clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Byte sub-range occupied by synthetic thermal pixels (headroom for jitter).
pub const THERMAL_BYTE_LO: f64 = 30.0;
/// See [`THERMAL_BYTE_LO`].
pub const THERMAL_BYTE_HI: f64 = 225.0;

/// Normalized temperature field in `[0, 1]`: warm periorbital regions, a
/// cold nose tip, a mildly warm forehead and mouth over a warm face on a
/// cool background.
fn render_thermal_field(geom: &FaceGeometry, size: usize) -> Array3<f64> {
    let mut out = Array3::zeros((1, size, size));
    let [eye_l, eye_r_c] = geom.eye_centers();
    let (cx, _) = geom.center;
    for y in 0..size {
        for x in 0..size {
            let u = (x as f64 + 0.5) / size as f64;
            let v = (y as f64 + 0.5) / size as f64;
            let wave = geom.wave_amp
                * 0.7
                * (geom.wave_freq * std::f64::consts::TAU * v + geom.wave_phase).sin();

            let fr = ellipse_r(u, v, geom.center, geom.radii);
            let f_cover = ellipse_cover(u, v, geom.center, geom.radii, size);
            let bg = 0.05 + 0.04 * v;
            let face = 0.58 + 0.06 * (1.0 - fr * fr).max(0.0) + wave;
            let mut t = bg + (face - bg) * f_cover;

            let periorbital =
                gauss(u, v, eye_l, geom.eye_r * 1.9) + gauss(u, v, eye_r_c, geom.eye_r * 1.9);
            let forehead = gauss(u, v, (cx, geom.eye_y - 0.16), 0.09);
            let nose = gauss(u, v, (cx, geom.nose_y), 0.045);
            let mouth = gauss(u, v, (cx, geom.mouth_y), 0.05);
            t += f_cover * (0.28 * periorbital + 0.10 * forehead - 0.38 * nose + 0.12 * mouth);

            out[[0, y, x]] = t.clamp(0.0, 1.0);
        }
    }
    out
}

/// Maps a normalized temperature to thermal RGB bytes. The red channel is
/// affine in temperature (`30 + 195 t`), so decoding red back to Celsius is
/// exact; green and blue add color structure for the jitter transforms.
fn thermal_palette(t: f64) -> [f64; 3] {
    let span = THERMAL_BYTE_HI - THERMAL_BYTE_LO;
    [
        THERMAL_BYTE_LO + span * t,
        THERMAL_BYTE_LO + span * t.powf(1.8),
        THERMAL_BYTE_LO + 60.0 * (1.0 - t),
    ]
}

/// Renders the visible/thermal pair for `index` as byte-range tensors. Pure
/// function of `(seed, index, size)`.
pub fn synthesize_pair<S: Scalar>(
    seed: RunSeed,
    index: u64,
    size: usize,
) -> Result<(ImageTensor<S>, ImageTensor<S>)> {
    if size < 16 {
        return Err(Error::InvalidArgument {
            context: "synthesize_pair",
            message: format!("size must be at least 16, got {size}"),
        });
    }
    let geom = face_geometry(seed, index);
    let vis = render_visible(&geom, size);
    let field = render_thermal_field(&geom, size);

    let visible = ImageTensor::new(
        vis.mapv(|v| S::from_f64((v * 255.0).round())),
        RangeTag::Byte,
    )?;
    let mut th = Array3::zeros((3, size, size));
    for y in 0..size {
        for x in 0..size {
            let rgb = thermal_palette(field[[0, y, x]]);
            for c in 0..3 {
                th[[c, y, x]] = S::from_f64(rgb[c].round());
            }
        }
    }
    let thermal = ImageTensor::new(th, RangeTag::Byte)?;
    Ok((visible, thermal))
}

/// Parameters of a generated dataset.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SynthesisSpec {
    pub count: usize,
    pub size: usize,
    pub seed: u64,
}

/// Renders `count` pairs under `out_dir` (`visible/`, `thermal/`,
/// `manifest.json`) and returns the manifest. Every fourth subject's images
/// are held out as the test split, so splits are subject-disjoint.
pub fn generate_dataset(spec: &SynthesisSpec, out_dir: &Path) -> Result<Manifest> {
    if spec.count == 0 {
        return Err(Error::InvalidArgument {
            context: "generate_dataset",
            message: "count must be positive".into(),
        });
    }
    for sub in ["visible", "thermal"] {
        let dir = out_dir.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }
    let seed = RunSeed(spec.seed);
    let mut entries = Vec::with_capacity(spec.count);
    for i in 0..spec.count as u64 {
        let (vis, th) = synthesize_pair::<f32>(seed, i, spec.size)?;
        let id = format!("pair_{i:04}");
        let visible = format!("visible/{id}.png");
        let thermal = format!("thermal/{id}.png");
        save_png(&out_dir.join(&visible), &vis)?;
        save_png(&out_dir.join(&thermal), &th)?;
        let subject = subject_of(i);
        entries.push(ManifestEntry {
            id,
            visible,
            thermal,
            split: if subject % 4 == 3 {
                Split::Test
            } else {
                Split::Train
            },
            subject: format!("s{subject:03}"),
        });
    }
    let manifest = Manifest::new(out_dir.to_path_buf(), entries)?;
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// Loader

/// A pair loaded at byte scale, before any normalization or augmentation.
#[derive(Debug, Clone)]
pub struct RawPair<S: Scalar> {
    pub id: String,
    pub visible: ImageTensor<S>,
    pub thermal: ImageTensor<S>,
}

/// Normalized, batched pairs: `[N, 3, H, W]` in `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct PairBatch<S: Scalar> {
    pub ids: Vec<String>,
    pub visible: Array4<S>,
    pub thermal: Array4<S>,
}

/// One split of a manifest, with deterministic per-epoch shuffling.
#[derive(Debug, Clone)]
pub struct PairedDataset {
    root: PathBuf,
    entries: Vec<ManifestEntry>,
}

impl PairedDataset {
    pub fn from_manifest(manifest: &Manifest, split: Split) -> Result<Self> {
        let entries: Vec<ManifestEntry> = manifest
            .entries_for(split)
            .into_iter()
            .cloned()
            .collect();
        if entries.is_empty() {
            return Err(Error::Manifest(format!("no entries in split {split:?}")));
        }
        Ok(PairedDataset {
            root: manifest.root().to_path_buf(),
            entries,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, i: usize) -> &ManifestEntry {
        &self.entries[i]
    }

    /// Loads pair `i` at byte scale.
    pub fn load_pair<S: Scalar>(&self, i: usize) -> Result<RawPair<S>> {
        let e = &self.entries[i];
        Ok(RawPair {
            id: e.id.clone(),
            visible: load_png(&self.root.join(&e.visible))?,
            thermal: load_png(&self.root.join(&e.thermal))?,
        })
    }

    /// The visit order for an epoch: a Fisher–Yates shuffle drawn from the
    /// `(seed, epoch)` stream, so any epoch's order can be reproduced without
    /// replaying earlier ones.
    pub fn epoch_order(&self, seed: RunSeed, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut rng = seed.stream_indexed("epoch-shuffle", &[epoch]);
        order.shuffle(&mut rng);
        order
    }

    /// Loads and normalizes the pairs at `indices` into `[N, 3, H, W]`
    /// batches.
    pub fn load_batch<S: Scalar>(&self, indices: &[usize]) -> Result<PairBatch<S>> {
        let mut ids = Vec::with_capacity(indices.len());
        let mut vis = Vec::with_capacity(indices.len());
        let mut th = Vec::with_capacity(indices.len());
        for &i in indices {
            let pair = self.load_pair::<S>(i)?;
            ids.push(pair.id);
            vis.push(pair.visible.normalize()?);
            th.push(pair.thermal.normalize()?);
        }
        Ok(PairBatch {
            ids,
            visible: stack_images(&vis)?,
            thermal: stack_images(&th)?,
        })
    }
}

/// Stacks equally shaped unit-signed images into `[N, C, H, W]`.
pub fn stack_images<S: Scalar>(imgs: &[ImageTensor<S>]) -> Result<Array4<S>> {
    let first = imgs.first().ok_or(Error::InvalidArgument {
        context: "stack_images",
        message: "empty batch".into(),
    })?;
    let dims = (first.channels(), first.height(), first.width());
    let mut out = Array4::zeros((imgs.len(), dims.0, dims.1, dims.2));
    for (n, img) in imgs.iter().enumerate() {
        if img.tag() != RangeTag::UnitSigned {
            return Err(Error::InvalidArgument {
                context: "stack_images",
                message: "images must be normalized before stacking".into(),
            });
        }
        if (img.channels(), img.height(), img.width()) != dims {
            return Err(Error::ShapeMismatch {
                context: "stack_images",
                expected: format!("{dims:?}"),
                got: format!(
                    "({}, {}, {})",
                    img.channels(),
                    img.height(),
                    img.width()
                ),
            });
        }
        out.index_axis_mut(Axis(0), n).assign(img.data());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::TemperatureField;
    use ndarray::Array3;
    use rand::SeedableRng;

    fn tiny_rgb(seed: u64) -> ImageTensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Array3::from_shape_fn((3, 6, 6), |_| rng.random_range(0.0..=255.0));
        ImageTensor::new(data, RangeTag::Byte).unwrap()
    }

    #[test]
    fn manifest_roundtrip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthesisSpec {
            count: 16,
            size: 16,
            seed: 7,
        };
        let manifest = generate_dataset(&spec, dir.path()).unwrap();
        assert_eq!(manifest.entries().len(), 16);
        let loaded = Manifest::load(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(loaded.entries(), manifest.entries());
        // Subject-disjoint split: subject s003 is the held-out quarter.
        assert_eq!(loaded.entries_for(Split::Test).len(), 4);
        assert_eq!(loaded.entries_for(Split::Train).len(), 12);
        for e in loaded.entries_for(Split::Test) {
            assert_eq!(e.subject, "s003");
        }
    }

    #[test]
    fn manifest_rejects_duplicates_bad_splits_and_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        let img = tiny_rgb(0);
        save_png(&dir.path().join("a.png"), &img).unwrap();
        let entry = |id: &str| ManifestEntry {
            id: id.into(),
            visible: "a.png".into(),
            thermal: "a.png".into(),
            split: Split::Train,
            subject: "s0".into(),
        };
        // Duplicate ids.
        let err = Manifest::new(dir.path().into(), vec![entry("x"), entry("x")]).unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
        // Unknown split value.
        let text = r#"{"root": ".", "entries": [{"id": "x", "visible": "a.png",
            "thermal": "a.png", "split": "validation", "subject": "s0"}]}"#;
        let p = dir.path().join("manifest.json");
        fs::write(&p, text).unwrap();
        let err = Manifest::load(&p).unwrap_err();
        assert!(matches!(err, Error::Manifest(_)), "{err}");
        // Missing file.
        let m = Manifest::new(
            dir.path().into(),
            vec![ManifestEntry {
                id: "y".into(),
                visible: "missing.png".into(),
                thermal: "a.png".into(),
                split: Split::Train,
                subject: "s0".into(),
            }],
        )
        .unwrap();
        m.save(&p).unwrap();
        let err = Manifest::load(&p).unwrap_err();
        assert!(err.to_string().contains("missing.png"), "{err}");
        // Empty manifest.
        assert!(Manifest::new(dir.path().into(), vec![]).is_err());
    }

    #[test]
    fn png_roundtrip_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let img = tiny_rgb(3);
        let p = dir.path().join("img.png");
        save_png(&p, &img).unwrap();
        let back = load_png::<f64>(&p).unwrap();
        assert_eq!(
            img.to_u8_interleaved().unwrap(),
            back.to_u8_interleaved().unwrap()
        );
    }

    #[test]
    fn jitter_zero_strengths_are_bit_identical() {
        let params = JitterParams {
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let draw = params.draw(&mut rng);
        assert_eq!(draw, JitterDraw::identity());
        let img = tiny_rgb(5);
        let out = apply_jitter(&img, &draw).unwrap();
        assert_eq!(img.data(), out.data());
    }

    #[test]
    fn jitter_draws_stay_in_documented_ranges() {
        let params = JitterParams::default();
        let mut rng = RunSeed(2).stream("jitter");
        for _ in 0..100 {
            let d = params.draw(&mut rng);
            assert!((0.5..=1.5).contains(&d.brightness));
            assert!((0.25..=1.75).contains(&d.contrast));
            assert!((0.0..=2.5).contains(&d.saturation));
            assert!((-0.5..=0.5).contains(&d.hue));
        }
    }

    #[test]
    fn saturation_zero_is_pixelwise_gray() {
        let img = tiny_rgb(6);
        let draw = JitterDraw {
            saturation: 0.0,
            ..JitterDraw::identity()
        };
        let out = apply_jitter(&img, &draw).unwrap();
        let gray = luminance(&img.data().mapv(|v| v / 255.0));
        for y in 0..img.height() {
            for x in 0..img.width() {
                for c in 0..3 {
                    let got = out.data()[[c, y, x]] / 255.0;
                    assert!((got - gray[[y, x]]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn contrast_zero_is_constant_mean() {
        let img = tiny_rgb(7);
        let draw = JitterDraw {
            contrast: 0.0,
            ..JitterDraw::identity()
        };
        let out = apply_jitter(&img, &draw).unwrap();
        let mean = luminance(&img.data().mapv(|v| v / 255.0)).mean().unwrap();
        for v in out.data().iter() {
            assert!((v / 255.0 - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn brightness_scales_and_clamps() {
        let data = Array3::from_shape_vec((3, 1, 1), vec![100.0f64, 200.0, 30.0]).unwrap();
        let img = ImageTensor::new(data, RangeTag::Byte).unwrap();
        let draw = JitterDraw {
            brightness: 1.5,
            ..JitterDraw::identity()
        };
        let out = apply_jitter(&img, &draw).unwrap();
        assert!((out.data()[[0, 0, 0]] - 150.0).abs() < 1e-9);
        assert!((out.data()[[1, 0, 0]] - 255.0).abs() < 1e-9); // clamped
        assert!((out.data()[[2, 0, 0]] - 45.0).abs() < 1e-9);
    }

    #[test]
    fn hue_shift_round_trips() {
        let img = tiny_rgb(8);
        let fwd = apply_jitter(
            &img,
            &JitterDraw {
                hue: 0.25,
                ..JitterDraw::identity()
            },
        )
        .unwrap();
        let back = apply_jitter(
            &fwd,
            &JitterDraw {
                hue: -0.25,
                ..JitterDraw::identity()
            },
        )
        .unwrap();
        for (a, b) in img.data().iter().zip(back.data().iter()) {
            assert!((a - b).abs() < 1e-6 * 255.0, "{a} vs {b}");
        }
    }

    #[test]
    fn jitter_requires_byte_rgb() {
        let unit = tiny_rgb(9).normalize().unwrap();
        assert!(apply_jitter(&unit, &JitterDraw::identity()).is_err());
        let gray = to_grayscale(&tiny_rgb(9)).unwrap();
        let shifted = JitterDraw {
            hue: 0.1,
            ..JitterDraw::identity()
        };
        assert!(apply_jitter(&gray, &shifted).is_err());
    }

    #[test]
    fn grayscale_preserves_tag_and_matches_luma() {
        let img = tiny_rgb(10);
        let g = to_grayscale(&img).unwrap();
        assert_eq!(g.channels(), 1);
        assert_eq!(g.tag(), RangeTag::Byte);
        let luma = img.luminance();
        for y in 0..img.height() {
            for x in 0..img.width() {
                assert_eq!(g.data()[[0, y, x]], luma[[y, x]]);
            }
        }
    }

    #[test]
    fn synthesis_is_deterministic_and_index_sensitive() {
        let (v1, t1) = synthesize_pair::<f32>(RunSeed(3), 5, 32).unwrap();
        let (v2, t2) = synthesize_pair::<f32>(RunSeed(3), 5, 32).unwrap();
        assert_eq!(v1.data(), v2.data());
        assert_eq!(t1.data(), t2.data());
        let (v3, _) = synthesize_pair::<f32>(RunSeed(3), 6, 32).unwrap();
        assert_ne!(v1.data(), v3.data());
        let (v4, _) = synthesize_pair::<f32>(RunSeed(4), 5, 32).unwrap();
        assert_ne!(v1.data(), v4.data());
    }

    #[test]
    fn same_subject_shares_layout_different_subject_does_not() {
        // Images 0 and 1 belong to subject 0: the base geometry matches up to
        // the small pose perturbation. Image 4 starts subject 1.
        let g0 = face_geometry(RunSeed(0), 0);
        let g1 = face_geometry(RunSeed(0), 1);
        let g4 = face_geometry(RunSeed(0), 4);
        assert_eq!(g0.skin, g1.skin);
        assert_eq!(g0.bg_top, g1.bg_top);
        assert!((g0.center.0 - g1.center.0).abs() < 0.03);
        assert_ne!(g0.skin, g4.skin);
    }

    #[test]
    fn thermal_bytes_stay_in_subrange_and_decode_to_plausible_celsius() {
        let (_, th) = synthesize_pair::<f64>(RunSeed(11), 0, 32).unwrap();
        let (lo, hi) = th
            .data()
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| {
                (l.min(v), h.max(v))
            });
        assert!(lo >= THERMAL_BYTE_LO && hi <= THERMAL_BYTE_HI, "[{lo}, {hi}]");
        let field = TemperatureField::from_byte_red(&th.red_channel()).unwrap();
        assert!(field.min_c() >= 25.0 && field.max_c() <= 37.0);
        // The warm and cold extremes must be meaningfully separated.
        assert!(field.max_c() - field.min_c() > 4.0);
    }

    #[test]
    fn dataset_loads_batches_and_shuffles_deterministically() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthesisSpec {
            count: 16,
            size: 16,
            seed: 1,
        };
        let manifest = generate_dataset(&spec, dir.path()).unwrap();
        let train = PairedDataset::from_manifest(&manifest, Split::Train).unwrap();
        assert_eq!(train.len(), 12);

        let batch = train.load_batch::<f32>(&[0, 3, 5]).unwrap();
        assert_eq!(batch.visible.shape(), &[3, 3, 16, 16]);
        assert_eq!(batch.thermal.shape(), &[3, 3, 16, 16]);
        assert_eq!(batch.ids.len(), 3);
        for v in batch.visible.iter().chain(batch.thermal.iter()) {
            assert!((-1.0..=1.0).contains(v));
        }

        let o1 = train.epoch_order(RunSeed(5), 0);
        let o2 = train.epoch_order(RunSeed(5), 0);
        let o3 = train.epoch_order(RunSeed(5), 1);
        assert_eq!(o1, o2);
        assert_ne!(o1, o3);
        let mut sorted = o1.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..12).collect::<Vec<_>>());
    }

    #[test]
    fn stack_rejects_mixed_shapes_and_unnormalized_input() {
        let a = tiny_rgb(1).normalize().unwrap();
        let byte = tiny_rgb(2);
        assert!(stack_images(&[a.clone(), byte]).is_err());
        let (small, _) = synthesize_pair::<f64>(RunSeed(0), 0, 16).unwrap();
        let small = small.normalize().unwrap();
        assert!(stack_images(&[a, small]).is_err());
        assert!(stack_images::<f64>(&[]).is_err());
    }
}
