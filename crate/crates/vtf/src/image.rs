//! Core image containers and conversions.
//!
//! Images are channel-first `[C, H, W]` float tensors carrying a range tag so
//! byte-scale and normalized data can never be mixed silently. A 4×4 grid of
//! spatial patches (row-major, 16 total) supports the patch-level losses, and
//! a temperature field maps thermal pixel values onto a physical Celsius range.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::{s, Array2, Array3};

/// Physical range represented by a thermal image: 24 °C … 38 °C.
pub const TEMP_MIN_C: f64 = 24.0;
/// See [`TEMP_MIN_C`].
pub const TEMP_MAX_C: f64 = 38.0;

/// Which numeric range the samples of an [`ImageTensor`] live in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RangeTag {
    /// Values in `[-1, 1]` (network inputs/outputs).
    UnitSigned,
    /// Values in `[0, 255]` (storage scale).
    Byte,
}

/// A `[C, H, W]` image with an explicit range tag.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor<S: Scalar> {
    data: Array3<S>,
    tag: RangeTag,
}

impl<S: Scalar> ImageTensor<S> {
    /// Wraps a tensor after validating that every sample sits inside the
    /// tagged range.
    pub fn new(data: Array3<S>, tag: RangeTag) -> Result<Self> {
        let (lo, hi) = match tag {
            RangeTag::UnitSigned => (-1.0, 1.0),
            RangeTag::Byte => (0.0, 255.0),
        };
        for &v in data.iter() {
            let v = v.to_f64();
            if !v.is_finite() || v < lo || v > hi {
                return Err(Error::OutOfRange {
                    context: "ImageTensor::new",
                    message: format!("sample {v} outside [{lo}, {hi}] for {tag:?}"),
                });
            }
        }
        Ok(Self { data, tag })
    }

    /// Builds a byte-tagged tensor from interleaved `u8` RGB rows
    /// (`H*W*C` buffer, row-major, channels last — the PNG layout).
    pub fn from_u8_interleaved(buf: &[u8], channels: usize, h: usize, w: usize) -> Result<Self> {
        if buf.len() != channels * h * w {
            return Err(Error::ShapeMismatch {
                context: "ImageTensor::from_u8_interleaved",
                expected: format!("{} bytes", channels * h * w),
                got: format!("{} bytes", buf.len()),
            });
        }
        let mut data = Array3::zeros((channels, h, w));
        for y in 0..h {
            for x in 0..w {
                for c in 0..channels {
                    data[[c, y, x]] = S::from_f64(buf[(y * w + x) * channels + c] as f64);
                }
            }
        }
        Ok(Self {
            data,
            tag: RangeTag::Byte,
        })
    }

    pub fn data(&self) -> &Array3<S> {
        &self.data
    }

    pub fn into_data(self) -> Array3<S> {
        self.data
    }

    pub fn tag(&self) -> RangeTag {
        self.tag
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    /// Byte scale → `[-1, 1]`: `v' = v / 127.5 - 1`.
    pub fn normalize(&self) -> Result<ImageTensor<S>> {
        if self.tag != RangeTag::Byte {
            return Err(Error::InvalidArgument {
                context: "ImageTensor::normalize",
                message: "input is already unit-signed".into(),
            });
        }
        let half = S::from_f64(127.5);
        let one = S::one();
        let data = self.data.mapv(|v| v / half - one);
        Ok(ImageTensor {
            data,
            tag: RangeTag::UnitSigned,
        })
    }

    /// `[-1, 1]` → byte scale: `v = (v' + 1) * 127.5`, clamped to `[0, 255]`.
    ///
    /// Accepts arbitrary float input (e.g. raw network output that may poke
    /// slightly past ±1) — the clamp is the contract.
    pub fn denormalize(&self) -> Result<ImageTensor<S>> {
        if self.tag != RangeTag::UnitSigned {
            return Err(Error::InvalidArgument {
                context: "ImageTensor::denormalize",
                message: "input is already byte-scale".into(),
            });
        }
        Ok(ImageTensor {
            data: denormalize_array(&self.data),
            tag: RangeTag::Byte,
        })
    }

    /// Rounds a byte-tagged tensor to `u8` in interleaved `H*W*C` layout.
    pub fn to_u8_interleaved(&self) -> Result<Vec<u8>> {
        if self.tag != RangeTag::Byte {
            return Err(Error::InvalidArgument {
                context: "ImageTensor::to_u8_interleaved",
                message: "call denormalize() first".into(),
            });
        }
        let (c, h, w) = (self.channels(), self.height(), self.width());
        let mut buf = vec![0u8; c * h * w];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    buf[(y * w + x) * c + ch] =
                        self.data[[ch, y, x]].to_f64().round().clamp(0.0, 255.0) as u8;
                }
            }
        }
        Ok(buf)
    }

    /// The red channel as a 2-D map (channel 0; for single-channel images the
    /// only channel).
    pub fn red_channel(&self) -> Array2<S> {
        self.data.slice(s![0, .., ..]).to_owned()
    }

    /// Rec. 601 luma. Single-channel images pass through unchanged.
    pub fn luminance(&self) -> Array2<S> {
        luminance(&self.data)
    }
}

/// `(v' + 1) * 127.5` clamped to `[0, 255]`, without range validation on the
/// input (raw network output is allowed to overshoot ±1 slightly).
pub fn denormalize_array<S: Scalar>(data: &Array3<S>) -> Array3<S> {
    let half = S::from_f64(127.5);
    let one = S::one();
    let hi = S::from_f64(255.0);
    data.mapv(|v| ((v + one) * half).max(S::zero()).min(hi))
}

/// Rec. 601 luma of a `[C, H, W]` array (C = 1 or 3).
pub fn luminance<S: Scalar>(data: &Array3<S>) -> Array2<S> {
    let (c, h, w) = (data.shape()[0], data.shape()[1], data.shape()[2]);
    if c == 1 {
        return data.slice(s![0, .., ..]).to_owned();
    }
    let (wr, wg, wb) = (
        S::from_f64(0.299),
        S::from_f64(0.587),
        S::from_f64(0.114),
    );
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            out[[y, x]] =
                wr * data[[0, y, x]] + wg * data[[1, y, x]] + wb * data[[2, y, x]];
        }
    }
    out
}

/// A row-major 4×4 grid of spatial patches (16 total).
///
/// Patch `k` covers grid cell `(k / 4, k % 4)`: rows `r*H/4 .. (r+1)*H/4`,
/// columns `c*W/4 .. (c+1)*W/4`. Reassembly is bit-identical to the source.
#[derive(Debug, Clone)]
pub struct PatchGrid<S: Scalar> {
    patches: Vec<Array3<S>>,
    channels: usize,
    patch_h: usize,
    patch_w: usize,
}

/// Patches per side of the grid.
pub const PATCH_GRID_SIDE: usize = 4;
/// Total patch count `K`.
pub const PATCH_COUNT: usize = PATCH_GRID_SIDE * PATCH_GRID_SIDE;

impl<S: Scalar> PatchGrid<S> {
    /// Splits a `[C, H, W]` array into the 16-patch grid. `H` and `W` must be
    /// divisible by 4.
    pub fn split(data: &Array3<S>) -> Result<Self> {
        let (c, h, w) = (data.shape()[0], data.shape()[1], data.shape()[2]);
        if h % PATCH_GRID_SIDE != 0 || w % PATCH_GRID_SIDE != 0 {
            return Err(Error::InvalidArgument {
                context: "PatchGrid::split",
                message: format!("H and W must be divisible by {PATCH_GRID_SIDE}, got {h}x{w}"),
            });
        }
        let (ph, pw) = (h / PATCH_GRID_SIDE, w / PATCH_GRID_SIDE);
        let mut patches = Vec::with_capacity(PATCH_COUNT);
        for r in 0..PATCH_GRID_SIDE {
            for col in 0..PATCH_GRID_SIDE {
                patches.push(
                    data.slice(s![.., r * ph..(r + 1) * ph, col * pw..(col + 1) * pw])
                        .to_owned(),
                );
            }
        }
        Ok(Self {
            patches,
            channels: c,
            patch_h: ph,
            patch_w: pw,
        })
    }

    pub fn patches(&self) -> &[Array3<S>] {
        &self.patches
    }

    pub fn patch(&self, k: usize) -> &Array3<S> {
        &self.patches[k]
    }

    pub fn patch_height(&self) -> usize {
        self.patch_h
    }

    pub fn patch_width(&self) -> usize {
        self.patch_w
    }

    /// Inverse of [`PatchGrid::split`].
    pub fn reassemble(&self) -> Array3<S> {
        let (ph, pw) = (self.patch_h, self.patch_w);
        let mut out = Array3::zeros((
            self.channels,
            ph * PATCH_GRID_SIDE,
            pw * PATCH_GRID_SIDE,
        ));
        for r in 0..PATCH_GRID_SIDE {
            for col in 0..PATCH_GRID_SIDE {
                out.slice_mut(s![.., r * ph..(r + 1) * ph, col * pw..(col + 1) * pw])
                    .assign(&self.patches[r * PATCH_GRID_SIDE + col]);
            }
        }
        out
    }
}

/// A per-pixel temperature map in Celsius, pinned to `[24, 38]`.
#[derive(Debug, Clone)]
pub struct TemperatureField<S: Scalar> {
    map: Array2<S>,
}

impl<S: Scalar> TemperatureField<S> {
    /// From a byte-scale red channel: `T = 24 + (v / 255) * 14`.
    pub fn from_byte_red(red: &Array2<S>) -> Result<Self> {
        let span = S::from_f64(TEMP_MAX_C - TEMP_MIN_C);
        let lo = S::from_f64(TEMP_MIN_C);
        let full = S::from_f64(255.0);
        let mut map = Array2::zeros(red.raw_dim());
        for (o, &v) in map.iter_mut().zip(red.iter()) {
            let vv = v.to_f64();
            if !(0.0..=255.0).contains(&vv) {
                return Err(Error::OutOfRange {
                    context: "TemperatureField::from_byte_red",
                    message: format!("byte sample {vv} outside [0, 255]"),
                });
            }
            *o = lo + v / full * span;
        }
        Ok(Self { map })
    }

    /// From a unit-signed red channel: `T = 31 + 7 v` (the byte mapping
    /// composed with `v = (v' + 1) * 127.5`).
    pub fn from_unit_red(red: &Array2<S>) -> Result<Self> {
        let mid = S::from_f64((TEMP_MIN_C + TEMP_MAX_C) / 2.0);
        let half_span = S::from_f64((TEMP_MAX_C - TEMP_MIN_C) / 2.0);
        for &v in red.iter() {
            let vv = v.to_f64();
            if !(-1.0..=1.0).contains(&vv) {
                return Err(Error::OutOfRange {
                    context: "TemperatureField::from_unit_red",
                    message: format!("unit sample {vv} outside [-1, 1]"),
                });
            }
        }
        Ok(Self {
            map: red.mapv(|v| mid + half_span * v),
        })
    }

    pub fn map(&self) -> &Array2<S> {
        &self.map
    }

    pub fn min_c(&self) -> f64 {
        self.map
            .iter()
            .fold(f64::INFINITY, |m, &v| m.min(v.to_f64()))
    }

    pub fn max_c(&self) -> f64 {
        self.map
            .iter()
            .fold(f64::NEG_INFINITY, |m, &v| m.max(v.to_f64()))
    }
}
