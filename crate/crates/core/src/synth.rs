//! Synthetic spectral scenes and the on-disk cube container.
//!
//! Scenes are sums of Gaussian spatial blobs, each carrying a smooth spectral
//! curve (a mixture of one to three Gaussians over wavelength), so the data
//! is spatially blobby while neighboring bands stay strongly correlated. RGB
//! counterparts come from a per-pixel response-matrix projection followed by
//! signal-proportional shot noise. Everything is a pure function of its
//! seed.
//!
//! Cube values live on the binary32 grid in memory, matching the `HSI1` file
//! layout exactly, so write/read round-trips are bitwise.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

/// H x W x C cube of band values with wavelength metadata; storage is planar
/// band-major (`values[(band * H + y) * W + x]`), matching the file format.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralCube {
    height: usize,
    width: usize,
    bands: usize,
    wavelengths: Vec<f32>,
    values: Vec<f32>,
}

/// Wavelength grid in nanometers: `bands` points evenly spanning 400-700 nm
/// (10 nm steps at the default 31 bands).
pub fn spectral_wavelengths(bands: usize) -> Vec<f32> {
    if bands == 1 {
        return vec![550.0];
    }
    (0..bands)
        .map(|i| 400.0 + 300.0 * i as f32 / (bands - 1) as f32)
        .collect()
}

/// Channel tags used in place of wavelengths for RGB containers.
pub fn rgb_channel_ids() -> Vec<f32> {
    vec![0.0, 1.0, 2.0]
}

impl SpectralCube {
    pub fn new(
        height: usize,
        width: usize,
        bands: usize,
        wavelengths: Vec<f32>,
        values: Vec<f32>,
    ) -> Result<Self> {
        if wavelengths.len() != bands {
            return Err(Error::InvalidArgument {
                op: "SpectralCube::new",
                message: format!(
                    "wavelength list length {} does not match band count {bands}",
                    wavelengths.len()
                ),
            });
        }
        if values.len() != height * width * bands {
            return Err(Error::DataLength {
                shape: vec![height, width, bands],
                expected: height * width * bands,
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument {
                op: "SpectralCube::new",
                message: "cube values must be finite".into(),
            });
        }
        Ok(Self {
            height,
            width,
            bands,
            wavelengths,
            values,
        })
    }

    /// Cube with the default wavelength grid for its band count.
    pub fn from_values(height: usize, width: usize, bands: usize, values: Vec<f32>) -> Result<Self> {
        Self::new(height, width, bands, spectral_wavelengths(bands), values)
    }

    pub fn zeros(height: usize, width: usize, bands: usize) -> Self {
        Self::from_values(height, width, bands, vec![0.0; height * width * bands])
            .expect("zero cube is valid")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    /// `[height, width, bands]`.
    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, self.bands]
    }

    pub fn wavelengths(&self) -> &[f32] {
        &self.wavelengths
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn get(&self, band: usize, y: usize, x: usize) -> f32 {
        self.values[(band * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, band: usize, y: usize, x: usize, v: f32) {
        self.values[(band * self.height + y) * self.width + x] = v;
    }

    /// Widen to an `[C, H, W]` f64 tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.bands, self.height, self.width],
            self.values.iter().map(|&v| v as f64).collect(),
        )
        .expect("cube layout matches tensor shape")
    }

    /// Widen to a `[1, C, H, W]` f64 tensor.
    pub fn to_batched_tensor(&self) -> Tensor {
        Tensor::new(
            vec![1, self.bands, self.height, self.width],
            self.values.iter().map(|&v| v as f64).collect(),
        )
        .expect("cube layout matches tensor shape")
    }

    /// Narrow a `[C, H, W]` or `[1, C, H, W]` tensor into a cube, rounding to
    /// binary32.
    pub fn from_tensor(t: &Tensor, wavelengths: Vec<f32>) -> Result<Self> {
        let s = t.shape();
        let (c, h, w) = match s.len() {
            3 => (s[0], s[1], s[2]),
            4 if s[0] == 1 => (s[1], s[2], s[3]),
            _ => {
                return Err(Error::InvalidArgument {
                    op: "SpectralCube::from_tensor",
                    message: format!("expected [C,H,W] or [1,C,H,W], got {s:?}"),
                })
            }
        };
        Self::new(h, w, c, wavelengths, t.data().iter().map(|&v| v as f32).collect())
    }

    /// Aligned spatial crop.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::InvalidArgument {
                op: "SpectralCube::crop",
                message: format!(
                    "crop {h}x{w} at ({y0},{x0}) exceeds cube {}x{}",
                    self.height, self.width
                ),
            });
        }
        let mut values = Vec::with_capacity(h * w * self.bands);
        for band in 0..self.bands {
            for y in 0..h {
                let src = (band * self.height + y0 + y) * self.width + x0;
                values.extend_from_slice(&self.values[src..src + w]);
            }
        }
        Self::new(h, w, self.bands, self.wavelengths.clone(), values)
    }
}

// ---------------------------------------------------------------------------
// dihedral group

/// The eight flip/rotation symmetries of an axis-aligned image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dihedral {
    Identity,
    Rot90,
    Rot180,
    Rot270,
    FlipH,
    FlipV,
    Transpose,
    AntiTranspose,
}

impl Dihedral {
    pub const ALL: [Dihedral; 8] = [
        Dihedral::Identity,
        Dihedral::Rot90,
        Dihedral::Rot180,
        Dihedral::Rot270,
        Dihedral::FlipH,
        Dihedral::FlipV,
        Dihedral::Transpose,
        Dihedral::AntiTranspose,
    ];

    pub fn inverse(self) -> Self {
        match self {
            Dihedral::Rot90 => Dihedral::Rot270,
            Dihedral::Rot270 => Dihedral::Rot90,
            other => other,
        }
    }

    /// Whether this element swaps the two spatial extents.
    pub fn swaps_axes(self) -> bool {
        matches!(
            self,
            Dihedral::Rot90 | Dihedral::Rot270 | Dihedral::Transpose | Dihedral::AntiTranspose
        )
    }

    pub fn out_dims(self, h: usize, w: usize) -> (usize, usize) {
        if self.swaps_axes() {
            (w, h)
        } else {
            (h, w)
        }
    }

    /// Source coordinate in an `h x w` input for output coordinate `(y, x)`.
    fn source(self, y: usize, x: usize, h: usize, w: usize) -> (usize, usize) {
        match self {
            Dihedral::Identity => (y, x),
            Dihedral::Rot90 => (h - 1 - x, y),
            Dihedral::Rot180 => (h - 1 - y, w - 1 - x),
            Dihedral::Rot270 => (x, w - 1 - y),
            Dihedral::FlipH => (y, w - 1 - x),
            Dihedral::FlipV => (h - 1 - y, x),
            Dihedral::Transpose => (x, y),
            Dihedral::AntiTranspose => (h - 1 - x, w - 1 - y),
        }
    }

    /// Apply to one `h x w` plane.
    pub fn apply_plane<T: Copy + Default>(self, src: &[T], h: usize, w: usize) -> Vec<T> {
        let (oh, ow) = self.out_dims(h, w);
        let mut out = vec![T::default(); h * w];
        for y in 0..oh {
            for x in 0..ow {
                let (sy, sx) = self.source(y, x, h, w);
                out[y * ow + x] = src[sy * w + sx];
            }
        }
        out
    }

    /// Apply the same spatial permutation to every band.
    pub fn apply_cube(self, cube: &SpectralCube) -> SpectralCube {
        let (h, w) = (cube.height, cube.width);
        let (oh, ow) = self.out_dims(h, w);
        let mut values = Vec::with_capacity(cube.values.len());
        for band in 0..cube.bands {
            let plane = &cube.values[band * h * w..(band + 1) * h * w];
            values.extend(self.apply_plane(plane, h, w));
        }
        SpectralCube::new(oh, ow, cube.bands, cube.wavelengths.clone(), values)
            .expect("permutation preserves validity")
    }

    /// Apply to the two trailing axes of an NCHW tensor.
    pub fn apply_tensor(self, t: &Tensor) -> Tensor {
        let s = t.shape();
        debug_assert_eq!(s.len(), 4, "dihedral tensor ops take NCHW");
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = self.out_dims(h, w);
        let mut data = Vec::with_capacity(t.numel());
        for plane_idx in 0..b * c {
            let plane = &t.data()[plane_idx * h * w..(plane_idx + 1) * h * w];
            data.extend(self.apply_plane(plane, h, w));
        }
        Tensor::new(vec![b, c, oh, ow], data).expect("permutation preserves element count")
    }
}

// ---------------------------------------------------------------------------
// response matrix

/// C x 3 non-negative matrix mapping a spectrum to RGB; columns normalized to
/// sum 1.
#[derive(Clone, Debug, PartialEq)]
pub struct ResponseMatrix {
    bands: usize,
    data: Vec<f64>, // row-major C x 3
}

impl ResponseMatrix {
    pub fn new(bands: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != bands * 3 {
            return Err(Error::DataLength {
                shape: vec![bands, 3],
                expected: bands * 3,
                got: data.len(),
            });
        }
        if data.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::InvalidArgument {
                op: "ResponseMatrix::new",
                message: "entries must be finite and non-negative".into(),
            });
        }
        Ok(Self { bands, data })
    }

    /// Gaussian response curves centered at 620/550/450 nm with 50 nm spread,
    /// column-normalized.
    pub fn gaussian_default(wavelengths: &[f32]) -> Self {
        const CENTERS: [f64; 3] = [620.0, 550.0, 450.0];
        const SPREAD: f64 = 50.0;
        let bands = wavelengths.len();
        let mut data = vec![0.0; bands * 3];
        for (b, &wl) in wavelengths.iter().enumerate() {
            for (k, &center) in CENTERS.iter().enumerate() {
                let z = (wl as f64 - center) / SPREAD;
                data[b * 3 + k] = (-0.5 * z * z).exp();
            }
        }
        Self { bands, data }.normalized()
    }

    /// Rescale each column to sum to 1.
    pub fn normalized(mut self) -> Self {
        for k in 0..3 {
            let total: f64 = (0..self.bands).map(|b| self.data[b * 3 + k]).sum();
            if total > 0.0 {
                for b in 0..self.bands {
                    self.data[b * 3 + k] /= total;
                }
            }
        }
        self
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn at(&self, band: usize, channel: usize) -> f64 {
        self.data[band * 3 + channel]
    }

    pub fn column_sums(&self) -> [f64; 3] {
        let mut sums = [0.0; 3];
        for b in 0..self.bands {
            for (k, s) in sums.iter_mut().enumerate() {
                *s += self.data[b * 3 + k];
            }
        }
        sums
    }

    /// Parse whitespace-separated text: one row of three values per band.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut data = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let row: Vec<f64> = line
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<f64>().map_err(|_| Error::Format {
                        path: "<response matrix>".into(),
                        message: format!("line {}: bad number `{tok}`", i + 1),
                    })
                })
                .collect::<Result<_>>()?;
            if row.len() != 3 {
                return Err(Error::Format {
                    path: "<response matrix>".into(),
                    message: format!("line {}: expected 3 values, got {}", i + 1, row.len()),
                });
            }
            data.extend(row);
        }
        Self::new(data.len() / 3, data)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for b in 0..self.bands {
            // shortest round-trip formatting keeps the parse lossless
            out.push_str(&format!(
                "{:e} {:e} {:e}\n",
                self.data[b * 3],
                self.data[b * 3 + 1],
                self.data[b * 3 + 2]
            ));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// scene generation

/// Everything that determines one synthetic scene.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    /// Number of Gaussian blobs; zero gives an all-zero cube.
    pub blobs: usize,
    /// Shot-noise scale used when synthesizing the RGB counterpart.
    pub noise_scale: f64,
    pub bands: usize,
}

impl SceneSpec {
    pub fn new(seed: u64, height: usize, width: usize, blobs: usize) -> Self {
        Self {
            seed,
            height,
            width,
            blobs,
            noise_scale: 1e-3,
            bands: 31,
        }
    }
}

/// Deterministic piecewise-smooth cube: Gaussian spatial blobs carrying
/// smooth spectral curves, accumulated and clipped to [0, 1].
///
/// The first blob is drawn broad and dim (an ambient field), keeping ground
/// truth away from exact zero so relative-error training stays well behaved;
/// later blobs are tighter and provide the sparse structure.
pub fn generate_scene(spec: &SceneSpec) -> SpectralCube {
    let (h, w, c) = (spec.height, spec.width, spec.bands);
    let wavelengths = spectral_wavelengths(c);
    let mut acc = vec![0.0f64; h * w * c];
    let mut rng = Rng::new(spec.seed);
    let side = h.min(w) as f64;

    for blob in 0..spec.blobs {
        let cx = rng.uniform(0.0, w as f64);
        let cy = rng.uniform(0.0, h as f64);
        let (sigma_frac, amp) = if blob == 0 {
            (rng.uniform(0.8, 1.5), rng.uniform(0.15, 0.4))
        } else {
            (rng.uniform(0.15, 0.5), rng.uniform(0.3, 1.0))
        };
        let sigma = sigma_frac * side;

        // spectral curve: mixture of 1-3 Gaussians over wavelength, wide
        // enough that neighboring 10 nm bands stay strongly correlated
        let n_gauss = 1 + rng.below(3);
        let mut curve = vec![0.0f64; c];
        for _ in 0..n_gauss {
            let center = rng.uniform(400.0, 700.0);
            let width = rng.uniform(60.0, 220.0);
            let weight = rng.uniform(0.3, 1.0);
            for (b, &wl) in wavelengths.iter().enumerate() {
                let z = (wl as f64 - center) / width;
                curve[b] += weight * (-0.5 * z * z).exp();
            }
        }
        let peak = curve.iter().cloned().fold(0.0, f64::max);
        if peak > 0.0 {
            for v in &mut curve {
                *v *= amp / peak;
            }
        }

        // separable accumulation: one spatial map, scaled per band
        let inv = 1.0 / (2.0 * sigma * sigma);
        let mut spatial = vec![0.0f64; h * w];
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                spatial[y * w + x] = (-(dy * dy + dx * dx) * inv).exp();
            }
        }
        for (b, &cv) in curve.iter().enumerate() {
            let plane = &mut acc[b * h * w..(b + 1) * h * w];
            for (slot, &s) in plane.iter_mut().zip(&spatial) {
                *slot += cv * s;
            }
        }
    }

    let values = acc
        .iter()
        .map(|&v| v.clamp(0.0, 1.0) as f32)
        .collect();
    SpectralCube::new(h, w, c, wavelengths, values).expect("generated cube is valid")
}

/// Per-pixel projection `rgb = spectrum x M`, clipped to [0, 1].
pub fn project_rgb(cube: &SpectralCube, m: &ResponseMatrix) -> Result<SpectralCube> {
    if m.bands() != cube.bands() {
        return Err(Error::ShapeMismatch {
            op: "project_rgb",
            lhs: vec![cube.bands()],
            rhs: vec![m.bands()],
        });
    }
    let (h, w) = (cube.height(), cube.width());
    let mut values = vec![0.0f32; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            for k in 0..3 {
                let mut acc = 0.0f64;
                for b in 0..cube.bands() {
                    acc += cube.get(b, y, x) as f64 * m.at(b, k);
                }
                values[(k * h + y) * w + x] = acc.clamp(0.0, 1.0) as f32;
            }
        }
    }
    SpectralCube::new(h, w, 3, rgb_channel_ids(), values)
}

/// Signal-proportional Gaussian noise: `x + sqrt(max(x, 0) * scale) * g`,
/// clipped to [0, 1]. Zero signal stays exactly zero.
pub fn add_shot_noise(rgb: &SpectralCube, scale: f64, seed: u64) -> Result<SpectralCube> {
    if scale < 0.0 {
        return Err(Error::InvalidArgument {
            op: "add_shot_noise",
            message: format!("noise scale must be non-negative, got {scale}"),
        });
    }
    if scale == 0.0 {
        return Ok(rgb.clone());
    }
    let mut rng = Rng::new(seed);
    let values = rgb
        .values()
        .iter()
        .map(|&v| {
            let noisy = v as f64 + ((v as f64).max(0.0) * scale).sqrt() * rng.normal();
            noisy.clamp(0.0, 1.0) as f32
        })
        .collect();
    SpectralCube::new(
        rgb.height(),
        rgb.width(),
        rgb.bands(),
        rgb.wavelengths().to_vec(),
        values,
    )
}

// ---------------------------------------------------------------------------
// paired data, patches, augmentation

/// Aligned RGB input and spectral ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbHsiPair {
    pub rgb: SpectralCube,
    pub hsi: SpectralCube,
}

impl RgbHsiPair {
    pub fn new(rgb: SpectralCube, hsi: SpectralCube) -> Result<Self> {
        if rgb.height() != hsi.height() || rgb.width() != hsi.width() || rgb.bands() != 3 {
            return Err(Error::ShapeMismatch {
                op: "RgbHsiPair::new",
                lhs: rgb.shape().to_vec(),
                rhs: hsi.shape().to_vec(),
            });
        }
        Ok(Self { rgb, hsi })
    }
}

/// Full synthesis of one training pair from a scene spec.
pub fn generate_pair(spec: &SceneSpec, m: &ResponseMatrix) -> Result<RgbHsiPair> {
    let hsi = generate_scene(spec);
    let clean = project_rgb(&hsi, m)?;
    // decorrelate the noise stream from the scene stream
    let rgb = add_shot_noise(&clean, spec.noise_scale, spec.seed ^ 0x9E37_79B9_7F4A_7C15)?;
    RgbHsiPair::new(rgb, hsi)
}

/// Aligned random square crops; a crop the size of the image returns the
/// single full-image pair.
pub fn sample_patches(
    pair: &RgbHsiPair,
    size: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<RgbHsiPair>> {
    let (h, w) = (pair.hsi.height(), pair.hsi.width());
    if size == 0 || size > h.min(w) {
        return Err(Error::InvalidArgument {
            op: "sample_patches",
            message: format!("patch size {size} exceeds image {h}x{w}"),
        });
    }
    if size == h && size == w {
        return Ok(vec![pair.clone()]);
    }
    let mut rng = Rng::new(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let y0 = rng.below(h - size + 1);
        let x0 = rng.below(w - size + 1);
        out.push(RgbHsiPair {
            rgb: pair.rgb.crop(y0, x0, size, size)?,
            hsi: pair.hsi.crop(y0, x0, size, size)?,
        });
    }
    Ok(out)
}

/// Apply one dihedral element identically to both members.
pub fn augment(pair: &RgbHsiPair, op: Dihedral) -> RgbHsiPair {
    RgbHsiPair {
        rgb: op.apply_cube(&pair.rgb),
        hsi: op.apply_cube(&pair.hsi),
    }
}

// ---------------------------------------------------------------------------
// HSI1 container

const HSI1_MAGIC: &[u8; 4] = b"HSI1";
const HSI1_VERSION: u32 = 1;

/// Serialize a cube: magic, version, extents, wavelengths, then C planes of
/// H x W row-major little-endian binary32.
pub fn cube_to_bytes(cube: &SpectralCube) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + 4 * (cube.bands() + cube.values().len()));
    out.extend_from_slice(HSI1_MAGIC);
    out.extend_from_slice(&HSI1_VERSION.to_le_bytes());
    out.extend_from_slice(&(cube.height() as u32).to_le_bytes());
    out.extend_from_slice(&(cube.width() as u32).to_le_bytes());
    out.extend_from_slice(&(cube.bands() as u32).to_le_bytes());
    for &wl in cube.wavelengths() {
        out.extend_from_slice(&wl.to_le_bytes());
    }
    for &v in cube.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn cube_from_bytes(bytes: &[u8], origin: &str) -> Result<SpectralCube> {
    let err = |message: String| Error::Format {
        path: origin.to_string(),
        message,
    };
    if bytes.len() < 20 {
        return Err(err("truncated header".into()));
    }
    if &bytes[0..4] != HSI1_MAGIC {
        return Err(err("bad magic; not an HSI1 file".into()));
    }
    let take_u32 = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    let version = take_u32(4);
    if version != HSI1_VERSION {
        return Err(err(format!(
            "unsupported version {version}, expected {HSI1_VERSION}"
        )));
    }
    let h = take_u32(8) as usize;
    let w = take_u32(12) as usize;
    let c = take_u32(16) as usize;
    let expected = 20 + 4 * c + 4 * h * w * c;
    if bytes.len() < expected {
        return Err(err(format!(
            "truncated payload: {} bytes, expected {expected}",
            bytes.len()
        )));
    }
    if bytes.len() > expected {
        return Err(err(format!(
            "trailing bytes: {} bytes, expected {expected}",
            bytes.len()
        )));
    }
    let mut wavelengths = Vec::with_capacity(c);
    for i in 0..c {
        let at = 20 + 4 * i;
        wavelengths.push(f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()));
    }
    let base = 20 + 4 * c;
    let mut values = Vec::with_capacity(h * w * c);
    for i in 0..h * w * c {
        let at = base + 4 * i;
        values.push(f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()));
    }
    SpectralCube::new(h, w, c, wavelengths, values)
}

pub fn write_cube(path: &Path, cube: &SpectralCube) -> Result<()> {
    std::fs::write(path, cube_to_bytes(cube)).map_err(|e| Error::Format {
        path: path.display().to_string(),
        message: format!("cannot write: {e}"),
    })
}

pub fn read_cube(path: &Path) -> Result<SpectralCube> {
    let bytes = std::fs::read(path).map_err(|e| Error::Format {
        path: path.display().to_string(),
        message: format!("cannot read: {e}"),
    })?;
    cube_from_bytes(&bytes, &path.display().to_string())
}
