//! Synthetic versions of the five laparoscopic distortions at four
//! severity levels.

mod ops;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use ops::{
    apply_defocus_blur, apply_motion_blur, apply_smoke, apply_uneven_illumination, apply_white_noise,
    convolve, gaussian_kernel_1d, gaussian_kernel_2d, illumination_gain, mean_abs_laplacian,
    motion_kernel, Kernel2d, ScalarField, SMOKE_VEIL,
};

use crate::error::{Error, Result};
use crate::media::{
    make_split, write_clip, DatasetManifest, Frame, FrameFormat, ManifestEntry, Split, SplitSpec,
    VideoClip,
};
use crate::noise::fractal_noise;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DistortionType {
    /// Defocus blur.
    #[serde(rename = "DB")]
    Defocus,
    /// Motion blur.
    #[serde(rename = "MB")]
    Motion,
    /// Additive white Gaussian noise.
    #[serde(rename = "WN")]
    Noise,
    /// Surgical smoke.
    #[serde(rename = "SM")]
    Smoke,
    /// Uneven illumination.
    #[serde(rename = "UI")]
    Illumination,
}

impl DistortionType {
    pub const ALL: [DistortionType; 5] = [
        DistortionType::Defocus,
        DistortionType::Motion,
        DistortionType::Noise,
        DistortionType::Smoke,
        DistortionType::Illumination,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn code(self) -> &'static str {
        match self {
            DistortionType::Defocus => "DB",
            DistortionType::Motion => "MB",
            DistortionType::Noise => "WN",
            DistortionType::Smoke => "SM",
            DistortionType::Illumination => "UI",
        }
    }
}

impl fmt::Display for DistortionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for DistortionType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.code().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::format(format!("unknown distortion type {s:?}")))
    }
}

/// Ordinal severity, 1 (hardly visible) to 4 (extremely annoying).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum SeverityLevel {
    HardlyVisible = 1,
    JustNoticeable = 2,
    VeryAnnoying = 3,
    ExtremelyAnnoying = 4,
}

impl SeverityLevel {
    pub const ALL: [SeverityLevel; 4] = [
        SeverityLevel::HardlyVisible,
        SeverityLevel::JustNoticeable,
        SeverityLevel::VeryAnnoying,
        SeverityLevel::ExtremelyAnnoying,
    ];

    pub fn value(self) -> u8 {
        self as u8
    }

    /// Zero-based position, 0 for the mildest level.
    pub fn index(self) -> usize {
        self as usize - 1
    }

    pub fn code(self) -> &'static str {
        match self {
            SeverityLevel::HardlyVisible => "HV",
            SeverityLevel::JustNoticeable => "JN",
            SeverityLevel::VeryAnnoying => "VA",
            SeverityLevel::ExtremelyAnnoying => "EA",
        }
    }
}

impl TryFrom<u8> for SeverityLevel {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            1..=4 => Ok(Self::ALL[v as usize - 1]),
            _ => Err(Error::format(format!("severity level must be 1..=4, got {v}"))),
        }
    }
}

impl From<SeverityLevel> for u8 {
    fn from(l: SeverityLevel) -> u8 {
        l.value()
    }
}

impl fmt::Display for SeverityLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for SeverityLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Ok(v) = s.parse::<u8>() {
            return Self::try_from(v);
        }
        Self::ALL
            .into_iter()
            .find(|l| l.code().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::format(format!("unknown severity level {s:?}")))
    }
}

/// Severity tables, one magnitude per level for each distortion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistortionParams {
    pub noise_sigma: [f64; 4],
    pub defocus_sigma: [f64; 4],
    pub motion_length: [f64; 4],
    pub smoke_alpha: [f64; 4],
    pub illumination_strength: [f64; 4],
    /// Smoke field drift in pixels per frame.
    pub smoke_drift: f64,
    pub seed: u64,
}

impl Default for DistortionParams {
    fn default() -> Self {
        DistortionParams {
            noise_sigma: [0.02, 0.05, 0.10, 0.20],
            defocus_sigma: [1.0, 2.0, 3.5, 5.5],
            motion_length: [5.0, 9.0, 15.0, 25.0],
            smoke_alpha: [0.15, 0.30, 0.55, 0.80],
            illumination_strength: [0.3, 0.6, 1.0, 1.5],
            smoke_drift: 1.5,
            seed: 0,
        }
    }
}

impl DistortionParams {
    pub fn table(&self, ty: DistortionType) -> &[f64; 4] {
        match ty {
            DistortionType::Defocus => &self.defocus_sigma,
            DistortionType::Motion => &self.motion_length,
            DistortionType::Noise => &self.noise_sigma,
            DistortionType::Smoke => &self.smoke_alpha,
            DistortionType::Illumination => &self.illumination_strength,
        }
    }

    pub fn magnitude(&self, ty: DistortionType, level: SeverityLevel) -> f64 {
        self.table(ty)[level.index()]
    }

    /// Checks that every table is strictly increasing and within range.
    pub fn validate(&self) -> Result<()> {
        for ty in DistortionType::ALL {
            let t = self.table(ty);
            if !t.windows(2).all(|w| w[1] > w[0]) {
                return Err(Error::precondition(format!(
                    "{ty} severity table {t:?} is not strictly increasing"
                )));
            }
            let floor = if ty == DistortionType::Motion { 1.0 } else { 0.0 };
            if t[0] < floor || !t.iter().all(|v| v.is_finite()) {
                return Err(Error::precondition(format!("{ty} severity table {t:?} out of range")));
            }
        }
        if self.smoke_alpha[3] > 1.0 {
            return Err(Error::precondition("smoke alpha above 1"));
        }
        Ok(())
    }
}

/// Smoke density for frame `t`: three octaves of value noise, shifted by
/// `drift * t` pixels horizontally and normalized to `[0, 1]`.
pub fn smoke_field(width: usize, height: usize, seed: u64, drift: f64, t: usize) -> ScalarField {
    let cell = width.max(height) as f64 / 2.0;
    let shift = drift * t as f64;
    let mut data: Vec<f64> = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            data.push(fractal_noise(seed, x as f64 + shift, y as f64 + 0.25 * shift, cell, 3));
        }
    }
    let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    ScalarField {
        width,
        height,
        data: data
            .into_iter()
            .map(|v| if span > 0.0 { ((v - lo) / span) as f32 } else { 0.0 })
            .collect(),
    }
}

/// Distorts every frame of `clip` with the tabulated magnitude.
///
/// Motion angle and illumination center are drawn once per clip, noise is
/// fresh for every frame and the smoke field drifts frame by frame.
pub fn distort_clip(
    clip: &VideoClip,
    ty: DistortionType,
    level: SeverityLevel,
    params: &DistortionParams,
    seed: u64,
) -> Result<VideoClip> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = params.magnitude(ty, level);
    let (w, h) = (clip.width(), clip.height());
    let angle = rng.random_range(0.0..std::f64::consts::PI);
    let center = (rng.random_range(0.3..0.7), rng.random_range(0.3..0.7));
    let smoke_seed = rng.next_u64();
    let frames = clip
        .frames()
        .iter()
        .enumerate()
        .map(|(t, f)| match ty {
            DistortionType::Noise => apply_white_noise(f, m, &mut rng),
            DistortionType::Defocus => apply_defocus_blur(f, m),
            DistortionType::Motion => apply_motion_blur(f, m, angle),
            DistortionType::Smoke => {
                apply_smoke(f, m, &smoke_field(w, h, smoke_seed, params.smoke_drift, t))
            }
            DistortionType::Illumination => apply_uneven_illumination(f, m, center),
        })
        .collect::<Result<Vec<Frame>>>()?;
    VideoClip::new(
        format!("{}_{}_{}", clip.id, ty.code(), level.code()),
        frames,
        clip.fps,
        clip.id.clone(),
    )
}

/// Seed for one (reference, type, level) job, derived from the dataset seed.
pub fn clip_seed(base: u64, reference: usize, ty: DistortionType, level: SeverityLevel) -> u64 {
    let key = ((reference as u64) << 16) | ((ty.index() as u64) << 8) | level.value() as u64;
    base.wrapping_mul(0x9e37_79b9_7f4a_7c15).rotate_left(17) ^ key.wrapping_mul(0xd6e8_feb8_6659_fd93)
}

/// Writes every reference under all 20 (type, level) combinations to
/// `out_dir/<ref>_<type>_<level>/` and returns the manifest, already split
/// 80/20 per clip with `params.seed`.
pub fn synthesize_dataset(
    references: &[VideoClip],
    out_dir: impl AsRef<Path>,
    params: &DistortionParams,
    format: FrameFormat,
) -> Result<DatasetManifest> {
    let out_dir = out_dir.as_ref();
    if references.is_empty() {
        return Err(Error::precondition("at least one reference clip is required"));
    }
    params.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let jobs: Vec<(usize, DistortionType, SeverityLevel)> = (0..references.len())
        .flat_map(|r| {
            DistortionType::ALL
                .into_iter()
                .flat_map(move |t| SeverityLevel::ALL.into_iter().map(move |l| (r, t, l)))
        })
        .collect();
    let entries = jobs
        .par_iter()
        .map(|&(r, ty, level)| {
            let reference = &references[r];
            let clip = distort_clip(reference, ty, level, params, clip_seed(params.seed, r, ty, level))?;
            write_clip(&clip, out_dir.join(&clip.id), format)?;
            Ok(ManifestEntry {
                clip_path: clip.id.clone(),
                reference_id: reference.id.clone(),
                distortion_type: ty,
                severity_level: level,
                mos: None,
                split: Split::Train,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest::new(entries, out_dir)?;
    make_split(
        &manifest,
        &SplitSpec {
            seed: params.seed,
            ..SplitSpec::default()
        },
    )
}
