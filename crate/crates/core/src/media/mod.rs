//! Frames, clips and the on-disk formats they travel in.
//!
//! Pixels are held as planar RGB `f32` in `[0, 1]`. Conversion from 8-bit
//! storage divides by 255; conversion back rounds half up, so an 8-bit
//! image survives a load/write cycle unchanged.

mod manifest;
mod scene;

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub use manifest::{make_split, DatasetManifest, ManifestEntry, Split, SplitGranularity, SplitSpec};
pub use scene::{synthetic_reference, SceneSpec};

/// Default frame rate of the laparoscopic recordings.
pub const DEFAULT_FPS: f64 = 25.0;

/// One RGB frame, planar layout (`R` plane, then `G`, then `B`).
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Frame {
    pub const CHANNELS: usize = 3;

    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::shape("frame dimensions must be positive"));
        }
        if data.len() != width * height * Self::CHANNELS {
            return Err(Error::shape(format!(
                "frame {}x{} needs {} values, got {}",
                width,
                height,
                width * height * Self::CHANNELS,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::format(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Frame {
            width,
            height,
            data,
        })
    }

    /// Builds a frame from unchecked values, clamping each into `[0, 1]`.
    /// NaN becomes 0.
    pub fn from_clamped(width: usize, height: usize, mut data: Vec<f32>) -> Self {
        assert_eq!(data.len(), width * height * Self::CHANNELS);
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Frame {
            width,
            height,
            data,
        }
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self::from_clamped(width, height, vec![value; width * height * Self::CHANNELS])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn plane(&self, channel: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[channel * n..(channel + 1) * n]
    }

    #[inline]
    pub fn get(&self, channel: usize, y: usize, x: usize) -> f32 {
        self.data[(channel * self.height + y) * self.width + x]
    }

    pub fn same_dims(&self, other: &Frame) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Interleaved 8-bit RGB, rounding half up.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let n = self.width * self.height;
        let mut out = Vec::with_capacity(n * 3);
        for i in 0..n {
            for c in 0..3 {
                out.push(quantize(self.data[c * n + i]));
            }
        }
        out
    }

    pub fn from_rgb8(width: usize, height: usize, rgb: &[u8]) -> Result<Self> {
        let n = width * height;
        if rgb.len() != n * 3 {
            return Err(Error::shape(format!(
                "expected {} bytes of RGB data, got {}",
                n * 3,
                rgb.len()
            )));
        }
        let mut data = vec![0.0f32; n * 3];
        for i in 0..n {
            for c in 0..3 {
                data[c * n + i] = rgb[i * 3 + c] as f32 / 255.0;
            }
        }
        Frame::new(width, height, data)
    }

    /// Copies the `size_w` x `size_h` window whose top-left corner is `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, size_w: usize, size_h: usize) -> Result<Frame> {
        if x0 + size_w > self.width || y0 + size_h > self.height || size_w == 0 || size_h == 0 {
            return Err(Error::shape(format!(
                "crop {size_w}x{size_h}+{x0}+{y0} outside {}x{} frame",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(size_w * size_h * 3);
        for c in 0..3 {
            let plane = self.plane(c);
            for y in y0..y0 + size_h {
                let row = y * self.width;
                data.extend_from_slice(&plane[row + x0..row + x0 + size_w]);
            }
        }
        Ok(Frame {
            width: size_w,
            height: size_h,
            data,
        })
    }

    pub fn center_crop(&self, size_w: usize, size_h: usize) -> Result<Frame> {
        if size_w > self.width || size_h > self.height {
            return Err(Error::shape(format!(
                "frame {}x{} smaller than crop {size_w}x{size_h}",
                self.width, self.height
            )));
        }
        self.crop(
            (self.width - size_w) / 2,
            (self.height - size_h) / 2,
            size_w,
            size_h,
        )
    }

    pub fn flip_horizontal(&self) -> Frame {
        let mut data = self.data.clone();
        for row in data.chunks_mut(self.width) {
            row.reverse();
        }
        Frame {
            width: self.width,
            height: self.height,
            data,
        }
    }
}

#[inline]
fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// An ordered sequence of equally sized frames.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub id: String,
    frames: Vec<Frame>,
    pub fps: f64,
    pub source_ref: String,
}

impl VideoClip {
    pub fn new(
        id: impl Into<String>,
        frames: Vec<Frame>,
        fps: f64,
        source_ref: impl Into<String>,
    ) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::precondition("a clip needs at least one frame"))?;
        if let Some((i, f)) = frames.iter().enumerate().find(|(_, f)| !f.same_dims(first)) {
            return Err(Error::shape(format!(
                "frame {i} is {}x{}, expected {}x{}",
                f.width(),
                f.height(),
                first.width(),
                first.height()
            )));
        }
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(Error::precondition(format!("fps must be positive, got {fps}")));
        }
        Ok(VideoClip {
            id: id.into(),
            frames,
            fps,
            source_ref: source_ref.into(),
        })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<Frame> {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn width(&self) -> usize {
        self.frames[0].width()
    }

    pub fn height(&self) -> usize {
        self.frames[0].height()
    }
}

/// On-disk frame encodings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FrameFormat {
    #[default]
    Ppm,
    Png,
}

impl FrameFormat {
    pub fn extension(self) -> &'static str {
        match self {
            FrameFormat::Ppm => "ppm",
            FrameFormat::Png => "png",
        }
    }

    fn from_path(path: &Path) -> Option<Self> {
        let ext = path.extension()?.to_str()?.to_ascii_lowercase();
        match ext.as_str() {
            "ppm" => Some(FrameFormat::Ppm),
            "png" => Some(FrameFormat::Png),
            _ => None,
        }
    }
}

const PNG_SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a];

/// Reads a binary PPM (P6, maxval 255) or an 8-bit RGB PNG.
pub fn load_frame(path: impl AsRef<Path>) -> Result<Frame> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ctx = |e: Error| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    };
    if bytes.starts_with(b"P6") {
        decode_ppm(&bytes).map_err(ctx)
    } else if bytes.starts_with(&PNG_SIGNATURE) {
        decode_png(&bytes).map_err(ctx)
    } else {
        Err(Error::format(format!(
            "{}: unsupported image format (expected P6 PPM or PNG)",
            path.display()
        )))
    }
}

/// Writes a frame; the encoding follows the file extension (`.ppm` or `.png`).
pub fn write_frame(frame: &Frame, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let format = FrameFormat::from_path(path).ok_or_else(|| {
        Error::format(format!(
            "{}: cannot infer frame format from extension",
            path.display()
        ))
    })?;
    let bytes = match format {
        FrameFormat::Ppm => encode_ppm(frame),
        FrameFormat::Png => encode_png(frame)?,
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn encode_ppm(frame: &Frame) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", frame.width(), frame.height()).into_bytes();
    out.extend_from_slice(&frame.to_rgb8());
    out
}

fn decode_ppm(bytes: &[u8]) -> Result<Frame> {
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // whitespace and comments between header tokens
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format("malformed PPM header"))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::format(format!("unsupported PPM maxval {maxval}")));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::format("malformed PPM header"));
    }
    pos += 1;
    let need = width * height * 3;
    let payload = bytes
        .get(pos..pos + need)
        .ok_or_else(|| Error::format("truncated PPM payload"))?;
    Frame::from_rgb8(width, height, payload)
}

fn encode_png(frame: &Frame) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, frame.width() as u32, frame.height() as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::format(format!("png encode: {e}")))?;
        writer
            .write_image_data(&frame.to_rgb8())
            .map_err(|e| Error::format(format!("png encode: {e}")))?;
    }
    Ok(out)
}

fn decode_png(bytes: &[u8]) -> Result<Frame> {
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec
        .read_info()
        .map_err(|e| Error::format(format!("png decode: {e}")))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format("png image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(format!("png decode: {e}")))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::format(format!(
            "expected 8-bit 3-channel RGB PNG, got {:?} {:?}",
            info.color_type, info.bit_depth
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut rgb = Vec::with_capacity(w * h * 3);
    for row in buf[..info.buffer_size()].chunks(info.line_size) {
        rgb.extend_from_slice(&row[..w * 3]);
    }
    Frame::from_rgb8(w, h, &rgb)
}

/// Frame files of a clip directory in lexicographic order.
pub fn list_frame_files(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_file() && FrameFormat::from_path(&path).is_some() {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Loads every frame of a clip directory. `fps` defaults to 25.
pub fn load_clip(dir: impl AsRef<Path>, fps: Option<f64>) -> Result<VideoClip> {
    let dir = dir.as_ref();
    let files = list_frame_files(dir)?;
    if files.is_empty() {
        return Err(Error::precondition(format!(
            "{}: no frame files found",
            dir.display()
        )));
    }
    let frames = files.iter().map(load_frame).collect::<Result<Vec<_>>>()?;
    let id = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    VideoClip::new(id.clone(), frames, fps.unwrap_or(DEFAULT_FPS), id)
}

/// Writes a clip as `frame_000.<ext>`, `frame_001.<ext>`, ... into `dir`.
pub fn write_clip(clip: &VideoClip, dir: impl AsRef<Path>, format: FrameFormat) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, frame) in clip.frames().iter().enumerate() {
        write_frame(frame, dir.join(format!("frame_{i:03}.{}", format.extension())))?;
    }
    Ok(())
}

/// Temporal indices picked by [`sample_frames`]: `floor(i * len / n)` when
/// the clip is long enough, otherwise every frame followed by repeats of
/// the last one.
pub fn sample_indices(len: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::precondition("number of sampled frames must be at least 1"));
    }
    if len == 0 {
        return Err(Error::precondition("cannot sample from an empty clip"));
    }
    Ok(if len >= n {
        (0..n).map(|i| i * len / n).collect()
    } else {
        (0..n).map(|i| i.min(len - 1)).collect()
    })
}

pub fn sample_frames(clip: &VideoClip, n: usize) -> Result<Vec<Frame>> {
    Ok(sample_indices(clip.len(), n)?
        .into_iter()
        .map(|i| clip.frames()[i].clone())
        .collect())
}
