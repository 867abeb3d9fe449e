//! Synthetic moving-shape videos and the `ARVV1` raw video file format.
//!
//! File layout (all integers little-endian):
//!
//! | offset | size | content                                   |
//! |--------|------|-------------------------------------------|
//! | 0      | 4    | magic `41 52 56 56` ("ARVV")              |
//! | 4      | 1    | version `01`                              |
//! | 5      | 1    | dtype code, `01` = f32                    |
//! | 6      | 2    | reserved, zero                            |
//! | 8      | 16   | `T`, `H`, `W`, `C` as u32                 |
//! | 24     | 4·N  | `N = T·H·W·C` f32 values, (t,h,w,c) order |

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::rng::{Rng, STREAM_VIDEO};

pub const VIDEO_MAGIC: [u8; 4] = *b"ARVV";
pub const VIDEO_VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 1;
const HEADER_LEN: usize = 24;

/// Dense video, values in `[0, 1]`, stored in (t, h, w, c) row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoTensor {
    pub t_frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl VideoTensor {
    pub fn new(t_frames: usize, height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        let n = t_frames
            .checked_mul(height)
            .and_then(|n| n.checked_mul(width))
            .and_then(|n| n.checked_mul(channels))
            .ok_or(FormatError::DimensionOverflow)?;
        if n != data.len() {
            return Err(Error::config(
                "data",
                format!("expected {n} values for {t_frames}x{height}x{width}x{channels}, got {}", data.len()),
            ));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::config("data", format!("value {bad} outside [0, 1]")));
        }
        Ok(Self {
            t_frames,
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(t_frames: usize, height: usize, width: usize, channels: usize) -> Self {
        Self {
            t_frames,
            height,
            width,
            channels,
            data: vec![0.0; t_frames * height * width * channels],
        }
    }

    #[inline]
    pub fn index(&self, t: usize, h: usize, w: usize, c: usize) -> usize {
        ((t * self.height + h) * self.width + w) * self.channels + c
    }

    pub fn get(&self, t: usize, h: usize, w: usize, c: usize) -> f32 {
        self.data[self.index(t, h, w, c)]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledVideo {
    pub video: VideoTensor,
    pub label: usize,
}

/// Parameters of the moving-square classification task.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionTaskSpec {
    pub t_frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// 4 or 8 motion directions; the direction index is the label.
    pub num_directions: usize,
    pub shape_size: usize,
    /// Pixels per frame along each moving axis.
    pub speed: usize,
    /// Amplitude of additive uniform noise, in `[0, 0.1]`.
    pub noise: f32,
    pub seed: u64,
}

impl Default for MotionTaskSpec {
    fn default() -> Self {
        Self {
            t_frames: 8,
            height: 32,
            width: 32,
            channels: 1,
            num_directions: 8,
            shape_size: 8,
            speed: 2,
            noise: 0.0,
            seed: 0,
        }
    }
}

/// Unit step `(dy, dx)` for direction `k`, counter-clockwise from east.
pub fn direction_step(num_directions: usize, k: usize) -> (isize, isize) {
    const EIGHT: [(isize, isize); 8] = [
        (0, 1),
        (-1, 1),
        (-1, 0),
        (-1, -1),
        (0, -1),
        (1, -1),
        (1, 0),
        (1, 1),
    ];
    if num_directions == 4 {
        EIGHT[2 * (k % 4)]
    } else {
        EIGHT[k % 8]
    }
}

impl MotionTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("t_frames", self.t_frames),
            ("height", self.height),
            ("width", self.width),
            ("channels", self.channels),
            ("shape_size", self.shape_size),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.shape_size >= self.height.min(self.width) {
            return Err(Error::config("shape_size", "must be smaller than min(height, width)"));
        }
        if self.num_directions != 4 && self.num_directions != 8 {
            return Err(Error::config("num_directions", "must be 4 or 8"));
        }
        if !(0.0..=0.1).contains(&self.noise) {
            return Err(Error::config("noise", "must lie in [0, 0.1]"));
        }
        Ok(())
    }

    /// Initial top-left corner `(row, col)` and per-frame velocity of video `index`.
    pub fn trajectory(&self, index: u64) -> ((usize, usize), (isize, isize)) {
        let mut rng = Rng::substream(self.seed, &[STREAM_VIDEO, index]);
        let row = rng.below(self.height as u64) as usize;
        let col = rng.below(self.width as u64) as usize;
        let (dy, dx) = direction_step(self.num_directions, self.label_of(index));
        let s = self.speed as isize;
        ((row, col), (dy * s, dx * s))
    }

    pub fn label_of(&self, index: u64) -> usize {
        (index % self.num_directions as u64) as usize
    }
}

/// Renders video `index` of the task: a `shape_size` square of intensity 1
/// moving with constant velocity on a zero background, wrapping toroidally.
/// Noise (when enabled) is drawn from the same stream after the trajectory.
pub fn generate_moving_shape(spec: &MotionTaskSpec, index: u64) -> Result<LabeledVideo> {
    spec.validate()?;
    let ((row0, col0), (vy, vx)) = spec.trajectory(index);
    let mut rng = Rng::substream(spec.seed, &[STREAM_VIDEO, index]);
    rng.below(spec.height as u64);
    rng.below(spec.width as u64);

    let (h, w) = (spec.height as isize, spec.width as isize);
    let mut video = VideoTensor::zeros(spec.t_frames, spec.height, spec.width, spec.channels);
    for t in 0..spec.t_frames {
        let r = (row0 as isize + vy * t as isize).rem_euclid(h);
        let c = (col0 as isize + vx * t as isize).rem_euclid(w);
        for i in 0..spec.shape_size as isize {
            for j in 0..spec.shape_size as isize {
                let (pr, pc) = ((r + i).rem_euclid(h) as usize, (c + j).rem_euclid(w) as usize);
                for ch in 0..spec.channels {
                    let idx = video.index(t, pr, pc, ch);
                    video.data[idx] = 1.0;
                }
            }
        }
    }
    if spec.noise > 0.0 {
        for v in &mut video.data {
            *v = (*v + spec.noise * rng.uniform() as f32).min(1.0);
        }
    }
    Ok(LabeledVideo {
        video,
        label: spec.label_of(index),
    })
}

pub fn encode_video(v: &VideoTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * v.data.len());
    out.extend_from_slice(&VIDEO_MAGIC);
    out.push(VIDEO_VERSION);
    out.push(DTYPE_F32);
    out.extend_from_slice(&[0, 0]);
    for d in [v.t_frames, v.height, v.width, v.channels] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for x in &v.data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode_video(bytes: &[u8]) -> Result<VideoTensor> {
    if bytes.len() < 4 || bytes[..4] != VIDEO_MAGIC {
        return Err(FormatError::BadMagic.into());
    }
    if bytes.len() < HEADER_LEN {
        return Err(FormatError::TruncatedHeader.into());
    }
    if bytes[4] != VIDEO_VERSION {
        return Err(FormatError::UnsupportedVersion(bytes[4] as u16).into());
    }
    if bytes[5] != DTYPE_F32 {
        return Err(FormatError::UnsupportedDtype(bytes[5]).into());
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as u64;
    let (t, h, w, c) = (dim(0), dim(1), dim(2), dim(3));
    let count = t
        .checked_mul(h)
        .and_then(|n| n.checked_mul(w))
        .and_then(|n| n.checked_mul(c))
        .ok_or(FormatError::DimensionOverflow)?;
    let expected = count.checked_mul(4).ok_or(FormatError::DimensionOverflow)?;
    let found = (bytes.len() - HEADER_LEN) as u64;
    if found < expected {
        return Err(FormatError::TruncatedPayload { expected, found }.into());
    }
    if found > expected {
        return Err(FormatError::TrailingBytes.into());
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(VideoTensor {
        t_frames: t as usize,
        height: h as usize,
        width: w as usize,
        channels: c as usize,
        data,
    })
}

pub fn write_video_file(path: impl AsRef<Path>, v: &VideoTensor) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_video(v))?;
    Ok(())
}

pub fn read_video_file(path: impl AsRef<Path>) -> Result<VideoTensor> {
    decode_video(&fs::read(path)?)
}

pub const LABELS_FILE: &str = "labels.csv";

pub fn video_file_name(index: usize) -> String {
    format!("video_{index:06}.arvv")
}

/// Writes `video_NNNNNN.arvv` files plus a `labels.csv` (`file,label`).
pub fn write_dataset(dir: impl AsRef<Path>, videos: &[LabeledVideo]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut labels = String::from("file,label\n");
    for (i, lv) in videos.iter().enumerate() {
        let name = video_file_name(i);
        write_video_file(dir.join(&name), &lv.video)?;
        labels.push_str(&format!("{name},{}\n", lv.label));
    }
    fs::write(dir.join(LABELS_FILE), labels)?;
    Ok(())
}

/// Reads a directory written by [`write_dataset`], in `labels.csv` order.
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Vec<LabeledVideo>> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join(LABELS_FILE))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let (file, label) = line
            .split_once(',')
            .ok_or_else(|| Error::Dataset(format!("{LABELS_FILE} line {}: expected file,label", n + 1)))?;
        let label = label
            .trim()
            .parse()
            .map_err(|_| Error::Dataset(format!("{LABELS_FILE} line {}: bad label", n + 1)))?;
        out.push(LabeledVideo {
            video: read_video_file(dir.join(file.trim()))?,
            label,
        });
    }
    Ok(out)
}

/// Generates videos `0..count` of the task.
pub fn generate_corpus(spec: &MotionTaskSpec, count: usize) -> Result<Vec<LabeledVideo>> {
    (0..count as u64).map(|i| generate_moving_shape(spec, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let spec = MotionTaskSpec {
            noise: 0.05,
            ..Default::default()
        };
        assert_eq!(generate_moving_shape(&spec, 5).unwrap(), generate_moving_shape(&spec, 5).unwrap());
    }

    #[test]
    fn zero_speed_freezes_frames() {
        let spec = MotionTaskSpec {
            speed: 0,
            ..Default::default()
        };
        let v = generate_moving_shape(&spec, 2).unwrap().video;
        let frame = v.height * v.width * v.channels;
        for t in 1..v.t_frames {
            assert_eq!(v.data[..frame], v.data[t * frame..(t + 1) * frame]);
        }
    }

    #[test]
    fn invalid_spec_names_field() {
        let spec = MotionTaskSpec {
            num_directions: 6,
            ..Default::default()
        };
        match generate_moving_shape(&spec, 0) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "num_directions"),
            other => panic!("unexpected {other:?}"),
        }
        let spec = MotionTaskSpec {
            shape_size: 32,
            ..Default::default()
        };
        assert!(matches!(generate_moving_shape(&spec, 0), Err(Error::Config { field, .. }) if field == "shape_size"));
    }

    #[test]
    fn labels_are_round_robin() {
        let spec = MotionTaskSpec::default();
        let mut counts = [0usize; 8];
        for i in 0..80 {
            counts[generate_moving_shape(&spec, i).unwrap().label] += 1;
        }
        assert_eq!(counts, [10; 8]);
    }

    #[test]
    fn bad_magic_and_truncation() {
        let v = VideoTensor::zeros(2, 3, 4, 1);
        let mut bytes = encode_video(&v);
        assert!(matches!(decode_video(&bytes[..bytes.len() - 3]), Err(Error::Format(FormatError::TruncatedPayload { .. }))));
        bytes[0] = b'X';
        assert!(matches!(decode_video(&bytes), Err(Error::Format(FormatError::BadMagic))));
    }

    #[test]
    fn huge_dimensions_overflow() {
        let mut bytes = encode_video(&VideoTensor::zeros(1, 1, 1, 1));
        for i in 0..4 {
            bytes[8 + 4 * i..12 + 4 * i].copy_from_slice(&u32::MAX.to_le_bytes());
        }
        assert!(matches!(decode_video(&bytes), Err(Error::Format(FormatError::DimensionOverflow))));
    }
}
