//! Datasets, input encoding, normalization and batching.
//!
//! Two on-disk formats are read: the big-endian IDX layout used by MNIST and
//! a flat pre-binned frame file (`PBF1`) for event data already accumulated
//! into `T` frames.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{RngState, Tensor};

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;
const PBF_MAGIC: &[u8; 4] = b"PBF1";
const PBF_LABEL_WIDTH: u32 = 2;
const NORM_EPS: f64 = 1e-8;

/// Samples of identical shape, each `frames` frames of `[c, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub shape: [usize; 3],
    /// 1 for static images; `T` for pre-binned event data.
    pub frames: usize,
    pub classes: usize,
    data: Vec<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(shape: [usize; 3], frames: usize, classes: usize, data: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        let per = shape.iter().product::<usize>() * frames;
        if per == 0 || data.len() != per * labels.len() {
            return Err(Error::shape("dataset", &[labels.len(), per], &[data.len()]));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::LabelOutOfRange { label: y, classes });
        }
        Ok(Self { shape, frames, classes, data, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn frame_dim(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn sample_dim(&self) -> usize {
        self.frame_dim() * self.frames
    }

    /// All frames of sample `i`, concatenated.
    pub fn sample(&self, i: usize) -> &[f64] {
        let d = self.sample_dim();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// First `n` samples.
    pub fn truncate(&mut self, n: usize) {
        let n = n.min(self.len());
        self.data.truncate(n * self.sample_dim());
        self.labels.truncate(n);
    }

    /// Samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut data = Vec::with_capacity(indices.len() * self.sample_dim());
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        Dataset {
            shape: self.shape,
            frames: self.frames,
            classes: self.classes,
            data,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(path: &'a Path, bytes: &'a [u8]) -> Self {
        Self { path, bytes, pos: 0 }
    }

    fn err(&self, offset: usize, reason: impl Into<String>) -> Error {
        Error::Parse { path: self.path.to_path_buf(), offset: offset as u64, reason: reason.into() }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.err(self.bytes.len(), format!("truncated file while reading {what} ({n} bytes needed at {})", self.pos))),
        }
    }

    fn u32_be(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u32_le(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.err(self.pos, format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

/// `(rows, cols, raw pixels)` from an IDX image file.
pub fn read_idx_images(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = read_file(path)?;
    let mut c = Cursor::new(path, &bytes);
    let magic = c.u32_be("magic")?;
    if magic != IDX_IMAGES {
        return Err(c.err(0, format!("bad magic {magic:#010x}, expected {IDX_IMAGES:#010x}")));
    }
    let n = c.u32_be("image count")? as usize;
    let rows = c.u32_be("row count")? as usize;
    let cols = c.u32_be("column count")? as usize;
    let pixels = c.take(n * rows * cols, "pixel data")?.to_vec();
    c.finish()?;
    Ok((rows, cols, pixels))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = read_file(path)?;
    let mut c = Cursor::new(path, &bytes);
    let magic = c.u32_be("magic")?;
    if magic != IDX_LABELS {
        return Err(c.err(0, format!("bad magic {magic:#010x}, expected {IDX_LABELS:#010x}")));
    }
    let n = c.u32_be("label count")? as usize;
    let labels = c.take(n, "label data")?.to_vec();
    c.finish()?;
    Ok(labels)
}

/// Image/label IDX pair as a single-channel dataset with pixels scaled to `[0, 1]`.
pub fn load_idx(images: &Path, labels: &Path, classes: usize) -> Result<Dataset> {
    let (rows, cols, pixels) = read_idx_images(images)?;
    let raw_labels = read_idx_labels(labels)?;
    let n = raw_labels.len();
    if pixels.len() != n * rows * cols {
        return Err(Error::InvalidArgument(format!(
            "{} holds {} images but {} holds {n} labels",
            images.display(),
            pixels.len() / (rows * cols).max(1),
            labels.display()
        )));
    }
    let labels: Vec<usize> = raw_labels.iter().map(|&v| v as usize).collect();
    let data = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    Dataset::new([1, rows, cols], 1, classes, data, labels)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Standard MNIST file names under `dir`.
pub fn mnist_paths(dir: &Path, split: Split) -> (PathBuf, PathBuf) {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    (dir.join(format!("{prefix}-images-idx3-ubyte")), dir.join(format!("{prefix}-labels-idx1-ubyte")))
}

pub fn load_mnist(dir: &Path, split: Split) -> Result<Dataset> {
    let (images, labels) = mnist_paths(dir, split);
    for p in [&images, &labels] {
        if !p.exists() {
            return Err(Error::Missing(format!("MNIST file {} not found", p.display())));
        }
    }
    load_idx(&images, &labels, 10)
}

/// Writes a dataset of `T`-frame samples in the `PBF1` layout.
pub fn write_pbf(path: &Path, ds: &Dataset) -> Result<()> {
    let [c, h, w] = ds.shape;
    let mut out = Vec::with_capacity(28 + ds.data.len() * 4 + ds.len() * 2);
    out.extend_from_slice(PBF_MAGIC);
    for v in [ds.frames, c, h, w, ds.len()] {
        let v = u32::try_from(v).map_err(|_| Error::InvalidArgument("dimension exceeds u32".into()))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&PBF_LABEL_WIDTH.to_le_bytes());
    for &v in &ds.data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    for &y in &ds.labels {
        let y = u16::try_from(y).map_err(|_| Error::InvalidArgument("label exceeds u16".into()))?;
        out.extend_from_slice(&y.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_pbf(path: &Path, classes: usize) -> Result<Dataset> {
    let bytes = read_file(path)?;
    let mut c = Cursor::new(path, &bytes);
    let magic = c.take(4, "magic")?;
    if magic != PBF_MAGIC {
        return Err(c.err(0, "bad magic, expected PBF1"));
    }
    let t = c.u32_le("T")? as usize;
    let ch = c.u32_le("C")? as usize;
    let h = c.u32_le("H")? as usize;
    let w = c.u32_le("W")? as usize;
    let n = c.u32_le("N")? as usize;
    let lw_pos = c.pos;
    let lw = c.u32_le("label width")?;
    if lw != PBF_LABEL_WIDTH {
        return Err(c.err(lw_pos, format!("unsupported label width {lw}, expected {PBF_LABEL_WIDTH}")));
    }
    let count = n * t * ch * h * w;
    let raw = c.take(count * 4, "frame data")?;
    let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64).collect();
    let raw_labels = c.take(n * 2, "labels")?;
    let labels = raw_labels.chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]]) as usize).collect();
    c.finish()?;
    Dataset::new([ch, h, w], t, classes, data, labels)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EncoderSpec {
    /// The sample is applied as a constant input current at every step.
    #[default]
    ConstantCurrent,
    /// Stored frames are passed through; their count must equal `T`.
    PreBinnedFrames,
    /// Bernoulli spikes with probability `rate * pixel` (clamped to `[0, 1]`).
    PoissonSynthetic { rate: f64 },
}

/// Per-step input frames for one sample.
pub fn encode(sample: &[f64], frames: usize, spec: EncoderSpec, t_steps: usize, rng: &mut RngState) -> Result<Vec<Tensor>> {
    let d = sample.len() / frames.max(1);
    match spec {
        EncoderSpec::ConstantCurrent => {
            let x = Tensor::from_vec(sample[..d].to_vec());
            Ok(vec![x; t_steps])
        }
        EncoderSpec::PreBinnedFrames => {
            if frames != t_steps {
                return Err(Error::InvalidArgument(format!("sample has {frames} frames but T = {t_steps}")));
            }
            Ok(sample.chunks(d).map(|f| Tensor::from_vec(f.to_vec())).collect())
        }
        EncoderSpec::PoissonSynthetic { rate } => Ok((0..t_steps)
            .map(|_| {
                Tensor::from_vec(sample[..d].iter().map(|&p| if rng.bernoulli((rate * p).clamp(0.0, 1.0)) { 1.0 } else { 0.0 }).collect())
            })
            .collect()),
    }
}

/// Input of one training or evaluation batch.
#[derive(Clone, Debug, PartialEq)]
pub enum BatchInput {
    /// `[batch, dim]`, identical at every time step.
    Static(Tensor),
    /// One `[batch, dim]` tensor per time step.
    Frames(Vec<Tensor>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub input: BatchInput,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn check(&self, dim: usize, t_steps: usize) -> Result<()> {
        let b = self.labels.len();
        match &self.input {
            BatchInput::Static(x) => x.ensure_shape("batch input", &[b, dim]),
            BatchInput::Frames(f) => {
                if f.len() != t_steps {
                    return Err(Error::shape("batch frames", &[t_steps], &[f.len()]));
                }
                f.iter().try_for_each(|x| x.ensure_shape("batch frame", &[b, dim]))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Augment {
    /// Zero-padding before a random crop back to the original size.
    pub crop_padding: usize,
    pub horizontal_flip: bool,
}

impl Augment {
    pub fn is_identity(&self) -> bool {
        self.crop_padding == 0 && !self.horizontal_flip
    }

    fn apply(&self, x: &[f64], shape: [usize; 3], rng: &mut RngState) -> Vec<f64> {
        let [c, h, w] = shape;
        let p = self.crop_padding as isize;
        let dy = if p > 0 { rng.below(2 * p as usize + 1) as isize - p } else { 0 };
        let dx = if p > 0 { rng.below(2 * p as usize + 1) as isize - p } else { 0 };
        let flip = self.horizontal_flip && rng.bernoulli(0.5);
        let mut out = vec![0.0; x.len()];
        for ch in 0..c {
            for y in 0..h {
                let sy = y as isize + dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for xx in 0..w {
                    let src_x = if flip { w - 1 - xx } else { xx } as isize + dx;
                    if src_x < 0 || src_x >= w as isize {
                        continue;
                    }
                    out[(ch * h + y) * w + xx] = x[(ch * h + sy as usize) * w + src_x as usize];
                }
            }
        }
        out
    }
}

/// Stacks the samples at `indices` into a batch.
pub fn make_batch(
    ds: &Dataset,
    indices: &[usize],
    spec: EncoderSpec,
    t_steps: usize,
    augment: Augment,
    rng: &mut RngState,
) -> Result<Batch> {
    let b = indices.len();
    let d = ds.frame_dim();
    let labels = indices.iter().map(|&i| ds.label(i)).collect();
    let fetch = |i: usize, rng: &mut RngState| -> Vec<f64> {
        let s = ds.sample(i);
        if augment.is_identity() {
            s.to_vec()
        } else {
            s.chunks(d).flat_map(|f| augment.apply(f, ds.shape, rng)).collect()
        }
    };
    let input = match spec {
        EncoderSpec::ConstantCurrent => {
            let mut data = Vec::with_capacity(b * d);
            for &i in indices {
                data.extend_from_slice(&fetch(i, rng)[..d]);
            }
            BatchInput::Static(Tensor::matrix(b, d, data)?)
        }
        _ => {
            let mut frames = vec![Vec::with_capacity(b * d); t_steps];
            for &i in indices {
                let enc = encode(&fetch(i, rng), ds.frames, spec, t_steps, rng)?;
                for (dst, f) in frames.iter_mut().zip(enc) {
                    dst.extend_from_slice(f.data());
                }
            }
            BatchInput::Frames(frames.into_iter().map(|f| Tensor::matrix(b, d, f)).collect::<Result<_>>()?)
        }
    };
    Ok(Batch { input, labels })
}

/// Shuffled index order for one epoch.
pub fn epoch_order(n: usize, rng: &mut RngState) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut idx);
    idx
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    #[default]
    Global,
    PerChannel,
}

/// Affine normalization fitted on a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mode: NormMode,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn fit(train: &Dataset, mode: NormMode) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::TooFewSamples { required: 1, actual: 0 });
        }
        let [c, h, w] = train.shape;
        let plane = h * w;
        let groups = match mode {
            NormMode::Global => 1,
            NormMode::PerChannel => c,
        };
        let mut sum = vec![0.0; groups];
        let mut cnt = vec![0usize; groups];
        let group_of = |k: usize| match mode {
            NormMode::Global => 0,
            NormMode::PerChannel => (k / plane) % c,
        };
        for (k, &v) in train.data.iter().enumerate() {
            let g = group_of(k);
            sum[g] += v;
            cnt[g] += 1;
        }
        let mean: Vec<f64> = sum.iter().zip(&cnt).map(|(s, &n)| s / n as f64).collect();
        let mut sq = vec![0.0; groups];
        for (k, &v) in train.data.iter().enumerate() {
            let g = group_of(k);
            sq[g] += (v - mean[g]) * (v - mean[g]);
        }
        let std = sq.iter().zip(&cnt).map(|(s, &n)| (s / n as f64).sqrt().max(NORM_EPS)).collect();
        Ok(Self { mode, mean, std })
    }

    pub fn apply(&self, ds: &mut Dataset) -> Result<()> {
        let [c, h, w] = ds.shape;
        let plane = h * w;
        if self.mode == NormMode::PerChannel && self.mean.len() != c {
            return Err(Error::shape("normalizer channels", &[self.mean.len()], &[c]));
        }
        for (k, v) in ds.data.iter_mut().enumerate() {
            let g = match self.mode {
                NormMode::Global => 0,
                NormMode::PerChannel => (k / plane) % c,
            };
            *v = (*v - self.mean[g]) / self.std[g];
        }
        Ok(())
    }
}

/// Fits on `train` and normalizes both splits with the training statistics.
pub fn normalize(train: &mut Dataset, test: &mut Dataset, mode: NormMode) -> Result<Normalizer> {
    let n = Normalizer::fit(train, mode)?;
    n.apply(train)?;
    n.apply(test)?;
    Ok(n)
}

/// Gaussian clusters around random class prototypes; a quick learnable task.
pub fn synthetic_clusters(n: usize, dim: usize, classes: usize, noise: f64, rng: &mut RngState) -> Result<Dataset> {
    let protos: Vec<Vec<f64>> = (0..classes).map(|_| (0..dim).map(|_| rng.normal()).collect()).collect();
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % classes;
        data.extend(protos[y].iter().map(|&p| p + noise * rng.normal()));
        labels.push(y);
    }
    Dataset::new([dim, 1, 1], 1, classes, data, labels)
}

/// Ten shape classes drawn at random positions and sizes on a noisy canvas.
pub fn synthetic_shapes(n: usize, side: usize, noise: f64, rng: &mut RngState) -> Result<Dataset> {
    if side < 8 {
        return Err(Error::InvalidArgument("shape canvas must be at least 8x8".into()));
    }
    let classes = 10;
    let mut data = Vec::with_capacity(n * side * side);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % classes;
        let size = 4 + rng.below(side / 2 - 2);
        let oy = rng.below(side - size + 1) as isize;
        let ox = rng.below(side - size + 1) as isize;
        let s = size as isize;
        let mut img = vec![0.0; side * side];
        let c = (s - 1) as f64 / 2.0;
        for dy in 0..s {
            for dx in 0..s {
                let (fy, fx) = (dy as f64 - c, dx as f64 - c);
                let r = (fy * fy + fx * fx).sqrt();
                let on = match y {
                    0 => (dy - s / 2).abs() <= 0,
                    1 => (dx - s / 2).abs() <= 0,
                    2 => dy == dx,
                    3 => dy + dx == s - 1,
                    4 => dy == s / 2 || dx == s / 2,
                    5 => dy == dx || dy + dx == s - 1,
                    6 => dy == 0 || dx == 0 || dy == s - 1 || dx == s - 1,
                    7 => (r - c).abs() < 0.7,
                    8 => dy < s / 2 && dx < s / 2 || dy >= s / 2 && dx >= s / 2,
                    _ => dy == s - 1 || dx == 0,
                };
                if on {
                    img[((oy + dy) as usize) * side + (ox + dx) as usize] = 1.0;
                }
            }
        }
        data.extend(img.iter().map(|&v| v + noise * rng.normal()));
        labels.push(y);
    }
    Dataset::new([1, side, side], 1, classes, data, labels)
}

/// Event-style frames: a blob moving in one of `classes` directions.
pub fn synthetic_events(n: usize, t_steps: usize, side: usize, classes: usize, rng: &mut RngState) -> Result<Dataset> {
    let mut data = Vec::with_capacity(n * t_steps * 2 * side * side);
    let mut labels = Vec::with_capacity(n);
    let mid = side as f64 / 2.0;
    for i in 0..n {
        let y = i % classes;
        let angle = 2.0 * std::f64::consts::PI * y as f64 / classes as f64;
        let (vy, vx) = (angle.sin(), angle.cos());
        let (sy, sx) = (mid + rng.normal(), mid + rng.normal());
        let speed = 0.6 * side as f64 / (2.0 * t_steps as f64);
        let mut prev: Option<(usize, usize)> = None;
        for t in 0..t_steps {
            let py = (sy + vy * speed * t as f64).round().clamp(0.0, side as f64 - 1.0) as usize;
            let px = (sx + vx * speed * t as f64).round().clamp(0.0, side as f64 - 1.0) as usize;
            let mut frame = vec![0.0; 2 * side * side];
            // channel 0: on events at the new position, channel 1: off events at the old one
            frame[py * side + px] = 1.0;
            if let Some((qy, qx)) = prev {
                frame[side * side + qy * side + qx] = 1.0;
            }
            for v in frame.iter_mut() {
                if rng.bernoulli(0.01) {
                    *v = 1.0;
                }
            }
            data.extend(frame);
            prev = Some((py, px));
        }
        labels.push(y);
    }
    Dataset::new([2, side, side], t_steps, classes, data, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, r: u32, c: u32, pixels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        for x in [IDX_IMAGES, n, r, c] {
            v.extend_from_slice(&x.to_be_bytes());
        }
        v.extend_from_slice(pixels);
        v
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend_from_slice(&IDX_LABELS.to_be_bytes());
        v.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        v.extend_from_slice(labels);
        v
    }

    #[test]
    fn idx_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lab = dir.path().join("lab");
        fs::write(&img, idx_images(2, 2, 2, &[0, 255, 51, 102, 1, 2, 3, 4])).unwrap();
        fs::write(&lab, idx_labels(&[3, 9])).unwrap();
        let ds = load_idx(&img, &lab, 10).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.shape, [1, 2, 2]);
        assert_eq!(ds.sample(0), &[0.0, 1.0, 0.2, 0.4]);
        assert_eq!(ds.labels(), &[3, 9]);

        fs::write(&lab, idx_labels(&[3, 10])).unwrap();
        assert!(matches!(load_idx(&img, &lab, 10), Err(Error::LabelOutOfRange { label: 10, classes: 10 })));

        fs::write(&lab, idx_labels(&[3])).unwrap();
        assert!(load_idx(&img, &lab, 10).is_err());

        fs::write(&img, &idx_images(2, 2, 2, &[0; 8])[..20]).unwrap();
        match read_idx_images(&img) {
            Err(Error::Parse { offset, reason, .. }) => {
                assert_eq!(offset, 20);
                assert!(reason.contains("truncated"));
            }
            other => panic!("{other:?}"),
        }
        fs::write(&img, idx_labels(&[1])).unwrap();
        assert!(matches!(read_idx_images(&img), Err(Error::Parse { offset: 0, .. })));
    }

    #[test]
    fn pbf_round_trip() {
        let mut rng = RngState::new(1);
        let ds = synthetic_events(5, 4, 6, 3, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ev.pbf");
        write_pbf(&p, &ds).unwrap();
        let back = read_pbf(&p, 3).unwrap();
        assert_eq!(back, ds);
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(read_pbf(&p, 3), Err(Error::Parse { .. })));
    }

    #[test]
    fn encoder_examples() {
        let mut rng = RngState::new(2);
        let sum_over_t = |x: &[f64]| {
            let frames = encode(x, 1, EncoderSpec::ConstantCurrent, 6, &mut RngState::new(0)).unwrap();
            assert_eq!(frames.len(), 6);
            assert!(frames.iter().all(|f| f.data() == x));
            let mut sum = Tensor::zeros(&[x.len()]);
            for f in &frames {
                sum.axpy(1.0, f).unwrap();
            }
            sum
        };
        // exact for dyadic values, within rounding otherwise
        assert_eq!(sum_over_t(&[0.25, -1.0, 2.5]).data(), &[1.5, -6.0, 15.0]);
        let s = sum_over_t(&[0.3, 0.7]);
        assert!((s.data()[0] - 1.8).abs() < 1e-12 && (s.data()[1] - 4.2).abs() < 1e-12);

        let ones = vec![1.0; 100];
        let spikes = encode(&ones, 1, EncoderSpec::PoissonSynthetic { rate: 1.0 }, 100, &mut rng).unwrap();
        let rate: f64 = spikes.iter().map(Tensor::sum).sum::<f64>() / 1e4;
        assert_eq!(rate, 1.0);

        let two = [1.0, 2.0, 3.0, 4.0];
        assert!(encode(&two, 2, EncoderSpec::PreBinnedFrames, 3, &mut rng).is_err());
        let f = encode(&two, 2, EncoderSpec::PreBinnedFrames, 2, &mut rng).unwrap();
        assert_eq!(f[1].data(), &[3.0, 4.0]);
    }

    #[test]
    fn normalization_uses_train_statistics() {
        let mut rng = RngState::new(3);
        let mk = |rng: &mut RngState, off: f64| {
            let data: Vec<f64> = (0..2 * 2 * 3 * 50).map(|k| off + (k % 2) as f64 * 3.0 + rng.normal()).collect();
            Dataset::new([2, 2, 3], 1, 2, data, vec![0; 50]).unwrap()
        };
        let mut train = mk(&mut rng, 1.0);
        let mut test = mk(&mut rng, 5.0);
        normalize(&mut train, &mut test, NormMode::PerChannel).unwrap();
        let refit = Normalizer::fit(&train, NormMode::PerChannel).unwrap();
        for (m, s) in refit.mean.iter().zip(&refit.std) {
            assert!(m.abs() < 1e-6 && (s - 1.0).abs() < 1e-6);
        }
        let test_stats = Normalizer::fit(&test, NormMode::Global).unwrap();
        assert!(test_stats.mean[0] > 1.0);

        let mut flat = Dataset::new([1, 2, 2], 1, 2, vec![4.0; 8], vec![0, 1]).unwrap();
        let mut flat_test = flat.clone();
        normalize(&mut flat, &mut flat_test, NormMode::Global).unwrap();
        assert!(flat.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn batching_is_deterministic() {
        let mut rng = RngState::new(4);
        let ds = synthetic_shapes(40, 12, 0.1, &mut rng).unwrap();
        let order_a = epoch_order(ds.len(), &mut RngState::new(9));
        let order_b = epoch_order(ds.len(), &mut RngState::new(9));
        assert_eq!(order_a, order_b);
        let aug = Augment { crop_padding: 2, horizontal_flip: true };
        let a = make_batch(&ds, &order_a[..8], EncoderSpec::ConstantCurrent, 4, aug, &mut RngState::new(1)).unwrap();
        let b = make_batch(&ds, &order_a[..8], EncoderSpec::ConstantCurrent, 4, aug, &mut RngState::new(1)).unwrap();
        assert_eq!(a, b);
        a.check(144, 4).unwrap();
    }

    #[test]
    fn augment_identity_and_flip() {
        let x: Vec<f64> = (0..6).map(|v| v as f64).collect();
        let flip = Augment { crop_padding: 0, horizontal_flip: true };
        let mut seen_flip = false;
        let mut rng = RngState::new(5);
        for _ in 0..20 {
            let y = flip.apply(&x, [1, 2, 3], &mut rng);
            if y != x {
                assert_eq!(y, vec![2.0, 1.0, 0.0, 5.0, 4.0, 3.0]);
                seen_flip = true;
            }
        }
        assert!(seen_flip);
    }
}
