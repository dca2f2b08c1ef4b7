//! Image datasets: IDX files (MNIST layout) and a seeded generator of
//! geometric shapes, one shape family per class.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Single-channel square `u8` images with integer labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    size: usize,
    pixels: Vec<u8>,
    labels: Vec<u8>,
}

impl Dataset {
    pub fn new(size: usize, pixels: Vec<u8>, labels: Vec<u8>) -> Result<Self> {
        contract!(
            pixels.len() == labels.len() * size * size,
            "{} pixels for {} images of {}x{}",
            pixels.len(),
            labels.len(),
            size,
            size
        );
        Ok(Self { size, pixels, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.size
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0)
    }

    pub fn image_bytes(&self, i: usize) -> &[u8] {
        let px = self.size * self.size;
        &self.pixels[i * px..(i + 1) * px]
    }

    /// Raw pixel bytes followed by label bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        [self.pixels.as_slice(), self.labels.as_slice()].concat()
    }

    /// `[C=1, H, W]` image scaled to `[0, 1]`.
    pub fn image(&self, i: usize) -> Tensor {
        let data = self.image_bytes(i).iter().map(|&p| p as f64 / 255.0).collect();
        Tensor::new(&[1, self.size, self.size], data).expect("image shape")
    }

    /// Stacks the selected images into `[B, 1, H, W]`.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let px = self.size * self.size;
        let mut data = Vec::with_capacity(indices.len() * px);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            contract!(i < self.len(), "sample index {} out of range ({})", i, self.len());
            data.extend(self.image_bytes(i).iter().map(|&p| p as f64 / 255.0));
            labels.push(self.labels[i] as usize);
        }
        Ok((Tensor::new(&[indices.len(), 1, self.size, self.size], data)?, labels))
    }

    pub fn subset(&self, range: std::ops::Range<usize>) -> Result<Dataset> {
        contract!(range.end <= self.len(), "subset {:?} out of range ({})", range, self.len());
        let px = self.size * self.size;
        Dataset::new(
            self.size,
            self.pixels[range.start * px..range.end * px].to_vec(),
            self.labels[range].to_vec(),
        )
    }

    pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
        let (img_dims, pixels) = parse_idx(&fs::read(images)?, IDX_IMAGES_MAGIC)?;
        let (lbl_dims, labels) = parse_idx(&fs::read(labels)?, IDX_LABELS_MAGIC)?;
        if img_dims[1] != img_dims[2] {
            return Err(Error::Format(format!("non-square images {}x{}", img_dims[1], img_dims[2])));
        }
        if img_dims[0] != lbl_dims[0] {
            return Err(Error::Format(format!("{} images but {} labels", img_dims[0], lbl_dims[0])));
        }
        Dataset::new(img_dims[1], pixels, labels)
    }

    pub fn save_idx(&self, images: &Path, labels: &Path) -> Result<()> {
        fs::write(images, encode_idx(&[self.len(), self.size, self.size], &self.pixels))?;
        fs::write(labels, encode_idx(&[self.len()], &self.labels))?;
        Ok(())
    }
}

/// Parses an unsigned-byte IDX payload, checking the magic number.
pub fn parse_idx(bytes: &[u8], magic: u32) -> Result<(Vec<usize>, Vec<u8>)> {
    if bytes.len() < 4 {
        return Err(Error::Format("IDX header truncated".into()));
    }
    let found = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    if found != magic {
        return Err(Error::Format(format!("IDX magic {found:#010x}, expected {magic:#010x}")));
    }
    let ndim = bytes[3] as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(Error::Format("IDX dimension table truncated".into()));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|i| {
            let o = 4 + 4 * i;
            u32::from_be_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize
        })
        .collect();
    let count: usize = dims.iter().product();
    let payload = &bytes[header..];
    if payload.len() != count {
        return Err(Error::Format(format!("IDX payload has {} bytes, dims {:?} need {}", payload.len(), dims, count)));
    }
    Ok((dims, payload.to_vec()))
}

pub fn encode_idx(dims: &[usize], payload: &[u8]) -> Vec<u8> {
    let mut out = vec![0, 0, 0x08, dims.len() as u8];
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(payload);
    out
}

pub const SHAPE_NAMES: [&str; 10] = [
    "horizontal_bar",
    "vertical_bar",
    "diagonal",
    "anti_diagonal",
    "square_outline",
    "filled_square",
    "ring",
    "disk",
    "plus",
    "cross",
];

/// Seeded geometric-shape dataset: each class is one shape family drawn at
/// a jittered position, size, stroke and brightness over faint noise.
pub fn synthetic(count: usize, num_classes: usize, size: usize, seed: u64) -> Result<Dataset> {
    contract!(
        (1..=SHAPE_NAMES.len()).contains(&num_classes),
        "synthetic data supports 1..={} classes, got {}",
        SHAPE_NAMES.len(),
        num_classes
    );
    contract!(size >= 12, "synthetic images must be at least 12 pixels wide");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = Vec::with_capacity(count * size * size);
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let label = rng.gen_range(0..num_classes);
        labels.push(label as u8);
        pixels.extend(render_shape(label, size, &mut rng));
    }
    Dataset::new(size, pixels, labels)
}

fn render_shape(class: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let s = size as f64;
    let jitter = s * 0.15;
    let cx = s / 2.0 + rng.gen_range(-jitter..jitter);
    let cy = s / 2.0 + rng.gen_range(-jitter..jitter);
    let radius = rng.gen_range(s * 0.2..s * 0.32);
    let stroke = rng.gen_range(1.0..2.2);
    let intensity = rng.gen_range(0.65..1.0);
    let noise = 0.15;

    (0..size * size)
        .map(|i| {
            let x = (i % size) as f64 + 0.5 - cx;
            let y = (i / size) as f64 + 0.5 - cy;
            let inside_box = x.abs() <= radius && y.abs() <= radius;
            let on = match class {
                0 => y.abs() <= stroke && x.abs() <= radius,
                1 => x.abs() <= stroke && y.abs() <= radius,
                2 => (x - y).abs() <= stroke * 1.4 && inside_box,
                3 => (x + y).abs() <= stroke * 1.4 && inside_box,
                4 => inside_box && (radius - x.abs() <= stroke || radius - y.abs() <= stroke),
                5 => inside_box,
                6 => ((x * x + y * y).sqrt() - radius).abs() <= stroke,
                7 => (x * x + y * y).sqrt() <= radius,
                8 => (x.abs() <= stroke || y.abs() <= stroke) && inside_box,
                _ => ((x - y).abs() <= stroke * 1.4 || (x + y).abs() <= stroke * 1.4) && inside_box,
            };
            let v: f64 = if on { intensity } else { 0.0 } + rng.gen_range(0.0..noise);
            (v.min(1.0) * 255.0).round() as u8
        })
        .collect()
}

/// Deterministic shuffled batches for one epoch, keyed by `(seed, epoch)`.
pub fn epoch_batches(len: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(epoch as u64));
    order.shuffle(&mut rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Endless stream of shuffled full batches, reshuffling at each pass.
#[derive(Debug)]
pub struct BatchSampler {
    len: usize,
    batch_size: usize,
    seed: u64,
    epoch: usize,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Result<Self> {
        contract!(len > 0 && batch_size > 0, "sampler needs data and a positive batch size");
        let mut s = Self { len, batch_size: batch_size.min(len), seed, epoch: 0, order: Vec::new(), cursor: 0 };
        s.reshuffle();
        Ok(s)
    }

    fn reshuffle(&mut self) {
        self.order = epoch_batches(self.len, self.len, self.seed, self.epoch).concat();
        self.epoch += 1;
        self.cursor = 0;
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor + self.batch_size > self.len {
            self.reshuffle();
        }
        let out = self.order[self.cursor..self.cursor + self.batch_size].to_vec();
        self.cursor += self.batch_size;
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic() {
        let a = synthetic(50, 10, 28, 0).unwrap();
        let b = synthetic(50, 10, 28, 0).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_ne!(a.to_bytes(), synthetic(50, 10, 28, 1).unwrap().to_bytes());
        assert!(synthetic(5, 11, 28, 0).is_err());
    }

    #[test]
    fn idx_round_trip_and_magic() {
        let d = synthetic(7, 3, 12, 4).unwrap();
        let bytes = encode_idx(&[7, 12, 12], &d.pixels);
        assert_eq!(&bytes[..4], &IDX_IMAGES_MAGIC.to_be_bytes());
        let (dims, px) = parse_idx(&bytes, IDX_IMAGES_MAGIC).unwrap();
        assert_eq!(dims, vec![7, 12, 12]);
        assert_eq!(px, d.pixels);
        assert!(matches!(parse_idx(&bytes, IDX_LABELS_MAGIC), Err(Error::Format(_))));
        assert!(parse_idx(&bytes[..bytes.len() - 1], IDX_IMAGES_MAGIC).is_err());
        assert!(parse_idx(&bytes[..6], IDX_IMAGES_MAGIC).is_err());
    }

    #[test]
    fn idx_files_load() {
        let dir = tempfile::tempdir().unwrap();
        let d = synthetic(9, 4, 14, 2).unwrap();
        let (ip, lp) = (dir.path().join("img.idx"), dir.path().join("lbl.idx"));
        d.save_idx(&ip, &lp).unwrap();
        assert_eq!(Dataset::load_idx(&ip, &lp).unwrap(), d);

        let short = d.subset(0..5).unwrap();
        let lp2 = dir.path().join("short.idx");
        fs::write(&lp2, encode_idx(&[5], short.labels())).unwrap();
        assert!(Dataset::load_idx(&ip, &lp2).is_err());
    }

    #[test]
    fn batches_cover_every_sample() {
        let b = epoch_batches(10, 3, 1, 0);
        assert_eq!(b.len(), 4);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(b, epoch_batches(10, 3, 1, 0));
        assert_ne!(b, epoch_batches(10, 3, 1, 1));
    }

    #[test]
    fn sampler_yields_full_batches() {
        let mut s = BatchSampler::new(5, 2, 3).unwrap();
        for _ in 0..7 {
            assert_eq!(s.next_batch().len(), 2);
        }
    }

    #[test]
    fn batch_tensor_layout() {
        let d = synthetic(3, 2, 12, 9).unwrap();
        let (x, y) = d.batch(&[2, 0]).unwrap();
        assert_eq!(x.shape(), &[2, 1, 12, 12]);
        assert_eq!(y[0], d.labels()[2] as usize);
        assert_eq!(x.data()[0], d.image_bytes(2)[0] as f64 / 255.0);
        assert!(d.batch(&[3]).is_err());
    }
}
