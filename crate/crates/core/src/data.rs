//! Dataset ingestion: IDX and CIFAR-10 binary formats, batching with
//! normalization and optional augmentation, and a procedurally generated
//! digit corpus for self-contained runs (emitted and re-parsed as IDX bytes,
//! so it exercises the same loader as real files).

use crate::error::{Error, Result};
use crate::rng::RunRng;
use crate::tensor::Tensor;
use byteorder::{BigEndian, ByteOrder};
use std::path::Path;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 3073;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Augment {
    /// Zero-pad by this many pixels, then random-crop back to size.
    pub pad_crop: usize,
    pub hflip: bool,
}

impl Augment {
    pub fn enabled(&self) -> bool {
        self.pad_crop > 0 || self.hflip
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    images: Vec<u8>,
    labels: Vec<u8>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
    pub split: Split,
    pub augment: Augment,
}

impl Dataset {
    pub fn new(
        images: Vec<u8>,
        labels: Vec<u8>,
        channels: usize,
        height: usize,
        width: usize,
        num_classes: usize,
        split: Split,
    ) -> Result<Self> {
        let per_image = channels * height * width;
        if per_image == 0 || images.len() != labels.len() * per_image {
            return Err(Error::invalid(format!(
                "{} image bytes do not match {} labels of {}x{}x{}",
                images.len(),
                labels.len(),
                channels,
                height,
                width
            )));
        }
        if let Some(pos) = labels.iter().position(|&l| l as usize >= num_classes) {
            return Err(Error::invalid(format!(
                "label {} at index {pos} out of range for {num_classes} classes",
                labels[pos]
            )));
        }
        Ok(Dataset {
            images,
            labels,
            channels,
            height,
            width,
            num_classes,
            mean: vec![0.5; channels],
            std: vec![0.5; channels],
            split,
            augment: Augment::default(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn image_numel(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn with_normalization(mut self, mean: Vec<f32>, std: Vec<f32>) -> Result<Self> {
        if mean.len() != self.channels || std.len() != self.channels {
            return Err(Error::invalid("normalization constants must be per-channel"));
        }
        if std.iter().any(|&s| s <= 0.0) {
            return Err(Error::invalid("normalization std must be positive"));
        }
        self.mean = mean;
        self.std = std;
        Ok(self)
    }

    pub fn with_augment(mut self, augment: Augment) -> Self {
        self.augment = augment;
        self
    }

    /// Assemble a normalized [n, c, h, w] batch. Augmentation draws happen
    /// only when `aug_rng` is provided and the descriptor is enabled.
    pub fn batch(&self, indices: &[usize], mut aug_rng: Option<&mut RunRng>) -> (Tensor, Vec<usize>) {
        let (c, h, w) = (self.channels, self.height, self.width);
        let plane = h * w;
        let per_image = c * plane;
        let mut out = vec![0.0f32; indices.len() * per_image];
        let mut labels = Vec::with_capacity(indices.len());
        for (bi, &idx) in indices.iter().enumerate() {
            labels.push(self.labels[idx] as usize);
            let src = &self.images[idx * per_image..(idx + 1) * per_image];
            let (dx, dy, flip) = match (&mut aug_rng, self.augment.enabled()) {
                (Some(rng), true) => {
                    let p = self.augment.pad_crop;
                    let dx = if p > 0 { rng.below(2 * p + 1) as isize - p as isize } else { 0 };
                    let dy = if p > 0 { rng.below(2 * p + 1) as isize - p as isize } else { 0 };
                    let flip = self.augment.hflip && rng.coin();
                    (dx, dy, flip)
                }
                _ => (0, 0, false),
            };
            let dst = &mut out[bi * per_image..(bi + 1) * per_image];
            for ch in 0..c {
                let inv_std = 1.0 / self.std[ch];
                let mean = self.mean[ch];
                for y in 0..h {
                    for x in 0..w {
                        let sx = if flip { w - 1 - x } else { x } as isize + dx;
                        let sy = y as isize + dy;
                        let raw = if sx >= 0 && (sx as usize) < w && sy >= 0 && (sy as usize) < h {
                            src[ch * plane + sy as usize * w + sx as usize]
                        } else {
                            0
                        };
                        dst[ch * plane + y * w + x] = (raw as f32 / 255.0 - mean) * inv_std;
                    }
                }
            }
        }
        let t = Tensor::new(vec![indices.len(), c, h, w], out).expect("batch sized");
        (t, labels)
    }
}

fn need(bytes: &[u8], offset: usize, len: usize, what: &str) -> Result<()> {
    if bytes.len() < offset + len {
        return Err(Error::DataFormat {
            offset: bytes.len() as u64,
            detail: format!("truncated while reading {what}: need {} bytes, file has {}", offset + len, bytes.len()),
        });
    }
    Ok(())
}

/// Parse an IDX image file (magic 0x00000803).
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    need(bytes, 0, 16, "IDX image header")?;
    let magic = BigEndian::read_u32(&bytes[0..4]);
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::DataFormat {
            offset: 0,
            detail: format!("bad IDX image magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"),
        });
    }
    let n = BigEndian::read_u32(&bytes[4..8]) as usize;
    let h = BigEndian::read_u32(&bytes[8..12]) as usize;
    let w = BigEndian::read_u32(&bytes[12..16]) as usize;
    need(bytes, 16, n * h * w, "IDX image data")?;
    Ok((n, h, w, bytes[16..16 + n * h * w].to_vec()))
}

/// Parse an IDX label file (magic 0x00000801).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    need(bytes, 0, 8, "IDX label header")?;
    let magic = BigEndian::read_u32(&bytes[0..4]);
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::DataFormat {
            offset: 0,
            detail: format!("bad IDX label magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}"),
        });
    }
    let n = BigEndian::read_u32(&bytes[4..8]) as usize;
    need(bytes, 8, n, "IDX label data")?;
    Ok(bytes[8..8 + n].to_vec())
}

/// Serialize images into IDX layout.
pub fn encode_idx_images(n: usize, h: usize, w: usize, pixels: &[u8]) -> Vec<u8> {
    debug_assert_eq!(pixels.len(), n * h * w);
    let mut out = Vec::with_capacity(16 + pixels.len());
    let mut header = [0u8; 16];
    BigEndian::write_u32(&mut header[0..4], IDX_IMAGES_MAGIC);
    BigEndian::write_u32(&mut header[4..8], n as u32);
    BigEndian::write_u32(&mut header[8..12], h as u32);
    BigEndian::write_u32(&mut header[12..16], w as u32);
    out.extend_from_slice(&header);
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    let mut header = [0u8; 8];
    BigEndian::write_u32(&mut header[0..4], IDX_LABELS_MAGIC);
    BigEndian::write_u32(&mut header[4..8], labels.len() as u32);
    out.extend_from_slice(&header);
    out.extend_from_slice(labels);
    out
}

/// Load an IDX image/label pair from disk (e.g. MNIST).
pub fn load_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset> {
    let image_bytes = std::fs::read(images_path)?;
    let label_bytes = std::fs::read(labels_path)?;
    let (n, h, w, pixels) = parse_idx_images(&image_bytes)?;
    let labels = parse_idx_labels(&label_bytes)?;
    if labels.len() != n {
        return Err(Error::DataFormat {
            offset: 4,
            detail: format!("{} images but {} labels", n, labels.len()),
        });
    }
    Dataset::new(pixels, labels, 1, h, w, 10, split)?
        .with_normalization(vec![0.1307], vec![0.3081])
}

/// Load one or more CIFAR-10 binary batch files (3073-byte records).
pub fn load_cifar_binary(paths: &[&Path], split: Split) -> Result<Dataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = std::fs::read(path)?;
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::DataFormat {
                offset: (bytes.len() - bytes.len() % CIFAR_RECORD) as u64,
                detail: format!(
                    "{}: {} bytes is not a whole number of {CIFAR_RECORD}-byte records",
                    path.display(),
                    bytes.len()
                ),
            });
        }
        for (i, record) in bytes.chunks(CIFAR_RECORD).enumerate() {
            let label = record[0];
            if label > 9 {
                return Err(Error::DataFormat {
                    offset: (i * CIFAR_RECORD) as u64,
                    detail: format!("{}: record {i} has label {label} > 9", path.display()),
                });
            }
            labels.push(label);
            images.extend_from_slice(&record[1..]);
        }
    }
    Dataset::new(images, labels, 3, 32, 32, 10, split)?.with_normalization(
        vec![0.4914, 0.4822, 0.4465],
        vec![0.2470, 0.2435, 0.2616],
    )
}

// 7x5 glyphs for the synthetic digit corpus.
const GLYPHS: [[&str; 7]; 10] = [
    ["01110", "10001", "10011", "10101", "11001", "10001", "01110"],
    ["00100", "01100", "00100", "00100", "00100", "00100", "01110"],
    ["01110", "10001", "00001", "00010", "00100", "01000", "11111"],
    ["01110", "10001", "00001", "00110", "00001", "10001", "01110"],
    ["00010", "00110", "01010", "10010", "11111", "00010", "00010"],
    ["11111", "10000", "11110", "00001", "00001", "10001", "01110"],
    ["00110", "01000", "10000", "11110", "10001", "10001", "01110"],
    ["11111", "00001", "00010", "00100", "01000", "01000", "01000"],
    ["01110", "10001", "10001", "01110", "10001", "10001", "01110"],
    ["01110", "10001", "10001", "01111", "00001", "00010", "01100"],
];

const SYNTH_SIDE: usize = 28;
const GLYPH_SCALE: usize = 3; // renders 21x15

/// Deterministic 28x28 digit corpus: upscaled glyphs with random placement,
/// intensity jitter and pixel noise, balanced across the 10 classes. The
/// samples round-trip through IDX bytes so the standard loader is on the
/// production path.
pub fn synthetic_digits(n: usize, split: Split, rng: &mut RunRng) -> Result<Dataset> {
    let side = SYNTH_SIDE;
    let gh = 7 * GLYPH_SCALE;
    let gw = 5 * GLYPH_SCALE;
    let mut pixels = vec![0u8; n * side * side];
    let mut labels = vec![0u8; n];
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    for (slot, &i) in order.iter().enumerate() {
        let digit = slot % 10;
        labels[i] = digit as u8;
        let img = &mut pixels[i * side * side..(i + 1) * side * side];
        let off_y = rng.below(side - gh + 1);
        let off_x = rng.below(side - gw + 1);
        let intensity = rng.uniform_range(150.0, 255.0);
        for (ry, row) in GLYPHS[digit].iter().enumerate() {
            for (rx, ch) in row.bytes().enumerate() {
                if ch == b'1' {
                    for sy in 0..GLYPH_SCALE {
                        for sx in 0..GLYPH_SCALE {
                            let y = off_y + ry * GLYPH_SCALE + sy;
                            let x = off_x + rx * GLYPH_SCALE + sx;
                            img[y * side + x] = intensity as u8;
                        }
                    }
                }
            }
        }
        for p in img.iter_mut() {
            let noisy = *p as f64 + rng.normal() * 12.0;
            *p = noisy.clamp(0.0, 255.0) as u8;
        }
    }
    // round-trip through the IDX codec so format bugs cannot hide
    let image_bytes = encode_idx_images(n, side, side, &pixels);
    let label_bytes = encode_idx_labels(&labels);
    let (pn, ph, pw, parsed_pixels) = parse_idx_images(&image_bytes)?;
    let parsed_labels = parse_idx_labels(&label_bytes)?;
    debug_assert_eq!((pn, ph, pw), (n, side, side));
    Dataset::new(parsed_pixels, parsed_labels, 1, ph, pw, 10, split)?
        .with_normalization(vec![0.2], vec![0.3])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idx_roundtrip() {
        let pixels: Vec<u8> = (0..2 * 3 * 4).map(|i| i as u8).collect();
        let bytes = encode_idx_images(2, 3, 4, &pixels);
        let (n, h, w, out) = parse_idx_images(&bytes).unwrap();
        assert_eq!((n, h, w), (2, 3, 4));
        assert_eq!(out, pixels);
        let lbl = encode_idx_labels(&[3, 1, 4]);
        assert_eq!(parse_idx_labels(&lbl).unwrap(), vec![3, 1, 4]);
    }

    #[test]
    fn idx_bad_magic_reports_offset_zero() {
        let mut bytes = encode_idx_images(1, 2, 2, &[0, 1, 2, 3]);
        bytes[3] = 0x99;
        match parse_idx_images(&bytes) {
            Err(Error::DataFormat { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected data format error, got {other:?}"),
        }
    }

    #[test]
    fn idx_truncation_reports_exact_offset() {
        let bytes = encode_idx_images(2, 3, 4, &(0..24).map(|i| i as u8).collect::<Vec<_>>());
        let cut = &bytes[..20];
        match parse_idx_images(cut) {
            Err(Error::DataFormat { offset, detail }) => {
                assert_eq!(offset, 20);
                assert!(detail.contains("40"), "detail: {detail}");
            }
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn cifar_label_range_checked() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("batch.bin");
        let mut record = vec![0u8; CIFAR_RECORD * 2];
        record[0] = 3;
        record[CIFAR_RECORD] = 11; // invalid label in second record
        std::fs::write(&path, &record).unwrap();
        match load_cifar_binary(&[&path], Split::Train) {
            Err(Error::DataFormat { offset, .. }) => assert_eq!(offset, CIFAR_RECORD as u64),
            other => panic!("expected label error, got {other:?}"),
        }
    }

    #[test]
    fn cifar_partial_record_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, vec![0u8; CIFAR_RECORD + 10]).unwrap();
        assert!(matches!(
            load_cifar_binary(&[&path], Split::Train),
            Err(Error::DataFormat { .. })
        ));
    }

    #[test]
    fn cifar_valid_file_loads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ok.bin");
        let mut bytes = vec![0u8; CIFAR_RECORD * 3];
        for (i, rec) in bytes.chunks_mut(CIFAR_RECORD).enumerate() {
            rec[0] = i as u8;
            rec[1] = 100;
        }
        std::fs::write(&path, &bytes).unwrap();
        let ds = load_cifar_binary(&[&path], Split::Test).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.channels, 3);
        assert_eq!(ds.label(2), 2);
    }

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let mut r1 = RunRng::new(42);
        let a = synthetic_digits(200, Split::Train, &mut r1).unwrap();
        let mut r2 = RunRng::new(42);
        let b = synthetic_digits(200, Split::Train, &mut r2).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.labels, b.labels);
        let mut counts = [0usize; 10];
        for i in 0..a.len() {
            counts[a.label(i)] += 1;
        }
        assert!(counts.iter().all(|&c| c == 20), "{counts:?}");
    }

    #[test]
    fn batch_shapes_and_normalization() {
        let mut rng = RunRng::new(1);
        let ds = synthetic_digits(20, Split::Train, &mut rng).unwrap();
        let (x, y) = ds.batch(&[0, 5, 7], None);
        assert_eq!(x.shape(), &[3, 1, 28, 28]);
        assert_eq!(y.len(), 3);
        // zero pixel maps to (0 - 0.2) / 0.3
        let zero_val = (0.0 - 0.2) / 0.3;
        assert!(x.data().iter().any(|&v| (v - zero_val).abs() < 1e-4));
    }

    #[test]
    fn augmentation_only_with_rng() {
        let mut rng = RunRng::new(2);
        let ds = synthetic_digits(4, Split::Train, &mut rng)
            .unwrap()
            .with_augment(Augment { pad_crop: 2, hflip: false });
        let (plain, _) = ds.batch(&[0], None);
        let (plain2, _) = ds.batch(&[0], None);
        assert_eq!(plain.data(), plain2.data());
        // with rng, some shift usually happens; just check determinism per stream
        let mut ra = RunRng::new(7);
        let (a, _) = ds.batch(&[0], Some(&mut ra));
        let mut rb = RunRng::new(7);
        let (b, _) = ds.batch(&[0], Some(&mut rb));
        assert_eq!(a.data(), b.data());
    }
}
