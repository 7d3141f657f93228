//! Dataset ingestion: IDX-format image/label files, pixel normalization,
//! and seeded synthetic Gaussian blobs for the fast test suite.

use std::fs;
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ByteOrder};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

/// Environment variable consulted for the IDX data directory when no CLI
/// flag is given.
pub const DATA_DIR_ENV: &str = "VIMAX_DATA_DIR";

/// Where a dataset came from, for the report's config echo.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub enum Provenance {
    Files { images: PathBuf, labels: PathBuf, images_sha256: String, labels_sha256: String },
    Synthetic { classes: usize, per_class: usize, separation: f64, dim: usize, seed: u64, offset: f64, scale: f64 },
}

/// An immutable labelled split: `n` flattened images with values in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
    pub dim: usize,
    pub split: String,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        &self.images[i * self.dim..(i + 1) * self.dim]
    }

    /// Copies the given examples into a dense row-major batch.
    pub fn gather(&self, indices: &[usize]) -> (Vec<f64>, Vec<usize>) {
        let mut images = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        (images, labels)
    }

    /// First `n` examples in stored order.
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            images: self.images[..n * self.dim].to_vec(),
            labels: self.labels[..n].to_vec(),
            dim: self.dim,
            split: self.split.clone(),
            provenance: self.provenance.clone(),
        }
    }
}

/// Raw pixel payload of an IDX image file, before normalization.
#[derive(Debug)]
pub struct RawImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn format_err(path: &Path, offset: u64, reason: impl Into<String>) -> Error {
    Error::Format { path: path.display().to_string(), offset, reason: reason.into() }
}

/// Reads an IDX image file: big-endian magic `0x00000803`, then three
/// big-endian u32 dims (count, rows, cols), then raw unsigned pixel bytes.
pub fn load_idx_images(path: &Path) -> Result<RawImages> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 {
        return Err(format_err(path, bytes.len() as u64, "truncated header (need 16 bytes)"));
    }
    let magic = BigEndian::read_u32(&bytes[0..4]);
    if magic != IMAGE_MAGIC {
        return Err(format_err(
            path,
            0,
            format!("bad magic {magic:#010x}, expected {IMAGE_MAGIC:#010x} (images)"),
        ));
    }
    let count = BigEndian::read_u32(&bytes[4..8]) as usize;
    let rows = BigEndian::read_u32(&bytes[8..12]) as usize;
    let cols = BigEndian::read_u32(&bytes[12..16]) as usize;
    let expected = 16 + count * rows * cols;
    if bytes.len() != expected {
        return Err(format_err(
            path,
            bytes.len() as u64,
            format!("payload is {} bytes, header promises {}", bytes.len() - 16, expected - 16),
        ));
    }
    Ok(RawImages { count, rows, cols, pixels: bytes[16..].to_vec() })
}

/// Reads an IDX label file: magic `0x00000801`, u32 count, then one byte per
/// label. Labels must be < 10.
pub fn load_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = fs::read(path)?;
    if bytes.len() < 8 {
        return Err(format_err(path, bytes.len() as u64, "truncated header (need 8 bytes)"));
    }
    let magic = BigEndian::read_u32(&bytes[0..4]);
    if magic != LABEL_MAGIC {
        return Err(format_err(
            path,
            0,
            format!("bad magic {magic:#010x}, expected {LABEL_MAGIC:#010x} (labels)"),
        ));
    }
    let count = BigEndian::read_u32(&bytes[4..8]) as usize;
    if bytes.len() != 8 + count {
        return Err(format_err(
            path,
            bytes.len() as u64,
            format!("payload is {} bytes, header promises {}", bytes.len() - 8, count),
        ));
    }
    let mut labels = Vec::with_capacity(count);
    for (i, &b) in bytes[8..].iter().enumerate() {
        if b >= 10 {
            return Err(format_err(path, (8 + i) as u64, format!("label byte {b} out of range")));
        }
        labels.push(b as usize);
    }
    Ok(labels)
}

/// Pixel bytes to `[0, 1]` floats (`byte / 255`), flattened row-major.
pub fn normalize(raw: &RawImages, labels: Vec<usize>, split: &str, provenance: Provenance) -> Result<Dataset> {
    if raw.count != labels.len() {
        return Err(Error::contract(format!(
            "{} images but {} labels",
            raw.count,
            labels.len()
        )));
    }
    let images: Vec<f64> = raw.pixels.iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok(Dataset {
        images,
        labels,
        dim: raw.rows * raw.cols,
        split: split.to_string(),
        provenance,
    })
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Loads one split from an image/label file pair.
pub fn load_split(images_path: &Path, labels_path: &Path, split: &str) -> Result<Dataset> {
    let raw = load_idx_images(images_path)?;
    let labels = load_idx_labels(labels_path)?;
    let provenance = Provenance::Files {
        images: images_path.to_path_buf(),
        labels: labels_path.to_path_buf(),
        images_sha256: sha256_hex(&fs::read(images_path)?),
        labels_sha256: sha256_hex(&fs::read(labels_path)?),
    };
    normalize(&raw, labels, split, provenance)
}

/// Loads the canonical train/test pairs from a directory laid out with the
/// standard MNIST file names (`train-images-idx3-ubyte` etc., ungzipped).
pub fn load_mnist_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = load_split(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
        "train",
    )?;
    let test = load_split(
        &dir.join("t10k-images-idx3-ubyte"),
        &dir.join("t10k-labels-idx1-ubyte"),
        "test",
    )?;
    Ok((train, test))
}

/// Seeded Gaussian class blobs, affinely mapped into `[0, 1]`.
///
/// Class `c` is drawn from `N(mu_c, I)` with the class means placed so that
/// every pair is exactly `separation` apart. The affine map into the unit
/// interval is computed from the generated values and recorded in the
/// provenance, so geometry is preserved up to one global scale.
pub fn synthetic_blobs(
    classes: usize,
    per_class: usize,
    separation: f64,
    dim: usize,
    seed: u64,
) -> Result<Dataset> {
    if classes == 0 || per_class == 0 || dim == 0 {
        return Err(Error::contract("synthetic_blobs needs classes, per_class, dim >= 1"));
    }
    if classes > dim {
        return Err(Error::contract(format!(
            "synthetic_blobs places class means on distinct axes; classes ({classes}) must be <= dim ({dim})"
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    // Means at (separation/sqrt(2)) * e_c: every pair is `separation` apart.
    let radius = separation / std::f64::consts::SQRT_2;
    let n = classes * per_class;
    let mut values = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for c in 0..classes {
        for _ in 0..per_class {
            for d in 0..dim {
                let noise: f64 = rng.sample(StandardNormal);
                let mean = if d == c { radius } else { 0.0 };
                values.push(mean + noise);
            }
            labels.push(c);
        }
    }
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let scale = if hi > lo { 1.0 / (hi - lo) } else { 1.0 };
    for v in values.iter_mut() {
        *v = (*v - lo) * scale;
    }
    Ok(Dataset {
        images: values,
        labels,
        dim,
        split: "synthetic".to_string(),
        provenance: Provenance::Synthetic {
            classes,
            per_class,
            separation,
            dim,
            seed,
            offset: lo,
            scale,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use byteorder::WriteBytesExt;
    use std::io::Write;

    fn write_idx_images(path: &Path, count: u32, rows: u32, cols: u32, pixels: &[u8]) {
        let mut buf = Vec::new();
        buf.write_u32::<BigEndian>(IMAGE_MAGIC).unwrap();
        buf.write_u32::<BigEndian>(count).unwrap();
        buf.write_u32::<BigEndian>(rows).unwrap();
        buf.write_u32::<BigEndian>(cols).unwrap();
        buf.write_all(pixels).unwrap();
        fs::write(path, buf).unwrap();
    }

    fn write_idx_labels(path: &Path, labels: &[u8]) {
        let mut buf = Vec::new();
        buf.write_u32::<BigEndian>(LABEL_MAGIC).unwrap();
        buf.write_u32::<BigEndian>(labels.len() as u32).unwrap();
        buf.write_all(labels).unwrap();
        fs::write(path, buf).unwrap();
    }

    #[test]
    fn single_zero_image_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        write_idx_images(&img, 1, 28, 28, &[0u8; 28 * 28]);
        let raw = load_idx_images(&img).unwrap();
        assert_eq!((raw.count, raw.rows, raw.cols), (1, 28, 28));
        assert!(raw.pixels.iter().all(|&b| b == 0));
    }

    #[test]
    fn label_magic_rejected_by_image_loader() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mislabeled");
        write_idx_labels(&path, &[0, 1, 2]);
        let err = load_idx_images(&path).unwrap_err().to_string();
        assert!(err.contains("0x00000801"), "{err}");
    }

    #[test]
    fn labels_roundtrip_and_range_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels");
        write_idx_labels(&path, &[0, 1, 2]);
        assert_eq!(load_idx_labels(&path).unwrap(), vec![0, 1, 2]);

        let bad = dir.path().join("bad");
        write_idx_labels(&bad, &[0, 10]);
        let err = load_idx_labels(&bad).unwrap_err().to_string();
        assert!(err.contains("label byte 10"), "{err}");
    }

    #[test]
    fn truncated_image_file_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("short");
        write_idx_images(&img, 2, 28, 28, &[0u8; 28 * 28]); // promises 2, has 1
        assert!(load_idx_images(&img).is_err());
    }

    #[test]
    fn normalization_endpoints() {
        let raw = RawImages { count: 1, rows: 1, cols: 3, pixels: vec![0, 128, 255] };
        let ds = normalize(
            &raw,
            vec![7],
            "test",
            Provenance::Synthetic { classes: 0, per_class: 0, separation: 0.0, dim: 0, seed: 0, offset: 0.0, scale: 1.0 },
        )
        .unwrap();
        assert_eq!(ds.images[0], 0.0);
        assert!((ds.images[1] - 128.0 / 255.0).abs() < 1e-15);
        assert_eq!(ds.images[2], 1.0);
    }

    #[test]
    fn normalization_is_injective_on_bytes() {
        let raw = RawImages { count: 1, rows: 16, cols: 16, pixels: (0..=255).collect() };
        let ds = normalize(
            &raw,
            vec![0],
            "test",
            Provenance::Synthetic { classes: 0, per_class: 0, separation: 0.0, dim: 0, seed: 0, offset: 0.0, scale: 1.0 },
        )
        .unwrap();
        let mut seen = ds.images.clone();
        seen.sort_by(|a, b| a.partial_cmp(b).unwrap());
        seen.dedup();
        assert_eq!(seen.len(), 256);
    }

    #[test]
    fn blobs_deterministic_under_seed() {
        let a = synthetic_blobs(4, 25, 6.0, 20, 99).unwrap();
        let b = synthetic_blobs(4, 25, 6.0, 20, 99).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn blobs_values_in_unit_interval() {
        let ds = synthetic_blobs(3, 50, 4.0, 8, 1).unwrap();
        assert!(ds.images.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    /// Nearest-centroid accuracy on well-separated blobs. At separation 6
    /// the Gaussian tail puts ~0.4% of points past the midplane toward one
    /// of the 3 competing classes, so the right bound is 99%; at separation
    /// 8 the tail is ~1e-4 and 99.9% holds.
    #[test]
    fn blobs_nearest_centroid_accuracy() {
        for (sep, bound) in [(6.0, 0.99), (8.0, 0.999)] {
            let ds = synthetic_blobs(4, 250, sep, 20, 7).unwrap();
            let k = 4;
            let mut centroids = vec![0.0; k * ds.dim];
            let mut counts = vec![0usize; k];
            for i in 0..ds.len() {
                let c = ds.labels[i];
                counts[c] += 1;
                for d in 0..ds.dim {
                    centroids[c * ds.dim + d] += ds.image(i)[d];
                }
            }
            for c in 0..k {
                for d in 0..ds.dim {
                    centroids[c * ds.dim + d] /= counts[c] as f64;
                }
            }
            let mut correct = 0;
            for i in 0..ds.len() {
                let x = ds.image(i);
                let best = (0..k)
                    .min_by(|&a, &b| {
                        let da: f64 =
                            x.iter().zip(&centroids[a * ds.dim..(a + 1) * ds.dim]).map(|(p, q)| (p - q) * (p - q)).sum();
                        let db: f64 =
                            x.iter().zip(&centroids[b * ds.dim..(b + 1) * ds.dim]).map(|(p, q)| (p - q) * (p - q)).sum();
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                if best == ds.labels[i] {
                    correct += 1;
                }
            }
            let acc = correct as f64 / ds.len() as f64;
            assert!(acc >= bound, "separation {sep}: accuracy {acc} < {bound}");
        }
    }

    #[test]
    fn blobs_zero_separation_shares_distribution() {
        let ds = synthetic_blobs(2, 200, 0.0, 5, 3).unwrap();
        // with no separation the per-class means should be statistically close
        let mut m0 = vec![0.0; 5];
        let mut m1 = vec![0.0; 5];
        for i in 0..ds.len() {
            let dst = if ds.labels[i] == 0 { &mut m0 } else { &mut m1 };
            for d in 0..5 {
                dst[d] += ds.image(i)[d] / 200.0;
            }
        }
        for d in 0..5 {
            assert!((m0[d] - m1[d]).abs() < 0.1, "dim {d}: {} vs {}", m0[d], m1[d]);
        }
    }
}
