//! Dataset ingestion (IDX, CIFAR binary), synthetic subspace-Gaussian
//! generation, class-incremental task splitting, and PGM/PPM image export.
//!
//! All loaders produce samples as columns of a [`Matrix`] with pixel values
//! in [−1, 1] (matching the tanh decoder range). Paths ending in `.gz` are
//! decompressed transparently; byte offsets in format errors refer to the
//! decompressed stream.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;

use crate::error::{CoreError, Result};
use crate::linalg::Matrix;
use crate::network::Shape;
use crate::rng::RunRng;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const CIFAR10_RECORD: usize = 3073;
const CIFAR100_RECORD: usize = 3074;

/// A labeled image/feature set: one flattened sample per column.
#[derive(Clone, Debug)]
pub struct LabeledImages {
    pub data: Matrix,
    pub labels: Vec<usize>,
    pub shape: Shape,
}

impl LabeledImages {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Class ids present, ascending.
    pub fn class_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.labels.clone();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// All samples of one class, in file order.
    pub fn class_block(&self, class_id: usize) -> Matrix {
        let cols: Vec<usize> = self
            .labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class_id)
            .map(|(i, _)| i)
            .collect();
        self.data.select_columns(&cols)
    }

    /// First `per_class` samples of every class (file order preserved).
    pub fn take_per_class(&self, per_class: usize) -> LabeledImages {
        let mut kept = Vec::new();
        let mut counts = std::collections::BTreeMap::new();
        for (i, &l) in self.labels.iter().enumerate() {
            let c = counts.entry(l).or_insert(0usize);
            if *c < per_class {
                kept.push(i);
                *c += 1;
            }
        }
        LabeledImages {
            data: self.data.select_columns(&kept),
            labels: kept.iter().map(|&i| self.labels[i]).collect(),
            shape: self.shape.clone(),
        }
    }

    /// Keep only samples whose label is in `classes`.
    pub fn filter_classes(&self, classes: &[usize]) -> LabeledImages {
        let kept: Vec<usize> = self
            .labels
            .iter()
            .enumerate()
            .filter(|(_, l)| classes.contains(l))
            .map(|(i, _)| i)
            .collect();
        LabeledImages {
            data: self.data.select_columns(&kept),
            labels: kept.iter().map(|&i| self.labels[i]).collect(),
            shape: self.shape.clone(),
        }
    }
}

/// An ordered stream of class-disjoint tasks.
#[derive(Clone, Debug)]
pub struct TaskStream {
    pub tasks: Vec<Task>,
}

#[derive(Clone, Debug)]
pub struct Task {
    /// (class id, samples) in ascending class order.
    pub classes: Vec<(usize, Matrix)>,
}

impl TaskStream {
    pub fn all_class_ids(&self) -> Vec<usize> {
        self.tasks
            .iter()
            .flat_map(|t| t.classes.iter().map(|(id, _)| *id))
            .collect()
    }
}

fn read_file_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let file = File::open(path)?;
    let mut bytes = Vec::new();
    if path.extension().is_some_and(|e| e == "gz") {
        GzDecoder::new(file).read_to_end(&mut bytes)?;
    } else {
        let mut file = file;
        file.read_to_end(&mut bytes)?;
    }
    Ok(bytes)
}

fn read_u32_be(bytes: &[u8], offset: usize) -> Result<u32> {
    let end = offset + 4;
    if end > bytes.len() {
        return Err(CoreError::format(
            offset as u64,
            format!("expected 4 bytes, file has {}", bytes.len()),
        ));
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

fn scale_byte(b: u8) -> f64 {
    b as f64 / 255.0 * 2.0 - 1.0
}

/// Parse an IDX image file (magic 0x00000803). 28×28 images are zero-padded
/// to 32×32 with −1 (the scaled background value); other sizes pass through.
pub fn load_idx_images(path: &Path) -> Result<(Matrix, Shape)> {
    let bytes = read_file_maybe_gz(path)?;
    let magic = read_u32_be(&bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(CoreError::format(
            0,
            format!("bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        ));
    }
    let count = read_u32_be(&bytes, 4)? as usize;
    let rows = read_u32_be(&bytes, 8)? as usize;
    let cols = read_u32_be(&bytes, 12)? as usize;
    let header = 16usize;
    let expected = header + count * rows * cols;
    if bytes.len() != expected {
        return Err(CoreError::format(
            bytes.len().min(expected) as u64,
            format!(
                "payload truncated or oversized: {} bytes for {count} images of {rows}x{cols} (expected {expected})",
                bytes.len()
            ),
        ));
    }

    let pad_to_32 = rows == 28 && cols == 28;
    let (out_h, out_w) = if pad_to_32 { (32, 32) } else { (rows, cols) };
    let mut data = Matrix::zeros(out_h * out_w, count);
    for s in 0..count {
        let src = &bytes[header + s * rows * cols..header + (s + 1) * rows * cols];
        let col = data.col_mut(s);
        if pad_to_32 {
            col.fill(-1.0);
            for y in 0..rows {
                for x in 0..cols {
                    col[(y + 2) * out_w + (x + 2)] = scale_byte(src[y * cols + x]);
                }
            }
        } else {
            for (dst, &b) in col.iter_mut().zip(src.iter()) {
                *dst = scale_byte(b);
            }
        }
    }
    Ok((
        data,
        Shape::Image {
            channels: 1,
            height: out_h,
            width: out_w,
        },
    ))
}

/// Parse an IDX label file (magic 0x00000801).
pub fn load_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = read_file_maybe_gz(path)?;
    let magic = read_u32_be(&bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(CoreError::format(
            0,
            format!("bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        ));
    }
    let count = read_u32_be(&bytes, 4)? as usize;
    let header = 8usize;
    if bytes.len() != header + count {
        return Err(CoreError::format(
            bytes.len().min(header + count) as u64,
            format!(
                "label payload truncated or oversized: {} bytes for {count} labels",
                bytes.len()
            ),
        ));
    }
    Ok(bytes[header..].iter().map(|&b| b as usize).collect())
}

/// Load a paired IDX image/label set (e.g. MNIST).
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledImages> {
    let (data, shape) = load_idx_images(images_path)?;
    let labels = load_idx_labels(labels_path)?;
    if labels.len() != data.cols() {
        return Err(CoreError::format(
            8,
            format!(
                "image/label count mismatch: {} images vs {} labels",
                data.cols(),
                labels.len()
            ),
        ));
    }
    Ok(LabeledImages {
        data,
        labels,
        shape,
    })
}

/// Binary CIFAR record layouts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CifarVariant {
    /// 3073-byte records: label byte + 3×32×32 pixels.
    Cifar10,
    /// 3074-byte records: coarse label + fine label + 3×32×32 pixels; the
    /// fine label is used.
    Cifar100,
}

/// Parse a binary CIFAR batch file.
pub fn load_cifar(path: &Path, variant: CifarVariant) -> Result<LabeledImages> {
    let bytes = read_file_maybe_gz(path)?;
    let (record, label_offset) = match variant {
        CifarVariant::Cifar10 => (CIFAR10_RECORD, 0usize),
        CifarVariant::Cifar100 => (CIFAR100_RECORD, 1usize),
    };
    if bytes.is_empty() || bytes.len() % record != 0 {
        return Err(CoreError::format(
            (bytes.len() - bytes.len() % record) as u64,
            format!(
                "file size {} is not a multiple of the {record}-byte record length",
                bytes.len()
            ),
        ));
    }
    let count = bytes.len() / record;
    let pixels = 3 * 32 * 32;
    let mut data = Matrix::zeros(pixels, count);
    let mut labels = Vec::with_capacity(count);
    for s in 0..count {
        let rec = &bytes[s * record..(s + 1) * record];
        labels.push(rec[label_offset] as usize);
        let body = &rec[record - pixels..];
        for (dst, &b) in data.col_mut(s).iter_mut().zip(body.iter()) {
            *dst = scale_byte(b);
        }
    }
    Ok(LabeledImages {
        data,
        labels,
        shape: Shape::Image {
            channels: 3,
            height: 32,
            width: 32,
        },
    })
}

/// Synthetic classes on mutually orthogonal linear subspaces.
///
/// Class j's samples are U_j c + noise with c ~ N(0, I) on `sub_dim`
/// coefficients; the per-class bases are disjoint blocks of one random
/// orthonormal frame, so distinct classes are exactly orthogonal. Samples are
/// scaled into [−1, 1] (a per-sample rescale that preserves subspace
/// membership exactly).
pub fn synth_subspace_data(
    k: usize,
    d: usize,
    sub_dim: usize,
    per_class: usize,
    noise_std: f64,
    seed: u64,
) -> Result<LabeledImages> {
    if k == 0 || sub_dim == 0 || per_class == 0 {
        return Err(CoreError::arg("synth_subspace_data: zero-sized request"));
    }
    if k * sub_dim > d {
        return Err(CoreError::arg(format!(
            "synth_subspace_data: k*sub_dim = {} exceeds ambient dimension {d}",
            k * sub_dim
        )));
    }
    let mut rng = RunRng::seed_from_u64(seed);
    // one orthonormal frame, Gram-Schmidt over Gaussian draws
    let mut frame: Vec<Vec<f64>> = Vec::with_capacity(k * sub_dim);
    while frame.len() < k * sub_dim {
        let mut c: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        for b in &frame {
            let dot: f64 = c.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
            for (x, y) in c.iter_mut().zip(b.iter()) {
                *x -= dot * y;
            }
        }
        let norm: f64 = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        for x in c.iter_mut() {
            *x /= norm;
        }
        frame.push(c);
    }

    let mut data = Matrix::zeros(d, k * per_class);
    let mut labels = Vec::with_capacity(k * per_class);
    for class in 0..k {
        let basis = &frame[class * sub_dim..(class + 1) * sub_dim];
        for s in 0..per_class {
            let col_idx = class * per_class + s;
            let coeffs: Vec<f64> = (0..sub_dim).map(|_| rng.normal()).collect();
            {
                let col = data.col_mut(col_idx);
                for (dim, b) in basis.iter().enumerate() {
                    for (x, y) in col.iter_mut().zip(b.iter()) {
                        *x += coeffs[dim] * y;
                    }
                }
                for x in col.iter_mut() {
                    *x += noise_std * rng.normal();
                }
                // bring into [−1, 1]; uniform scaling keeps subspace membership
                for x in col.iter_mut() {
                    *x *= 0.25;
                }
                let max = col.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                if max > 1.0 {
                    for x in col.iter_mut() {
                        *x /= max;
                    }
                }
            }
            labels.push(class);
        }
    }
    Ok(LabeledImages {
        data,
        labels,
        shape: Shape::Flat(d),
    })
}

/// Split a labeled set into `splits` class-disjoint tasks: ascending class
/// ids, contiguous groups.
pub fn split_tasks(dataset: &LabeledImages, splits: usize) -> Result<TaskStream> {
    split_tasks_ordered(dataset, splits, None)
}

/// Like [`split_tasks`] but with an optional seeded class permutation.
pub fn split_tasks_ordered(
    dataset: &LabeledImages,
    splits: usize,
    order_seed: Option<u64>,
) -> Result<TaskStream> {
    let mut ids = dataset.class_ids();
    if splits == 0 || ids.is_empty() || ids.len() % splits != 0 {
        return Err(CoreError::config(format!(
            "cannot split {} classes into {splits} tasks",
            ids.len()
        )));
    }
    if let Some(seed) = order_seed {
        let mut rng = RunRng::seed_from_u64(seed);
        rng.shuffle(&mut ids);
    }
    let per_task = ids.len() / splits;
    let tasks = ids
        .chunks(per_task)
        .map(|chunk| {
            let mut classes: Vec<usize> = chunk.to_vec();
            classes.sort_unstable();
            Task {
                classes: classes
                    .into_iter()
                    .map(|id| (id, dataset.class_block(id)))
                    .collect(),
            }
        })
        .collect();
    Ok(TaskStream { tasks })
}

fn quantize(v: f64) -> u8 {
    (((v + 1.0) * 127.5).round().clamp(0.0, 255.0)) as u8
}

/// Write a binary PGM ("P5", maxval 255) from a grayscale image in [−1, 1].
pub fn write_pgm(path: &Path, pixels: &[f64], height: usize, width: usize) -> Result<()> {
    if pixels.len() != height * width {
        return Err(CoreError::arg(format!(
            "write_pgm: {} pixels for {height}x{width}",
            pixels.len()
        )));
    }
    let mut out = Vec::with_capacity(pixels.len() + 32);
    out.extend_from_slice(format!("P5\n{width} {height}\n255\n").as_bytes());
    out.extend(pixels.iter().map(|&v| quantize(v)));
    File::create(path)?.write_all(&out)?;
    Ok(())
}

/// Write a binary PPM ("P6", maxval 255) from a channel-major RGB image in [−1, 1].
pub fn write_ppm(path: &Path, pixels: &[f64], height: usize, width: usize) -> Result<()> {
    let plane = height * width;
    if pixels.len() != 3 * plane {
        return Err(CoreError::arg(format!(
            "write_ppm: {} values for 3x{height}x{width}",
            pixels.len()
        )));
    }
    let mut out = Vec::with_capacity(3 * plane + 32);
    out.extend_from_slice(format!("P6\n{width} {height}\n255\n").as_bytes());
    for i in 0..plane {
        out.push(quantize(pixels[i]));
        out.push(quantize(pixels[plane + i]));
        out.push(quantize(pixels[2 * plane + i]));
    }
    File::create(path)?.write_all(&out)?;
    Ok(())
}

/// Read back a binary PGM into [−1, 1] values (round-trip testing and tools).
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let bytes = read_file_maybe_gz(path)?;
    let header_err = |msg: &str| CoreError::format(0, msg.to_string());
    let text = String::from_utf8_lossy(&bytes[..bytes.len().min(64)]).to_string();
    let mut parts = text.split_ascii_whitespace();
    if parts.next() != Some("P5") {
        return Err(header_err("not a P5 PGM"));
    }
    let width: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| header_err("bad width"))?;
    let height: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| header_err("bad height"))?;
    let maxval: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| header_err("bad maxval"))?;
    if maxval != 255 {
        return Err(header_err("expected maxval 255"));
    }
    // payload starts after the single whitespace byte following maxval
    let header_len = text
        .match_indices(char::is_whitespace)
        .nth(3)
        .map(|(i, _)| i + 1)
        .ok_or_else(|| header_err("malformed header"))?;
    let expected = header_len + width * height;
    if bytes.len() != expected {
        return Err(CoreError::format(
            bytes.len().min(expected) as u64,
            format!("payload size {} expected {expected}", bytes.len()),
        ));
    }
    let pixels = bytes[header_len..]
        .iter()
        .map(|&b| b as f64 / 127.5 - 1.0)
        .collect();
    Ok((height, width, pixels))
}

/// Tile equally sized grayscale images into a grid (row-major placement).
pub fn tile_grid(
    images: &[Vec<f64>],
    grid_rows: usize,
    grid_cols: usize,
    height: usize,
    width: usize,
) -> Vec<f64> {
    let mut out = vec![-1.0; grid_rows * height * grid_cols * width];
    let out_w = grid_cols * width;
    for (idx, img) in images.iter().enumerate().take(grid_rows * grid_cols) {
        let gy = idx / grid_cols;
        let gx = idx % grid_cols;
        for y in 0..height {
            for x in 0..width {
                out[(gy * height + y) * out_w + gx * width + x] = img[y * width + x];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalkit::affinity;
    use crate::memory::{fit_subspace, DimRule};

    fn write_temp(name: &str, bytes: &[u8]) -> std::path::PathBuf {
        let path = std::env::temp_dir().join(format!("ildr_core_test_{name}"));
        std::fs::write(&path, bytes).unwrap();
        path
    }

    fn idx_image_fixture() -> Vec<u8> {
        // magic, 2 images, 2x2, 8 payload bytes
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&0x0000_0803u32.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&[0, 255, 128, 64, 10, 20, 30, 40]);
        bytes
    }

    #[test]
    fn idx_fixture_parses() {
        let path = write_temp("idx_ok", &idx_image_fixture());
        let (data, shape) = load_idx_images(&path).unwrap();
        assert_eq!(data.cols(), 2);
        assert_eq!(shape, Shape::Image { channels: 1, height: 2, width: 2 });
        assert!((data.get(0, 0) + 1.0).abs() < 1e-12);
        assert!((data.get(1, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn idx_rejects_wrong_magic() {
        let mut bytes = idx_image_fixture();
        bytes[3] = 0x05;
        let path = write_temp("idx_magic", &bytes);
        match load_idx_images(&path) {
            Err(CoreError::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn idx_rejects_truncation() {
        let mut bytes = idx_image_fixture();
        bytes.truncate(bytes.len() - 3);
        let path = write_temp("idx_trunc", &bytes);
        assert!(matches!(
            load_idx_images(&path),
            Err(CoreError::Format { .. })
        ));
    }

    #[test]
    fn idx_label_mismatch_detected() {
        let img_path = write_temp("idx_pair_img", &idx_image_fixture());
        let mut labels = Vec::new();
        labels.extend_from_slice(&0x0000_0801u32.to_be_bytes());
        labels.extend_from_slice(&3u32.to_be_bytes());
        labels.extend_from_slice(&[1, 2, 3]);
        let lab_path = write_temp("idx_pair_lab", &labels);
        assert!(matches!(
            load_idx(&img_path, &lab_path),
            Err(CoreError::Format { .. })
        ));
    }

    #[test]
    fn cifar_single_record() {
        let mut bytes = vec![7u8];
        bytes.extend(std::iter::repeat(200u8).take(3072));
        let path = write_temp("cifar_one", &bytes);
        let set = load_cifar(&path, CifarVariant::Cifar10).unwrap();
        assert_eq!(set.labels, vec![7]);
        assert_eq!(set.data.rows(), 3072);
        assert!((set.data.get(0, 0) - (200.0 / 255.0 * 2.0 - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn cifar_rejects_truncated() {
        let bytes = vec![0u8; 3073 + 100];
        let path = write_temp("cifar_trunc", &bytes);
        assert!(matches!(
            load_cifar(&path, CifarVariant::Cifar10),
            Err(CoreError::Format { .. })
        ));
    }

    #[test]
    fn synth_noise_free_lies_in_subspace() {
        let set = synth_subspace_data(3, 12, 2, 20, 0.0, 5).unwrap();
        for class in 0..3 {
            let block = set.class_block(class);
            let fit = fit_subspace(class, &block, DimRule::Fixed(2)).unwrap();
            let mean = block.column_mean();
            let centered = block.subtract_column_vector(&mean);
            let proj = fit
                .model
                .basis
                .matmul(&fit.model.basis.matmul_transpose_self(&centered));
            let mut resid = centered.clone();
            resid.axpy(-1.0, &proj);
            assert!(resid.max_abs() < 1e-10, "class {class}: {:e}", resid.max_abs());
        }
    }

    #[test]
    fn synth_distinct_classes_nearly_orthogonal() {
        let set = synth_subspace_data(4, 16, 2, 30, 0.0, 9).unwrap();
        let fits: Vec<_> = (0..4)
            .map(|c| fit_subspace(c, &set.class_block(c), DimRule::Fixed(2)).unwrap())
            .collect();
        for i in 0..4 {
            for j in 0..i {
                let a = affinity(&fits[i].model.basis, &fits[j].model.basis).unwrap();
                assert!(a < 0.05, "classes {i},{j} affinity {a}");
            }
        }
    }

    #[test]
    fn synth_is_deterministic_and_bounded() {
        let a = synth_subspace_data(2, 8, 2, 10, 0.1, 3).unwrap();
        let b = synth_subspace_data(2, 8, 2, 10, 0.1, 3).unwrap();
        assert_eq!(a.data, b.data);
        assert!(a.data.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn synth_rejects_overfull_ambient() {
        assert!(synth_subspace_data(4, 6, 2, 5, 0.0, 0).is_err());
    }

    #[test]
    fn split_contiguous_ascending() {
        let set = synth_subspace_data(10, 20, 1, 3, 0.0, 1).unwrap();
        let stream = split_tasks(&set, 5).unwrap();
        assert_eq!(stream.tasks.len(), 5);
        for (t, task) in stream.tasks.iter().enumerate() {
            let ids: Vec<usize> = task.classes.iter().map(|(id, _)| *id).collect();
            assert_eq!(ids, vec![2 * t, 2 * t + 1]);
        }
    }

    #[test]
    fn split_rejects_non_divisible() {
        let set = synth_subspace_data(10, 20, 1, 3, 0.0, 1).unwrap();
        assert!(matches!(split_tasks(&set, 3), Err(CoreError::Config(_))));
    }

    #[test]
    fn pgm_scaling_endpoints() {
        let path = std::env::temp_dir().join("ildr_core_test_black.pgm");
        write_pgm(&path, &[-1.0; 4], 2, 2).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[bytes.len() - 4..], &[0, 0, 0, 0]);
    }

    #[test]
    fn pgm_roundtrip_error_within_quantization() {
        let mut rng = RunRng::seed_from_u64(2);
        let pixels: Vec<f64> = (0..64).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let path = std::env::temp_dir().join("ildr_core_test_rt.pgm");
        write_pgm(&path, &pixels, 8, 8).unwrap();
        let (h, w, back) = read_pgm(&path).unwrap();
        assert_eq!((h, w), (8, 8));
        for (a, b) in pixels.iter().zip(back.iter()) {
            assert!((a - b).abs() <= 2.0 / 255.0 + 1e-12, "{a} vs {b}");
        }
    }
}
