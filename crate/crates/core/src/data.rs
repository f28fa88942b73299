//! MNIST ingestion from IDX files and mini-batch iteration.
//!
//! IDX layout (all integers big-endian):
//!
//! | field  | images        | labels        |
//! |--------|---------------|---------------|
//! | magic  | `0x00000803`  | `0x00000801`  |
//! | counts | n, rows, cols | n             |
//! | body   | n·rows·cols u8| n u8 (0..=9)  |
//!
//! Files ending in `.gz`, or starting with the gzip magic, are decompressed
//! transparently.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;

use crate::error::{Error, Result};
use crate::math::{Matrix, Rng};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const NUM_CLASSES: usize = 10;

/// Stream label for per-epoch shuffles.
const SHUFFLE_STREAM: u64 = 0x5348_5546;

fn read_be_u32(bytes: &[u8], offset: usize, what: &'static str) -> Result<u32> {
    let chunk = bytes.get(offset..offset + 4).ok_or(Error::Truncated {
        what,
        expected: offset + 4,
        actual: bytes.len(),
    })?;
    Ok(u32::from_be_bytes(chunk.try_into().expect("4 bytes")))
}

/// Parses an IDX3 image file into an `n × (rows·cols)` matrix scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Matrix> {
    let magic = read_be_u32(bytes, 0, "IDX image header")?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Format(format!(
            "bad IDX image magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}"
        )));
    }
    let n = read_be_u32(bytes, 4, "IDX image header")? as usize;
    let rows = read_be_u32(bytes, 8, "IDX image header")? as usize;
    let cols = read_be_u32(bytes, 12, "IDX image header")? as usize;
    let pixels = rows * cols;
    let expected = 16 + n * pixels;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            what: "IDX image payload",
            expected,
            actual: bytes.len(),
        });
    }
    let data = bytes[16..expected]
        .iter()
        .map(|&b| f64::from(b) / 255.0)
        .collect();
    Matrix::from_vec(n, pixels, data)
}

/// Parses an IDX1 label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = read_be_u32(bytes, 0, "IDX label header")?;
    if magic != LABEL_MAGIC {
        return Err(Error::Format(format!(
            "bad IDX label magic {magic:#010x}, expected {LABEL_MAGIC:#010x}"
        )));
    }
    let n = read_be_u32(bytes, 4, "IDX label header")? as usize;
    let expected = 8 + n;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            what: "IDX label payload",
            expected,
            actual: bytes.len(),
        });
    }
    let labels = bytes[8..expected].to_vec();
    if let Some((i, &bad)) = labels
        .iter()
        .enumerate()
        .find(|(_, &l)| l as usize >= NUM_CLASSES)
    {
        return Err(Error::Value(format!("label {bad} at index {i} is not a digit")));
    }
    Ok(labels)
}

/// Encodes images (values `k/255`) as an IDX3 file with the given image geometry.
pub fn encode_idx_images(images: &Matrix, rows: usize, cols: usize) -> Result<Vec<u8>> {
    if rows * cols != images.cols() {
        return Err(Error::shape(
            "encode_idx_images",
            format!("{rows}x{cols} images but {} columns", images.cols()),
        ));
    }
    let mut out = Vec::with_capacity(16 + images.as_slice().len());
    out.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    out.extend_from_slice(&(images.rows() as u32).to_be_bytes());
    out.extend_from_slice(&(rows as u32).to_be_bytes());
    out.extend_from_slice(&(cols as u32).to_be_bytes());
    for &v in images.as_slice() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Value(format!("pixel {v} outside [0, 1]")));
        }
        out.push((v * 255.0).round() as u8);
    }
    Ok(out)
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Reads a file, gunzipping it when it is gzip-compressed.
pub fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Labelled images, one example per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Matrix,
    labels: Vec<u8>,
}

impl Dataset {
    pub fn new(images: Matrix, labels: Vec<u8>) -> Result<Self> {
        if images.rows() != labels.len() {
            return Err(Error::shape(
                "Dataset::new",
                format!("{} images but {} labels", images.rows(), labels.len()),
            ));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::Value(format!("label {l} is not a digit")));
        }
        Ok(Dataset { images, labels })
    }

    /// Loads an image file and its companion label file.
    pub fn load(images: &Path, labels: &Path) -> Result<Self> {
        let img = parse_idx_images(&read_maybe_gz(images)?)?;
        let lab = parse_idx_labels(&read_maybe_gz(labels)?)?;
        Dataset::new(img, lab)
    }

    pub fn images(&self) -> &Matrix {
        &self.images
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.images.cols()
    }

    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        let images = self.images.select_rows(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok(Dataset { images, labels })
    }

    /// The first `n` examples (or all of them when `n` exceeds the size).
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let idx: Vec<usize> = (0..n).collect();
        self.select(&idx).expect("indices in range")
    }
}

/// File locations of the four MNIST IDX files.
#[derive(Clone, Debug)]
pub struct MnistFiles {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

impl MnistFiles {
    /// Standard file names inside `dir`, preferring uncompressed files and
    /// falling back to `.gz` variants.
    pub fn in_dir(dir: &Path) -> Self {
        let pick = |stem: &str| {
            let plain = dir.join(stem);
            let gz = dir.join(format!("{stem}.gz"));
            if !plain.exists() && gz.exists() {
                gz
            } else {
                plain
            }
        };
        MnistFiles {
            train_images: pick("train-images-idx3-ubyte"),
            train_labels: pick("train-labels-idx1-ubyte"),
            test_images: pick("t10k-images-idx3-ubyte"),
            test_labels: pick("t10k-labels-idx1-ubyte"),
        }
    }

    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        let train = Dataset::load(&self.train_images, &self.train_labels)?;
        let test = Dataset::load(&self.test_images, &self.test_labels)?;
        Ok((train, test))
    }
}

/// Per-epoch visiting order of a dataset, cut into mini-batches.
#[derive(Clone, Debug)]
pub struct MiniBatchPlan {
    batch_size: usize,
    order: Vec<usize>,
}

impl MiniBatchPlan {
    /// Shuffled order for `epoch`, drawn from the stream `(seed, worker, epoch)`.
    pub fn new(n_examples: usize, batch_size: usize, seed: u64, worker: u64, epoch: u64) -> Result<Self> {
        let mut rng = Rng::stream(seed, &[SHUFFLE_STREAM, worker, epoch]);
        Self::with_rng(n_examples, batch_size, &mut rng)
    }

    pub fn with_rng(n_examples: usize, batch_size: usize, rng: &mut Rng) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let mut order: Vec<usize> = (0..n_examples).collect();
        rng.shuffle(&mut order);
        Ok(MiniBatchPlan { batch_size, order })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    /// Example indices of batch `batch_index`; the last batch may be short.
    pub fn batch_indices(&self, batch_index: usize) -> Result<&[usize]> {
        if batch_index >= self.num_batches() {
            return Err(Error::Range {
                index: batch_index,
                limit: self.num_batches(),
            });
        }
        let start = batch_index * self.batch_size;
        let end = (start + self.batch_size).min(self.order.len());
        Ok(&self.order[start..end])
    }
}

/// Images and labels of batch `batch_index` under `plan`.
pub fn next_batch(plan: &MiniBatchPlan, dataset: &Dataset, batch_index: usize) -> Result<(Matrix, Vec<u8>)> {
    if plan.order.len() != dataset.len() {
        return Err(Error::shape(
            "next_batch",
            format!("plan covers {} examples, dataset has {}", plan.order.len(), dataset.len()),
        ));
    }
    let idx = plan.batch_indices(batch_index)?;
    let images = dataset.images.select_rows(idx)?;
    let labels = idx.iter().map(|&i| dataset.labels[i]).collect();
    Ok((images, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn image_header(n: u32, r: u32, c: u32) -> Vec<u8> {
        let mut v = IMAGE_MAGIC.to_be_bytes().to_vec();
        for x in [n, r, c] {
            v.extend_from_slice(&x.to_be_bytes());
        }
        v
    }

    #[test]
    fn empty_image_file() {
        let m = parse_idx_images(&image_header(0, 28, 28)).unwrap();
        assert_eq!(m.shape(), (0, 784));
    }

    #[test]
    fn endpoint_pixels_normalize() {
        let mut bytes = image_header(2, 2, 2);
        bytes.extend_from_slice(&[0, 255, 255, 0, 255, 255, 0, 0]);
        let m = parse_idx_images(&bytes).unwrap();
        assert_eq!(m.shape(), (2, 4));
        assert_eq!(m.row(0), &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(m.row(1), &[1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn wrong_magic_and_truncation() {
        let mut bytes = image_header(1, 2, 2);
        bytes[3] = 0x01;
        assert!(matches!(parse_idx_images(&bytes), Err(Error::Format(_))));

        let mut bytes = image_header(2, 2, 2);
        bytes.extend_from_slice(&[1, 2, 3]);
        match parse_idx_images(&bytes) {
            Err(Error::Truncated { expected, actual, .. }) => {
                assert_eq!(expected, 24);
                assert_eq!(actual, 19);
            }
            other => panic!("expected truncation, got {other:?}"),
        }
        assert!(matches!(parse_idx_images(&[0, 0]), Err(Error::Truncated { .. })));
    }

    #[test]
    fn labels_parse_and_validate() {
        assert!(parse_idx_labels(&encode_idx_labels(&[])).unwrap().is_empty());
        assert_eq!(parse_idx_labels(&encode_idx_labels(&[3])).unwrap(), vec![3]);

        let mut bad = encode_idx_labels(&[1, 2]);
        bad[9] = 10;
        assert!(matches!(parse_idx_labels(&bad), Err(Error::Value(_))));

        let mut short = encode_idx_labels(&[1, 2]);
        short.pop();
        assert!(matches!(parse_idx_labels(&short), Err(Error::Truncated { .. })));

        let images = image_header(0, 1, 1);
        assert!(matches!(parse_idx_labels(&images), Err(Error::Format(_))));
    }

    #[test]
    fn gzip_is_transparent() {
        use flate2::{write::GzEncoder, Compression};
        use std::io::Write;

        let raw = encode_idx_labels(&[7, 2, 1]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.gz");
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&raw).unwrap();
        fs::write(&path, enc.finish().unwrap()).unwrap();
        assert_eq!(read_maybe_gz(&path).unwrap(), raw);
    }

    fn toy(n: usize) -> Dataset {
        let images = Matrix::from_vec(n, 1, (0..n).map(|i| i as f64 / 255.0).collect()).unwrap();
        Dataset::new(images, (0..n).map(|i| (i % 10) as u8).collect()).unwrap()
    }

    #[test]
    fn single_full_batch() {
        let plan = MiniBatchPlan::new(10, 10, 1, 0, 0).unwrap();
        assert_eq!(plan.num_batches(), 1);
        let mut idx = plan.batch_indices(0).unwrap().to_vec();
        idx.sort_unstable();
        assert_eq!(idx, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn short_final_batch() {
        let data = toy(10);
        let plan = MiniBatchPlan::new(10, 3, 1, 0, 0).unwrap();
        let sizes: Vec<usize> = (0..plan.num_batches())
            .map(|b| next_batch(&plan, &data, b).unwrap().1.len())
            .collect();
        assert_eq!(sizes, vec![3, 3, 3, 1]);
        assert!(matches!(next_batch(&plan, &data, 4), Err(Error::Range { .. })));
    }

    #[test]
    fn plans_are_deterministic_per_epoch() {
        let a = MiniBatchPlan::new(100, 7, 5, 0, 3).unwrap();
        let b = MiniBatchPlan::new(100, 7, 5, 0, 3).unwrap();
        let c = MiniBatchPlan::new(100, 7, 5, 0, 4).unwrap();
        assert_eq!(a.order(), b.order());
        assert_ne!(a.order(), c.order());
    }

    #[test]
    fn mnist_like_round_trip() {
        let data = toy(12);
        let img = encode_idx_images(data.images(), 1, 1).unwrap();
        let lab = encode_idx_labels(data.labels());
        let back = Dataset::new(parse_idx_images(&img).unwrap(), parse_idx_labels(&lab).unwrap()).unwrap();
        assert_eq!(back, data);
    }

    proptest! {
        #[test]
        fn idx_round_trip(pixels in prop::collection::vec(any::<u8>(), 0..64), labels in prop::collection::vec(0u8..10, 4)) {
            let n = labels.len();
            let per = pixels.len() / n;
            let images = Matrix::from_vec(n, per, pixels[..n * per].iter().map(|&b| f64::from(b) / 255.0).collect()).unwrap();
            let bytes = encode_idx_images(&images, 1, per).unwrap();
            prop_assert_eq!(parse_idx_images(&bytes).unwrap(), images);
            prop_assert_eq!(parse_idx_labels(&encode_idx_labels(&labels)).unwrap(), labels);
        }

        #[test]
        fn batches_partition_the_epoch(n in 1usize..200, bs in 1usize..50, seed in any::<u64>(), epoch in 0u64..5) {
            let plan = MiniBatchPlan::new(n, bs, seed, 0, epoch).unwrap();
            let mut seen: Vec<usize> = (0..plan.num_batches())
                .flat_map(|b| plan.batch_indices(b).unwrap().to_vec())
                .collect();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        }
    }
}
