//! Dataset ingestion, synthetic data and the client/server split.

use std::fs;
use std::io;
use std::path::Path;

use crate::error::{FedError, Result};
use crate::math::RngStream;
use crate::model::Batch;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// An in-memory labelled dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub num_classes: usize,
    data: Batch,
}

impl Dataset {
    pub fn new(name: impl Into<String>, data: Batch, num_classes: usize) -> Result<Self> {
        if data.is_empty() {
            return Err(FedError::Empty("dataset"));
        }
        if let Some(&bad) = data.labels().iter().find(|&&l| l >= num_classes) {
            return Err(FedError::InvalidArgument(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Dataset {
            name: name.into(),
            num_classes,
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.data.input_dim()
    }

    pub fn batch(&self) -> &Batch {
        &self.data
    }

    pub fn subset(&self, indices: &[usize]) -> Batch {
        self.data.select(indices)
    }
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn u32_be(&mut self) -> Result<u32> {
        let chunk = self.take(4)?;
        Ok(u32::from_be_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]))
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(FedError::io(
                self.path,
                self.bytes.len() as u64,
                io::Error::new(
                    io::ErrorKind::UnexpectedEof,
                    format!("needed {n} bytes at offset {}", self.pos),
                ),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn expect_magic(&mut self, want: u32) -> Result<()> {
        let magic = self.u32_be()?;
        if magic != want {
            return Err(FedError::Format {
                path: self.path.to_path_buf(),
                message: format!("expected magic 0x{want:08x}, found 0x{magic:08x}"),
            });
        }
        Ok(())
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| FedError::io(path, 0, e))
}

/// Loads an IDX image file (`0x00000803`, `n x rows x cols` bytes) and
/// its IDX label file (`0x00000801`). Pixels are scaled by `1/255`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img_bytes = read_file(images_path)?;
    let mut img = Reader {
        path: images_path,
        bytes: &img_bytes,
        pos: 0,
    };
    img.expect_magic(IDX_IMAGES_MAGIC)?;
    let n = img.u32_be()? as usize;
    let rows = img.u32_be()? as usize;
    let cols = img.u32_be()? as usize;
    let pixels = img.take(n * rows * cols)?;
    let features: Vec<f64> = pixels.iter().map(|&p| p as f64 / 255.0).collect();

    let lbl_bytes = read_file(labels_path)?;
    let mut lbl = Reader {
        path: labels_path,
        bytes: &lbl_bytes,
        pos: 0,
    };
    lbl.expect_magic(IDX_LABELS_MAGIC)?;
    let n_labels = lbl.u32_be()? as usize;
    if n_labels != n {
        return Err(FedError::Format {
            path: labels_path.to_path_buf(),
            message: format!("{n_labels} labels for {n} images"),
        });
    }
    let labels: Vec<usize> = lbl.take(n)?.iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().copied().max().unwrap_or(0).max(1) + 1;

    let name = images_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".into());
    Dataset::new(
        name,
        Batch::new(features, rows * cols, labels)?,
        num_classes,
    )
}

/// Writes an IDX image file from raw pixel bytes.
pub fn write_idx_images(path: &Path, rows: u32, cols: u32, pixels: &[u8]) -> Result<()> {
    let per = (rows * cols) as usize;
    if per == 0 || !pixels.len().is_multiple_of(per) {
        return Err(FedError::InvalidArgument(
            "pixel buffer is not a whole number of images".into(),
        ));
    }
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&((pixels.len() / per) as u32).to_be_bytes());
    out.extend_from_slice(&rows.to_be_bytes());
    out.extend_from_slice(&cols.to_be_bytes());
    out.extend_from_slice(pixels);
    fs::write(path, out).map_err(|e| FedError::io(path, 0, e))
}

/// Writes an IDX label file.
pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    fs::write(path, out).map_err(|e| FedError::io(path, 0, e))
}

/// Mean direction for class `c`: `+e_c`, then `-e_c` once the axes run
/// out, growing in magnitude for further wraps.
fn blob_center(c: usize, input_dim: usize, separation: f64) -> (usize, f64) {
    let axis = c % input_dim;
    let wrap = c / input_dim;
    let sign = if wrap.is_multiple_of(2) { 1.0 } else { -1.0 };
    let scale = 1.0 + (wrap / 2) as f64;
    (axis, sign * scale * separation)
}

/// `num_classes` unit-variance Gaussian clusters; sample `i` belongs to
/// class `i % num_classes`.
pub fn synth_blobs(
    rng: &mut RngStream,
    n: usize,
    num_classes: usize,
    input_dim: usize,
    separation: f64,
) -> Result<Dataset> {
    if num_classes < 2 || n < num_classes {
        return Err(FedError::config(format!(
            "synthetic data needs n >= classes >= 2 (n={n}, classes={num_classes})"
        )));
    }
    if input_dim == 0 {
        return Err(FedError::config("synthetic data needs input_dim >= 1"));
    }
    if separation.is_nan() || separation < 0.0 {
        return Err(FedError::config("separation must be >= 0"));
    }
    let mut features = Vec::with_capacity(n * input_dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % num_classes;
        let (axis, offset) = blob_center(c, input_dim, separation);
        for j in 0..input_dim {
            let mean = if j == axis { offset } else { 0.0 };
            features.push(mean + rng.standard_normal());
        }
        labels.push(c);
    }
    Dataset::new(
        "synthetic",
        Batch::new(features, input_dim, labels)?,
        num_classes,
    )
}

/// Index sets carving the training data into client partitions and the
/// test data into the server's evaluation and filtering subsets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FederationSplit {
    pub client_partitions: Vec<Vec<usize>>,
    pub server_eval: Vec<usize>,
    pub server_filter: Vec<usize>,
}

/// Shuffles the training set into `num_clients` near-equal slices (the
/// first `len % num_clients` clients get one extra sample) and splits the
/// shuffled test set into an evaluation subset the size of one client
/// partition and a filtering subset holding the rest.
pub fn make_split(
    train: &Dataset,
    test: &Dataset,
    num_clients: usize,
    rng: &mut RngStream,
) -> Result<FederationSplit> {
    if num_clients == 0 {
        return Err(FedError::config("need at least one client"));
    }
    let base = train.len() / num_clients;
    if base == 0 {
        return Err(FedError::config(format!(
            "{} training samples cannot cover {num_clients} clients",
            train.len()
        )));
    }
    if test.len() <= base {
        return Err(FedError::config(format!(
            "test set of {} samples cannot hold an evaluation subset of {base} plus a filtering subset",
            test.len()
        )));
    }
    let extra = train.len() % num_clients;

    let mut order: Vec<usize> = (0..train.len()).collect();
    rng.shuffle(&mut order);
    let mut client_partitions = Vec::with_capacity(num_clients);
    let mut start = 0;
    for c in 0..num_clients {
        let size = base + usize::from(c < extra);
        client_partitions.push(order[start..start + size].to_vec());
        start += size;
    }

    let mut test_order: Vec<usize> = (0..test.len()).collect();
    rng.shuffle(&mut test_order);
    let server_filter = test_order.split_off(base);
    Ok(FederationSplit {
        client_partitions,
        server_eval: test_order,
        server_filter,
    })
}

/// A uniform sample of `size` filtering indices, returned sorted.
pub fn subsample_filter(
    split: &FederationSplit,
    size: usize,
    rng: &mut RngStream,
) -> Result<Vec<usize>> {
    let available = split.server_filter.len();
    if size == 0 || size > available {
        return Err(FedError::config(format!(
            "filter_size must be in 1..={available}, got {size}"
        )));
    }
    let mut pool = split.server_filter.clone();
    rng.shuffle(&mut pool);
    pool.truncate(size);
    pool.sort_unstable();
    Ok(pool)
}
