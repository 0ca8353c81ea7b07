//! IDX files, MNIST datasets, binarization and batching.

use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::rng::{self, Purpose};
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

/// Environment variable naming the default data directory.
pub const DATA_DIR_ENV: &str = "GIBBS_DATA_DIR";

/// Raw unsigned-byte IDX array.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl IdxArray {
    pub fn magic(&self) -> u32 {
        0x0800 | self.dims.len() as u32
    }

    /// Entries scaled by `1/255`, shape `dims`.
    pub fn to_unit_tensor(&self) -> Result<Tensor> {
        Tensor::new(
            self.dims.clone(),
            self.bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        )
    }
}

fn parse_err<T>(offset: usize, msg: impl Into<String>) -> Result<T> {
    Err(Error::Parse {
        offset,
        msg: msg.into(),
    })
}

fn be_u32(buf: &[u8], offset: usize) -> Result<u32> {
    match buf.get(offset..offset + 4) {
        Some(b) => Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]])),
        None => parse_err(buf.len(), "file ends inside the header"),
    }
}

/// Parses an in-memory IDX buffer; gzip input is detected and inflated.
pub fn parse_idx(raw: &[u8]) -> Result<IdxArray> {
    let inflated;
    let buf = if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw)
            .read_to_end(&mut out)
            .map_err(|e| Error::Parse {
                offset: 0,
                msg: format!("gzip stream: {e}"),
            })?;
        inflated = out;
        &inflated[..]
    } else {
        raw
    };
    if buf.is_empty() {
        return parse_err(0, "empty file");
    }
    let magic = be_u32(buf, 0)?;
    if magic >> 8 != 0x08 || magic & 0xff == 0 {
        return parse_err(0, format!("bad magic 0x{magic:08x}, expected unsigned-byte IDX"));
    }
    let ndim = (magic & 0xff) as usize;
    let mut dims = Vec::with_capacity(ndim);
    for d in 0..ndim {
        dims.push(be_u32(buf, 4 + 4 * d)? as usize);
    }
    let header = 4 + 4 * ndim;
    let count: usize = dims.iter().product();
    let body = &buf[header..];
    if body.len() < count {
        return parse_err(
            buf.len(),
            format!("truncated: header promises {count} bytes, found {}", body.len()),
        );
    }
    if body.len() > count {
        return parse_err(header + count, "trailing bytes after the data");
    }
    Ok(IdxArray {
        dims,
        bytes: body.to_vec(),
    })
}

pub fn read_idx(path: &Path) -> Result<IdxArray> {
    let raw = std::fs::read(path)?;
    parse_idx(&raw)
}

pub fn encode_idx(array: &IdxArray) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * array.dims.len() + array.bytes.len());
    out.extend_from_slice(&array.magic().to_be_bytes());
    for &d in &array.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&array.bytes);
    out
}

pub fn write_idx(path: &Path, array: &IdxArray) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_idx(array))?;
    Ok(())
}

/// Image file as a `P×(rows·cols)` tensor in `[0,1]`.
pub fn read_idx_images(path: &Path) -> Result<Tensor> {
    let a = read_idx(path)?;
    if a.magic() != IMAGE_MAGIC {
        return parse_err(0, format!("expected an image file, magic 0x{:08x}", a.magic()));
    }
    let (p, n) = (a.dims[0], a.dims[1] * a.dims[2]);
    a.to_unit_tensor()?.reshape(&[p, n])
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let a = read_idx(path)?;
    if a.magic() != LABEL_MAGIC {
        return parse_err(0, format!("expected a label file, magic 0x{:08x}", a.magic()));
    }
    Ok(a.bytes.iter().map(|&b| b as usize).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, split: Split) -> Result<Self> {
        let (p, _) = images.dims2()?;
        if p != labels.len() {
            return dim_err(format!("{p} images but {} labels", labels.len()));
        }
        if images.data().iter().any(|&x| !(0.0..=1.0).contains(&x)) {
            return Err(Error::Domain("pixels must lie in [0,1]".into()));
        }
        Ok(Dataset {
            images,
            labels,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.images.cols()
    }

    /// The first `n` observations (all of them if fewer).
    pub fn head(&self, n: usize) -> Result<Dataset> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }

    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        Ok(Dataset {
            images: self.images.select_rows(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            split: self.split,
        })
    }

    pub fn binarized(&self, mode: BinarizeMode) -> Result<Dataset> {
        Ok(Dataset {
            images: binarize(&self.images, mode)?,
            labels: self.labels.clone(),
            split: self.split,
        })
    }
}

fn find_file(dir: &Path, stem: &str) -> Result<PathBuf> {
    for name in [stem.to_string(), format!("{stem}.gz")] {
        let p = dir.join(name);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::Io(std::io::Error::new(
        std::io::ErrorKind::NotFound,
        format!("{stem}[.gz] not found in {}", dir.display()),
    )))
}

/// Loads the standard MNIST file pair for `split` from `dir`.
pub fn load_mnist(dir: &Path, split: Split) -> Result<Dataset> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let images = read_idx_images(&find_file(dir, &format!("{prefix}-images-idx3-ubyte"))?)?;
    let labels = read_idx_labels(&find_file(dir, &format!("{prefix}-labels-idx1-ubyte"))?)?;
    Dataset::new(images, labels, split)
}

/// `explicit` if given, else the directory named by `GIBBS_DATA_DIR`.
pub fn resolve_data_dir(explicit: Option<&Path>) -> Result<PathBuf> {
    if let Some(p) = explicit {
        return Ok(p.to_path_buf());
    }
    match std::env::var_os(DATA_DIR_ENV) {
        Some(v) if !v.is_empty() => Ok(PathBuf::from(v)),
        _ => Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("no data directory given and {DATA_DIR_ENV} is unset"),
        ))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinarizeMode {
    /// `x > 0.5 → 1`.
    Threshold,
    /// One Bernoulli(`x`) draw per pixel from the given seed.
    Stochastic { seed: u64 },
}

impl fmt::Display for BinarizeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BinarizeMode::Threshold => f.write_str("threshold0.5"),
            BinarizeMode::Stochastic { seed } => write!(f, "stochastic(seed={seed})"),
        }
    }
}

pub fn binarize(images: &Tensor, mode: BinarizeMode) -> Result<Tensor> {
    if images.data().iter().any(|&x| !(0.0..=1.0).contains(&x)) {
        return Err(Error::Domain("pixels must lie in [0,1] to binarize".into()));
    }
    Ok(match mode {
        BinarizeMode::Threshold => images.map(|x| if x > 0.5 { 1.0 } else { 0.0 }),
        BinarizeMode::Stochastic { seed } => {
            let mut r = rng::stream(seed, Purpose::Binarize, 0, 0);
            let mut out = images.clone();
            for x in out.data_mut() {
                let u: f64 = r.random();
                *x = if u < *x { 1.0 } else { 0.0 };
            }
            out
        }
    })
}

/// Shuffled index batches for one epoch; the last batch may be short.
pub fn batches(count: usize, size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if size == 0 {
        return Err(Error::Contract("batch size must be at least 1".into()));
    }
    let mut idx: Vec<usize> = (0..count).collect();
    idx.shuffle(&mut rng::stream(seed, Purpose::Shuffle, epoch, 0));
    Ok(idx.chunks(size).map(|c| c.to_vec()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image_fixture() -> Vec<u8> {
        let mut b = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
        b.extend_from_slice(&[0, 255, 51, 102, 204, 153, 255, 0]);
        b
    }

    #[test]
    fn hand_written_image_fixture() {
        let a = parse_idx(&image_fixture()).unwrap();
        assert_eq!(a.dims, vec![2, 2, 2]);
        let t = a.to_unit_tensor().unwrap();
        assert_eq!(t.data(), &[0.0, 1.0, 0.2, 0.4, 0.8, 0.6, 1.0, 0.0]);
        assert_eq!(encode_idx(&a), image_fixture());
    }

    #[test]
    fn three_labels() {
        let b = [0, 0, 8, 1, 0, 0, 0, 3, 7, 0, 9];
        let a = parse_idx(&b).unwrap();
        assert_eq!(a.magic(), LABEL_MAGIC);
        assert_eq!(a.bytes, vec![7, 0, 9]);
    }

    #[test]
    fn malformed_files_report_offsets() {
        assert!(matches!(parse_idx(&[]), Err(Error::Parse { offset: 0, .. })));
        assert!(matches!(
            parse_idx(&[0, 0, 9, 1, 0, 0, 0, 1, 5]),
            Err(Error::Parse { offset: 0, .. })
        ));
        let mut short = image_fixture();
        short.pop();
        assert!(matches!(parse_idx(&short), Err(Error::Parse { offset: 23, .. })));
        assert!(matches!(parse_idx(&[0, 0, 8, 3, 0]), Err(Error::Parse { .. })));
    }

    #[test]
    fn gzip_input_is_accepted() {
        use flate2::write::GzEncoder;
        let mut enc = GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(&image_fixture()).unwrap();
        let gz = enc.finish().unwrap();
        assert_eq!(parse_idx(&gz).unwrap(), parse_idx(&image_fixture()).unwrap());
    }

    #[test]
    fn threshold_binarization() {
        let t = Tensor::full(&[2, 3], 0.3);
        assert!(binarize(&t, BinarizeMode::Threshold).unwrap().data().iter().all(|&x| x == 0.0));
        let b = Tensor::new(vec![1, 4], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(binarize(&b, BinarizeMode::Threshold).unwrap(), b);
        assert!(binarize(&Tensor::full(&[1, 1], 1.5), BinarizeMode::Threshold).is_err());
    }

    #[test]
    fn stochastic_binarization_is_seeded() {
        let t = Tensor::full(&[10, 10], 0.5);
        let m = BinarizeMode::Stochastic { seed: 3 };
        let a = binarize(&t, m).unwrap();
        assert_eq!(a, binarize(&t, m).unwrap());
        assert!(a.data().iter().all(|&x| x == 0.0 || x == 1.0));
    }

    #[test]
    fn batches_cover_every_index_once() {
        let b = batches(10, 4, 1, 0).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(b, batches(10, 4, 1, 0).unwrap());
        assert_ne!(b, batches(10, 4, 1, 1).unwrap());
        assert!(batches(10, 0, 1, 0).is_err());
    }
}
