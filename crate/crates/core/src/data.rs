//! Dataset ingestion and synthesis: IDX image parsing, the train/validation
//! split, fixed overfit subsets, dequantization noise and synthetic desk
//! sets. Datasets are immutable after load and freely shared across runs.

use crate::nn::Matrix;
use crate::rng::CounterRng;

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DataError {
    #[error("bad IDX magic 0x{got:08x} (expected 0x{expected:08x})")]
    BadMagic { got: u32, expected: u32 },
    #[error("truncated IDX payload: missing {missing} bytes")]
    Truncated { missing: usize },
    #[error("pixel {index} out of range: {value}")]
    PixelOutOfRange { index: usize, value: f64 },
    #[error("pixel {index} is not a multiple of 1/255 (value {value})")]
    NotQuantized { index: usize, value: f64 },
    #[error("expected {expected} images, got {got}")]
    WrongCount { expected: usize, got: usize },
    #[error("cannot take {k} images from a set of {n}")]
    SubsetTooLarge { k: usize, n: usize },
}

/// Dense `[n, h*w]` image set with values in `[0, 1]` (dequantized sets may
/// exceed 1 by less than the noise width).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageDataset {
    pub images: Matrix,
    pub height: usize,
    pub width: usize,
    pub source: String,
}

impl ImageDataset {
    pub fn len(&self) -> usize {
        self.images.rows
    }

    pub fn is_empty(&self) -> bool {
        self.images.rows == 0
    }

    pub fn pixel_dim(&self) -> usize {
        self.images.cols
    }

    pub fn image(&self, i: usize) -> &[f64] {
        self.images.row(i)
    }

    fn with_validated_range(self) -> Result<Self, DataError> {
        if let Some((i, &v)) = self
            .images
            .data
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(DataError::PixelOutOfRange { index: i, value: v });
        }
        Ok(self)
    }
}

/// Parse IDX image bytes: big-endian magic 0x00000803, then count/rows/cols
/// as big-endian u32, then unsigned pixel bytes. Pixels map to `[0, 1]` by
/// division by 255.
pub fn parse_idx(bytes: &[u8]) -> Result<ImageDataset, DataError> {
    let need = |want: usize, have: usize| -> Result<(), DataError> {
        if have < want {
            Err(DataError::Truncated { missing: want - have })
        } else {
            Ok(())
        }
    };
    need(16, bytes.len())?;
    let word = |i: usize| u32::from_be_bytes(bytes[i..i + 4].try_into().unwrap());
    let magic = word(0);
    if magic != IDX_IMAGE_MAGIC {
        return Err(DataError::BadMagic { got: magic, expected: IDX_IMAGE_MAGIC });
    }
    let n = word(4) as usize;
    let h = word(8) as usize;
    let w = word(12) as usize;
    let payload = n * h * w;
    need(16 + payload, bytes.len())?;
    let data = bytes[16..16 + payload]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    ImageDataset {
        images: Matrix { rows: n, cols: h * w, data },
        height: h,
        width: w,
        source: "idx".to_string(),
    }
    .with_validated_range()
}

/// Serialize back to IDX bytes; parsing the result reproduces the pixels
/// bit for bit for any dataset on the 1/255 grid.
pub fn to_idx_bytes(ds: &ImageDataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + ds.images.data.len());
    out.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
    out.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    out.extend_from_slice(&(ds.height as u32).to_be_bytes());
    out.extend_from_slice(&(ds.width as u32).to_be_bytes());
    out.extend(
        ds.images
            .data
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    out
}

/// Order-preserving split of the 60000-image MNIST training file into the
/// first 50000 (train) and remaining 10000 (validation).
pub fn split(ds: &ImageDataset) -> Result<(ImageDataset, ImageDataset), DataError> {
    const TRAIN: usize = 50_000;
    const TOTAL: usize = 60_000;
    if ds.len() != TOTAL {
        return Err(DataError::WrongCount { expected: TOTAL, got: ds.len() });
    }
    let d = ds.pixel_dim();
    let take = |range: std::ops::Range<usize>, tag: &str| ImageDataset {
        images: Matrix {
            rows: range.len(),
            cols: d,
            data: ds.images.data[range.start * d..range.end * d].to_vec(),
        },
        height: ds.height,
        width: ds.width,
        source: format!("{}:{tag}", ds.source),
    };
    Ok((take(0..TRAIN, "train"), take(TRAIN..TOTAL, "val")))
}

/// `k` images sampled without replacement using the run seed.
pub fn overfit_subset(ds: &ImageDataset, k: usize, seed: u64) -> Result<ImageDataset, DataError> {
    if k > ds.len() {
        return Err(DataError::SubsetTooLarge { k, n: ds.len() });
    }
    let mut rng = CounterRng::new(seed);
    let picks = rng.sample_without_replacement(ds.len(), k);
    let d = ds.pixel_dim();
    let mut data = Vec::with_capacity(k * d);
    for &i in &picks {
        data.extend_from_slice(ds.image(i));
    }
    Ok(ImageDataset {
        images: Matrix { rows: k, cols: d, data },
        height: ds.height,
        width: ds.width,
        source: format!("{}:subset{k}", ds.source),
    })
}

/// Add independent uniform dequantization noise on `[0, 1/256)` per pixel.
/// Values must sit on the 1/255 grid (within 1e-9) coming in.
pub fn dequantize(ds: &ImageDataset, seed: u64) -> Result<ImageDataset, DataError> {
    for (i, &v) in ds.images.data.iter().enumerate() {
        let scaled = v * 255.0;
        if (scaled - scaled.round()).abs() > 1e-9 * 255.0 {
            return Err(DataError::NotQuantized { index: i, value: v });
        }
    }
    let mut rng = CounterRng::new(seed);
    let data = ds
        .images
        .data
        .iter()
        .map(|&v| v + rng.uniform() / 256.0)
        .collect();
    Ok(ImageDataset {
        images: Matrix { rows: ds.len(), cols: ds.pixel_dim(), data },
        height: ds.height,
        width: ds.width,
        source: format!("{}:dequantized", ds.source),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    /// Seeded uniform texture with the four corner pixels identically zero
    /// across the whole set -- the constant-pixel pathology in miniature.
    ConstantCorners,
    /// Seeded uniform texture.
    RandomPatches,
}

impl std::fmt::Display for SynthKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SynthKind::ConstantCorners => write!(f, "constant-corners"),
            SynthKind::RandomPatches => write!(f, "random-patches"),
        }
    }
}

impl std::str::FromStr for SynthKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "constant-corners" => Ok(SynthKind::ConstantCorners),
            "random-patches" => Ok(SynthKind::RandomPatches),
            other => Err(format!("unknown synth kind `{other}`")),
        }
    }
}

/// Synthesize a desk-scale image set on the 1/255 grid.
pub fn synth_set(kind: SynthKind, n: usize, h: usize, w: usize, seed: u64) -> ImageDataset {
    let mut rng = CounterRng::new(seed);
    let d = h * w;
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        for _ in 0..d {
            let level = (rng.uniform() * 256.0).floor().min(255.0);
            data.push(level / 255.0);
        }
    }
    let mut ds = ImageDataset {
        images: Matrix { rows: n, cols: d, data },
        height: h,
        width: w,
        source: format!("synth:{kind:?}"),
    };
    if kind == SynthKind::ConstantCorners && h > 0 && w > 0 {
        let corners = [0, w - 1, (h - 1) * w, h * w - 1];
        for i in 0..n {
            for &c in &corners {
                *ds.images.at_mut(i, c) = 0.0;
            }
        }
    }
    ds
}
