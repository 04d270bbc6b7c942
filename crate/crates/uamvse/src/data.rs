//! Dataset representation, bit-exact feature file I/O, split management, and
//! a synthetic paired-feature generator for desk-scale retrieval runs.
//!
//! Feature file layout (little-endian): magic `UAMV`, version `u32` = 1,
//! kind `u8` (0 = image regions, 1 = text tokens), item count `u64`,
//! feature dim `u32`, then per item an `n_vectors: u32` header followed by
//! `n_vectors * feature_dim` `f32` values. Values are stored at `f32`
//! precision; the generator quantizes accordingly so save/load round-trips
//! are bitwise exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::numerics::{Mat, Rng};
use crate::{Error, Result};

const FEATURE_MAGIC: &[u8; 4] = b"UAMV";
const FEATURE_VERSION: u32 = 1;

/// What a feature file holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    ImageRegions,
    TextTokens,
}

impl FeatureKind {
    fn to_byte(self) -> u8 {
        match self {
            FeatureKind::ImageRegions => 0,
            FeatureKind::TextTokens => 1,
        }
    }

    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(FeatureKind::ImageRegions),
            1 => Some(FeatureKind::TextTokens),
            _ => None,
        }
    }
}

/// Named image-index sets. Disjoint; indices refer to `Dataset::images`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Which split an operation works on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Paired collections of variable-length image region features and caption
/// token features, with the caption-to-image mapping and split assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<Mat>,
    pub captions: Vec<Mat>,
    pub caption_to_image: Vec<usize>,
    pub splits: Splits,
    captions_by_image: Vec<Vec<usize>>,
}

impl Dataset {
    pub fn new(
        images: Vec<Mat>,
        captions: Vec<Mat>,
        caption_to_image: Vec<usize>,
        splits: Splits,
    ) -> Result<Self> {
        let captions_by_image = index_captions(&images, &captions, &caption_to_image, &splits)?;
        Ok(Self {
            images,
            captions,
            caption_to_image,
            splits,
            captions_by_image,
        })
    }

    /// Caption indices belonging to image `i`, in ascending order.
    pub fn captions_of(&self, image: usize) -> &[usize] {
        &self.captions_by_image[image]
    }

    pub fn image_dim(&self) -> usize {
        self.images.first().map_or(0, Mat::cols)
    }

    pub fn caption_dim(&self) -> usize {
        self.captions.first().map_or(0, Mat::cols)
    }

    /// All caption indices whose image belongs to `split`, ordered by the
    /// split's image order then by caption index.
    pub fn captions_in_split(&self, split: Split) -> Vec<usize> {
        let mut out = Vec::new();
        for &img in self.splits.get(split) {
            out.extend_from_slice(self.captions_of(img));
        }
        out
    }

    /// Writes `images.uamv`, `captions.uamv` and `manifest.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        save_features(&dir.join("images.uamv"), FeatureKind::ImageRegions, &self.images)?;
        save_features(&dir.join("captions.uamv"), FeatureKind::TextTokens, &self.captions)?;
        let manifest = Manifest {
            images: "images.uamv".to_string(),
            captions: "captions.uamv".to_string(),
            caption_to_image: self.caption_to_image.clone(),
            splits: self.splits.clone(),
        };
        let path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&path, json).map_err(|e| io_err(&path, e))?;
        Ok(())
    }

    /// Loads a dataset from a `manifest.json` path or a directory containing
    /// one. Relative feature paths resolve against the manifest directory.
    pub fn load(path: &Path) -> Result<Self> {
        let manifest_path = if path.is_dir() {
            path.join("manifest.json")
        } else {
            path.to_path_buf()
        };
        let text = std::fs::read_to_string(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: manifest_path.display().to_string(),
            msg: e.to_string(),
        })?;
        let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
        let resolve = |p: &str| -> PathBuf {
            let pb = PathBuf::from(p);
            if pb.is_absolute() {
                pb
            } else {
                base.join(pb)
            }
        };
        let (img_kind, images) = load_features(&resolve(&manifest.images))?;
        if img_kind != FeatureKind::ImageRegions {
            return Err(Error::DataInvariant {
                msg: format!("{} does not hold image-region features", manifest.images),
            });
        }
        let (cap_kind, captions) = load_features(&resolve(&manifest.captions))?;
        if cap_kind != FeatureKind::TextTokens {
            return Err(Error::DataInvariant {
                msg: format!("{} does not hold text-token features", manifest.captions),
            });
        }
        Dataset::new(images, captions, manifest.caption_to_image, manifest.splits)
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    images: String,
    captions: String,
    caption_to_image: Vec<usize>,
    splits: Splits,
}

fn index_captions(
    images: &[Mat],
    captions: &[Mat],
    caption_to_image: &[usize],
    splits: &Splits,
) -> Result<Vec<Vec<usize>>> {
    if caption_to_image.len() != captions.len() {
        return Err(Error::DataInvariant {
            msg: format!(
                "caption_to_image has {} entries for {} captions",
                caption_to_image.len(),
                captions.len()
            ),
        });
    }
    let mut by_image = vec![Vec::new(); images.len()];
    for (cap, &img) in caption_to_image.iter().enumerate() {
        if img >= images.len() {
            return Err(Error::DataInvariant {
                msg: format!("caption {cap} maps to missing image {img}"),
            });
        }
        by_image[img].push(cap);
    }
    for (img, caps) in by_image.iter().enumerate() {
        if caps.is_empty() {
            return Err(Error::DataInvariant {
                msg: format!("image {img} has no captions"),
            });
        }
    }
    let d1 = images.first().map_or(0, Mat::cols);
    for (i, m) in images.iter().enumerate() {
        if m.cols() != d1 {
            return Err(Error::DataInvariant {
                msg: format!("image {i} has feature dim {} but image 0 has {d1}", m.cols()),
            });
        }
    }
    let d2 = captions.first().map_or(0, Mat::cols);
    for (j, m) in captions.iter().enumerate() {
        if m.cols() != d2 {
            return Err(Error::DataInvariant {
                msg: format!(
                    "caption {j} has feature dim {} but caption 0 has {d2}",
                    m.cols()
                ),
            });
        }
    }
    let mut seen = vec![false; images.len()];
    for (name, ids) in [
        ("train", &splits.train),
        ("val", &splits.val),
        ("test", &splits.test),
    ] {
        for &img in ids {
            if img >= images.len() {
                return Err(Error::DataInvariant {
                    msg: format!("{name} split references missing image {img}"),
                });
            }
            if seen[img] {
                return Err(Error::DataInvariant {
                    msg: format!("image {img} appears in more than one split"),
                });
            }
            seen[img] = true;
        }
    }
    Ok(by_image)
}

/// Configuration for the synthetic paired-feature generator.
///
/// Each image draws a latent vector; region features are a fixed random
/// linear map of the latent plus noise, and each caption masks the latent
/// (keeping at least half the coordinates) before its own fixed map, so a
/// caption carries only part of its image's semantics. With `identity_maps`
/// the linear maps are identities and masks are disabled (requires
/// `d1 == d2 == latent_dim`), giving exact ground-truth pairs for oracles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_images: usize,
    pub captions_per_image: usize,
    pub latent_dim: usize,
    pub d1: usize,
    pub d2: usize,
    pub regions_per_image: usize,
    pub tokens_per_caption: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    pub identity_maps: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_images: 200,
            captions_per_image: 5,
            latent_dim: 16,
            d1: 32,
            d2: 24,
            regions_per_image: 8,
            tokens_per_caption: 8,
            noise_sigma: 0.1,
            seed: 42,
            identity_maps: false,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        let counts = [
            ("num_images", self.num_images),
            ("captions_per_image", self.captions_per_image),
            ("latent_dim", self.latent_dim),
            ("d1", self.d1),
            ("d2", self.d2),
            ("regions_per_image", self.regions_per_image),
            ("tokens_per_caption", self.tokens_per_caption),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidArg {
                    op: "generate_synthetic",
                    msg: format!("{name} must be at least 1"),
                });
            }
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::InvalidArg {
                op: "generate_synthetic",
                msg: format!("noise_sigma must be nonnegative, got {}", self.noise_sigma),
            });
        }
        if self.identity_maps && (self.d1 != self.latent_dim || self.d2 != self.latent_dim) {
            return Err(Error::InvalidArg {
                op: "generate_synthetic",
                msg: "identity_maps requires d1 == d2 == latent_dim".to_string(),
            });
        }
        Ok(())
    }
}

/// Deterministic synthetic dataset: a pure function of the config. Splits
/// are 80/10/10 by image index order; features are quantized to `f32`
/// precision to match the feature file format exactly.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = Rng::from_seed(cfg.seed);
    let latent = cfg.latent_dim;

    // Fixed maps, entries scaled so feature components stay near unit
    // variance regardless of latent size.
    let scale = 1.0 / (latent as f64).sqrt();
    let draw_map = |rng: &mut Rng, rows: usize| -> Mat {
        let mut m = Mat::zeros(rows, latent);
        for r in 0..rows {
            for c in 0..latent {
                m.set(r, c, rng.standard_normal() * scale);
            }
        }
        m
    };
    let (map_a, map_b) = if cfg.identity_maps {
        (Mat::identity(cfg.d1), Mat::identity(cfg.d2))
    } else {
        let a = draw_map(&mut rng, cfg.d1);
        let b = draw_map(&mut rng, cfg.d2);
        (a, b)
    };

    let quantize = |v: f64| -> f64 { v as f32 as f64 };
    let apply = |map: &Mat, z: &[f64]| -> Vec<f64> {
        (0..map.rows())
            .map(|r| crate::numerics::dot(map.row(r), z))
            .collect()
    };

    let mut images = Vec::with_capacity(cfg.num_images);
    let mut captions = Vec::with_capacity(cfg.num_images * cfg.captions_per_image);
    let mut caption_to_image = Vec::with_capacity(cfg.num_images * cfg.captions_per_image);
    let mut mask_scratch: Vec<usize> = (0..latent).collect();

    for i in 0..cfg.num_images {
        let z: Vec<f64> = (0..latent).map(|_| rng.standard_normal()).collect();

        let mut regions = Mat::zeros(cfg.regions_per_image, cfg.d1);
        for n in 0..cfg.regions_per_image {
            let base = apply(&map_a, &z);
            for (c, b) in base.iter().enumerate() {
                let noise = if cfg.noise_sigma > 0.0 {
                    rng.standard_normal() * cfg.noise_sigma
                } else {
                    0.0
                };
                regions.set(n, c, quantize(b + noise));
            }
        }
        images.push(regions);

        for _ in 0..cfg.captions_per_image {
            let mut masked = z.clone();
            if !cfg.identity_maps {
                // Keep a uniformly chosen count of at least half the
                // coordinates; the rest are zeroed.
                let min_keep = latent.div_ceil(2);
                let keep = min_keep + rng.below(latent - min_keep + 1);
                mask_scratch.iter_mut().enumerate().for_each(|(k, s)| *s = k);
                rng.shuffle(&mut mask_scratch);
                for &drop in &mask_scratch[keep..] {
                    masked[drop] = 0.0;
                }
            }
            let mut tokens = Mat::zeros(cfg.tokens_per_caption, cfg.d2);
            for m in 0..cfg.tokens_per_caption {
                let base = apply(&map_b, &masked);
                for (c, b) in base.iter().enumerate() {
                    let noise = if cfg.noise_sigma > 0.0 {
                        rng.standard_normal() * cfg.noise_sigma
                    } else {
                        0.0
                    };
                    tokens.set(m, c, quantize(b + noise));
                }
            }
            captions.push(tokens);
            caption_to_image.push(i);
        }
    }

    let n = cfg.num_images;
    let n_train = n * 8 / 10;
    let n_val = n / 10;
    let splits = Splits {
        train: (0..n_train).collect(),
        val: (n_train..n_train + n_val).collect(),
        test: (n_train + n_val..n).collect(),
    };
    Dataset::new(images, captions, caption_to_image, splits)
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source: e,
    }
}

/// Writes a feature file; all items must share one feature dimension.
pub fn save_features(path: &Path, kind: FeatureKind, items: &[Mat]) -> Result<()> {
    let dim = items.first().map_or(0, Mat::cols);
    for (i, m) in items.iter().enumerate() {
        if m.cols() != dim {
            return Err(Error::InvalidArg {
                op: "save_features",
                msg: format!("item {i} has dim {} but item 0 has {dim}", m.cols()),
            });
        }
    }
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = |bytes: &[u8]| -> Result<()> { w.write_all(bytes).map_err(|e| io_err(path, e)) };
    write(FEATURE_MAGIC)?;
    write(&FEATURE_VERSION.to_le_bytes())?;
    write(&[kind.to_byte()])?;
    write(&(items.len() as u64).to_le_bytes())?;
    write(&(dim as u32).to_le_bytes())?;
    for m in items {
        write(&(m.rows() as u32).to_le_bytes())?;
        for &v in m.data() {
            write(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush().map_err(|e| io_err(path, e))
}

struct OffsetReader<R> {
    inner: R,
    offset: u64,
    path: String,
}

impl<R: Read> OffsetReader<R> {
    fn take(&mut self, buf: &mut [u8]) -> Result<()> {
        let at = self.offset;
        self.inner.read_exact(buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::Format {
                    path: self.path.clone(),
                    offset: at,
                    msg: format!("truncated file, needed {} more bytes", buf.len()),
                }
            } else {
                Error::Io {
                    path: self.path.clone(),
                    source: e,
                }
            }
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u8(&mut self) -> Result<u8> {
        let mut b = [0u8; 1];
        self.take(&mut b)?;
        Ok(b[0])
    }

    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.take(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.take(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    fn bad(&self, offset: u64, msg: String) -> Error {
        Error::Format {
            path: self.path.clone(),
            offset,
            msg,
        }
    }
}

/// Reads a feature file written by [`save_features`]; the round trip is
/// bitwise exact.
pub fn load_features(path: &Path) -> Result<(FeatureKind, Vec<Mat>)> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = OffsetReader {
        inner: BufReader::new(file),
        offset: 0,
        path: path.display().to_string(),
    };
    let mut magic = [0u8; 4];
    r.take(&mut magic)?;
    if &magic != FEATURE_MAGIC {
        return Err(r.bad(0, format!("bad magic {magic:02x?}, expected \"UAMV\"")));
    }
    let version_at = r.offset;
    let version = r.u32()?;
    if version != FEATURE_VERSION {
        return Err(r.bad(version_at, format!("unsupported version {version}")));
    }
    let kind_at = r.offset;
    let kind_byte = r.u8()?;
    let kind = FeatureKind::from_byte(kind_byte)
        .ok_or_else(|| r.bad(kind_at, format!("unknown feature kind {kind_byte}")))?;
    let count = r.u64()? as usize;
    let dim = r.u32()? as usize;
    let mut items = Vec::with_capacity(count);
    for _ in 0..count {
        let n_vectors = r.u32()? as usize;
        let mut data = Vec::with_capacity(n_vectors * dim);
        let mut buf = [0u8; 4];
        for _ in 0..n_vectors * dim {
            r.take(&mut buf)?;
            data.push(f32::from_le_bytes(buf) as f64);
        }
        items.push(Mat::new(n_vectors, dim, data)?);
    }
    Ok((kind, items))
}

/// One training batch: paired (image index, caption index) samples, one
/// caption per selected image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub pairs: Vec<(usize, usize)>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Deterministic epoch batching: shuffles the split's images as a function
/// of `(seed, epoch)`, samples one caption per image, and yields only full
/// batches (a short remainder is dropped so every similarity matrix stays
/// square with one positive per row and column).
pub fn batches(
    dataset: &Dataset,
    split: Split,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<Batch>> {
    if batch_size < 2 {
        return Err(Error::InvalidArg {
            op: "batches",
            msg: format!("batch_size must be at least 2, got {batch_size}"),
        });
    }
    let mut order: Vec<usize> = dataset.splits.get(split).to_vec();
    let mut rng = Rng::from_seed_stream(seed, epoch as u64);
    rng.shuffle(&mut order);
    let mut out = Vec::new();
    for chunk in order.chunks(batch_size) {
        if chunk.len() < batch_size {
            break;
        }
        let pairs = chunk
            .iter()
            .map(|&img| {
                let caps = dataset.captions_of(img);
                (img, caps[rng.below(caps.len())])
            })
            .collect();
        out.push(Batch { pairs });
    }
    Ok(out)
}
