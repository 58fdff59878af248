//! Desk-scale datasets: a deterministic synthetic image generator, an IDX
//! container reader/writer, and stratified subsampling.

use std::io::Write;
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub enum Provenance {
    Synthetic { seed: u64, difficulty: f64 },
    Idx { images: String, labels: String },
}

/// Labeled image set; inputs are CxHxW tensors with values in [0,1].
#[derive(Clone, Debug)]
pub struct Dataset {
    pub inputs: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    fn validate(&self) -> Result<()> {
        if self.inputs.len() != self.labels.len() {
            return Err(Error::InvalidArgument("input/label count mismatch".into()));
        }
        let mut seen = vec![false; self.class_count];
        for &l in &self.labels {
            if l >= self.class_count {
                return Err(Error::InvalidArgument(format!(
                    "label {l} out of range 0..{}",
                    self.class_count
                )));
            }
            seen[l] = true;
        }
        if seen.iter().any(|&s| !s) {
            return Err(Error::InvalidArgument("every class must appear at least once".into()));
        }
        Ok(())
    }
}

/// Render one image for class `k`: a strong shared plaid background with a
/// faint class-specific oriented grating superimposed. Class identity lives
/// only in the grating's orientation (and, for k >= 8, its frequency), so
/// the classifier has to suppress the background and pick up the cue.
/// `difficulty` scales phase jitter (saturating at full randomization) and
/// additive Gaussian noise; at zero every class collapses to one image.
fn render_pattern(
    k: usize,
    class_count: usize,
    shape: [usize; 3],
    rng: &mut ChaCha8Rng,
    difficulty: f64,
) -> Vec<f32> {
    let [c, h, w] = shape;
    let tier = (k / 8) as f64;
    let t = std::f64::consts::TAU;
    // Phases live on the unit circle, so jitter saturates at difficulty 1.
    let jitter = |rng: &mut ChaCha8Rng| difficulty.min(1.0) * rng.gen_range(0.0..1.0);
    let p1 = jitter(rng);
    let p2 = jitter(rng);
    let psi = jitter(rng);
    // Up to eight orientation families spread over the half-circle; with
    // fewer classes the spread widens to keep neighbors distinguishable.
    let families = class_count.min(8);
    let theta = (k % families) as f64 * std::f64::consts::PI / families as f64;
    let (cos_t, sin_t) = (theta.cos(), theta.sin());
    let cue_freq = 5.0 + 2.0 * tier;
    let noise_sigma = 0.15 * difficulty;

    let mut data = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        let ch_shift = ch as f64 * 0.25;
        for y in 0..h {
            for x in 0..w {
                let u = (x as f64 + 0.5) / w as f64;
                let v = (y as f64 + 0.5) / h as f64;
                let bg = 0.35 * (t * (3.0 * u + p1)).sin() * (t * (3.0 * v + p2)).sin();
                let cue =
                    0.15 * (t * (cue_freq * (u * cos_t + v * sin_t) + psi + ch_shift)).sin();
                let noise: f64 = if noise_sigma > 0.0 {
                    noise_sigma * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
                } else {
                    0.0
                };
                let value = 0.5 + bg + cue + noise;
                data.push(value.clamp(0.0, 1.0) as f32);
            }
        }
    }
    data
}

/// Procedurally generated class-conditional images, byte-deterministic for a
/// given argument tuple. `difficulty` scales position/scale/noise jitter;
/// zero yields identical, fully separable examples per class.
pub fn gen_synthetic_dataset(
    class_count: usize,
    per_class: usize,
    shape: [usize; 3],
    difficulty: f64,
    seed: u64,
) -> Result<Dataset> {
    if class_count < 2 || per_class < 2 {
        return Err(Error::InvalidArgument("need K >= 2 classes and n >= 2 examples per class".into()));
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::InvalidArgument(format!("degenerate image shape {shape:?}")));
    }
    if difficulty < 0.0 {
        return Err(Error::InvalidArgument("difficulty must be non-negative".into()));
    }
    let mut inputs = Vec::with_capacity(class_count * per_class);
    let mut labels = Vec::with_capacity(class_count * per_class);
    for k in 0..class_count {
        for i in 0..per_class {
            // Independent stream per example so the set is order-stable.
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed ^ (k as u64).wrapping_mul(0x9e3779b97f4a7c15) ^ i as u64);
            let data = render_pattern(k, class_count, shape, &mut rng, difficulty);
            inputs.push(Tensor::new(shape.to_vec(), data)?);
            labels.push(k);
        }
    }
    let ds = Dataset {
        inputs,
        labels,
        class_count,
        provenance: Provenance::Synthetic { seed, difficulty },
    };
    ds.validate()?;
    Ok(ds)
}

fn read_idx_payload(path: &Path, expect_rank: Option<u8>) -> Result<(Vec<u32>, Vec<u8>)> {
    let bytes = std::fs::read(path)?;
    let mut cur = std::io::Cursor::new(&bytes);
    let zeros = cur.read_u16::<BigEndian>().map_err(|_| Error::NotAnIdxFile("truncated header".into()))?;
    let dtype = cur.read_u8().map_err(|_| Error::NotAnIdxFile("truncated header".into()))?;
    let rank = cur.read_u8().map_err(|_| Error::NotAnIdxFile("truncated header".into()))?;
    if zeros != 0 || dtype != 0x08 {
        return Err(Error::NotAnIdxFile(format!("bad magic in {}", path.display())));
    }
    if let Some(expected) = expect_rank {
        if rank != expected {
            return Err(Error::NotAnIdxFile(format!(
                "expected rank {expected}, got {rank} in {}",
                path.display()
            )));
        }
    }
    let mut dims = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        dims.push(
            cur.read_u32::<BigEndian>()
                .map_err(|_| Error::CorruptIdx("truncated dimension header".into()))?,
        );
    }
    let expected: usize = dims.iter().map(|&d| d as usize).product();
    let payload = &bytes[cur.position() as usize..];
    if payload.len() != expected {
        return Err(Error::CorruptIdx(format!(
            "payload is {} bytes, dimensions require {expected}",
            payload.len()
        )));
    }
    Ok((dims, payload.to_vec()))
}

/// Parse an IDX image/label file pair. Pixel bytes are scaled to [0,1].
pub fn load_idx<P: AsRef<Path>>(images_path: P, labels_path: P) -> Result<Dataset> {
    let (img_dims, img_payload) = read_idx_payload(images_path.as_ref(), None)?;
    let (label_dims, label_payload) = read_idx_payload(labels_path.as_ref(), Some(1))?;
    if img_dims.len() != 3 && img_dims.len() != 4 {
        return Err(Error::NotAnIdxFile(format!(
            "image file must have rank 3 (n,h,w) or 4 (n,c,h,w), got {}",
            img_dims.len()
        )));
    }
    let n = img_dims[0] as usize;
    if label_dims[0] as usize != n {
        return Err(Error::InvalidArgument(format!(
            "{n} images but {} labels",
            label_dims[0]
        )));
    }
    let shape: Vec<usize> = if img_dims.len() == 3 {
        vec![1, img_dims[1] as usize, img_dims[2] as usize]
    } else {
        img_dims[1..].iter().map(|&d| d as usize).collect()
    };
    let per_image: usize = shape.iter().product();
    let inputs: Vec<Tensor> = (0..n)
        .map(|i| {
            let data: Vec<f32> = img_payload[i * per_image..(i + 1) * per_image]
                .iter()
                .map(|&b| b as f32 / 255.0)
                .collect();
            Tensor::new(shape.clone(), data)
        })
        .collect::<Result<_>>()?;
    let labels: Vec<usize> = label_payload.iter().map(|&b| b as usize).collect();
    let class_count = labels.iter().max().map_or(0, |&m| m + 1);
    let ds = Dataset {
        inputs,
        labels,
        class_count,
        provenance: Provenance::Idx {
            images: images_path.as_ref().display().to_string(),
            labels: labels_path.as_ref().display().to_string(),
        },
    };
    ds.validate()?;
    Ok(ds)
}

/// Write a dataset as an IDX image/label file pair (rank 4 images, bytes
/// rounded from the [0,1] floats).
pub fn save_idx<P: AsRef<Path>>(dataset: &Dataset, images_path: P, labels_path: P) -> Result<()> {
    dataset.validate()?;
    let shape = dataset.inputs[0].shape().to_vec();
    let mut img = Vec::new();
    img.write_u16::<BigEndian>(0)?;
    img.write_u8(0x08)?;
    img.write_u8(4)?;
    img.write_u32::<BigEndian>(dataset.len() as u32)?;
    for &d in &shape {
        img.write_u32::<BigEndian>(d as u32)?;
    }
    for input in &dataset.inputs {
        for &v in input.data() {
            img.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    std::fs::File::create(images_path)?.write_all(&img)?;

    let mut lab = Vec::new();
    lab.write_u16::<BigEndian>(0)?;
    lab.write_u8(0x08)?;
    lab.write_u8(1)?;
    lab.write_u32::<BigEndian>(dataset.len() as u32)?;
    for &l in &dataset.labels {
        lab.push(l as u8);
    }
    std::fs::File::create(labels_path)?.write_all(&lab)?;
    Ok(())
}

/// Per-class subsample of ceil(fraction * n_k) examples. Subsets are nested
/// across increasing fractions for a fixed seed: each class's examples are
/// shuffled once, then prefixes taken.
pub fn stratified_fraction(dataset: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("fraction must lie in (0,1], got {fraction}")));
    }
    let mut picked = Vec::new();
    for k in 0..dataset.class_count {
        let mut class_idx: Vec<usize> =
            (0..dataset.len()).filter(|&i| dataset.labels[i] == k).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (k as u64).wrapping_mul(0x517cc1b727220a95));
        // Fisher-Yates; the permutation depends only on (seed, k, n_k).
        for i in (1..class_idx.len()).rev() {
            class_idx.swap(i, rng.gen_range(0..=i));
        }
        let take = ((fraction * class_idx.len() as f64).ceil() as usize).max(1);
        picked.extend_from_slice(&class_idx[..take.min(class_idx.len())]);
    }
    picked.sort_unstable();
    let ds = Dataset {
        inputs: picked.iter().map(|&i| dataset.inputs[i].clone()).collect(),
        labels: picked.iter().map(|&i| dataset.labels[i]).collect(),
        class_count: dataset.class_count,
        provenance: dataset.provenance.clone(),
    };
    ds.validate()?;
    Ok(ds)
}
