//! Labeled image sets, the synthetic toy-shapes generator and the `FMTR`
//! on-disk format.
//!
//! File layout (little-endian): `"FMTR"`, u32 version, u32 count, u32 K,
//! u32 H, u32 W, u32 C, then per record a u32 label followed by `H*W*C`
//! f64 pixels in `[H, W, C]` order.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream_rng;
use crate::tensor::{read_exact_counted, read_u32, Tensor};

pub const DATASET_MAGIC: &[u8; 4] = b"FMTR";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Images stored contiguously as `[N, H, W, C]` with one label each.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    image_shape: [usize; 3],
    num_classes: usize,
    pixels: Vec<f64>,
    labels: Vec<usize>,
    pub split: Split,
}

impl LabeledDataset {
    pub fn new(
        image_shape: [usize; 3],
        num_classes: usize,
        pixels: Vec<f64>,
        labels: Vec<usize>,
        split: Split,
    ) -> Result<Self> {
        let per = image_shape.iter().product::<usize>();
        if per == 0 || num_classes == 0 {
            return Err(Error::invalid("dataset needs nonzero image size and class count"));
        }
        if pixels.len() != per * labels.len() {
            return Err(Error::invalid(format!(
                "{} pixels for {} images of {per}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: num_classes,
            });
        }
        Ok(LabeledDataset {
            image_shape,
            num_classes,
            pixels,
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

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }

    fn pixels_per_image(&self) -> usize {
        self.image_shape.iter().product()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image_data(&self, i: usize) -> &[f64] {
        let per = self.pixels_per_image();
        &self.pixels[i * per..(i + 1) * per]
    }

    pub fn image(&self, i: usize) -> Tensor {
        Tensor::new(self.image_shape.to_vec(), self.image_data(i).to_vec()).expect("stored image shape")
    }

    /// Stacks the selected images into `[B, H, W, C]`.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        if indices.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let per = self.pixels_per_image();
        let mut data = Vec::with_capacity(per * indices.len());
        for &i in indices {
            data.extend_from_slice(self.image_data(i));
        }
        let [h, w, c] = self.image_shape;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((Tensor::new(vec![indices.len(), h, w, c], data)?, labels))
    }

    /// Dataset restricted to `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        let mut pixels = Vec::with_capacity(indices.len() * self.pixels_per_image());
        for &i in indices {
            pixels.extend_from_slice(self.image_data(i));
        }
        LabeledDataset {
            image_shape: self.image_shape,
            num_classes: self.num_classes,
            pixels,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            split: self.split,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        self.labels.iter().for_each(|&y| c[y] += 1);
        c
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(DATASET_MAGIC)?;
        let [h, wd, c] = self.image_shape;
        for v in [DATASET_VERSION, self.len() as u32, self.num_classes as u32, h as u32, wd as u32, c as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        for i in 0..self.len() {
            w.write_all(&(self.labels[i] as u32).to_le_bytes())?;
            for v in self.image_data(i) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R, split: Split) -> Result<Self> {
        let mut header = [0u8; 28];
        let mut got = 0;
        while got < header.len() {
            match r.read(&mut header[got..])? {
                0 => break,
                n => got += n,
            }
        }
        if got < header.len() {
            return Err(Error::MalformedHeader(format!("{got} of 28 header bytes present")));
        }
        if &header[..4] != DATASET_MAGIC {
            return Err(Error::MalformedHeader("bad magic, expected FMTR".into()));
        }
        let field = |i: usize| u32::from_le_bytes(header[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
        let (version, count, k) = (field(0), field(1) as usize, field(2) as usize);
        let shape = [field(3) as usize, field(4) as usize, field(5) as usize];
        if version != DATASET_VERSION {
            return Err(Error::MalformedHeader(format!("unsupported version {version}")));
        }
        if k == 0 || shape.contains(&0) {
            return Err(Error::MalformedHeader(format!("degenerate header K={k} shape={shape:?}")));
        }
        let per: usize = shape.iter().product();
        let mut labels = Vec::with_capacity(count);
        let mut pixels = Vec::with_capacity(count * per);
        let mut buf = vec![0u8; per * 8];
        for _ in 0..count {
            let y = read_u32(r)? as usize;
            read_exact_counted(r, &mut buf)?;
            if y >= k {
                return Err(Error::LabelOutOfRange { label: y, classes: k });
            }
            labels.push(y);
            pixels.extend(buf.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))));
        }
        LabeledDataset::new(shape, k, pixels, labels, split)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let write = || -> Result<()> {
            let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
            self.write_to(&mut f)?;
            f.flush()?;
            Ok(())
        };
        write().map_err(|e| e.at_path(path))
    }

    pub fn load(path: &Path, split: Split) -> Result<Self> {
        let read = || -> Result<Self> {
            let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
            Self::read_from(&mut f, split)
        };
        read().map_err(|e| e.at_path(path))
    }
}

/// Reads a dataset file, tagging it as a training split.
pub fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    LabeledDataset::load(path, Split::Train)
}

/// Foreground block side, in patches.
pub const FOREGROUND_PATCHES: usize = 2;

/// Number of distinct class templates.
pub const NUM_TEMPLATES: usize = 10;

/// Foreground pattern for class `k` on an `n x n` block, values in {0, 1}.
fn template(k: usize, n: usize) -> Vec<f64> {
    let mid = n / 2;
    let on = |r: usize, c: usize| -> bool {
        let edge = r == 0 || c == 0 || r == n - 1 || c == n - 1;
        match k {
            0 => r + 1 == mid || r == mid,               // horizontal bar
            1 => c + 1 == mid || c == mid,               // vertical bar
            2 => r == c || r == c + 1,                   // diagonal
            3 => r + c == n - 1 || r + c == n,           // anti-diagonal
            4 => (r + 1 == mid || r == mid) || (c + 1 == mid || c == mid), // plus
            5 => edge,                                   // ring
            6 => r == 0 || c == 0 || r == 1 || c == 1,   // corner
            7 => r == c || r + c == n - 1,               // X
            8 => (2..n - 2).contains(&r) && (2..n - 2).contains(&c), // filled square
            _ => (r / 2 + c / 2) % 2 == 0,               // checker
        }
    };
    (0..n * n).map(|i| f64::from(u8::from(on(i / n, i % n)))).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyShapesSpec {
    pub num_classes: usize,
    pub n_per_class: usize,
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub noise_std: f64,
    /// Foreground intensity.
    pub amplitude: f64,
    /// Train fraction of the per-class shuffle.
    pub train_fraction: f64,
}

impl Default for ToyShapesSpec {
    fn default() -> Self {
        ToyShapesSpec {
            num_classes: 4,
            n_per_class: 250,
            image_size: 16,
            channels: 1,
            patch_size: 4,
            noise_std: 0.3,
            amplitude: 1.0,
            train_fraction: 0.8,
        }
    }
}

impl ToyShapesSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_classes > NUM_TEMPLATES {
            return Err(Error::Config(format!(
                "toy shapes supports 1..={NUM_TEMPLATES} classes, got {}",
                self.num_classes
            )));
        }
        if self.n_per_class == 0 || self.channels == 0 || self.patch_size == 0 {
            return Err(Error::Config("toy shapes sizes must be positive".into()));
        }
        if self.image_size % self.patch_size != 0 || self.image_size / self.patch_size < FOREGROUND_PATCHES {
            return Err(Error::Config(format!(
                "image size {} must be a multiple of patch size {} with room for a {FOREGROUND_PATCHES}x{FOREGROUND_PATCHES} patch block",
                self.image_size, self.patch_size
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!("noise_std must be >= 0, got {}", self.noise_std)));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config("train_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Generates `(train, test)`. Each image holds its class template on a
/// patch-aligned block at a random block position; every pixel outside the
/// block is `N(0, noise_std^2)`.
pub fn generate_toyshapes(spec: &ToyShapesSpec, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    spec.validate()?;
    let (s, c, p) = (spec.image_size, spec.channels, spec.patch_size);
    let n = FOREGROUND_PATCHES * p;
    let slots = s / p - FOREGROUND_PATCHES + 1;
    let per = s * s * c;
    let mut rng = stream_rng(seed, "toyshapes", 0);
    let templates: Vec<Vec<f64>> = (0..spec.num_classes).map(|k| template(k, n)).collect();

    let make = |label: usize, rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
        let (by, bx) = (rng.random_range(0..slots) * p, rng.random_range(0..slots) * p);
        let mut img = vec![0.0; per];
        for r in 0..s {
            for col in 0..s {
                let inside = (by..by + n).contains(&r) && (bx..bx + n).contains(&col);
                for ch in 0..c {
                    img[(r * s + col) * c + ch] = if inside {
                        spec.amplitude * templates[label][(r - by) * n + (col - bx)]
                    } else if spec.noise_std > 0.0 {
                        let z: f64 = StandardNormal.sample(rng);
                        spec.noise_std * z
                    } else {
                        0.0
                    };
                }
            }
        }
        img
    };

    let n_train = ((spec.n_per_class as f64) * spec.train_fraction).round() as usize;
    let n_train = n_train.clamp(1, spec.n_per_class.saturating_sub(1).max(1));
    let (mut tr_px, mut tr_y, mut te_px, mut te_y) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for label in 0..spec.num_classes {
        for i in 0..spec.n_per_class {
            let img = make(label, &mut rng);
            if i < n_train {
                tr_px.extend(img);
                tr_y.push(label);
            } else {
                te_px.extend(img);
                te_y.push(label);
            }
        }
    }
    let shape = [s, s, c];
    let train = shuffled(LabeledDataset::new(shape, spec.num_classes, tr_px, tr_y, Split::Train)?, &mut rng);
    let test = LabeledDataset::new(shape, spec.num_classes, te_px, te_y, Split::Test)?;
    if test.is_empty() {
        return Err(Error::Config("toy shapes produced an empty test split".into()));
    }
    Ok((train, test))
}

fn shuffled<R: Rng>(ds: LabeledDataset, rng: &mut R) -> LabeledDataset {
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(rng);
    ds.subset(&order)
}
