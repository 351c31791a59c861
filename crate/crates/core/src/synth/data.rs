use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Batch;
use crate::rng::Lcg64;
use crate::tensor::{LabelMap, Tensor};

pub const DATASET_MAGIC: &[u8; 4] = b"AFDS";
pub const DATASET_VERSION: u32 = 1;
/// Intensity of a pixel whose class is hidden from a modality.
pub const HIDDEN_LEVEL: f64 = 0.5;

const TRAIN_STREAM: u64 = 0x7472_6169_0000_0000;
const TEST_STREAM: u64 = 0x7465_7374_0000_0000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub modalities: usize,
    /// Voronoi seed points per image.
    pub regions: usize,
    pub noise_sigma: f64,
    /// `visibility[k]` lists the 0-based modalities that see class `k`.
    /// Empty means round robin: class `k` is visible in modality
    /// `(k + 1) mod S`.
    pub visibility: Vec<Vec<usize>>,
    /// Constant added to every pixel of modality `s`; empty means zeros.
    pub modality_offsets: Vec<f64>,
    pub train_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            classes: 5,
            modalities: 2,
            regions: 12,
            noise_sigma: 0.05,
            visibility: Vec::new(),
            modality_offsets: Vec::new(),
            train_size: 512,
            test_size: 128,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// `visible[s][k]`: whether modality `s` carries the level of class `k`.
    pub fn visibility_matrix(&self) -> Vec<Vec<bool>> {
        let (s_count, k_count) = (self.modalities, self.classes);
        let mut m = vec![vec![false; k_count]; s_count];
        if self.visibility.is_empty() {
            for k in 0..k_count {
                m[(k + 1) % s_count][k] = true;
            }
        } else {
            for (k, mods) in self.visibility.iter().enumerate() {
                for &s in mods {
                    if s < s_count && k < k_count {
                        m[s][k] = true;
                    }
                }
            }
        }
        m
    }

    pub fn offset(&self, s: usize) -> f64 {
        self.modality_offsets.get(s).copied().unwrap_or(0.0)
    }

    /// Noise-free intensity of class `k` in modality `s`.
    pub fn level(&self, s: usize, k: usize, visible: &[Vec<bool>]) -> f64 {
        let base = if visible[s][k] {
            (k + 1) as f64 / self.classes as f64
        } else {
            HIDDEN_LEVEL
        };
        base + self.offset(s)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.height == 0 || self.width == 0 {
            return bad("image size must be >= 1".into());
        }
        if !(2..=255).contains(&self.classes) {
            return bad(format!("classes must be in [2, 255], got {}", self.classes));
        }
        if self.modalities == 0 {
            return bad("modalities must be >= 1".into());
        }
        if self.regions == 0 || self.regions > self.height * self.width {
            return bad(format!(
                "region count {} must be in [1, H*W = {}]",
                self.regions,
                self.height * self.width
            ));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return bad("noise sigma must be finite and >= 0".into());
        }
        if !self.visibility.is_empty() && self.visibility.len() != self.classes {
            return bad(format!(
                "visibility lists {} classes, expected {}",
                self.visibility.len(),
                self.classes
            ));
        }
        for mods in &self.visibility {
            if let Some(&s) = mods.iter().find(|&&s| s >= self.modalities) {
                return bad(format!("visibility names modality {s} of {}", self.modalities));
            }
        }
        let vis = self.visibility_matrix();
        if let Some(k) = (0..self.classes).find(|&k| !(0..self.modalities).any(|s| vis[s][k])) {
            return bad(format!("class {k} is not visible in any modality"));
        }
        if !self.modality_offsets.is_empty() && self.modality_offsets.len() != self.modalities {
            return bad("modality_offsets must have one entry per modality".into());
        }
        Ok(())
    }

    fn stream(&self, tag: u64) -> u64 {
        self.seed.wrapping_mul(crate::rng::LCG_MULTIPLIER) ^ tag
    }

    pub fn train_stream(&self) -> u64 {
        self.stream(TRAIN_STREAM)
    }

    pub fn test_stream(&self) -> u64 {
        self.stream(TEST_STREAM)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// One `1 x 1 x H x W` tensor per modality.
    pub inputs: Vec<Tensor>,
    pub labels: LabelMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub modalities: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Stacks the given samples into one batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        if indices.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let mut inputs = Vec::with_capacity(self.modalities);
        for s in 0..self.modalities {
            let parts: Vec<&Tensor> = indices.iter().map(|&i| &self.samples[i].inputs[s]).collect();
            inputs.push(Tensor::stack_batch(&parts)?);
        }
        let labels: Vec<&LabelMap> = indices.iter().map(|&i| &self.samples[i].labels).collect();
        Ok(Batch {
            inputs,
            labels: LabelMap::stack(&labels)?,
        })
    }

    /// Keeps only modality `s`, for unimodal baselines.
    pub fn select_modality(&self, s: usize) -> Result<Dataset> {
        if s >= self.modalities {
            return Err(Error::index("select_modality", format!("modality {s} of {}", self.modalities)));
        }
        Ok(Dataset {
            modalities: 1,
            samples: self
                .samples
                .iter()
                .map(|x| Sample {
                    inputs: vec![x.inputs[s].clone()],
                    labels: x.labels.clone(),
                })
                .collect(),
            ..*self
        })
    }

    pub fn checksum(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let mut eat = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        for smp in &self.samples {
            for t in &smp.inputs {
                eat(t.checksum());
            }
            for &l in &smp.labels.data {
                eat(l as u64);
            }
        }
        h
    }
}

/// Draws one sample from the stream item `rng`.
pub fn generate_sample(cfg: &SynthConfig, visible: &[Vec<bool>], rng: &mut Lcg64) -> Sample {
    let (h, w) = (cfg.height, cfg.width);
    let seeds: Vec<(f64, f64, u8)> = (0..cfg.regions)
        .map(|_| {
            let y = rng.uniform(0.0, h as f64);
            let x = rng.uniform(0.0, w as f64);
            (y, x, rng.below(cfg.classes) as u8)
        })
        .collect();
    let mut labels = vec![0u8; h * w];
    for yy in 0..h {
        for xx in 0..w {
            let (py, px) = (yy as f64 + 0.5, xx as f64 + 0.5);
            let mut best = (f64::INFINITY, 0u8);
            for &(sy, sx, k) in &seeds {
                let d = (py - sy).powi(2) + (px - sx).powi(2);
                if d < best.0 {
                    best = (d, k);
                }
            }
            labels[yy * w + xx] = best.1;
        }
    }
    let inputs = (0..cfg.modalities)
        .map(|s| {
            let data = labels
                .iter()
                .map(|&k| cfg.level(s, k as usize, visible) + cfg.noise_sigma * rng.normal())
                .collect();
            Tensor::from_parts([1, 1, h, w], data)
        })
        .collect();
    Sample {
        inputs,
        labels: LabelMap {
            n: 1,
            h,
            w,
            data: labels,
        },
    }
}

fn generate_split(cfg: &SynthConfig, stream: u64, count: usize) -> Dataset {
    let visible = cfg.visibility_matrix();
    let samples = (0..count)
        .map(|i| generate_sample(cfg, &visible, &mut Lcg64::derived(stream, i as u64)))
        .collect();
    Dataset {
        height: cfg.height,
        width: cfg.width,
        classes: cfg.classes,
        modalities: cfg.modalities,
        samples,
    }
}

/// Train and test splits; sample `i` of a split is drawn from the
/// generator seeded with `stream ^ i`.
pub fn generate(cfg: &SynthConfig) -> Result<(Dataset, Dataset)> {
    cfg.validate()?;
    Ok((
        generate_split(cfg, cfg.train_stream(), cfg.train_size),
        generate_split(cfg, cfg.test_stream(), cfg.test_size),
    ))
}

/// Binary layout, all integers little-endian:
///
/// ```text
/// magic "AFDS" | u32 version | u32 H | u32 W | u32 K | u32 S | u32 count
/// per sample: S * H * W f32 inputs (modality-major, row-major), H * W u8 labels
/// ```
pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(DATASET_MAGIC)?;
    for v in [
        DATASET_VERSION,
        ds.height as u32,
        ds.width as u32,
        ds.classes as u32,
        ds.modalities as u32,
        ds.samples.len() as u32,
    ] {
        f.write_all(&v.to_le_bytes())?;
    }
    for smp in &ds.samples {
        for t in &smp.inputs {
            for &v in t.data() {
                f.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        f.write_all(&smp.labels.data)?;
    }
    f.flush()?;
    Ok(())
}

/// Reads a file written by [`write_dataset`]. Inputs come back rounded
/// to f32 precision.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mut f = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != DATASET_MAGIC {
        return Err(Error::Format(format!("bad dataset magic {magic:?}")));
    }
    let mut header = [0u32; 6];
    for v in &mut header {
        let mut b = [0u8; 4];
        f.read_exact(&mut b)?;
        *v = u32::from_le_bytes(b);
    }
    let [version, h, w, k, s, count] = header.map(|v| v as usize);
    if version != DATASET_VERSION as usize {
        return Err(Error::Format(format!("dataset version {version} not supported")));
    }
    let mut samples = Vec::with_capacity(count);
    let mut buf = vec![0u8; h * w * 4];
    for _ in 0..count {
        let mut inputs = Vec::with_capacity(s);
        for _ in 0..s {
            f.read_exact(&mut buf)?;
            let data = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            inputs.push(Tensor::from_parts([1, 1, h, w], data));
        }
        let mut labels = vec![0u8; h * w];
        f.read_exact(&mut labels)?;
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= k) {
            return Err(Error::Label {
                label: bad as u32,
                classes: k,
            });
        }
        samples.push(Sample {
            inputs,
            labels: LabelMap::new(1, h, w, labels)?,
        });
    }
    Ok(Dataset {
        height: h,
        width: w,
        classes: k,
        modalities: s,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            height: 8,
            width: 8,
            regions: 5,
            train_size: 6,
            test_size: 3,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.0.checksum(), b.0.checksum());
        let c = generate(&SynthConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.0.checksum(), c.0.checksum());
    }

    #[test]
    fn round_robin_visibility() {
        let v = SynthConfig::default().visibility_matrix();
        // odd classes in the first modality, even classes in the second
        assert_eq!(v[0], vec![false, true, false, true, false]);
        assert_eq!(v[1], vec![true, false, true, false, true]);
    }

    #[test]
    fn hidden_classes_read_half() {
        let cfg = SynthConfig {
            noise_sigma: 0.0,
            ..small()
        };
        let (train, _) = generate(&cfg).unwrap();
        for smp in &train.samples {
            for (i, &k) in smp.labels.data.iter().enumerate() {
                if k % 2 == 0 {
                    assert_eq!(smp.inputs[0].data()[i], 0.5);
                } else {
                    assert_eq!(smp.inputs[0].data()[i], (k + 1) as f64 / 5.0);
                }
            }
        }
    }

    #[test]
    fn validation() {
        assert!(SynthConfig { regions: 65, ..small() }.validate().is_err());
        assert!(SynthConfig {
            visibility: vec![vec![0], vec![0], vec![], vec![1], vec![1]],
            ..small()
        }
        .validate()
        .is_err());
        assert!(SynthConfig {
            visibility: vec![vec![0], vec![2], vec![0], vec![1], vec![1]],
            ..small()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn streams_are_disjoint() {
        let cfg = SynthConfig::default();
        let (tr, te) = (cfg.train_stream(), cfg.test_stream());
        for i in 0..cfg.train_size as u64 {
            for j in 0..cfg.test_size as u64 {
                assert_ne!(tr ^ i, te ^ j);
            }
        }
    }
}
