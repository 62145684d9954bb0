//! Long-tailed dataset construction: exponential imbalance profiles, a
//! part-compositional synthetic image generator, many/medium/few splits,
//! class-balanced resampling, and directory persistence.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Class-count thresholds for the many/medium/few evaluation splits.
pub const MANY_MIN_EXCLUSIVE: usize = 100;
pub const FEW_MAX_EXCLUSIVE: usize = 20;

/// Generation recipe for a long-tailed dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LongTailSpec {
    pub num_classes: usize,
    /// Sample count of the largest class.
    pub n_max: usize,
    /// Ratio of largest to smallest class count.
    pub imbalance_factor: f64,
    pub seed: u64,
}

impl LongTailSpec {
    fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::InvalidArgument("num_classes must be >= 1".to_string()));
        }
        if self.n_max == 0 {
            return Err(Error::InvalidArgument("n_max must be >= 1".to_string()));
        }
        if !(self.imbalance_factor.is_finite() && self.imbalance_factor >= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "imbalance_factor must be finite and >= 1, got {}",
                self.imbalance_factor
            )));
        }
        Ok(())
    }
}

/// Per-class sample counts under exponential decay:
/// `n_c = round(n_max * beta^(-c/(C-1)))`, so the first class holds `n_max`
/// samples and the last `round(n_max / beta)`.
pub fn class_counts(spec: &LongTailSpec) -> Result<Vec<usize>> {
    spec.validate()?;
    let c_total = spec.num_classes;
    if c_total == 1 {
        return Ok(vec![spec.n_max]);
    }
    let counts = (0..c_total)
        .map(|c| {
            let exponent = -(c as f64) / (c_total as f64 - 1.0);
            (spec.n_max as f64 * spec.imbalance_factor.powf(exponent)).round() as usize
        })
        .collect();
    Ok(counts)
}

/// Partition of class indices by training-set frequency.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub many: Vec<usize>,
    pub medium: Vec<usize>,
    pub few: Vec<usize>,
}

/// Classify each class as many (>100 samples), medium (20..=100), or
/// few (<20).
pub fn split_classes(counts: &[usize]) -> Splits {
    let mut splits = Splits { many: Vec::new(), medium: Vec::new(), few: Vec::new() };
    for (c, &n) in counts.iter().enumerate() {
        if n > MANY_MIN_EXCLUSIVE {
            splits.many.push(c);
        } else if n >= FEW_MAX_EXCLUSIVE {
            splits.medium.push(c);
        } else {
            splits.few.push(c);
        }
    }
    splits
}

/// A rectangular pixel patch stamped onto the canvas. `pixels` is
/// `channels * height * width`, row-major per channel.
#[derive(Debug, Clone)]
pub struct PartPatch {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

/// Bank of shared parts plus a class→part composition. Images of a class are
/// rendered by stamping its parts at locations fixed once per bank, so a part
/// shared by two classes produces bit-identical pixels in both (absent
/// noise) — the ground-truth commonality the latent pool should recover.
#[derive(Debug, Clone)]
pub struct PartBank {
    channels: usize,
    height: usize,
    width: usize,
    parts: Vec<PartPatch>,
    /// Top-left (row, col) of each part, chosen at bank construction and
    /// reused for every render.
    placements: Vec<(usize, usize)>,
    /// `num_classes x parts.len()` nonnegative stamp weights.
    composition: Vec<f64>,
    num_classes: usize,
}

impl PartBank {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        parts: Vec<PartPatch>,
        placements: Vec<(usize, usize)>,
        composition: Vec<f64>,
        num_classes: usize,
    ) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("part bank has no parts".to_string()));
        }
        if channels == 0 || height == 0 || width == 0 || num_classes == 0 {
            return Err(Error::InvalidArgument("part bank dimensions must be >= 1".to_string()));
        }
        if placements.len() != parts.len() {
            return Err(Error::InvalidArgument(format!(
                "{} placements for {} parts",
                placements.len(),
                parts.len()
            )));
        }
        if composition.len() != num_classes * parts.len() {
            return Err(Error::InvalidArgument(format!(
                "composition has {} entries, expected {}x{}",
                composition.len(),
                num_classes,
                parts.len()
            )));
        }
        if composition.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidArgument(
                "composition weights must be finite and nonnegative".to_string(),
            ));
        }
        for (k, (part, &(y, x))) in parts.iter().zip(&placements).enumerate() {
            if part.pixels.len() != channels * part.height * part.width {
                return Err(Error::InvalidArgument(format!(
                    "part {k} pixel buffer does not match its dimensions"
                )));
            }
            if y + part.height > height || x + part.width > width {
                return Err(Error::InvalidArgument(format!(
                    "part {k} placement ({y},{x}) overflows the {height}x{width} canvas"
                )));
            }
        }
        // Cross-class commonality must exist by construction. With fewer than
        // four classes any pair of distinct compositions necessarily contains
        // a single-class part, so the check only applies from four up.
        if num_classes >= 4 {
            for k in 0..parts.len() {
                let users =
                    (0..num_classes).filter(|&c| composition[c * parts.len() + k] > 0.0).count();
                if users < 2 {
                    return Err(Error::InvalidArgument(format!(
                        "part {k} is used by {users} classes; every part needs >= 2"
                    )));
                }
            }
        }
        Ok(Self { channels, height, width, parts, placements, composition, num_classes })
    }

    /// Default bank: a 6x6 single-channel canvas split into four 3x3 slots,
    /// two interchangeable part variants per slot, and class compositions
    /// given by distinct 4-bit codes (one bit per slot choosing the variant).
    /// Codes are picked so every used variant appears in at least two
    /// classes. Supports 1..=16 classes except 2 and 3, where distinct codes
    /// cannot avoid single-class parts.
    pub fn default_bank(num_classes: usize, rng: &mut Rng) -> Result<Self> {
        let codes: Vec<usize> = match num_classes {
            0 => return Err(Error::InvalidArgument("num_classes must be >= 1".to_string())),
            1 => vec![0],
            2 | 3 => {
                return Err(Error::InvalidArgument(format!(
                    "default part bank needs >= 4 classes for shared parts, got {num_classes}"
                )))
            }
            5 => vec![0, 1, 2, 6, 7],
            9 => vec![0, 1, 2, 3, 4, 5, 6, 12, 13],
            4..=16 => (0..num_classes).collect(),
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "default part bank supports at most 16 classes, got {num_classes}"
                )))
            }
        };

        const SLOTS: usize = 4;
        let (height, width, patch) = (6, 6, 3);
        // Assign the four quadrants to slots in shuffled order; both variants
        // of a slot share its quadrant, so co-occurring parts never overlap.
        let mut regions = vec![(0, 0), (0, 3), (3, 0), (3, 3)];
        rng.shuffle(&mut regions);

        // Keep only variants some class actually uses.
        let mut used = [[false; 2]; SLOTS];
        for &code in &codes {
            for (slot, used_slot) in used.iter_mut().enumerate() {
                used_slot[(code >> slot) & 1] = true;
            }
        }
        let mut parts = Vec::new();
        let mut placements = Vec::new();
        let mut part_index = [[usize::MAX; 2]; SLOTS];
        for slot in 0..SLOTS {
            for variant in 0..2 {
                if !used[slot][variant] {
                    continue;
                }
                let pixels: Vec<f64> =
                    (0..patch * patch).map(|_| rng.uniform() * 2.0 - 1.0).collect();
                part_index[slot][variant] = parts.len();
                parts.push(PartPatch { height: patch, width: patch, pixels });
                placements.push(regions[slot]);
            }
        }

        let mut composition = vec![0.0; num_classes * parts.len()];
        for (class, &code) in codes.iter().enumerate() {
            for (slot, indices) in part_index.iter().enumerate() {
                let k = indices[(code >> slot) & 1];
                composition[class * parts.len() + k] = 1.0;
            }
        }
        Self::new(1, height, width, parts, placements, composition, num_classes)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_parts(&self) -> usize {
        self.parts.len()
    }

    /// (channels, height, width) of rendered images.
    pub fn canvas(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    /// Part indices stamped (weight > 0) by both classes.
    pub fn shared_parts(&self, a: usize, b: usize) -> Vec<usize> {
        let k = self.parts.len();
        (0..k)
            .filter(|&p| self.composition[a * k + p] > 0.0 && self.composition[b * k + p] > 0.0)
            .collect()
    }

    /// Canvas region (top, left, height, width) covered by part `k`.
    pub fn part_region(&self, k: usize) -> (usize, usize, usize, usize) {
        let (y, x) = self.placements[k];
        (y, x, self.parts[k].height, self.parts[k].width)
    }

    /// Render one image of `class`: stamp its parts, then add i.i.d. Gaussian
    /// pixel noise. Consumes no randomness when `noise_sigma == 0`.
    pub fn render(&self, class: usize, noise_sigma: f64, rng: &mut Rng) -> Result<Tensor> {
        if class >= self.num_classes {
            return Err(Error::LabelOutOfRange { label: class, classes: self.num_classes });
        }
        let mut canvas = vec![0.0; self.channels * self.height * self.width];
        let k = self.parts.len();
        for (p, part) in self.parts.iter().enumerate() {
            let w = self.composition[class * k + p];
            if w == 0.0 {
                continue;
            }
            let (top, left) = self.placements[p];
            for ch in 0..self.channels {
                for py in 0..part.height {
                    for px in 0..part.width {
                        let src = (ch * part.height + py) * part.width + px;
                        let dst = (ch * self.height + top + py) * self.width + left + px;
                        canvas[dst] += w * part.pixels[src];
                    }
                }
            }
        }
        if noise_sigma > 0.0 {
            for v in &mut canvas {
                *v += noise_sigma * rng.normal();
            }
        }
        Tensor::new(vec![self.channels, self.height, self.width], canvas)
    }
}

/// A realized dataset: images with labels, per-class counts, and the recipe
/// that produced it.
#[derive(Debug, Clone)]
pub struct LongTailDataset {
    pub samples: Vec<(Tensor, usize)>,
    pub class_counts: Vec<usize>,
    pub spec: LongTailSpec,
}

impl LongTailDataset {
    /// Wrap explicit samples, validating labels and tallying counts.
    pub fn from_samples(samples: Vec<(Tensor, usize)>, spec: LongTailSpec) -> Result<Self> {
        spec.validate()?;
        let mut counts = vec![0usize; spec.num_classes];
        for (_, label) in &samples {
            if *label >= spec.num_classes {
                return Err(Error::LabelOutOfRange { label: *label, classes: spec.num_classes });
            }
            counts[*label] += 1;
        }
        Ok(Self { samples, class_counts: counts, spec })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Generate a long-tailed dataset whose counts follow `class_counts(spec)`.
pub fn synth_dataset(
    spec: &LongTailSpec,
    bank: &PartBank,
    noise_sigma: f64,
    rng: &mut Rng,
) -> Result<LongTailDataset> {
    let counts = class_counts(spec)?;
    synth_with_counts(spec, bank, &counts, noise_sigma, rng)
}

/// Generate a dataset with explicit per-class counts (used for balanced
/// evaluation sets alongside the long-tailed training set).
pub fn synth_with_counts(
    spec: &LongTailSpec,
    bank: &PartBank,
    counts: &[usize],
    noise_sigma: f64,
    rng: &mut Rng,
) -> Result<LongTailDataset> {
    spec.validate()?;
    if counts.len() != spec.num_classes {
        return Err(Error::InvalidArgument(format!(
            "{} counts for {} classes",
            counts.len(),
            spec.num_classes
        )));
    }
    if bank.num_classes() < spec.num_classes {
        return Err(Error::InvalidArgument(format!(
            "part bank covers {} classes, dataset needs {}",
            bank.num_classes(),
            spec.num_classes
        )));
    }
    if !(noise_sigma.is_finite() && noise_sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "noise_sigma must be finite and >= 0, got {noise_sigma}"
        )));
    }
    let mut samples = Vec::with_capacity(counts.iter().sum());
    for (class, &n) in counts.iter().enumerate() {
        for _ in 0..n {
            samples.push((bank.render(class, noise_sigma, rng)?, class));
        }
    }
    Ok(LongTailDataset { samples, class_counts: counts.to_vec(), spec: spec.clone() })
}

/// Endless stream of dataset indices drawn class-balanced: each draw picks a
/// class uniformly, then a sample uniformly within that class (with
/// replacement).
#[derive(Debug)]
pub struct BalancedSampler {
    per_class: Vec<Vec<usize>>,
    rng: Rng,
}

impl Iterator for BalancedSampler {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        let class = self.rng.below(self.per_class.len());
        let within = &self.per_class[class];
        Some(within[self.rng.below(within.len())])
    }
}

pub fn resample_class_balanced(ds: &LongTailDataset, rng: Rng) -> Result<BalancedSampler> {
    if ds.is_empty() {
        return Err(Error::InvalidArgument("cannot resample an empty dataset".to_string()));
    }
    let mut per_class = vec![Vec::new(); ds.spec.num_classes];
    for (i, (_, label)) in ds.samples.iter().enumerate() {
        per_class[*label].push(i);
    }
    if let Some(empty) = per_class.iter().position(|v| v.is_empty()) {
        return Err(Error::EmptyClass(empty));
    }
    Ok(BalancedSampler { per_class, rng })
}

/// Write `ds` as `<dir>/data/sample_NNNNN.lct` + `labels.csv` + `spec.json`.
pub fn save_dataset(ds: &LongTailDataset, dir: &Path) -> Result<()> {
    let data_dir = dir.join("data");
    fs::create_dir_all(&data_dir)?;
    let mut csv = String::from("file,label\n");
    for (i, (tensor, label)) in ds.samples.iter().enumerate() {
        let name = format!("sample_{i:05}.lct");
        tensor.save(&data_dir.join(&name))?;
        csv.push_str(&format!("data/{name},{label}\n"));
    }
    fs::write(dir.join("labels.csv"), csv)?;
    fs::write(dir.join("spec.json"), serde_json::to_string_pretty(&ds.spec)?)?;
    Ok(())
}

/// Load a dataset saved by [`save_dataset`]. Round-trips bit-exactly.
pub fn load_dataset(dir: &Path) -> Result<LongTailDataset> {
    let spec_path = dir.join("spec.json");
    if !spec_path.is_file() {
        return Err(Error::MissingFile(spec_path));
    }
    let spec: LongTailSpec = serde_json::from_str(&fs::read_to_string(&spec_path)?)?;
    spec.validate()?;

    let labels_path = dir.join("labels.csv");
    if !labels_path.is_file() {
        return Err(Error::MissingFile(labels_path));
    }
    let text = fs::read_to_string(&labels_path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == "file,label" => {}
        Some((_, header)) => {
            return Err(Error::MalformedCsv {
                line: 1,
                reason: format!("expected header 'file,label', got '{header}'"),
            })
        }
        None => return Err(Error::MalformedCsv { line: 1, reason: "empty file".to_string() }),
    }

    let mut samples = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = idx + 1;
        let (file, label_text) = line.split_once(',').ok_or_else(|| Error::MalformedCsv {
            line: line_no,
            reason: "expected 'file,label'".to_string(),
        })?;
        let label: usize = label_text.trim().parse().map_err(|_| Error::MalformedCsv {
            line: line_no,
            reason: format!("label '{}' is not a nonnegative integer", label_text.trim()),
        })?;
        if label >= spec.num_classes {
            return Err(Error::LabelOutOfRange { label, classes: spec.num_classes });
        }
        let mut path = dir.to_path_buf();
        for component in file.trim().split('/') {
            path.push(component);
        }
        samples.push((Tensor::load(&path)?, label));
    }
    if samples.is_empty() {
        return Err(Error::NoSamples(dir.to_path_buf()));
    }
    LongTailDataset::from_samples(samples, spec)
}
