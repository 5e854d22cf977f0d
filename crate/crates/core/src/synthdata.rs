//! Deterministic synthetic multi-view anomaly dataset.
//!
//! Each sample is one latent object (a textured polygon) rendered in `v` views
//! by rotation, mirroring and translation. Anomalous samples carry defects on
//! a chosen subset of views, with exact pixel masks.
//!
//! Layout on disk:
//!
//! ```text
//! root/manifest.json
//! root/{split}/{sample:05}/{view}.mvt        [3, H, W] f32
//! root/{split}/{sample:05}/{view}.mask.mvt   [H, W] f32 in {0, 1}
//! ```

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mvt;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnomalyKind {
    Blob,
    Scratch,
    Hole,
}

impl AnomalyKind {
    pub const ALL: [AnomalyKind; 3] = [AnomalyKind::Blob, AnomalyKind::Scratch, AnomalyKind::Hole];

    pub fn name(self) -> &'static str {
        match self {
            AnomalyKind::Blob => "blob",
            AnomalyKind::Scratch => "scratch",
            AnomalyKind::Hole => "hole",
        }
    }
}

impl std::str::FromStr for AnomalyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown anomaly kind {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Test => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub seed: u64,
    pub p_train: usize,
    pub p_test_normal: usize,
    pub p_test_anom: usize,
    pub views: usize,
    pub resolution: usize,
    pub kinds: Vec<AnomalyKind>,
    pub views_affected: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            p_train: 64,
            p_test_normal: 32,
            p_test_anom: 32,
            views: 5,
            resolution: 64,
            kinds: AnomalyKind::ALL.to_vec(),
            views_affected: 1,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.views < 2 {
            return Err(Error::Config(format!("multi-view data needs at least 2 views, got {}", self.views)));
        }
        if self.resolution < 16 {
            return Err(Error::Config(format!("resolution {} below the minimum of 16", self.resolution)));
        }
        if self.p_test_anom > 0 {
            if self.kinds.is_empty() {
                return Err(Error::Config("anomalous samples requested but no anomaly kinds".into()));
            }
            if !(1..=self.views).contains(&self.views_affected) {
                return Err(Error::Config(format!(
                    "views_affected {} outside [1, {}]",
                    self.views_affected, self.views
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub label: bool,
    pub view_labels: Vec<bool>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub anomalies: Vec<Option<AnomalyKind>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub spec: DatasetSpec,
    pub train: Vec<SampleRecord>,
    pub test: Vec<SampleRecord>,
}

impl Manifest {
    pub fn records(&self, split: Split) -> &[SampleRecord] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }
}

/// One sample's views, as stored.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[v, 3, H, W]` in `[0, 1]`.
    pub images: Tensor<f32>,
    /// `[v, H, W]` in `{0, 1}`.
    pub masks: Tensor<f32>,
    pub view_labels: Vec<bool>,
    pub label: bool,
}

/// Whole samples stacked along a leading batch axis.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewBatch {
    /// `[p, v, 3, H, W]`.
    pub images: Tensor<f32>,
    /// `[p, v, H, W]`.
    pub masks: Tensor<f32>,
    /// `[p][v]`.
    pub image_labels: Vec<Vec<bool>>,
    pub sample_labels: Vec<bool>,
    /// Dataset indices of the samples in this batch.
    pub indices: Vec<usize>,
}

impl MultiViewBatch {
    pub fn from_samples(samples: &[(usize, Sample)]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Dimension("empty batch".into()));
        }
        let imgs: Vec<Tensor<f32>> = samples
            .iter()
            .map(|(_, s)| {
                let mut shape = vec![1];
                shape.extend_from_slice(s.images.shape());
                s.images.reshape(shape)
            })
            .collect::<Result<_>>()?;
        let masks: Vec<Tensor<f32>> = samples
            .iter()
            .map(|(_, s)| {
                let mut shape = vec![1];
                shape.extend_from_slice(s.masks.shape());
                s.masks.reshape(shape)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            images: Tensor::concat(&imgs.iter().collect::<Vec<_>>(), 0)?,
            masks: Tensor::concat(&masks.iter().collect::<Vec<_>>(), 0)?,
            image_labels: samples.iter().map(|(_, s)| s.view_labels.clone()).collect(),
            sample_labels: samples.iter().map(|(_, s)| s.label).collect(),
            indices: samples.iter().map(|(i, _)| *i).collect(),
        })
    }

    pub fn samples(&self) -> usize {
        self.sample_labels.len()
    }

    pub fn views(&self) -> usize {
        self.images.shape()[1]
    }
}

pub fn sample_dir(root: &Path, split: Split, index: usize) -> PathBuf {
    root.join(split.name()).join(format!("{index:05}"))
}

/// Whether `generate` wrote files or found an identical dataset in place.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GenerateOutcome {
    Written,
    Unchanged,
}

/// A sub-seeded generator for one sample.
fn sample_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((split.stream() << 40) | index as u64);
    rng
}

/// Writes the dataset under `root`. A matching manifest already present is a no-op.
pub fn generate(spec: &DatasetSpec, root: &Path) -> Result<(Manifest, GenerateOutcome)> {
    spec.validate()?;
    let manifest = plan(spec);
    let manifest_path = root.join(MANIFEST);
    if manifest_path.exists() {
        let existing = read_manifest(root)?;
        if existing == manifest {
            return Ok((manifest, GenerateOutcome::Unchanged));
        }
        return Err(Error::Config(format!(
            "{} already holds a different dataset",
            root.display()
        )));
    }
    for split in [Split::Train, Split::Test] {
        for rec in manifest.records(split) {
            let sample = render_sample(spec, split, rec);
            let dir = sample_dir(root, split, rec.index);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let (v, r) = (spec.views, spec.resolution);
            for j in 0..v {
                let img = sample.images.slice(0, j, 1)?.into_reshape(vec![3, r, r])?;
                let mask = sample.masks.slice(0, j, 1)?.into_reshape(vec![r, r])?;
                mvt::save(&dir.join(format!("{j}.mvt")), &img)?;
                mvt::save(&dir.join(format!("{j}.mask.mvt")), &mask)?;
            }
        }
    }
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(&manifest_path, json + "\n").map_err(|e| Error::io(&manifest_path, e))?;
    Ok((manifest, GenerateOutcome::Written))
}

/// Labels and anomaly assignments, without rendering.
pub fn plan(spec: &DatasetSpec) -> Manifest {
    let normal = |index| SampleRecord {
        index,
        label: false,
        view_labels: vec![false; spec.views],
        anomalies: Vec::new(),
    };
    let train = (0..spec.p_train).map(normal).collect();
    let mut test: Vec<SampleRecord> = (0..spec.p_test_normal).map(normal).collect();
    for i in 0..spec.p_test_anom {
        let index = spec.p_test_normal + i;
        let mut rng = sample_rng(spec.seed ^ 0xA11, Split::Test, index);
        let mut anomalies = vec![None; spec.views];
        for j in index::sample(&mut rng, spec.views, spec.views_affected) {
            anomalies[j] = Some(spec.kinds[rng.random_range(0..spec.kinds.len())]);
        }
        test.push(SampleRecord {
            index,
            label: true,
            view_labels: anomalies.iter().map(Option::is_some).collect(),
            anomalies,
        });
    }
    Manifest {
        format_version: FORMAT_VERSION,
        spec: spec.clone(),
        train,
        test,
    }
}

struct Latent {
    vertices: Vec<(f64, f64)>,
    center: (f64, f64),
    base: f64,
    background: f64,
    stripe_amp: f64,
    stripe_freq: f64,
    stripe_angle: f64,
    stripe_phase: f64,
    view_shift: Vec<(f64, f64)>,
}

impl Latent {
    fn random(rng: &mut impl Rng, views: usize) -> Self {
        let n = rng.random_range(5..=8);
        let scale = rng.random_range(0.45..0.75);
        let offset = rng.random_range(0.0..2.0 * PI);
        let vertices = (0..n)
            .map(|i| {
                let phi = offset + 2.0 * PI * (i as f64 + rng.random_range(-0.3..0.3)) / n as f64;
                let r = scale * rng.random_range(0.7..1.0);
                (r * phi.cos(), r * phi.sin())
            })
            .collect();
        Self {
            vertices,
            center: (rng.random_range(-0.08..0.08), rng.random_range(-0.08..0.08)),
            base: rng.random_range(0.5..0.65),
            background: rng.random_range(0.25..0.35),
            stripe_amp: rng.random_range(0.05..0.15),
            stripe_freq: rng.random_range(0.8..2.0),
            stripe_angle: rng.random_range(0.0..PI),
            stripe_phase: rng.random_range(0.0..2.0 * PI),
            view_shift: (0..views)
                .map(|_| (rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)))
                .collect(),
        }
    }

    fn inside(&self, (x, y): (f64, f64)) -> bool {
        let mut inside = false;
        let n = self.vertices.len();
        for i in 0..n {
            let (xi, yi) = self.vertices[i];
            let (xj, yj) = self.vertices[(i + n - 1) % n];
            if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                inside = !inside;
            }
        }
        inside
    }

    /// Intensity at object-frame coordinates.
    fn shade(&self, p: (f64, f64)) -> f64 {
        if !self.inside(p) {
            return self.background;
        }
        let (s, c) = self.stripe_angle.sin_cos();
        let phase = 2.0 * PI * self.stripe_freq * (p.0 * c + p.1 * s) + self.stripe_phase;
        self.base + self.stripe_amp * phase.sin()
    }

    /// Maps normalized image coordinates of view `j` into the object frame.
    fn to_object(&self, j: usize, views: usize, (x, y): (f64, f64)) -> (f64, f64) {
        let (dx, dy) = self.view_shift[j];
        let (px, py) = (x - self.center.0 - dx, y - self.center.1 - dy);
        let theta = 2.0 * PI * j as f64 / views as f64;
        let (s, c) = theta.sin_cos();
        let (ux, uy) = (c * px + s * py, -s * px + c * py);
        if j % 2 == 1 {
            (-ux, uy)
        } else {
            (ux, uy)
        }
    }
}

const SUPERSAMPLE: usize = 2;
const NOISE_STD: f64 = 0.005;

fn render_view(latent: &Latent, j: usize, views: usize, res: usize, rng: &mut impl Rng) -> (Vec<f64>, Vec<bool>) {
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    let mut img = vec![0.0; res * res];
    let mut object = vec![false; res * res];
    let step = 1.0 / SUPERSAMPLE as f64;
    for y in 0..res {
        for x in 0..res {
            let mut acc = 0.0;
            let mut hits = 0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let nx = ((x as f64 + (sx as f64 + 0.5) * step) / res as f64) * 2.0 - 1.0;
                    let ny = ((y as f64 + (sy as f64 + 0.5) * step) / res as f64) * 2.0 - 1.0;
                    let p = latent.to_object(j, views, (nx, ny));
                    acc += latent.shade(p);
                    hits += latent.inside(p) as usize;
                }
            }
            let i = y * res + x;
            img[i] = acc / (SUPERSAMPLE * SUPERSAMPLE) as f64 + noise.sample(rng);
            object[i] = hits == SUPERSAMPLE * SUPERSAMPLE;
        }
    }
    (img, object)
}

fn disk(res: usize, (cx, cy): (f64, f64), r: f64) -> Vec<bool> {
    (0..res * res)
        .map(|i| {
            let (x, y) = ((i % res) as f64 + 0.5, (i / res) as f64 + 0.5);
            (x - cx).powi(2) + (y - cy).powi(2) <= r * r
        })
        .collect()
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 == 0.0 { 0.0 } else { (((p.0 - a.0) * vx + (p.1 - a.1) * vy) / len2).clamp(0.0, 1.0) };
    ((p.0 - a.0 - t * vx).powi(2) + (p.1 - a.1 - t * vy).powi(2)).sqrt()
}

fn draw_anomaly(kind: AnomalyKind, img: &mut [f64], object: &[bool], res: usize, rng: &mut impl Rng) -> Vec<bool> {
    let candidates: Vec<usize> = (0..res * res).filter(|&i| object[i]).collect();
    let start = if candidates.is_empty() {
        (res * res) / 2 + res / 2
    } else {
        candidates[rng.random_range(0..candidates.len())]
    };
    let center = ((start % res) as f64 + 0.5, (start / res) as f64 + 0.5);
    let unit = res as f64 / 64.0;
    match kind {
        AnomalyKind::Blob => {
            let m = disk(res, center, rng.random_range(4.0..7.0) * unit);
            for (v, &hit) in img.iter_mut().zip(&m) {
                if hit {
                    *v += 0.6;
                }
            }
            m
        }
        AnomalyKind::Hole => {
            let m = disk(res, center, rng.random_range(4.0..7.0) * unit);
            for (v, &hit) in img.iter_mut().zip(&m) {
                if hit {
                    *v = 0.0;
                }
            }
            m
        }
        AnomalyKind::Scratch => {
            let mut pts = vec![center];
            let mut heading = rng.random_range(0.0..2.0 * PI);
            for _ in 0..3 {
                heading += rng.random_range(-0.6..0.6);
                let len = rng.random_range(6.0..10.0) * unit;
                let last = *pts.last().expect("nonempty");
                pts.push((last.0 + len * heading.cos(), last.1 + len * heading.sin()));
            }
            let half_width = 1.5 * unit;
            let m: Vec<bool> = (0..res * res)
                .map(|i| {
                    let p = ((i % res) as f64 + 0.5, (i / res) as f64 + 0.5);
                    pts.windows(2).any(|s| segment_distance(p, s[0], s[1]) <= half_width)
                })
                .collect();
            for (v, &hit) in img.iter_mut().zip(&m) {
                if hit {
                    *v = 0.02;
                }
            }
            m
        }
    }
}

/// Renders one sample from its record; pure in `(spec, split, index)`.
pub fn render_sample(spec: &DatasetSpec, split: Split, rec: &SampleRecord) -> Sample {
    let (v, res) = (spec.views, spec.resolution);
    let mut rng = sample_rng(spec.seed, split, rec.index);
    let latent = Latent::random(&mut rng, v);
    let mut images = Vec::with_capacity(v * 3 * res * res);
    let mut masks = Vec::with_capacity(v * res * res);
    for j in 0..v {
        let (mut img, object) = render_view(&latent, j, v, res, &mut rng);
        let mask = match rec.anomalies.get(j).copied().flatten() {
            Some(kind) => draw_anomaly(kind, &mut img, &object, res, &mut rng),
            None => vec![false; res * res],
        };
        let img: Vec<f32> = img.iter().map(|&x| x.clamp(0.0, 1.0) as f32).collect();
        for _ in 0..3 {
            images.extend_from_slice(&img);
        }
        masks.extend(mask.iter().map(|&m| if m { 1.0f32 } else { 0.0 }));
    }
    Sample {
        images: Tensor::new(vec![v, 3, res, res], images).expect("sized"),
        masks: Tensor::new(vec![v, res, res], masks).expect("sized"),
        view_labels: rec.view_labels.clone(),
        label: rec.label,
    }
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Compatibility(format!(
            "dataset format version {} (expected {FORMAT_VERSION})",
            m.format_version
        )));
    }
    Ok(m)
}

/// A generated dataset opened for reading.
#[derive(Debug, Clone)]
pub struct Dataset {
    root: PathBuf,
    manifest: Manifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        Ok(Self {
            root: root.to_path_buf(),
            manifest: read_manifest(root)?,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn spec(&self) -> &DatasetSpec {
        &self.manifest.spec
    }

    pub fn len(&self, split: Split) -> usize {
        self.manifest.records(split).len()
    }

    pub fn load_sample(&self, split: Split, position: usize) -> Result<Sample> {
        let rec = self
            .manifest
            .records(split)
            .get(position)
            .ok_or_else(|| Error::Index(format!("{} has no sample {position}", split.name())))?;
        load_sample_dir(&sample_dir(&self.root, split, rec.index), self.spec(), rec)
    }

    /// All samples of a split, loaded once.
    pub fn load_split(&self, split: Split) -> Result<Vec<Sample>> {
        (0..self.len(split)).map(|i| self.load_sample(split, i)).collect()
    }

    /// Batches of whole samples; `shuffle` seeds the order, `None` keeps it.
    pub fn batches(&self, split: Split, p: usize, shuffle: Option<u64>) -> Result<Batches<'_>> {
        Ok(Batches {
            dataset: self,
            split,
            order: batch_order(self.len(split), shuffle),
            p: check_batch_size(p)?,
            cursor: 0,
        })
    }
}

fn check_batch_size(p: usize) -> Result<usize> {
    if p == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    Ok(p)
}

/// Sample order for one pass; identical for identical seeds.
pub fn batch_order(n: usize, shuffle: Option<u64>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(seed) = shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
}

pub struct Batches<'a> {
    dataset: &'a Dataset,
    split: Split,
    order: Vec<usize>,
    p: usize,
    cursor: usize,
}

impl Iterator for Batches<'_> {
    type Item = Result<MultiViewBatch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.p).min(self.order.len());
        let chunk = &self.order[self.cursor..end];
        self.cursor = end;
        let samples: Result<Vec<(usize, Sample)>> = chunk
            .iter()
            .map(|&i| Ok((i, self.dataset.load_sample(self.split, i)?)))
            .collect();
        Some(samples.and_then(|s| MultiViewBatch::from_samples(&s)))
    }
}

/// Loads one sample directory against its manifest record.
pub fn load_sample_dir(dir: &Path, spec: &DatasetSpec, rec: &SampleRecord) -> Result<Sample> {
    let (v, res) = (spec.views, spec.resolution);
    let mut images = Vec::with_capacity(v);
    let mut masks = Vec::with_capacity(v);
    for j in 0..v {
        let img: Tensor<f32> = mvt::load(&dir.join(format!("{j}.mvt")))?;
        let mask: Tensor<f32> = mvt::load(&dir.join(format!("{j}.mask.mvt")))?;
        if img.shape() != [3, res, res] || mask.shape() != [res, res] {
            return Err(Error::Compatibility(format!(
                "{}: view {j} has shape {:?}/{:?}, manifest says {res}x{res}",
                dir.display(),
                img.shape(),
                mask.shape()
            )));
        }
        images.push(img.into_reshape(vec![1, 3, res, res])?);
        masks.push(mask.into_reshape(vec![1, res, res])?);
    }
    Ok(Sample {
        images: Tensor::concat(&images.iter().collect::<Vec<_>>(), 0)?,
        masks: Tensor::concat(&masks.iter().collect::<Vec<_>>(), 0)?,
        view_labels: rec.view_labels.clone(),
        label: rec.label,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polygon_inside_test() {
        let mut l = Latent::random(&mut ChaCha8Rng::seed_from_u64(0), 2);
        l.vertices = vec![(-0.5, -0.5), (0.5, -0.5), (0.5, 0.5), (-0.5, 0.5)];
        assert!(l.inside((0.0, 0.0)));
        assert!(!l.inside((0.6, 0.0)));
    }

    #[test]
    fn spec_validation() {
        let ok = DatasetSpec::default();
        assert!(ok.validate().is_ok());
        assert!(DatasetSpec { views: 1, ..ok.clone() }.validate().is_err());
        assert!(DatasetSpec { views_affected: 6, ..ok.clone() }.validate().is_err());
        assert!(DatasetSpec { kinds: vec![], ..ok.clone() }.validate().is_err());
        assert!(DatasetSpec { kinds: vec![], p_test_anom: 0, ..ok }.validate().is_ok());
    }

    #[test]
    fn plan_labels_are_consistent() {
        let spec = DatasetSpec { views_affected: 2, ..DatasetSpec::default() };
        let m = plan(&spec);
        assert!(m.train.iter().all(|r| !r.label));
        for r in &m.test {
            assert_eq!(r.label, r.view_labels.iter().any(|&l| l));
            if r.label {
                assert_eq!(r.view_labels.iter().filter(|&&l| l).count(), 2);
            }
        }
    }

    #[test]
    fn anomaly_kind_names_roundtrip() {
        for k in AnomalyKind::ALL {
            assert_eq!(k.name().parse::<AnomalyKind>().unwrap(), k);
        }
        assert!("dent".parse::<AnomalyKind>().is_err());
    }
}
