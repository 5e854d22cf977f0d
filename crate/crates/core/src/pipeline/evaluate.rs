use std::collections::BTreeMap;

use serde::Serialize;

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::metrics::{self, MetricValue, ProConfig, RegionSet, ScoredSet};
use crate::scalar::Scalar;
use crate::synthdata::{Dataset, DatasetSpec, Sample, Split};
use crate::tensor::Tensor;

use super::config::RunConfig;
use super::model::{student_forward, MvadModel, Pyramid};
use super::scoring::{aggregate_scores, anomaly_maps, gaussian_smooth, ScoreSet};
use super::train::stack_images;

/// The ten named metrics plus run metadata.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub sample: BTreeMap<String, Option<f64>>,
    pub image: BTreeMap<String, Option<f64>>,
    pub pixel: BTreeMap<String, Option<f64>>,
    /// Reason per undefined metric, keyed `level.name`.
    pub undefined: BTreeMap<String, String>,
    pub metadata: ReportMetadata,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportMetadata {
    pub config: RunConfig,
    pub config_hash: String,
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub samples: usize,
    pub images: usize,
    pub pixels: usize,
    pub pro: ProConfig,
}

impl MetricReport {
    pub fn metric_count(&self) -> usize {
        self.sample.len() + self.image.len() + self.pixel.len()
    }

    /// A metric by `level.name`, `None` when undefined or unknown.
    pub fn get(&self, key: &str) -> Option<f64> {
        let (level, name) = key.split_once('.')?;
        let map = match level {
            "sample" => &self.sample,
            "image" => &self.image,
            "pixel" => &self.pixel,
            _ => return None,
        };
        map.get(name).copied().flatten()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

/// Scores and labels of a whole evaluated split.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub scores: ScoreSet,
    /// `[p, v, H, W]` in `{0, 1}`.
    pub masks: Tensor<f32>,
    pub image_labels: Vec<Vec<bool>>,
    pub sample_labels: Vec<bool>,
    pub report: MetricReport,
}

impl Evaluation {
    /// `sample,label,score,view0..` rows.
    pub fn score_csv(&self) -> String {
        let v = self.image_labels.first().map_or(0, Vec::len);
        let mut out = String::from("sample,label,score");
        for j in 0..v {
            out += &format!(",view{j}_label,view{j}_score");
        }
        out.push('\n');
        for (i, s) in self.scores.sample_scores.iter().enumerate() {
            out += &format!("{i},{},{s}", self.sample_labels[i] as u8);
            for j in 0..v {
                out += &format!(",{},{}", self.image_labels[i][j] as u8, self.scores.image_scores[i][j]);
            }
            out.push('\n');
        }
        out
    }
}

/// Student reconstruction of teacher features, without gradients.
pub fn reconstruct<T: Scalar>(model: &MvadModel<T>, f_e: &Pyramid<Tensor<T>>) -> Result<Pyramid<Tensor<T>>> {
    let mut tape = Tape::new();
    let student = model.student.bind(&mut tape, false)?;
    let vars = [
        tape.constant(f_e[0].clone())?,
        tape.constant(f_e[1].clone())?,
        tape.constant(f_e[2].clone())?,
    ];
    let f_d = student_forward(&mut tape, &vars, &student, &model.config)?;
    Ok(f_d.map(|v| tape.value(v).clone()))
}

/// Anomaly maps `[p·v, H, W]` of a group of samples.
pub fn sample_maps<T: Scalar>(
    model: &MvadModel<T>,
    samples: &[Sample],
    smoothing: Option<f64>,
    recon: &mut impl FnMut(&Pyramid<Tensor<T>>) -> Result<Pyramid<Tensor<T>>>,
) -> Result<Tensor<f64>> {
    let images = stack_images::<T>(samples)?;
    let (h, w) = (images.shape()[2], images.shape()[3]);
    let f_e = model.teacher.forward(&images)?;
    let f_d = recon(&f_e)?;
    let maps = anomaly_maps(&f_e, &f_d, h, w)?;
    match smoothing {
        Some(sigma) => gaussian_smooth(&maps, sigma),
        None => Ok(maps),
    }
}

pub fn evaluate<T: Scalar>(model: &MvadModel<T>, dataset: &Dataset, run: &RunConfig) -> Result<Evaluation> {
    evaluate_with(model, dataset, run, &mut |f_e| reconstruct(model, f_e))
}

/// Evaluation with a caller-supplied reconstruction of the teacher pyramid.
pub fn evaluate_with<T: Scalar>(
    model: &MvadModel<T>,
    dataset: &Dataset,
    run: &RunConfig,
    recon: &mut impl FnMut(&Pyramid<Tensor<T>>) -> Result<Pyramid<Tensor<T>>>,
) -> Result<Evaluation> {
    check_compatible(model, dataset.spec())?;
    run.eval.validate()?;
    let v = model.views();
    let n = dataset.len(Split::Test);
    if n == 0 {
        return Err(Error::Config("test split is empty".into()));
    }
    let mut maps = Vec::new();
    let mut masks = Vec::new();
    let mut image_labels = Vec::with_capacity(n);
    let mut sample_labels = Vec::with_capacity(n);
    let positions: Vec<usize> = (0..n).collect();
    for chunk in positions.chunks(run.eval.batch_samples) {
        let samples: Vec<Sample> = chunk.iter().map(|&i| dataset.load_sample(Split::Test, i)).collect::<Result<_>>()?;
        let m = sample_maps(model, &samples, run.eval.smoothing_sigma, recon)?;
        maps.extend_from_slice(m.data());
        for s in samples {
            masks.extend_from_slice(s.masks.data());
            image_labels.push(s.view_labels);
            sample_labels.push(s.label);
        }
    }
    let res = dataset.spec().resolution;
    let maps = Tensor::new(vec![n * v, res, res], maps)?;
    let scores = aggregate_scores(&maps, n, v)?;
    let masks = Tensor::new(vec![n, v, res, res], masks)?;
    let report = build_report(&scores, &masks, &image_labels, &sample_labels, run, dataset.spec())?;
    Ok(Evaluation {
        scores,
        masks,
        image_labels,
        sample_labels,
        report,
    })
}

pub fn check_compatible<T>(model: &MvadModel<T>, spec: &DatasetSpec) -> Result<()> {
    if model.config.resolution != spec.resolution || model.config.views != spec.views {
        return Err(Error::Compatibility(format!(
            "model expects {} views at {}x{}, dataset has {} views at {}x{}",
            model.config.views, model.config.resolution, model.config.resolution, spec.views, spec.resolution, spec.resolution
        )));
    }
    Ok(())
}

/// The ten metrics over already aggregated scores.
pub fn build_report(
    scores: &ScoreSet,
    masks: &Tensor<f32>,
    image_labels: &[Vec<bool>],
    sample_labels: &[bool],
    run: &RunConfig,
    dataset: &DatasetSpec,
) -> Result<MetricReport> {
    let mut undefined = BTreeMap::new();
    let mut record = |level: &str, name: &str, r: Result<f64>, map: &mut BTreeMap<String, Option<f64>>| -> Result<()> {
        let m = MetricValue::from_result(r)?;
        if let Some(reason) = m.reason {
            undefined.insert(format!("{level}.{name}"), reason);
        }
        map.insert(name.to_string(), m.value);
        Ok(())
    };
    let ranking = |set: Result<ScoredSet>| -> Result<[Result<f64>; 3]> {
        let s = set?;
        Ok([metrics::auroc(&s), metrics::average_precision(&s), metrics::f1_max(&s)])
    };
    let names = ["auroc", "ap", "f1max"];

    let mut sample = BTreeMap::new();
    let sample_set = ScoredSet::new(scores.sample_scores.clone(), sample_labels.to_vec());
    for (name, r) in names.iter().zip(ranking(sample_set)?) {
        record("sample", name, r, &mut sample)?;
    }

    let mut image = BTreeMap::new();
    let image_set = ScoredSet::new(
        scores.image_scores.iter().flatten().copied().collect(),
        image_labels.iter().flatten().copied().collect(),
    );
    for (name, r) in names.iter().zip(ranking(image_set)?) {
        record("image", name, r, &mut image)?;
    }

    let mut pixel = BTreeMap::new();
    let pixel_labels: Vec<bool> = masks.data().iter().map(|&m| m > 0.5).collect();
    let pixel_set = ScoredSet::new(scores.pixel_maps.data().to_vec(), pixel_labels.clone());
    for (name, r) in names.iter().zip(ranking(pixel_set)?) {
        record("pixel", name, r, &mut pixel)?;
    }
    let s = scores.pixel_maps.shape();
    let (h, w) = (s[2], s[3]);
    let mut regions = RegionSet::new();
    for (m, l) in scores.pixel_maps.data().chunks(h * w).zip(pixel_labels.chunks(h * w)) {
        regions.push_map(m, l, h, w)?;
    }
    let pro_cfg = run.eval.pro();
    record("pixel", "pro", metrics::pro(&regions, &pro_cfg), &mut pixel)?;

    Ok(MetricReport {
        sample,
        image,
        pixel,
        undefined,
        metadata: ReportMetadata {
            config: run.clone(),
            config_hash: run.hash(),
            seed: run.seed,
            dataset: dataset.clone(),
            samples: sample_labels.len(),
            images: image_labels.iter().map(Vec::len).sum(),
            pixels: pixel_labels.len(),
            pro: pro_cfg,
        },
    })
}
