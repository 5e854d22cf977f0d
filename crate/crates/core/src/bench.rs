//! FLOP sweeps, wall-time scaling of MVAS against dense cross-attention,
//! and window/top-K ablation grids.
//!
//! Sweeps write CSV with the fixed header [`CSV_HEADER`], preceded by one
//! `# run_config=...` comment line.

use std::fmt::Write as _;
use std::hint::black_box;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::mvas::{dense_cross_attention_oracle, flop_model, fuse_view, optimal_window_divisor, QkvWeights};
use crate::pipeline::{evaluate, train, FeatureBank, MetricReport, MvadModel, RunConfig};
use crate::synthdata::{Dataset, Split};
use crate::tensor::Tensor;

pub const CSV_HEADER: &str = "series,hw,c,v,a,k,flops,median_ns,slope";

/// Each timed sample must last at least this long; faster calls are batched.
pub const MIN_SAMPLE_NS: u128 = 200_000;
const MAX_INNER: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowPolicy {
    Fixed(usize),
    /// Divisor-rounded optimum of the FLOP model, per size.
    Optimal,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepConfig {
    /// Token counts; each must be a perfect square (`h = w = √hw`).
    pub hw: Vec<usize>,
    pub c: usize,
    pub v: usize,
    pub k: usize,
    pub a: WindowPolicy,
    pub repeats: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            hw: vec![256, 1024, 4096, 16384],
            c: 32,
            v: 5,
            k: 16,
            a: WindowPolicy::Optimal,
            repeats: 5,
            warmup: 1,
            seed: 0,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repeats < 5 {
            return Err(Error::Config(format!("repeats must be at least 5, got {}", self.repeats)));
        }
        if self.hw.is_empty() || self.c == 0 || self.v < 2 || self.k == 0 {
            return Err(Error::Config("sweep needs sizes, c >= 1, v >= 2 and k >= 1".into()));
        }
        for &hw in &self.hw {
            side(hw)?;
        }
        Ok(())
    }

    fn window(&self, h: usize) -> Result<usize> {
        match self.a {
            WindowPolicy::Fixed(a) => Ok(a),
            WindowPolicy::Optimal => optimal_window_divisor(h, h, self.v, self.k),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("sweep config serializes")
    }
}

fn side(hw: usize) -> Result<usize> {
    let h = (hw as f64).sqrt().round() as usize;
    if h * h != hw || h == 0 {
        return Err(Error::Config(format!("hw={hw} is not a positive perfect square")));
    }
    Ok(h)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FlopRow {
    pub hw: usize,
    pub a: usize,
    pub k: usize,
    pub mvas_flops: u128,
    pub dense_flops: u128,
    pub ratio: f64,
}

pub fn flop_sweep(cfg: &SweepConfig) -> Result<Vec<FlopRow>> {
    cfg.validate()?;
    cfg.hw
        .iter()
        .map(|&hw| {
            let h = side(hw)?;
            let a = cfg.window(h)?;
            let f = flop_model(h, h, cfg.c, cfg.v, a, cfg.k)?;
            Ok(FlopRow {
                hw,
                a,
                k: cfg.k,
                mvas_flops: f.mvas,
                dense_flops: f.dense,
                ratio: f.ratio(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Series {
    Mvas,
    Dense,
}

impl Series {
    pub fn name(self) -> &'static str {
        match self {
            Series::Mvas => "mvas",
            Series::Dense => "dense",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimeRow {
    pub series: Series,
    pub hw: usize,
    pub c: usize,
    pub v: usize,
    pub a: usize,
    pub k: usize,
    pub flops: u128,
    pub median_ns: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepTable {
    pub rows: Vec<TimeRow>,
    /// Log-log slope per series, over `median_ns` when timed, else over flops.
    pub mvas_slope: f64,
    pub dense_slope: f64,
}

impl SweepTable {
    pub fn series(&self, s: Series) -> impl Iterator<Item = &TimeRow> {
        self.rows.iter().filter(move |r| r.series == s)
    }

    pub fn slope(&self, s: Series) -> f64 {
        match s {
            Series::Mvas => self.mvas_slope,
            Series::Dense => self.dense_slope,
        }
    }

    pub fn to_csv(&self, run_config: &str) -> String {
        let mut out = format!("# run_config={run_config}\n{CSV_HEADER}\n");
        for r in &self.rows {
            let median = r.median_ns.map(|m| format!("{m:.0}")).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{:.6}",
                r.series.name(),
                r.hw,
                r.c,
                r.v,
                r.a,
                r.k,
                r.flops,
                median,
                self.slope(r.series)
            );
        }
        out
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    if points.len() < 2 {
        return f64::NAN;
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

fn table(rows: Vec<TimeRow>, timed: bool) -> SweepTable {
    let slope = |s: Series| {
        let pts: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| r.series == s)
            .map(|r| (r.hw as f64, if timed { r.median_ns.unwrap_or(f64::NAN) } else { r.flops as f64 }))
            .collect();
        log_log_slope(&pts)
    };
    let (mvas_slope, dense_slope) = (slope(Series::Mvas), slope(Series::Dense));
    SweepTable {
        rows,
        mvas_slope,
        dense_slope,
    }
}

fn rows_for(cfg: &SweepConfig, hw: usize) -> Result<[TimeRow; 2]> {
    let h = side(hw)?;
    let a = cfg.window(h)?;
    let f = flop_model(h, h, cfg.c, cfg.v, a, cfg.k)?;
    let row = |series, flops| TimeRow {
        series,
        hw,
        c: cfg.c,
        v: cfg.v,
        a,
        k: cfg.k,
        flops,
        median_ns: None,
    };
    Ok([row(Series::Mvas, f.mvas), row(Series::Dense, f.dense)])
}

/// FLOP-model rows in the timing table layout, without measurements.
pub fn dry_run(cfg: &SweepConfig) -> Result<SweepTable> {
    cfg.validate()?;
    let mut mvas = Vec::new();
    let mut dense = Vec::new();
    for &hw in &cfg.hw {
        let [m, d] = rows_for(cfg, hw)?;
        mvas.push(m);
        dense.push(d);
    }
    mvas.extend(dense);
    Ok(table(mvas, false))
}

/// Median nanoseconds per call of `f` over `repeats` samples.
pub fn median_ns(mut f: impl FnMut() -> Result<()>, repeats: usize, warmup: usize) -> Result<f64> {
    for _ in 0..warmup {
        f()?;
    }
    let start = Instant::now();
    f()?;
    let once = start.elapsed().as_nanos().max(1);
    let mut inner = 1usize;
    if once < MIN_SAMPLE_NS {
        inner = (MIN_SAMPLE_NS / once + 1) as usize;
        if inner > MAX_INNER {
            return Err(Error::Timing(format!(
                "a call takes {once} ns; batching {inner} calls exceeds the limit of {MAX_INNER}"
            )));
        }
    }
    let mut samples = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        for _ in 0..inner {
            f()?;
        }
        samples.push(t.elapsed().as_nanos() as f64 / inner as f64);
    }
    samples.sort_by(f64::total_cmp);
    let n = samples.len();
    Ok(if n % 2 == 1 { samples[n / 2] } else { (samples[n / 2 - 1] + samples[n / 2]) / 2.0 })
}

/// Wall time of fusing one query view against the other `v - 1` views,
/// by MVAS and by dense cross-attention, single-threaded, 32-bit.
pub fn time_sweep(cfg: &SweepConfig, mut progress: impl FnMut(&TimeRow)) -> Result<SweepTable> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let qkv = QkvWeights::<Tensor<f32>>::random(cfg.c, &mut rng);
    let mut mvas_rows = Vec::new();
    let mut dense_rows = Vec::new();
    for &hw in &cfg.hw {
        let h = side(hw)?;
        let [mut m, mut d] = rows_for(cfg, hw)?;
        let x = Tensor::<f32>::randn(vec![cfg.v, h, h, cfg.c], 1.0, &mut rng);
        let x_s = x.slice(0, 0, 1)?.into_reshape(vec![h, h, cfg.c])?;
        let x_m = x.slice(0, 1, cfg.v - 1)?;
        m.median_ns = Some(median_ns(
            || {
                let mut tape = Tape::new();
                let xv = tape.constant(x.clone())?;
                let w = qkv.bind(&mut tape, false)?;
                let y = fuse_view(&mut tape, xv, 0, m.a, cfg.k, &w)?;
                black_box(tape.value(y));
                Ok(())
            },
            cfg.repeats,
            cfg.warmup,
        )?);
        progress(&m);
        d.median_ns = Some(median_ns(
            || {
                black_box(dense_cross_attention_oracle(&x_s, &x_m, &qkv)?);
                Ok(())
            },
            cfg.repeats,
            cfg.warmup,
        )?);
        progress(&d);
        mvas_rows.push(m);
        dense_rows.push(d);
    }
    mvas_rows.extend(dense_rows);
    Ok(table(mvas_rows, true))
}

/// One `(a, k)` cell of an ablation grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationCell {
    pub a: usize,
    pub k: usize,
    /// Sum over enabled stages of `blocks × mvas_flops`; `None` when skipped.
    pub flops: Option<u128>,
    pub skipped: Option<String>,
    pub report: Option<MetricReport>,
}

pub const ABLATION_METRICS: [&str; 10] = [
    "sample.auroc",
    "sample.ap",
    "sample.f1max",
    "image.auroc",
    "image.ap",
    "image.f1max",
    "pixel.auroc",
    "pixel.ap",
    "pixel.f1max",
    "pixel.pro",
];

/// MVAS FLOPs of a model config with every stage set to `(a, k)`.
pub fn model_mvas_flops(run: &RunConfig) -> Result<u128> {
    let m = &run.model;
    let mut total = 0;
    for (j, s) in m.stages.iter().enumerate() {
        if s.blocks > 0 {
            let side = m.stage_side(j);
            total += s.blocks as u128 * flop_model(side, side, m.channels[j], m.views, s.a, s.k)?.mvas;
        }
    }
    Ok(total)
}

/// Trains and evaluates one model per valid `(a, k)` pair; invalid pairs
/// are kept as skipped rows with the reason.
pub fn ablation_grid(
    dataset: &Dataset,
    base: &RunConfig,
    a_values: &[usize],
    k_values: &[usize],
    mut progress: impl FnMut(&AblationCell),
) -> Result<Vec<AblationCell>> {
    let train_samples = dataset.load_split(Split::Train)?;
    let mut cells = Vec::new();
    for &a in a_values {
        for &k in k_values {
            let mut run = base.clone();
            for s in run.model.stages.iter_mut() {
                s.a = a;
                s.k = k;
            }
            let cell = match run.validate() {
                Err(e) => AblationCell {
                    a,
                    k,
                    flops: None,
                    skipped: Some(e.to_string()),
                    report: None,
                },
                Ok(()) => {
                    let mut model = MvadModel::<f32>::new(run.model.clone(), run.seed)?;
                    let bank = FeatureBank::build(&model.teacher, &train_samples, 8)?;
                    train(&mut model, &bank, &run.train, run.seed, |_| {})?;
                    let eval = evaluate(&model, dataset, &run)?;
                    AblationCell {
                        a,
                        k,
                        flops: Some(model_mvas_flops(&run)?),
                        skipped: None,
                        report: Some(eval.report),
                    }
                }
            };
            progress(&cell);
            cells.push(cell);
        }
    }
    Ok(cells)
}

pub fn ablation_csv(cells: &[AblationCell], run_config: &str) -> String {
    let mut out = format!("# run_config={run_config}\na,k,status,flops,{}\n", ABLATION_METRICS.join(","));
    for c in cells {
        let status = match &c.skipped {
            Some(reason) => format!("skipped: {}", reason.replace([',', '\n'], ";")),
            None => "ok".into(),
        };
        let flops = c.flops.map(|f| f.to_string()).unwrap_or_default();
        let metrics: Vec<String> = ABLATION_METRICS
            .iter()
            .map(|m| {
                c.report
                    .as_ref()
                    .and_then(|r| r.get(m))
                    .map(|v| format!("{v:.6}"))
                    .unwrap_or_default()
            })
            .collect();
        let _ = writeln!(out, "{},{},{status},{flops},{}", c.a, c.k, metrics.join(","));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_laws() {
        let pts: Vec<(f64, f64)> = [1.0, 2.0, 4.0, 8.0].iter().map(|&x: &f64| (x, 3.0 * x.powi(2))).collect();
        assert!((log_log_slope(&pts) - 2.0).abs() < 1e-12);
        assert!(log_log_slope(&pts[..1]).is_nan());
    }

    #[test]
    fn flop_rows_match_hand_values() {
        let cfg = SweepConfig {
            hw: vec![4096],
            c: 64,
            a: WindowPolicy::Fixed(8),
            ..SweepConfig::default()
        };
        let r = flop_sweep(&cfg).unwrap();
        assert_eq!(r[0].mvas_flops, 11_010_048);
    }

    #[test]
    fn config_validation() {
        assert!(SweepConfig { repeats: 4, ..SweepConfig::default() }.validate().is_err());
        assert!(SweepConfig { hw: vec![300], ..SweepConfig::default() }.validate().is_err());
    }

    #[test]
    fn median_batches_fast_calls() {
        let mut calls = 0usize;
        let m = median_ns(
            || {
                calls += 1;
                Ok(())
            },
            5,
            1,
        )
        .unwrap();
        assert!(m >= 0.0);
        assert!(calls > 7);
    }
}
