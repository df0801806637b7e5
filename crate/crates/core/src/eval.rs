//! Metrics, the repeat-last baseline, multi-seed evaluation runs, and the
//! ablation / look-back sweep harnesses with their report tables.

use crate::data::{denormalize, windows, SeriesWindow, SplitBundle};
use crate::decompose::DecompositionConfig;
use crate::framework::{ForecastModel, ModelMode};
use crate::embedding::EmbedMode;
use crate::optim::{train, TrainConfig, TrainError, TrainHistory};
use crate::pyramid::PyramidConfig;
use crate::tensor::{Tensor, TensorError};
use std::fmt::Write as _;
use std::time::Instant;

/// Model variant tags mirroring the ablation tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Full,
    WoInterScale,
    WoAllScale,
    BottomUp,
    Fine,
    Coarse,
    Spatial,
    Temporal,
}

pub const ALL_VARIANTS: [Variant; 8] = [
    Variant::Full,
    Variant::WoInterScale,
    Variant::WoAllScale,
    Variant::BottomUp,
    Variant::Fine,
    Variant::Coarse,
    Variant::Spatial,
    Variant::Temporal,
];

impl Variant {
    pub fn id(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::WoInterScale => "wo_inter_scale",
            Variant::WoAllScale => "wo_all_scale",
            Variant::BottomUp => "bottom_up",
            Variant::Fine => "fine",
            Variant::Coarse => "coarse",
            Variant::Spatial => "spatial",
            Variant::Temporal => "temporal",
        }
    }

    /// Display label matching the ablation-table headers.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::WoInterScale => "w/o inter-scale",
            Variant::WoAllScale => "w/o all-scale",
            Variant::BottomUp => "bottom-up",
            Variant::Fine => "fine",
            Variant::Coarse => "coarse",
            Variant::Spatial => "spatial",
            Variant::Temporal => "temporal",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        ALL_VARIANTS.iter().copied().find(|v| v.id() == s)
    }

    /// Flip the corresponding switches on a base configuration.
    pub fn apply(self, cfg: &mut PyramidConfig) {
        match self {
            Variant::Full => {}
            Variant::WoInterScale => cfg.no_inter_scale = true,
            Variant::WoAllScale => cfg.no_all_scale = true,
            Variant::BottomUp => cfg.bottom_up_decoder = true,
            Variant::Fine => cfg.single_scale_index = Some(0),
            Variant::Coarse => cfg.single_scale_index = Some(cfg.patch_sizes.len() - 1),
            Variant::Spatial => cfg.embed_mode = EmbedMode::Spatial,
            Variant::Temporal => cfg.embed_mode = EmbedMode::Temporal,
        }
    }
}

/// Per-(dataset, horizon, seed) evaluation record.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub dataset: String,
    pub horizon: usize,
    pub lookback: usize,
    pub seed: u64,
    pub variant: Variant,
    pub mse: f64,
    pub mae: f64,
    pub seconds: f64,
}

pub const REPORT_HEADER: &str = "dataset,variant,lookback_I,horizon_H,seed,mse,mae,seconds";

impl RunReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{:.3}",
            self.dataset,
            self.variant.id(),
            self.lookback,
            self.horizon,
            self.seed,
            self.mse,
            self.mae,
            self.seconds
        )
    }
}

/// Machine-readable rows plus an aligned human-readable block.
pub fn render_reports(reports: &[RunReport]) -> String {
    let mut out = String::new();
    out.push_str(REPORT_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out.push('\n');
    let _ = writeln!(
        out,
        "{:<12} {:<16} {:>6} {:>6} {:>6} {:>10} {:>10}",
        "dataset", "variant", "I", "H", "seed", "mse", "mae"
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{:<12} {:<16} {:>6} {:>6} {:>6} {:>10.4} {:>10.4}",
            r.dataset,
            r.variant.label(),
            r.lookback,
            r.horizon,
            r.seed,
            r.mse,
            r.mae
        );
    }
    out
}

/// Mean squared error over all elements.
pub fn mse(pred: &Tensor, target: &Tensor) -> Result<f64, TensorError> {
    check_same(pred, target, "mse")?;
    let n = pred.numel() as f64;
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n)
}

/// Mean absolute error over all elements.
pub fn mae(pred: &Tensor, target: &Tensor) -> Result<f64, TensorError> {
    check_same(pred, target, "mae")?;
    let n = pred.numel() as f64;
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / n)
}

fn check_same(pred: &Tensor, target: &Tensor, op: &'static str) -> Result<(), TensorError> {
    if pred.shape() != target.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            left: pred.shape().to_vec(),
            right: target.shape().to_vec(),
        });
    }
    Ok(())
}

/// Forecast every horizon row as the last look-back row.
pub fn naive_repeat_last(window: &SeriesWindow) -> Tensor {
    let dims = window.input.shape()[1];
    let horizon = window.target.shape()[0];
    let rows = window.input.shape()[0];
    let last = &window.input.data()[(rows - 1) * dims..];
    let mut data = Vec::with_capacity(horizon * dims);
    for _ in 0..horizon {
        data.extend_from_slice(last);
    }
    Tensor::new(vec![horizon, dims], data).expect("sized")
}

/// Accumulated MSE/MAE of a prediction function over a window set, with
/// uniform weight per element.
pub fn metrics_over<F>(test: &[SeriesWindow], mut predict: F) -> Result<(f64, f64), TrainError>
where
    F: FnMut(&SeriesWindow) -> Result<Tensor, TrainError>,
{
    let mut se = 0.0;
    let mut ae = 0.0;
    let mut count = 0usize;
    for w in test {
        let pred = predict(w)?;
        for (p, t) in pred.data().iter().zip(w.target.data()) {
            se += (p - t) * (p - t);
            ae += (p - t).abs();
        }
        count += pred.numel();
    }
    Ok((se / count as f64, ae / count as f64))
}

/// Evaluate a trained model over test windows. Metrics stay on the
/// normalized scale unless a bundle is supplied for denormalized
/// reporting.
pub fn evaluate(
    model: &ForecastModel,
    test: &[SeriesWindow],
    dataset: &str,
    seed: u64,
    variant: Variant,
    denorm: Option<&SplitBundle>,
) -> Result<RunReport, TrainError> {
    let start = Instant::now();
    let (mse, mae) = metrics_over(test, |w| {
        let pred = model.forecast(&w.input)?;
        match denorm {
            Some(bundle) => Ok(denormalize(&pred, bundle)),
            None => Ok(pred),
        }
    })?;
    Ok(RunReport {
        dataset: dataset.to_string(),
        horizon: model.pyramid.horizon,
        lookback: model.pyramid.lookback,
        seed,
        variant,
        mse,
        mae,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Everything needed to train-and-evaluate one configuration on one
/// normalized series.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub dataset: String,
    /// Normalized full series, `T x D`.
    pub series: Tensor,
    pub bundle: SplitBundle,
    pub pyramid: PyramidConfig,
    pub decomposition: DecompositionConfig,
    pub mode: ModelMode,
    pub train_cfg: TrainConfig,
    /// Stride for training windows (1 = every window).
    pub train_stride: usize,
    /// Stride for validation/test windows.
    pub eval_stride: usize,
}

impl Experiment {
    fn windows_for(
        &self,
        cfg: &PyramidConfig,
    ) -> Result<(Vec<SeriesWindow>, Vec<SeriesWindow>, Vec<SeriesWindow>), TrainError> {
        let (i, h) = (cfg.lookback, cfg.horizon);
        let tr = windows(&self.series, self.bundle.train.clone(), i, h, self.train_stride)
            .map_err(|e| TrainError::Config(e.to_string()))?;
        let va = windows(&self.series, self.bundle.val.clone(), i, h, self.eval_stride)
            .map_err(|e| TrainError::Config(e.to_string()))?;
        let te = windows(&self.series, self.bundle.test.clone(), i, h, self.eval_stride)
            .map_err(|e| TrainError::Config(e.to_string()))?;
        Ok((tr, va, te))
    }

    /// Train one (variant, seed) cell and evaluate it on the test split.
    pub fn run_cell(
        &self,
        variant: Variant,
        seed: u64,
    ) -> Result<(RunReport, ForecastModel, TrainHistory), TrainError> {
        let start = Instant::now();
        let mut cfg = self.pyramid.clone();
        variant.apply(&mut cfg);
        cfg.validate()?;
        let (tr, va, te) = self.windows_for(&cfg)?;
        let mut model =
            ForecastModel::init(cfg, self.decomposition.clone(), self.mode, seed)?;
        let mut tc = self.train_cfg.clone();
        tc.seed = seed;
        let history = train(&mut model, &tr, &va, &tc)?;
        let mut report = evaluate(&model, &te, &self.dataset, seed, variant, None)?;
        report.seconds = start.elapsed().as_secs_f64();
        Ok((report, model, history))
    }
}

/// Train/evaluate every (variant, seed) cell and render a Tables-2/3 style
/// comparison with per-cell means over seeds.
pub fn ablation_suite(
    exp: &Experiment,
    variants: &[Variant],
    seeds: &[u64],
) -> Result<(Vec<RunReport>, String), TrainError> {
    let mut reports = Vec::with_capacity(variants.len() * seeds.len());
    for &variant in variants {
        for &seed in seeds {
            let (report, _, _) = exp.run_cell(variant, seed)?;
            reports.push(report);
        }
    }
    let mut table = String::new();
    let _ = writeln!(
        table,
        "{:<16} {:>10} {:>10} {:>6}",
        "variant", "mean_mse", "mean_mae", "runs"
    );
    for &variant in variants {
        let cells: Vec<&RunReport> = reports.iter().filter(|r| r.variant == variant).collect();
        let n = cells.len().max(1) as f64;
        let mmse: f64 = cells.iter().map(|r| r.mse).sum::<f64>() / n;
        let mmae: f64 = cells.iter().map(|r| r.mae).sum::<f64>() / n;
        let _ = writeln!(
            table,
            "{:<16} {:>10.4} {:>10.4} {:>6}",
            variant.label(),
            mmse,
            mmae,
            cells.len()
        );
    }
    Ok((reports, table))
}

/// One trained model per (horizon, look-back) pair, rows sorted by (H, I):
/// the Fig.-4 style sweep.
pub fn lookback_sweep(
    exp: &Experiment,
    lookbacks: &[usize],
    horizons: &[usize],
) -> Result<(Vec<RunReport>, String), TrainError> {
    let mut cells: Vec<(usize, usize)> = horizons
        .iter()
        .flat_map(|&h| lookbacks.iter().map(move |&i| (h, i)))
        .collect();
    cells.sort_unstable();
    let mut reports = Vec::with_capacity(cells.len());
    for (h, i) in cells {
        let mut sweep = exp.clone();
        sweep.pyramid.lookback = i;
        sweep.pyramid.horizon = h;
        sweep.pyramid.history = (i / 2).max(1);
        let (report, _, _) = sweep.run_cell(Variant::Full, exp.train_cfg.seed)?;
        reports.push(report);
    }
    let mut table = String::from("horizon_H,lookback_I,mse,mae\n");
    for r in &reports {
        let _ = writeln!(table, "{},{},{},{}", r.horizon, r.lookback, r.mse, r.mae);
    }
    Ok((reports, table))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{split, synth_multiseasonal, SynthSpec};

    #[test]
    fn metric_examples() {
        let a = Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap();
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert_eq!(mae(&a, &a).unwrap(), 0.0);

        let pred = Tensor::new(vec![2, 1], vec![1.0, 0.0]).unwrap();
        let target = Tensor::new(vec![2, 1], vec![0.0, 1.0]).unwrap();
        assert_eq!(mse(&pred, &target).unwrap(), 1.0);
        assert_eq!(mae(&pred, &target).unwrap(), 1.0);

        let p2 = Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap();
        let t2 = Tensor::new(vec![2, 1], vec![0.0, 0.0]).unwrap();
        assert_eq!(mse(&p2, &t2).unwrap(), 2.5);
        assert_eq!(mae(&p2, &t2).unwrap(), 1.5);

        let bad = Tensor::zeros(&[3, 1]);
        assert!(mse(&a, &bad).is_err());
    }

    #[test]
    fn metrics_are_permutation_invariant() {
        let pred = Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let target = Tensor::new(vec![4, 1], vec![0.0, 4.0, 1.0, 4.0]).unwrap();
        let perm_pred = Tensor::new(vec![4, 1], vec![4.0, 3.0, 2.0, 1.0]).unwrap();
        let perm_target = Tensor::new(vec![4, 1], vec![4.0, 1.0, 4.0, 0.0]).unwrap();
        assert_eq!(
            mse(&pred, &target).unwrap(),
            mse(&perm_pred, &perm_target).unwrap()
        );
        assert_eq!(
            mae(&pred, &target).unwrap(),
            mae(&perm_pred, &perm_target).unwrap()
        );
    }

    fn window_from(series: &[f64], lookback: usize, horizon: usize) -> SeriesWindow {
        SeriesWindow {
            input: Tensor::new(vec![lookback, 1], series[..lookback].to_vec()).unwrap(),
            target: Tensor::new(
                vec![horizon, 1],
                series[lookback..lookback + horizon].to_vec(),
            )
            .unwrap(),
            origin: 0,
        }
    }

    #[test]
    fn naive_baseline_examples() {
        // constant series: zero error
        let w = window_from(&[2.0; 10], 6, 4);
        let pred = naive_repeat_last(&w);
        assert_eq!(mse(&pred, &w.target).unwrap(), 0.0);

        // H=1: forecast equals the final input row
        let w1 = window_from(&[1.0, 2.0, 3.0, 9.0], 3, 1);
        assert_eq!(naive_repeat_last(&w1).data(), &[3.0]);

        // linear series with slope s: mae = s*(H+1)/2
        let s = 0.5;
        let series: Vec<f64> = (0..12).map(|t| s * t as f64).collect();
        let w = window_from(&series, 6, 4);
        let pred = naive_repeat_last(&w);
        let expect = s * (4.0 + 1.0) / 2.0;
        assert!((mae(&pred, &w.target).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn duplicated_windows_leave_metrics_unchanged() {
        let series: Vec<f64> = (0..12).map(|t| (t as f64).sin()).collect();
        let w = window_from(&series, 6, 4);
        let single = metrics_over(&[w.clone()], |w| Ok(naive_repeat_last(w))).unwrap();
        let doubled =
            metrics_over(&[w.clone(), w.clone()], |w| Ok(naive_repeat_last(w))).unwrap();
        assert_eq!(single, doubled);
    }

    #[test]
    fn error_bounds_hold() {
        let series: Vec<f64> = (0..12).map(|t| (t as f64 * 0.9).cos()).collect();
        let w = window_from(&series, 6, 4);
        let pred = naive_repeat_last(&w);
        let max_abs = pred
            .data()
            .iter()
            .zip(w.target.data())
            .map(|(p, t)| (p - t).abs())
            .fold(0.0_f64, f64::max);
        assert!(mae(&pred, &w.target).unwrap() <= max_abs + 1e-15);
        assert!(mse(&pred, &w.target).unwrap() <= max_abs * max_abs + 1e-15);
    }

    #[test]
    fn variant_tags_round_trip_and_apply() {
        for v in ALL_VARIANTS {
            assert_eq!(Variant::parse(v.id()), Some(v));
        }
        assert_eq!(Variant::parse("nope"), None);

        let base = PyramidConfig::new(vec![4, 8, 16], 2, 32, 8, 2);
        let mut fine = base.clone();
        Variant::Fine.apply(&mut fine);
        assert_eq!(fine.single_scale_index, Some(0));
        assert_eq!(fine.effective_patch_sizes(), vec![4]);
        let mut coarse = base.clone();
        Variant::Coarse.apply(&mut coarse);
        assert_eq!(coarse.effective_patch_sizes(), vec![16]);
    }

    #[test]
    fn evaluate_is_deterministic_for_fixed_model() {
        let spec = SynthSpec {
            length: 220,
            dims: 2,
            periods: vec![12],
            amplitudes: vec![1.0],
            trend_slope: 0.0,
            noise_std: 0.05,
            seed: 5,
        };
        let raw = synth_multiseasonal(&spec).unwrap();
        let bundle = split(&raw, [0.6, 0.2, 0.2]).unwrap();
        let mut cfg = PyramidConfig::new(vec![2], 1, 12, 4, 2);
        cfg.heads = 1;
        cfg.history = 6;
        cfg.dropout = 0.0;
        let model = ForecastModel::init(
            cfg,
            DecompositionConfig::new(vec![5]),
            ModelMode::Decomposed,
            1,
        )
        .unwrap();
        let test = windows(&raw.values, bundle.test.clone(), 12, 4, 1).unwrap();
        let a = evaluate(&model, &test, "synth", 1, Variant::Full, None).unwrap();
        let b = evaluate(&model, &test, "synth", 1, Variant::Full, None).unwrap();
        assert_eq!(a.mse.to_bits(), b.mse.to_bits());
        assert_eq!(a.mae.to_bits(), b.mae.to_bits());
        assert!(a.mse >= 0.0 && a.mae >= 0.0 && a.mse.is_finite());
    }

    #[test]
    fn report_rendering_contains_rows() {
        let reports = vec![RunReport {
            dataset: "synth".into(),
            horizon: 4,
            lookback: 12,
            seed: 1,
            variant: Variant::Full,
            mse: 0.25,
            mae: 0.4,
            seconds: 1.0,
        }];
        let text = render_reports(&reports);
        assert!(text.starts_with(REPORT_HEADER));
        assert!(text.contains("synth,full,12,4,1,0.25,0.4"));
    }
}
