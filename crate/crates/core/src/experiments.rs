//! Experiment suites: model comparison, ablations, the α/λ sensitivity
//! sweeps and the cross-subject grid. Every suite shares one dataset and one
//! trained foundation; each row carries its config fingerprint.

use crate::config::{RunConfig, Variant};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::LossVariant;
use crate::metrics::MetricsReport;
use crate::output::{write_dual_axis_plot, Series};
use crate::pipeline::{evaluate, finetune, pretrain, Checkpoint, Foundation};
use std::path::Path;

pub const SWEEP_ALPHAS: [f64; 9] = [0.001, 0.005, 0.01, 0.02, 0.05, 0.1, 0.5, 1.0, 10.0];
pub const SWEEP_LAMBDAS: [f64; 6] = [1.0, 5.0, 10.0, 20.0, 50.0, 100.0];

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRow {
    /// Values for the table's setting columns, in order.
    pub settings: Vec<String>,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultTable {
    pub name: String,
    pub setting_columns: Vec<String>,
    pub rows: Vec<ExperimentRow>,
}

impl ResultTable {
    fn new(name: &str, columns: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            setting_columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    fn push(&mut self, settings: Vec<String>, report: MetricsReport) {
        log::info!(
            "{} [{}]: mse {:.5} ssim {:.4} attr {:.4} misjudge {:.4}",
            self.name,
            settings.join(", "),
            report.mse,
            report.ssim,
            report.attribute_error,
            report.misjudge_rate
        );
        self.rows.push(ExperimentRow { settings, report });
    }

    pub fn header(&self) -> Vec<String> {
        let mut h = self.setting_columns.clone();
        h.extend(MetricsReport::CSV_FIELDS.iter().map(|s| s.to_string()));
        h
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
        let csv_err = |e: csv::Error| Error::InvalidInput(format!("writing {}: {e}", path.display()));
        w.write_record(self.header()).map_err(csv_err)?;
        for row in &self.rows {
            let mut rec = row.settings.clone();
            rec.extend(row.report.csv_values());
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Largest absolute difference over the four metrics, or `None` when
    /// the tables differ in shape or settings.
    pub fn max_metric_diff(&self, other: &ResultTable) -> Option<f64> {
        if self.setting_columns != other.setting_columns || self.rows.len() != other.rows.len() {
            return None;
        }
        let mut worst = 0.0f64;
        for (a, b) in self.rows.iter().zip(&other.rows) {
            if a.settings != b.settings {
                return None;
            }
            for (x, y) in metric_values(&a.report).into_iter().zip(metric_values(&b.report)) {
                worst = worst.max((x - y).abs());
            }
        }
        Some(worst)
    }
}

fn metric_values(r: &MetricsReport) -> [f64; 4] {
    [r.mse, r.ssim, r.attribute_error, r.misjudge_rate]
}

fn train_and_evaluate(cfg: &RunConfig, data: &Dataset, foundation: &Foundation) -> Result<(Checkpoint, MetricsReport)> {
    let pre = if cfg.use_pretrain {
        Some(pretrain(cfg, data, foundation)?)
    } else {
        None
    };
    let ckpt = finetune(cfg, pre.as_ref(), data, foundation)?;
    let report = evaluate(&ckpt, data, None)?;
    Ok((ckpt, report))
}

/// Trains and evaluates each variant under the same data, seed and budget.
pub fn run_model_comparison(
    base: &RunConfig,
    data: &Dataset,
    foundation: &Foundation,
    variants: &[Variant],
) -> Result<ResultTable> {
    let mut table = ResultTable::new("comparison", &["variant"]);
    for &variant in variants {
        let mut cfg = base.clone();
        cfg.variant = variant;
        let (_, report) = train_and_evaluate(&cfg, data, foundation)?;
        table.push(vec![variant.to_string()], report);
    }
    Ok(table)
}

/// The five ablation rows as (use_alignment, loss variant, use_pretrain).
pub const ABLATION_ROWS: [(bool, LossVariant, bool); 5] = [
    (true, LossVariant::Our, true),
    (false, LossVariant::Our, true),
    (true, LossVariant::Past, true),
    (true, LossVariant::Origin, true),
    (true, LossVariant::Our, false),
];

fn yes_no(b: bool) -> String {
    if b { "yes" } else { "no" }.to_string()
}

/// Runs the ablation grid on the base config's variant. Rows that differ
/// only in fine-tuning switches share one pretrained checkpoint.
pub fn run_ablation(base: &RunConfig, data: &Dataset, foundation: &Foundation) -> Result<ResultTable> {
    let mut table = ResultTable::new("ablation", &["align", "loss_function", "pretrain"]);
    let mut pretrained: Vec<(LossVariant, Checkpoint)> = Vec::new();
    for (align, loss, use_pre) in ABLATION_ROWS {
        let mut cfg = base.clone();
        cfg.use_alignment = align;
        cfg.loss_variant = loss;
        cfg.use_pretrain = use_pre;
        let ckpt = if use_pre {
            if !pretrained.iter().any(|(l, _)| *l == loss) {
                pretrained.push((loss, pretrain(&cfg, data, foundation)?));
            }
            let pre = &pretrained.iter().find(|(l, _)| *l == loss).expect("cached").1;
            finetune(&cfg, Some(pre), data, foundation)?
        } else {
            finetune(&cfg, None, data, foundation)?
        };
        let report = evaluate(&ckpt, data, None)?;
        table.push(vec![yes_no(align), loss.as_str().to_string(), yes_no(use_pre)], report);
    }
    Ok(table)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    /// λ fixed, α varied.
    pub alpha: ResultTable,
    /// α fixed, λ varied.
    pub lambda: ResultTable,
}

/// Sweeps α with λ = `fixed_lambda`, then λ with α = `fixed_alpha`.
pub fn sensitivity_sweep(
    base: &RunConfig,
    data: &Dataset,
    foundation: &Foundation,
    alphas: &[f64],
    lambdas: &[f64],
    fixed_alpha: f64,
    fixed_lambda: f64,
) -> Result<SweepResult> {
    let mut alpha = ResultTable::new("sweep_alpha", &["alpha", "lambda"]);
    for &a in alphas {
        let mut cfg = base.clone();
        cfg.loss.alpha = a;
        cfg.loss.lambda = fixed_lambda;
        cfg.validate()?;
        let (_, report) = train_and_evaluate(&cfg, data, foundation)?;
        alpha.push(vec![a.to_string(), fixed_lambda.to_string()], report);
    }
    let mut lambda = ResultTable::new("sweep_lambda", &["alpha", "lambda"]);
    for &l in lambdas {
        let mut cfg = base.clone();
        cfg.loss.alpha = fixed_alpha;
        cfg.loss.lambda = l;
        cfg.validate()?;
        let (_, report) = train_and_evaluate(&cfg, data, foundation)?;
        lambda.push(vec![fixed_alpha.to_string(), l.to_string()], report);
    }
    Ok(SweepResult { alpha, lambda })
}

impl SweepResult {
    /// Writes both tables, a plot-data CSV per sweep and a dual-axis PNG per
    /// sweep (MSE and SSIM on the left axis, misjudge rate on the right).
    pub fn write(&self, dir: &Path) -> Result<()> {
        for (table, column) in [(&self.alpha, 0usize), (&self.lambda, 1usize)] {
            table.write_csv(&dir.join(format!("{}.csv", table.name)))?;
            let xs: Vec<f64> = table
                .rows
                .iter()
                .map(|r| r.settings[column].parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::InvalidInput(format!("sweep setting is not numeric: {e}")))?;
            let path = dir.join(format!("{}_plot.csv", table.name));
            let mut w = csv::Writer::from_path(&path).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
            let csv_err = |e: csv::Error| Error::InvalidInput(format!("writing {}: {e}", path.display()));
            w.write_record([table.setting_columns[column].as_str(), "mse", "ssim", "misjudge_rate"])
                .map_err(csv_err)?;
            for (x, r) in xs.iter().zip(&table.rows) {
                w.write_record([x.to_string(), r.report.mse.to_string(), r.report.ssim.to_string(), r.report.misjudge_rate.to_string()])
                    .map_err(csv_err)?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
            let series = |f: fn(&MetricsReport) -> f64| -> Vec<(f64, f64)> {
                xs.iter().zip(&table.rows).map(|(&x, r)| (x, f(&r.report))).collect()
            };
            write_dual_axis_plot(
                &dir.join(format!("{}.png", table.name)),
                &[
                    Series {
                        label: "mse",
                        points: series(|r| r.mse),
                    },
                    Series {
                        label: "ssim",
                        points: series(|r| r.ssim),
                    },
                ],
                &[Series {
                    label: "misjudge_rate",
                    points: series(|r| r.misjudge_rate),
                }],
                true,
            )?;
        }
        Ok(())
    }
}

/// Train × test grid over {all subjects, each subject}.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossSubjectTable {
    pub label: String,
    pub settings: Vec<String>,
    /// `cells[train][test]`.
    pub cells: Vec<Vec<MetricsReport>>,
}

fn subject_settings(data: &Dataset) -> Vec<(String, Vec<u32>)> {
    let mut out = vec![("all".to_string(), Vec::new())];
    out.extend(data.subjects().into_iter().map(|s| (s.to_string(), vec![s])));
    out
}

impl CrossSubjectTable {
    pub fn as_table(&self) -> ResultTable {
        let mut t = ResultTable::new(&self.label, &["train", "test"]);
        for (i, row) in self.cells.iter().enumerate() {
            for (j, r) in row.iter().enumerate() {
                t.rows.push(ExperimentRow {
                    settings: vec![self.settings[i].clone(), self.settings[j].clone()],
                    report: r.clone(),
                });
            }
        }
        t
    }

    /// One CSV in long form plus one train × test matrix per metric.
    pub fn write(&self, dir: &Path) -> Result<()> {
        self.as_table().write_csv(&dir.join(format!("{}.csv", self.label)))?;
        let metrics: [(&str, fn(&MetricsReport) -> f64); 4] = [
            ("mse", |r| r.mse),
            ("ssim", |r| r.ssim),
            ("attribute_error", |r| r.attribute_error),
            ("misjudge_rate", |r| r.misjudge_rate),
        ];
        for (name, f) in metrics {
            let path = dir.join(format!("{}_{name}.csv", self.label));
            let mut w = csv::Writer::from_path(&path).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
            let csv_err = |e: csv::Error| Error::InvalidInput(format!("writing {}: {e}", path.display()));
            let mut header = vec!["train\\test".to_string()];
            header.extend(self.settings.iter().cloned());
            w.write_record(&header).map_err(csv_err)?;
            for (i, row) in self.cells.iter().enumerate() {
                let mut rec = vec![self.settings[i].clone()];
                rec.extend(row.iter().map(|r| f(r).to_string()));
                w.write_record(&rec).map_err(csv_err)?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Fine-tunes on each subject setting and evaluates on every setting. With
/// pretraining enabled, one pretrained checkpoint is shared by all rows.
pub fn run_cross_subject_grid(
    base: &RunConfig,
    data: &Dataset,
    foundation: &Foundation,
    label: &str,
) -> Result<CrossSubjectTable> {
    let settings = subject_settings(data);
    if settings.len() < 3 {
        return Err(Error::InvalidInput("cross-subject runs need at least two subjects".into()));
    }
    let pre = if base.use_pretrain {
        Some(pretrain(base, data, foundation)?)
    } else {
        None
    };
    let mut cells = Vec::with_capacity(settings.len());
    for (train_name, train_ids) in &settings {
        let mut cfg = base.clone();
        cfg.train_subjects = train_ids.clone();
        let mut ckpt = finetune(&cfg, pre.as_ref(), data, foundation)?;
        let mut row = Vec::with_capacity(settings.len());
        for (test_name, test_ids) in &settings {
            ckpt.config.eval_subjects = test_ids.clone();
            let report = evaluate(&ckpt, data, None)?;
            log::info!("{label} train {train_name} test {test_name}: mse {:.5}", report.mse);
            row.push(report);
        }
        cells.push(row);
    }
    Ok(CrossSubjectTable {
        label: label.to_string(),
        settings: settings.into_iter().map(|(n, _)| n).collect(),
        cells,
    })
}

/// The full cross-subject study: the base model, then the same grid without
/// alignment and without pretraining.
pub fn run_cross_subject(
    base: &RunConfig,
    data: &Dataset,
    foundation: &Foundation,
) -> Result<(CrossSubjectTable, CrossSubjectTable)> {
    let full = run_cross_subject_grid(base, data, foundation, "cross_subject")?;
    let mut plain = base.clone();
    plain.use_alignment = false;
    plain.use_pretrain = false;
    let bare = run_cross_subject_grid(&plain, data, foundation, "cross_subject_noalign_nopretrain")?;
    Ok((full, bare))
}
