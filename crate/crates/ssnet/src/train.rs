//! Training driver, checkpoint evaluation and the metrics CSV.

use std::io::Write;

use ssnet_core::model::{evaluate, EpochStats, EvalReport, Trainer};
use ssnet_core::net::fold_batchnorm;
use ssnet_core::synth::Sample;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};

pub const CSV_HEADER: [&str; 7] = ["epoch", "split", "miou", "class_avg", "global_avg", "ap", "ap50"];

/// One line of the metrics CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub epoch: usize,
    pub split: String,
    pub report: EvalReport,
}

impl MetricRow {
    /// Fields with fixed precision so equal runs give equal bytes.
    pub fn fields(&self) -> [String; 7] {
        let f = |v: f64| format!("{v:.6}");
        let s = &self.report.semantic;
        [
            self.epoch.to_string(),
            self.split.clone(),
            f(s.miou),
            f(s.class_avg),
            f(s.global_avg),
            f(self.report.instance.ap),
            f(self.report.instance.ap50),
        ]
    }
}

/// Writes the header and `rows` as CSV.
pub fn write_csv<W: Write>(out: W, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.write_record(r.fields())?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn csv_string(rows: &[MetricRow]) -> String {
    let mut buf = Vec::new();
    write_csv(&mut buf, rows).expect("writing to memory");
    String::from_utf8(buf).expect("CSV is UTF-8")
}

/// Splits off the last `fraction` of `samples` for validation, keeping at
/// least one sample on each side.
pub fn split_validation(samples: &[Sample], fraction: f64) -> Result<(&[Sample], &[Sample])> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::Config(format!("need at least 2 samples to split off validation, have {n}")));
    }
    let nv = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
    Ok(samples.split_at(n - nv))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters after the epoch with the highest validation mIoU (the
    /// earliest on ties).
    pub best: Checkpoint,
    pub best_miou: f64,
    /// One `val` row per epoch.
    pub rows: Vec<MetricRow>,
    pub stats: Vec<EpochStats>,
}

/// Trains from scratch, evaluating on `val` at `cfg.eval_t` after every
/// epoch. `progress` sees each epoch's statistics and row as they finish.
pub fn train(
    cfg: &RunConfig,
    train: &[Sample],
    val: &[Sample],
    mut progress: impl FnMut(&EpochStats, &MetricRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("training and validation sets must be non-empty".into()));
    }
    let mut trainer = Trainer::new(cfg.model.clone(), cfg.train.clone())?;
    let mut rows = Vec::new();
    let mut stats = Vec::new();
    let mut best: Option<(f64, Checkpoint)> = None;
    for _ in 0..cfg.train.epochs {
        let e = trainer.epoch();
        let st = trainer.run_epoch(train).map_err(|err| match err {
            ssnet_core::Error::NonFinite(msg) => Error::Diverged { epoch: e, msg },
            other => other.into(),
        })?;
        let report = evaluate(&trainer.params, &cfg.model, val, &[cfg.eval_t])?[0];
        let row = MetricRow {
            epoch: e,
            split: "val".into(),
            report,
        };
        progress(&st, &row);
        let m = report.semantic.miou;
        if best.as_ref().is_none_or(|(b, _)| m > *b) {
            best = Some((
                m,
                Checkpoint {
                    config: cfg.clone(),
                    epoch: e,
                    params: trainer.params.clone(),
                },
            ));
        }
        rows.push(row);
        stats.push(st);
    }
    let (best_miou, best) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best,
        best_miou,
        rows,
        stats,
    })
}

/// Evaluates a checkpoint once per step count in `ts`; rows are labeled
/// `t=<n>`.
pub fn evaluate_checkpoint(ck: &Checkpoint, samples: &[Sample], ts: &[usize], fold_bn: bool) -> Result<Vec<MetricRow>> {
    ck.check_structure()?;
    let params = if fold_bn {
        fold_batchnorm(&ck.params)?
    } else {
        ck.params.clone()
    };
    let reports = evaluate(&params, &ck.config.model, samples, ts)?;
    Ok(ts
        .iter()
        .zip(reports)
        .map(|(t, report)| MetricRow {
            epoch: ck.epoch,
            split: format!("t={t}"),
            report,
        })
        .collect())
}
