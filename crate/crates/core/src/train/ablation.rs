//! The two scripted ablations: a sweep over the modality dropout rate and
//! trained versus frozen initial history.

use std::fmt;

use log::info;

use super::config::{HistoryMode, Precision, TrainConfig};
use super::trainer::Trainer;
use crate::data::CorpusSplits;
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::tensor::Scalar;

/// Dropout rates swept by [`ablate_pnet`].
pub const PNET_GRID: [f64; 6] = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub best_valid_bleu4: Option<f64>,
    /// Test-split scores of the best-on-validation parameters.
    pub test: EvalReport,
    pub epochs_run: usize,
}

fn run_typed<T: Scalar>(config: &TrainConfig, splits: &CorpusSplits) -> Result<RunResult> {
    if splits.test.is_empty() {
        return Err(Error::data("test split is empty"));
    }
    let mut trainer = Trainer::<T>::new(config.clone())?;
    let fit = trainer.fit(splits, None)?;
    if let Some(reason) = fit.halted {
        return Err(Error::NonFinite {
            op: if reason.contains("gradient") { "gradient" } else { "loss" },
        });
    }
    trainer.restore_best();
    Ok(RunResult {
        best_valid_bleu4: fit.best_valid_bleu4,
        test: trainer.evaluate(&splits.test)?,
        epochs_run: trainer.epoch(),
    })
}

/// Trains one model from scratch and scores it on the test split.
pub fn run_experiment(config: &TrainConfig, splits: &CorpusSplits) -> Result<RunResult> {
    match config.precision {
        Precision::F32 => run_typed::<f32>(config, splits),
        Precision::F64 => run_typed::<f64>(config, splits),
    }
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PnetRow {
    pub p_net: f64,
    /// Test BLEU-4 per seed.
    pub bleu4: Vec<f64>,
    pub median: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PnetTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<PnetRow>,
}

impl PnetTable {
    /// True when some interior rate is at least as good as both
    /// endpoints, by median.
    pub fn interior_at_least_endpoints(&self) -> bool {
        let (Some(first), Some(last)) = (self.rows.first(), self.rows.last()) else {
            return false;
        };
        self.rows[1..self.rows.len() - 1]
            .iter()
            .any(|r| r.median >= first.median && r.median >= last.median)
    }

    /// True when `p_net = 1` is strictly better than every other rate.
    pub fn full_dropout_uniquely_best(&self) -> bool {
        let Some(last) = self.rows.iter().find(|r| r.p_net == 1.0) else {
            return false;
        };
        self.rows.iter().filter(|r| r.p_net != 1.0).all(|r| r.median < last.median)
    }

    pub fn best(&self) -> Option<&PnetRow> {
        self.rows.iter().max_by(|a, b| a.median.total_cmp(&b.median))
    }
}

impl fmt::Display for PnetTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:>6}", "p_net")?;
        for s in &self.seeds {
            write!(f, " {:>9}", format!("seed {s}"))?;
        }
        writeln!(f, " {:>9}", "median")?;
        for (i, r) in self.rows.iter().enumerate() {
            write!(f, "{:>6.1}", r.p_net)?;
            for b in &r.bleu4 {
                write!(f, " {b:>9.2}")?;
            }
            write!(f, " {:>9.2}", r.median)?;
            if i + 1 < self.rows.len() {
                writeln!(f)?;
            }
        }
        Ok(())
    }
}

/// Trains one model per (rate, seed) pair and reports test BLEU-4.
pub fn ablate_pnet(base: &TrainConfig, splits: &CorpusSplits, grid: &[f64], seeds: &[u64]) -> Result<PnetTable> {
    let mut rows = Vec::with_capacity(grid.len());
    for &p in grid {
        let mut scores = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut c = base.clone();
            c.model.p_net = p;
            c.seed = seed;
            let r = run_experiment(&c, splits)?;
            info!("p_net {p:.1} seed {seed}: test BLEU-4 {:.2}", r.test.bleu4());
            scores.push(r.test.bleu4());
        }
        rows.push(PnetRow {
            p_net: p,
            median: median(&scores),
            bleu4: scores,
        });
    }
    Ok(PnetTable {
        seeds: seeds.to_vec(),
        rows,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub seed: u64,
    pub trained: f64,
    pub fixed: f64,
}

impl HistoryRow {
    pub fn margin(&self) -> f64 {
        self.trained - self.fixed
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryTable {
    pub rows: Vec<HistoryRow>,
}

impl HistoryTable {
    /// Seeds where the trained history beats the frozen one outright.
    pub fn trained_wins(&self) -> usize {
        self.rows.iter().filter(|r| r.margin() > 0.0).count()
    }
}

impl fmt::Display for HistoryTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>6} {:>9} {:>9} {:>9}", "seed", "training", "fixed", "margin")?;
        for r in &self.rows {
            writeln!(f, "{:>6} {:>9.2} {:>9.2} {:>+9.2}", r.seed, r.trained, r.fixed, r.margin())?;
        }
        write!(f, "trained history wins {} of {} seeds", self.trained_wins(), self.rows.len())
    }
}

/// For each seed, trains twice from the same initialisation (and hence the
/// same random history matrix), once optimising the history and once with
/// it frozen.
pub fn ablate_history(base: &TrainConfig, splits: &CorpusSplits, seeds: &[u64]) -> Result<HistoryTable> {
    let mut rows = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let score = |mode: HistoryMode| -> Result<f64> {
            let mut c = base.clone();
            c.seed = seed;
            c.history_mode = mode;
            let r = run_experiment(&c, splits)?;
            info!("history {mode:?} seed {seed}: test BLEU-4 {:.2}", r.test.bleu4());
            Ok(r.test.bleu4())
        };
        let trained = score(HistoryMode::Trained)?;
        let fixed = score(HistoryMode::Fixed)?;
        rows.push(HistoryRow { seed, trained, fixed });
    }
    Ok(HistoryTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(medians: &[f64]) -> PnetTable {
        PnetTable {
            seeds: vec![0],
            rows: PNET_GRID
                .iter()
                .zip(medians)
                .map(|(&p, &m)| PnetRow {
                    p_net: p,
                    bleu4: vec![m],
                    median: m,
                })
                .collect(),
        }
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn peak_detection() {
        let peaked = table(&[10.0, 12.0, 15.0, 13.0, 11.0, 9.0]);
        assert!(peaked.interior_at_least_endpoints());
        assert!(!peaked.full_dropout_uniquely_best());
        assert_eq!(peaked.best().unwrap().p_net, 0.4);
        let rising = table(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert!(!rising.interior_at_least_endpoints());
        assert!(rising.full_dropout_uniquely_best());
        assert_eq!(peaked.to_string().lines().count(), 7);
    }

    #[test]
    fn history_table_counts_strict_wins() {
        let t = HistoryTable {
            rows: vec![
                HistoryRow { seed: 0, trained: 2.0, fixed: 1.0 },
                HistoryRow { seed: 1, trained: 1.0, fixed: 1.0 },
            ],
        };
        assert_eq!(t.trained_wins(), 1);
        assert!(t.to_string().contains("wins 1 of 2"));
    }
}
