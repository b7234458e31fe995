use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::semantics::argmax;
use crate::synth::{CAR, TRUCK};

use super::config::{ExperimentConfig, Strategy};
use super::dataset::Sample;

/// Anything that assigns one class per voxel.
pub trait VoxelPredictor {
    fn predict(&self, sample: &Sample) -> Result<Vec<usize>>;
}

/// Untrained argmax over a voxel-averaged semantic channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Readout {
    Sem2d,
    Sem3d,
}

fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let m = t.shape()[1];
    t.data().chunks(m).map(argmax).collect()
}

impl VoxelPredictor for Readout {
    fn predict(&self, sample: &Sample) -> Result<Vec<usize>> {
        Ok(match self {
            Self::Sem2d => argmax_rows(&sample.sem2d),
            Self::Sem3d => argmax_rows(&sample.sem3d),
        })
    }
}

/// Returns the ground truth.
pub struct Oracle;

impl VoxelPredictor for Oracle {
    fn predict(&self, sample: &Sample) -> Result<Vec<usize>> {
        Ok(sample.labels.clone())
    }
}

/// Predicts a single class everywhere.
pub struct Constant(pub usize);

impl VoxelPredictor for Constant {
    fn predict(&self, sample: &Sample) -> Result<Vec<usize>> {
        Ok(vec![self.0; sample.len()])
    }
}

/// Voxel classification scores accumulated over scenes. Class 0 is background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// `confusion[truth][predicted]` voxel counts.
    pub confusion: Vec<Vec<u64>>,
}

impl Metrics {
    pub fn new(classes: usize) -> Self {
        Self {
            confusion: vec![vec![0; classes]; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.confusion.len()
    }

    pub fn add(&mut self, truth: &[usize], predicted: &[usize]) -> Result<()> {
        if truth.len() != predicted.len() {
            return Err(Error::shape(
                "metrics_add",
                &[truth.len()],
                &[predicted.len()],
            ));
        }
        let m = self.classes();
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= m || p >= m {
                return Err(Error::invalid(
                    "metrics_add",
                    format!("class {} ≥ {m}", t.max(p)),
                ));
            }
            self.confusion[t][p] += 1;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }

    fn ratio(num: u64, den: u64) -> f64 {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    }

    pub fn accuracy(&self) -> f64 {
        let hit: u64 = (0..self.classes()).map(|c| self.confusion[c][c]).sum();
        Self::ratio(hit, self.total())
    }

    /// Accuracy restricted to voxels whose truth is foreground.
    pub fn foreground_accuracy(&self) -> f64 {
        let m = self.classes();
        let hit: u64 = (1..m).map(|c| self.confusion[c][c]).sum();
        let all: u64 = self.confusion[1..].iter().flatten().sum();
        Self::ratio(hit, all)
    }

    /// Background voxels predicted as any foreground class.
    pub fn false_positive_rate(&self) -> f64 {
        let row = &self.confusion[0];
        let bg: u64 = row.iter().sum();
        Self::ratio(bg - row[0], bg)
    }

    pub fn class_accuracy(&self, c: usize) -> f64 {
        let row = &self.confusion[c];
        Self::ratio(row[c], row.iter().sum())
    }

    /// Among voxels of classes `a` and `b`, the fraction predicted as the other one.
    pub fn pair_confusion(&self, a: usize, b: usize) -> f64 {
        let swapped = self.confusion[a][b] + self.confusion[b][a];
        let all: u64 = self.confusion[a].iter().chain(&self.confusion[b]).sum();
        Self::ratio(swapped, all)
    }

    /// Car/truck swap rate, or 0 when the class set has no such pair.
    pub fn vehicle_confusion(&self) -> f64 {
        if self.classes() > TRUCK {
            self.pair_confusion(CAR, TRUCK)
        } else {
            0.0
        }
    }
}

pub fn evaluate<P: VoxelPredictor + ?Sized>(predictor: &P, samples: &[Sample]) -> Result<Metrics> {
    let m = samples
        .first()
        .map(Sample::classes)
        .ok_or_else(|| Error::invalid("evaluate", "no samples"))?;
    let mut metrics = Metrics::new(m);
    for s in samples {
        metrics.add(&s.labels, &predictor.predict(s)?)?;
    }
    Ok(metrics)
}

/// One row of an experiment log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub strategy: Strategy,
    pub representation: crate::semantics::Representation,
    pub seed: u64,
    pub accuracy: f64,
    pub fg_accuracy: f64,
    pub fp_rate: f64,
    pub steps: usize,
    pub wall_ms: u128,
    pub metrics: Metrics,
}

pub const CSV_HEADER: &str = "strategy,repr,seed,acc,fg_acc,fp_rate,steps,wall_ms";

impl Report {
    pub fn new(cfg: &ExperimentConfig, metrics: Metrics, steps: usize, wall_ms: u128) -> Self {
        Self {
            strategy: cfg.strategy,
            representation: cfg.representation,
            seed: cfg.training.seed,
            accuracy: metrics.accuracy(),
            fg_accuracy: metrics.foreground_accuracy(),
            fp_rate: metrics.false_positive_rate(),
            steps,
            wall_ms,
            metrics,
        }
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.6},{:.6},{},{}",
            self.strategy,
            self.representation,
            self.seed,
            self.accuracy,
            self.fg_accuracy,
            self.fp_rate,
            self.steps,
            self.wall_ms
        )
    }

    /// Equality ignoring wall-clock time.
    pub fn same_result(&self, other: &Report) -> bool {
        Self {
            wall_ms: 0,
            ..self.clone()
        } == Self {
            wall_ms: 0,
            ..other.clone()
        }
    }
}

pub fn to_csv(reports: &[Report]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_by_hand() {
        let mut m = Metrics::new(3);
        m.add(&[0, 0, 0, 0, 1, 1, 2, 2], &[0, 0, 1, 2, 1, 2, 2, 1])
            .unwrap();
        assert_eq!(m.total(), 8);
        assert!((m.accuracy() - 4.0 / 8.0).abs() < 1e-12);
        assert!((m.foreground_accuracy() - 2.0 / 4.0).abs() < 1e-12);
        assert!((m.false_positive_rate() - 2.0 / 4.0).abs() < 1e-12);
        assert!((m.class_accuracy(2) - 0.5).abs() < 1e-12);
        assert!((m.pair_confusion(1, 2) - 2.0 / 4.0).abs() < 1e-12);
    }

    #[test]
    fn empty_rows_score_zero() {
        let m = Metrics::new(4);
        assert_eq!(m.accuracy(), 0.0);
        assert_eq!(m.false_positive_rate(), 0.0);
        assert_eq!(m.vehicle_confusion(), 0.0);
    }

    #[test]
    fn rejects_bad_input() {
        let mut m = Metrics::new(2);
        assert!(m.add(&[0], &[0, 1]).is_err());
        assert!(m.add(&[2], &[0]).is_err());
    }

    #[test]
    fn csv_layout() {
        let cfg = ExperimentConfig::default();
        let mut metrics = Metrics::new(cfg.classes());
        metrics.add(&[0, 1], &[0, 1]).unwrap();
        let r = Report::new(&cfg, metrics, 10, 7);
        let csv = to_csv(std::slice::from_ref(&r));
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(CSV_HEADER));
        assert_eq!(
            lines.next(),
            Some("aaf,score,0,1.000000,1.000000,0.000000,10,7")
        );
        let later = Report {
            wall_ms: 99,
            ..r.clone()
        };
        assert!(r.same_result(&later));
    }
}
