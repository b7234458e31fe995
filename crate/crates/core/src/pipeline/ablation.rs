use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::semantics::Representation;

use super::config::{ExperimentConfig, Strategy};
use super::metrics::Report;
use super::train::run_experiment;

/// A grid of runs sharing one base config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub strategies: Vec<Strategy>,
    pub representations: Vec<Representation>,
    pub seeds: Vec<u64>,
    pub base: ExperimentConfig,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            strategies: Strategy::ALL.to_vec(),
            representations: vec![Representation::Score],
            seeds: (0..5).collect(),
            base: ExperimentConfig::default(),
        }
    }
}

impl AblationConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.strategies.is_empty() || self.representations.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config(
                "ablation grid needs strategies, representations and seeds".into(),
            ));
        }
        self.runs().iter().try_for_each(ExperimentConfig::validate)
    }

    /// Every config of the grid, seeds varying fastest.
    pub fn runs(&self) -> Vec<ExperimentConfig> {
        let mut out = Vec::new();
        for &strategy in &self.strategies {
            for &representation in &self.representations {
                for &seed in &self.seeds {
                    let mut cfg = self.base.clone();
                    cfg.strategy = strategy;
                    cfg.representation = representation;
                    cfg.training.seed = seed;
                    out.push(cfg);
                }
            }
        }
        out
    }
}

/// Runs the grid, calling `progress` after each finished run.
pub fn run_ablation(
    cfg: &AblationConfig,
    mut progress: impl FnMut(&Report),
) -> Result<Vec<Report>> {
    cfg.validate()?;
    let mut reports = Vec::new();
    for run in cfg.runs() {
        let (_, report) = run_experiment(&run)?;
        progress(&report);
        reports.push(report);
    }
    Ok(reports)
}

/// Mean accuracy per (strategy, representation) group, in first-seen order.
pub fn group_means(reports: &[Report]) -> Vec<(String, f64)> {
    let mut groups: Vec<(String, f64, usize)> = Vec::new();
    for r in reports {
        let key = format!("{}/{}", r.strategy, r.representation);
        match groups.iter_mut().find(|g| g.0 == key) {
            Some(g) => {
                g.1 += r.accuracy;
                g.2 += 1;
            }
            None => groups.push((key, r.accuracy, 1)),
        }
    }
    groups
        .into_iter()
        .map(|(k, s, n)| (k, s / n as f64))
        .collect()
}

/// Per-seed trend flags over an ablation's reports. A flag is `None` when
/// the seed lacks one of the runs it compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OrderingFlags {
    pub seed: u64,
    /// AAF accuracy with scores ≥ one-hot ≥ class ids.
    pub representation_order: Option<bool>,
    /// Score-representation accuracy AAF+DFF ≥ AAF ≥ the better single modality.
    pub strategy_order: Option<bool>,
}

pub fn ordering_flags(reports: &[Report]) -> Vec<OrderingFlags> {
    let mut seeds: Vec<u64> = reports.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    seeds
        .into_iter()
        .map(|seed| {
            let acc = |s: Strategy, r: Representation| {
                reports
                    .iter()
                    .find(|x| x.seed == seed && x.strategy == s && x.representation == r)
                    .map(|x| x.accuracy)
            };
            let representation_order = (|| {
                let id = acc(Strategy::Aaf, Representation::Id)?;
                let onehot = acc(Strategy::Aaf, Representation::OneHot)?;
                let score = acc(Strategy::Aaf, Representation::Score)?;
                Some(score >= onehot && onehot >= id)
            })();
            let strategy_order = (|| {
                let single = acc(Strategy::Sem2dOnly, Representation::Score)?
                    .max(acc(Strategy::Sem3dOnly, Representation::Score)?);
                let aaf = acc(Strategy::Aaf, Representation::Score)?;
                let dff = acc(Strategy::AafDff, Representation::Score)?;
                Some(dff >= aaf && aaf >= single)
            })();
            OrderingFlags {
                seed,
                representation_order,
                strategy_order,
            }
        })
        .collect()
}

/// Bar chart of each group's mean accuracy gain over the weakest group, in
/// percentage points.
pub fn delta_chart(reports: &[Report]) -> String {
    let groups = group_means(reports);
    let weakest = groups.iter().map(|g| g.1).fold(f64::INFINITY, f64::min);
    let deltas: Vec<(String, f64)> = groups
        .iter()
        .map(|(k, a)| (k.clone(), 100.0 * (a - weakest)))
        .collect();
    let top_delta = deltas.iter().map(|d| d.1).fold(0.0, f64::max).max(1e-9);
    let (bar, gap, top, plot_h) = (56.0, 24.0, 40.0, 220.0);
    let width = gap + deltas.len().max(1) as f64 * (bar + gap);
    let base_y = top + plot_h;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{:.0}\" font-family=\"sans-serif\" font-size=\"11\">",
        base_y + 40.0
    );
    let _ = writeln!(
        svg,
        "<text x=\"{gap}\" y=\"18\">voxel accuracy gain over weakest (pt), weakest = {:.2}%</text>",
        100.0 * weakest
    );
    let _ = writeln!(
        svg,
        "<line x1=\"{gap}\" y1=\"{base_y}\" x2=\"{:.0}\" y2=\"{base_y}\" stroke=\"black\"/>",
        width - gap / 2.0
    );
    for (i, (label, d)) in deltas.iter().enumerate() {
        let x = gap + i as f64 * (bar + gap);
        let h = d / top_delta * plot_h;
        let y = base_y - h;
        let mid = x + bar / 2.0;
        let _ = writeln!(
            svg,
            "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{bar}\" height=\"{h:.1}\" fill=\"#4a7ab5\"/>"
        );
        let _ = writeln!(
            svg,
            "<text x=\"{mid:.1}\" y=\"{:.1}\" text-anchor=\"middle\">+{d:.2}</text>",
            y - 4.0
        );
        let _ = writeln!(
            svg,
            "<text x=\"{mid:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{label}</text>",
            base_y + 16.0
        );
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::metrics::Metrics;

    fn report(strategy: Strategy, seed: u64, acc: f64) -> Report {
        let cfg = ExperimentConfig {
            strategy,
            ..ExperimentConfig::default()
        };
        Report {
            accuracy: acc,
            seed,
            ..Report::new(&cfg, Metrics::new(4), 1, 0)
        }
    }

    #[test]
    fn grid_order() {
        let cfg = AblationConfig {
            strategies: vec![Strategy::Aaf, Strategy::Sem2dOnly],
            representations: vec![Representation::Id, Representation::Score],
            seeds: vec![3, 4],
            base: ExperimentConfig::default(),
        };
        let runs = cfg.runs();
        assert_eq!(runs.len(), 8);
        assert_eq!(runs[1].training.seed, 4);
        assert_eq!(runs[2].representation, Representation::Score);
        assert_eq!(runs[4].strategy, Strategy::Sem2dOnly);
        let back = AblationConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn means_and_chart() {
        let rs = vec![
            report(Strategy::Aaf, 0, 0.8),
            report(Strategy::Sem3dOnly, 0, 0.6),
            report(Strategy::Aaf, 1, 0.9),
        ];
        let g = group_means(&rs);
        assert_eq!(g.len(), 2);
        assert_eq!(g[0].0, "aaf/score");
        assert!((g[0].1 - 0.85).abs() < 1e-12);
        let svg = delta_chart(&rs);
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("<rect").count(), 2);
        assert!(svg.contains("sem3d/score"));
        assert!(svg.contains("+25.00"));
        assert!(svg.contains("+0.00"));
    }

    fn report_repr(strategy: Strategy, repr: Representation, seed: u64, acc: f64) -> Report {
        Report {
            representation: repr,
            ..report(strategy, seed, acc)
        }
    }

    #[test]
    fn flags_per_seed() {
        use Representation::*;
        let rs = vec![
            report(Strategy::Sem2dOnly, 0, 0.70),
            report(Strategy::Sem3dOnly, 0, 0.90),
            report(Strategy::Aaf, 0, 0.95),
            report(Strategy::AafDff, 0, 0.95),
            report_repr(Strategy::Aaf, OneHot, 0, 0.93),
            report_repr(Strategy::Aaf, Id, 0, 0.93),
            report(Strategy::Sem3dOnly, 1, 0.90),
            report(Strategy::Aaf, 1, 0.89),
        ];
        let f = ordering_flags(&rs);
        assert_eq!(f.len(), 2);
        assert_eq!(f[0].representation_order, Some(true));
        assert_eq!(f[0].strategy_order, Some(true));
        assert_eq!(f[1].representation_order, None);
        assert_eq!(f[1].strategy_order, None);
    }

    #[test]
    fn empty_grid_rejected() {
        let cfg = AblationConfig {
            seeds: vec![],
            ..AblationConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
