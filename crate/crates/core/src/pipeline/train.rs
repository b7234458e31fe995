use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{AdamW, Mode, Module, OneCycleSchedule, Tape};

use super::config::ExperimentConfig;
use super::dataset::{Dataset, Sample};
use super::metrics::{evaluate, Report};
use super::model::FusionModel;

pub struct TrainOutcome {
    pub model: FusionModel,
    /// Mean loss of every optimizer step.
    pub losses: Vec<f64>,
}

/// Per-class weights `k · n_c^-power`, with `k` chosen so the weighted sample
/// count equals the total. Power 1 gives `total / (present · n_c)`; absent
/// classes get weight 0.
pub fn class_weights(samples: &[Sample], classes: usize, power: f64) -> Vec<f64> {
    let mut counts = vec![0usize; classes];
    for s in samples {
        for &l in &s.labels {
            counts[l] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    let raw: Vec<f64> = counts
        .iter()
        .map(|&c| if c == 0 { 0.0 } else { (c as f64).powf(-power) })
        .collect();
    let mass: f64 = counts.iter().zip(&raw).map(|(&c, w)| c as f64 * w).sum();
    if mass == 0.0 {
        return raw;
    }
    raw.iter().map(|w| w * total as f64 / mass).collect()
}

fn step_loss(
    model: &mut FusionModel,
    sample: &Sample,
    weights: &[f64],
    grads: &mut [Vec<f64>],
) -> Result<f64> {
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, sample, Mode::Train)?;
    let w: Vec<f64> = sample.labels.iter().map(|&l| weights[l]).collect();
    let loss = tape.cross_entropy(out.logits, &sample.labels, &w)?;
    let value = tape.value(loss).item();
    let g = tape.backward(loss)?;
    for (acc, p) in grads.iter_mut().zip(model.params_mut()) {
        if g.write_to(p) {
            if let Some(pg) = p.grad.take() {
                for (a, b) in acc.iter_mut().zip(pg) {
                    *a += b;
                }
            }
        }
    }
    Ok(value)
}

pub fn train_on(cfg: &ExperimentConfig, samples: &[Sample]) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("no training samples".into()));
    }
    let t = &cfg.training;
    let mut model = FusionModel::new(cfg)?;
    let weights = class_weights(samples, cfg.classes(), t.class_weight_power);
    let schedule = OneCycleSchedule::new(t.max_lr, t.steps, t.warmup_fraction)?;
    let mut opt = AdamW::new(0.9, 0.999, 1e-8, t.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(t.steps);
    for step in 0..t.steps {
        let mut grads: Vec<Vec<f64>> = model
            .params()
            .iter()
            .map(|p| vec![0.0; p.numel()])
            .collect();
        let mut loss = 0.0;
        for _ in 0..t.batch_scenes {
            if order.is_empty() {
                order = (0..samples.len()).collect();
                order.shuffle(&mut rng);
            }
            let i = order.pop().expect("refilled above");
            loss += step_loss(&mut model, &samples[i], &weights, &mut grads)?;
        }
        loss /= t.batch_scenes as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        let scale = 1.0 / t.batch_scenes as f64;
        let mut params = model.params_mut();
        for (p, g) in params.iter_mut().zip(grads) {
            p.grad = Some(g.into_iter().map(|v| v * scale).collect());
        }
        opt.step(&mut params, schedule.lr(step)?)?;
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Diverged {
                step,
                loss: f64::NAN,
            });
        }
        losses.push(loss);
    }
    Ok(TrainOutcome { model, losses })
}

/// Synthesizes data for `cfg`, trains, and scores on the held-out split.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<(TrainOutcome, Report)> {
    let start = Instant::now();
    let data = Dataset::synthesize(cfg)?;
    let outcome = train_on(cfg, &data.train)?;
    let metrics = evaluate(&outcome.model, &data.eval)?;
    let report = Report::new(
        cfg,
        metrics,
        cfg.training.steps,
        start.elapsed().as_millis(),
    );
    Ok((outcome, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::config::Strategy;

    fn tiny(strategy: Strategy) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.strategy = strategy;
        cfg.training.steps = 6;
        cfg.data.train_scenes = 2;
        cfg.data.eval_scenes = 1;
        cfg
    }

    #[test]
    fn weights_balance_classes() {
        let cfg = tiny(Strategy::Aaf);
        let data = Dataset::synthesize(&cfg).unwrap();
        let w = class_weights(&data.train, 4, 1.0);
        let mut counts = [0usize; 4];
        for s in &data.train {
            for &l in &s.labels {
                counts[l] += 1;
            }
        }
        let total: usize = counts.iter().sum();
        let present = counts.iter().filter(|&&c| c > 0).count();
        let mass: f64 = counts.iter().zip(&w).map(|(&c, w)| c as f64 * w).sum();
        assert!((mass - total as f64).abs() < 1e-9 * total as f64);
        for (c, w) in counts.iter().zip(&w) {
            if *c > 0 {
                assert!((*c as f64 * w - total as f64 / present as f64).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn every_strategy_trains() {
        for s in Strategy::ALL {
            let (out, report) = run_experiment(&tiny(s)).unwrap();
            assert_eq!(out.losses.len(), 6);
            assert!(out.losses.iter().all(|l| l.is_finite()));
            assert!(report.accuracy >= 0.0 && report.accuracy <= 1.0);
        }
    }

    #[test]
    fn divergence_is_reported() {
        let mut cfg = tiny(Strategy::Sem2dOnly);
        cfg.training.max_lr = 1e300;
        let data = Dataset::synthesize(&cfg).unwrap();
        match train_on(&cfg, &data.train) {
            Err(Error::Diverged { .. }) => {}
            Err(e) => panic!("unexpected error {e}"),
            Ok(_) => panic!("training should diverge"),
        }
    }
}
