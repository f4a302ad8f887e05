//! Competitive training: several identically initialized models train in
//! parallel under different randomness; at each stage boundary the one
//! with the lowest validation loss wins and its parameters and optimizer
//! state are broadcast to the rest. The returned checkpoint is the best
//! stage winner seen over the whole run.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::network::{Checkpoint, NetworkConfig};
use crate::train::{SliceSet, TrainConfig, Trainer};

pub const DEFAULT_NUM_COMPETITORS: usize = 3;
pub const DEFAULT_STAGE_EPOCHS: usize = 30;
pub const DEFAULT_NUM_STAGES: usize = 6;

#[derive(Clone, Debug, PartialEq)]
pub struct CtsConfig {
    pub num_competitors: usize,
    pub stage_epochs: usize,
    pub num_stages: usize,
    pub base_seed: u64,
}

impl CtsConfig {
    pub fn defaults() -> CtsConfig {
        CtsConfig {
            num_competitors: DEFAULT_NUM_COMPETITORS,
            stage_epochs: DEFAULT_STAGE_EPOCHS,
            num_stages: DEFAULT_NUM_STAGES,
            base_seed: 0,
        }
    }

    /// Full validation, as used by the command line: a competition needs
    /// at least two entrants.
    pub fn validate(&self, total_epochs: usize) -> Result<()> {
        if self.num_competitors < 2 {
            return Err(Error::Config(format!(
                "cts: num_competitors {} must be >= 2",
                self.num_competitors
            )));
        }
        self.validate_degenerate(total_epochs)
    }

    /// Everything except the two-competitor floor; single-competitor runs
    /// exist to prove equivalence with plain training.
    pub fn validate_degenerate(&self, total_epochs: usize) -> Result<()> {
        if self.num_competitors == 0 {
            return Err(Error::Config("cts: num_competitors must be >= 1".into()));
        }
        if self.stage_epochs == 0 || self.num_stages == 0 {
            return Err(Error::Config("cts: stage_epochs and num_stages must be >= 1".into()));
        }
        if self.stage_epochs * self.num_stages != total_epochs {
            return Err(Error::Config(format!(
                "cts: stage_epochs {} x num_stages {} != epochs {total_epochs}",
                self.stage_epochs, self.num_stages
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageRecord {
    pub stage: usize,
    pub val_losses: Vec<f64>,
    pub winner: usize,
    /// Parameter hashes taken after the broadcast; all equal by contract.
    pub param_hashes: Vec<u64>,
}

#[derive(Clone, Debug)]
pub struct CtsOutcome {
    pub checkpoint: Checkpoint,
    pub stages: Vec<StageRecord>,
}

pub fn stage_log_to_csv(stages: &[StageRecord]) -> String {
    let mut out = String::from("stage,competitor,val_loss,winner\n");
    for s in stages {
        for (c, &loss) in s.val_losses.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{:.6},{}\n",
                s.stage,
                c,
                loss,
                (c == s.winner) as u8
            ));
        }
    }
    out
}

/// Runs the staged competition. All competitors start from the parameters
/// drawn under `cts.base_seed`; competitor c's shuffle, augmentation, and
/// dropout streams are seeded `base_seed + c`. With `parallel` the
/// competitors of a stage train on worker threads; results are identical
/// either way.
pub fn train_cts(
    net: &NetworkConfig,
    cfg: &TrainConfig,
    cts: &CtsConfig,
    train_set: &SliceSet,
    val_set: &SliceSet,
    parallel: bool,
) -> Result<CtsOutcome> {
    net.validate()?;
    cfg.validate()?;
    cts.validate_degenerate(cfg.epochs)?;

    let mut trainers: Vec<Trainer> = (0..cts.num_competitors)
        .map(|c| Trainer::new(net, cts.base_seed, cts.base_seed + c as u64))
        .collect::<Result<_>>()?;

    let mut stages = Vec::with_capacity(cts.num_stages);
    let mut best: Option<(f64, Checkpoint)> = None;
    for stage in 0..cts.num_stages {
        let run = |(c, t): (usize, &mut Trainer)| -> Result<f64> {
            t.run_epochs(train_set, cfg, cts.stage_epochs)
                .and_then(|_| t.validate(val_set, cfg))
                .map_err(|e| Error::Numeric(format!("competitor {c}: {e}")))
        };
        let val_losses: Vec<f64> = if parallel {
            trainers.par_iter_mut().enumerate().map(run).collect::<Result<_>>()?
        } else {
            trainers.iter_mut().enumerate().map(run).collect::<Result<_>>()?
        };

        // lowest validation loss wins; ties go to the lowest index
        let winner = val_losses
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| a.total_cmp(b))
            .map(|(c, _)| c)
            .expect("at least one competitor");
        let winner_loss = val_losses[winner];

        if best.as_ref().map_or(true, |(b, _)| winner_loss < *b) {
            best = Some((winner_loss, trainers[winner].snapshot(winner_loss)));
        }

        if trainers.len() > 1 {
            let (src, rest) = {
                let (head, tail) = trainers.split_at_mut(winner);
                let (w, after) = tail.split_first_mut().expect("winner index in range");
                (w, head.iter_mut().chain(after.iter_mut()))
            };
            for t in rest {
                t.adopt(src);
            }
        }
        let param_hashes: Vec<u64> = trainers.iter().map(|t| t.param_hash()).collect();
        debug_assert!(param_hashes.iter().all(|&h| h == param_hashes[0]));

        stages.push(StageRecord { stage, val_losses, winner, param_hashes });
    }

    let (_, checkpoint) = best.expect("at least one stage ran");
    Ok(CtsOutcome { checkpoint, stages })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::tests::{tiny_cfg, tiny_net, tiny_sets};
    use crate::train::train;

    fn checkpoint_bits(c: &Checkpoint) -> Vec<u32> {
        c.tensors.iter().flat_map(|(_, d)| d.iter().map(|v| v.to_bits())).collect()
    }

    #[test]
    fn config_validation() {
        assert!(CtsConfig::defaults().validate(180).is_ok());
        assert!(CtsConfig::defaults().validate(179).is_err());
        let one = CtsConfig { num_competitors: 1, ..CtsConfig::defaults() };
        assert!(one.validate(180).is_err());
        assert!(one.validate_degenerate(180).is_ok());
        let zero = CtsConfig { num_competitors: 0, ..CtsConfig::defaults() };
        assert!(zero.validate_degenerate(180).is_err());
    }

    #[test]
    fn single_competitor_equals_plain_training() {
        let (train_set, val_set) = tiny_sets(2, 100);
        let cfg = tiny_cfg(4, 2, 21);
        let cts = CtsConfig { num_competitors: 1, stage_epochs: 2, num_stages: 2, base_seed: 21 };

        let plain = train(&tiny_net(), &cfg, &train_set, &val_set).unwrap();
        let comp = train_cts(&tiny_net(), &cfg, &cts, &train_set, &val_set, false).unwrap();

        assert_eq!(checkpoint_bits(&plain.checkpoint), checkpoint_bits(&comp.checkpoint));
        assert_eq!(plain.checkpoint.epoch, comp.checkpoint.epoch);
        assert_eq!(plain.checkpoint.val_loss, comp.checkpoint.val_loss);
        let plain_vals: Vec<u64> = plain.history.iter().map(|r| r.val_loss.to_bits()).collect();
        let comp_vals: Vec<u64> =
            comp.stages.iter().map(|s| s.val_losses[0].to_bits()).collect();
        assert_eq!(plain_vals, comp_vals);
    }

    #[test]
    fn winners_minimize_and_broadcast_unifies() {
        let (train_set, val_set) = tiny_sets(2, 110);
        let cfg = tiny_cfg(6, 6, 23);
        let cts = CtsConfig { num_competitors: 3, stage_epochs: 2, num_stages: 3, base_seed: 23 };
        let out = train_cts(&tiny_net(), &cfg, &cts, &train_set, &val_set, true).unwrap();

        assert_eq!(out.stages.len(), 3);
        for s in &out.stages {
            assert_eq!(s.val_losses.len(), 3);
            let min = s.val_losses.iter().fold(f64::INFINITY, |a, &b| a.min(b));
            assert_eq!(s.val_losses[s.winner], min);
            assert!(s.val_losses[..s.winner].iter().all(|&v| v > min));
            assert!(s.param_hashes.iter().all(|&h| h == s.param_hashes[0]));
        }

        // competitors actually diverge before selection
        assert!(out.stages.iter().any(|s| {
            s.val_losses.iter().any(|&v| v != s.val_losses[0])
        }));

        // overall winner is the best stage winner, earliest on ties
        let winner_losses: Vec<f64> =
            out.stages.iter().map(|s| s.val_losses[s.winner]).collect();
        let best = winner_losses.iter().fold(f64::INFINITY, |a, &b| a.min(b));
        let first_best = winner_losses.iter().position(|&v| v == best).unwrap();
        assert_eq!(out.checkpoint.val_loss, best as f32);
        assert_eq!(out.checkpoint.epoch, ((first_best + 1) * cts.stage_epochs) as u64);
    }

    #[test]
    fn serial_and_parallel_runs_match_bitwise() {
        let (train_set, val_set) = tiny_sets(2, 120);
        let cfg = tiny_cfg(4, 4, 25);
        let cts = CtsConfig { num_competitors: 3, stage_epochs: 2, num_stages: 2, base_seed: 25 };
        let serial = train_cts(&tiny_net(), &cfg, &cts, &train_set, &val_set, false).unwrap();
        let par = train_cts(&tiny_net(), &cfg, &cts, &train_set, &val_set, true).unwrap();
        let par2 = train_cts(&tiny_net(), &cfg, &cts, &train_set, &val_set, true).unwrap();

        for (a, b) in [(&serial, &par), (&par, &par2)] {
            assert_eq!(a.stages.len(), b.stages.len());
            for (x, y) in a.stages.iter().zip(b.stages.iter()) {
                assert_eq!(x.winner, y.winner);
                assert_eq!(x.param_hashes, y.param_hashes);
                let xb: Vec<u64> = x.val_losses.iter().map(|v| v.to_bits()).collect();
                let yb: Vec<u64> = y.val_losses.iter().map(|v| v.to_bits()).collect();
                assert_eq!(xb, yb);
            }
            assert_eq!(checkpoint_bits(&a.checkpoint), checkpoint_bits(&b.checkpoint));
        }
    }

    #[test]
    fn stage_log_csv_format() {
        let stages = vec![StageRecord {
            stage: 0,
            val_losses: vec![0.5, 0.25, 0.75],
            winner: 1,
            param_hashes: vec![1, 1, 1],
        }];
        assert_eq!(
            stage_log_to_csv(&stages),
            "stage,competitor,val_loss,winner\n0,0,0.500000,0\n0,1,0.250000,1\n0,2,0.750000,0\n"
        );
    }
}
