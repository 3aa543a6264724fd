//! The training loop and the on-disk run directory.
//!
//! Every random draw of step `s` (the batch, then dropout masks) comes from
//! `Rng::stream(seed, STEP_STREAM_BASE + s)`, so a run resumed from a
//! checkpoint draws exactly what an uninterrupted run would.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::fusion::fuse;
use crate::harness::checkpoint::{save_checkpoint, Checkpoint};
use crate::harness::config::RunConfig;
use crate::harness::trace::{
    export_traces, selection_stats, ModuleSelection, RoutingDecision, TRACE_FILE,
};
use crate::model::{build_mlp, ExpertClass, Network, NetworkGrads, Target};
use crate::numerics::Rng;
use crate::optimizer::SparseAdamW;
use crate::synthtasks::{gen_spectral_target, sample_batch, SpectralTask};

pub const TASK_STREAM: u64 = 0;
pub const INIT_STREAM: u64 = 1;
pub const STEP_STREAM_BASE: u64 = 2;

pub const CONFIG_FILE: &str = "config";
pub const METRICS_FILE: &str = "metrics.csv";

/// What happened at one step. Losses are measured at the parameters the
/// step started from.
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub step: usize,
    pub train_loss: f64,
    pub population_loss: Option<f64>,
    pub decisions: Vec<RoutingDecision>,
}

#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: RunConfig,
    pub task: SpectralTask,
    pub network: Network,
    pub optimizer: SparseAdamW,
    step: usize,
}

fn grads_finite(grads: &NetworkGrads) -> bool {
    grads.iter().flatten().flatten().all(|g| g.is_finite())
}

impl Trainer {
    /// Draws the task and the initial network from the configured seed.
    /// With no hidden layers the student starts from the teacher's base weight.
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let task = Self::make_task(&config)?;
        let mut rng = Rng::stream(config.seed, INIT_STREAM);
        let mut network = build_mlp(&config.network_spec(), &mut rng)?;
        if config.net.hidden.is_empty() {
            network.modules[0].base = task.base.clone();
        }
        let optimizer = SparseAdamW::new(config.optimizer.clone(), &network)?;
        Ok(Trainer {
            config,
            task,
            network,
            optimizer,
            step: 0,
        })
    }

    fn make_task(config: &RunConfig) -> Result<SpectralTask> {
        gen_spectral_target(
            config.task.d_out,
            config.task.d_in,
            config.task.regime.clone(),
            config.task.noise_std,
            &mut Rng::stream(config.seed, TASK_STREAM),
        )
    }

    /// Continues from `ckpt`. The task is regenerated from the seed.
    pub fn resume(config: RunConfig, ckpt: Checkpoint) -> Result<Self> {
        config.validate()?;
        let task = Self::make_task(&config)?;
        let states = ckpt
            .optimizer
            .ok_or_else(|| Error::contract("checkpoint carries no optimizer state"))?;
        let mut optimizer = SparseAdamW::new(config.optimizer.clone(), &ckpt.network)?;
        if states.len() != optimizer.states.len()
            || states
                .iter()
                .zip(&optimizer.states)
                .any(|(a, b)| a.len() != b.len())
        {
            return Err(Error::contract(
                "checkpoint optimizer state does not match the network",
            ));
        }
        optimizer.states = states;
        Ok(Trainer {
            config,
            task,
            network: ckpt.network,
            optimizer,
            step: ckpt.step,
        })
    }

    /// Index of the next step to run.
    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            step: self.step,
            network: self.network.clone(),
            optimizer: Some(self.optimizer.states.clone()),
        }
    }

    /// Population loss of the fused student; only defined for a single layer.
    pub fn population_loss(&self) -> Result<Option<f64>> {
        if self.network.modules.len() != 1 {
            return Ok(None);
        }
        let m = &self.network.modules[0];
        let w = fuse(m)?;
        self.task.population_loss(&w, m.bias.as_ref()).map(Some)
    }

    /// Runs one optimizer step. A non-finite loss or gradient leaves every
    /// parameter and moment untouched and returns [`Error::Numeric`].
    pub fn step(&mut self) -> Result<StepRecord> {
        let s = self.step;
        let mut rng = Rng::stream(self.config.seed, STEP_STREAM_BASE + s as u64);
        let (x, y) = sample_batch(&self.task, self.config.batch, &mut rng)?;
        let population_loss = self.population_loss()?;
        let (train_loss, grads) =
            self.network
                .loss_and_grads(&x, &Target::Regression(y), true, &mut rng)?;
        if !train_loss.is_finite() {
            return Err(Error::Numeric(format!(
                "training loss is {train_loss} at step {s}"
            )));
        }
        if !grads_finite(&grads) {
            return Err(Error::Numeric(format!("non-finite gradient at step {s}")));
        }
        let decisions = self.optimizer.step(&mut self.network, grads, s)?;
        self.step += 1;
        Ok(StepRecord {
            step: s,
            train_loss,
            population_loss,
            decisions,
        })
    }

    /// Runs until `step_index() == until`, passing each record to `on_step`.
    pub fn run_until(
        &mut self,
        until: usize,
        mut on_step: impl FnMut(&StepRecord) -> Result<()>,
    ) -> Result<()> {
        while self.step < until {
            let rec = self.step()?;
            on_step(&rec)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub steps: usize,
    pub final_train_loss: f64,
    /// Population loss after the last update, when defined.
    pub final_population_loss: Option<f64>,
    /// Over all steps, not just traced ones.
    pub selection: Vec<ModuleSelection>,
    /// Share of (module, step) top picks that went to each expert class.
    pub class_fractions: BTreeMap<String, f64>,
    pub final_checkpoint: PathBuf,
}

struct RunFiles {
    metrics: BufWriter<File>,
    traces: BufWriter<File>,
}

impl RunFiles {
    fn create(dir: &Path) -> Result<Self> {
        let open = |name: &str| {
            let p = dir.join(name);
            File::create(&p)
                .map(BufWriter::new)
                .map_err(|e| Error::io(&p, e))
        };
        let mut metrics = open(METRICS_FILE)?;
        writeln!(metrics, "step,train_loss,population_loss")
            .map_err(|e| Error::io(dir.join(METRICS_FILE), e))?;
        Ok(RunFiles {
            metrics,
            traces: open(TRACE_FILE)?,
        })
    }

    fn record(&mut self, dir: &Path, rec: &StepRecord, trace: bool) -> Result<()> {
        let pop = rec.population_loss.map_or(String::new(), |p| p.to_string());
        writeln!(self.metrics, "{},{},{pop}", rec.step, rec.train_loss)
            .map_err(|e| Error::io(dir.join(METRICS_FILE), e))?;
        if trace {
            for d in &rec.decisions {
                writeln!(self.traces, "{}", d.to_json_line())
                    .map_err(|e| Error::io(dir.join(TRACE_FILE), e))?;
            }
        }
        Ok(())
    }

    fn flush(&mut self, dir: &Path) -> Result<()> {
        self.metrics
            .flush()
            .map_err(|e| Error::io(dir.join(METRICS_FILE), e))?;
        self.traces
            .flush()
            .map_err(|e| Error::io(dir.join(TRACE_FILE), e))
    }
}

pub fn checkpoint_dir(run_dir: &Path, step: usize) -> PathBuf {
    run_dir.join(format!("ckpt_{step}"))
}

/// Trains from scratch and writes the run directory: `config`,
/// `metrics.csv`, `traces.jsonl`, `winner_grid.csv`, `winner_summary.csv`
/// and `ckpt_<step>/` directories. On a non-finite loss the last good state
/// is checkpointed before the error is returned.
pub fn train_run(config: &RunConfig) -> Result<RunSummary> {
    let dir = config.out_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut trainer = Trainer::new(config.clone())?;
    fs::write(dir.join(CONFIG_FILE), config.to_text())
        .map_err(|e| Error::io(dir.join(CONFIG_FILE), e))?;
    let mut files = RunFiles::create(&dir)?;

    let mut all_decisions: Vec<RoutingDecision> = Vec::new();
    let mut last_loss = f64::NAN;
    let log_every = (config.steps / 10).max(1);
    while trainer.step_index() < config.steps {
        let rec = match trainer.step() {
            Ok(rec) => rec,
            Err(err @ Error::Numeric(_)) => {
                files.flush(&dir)?;
                let path = checkpoint_dir(&dir, trainer.step_index());
                save_checkpoint(&trainer.checkpoint(), &path)?;
                log::error!("{err}; last good state saved to {}", path.display());
                return Err(err);
            }
            Err(err) => return Err(err),
        };
        let traced = config.trace_every > 0 && rec.step % config.trace_every == 0;
        files.record(&dir, &rec, traced)?;
        last_loss = rec.train_loss;
        if rec.step % log_every == 0 {
            log::info!(
                "step {} train_loss {:.6e} population_loss {}",
                rec.step,
                rec.train_loss,
                rec.population_loss
                    .map_or("n/a".into(), |p| format!("{p:.6e}"))
            );
        }
        all_decisions.extend(rec.decisions);
        let done = trainer.step_index();
        if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 && done < config.steps
        {
            files.flush(&dir)?;
            save_checkpoint(&trainer.checkpoint(), &checkpoint_dir(&dir, done))?;
        }
    }
    files.flush(&dir)?;
    let final_checkpoint = checkpoint_dir(&dir, config.steps);
    save_checkpoint(&trainer.checkpoint(), &final_checkpoint)?;
    export_traces(&dir)?;

    let mut class_counts: BTreeMap<String, usize> = BTreeMap::new();
    for d in &all_decisions {
        let module = trainer
            .network
            .modules
            .iter()
            .find(|m| m.name == d.module_name)
            .expect("decisions come from this network");
        if let Some(&top) = d.winners.first() {
            *class_counts
                .entry(module.expert_class(top).to_string())
                .or_default() += 1;
        }
    }
    let total = all_decisions.len().max(1) as f64;
    let mut class_fractions: BTreeMap<String, f64> = [ExpertClass::Fft, ExpertClass::Lora]
        .iter()
        .map(|c| (c.to_string(), 0.0))
        .collect();
    for (k, v) in class_counts {
        class_fractions.insert(k, v as f64 / total);
    }

    Ok(RunSummary {
        run_dir: dir,
        steps: config.steps,
        final_train_loss: last_loss,
        final_population_loss: trainer.population_loss()?,
        selection: selection_stats(&all_decisions),
        class_fractions,
        final_checkpoint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::checkpoint::load_checkpoint;

    fn small(dir: &Path) -> RunConfig {
        let mut cfg = RunConfig::parse(
            "task.d_out = 6\ntask.d_in = 5\nnet.ranks = 1,2\nrun.batch = 8\nrun.steps = 12\nrun.checkpoint_every = 4\n",
        )
        .unwrap();
        cfg.out_dir = dir.to_path_buf();
        cfg
    }

    #[test]
    fn run_directory_layout() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(dir.path());
        let summary = train_run(&cfg).unwrap();
        for name in [
            CONFIG_FILE,
            METRICS_FILE,
            TRACE_FILE,
            "winner_grid.csv",
            "winner_summary.csv",
        ] {
            assert!(dir.path().join(name).exists(), "missing {name}");
        }
        for s in [4, 8, 12] {
            assert!(
                checkpoint_dir(dir.path(), s).join("manifest").exists(),
                "missing ckpt_{s}"
            );
        }
        let metrics = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
        assert_eq!(metrics.lines().count(), 1 + 12);
        assert_eq!(RunConfig::load(&dir.path().join(CONFIG_FILE)).unwrap(), cfg);
        let fr: f64 = summary.class_fractions.values().sum();
        assert!((fr - 1.0).abs() < 1e-12);
    }

    #[test]
    fn resumed_run_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small(dir.path());
        cfg.net.dropout = 0.2;
        let mut full = Trainer::new(cfg.clone()).unwrap();
        full.run_until(12, |_| Ok(())).unwrap();

        let mut first = Trainer::new(cfg.clone()).unwrap();
        first.run_until(5, |_| Ok(())).unwrap();
        let path = dir.path().join("mid");
        save_checkpoint(&first.checkpoint(), &path).unwrap();
        let mut second = Trainer::resume(cfg, load_checkpoint(&path).unwrap()).unwrap();
        second.run_until(12, |_| Ok(())).unwrap();

        for (a, b) in full.network.modules.iter().zip(&second.network.modules) {
            assert!(a.base.bitwise_eq(&b.base));
            for (x, y) in a.experts.iter().zip(&b.experts) {
                assert!(x.a.bitwise_eq(&y.a) && x.b.bitwise_eq(&y.b));
            }
        }
    }

    #[test]
    fn divergence_saves_last_good_state() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small(dir.path());
        cfg.optimizer.lr_fft = 1e200;
        cfg.optimizer.lambda_fft = 0.0;
        cfg.checkpoint_every = 0;
        match train_run(&cfg) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("step"), "{msg}"),
            other => panic!("expected a numeric error, got {other:?}"),
        }
        let saved: Vec<_> = fs::read_dir(dir.path())
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_name().to_string_lossy().starts_with("ckpt_"))
            .collect();
        assert_eq!(saved.len(), 1);
        let ckpt = load_checkpoint(&saved[0].path()).unwrap();
        assert!(ckpt.network.modules.iter().all(|m| m.base.is_finite()));
    }
}
