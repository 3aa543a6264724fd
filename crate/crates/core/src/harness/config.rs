//! Run configuration as flat `key = value` text.
//!
//! Blank lines and `#` comments are ignored. Lists are comma-separated.
//! Unknown keys are rejected. [`RunConfig::to_text`] writes every key in a
//! fixed order and parses back to an equal value.
//!
//! | key | default | meaning |
//! |-----|---------|---------|
//! | `seed` | 0 | master seed |
//! | `task.d_out`, `task.d_in` | 64 | teacher shape |
//! | `task.regime` | `heavy_tail` | `heavy_tail`, `concentrated` or `custom` |
//! | `task.exponent` | 0.1 | power-law exponent for `heavy_tail` |
//! | `task.rank` | 8 | rank for `concentrated` |
//! | `task.spectrum` | empty | singular values for `custom` |
//! | `task.noise_std` | 0 | label noise |
//! | `net.mode` | `molf` | `molf` or `molf-e` |
//! | `net.hidden` | empty | hidden widths; empty gives a single layer initialised at the teacher's base |
//! | `net.ranks` | `8,16` | LoRA ranks per module |
//! | `net.alpha` | 16 | scale numerator shared by all adapters |
//! | `net.dropout` | 0 | dropout on adapter inputs |
//! | `net.a_std` | 1 | `A` is drawn from `N(0, a_std^2 / d_in)` |
//! | `net.bias` | `true` | whether modules carry a bias |
//! | `opt.beta1`, `opt.beta2`, `opt.eps` | 0.9, 0.999, 1e-8 | moment decay |
//! | `opt.k_top` | 1 | experts updated per module per step |
//! | `opt.lambda_fft`, `opt.lambda_lora` | 0.1, 0.01 | decoupled weight decay |
//! | `opt.scoring` | `EPD` | `EPD`, `PFN` or `DENSE` |
//! | `opt.lr_fft`, `opt.lr_lora` | 1e-3, 5e-3 | base learning rates |
//! | `opt.schedule` | `cosine` | `cosine`, `linear` or `constant` |
//! | `opt.warmup_ratio` | 0.05 | fraction of steps spent warming up |
//! | `opt.grad_clip` | `none` | cap on the joint gradient norm of each module |
//! | `run.steps` | 1000 | optimizer steps |
//! | `run.batch` | 64 | samples per step |
//! | `run.trace_every` | 1 | trace interval in steps, 0 disables |
//! | `run.checkpoint_every` | 0 | checkpoint interval, 0 keeps only the final one |
//! | `run.out_dir` | `runs/molf` | run directory |

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::harness::schedule::{ScheduleKind, ScheduleSpec, DEFAULT_WARMUP_RATIO};
use crate::model::{ExpertLayout, ExpertSpec, Mode, NetworkSpec, DEFAULT_ALPHA, DEFAULT_A_STD};
use crate::optimizer::OptimizerConfig;
use crate::scoring::ScoringMode;
use crate::synthtasks::{
    Regime, DEFAULT_CONCENTRATED_RANK, DEFAULT_DIM, DEFAULT_HEAVY_TAIL_EXPONENT,
};

pub const SEED_ENV: &str = "MOLF_SEED";
pub const DEFAULT_LR_FFT: f64 = 1e-3;
pub const DEFAULT_LR_LORA: f64 = 5e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct TaskConfig {
    pub d_out: usize,
    pub d_in: usize,
    pub regime: Regime,
    pub noise_std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub mode: Mode,
    pub hidden: Vec<usize>,
    pub ranks: Vec<usize>,
    pub alpha: f64,
    pub dropout: f64,
    pub a_std: f64,
    pub bias: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub task: TaskConfig,
    pub net: NetConfig,
    /// The schedule's `total_steps` always equals `steps`.
    pub optimizer: OptimizerConfig,
    pub steps: usize,
    pub batch: usize,
    pub trace_every: usize,
    pub checkpoint_every: usize,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let steps = 1000;
        RunConfig {
            seed: 0,
            task: TaskConfig {
                d_out: DEFAULT_DIM,
                d_in: DEFAULT_DIM,
                regime: Regime::HeavyTail {
                    exponent: DEFAULT_HEAVY_TAIL_EXPONENT,
                },
                noise_std: 0.0,
            },
            net: NetConfig {
                mode: Mode::Molf,
                hidden: Vec::new(),
                ranks: vec![8, 16],
                alpha: DEFAULT_ALPHA,
                dropout: 0.0,
                a_std: DEFAULT_A_STD,
                bias: true,
            },
            optimizer: OptimizerConfig {
                lr_fft: DEFAULT_LR_FFT,
                lr_lora: DEFAULT_LR_LORA,
                schedule: ScheduleSpec::new(ScheduleKind::Cosine, steps),
                ..OptimizerConfig::default()
            },
            steps,
            batch: 64,
            trace_every: 1,
            checkpoint_every: 0,
            out_dir: PathBuf::from("runs/molf"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn schedule_name(s: &ScheduleSpec) -> String {
    if s.total_steps == 0 {
        "constant".into()
    } else {
        s.kind.to_string()
    }
}

impl RunConfig {
    /// Parses `key = value` text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut schedule = "cosine".to_string();
        let mut warmup = DEFAULT_WARMUP_RATIO;
        let mut regime = "heavy_tail".to_string();
        let mut exponent = DEFAULT_HEAVY_TAIL_EXPONENT;
        let mut rank = DEFAULT_CONCENTRATED_RANK;
        let mut spectrum: Vec<f64> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let o = &mut cfg.optimizer;
            match key {
                "seed" => cfg.seed = parse(key, value)?,
                "task.d_out" => cfg.task.d_out = parse(key, value)?,
                "task.d_in" => cfg.task.d_in = parse(key, value)?,
                "task.regime" => regime = value.to_string(),
                "task.exponent" => exponent = parse(key, value)?,
                "task.rank" => rank = parse(key, value)?,
                "task.spectrum" => spectrum = parse_list(key, value)?,
                "task.noise_std" => cfg.task.noise_std = parse(key, value)?,
                "net.mode" => cfg.net.mode = parse(key, value)?,
                "net.hidden" => cfg.net.hidden = parse_list(key, value)?,
                "net.ranks" => cfg.net.ranks = parse_list(key, value)?,
                "net.alpha" => cfg.net.alpha = parse(key, value)?,
                "net.dropout" => cfg.net.dropout = parse(key, value)?,
                "net.a_std" => cfg.net.a_std = parse(key, value)?,
                "net.bias" => cfg.net.bias = parse(key, value)?,
                "opt.beta1" => o.beta1 = parse(key, value)?,
                "opt.beta2" => o.beta2 = parse(key, value)?,
                "opt.eps" => o.eps = parse(key, value)?,
                "opt.k_top" => o.k_top = parse(key, value)?,
                "opt.lambda_fft" => o.lambda_fft = parse(key, value)?,
                "opt.lambda_lora" => o.lambda_lora = parse(key, value)?,
                "opt.scoring" => o.scoring = parse(key, value)?,
                "opt.lr_fft" => o.lr_fft = parse(key, value)?,
                "opt.lr_lora" => o.lr_lora = parse(key, value)?,
                "opt.schedule" => schedule = value.to_ascii_lowercase(),
                "opt.warmup_ratio" => warmup = parse(key, value)?,
                "opt.grad_clip" => {
                    o.grad_clip = if value.eq_ignore_ascii_case("none") {
                        None
                    } else {
                        Some(parse(key, value)?)
                    }
                }
                "run.steps" => cfg.steps = parse(key, value)?,
                "run.batch" => cfg.batch = parse(key, value)?,
                "run.trace_every" => cfg.trace_every = parse(key, value)?,
                "run.checkpoint_every" => cfg.checkpoint_every = parse(key, value)?,
                "run.out_dir" => cfg.out_dir = PathBuf::from(value),
                other => {
                    return Err(Error::Config(format!(
                        "line {}: unknown key {other:?}",
                        i + 1
                    )))
                }
            }
        }
        cfg.task.regime = match regime.as_str() {
            "heavy_tail" => Regime::HeavyTail { exponent },
            "concentrated" => Regime::Concentrated { rank },
            "custom" => Regime::Custom(spectrum),
            other => {
                return Err(Error::Config(format!(
                    "task.regime: unknown regime {other:?}"
                )))
            }
        };
        cfg.optimizer.schedule = if schedule == "constant" {
            ScheduleSpec::constant()
        } else {
            ScheduleSpec {
                kind: schedule.parse()?,
                warmup_ratio: warmup,
                total_steps: cfg.steps,
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| e.context(&path.display().to_string()))
    }

    /// Changes the step count and keeps a non-constant schedule in sync.
    pub fn set_steps(&mut self, steps: usize) {
        self.steps = steps;
        if self.optimizer.schedule.total_steps != 0 {
            self.optimizer.schedule.total_steps = steps;
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.task.d_out == 0 || self.task.d_in == 0 {
            return Err(Error::Config("task dimensions must be positive".into()));
        }
        if self.net.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        if self.net.ranks.contains(&0) {
            return Err(Error::Config("LoRA ranks must be positive".into()));
        }
        if !(self.net.alpha > 0.0 && self.net.alpha.is_finite()) {
            return Err(Error::Config(format!(
                "net.alpha must be positive, got {}",
                self.net.alpha
            )));
        }
        if !(0.0..1.0).contains(&self.net.dropout) {
            return Err(Error::Config(format!(
                "net.dropout must be in [0, 1), got {}",
                self.net.dropout
            )));
        }
        if self.steps == 0 || self.batch == 0 {
            return Err(Error::Config("run.steps and run.batch must be >= 1".into()));
        }
        let sched = self.optimizer.schedule.total_steps;
        if sched != 0 && sched != self.steps {
            return Err(Error::Config(format!(
                "schedule covers {sched} steps but the run has {}",
                self.steps
            )));
        }
        let routable = self.net.ranks.len() + usize::from(self.net.mode == Mode::Molf);
        if self.optimizer.scoring != ScoringMode::Dense && self.optimizer.k_top > routable {
            return Err(Error::Config(format!(
                "opt.k_top = {} exceeds the {routable} routable experts per module",
                self.optimizer.k_top
            )));
        }
        if routable == 0 {
            return Err(Error::Config(
                "a MoLF-E network needs at least one adapter".into(),
            ));
        }
        self.optimizer.validate()
    }

    pub fn network_spec(&self) -> NetworkSpec {
        let mut dims = vec![self.task.d_in];
        dims.extend(&self.net.hidden);
        dims.push(self.task.d_out);
        let experts = self
            .net
            .ranks
            .iter()
            .map(|&rank| ExpertSpec {
                rank,
                alpha: self.net.alpha,
            })
            .collect();
        NetworkSpec {
            dims,
            experts: ExpertLayout::Uniform(experts),
            mode: self.net.mode,
            dropout_rate: self.net.dropout,
            a_std: self.net.a_std,
            bias: self.net.bias,
        }
    }

    /// Every key in a fixed order; `parse(to_text())` returns `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let o = &self.optimizer;
        let (regime, exponent, rank, spectrum) = match &self.task.regime {
            Regime::HeavyTail { exponent } => (
                "heavy_tail",
                *exponent,
                DEFAULT_CONCENTRATED_RANK,
                Vec::new(),
            ),
            Regime::Concentrated { rank } => (
                "concentrated",
                DEFAULT_HEAVY_TAIL_EXPONENT,
                *rank,
                Vec::new(),
            ),
            Regime::Custom(v) => (
                "custom",
                DEFAULT_HEAVY_TAIL_EXPONENT,
                DEFAULT_CONCENTRATED_RANK,
                v.clone(),
            ),
        };
        let warmup = if o.schedule.total_steps == 0 {
            DEFAULT_WARMUP_RATIO
        } else {
            o.schedule.warmup_ratio
        };
        let lines: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("task.d_out", self.task.d_out.to_string()),
            ("task.d_in", self.task.d_in.to_string()),
            ("task.regime", regime.into()),
            ("task.exponent", exponent.to_string()),
            ("task.rank", rank.to_string()),
            ("task.spectrum", join(&spectrum)),
            ("task.noise_std", self.task.noise_std.to_string()),
            ("net.mode", self.net.mode.to_string()),
            ("net.hidden", join(&self.net.hidden)),
            ("net.ranks", join(&self.net.ranks)),
            ("net.alpha", self.net.alpha.to_string()),
            ("net.dropout", self.net.dropout.to_string()),
            ("net.a_std", self.net.a_std.to_string()),
            ("net.bias", self.net.bias.to_string()),
            ("opt.beta1", o.beta1.to_string()),
            ("opt.beta2", o.beta2.to_string()),
            ("opt.eps", o.eps.to_string()),
            ("opt.k_top", o.k_top.to_string()),
            ("opt.lambda_fft", o.lambda_fft.to_string()),
            ("opt.lambda_lora", o.lambda_lora.to_string()),
            ("opt.scoring", o.scoring.to_string()),
            ("opt.lr_fft", o.lr_fft.to_string()),
            ("opt.lr_lora", o.lr_lora.to_string()),
            ("opt.schedule", schedule_name(&o.schedule)),
            ("opt.warmup_ratio", warmup.to_string()),
            (
                "opt.grad_clip",
                o.grad_clip.map_or("none".into(), |c| c.to_string()),
            ),
            ("run.steps", self.steps.to_string()),
            ("run.batch", self.batch.to_string()),
            ("run.trace_every", self.trace_every.to_string()),
            ("run.checkpoint_every", self.checkpoint_every.to_string()),
            ("run.out_dir", self.out_dir.display().to_string()),
        ];
        for (k, v) in lines {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

/// Seed precedence: command line, then `MOLF_SEED`, then the config file.
pub fn resolve_seed(cli: Option<u64>, env: Option<&str>, config: u64) -> Result<u64> {
    if let Some(s) = cli {
        return Ok(s);
    }
    match env {
        Some(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}: cannot parse {v:?} as a seed"))),
        None => Ok(config),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(RunConfig::parse("").unwrap(), cfg);
    }

    #[test]
    fn edited_values_round_trip() {
        let text = "seed = 9\ntask.regime = custom\ntask.spectrum = 3, 2, 0.5\nnet.mode = molf-e\n\
                    net.hidden = 16\nopt.scoring = pfn\nopt.schedule = constant\nopt.grad_clip = 1.5\nrun.steps = 7\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.task.regime, Regime::Custom(vec![3.0, 2.0, 0.5]));
        assert_eq!(cfg.optimizer.schedule, ScheduleSpec::constant());
        assert_eq!(cfg.optimizer.grad_clip, Some(1.5));
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(cfg.network_spec().dims, vec![64, 16, 64]);
    }

    #[test]
    fn unknown_key_is_rejected() {
        match RunConfig::parse("opt.beta3 = 0.5") {
            Err(Error::Config(msg)) => assert!(msg.contains("opt.beta3"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn k_larger_than_expert_count_is_rejected() {
        assert!(RunConfig::parse("opt.k_top = 4\nnet.ranks = 8,16").is_err());
        assert!(RunConfig::parse("opt.k_top = 3\nnet.ranks = 8,16").is_ok());
        assert!(RunConfig::parse("opt.k_top = 3\nnet.ranks = 8,16\nnet.mode = molf-e").is_err());
    }

    #[test]
    fn seed_precedence() {
        assert_eq!(resolve_seed(Some(1), Some("2"), 3).unwrap(), 1);
        assert_eq!(resolve_seed(None, Some("2"), 3).unwrap(), 2);
        assert_eq!(resolve_seed(None, None, 3).unwrap(), 3);
        assert!(resolve_seed(None, Some("x"), 3).is_err());
    }
}
