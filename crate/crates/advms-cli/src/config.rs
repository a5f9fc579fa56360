//! Run configuration: flat `key = value` lines under `[section]` headers.
//! Every field has a default, so an empty config runs the synthetic smoke
//! pipeline. Unknown sections and keys are errors, not warnings.
//!
//! Seeds given as 0 mean "derive from the master seed"; [`RunConfig::effective`]
//! resolves them so manifests always record the concrete values.

use std::path::PathBuf;

use advms::arch::DatasetId;
use advms::attack::{AttackConfig, AttackKind};
use advms::rng::derive_seed;
use advms::train::TrainConfig;
use advms::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    pub pool: PoolSection,
    pub train: TrainSection,
    pub attacks: Vec<AttackSection>,
    pub eval: EvalSection,
    pub sweep: SweepSection,
    pub output: OutputSection,
    pub run: RunSection,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSection {
    pub id: DatasetId,
    /// Root holding `mnist/` or `cifar-10-batches-bin/`. Empty means the
    /// ADVMS_DATA_DIR environment variable, falling back to `data`.
    pub data_dir: String,
    /// Training examples to draw; 0 means the whole set. For synthetic data
    /// this is the total generated count and must divide by `classes`.
    pub train_count: usize,
    /// Test examples to draw; same conventions as `train_count`.
    pub test_count: usize,
    /// Synthetic only.
    pub classes: usize,
    /// Synthetic only: square image side, even and at least 4.
    pub side: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolSection {
    pub m: usize,
    pub epsilon_train: f64,
    pub master_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub inner_steps: usize,
    pub inner_step_size: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackSection {
    pub kind: AttackKind,
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    pub random_start: bool,
    pub kappa: f64,
    pub eot_samples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSection {
    /// Test examples per evaluation; 0 means the whole test split.
    pub test_count: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSection {
    pub pool_sizes: Vec<usize>,
    pub epsilon_trains: Vec<f64>,
    /// Empty means the pool master seed alone.
    pub master_seeds: Vec<u64>,
    pub resume: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputSection {
    pub dir: String,
    pub plots: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSection {
    /// Rayon worker threads; 0 means all available cores. Results do not
    /// depend on this.
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            dataset: DatasetSection {
                id: DatasetId::Synthetic,
                data_dir: String::new(),
                train_count: 256,
                test_count: 128,
                classes: 4,
                side: 8,
                seed: 0,
            },
            pool: PoolSection {
                m: 2,
                epsilon_train: 0.0,
                master_seed: 42,
            },
            train: TrainSection {
                epochs: 3,
                batch_size: 64,
                learning_rate: 0.01,
                momentum: 0.9,
                inner_steps: 7,
                inner_step_size: 0.0,
            },
            attacks: vec![AttackSection::default()],
            eval: EvalSection {
                test_count: 0,
                seed: 0,
            },
            sweep: SweepSection {
                pool_sizes: vec![1, 2, 4],
                epsilon_trains: vec![0.0, 0.1, 0.3],
                master_seeds: vec![],
                resume: true,
            },
            output: OutputSection {
                dir: "out".into(),
                plots: true,
            },
            run: RunSection { workers: 0 },
        }
    }
}

impl Default for AttackSection {
    fn default() -> AttackSection {
        AttackSection {
            kind: AttackKind::Pgd,
            epsilon: 0.3,
            steps: 40,
            step_size: 0.0,
            random_start: true,
            kappa: 0.0,
            eot_samples: 1,
            seed: 0,
        }
    }
}

impl RunConfig {
    /// Parses a config (or a manifest; `[meta]` and `[artifacts]` sections
    /// are skipped so manifests reload as configs).
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut attack_count = 0usize;
        let mut section = String::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| Error::Config(format!("line {}: {msg}", ln + 1));
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| at(format!("unterminated section header {line}")))?;
                match name {
                    "dataset" | "pool" | "train" | "eval" | "sweep" | "output" | "run"
                    | "meta" | "artifacts" => {}
                    "attack" => {
                        if attack_count == 0 {
                            // The first [attack] replaces the implicit default.
                            cfg.attacks = vec![AttackSection::default()];
                        } else {
                            cfg.attacks.push(AttackSection::default());
                        }
                        attack_count += 1;
                    }
                    other => return Err(at(format!("unknown section [{other}]"))),
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected key = value, got {line}")))?;
            let (key, value) = (key.trim(), value.trim());
            if section == "meta" || section == "artifacts" {
                continue;
            }
            if section.is_empty() {
                return Err(at(format!("key {key} appears before any section")));
            }
            if section == "attack" {
                // Keys bind to the section they appear in, not to all of them.
                let idx = attack_count - 1;
                cfg.attacks[idx]
                    .set(key, value)
                    .map_err(|e| at(e.to_string()))?;
            } else {
                cfg.set_value(&section, key, value)
                    .map_err(|e| at(e.to_string()))?;
            }
        }
        Ok(cfg)
    }

    /// Applies one `section.key=value` override (the --set flag). For
    /// `attack.*` the override applies to every attack section.
    pub fn apply_set(&mut self, assignment: &str) -> Result<()> {
        let bad = || Error::Config(format!("--set expects section.key=value, got {assignment}"));
        let (path, value) = assignment.split_once('=').ok_or_else(bad)?;
        let (section, key) = path.trim().split_once('.').ok_or_else(bad)?;
        self.set_value(section.trim(), key.trim(), value.trim())
    }

    fn set_value(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        match section {
            "dataset" => self.dataset.set(key, value),
            "pool" => self.pool.set(key, value),
            "train" => self.train.set(key, value),
            "attack" => {
                for a in &mut self.attacks {
                    a.set(key, value)?;
                }
                Ok(())
            }
            "eval" => self.eval.set(key, value),
            "sweep" => self.sweep.set(key, value),
            "output" => self.output.set(key, value),
            "run" => self.run.set(key, value),
            other => Err(Error::Config(format!("unknown section [{other}]"))),
        }
    }

    /// Resolves every zero seed from the master seed and fills the sweep's
    /// seed list, so the returned config is fully explicit.
    pub fn effective(&self) -> RunConfig {
        let mut cfg = self.clone();
        let master = cfg.pool.master_seed;
        if cfg.dataset.seed == 0 {
            cfg.dataset.seed = derive_seed(master, "data", 0);
        }
        for (i, a) in cfg.attacks.iter_mut().enumerate() {
            if a.seed == 0 {
                a.seed = derive_seed(master, "attack", i as u64);
            }
        }
        if cfg.eval.seed == 0 {
            cfg.eval.seed = derive_seed(master, "eval", 0);
        }
        if cfg.sweep.master_seeds.is_empty() {
            cfg.sweep.master_seeds = vec![master];
        }
        cfg
    }

    /// Serializes the config; parse(emit(c)) == c.
    pub fn emit(&self) -> String {
        let mut s = String::new();
        let d = &self.dataset;
        s.push_str(&format!(
            "[dataset]\nid = {}\ndata_dir = {}\ntrain_count = {}\ntest_count = {}\nclasses = {}\nside = {}\nseed = {}\n",
            d.id, d.data_dir, d.train_count, d.test_count, d.classes, d.side, d.seed
        ));
        let p = &self.pool;
        s.push_str(&format!(
            "\n[pool]\nm = {}\nepsilon_train = {}\nmaster_seed = {}\n",
            p.m, p.epsilon_train, p.master_seed
        ));
        let t = &self.train;
        s.push_str(&format!(
            "\n[train]\nepochs = {}\nbatch_size = {}\nlearning_rate = {}\nmomentum = {}\ninner_steps = {}\ninner_step_size = {}\n",
            t.epochs, t.batch_size, t.learning_rate, t.momentum, t.inner_steps, t.inner_step_size
        ));
        for a in &self.attacks {
            s.push_str(&format!(
                "\n[attack]\nkind = {}\nepsilon = {}\nsteps = {}\nstep_size = {}\nrandom_start = {}\nkappa = {}\neot_samples = {}\nseed = {}\n",
                a.kind, a.epsilon, a.steps, a.step_size, a.random_start, a.kappa, a.eot_samples, a.seed
            ));
        }
        let e = &self.eval;
        s.push_str(&format!(
            "\n[eval]\ntest_count = {}\nseed = {}\n",
            e.test_count, e.seed
        ));
        let w = &self.sweep;
        s.push_str(&format!(
            "\n[sweep]\npool_sizes = {}\nepsilon_trains = {}\nmaster_seeds = {}\nresume = {}\n",
            join(&w.pool_sizes),
            join(&w.epsilon_trains),
            join(&w.master_seeds),
            w.resume
        ));
        let o = &self.output;
        s.push_str(&format!(
            "\n[output]\ndir = {}\nplots = {}\n",
            o.dir, o.plots
        ));
        s.push_str(&format!("\n[run]\nworkers = {}\n", self.run.workers));
        s
    }

    pub fn output_dir(&self) -> PathBuf {
        PathBuf::from(&self.output.dir)
    }
}

impl AttackSection {
    pub fn to_attack_config(&self) -> AttackConfig {
        AttackConfig {
            kind: self.kind,
            epsilon: self.epsilon,
            step_size: self.step_size,
            steps: self.steps,
            random_start: self.random_start,
            kappa: self.kappa,
            eot_samples: self.eot_samples,
            seed: self.seed,
        }
    }
}

impl TrainSection {
    /// Training template; epsilon and seed are assigned per member.
    pub fn to_train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            epsilon_train: 0.0,
            inner_steps: self.inner_steps,
            inner_step_size: self.inner_step_size,
            seed: 0,
        }
    }
}

fn unknown(section: &str, key: &str) -> Error {
    Error::Config(format!("unknown key {key} in [{section}]"))
}

fn parse_as<T: std::str::FromStr>(value: &str, what: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| Error::Config(format!("bad {what}: {value}")))
}

fn parse_list<T: std::str::FromStr>(value: &str, what: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_as::<T>(s, what))
        .collect()
}

fn join<T: std::fmt::Display>(items: &[T]) -> String {
    items
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl DatasetSection {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "id" => self.id = parse_as(value, "dataset id")?,
            "data_dir" => self.data_dir = value.to_string(),
            "train_count" => self.train_count = parse_as(value, "train_count")?,
            "test_count" => self.test_count = parse_as(value, "test_count")?,
            "classes" => self.classes = parse_as(value, "classes")?,
            "side" => self.side = parse_as(value, "side")?,
            "seed" => self.seed = parse_as(value, "seed")?,
            _ => return Err(unknown("dataset", key)),
        }
        Ok(())
    }
}

impl PoolSection {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "m" => self.m = parse_as(value, "m")?,
            "epsilon_train" => self.epsilon_train = parse_as(value, "epsilon_train")?,
            "master_seed" => self.master_seed = parse_as(value, "master_seed")?,
            _ => return Err(unknown("pool", key)),
        }
        Ok(())
    }
}

impl TrainSection {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "epochs" => self.epochs = parse_as(value, "epochs")?,
            "batch_size" => self.batch_size = parse_as(value, "batch_size")?,
            "learning_rate" => self.learning_rate = parse_as(value, "learning_rate")?,
            "momentum" => self.momentum = parse_as(value, "momentum")?,
            "inner_steps" => self.inner_steps = parse_as(value, "inner_steps")?,
            "inner_step_size" => self.inner_step_size = parse_as(value, "inner_step_size")?,
            _ => return Err(unknown("train", key)),
        }
        Ok(())
    }
}

impl AttackSection {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "kind" => self.kind = parse_as(value, "attack kind")?,
            "epsilon" => self.epsilon = parse_as(value, "epsilon")?,
            "steps" => self.steps = parse_as(value, "steps")?,
            "step_size" => self.step_size = parse_as(value, "step_size")?,
            "random_start" => self.random_start = parse_as(value, "random_start")?,
            "kappa" => self.kappa = parse_as(value, "kappa")?,
            "eot_samples" => self.eot_samples = parse_as(value, "eot_samples")?,
            "seed" => self.seed = parse_as(value, "seed")?,
            _ => return Err(unknown("attack", key)),
        }
        Ok(())
    }
}

impl EvalSection {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "test_count" => self.test_count = parse_as(value, "test_count")?,
            "seed" => self.seed = parse_as(value, "seed")?,
            _ => return Err(unknown("eval", key)),
        }
        Ok(())
    }
}

impl SweepSection {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "pool_sizes" => self.pool_sizes = parse_list(value, "pool size")?,
            "epsilon_trains" => self.epsilon_trains = parse_list(value, "epsilon_train")?,
            "master_seeds" => self.master_seeds = parse_list(value, "master seed")?,
            "resume" => self.resume = parse_as(value, "resume")?,
            _ => return Err(unknown("sweep", key)),
        }
        Ok(())
    }
}

impl OutputSection {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "dir" => self.dir = value.to_string(),
            "plots" => self.plots = parse_as(value, "plots")?,
            _ => return Err(unknown("output", key)),
        }
        Ok(())
    }
}

impl RunSection {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "workers" => self.workers = parse_as(value, "workers")?,
            _ => return Err(unknown("run", key)),
        }
        Ok(())
    }
}
