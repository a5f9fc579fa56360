//! Evaluation protocol: clean accuracy, attack success rate, and the
//! configuration sweep that produces the summary CSV.
//!
//! Attack success is measured per example over the whole pool. An example
//! counts only if every member classifies it correctly clean (eligibility);
//! its score is the fraction of members the adversarial version fools, and
//! the attack success rate is the mean score over eligible examples. With no
//! eligible examples the rate is reported as undefined, never as a number.

use std::collections::HashMap;
use std::path::PathBuf;
use std::time::Instant;

use crate::arch::Architecture;
use crate::attack::{attack_batch, AttackConfig, AttackKind, GradientOracle};
use crate::data::{batches, subset, Dataset};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::pool::{cached_members, SwitchingPool};
use crate::tensor::Tensor;
use crate::train::TrainConfig;

/// How an evaluation samples the test set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalProtocol {
    /// Examples drawn from the test set (clamped to its size).
    pub test_count: usize,
    pub seed: u64,
}

impl EvalProtocol {
    pub fn new(test_count: usize, seed: u64) -> EvalProtocol {
        EvalProtocol { test_count, seed }
    }

    fn validate(&self) -> Result<()> {
        if self.test_count == 0 {
            return Err(Error::Config("test_count must be positive".into()));
        }
        Ok(())
    }

    fn draw(&self, ds: &Dataset) -> Result<Dataset> {
        self.validate()?;
        subset(ds, self.test_count.min(ds.len()), self.seed)
    }
}

/// Mean of the per-member accuracies on `ds`, computed member by member so
/// it equals averaging each member's accuracy yourself.
pub fn eval_clean(pool: &SwitchingPool, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Argument("cannot evaluate on an empty dataset".into()));
    }
    let mut acc_sum = 0.0f64;
    for member in pool.members() {
        let correct = count_correct(member, ds)?;
        acc_sum += correct as f64 / ds.len() as f64;
    }
    Ok(acc_sum / pool.size() as f64)
}

fn count_correct(model: &Model<f32>, ds: &Dataset) -> Result<usize> {
    let mut correct = 0;
    for batch in batches(ds, 256, 0, false)? {
        let preds = model.predict_batch(&batch.images)?;
        correct += preds
            .iter()
            .zip(&batch.labels)
            .filter(|(p, l)| p == l)
            .count();
    }
    Ok(correct)
}

/// Outcome of an attack-success evaluation.
#[derive(Debug, Clone, PartialEq)]
pub enum AsrOutcome {
    Defined {
        /// Mean per-example success fraction over eligible examples.
        asr: f64,
        eligible: usize,
        /// (example id, fraction of members fooled), in evaluation order.
        per_example: Vec<(u64, f64)>,
    },
    /// Every drawn example was already misclassified by some member.
    Undefined { evaluated: usize },
}

impl AsrOutcome {
    pub fn asr(&self) -> Option<f64> {
        match self {
            AsrOutcome::Defined { asr, .. } => Some(*asr),
            AsrOutcome::Undefined { .. } => None,
        }
    }
}

/// Runs `attack` against `pool` on a drawn test sample. The gradient oracle
/// is the per-example snapshot member unless the attack asks for more than
/// one expectation sample per step.
pub fn eval_asr(
    pool: &SwitchingPool,
    test: &Dataset,
    attack: &AttackConfig,
    protocol: &EvalProtocol,
) -> Result<AsrOutcome> {
    attack.validate()?;
    let eval_set = protocol.draw(test)?;

    // Eligibility: every member must classify the clean example correctly.
    let mut all_correct = vec![true; eval_set.len()];
    for member in pool.members() {
        for batch in batches(&eval_set, 256, 0, false)? {
            let preds = member.predict_batch(&batch.images)?;
            for ((&id, p), l) in batch.ids.iter().zip(&preds).zip(&batch.labels) {
                if p != l {
                    // ids within a drawn sample are unique, so scanning is
                    // fine at these sizes; map id back to its position.
                    let pos = eval_set.ids().iter().position(|&x| x == id).unwrap();
                    all_correct[pos] = false;
                }
            }
        }
    }
    let eligible: Vec<usize> = (0..eval_set.len()).filter(|&i| all_correct[i]).collect();
    if eligible.is_empty() {
        return Ok(AsrOutcome::Undefined {
            evaluated: eval_set.len(),
        });
    }

    let batch = eval_set.gather(&eligible)?;
    let oracle = if attack.eot_samples > 1 {
        GradientOracle::PoolEot {
            pool,
            samples: attack.eot_samples,
        }
    } else {
        GradientOracle::PoolSnapshot(pool)
    };
    let x_adv = attack_batch(&oracle, &batch, attack)?;

    // Per-example success: fraction of members fooled by the perturbed input.
    let m = pool.size();
    let mut fooled = vec![0usize; batch.len()];
    for member in pool.members() {
        let preds = predict_rows(member, &x_adv)?;
        for (f, (p, l)) in fooled.iter_mut().zip(preds.iter().zip(&batch.labels)) {
            if p != l {
                *f += 1;
            }
        }
    }
    let per_example: Vec<(u64, f64)> = batch
        .ids
        .iter()
        .zip(&fooled)
        .map(|(&id, &f)| (id, f as f64 / m as f64))
        .collect();
    let asr = per_example.iter().map(|&(_, s)| s).sum::<f64>() / per_example.len() as f64;
    Ok(AsrOutcome::Defined {
        asr,
        eligible: eligible.len(),
        per_example,
    })
}

fn predict_rows(model: &Model<f32>, x: &Tensor<f32>) -> Result<Vec<usize>> {
    let n = x.shape()[0];
    let stride = x.numel() / n;
    let mut preds = Vec::with_capacity(n);
    let mut lo = 0;
    while lo < n {
        let hi = (lo + 256).min(n);
        let mut shape = x.shape().to_vec();
        shape[0] = hi - lo;
        let chunk = Tensor::from_vec(&shape, x.data()[lo * stride..hi * stride].to_vec())?;
        preds.extend(model.predict_batch(&chunk)?);
        lo = hi;
    }
    Ok(preds)
}

/// One evaluated configuration cell.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub m: usize,
    pub epsilon_train: f64,
    pub attack: AttackKind,
    pub epsilon_attack: f64,
    pub eot_samples: usize,
    pub clean_accuracy: f64,
    /// None when no test example was eligible.
    pub asr: Option<f64>,
    pub memory_bytes: u64,
    pub master_seed: u64,
    pub attack_seed: u64,
    pub eval_seed: u64,
    pub wall_time_s: f64,
}

impl EvalRow {
    /// Everything that identifies the cell (excludes measured values).
    fn key(&self) -> RowKey {
        (
            self.m,
            self.epsilon_train.to_bits(),
            self.attack,
            self.epsilon_attack.to_bits(),
            self.eot_samples,
            self.master_seed,
        )
    }
}

type RowKey = (usize, u64, AttackKind, u64, usize, u64);

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

const CSV_HEADER: &str = "m,epsilon_train,attack,epsilon_attack,eot_samples,clean_accuracy,asr,memory_bytes,master_seed,attack_seed,eval_seed,wall_time_s";

impl EvalReport {
    /// Serializes the report, rows sorted by configuration key. Floats are
    /// fixed to six decimals so emit(parse(emit(r))) is byte-identical.
    pub fn emit_csv(&self) -> Result<String> {
        if self.rows.is_empty() {
            return Err(Error::Argument("refusing to emit an empty report".into()));
        }
        let mut rows: Vec<&EvalRow> = self.rows.iter().collect();
        rows.sort_by(|a, b| sort_key(a).partial_cmp(&sort_key(b)).unwrap());
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in rows {
            let asr = match r.asr {
                Some(v) => format!("{v:.6}"),
                None => "undefined".into(),
            };
            out.push_str(&format!(
                "{},{:.6},{},{:.6},{},{:.6},{},{},{},{},{},{:.6}\n",
                r.m,
                r.epsilon_train,
                r.attack.as_str(),
                r.epsilon_attack,
                r.eot_samples,
                r.clean_accuracy,
                asr,
                r.memory_bytes,
                r.master_seed,
                r.attack_seed,
                r.eval_seed,
                r.wall_time_s,
            ));
        }
        Ok(out)
    }

    pub fn parse_csv(text: &str) -> Result<EvalReport> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h == CSV_HEADER => {}
            other => {
                return Err(Error::Format(format!(
                    "bad report header: {:?}",
                    other.unwrap_or("<empty>")
                )))
            }
        }
        let mut rows = Vec::new();
        for (ln, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 12 {
                return Err(Error::Format(format!(
                    "row {}: expected 12 fields, got {}",
                    ln + 2,
                    f.len()
                )));
            }
            let fl = |s: &str, what: &str| -> Result<f64> {
                s.parse::<f64>()
                    .map_err(|_| Error::Format(format!("row {}: bad {what} {s}", ln + 2)))
            };
            let int = |s: &str, what: &str| -> Result<u64> {
                s.parse::<u64>()
                    .map_err(|_| Error::Format(format!("row {}: bad {what} {s}", ln + 2)))
            };
            rows.push(EvalRow {
                m: int(f[0], "m")? as usize,
                epsilon_train: fl(f[1], "epsilon_train")?,
                attack: f[2].parse()?,
                epsilon_attack: fl(f[3], "epsilon_attack")?,
                eot_samples: int(f[4], "eot_samples")? as usize,
                clean_accuracy: fl(f[5], "clean_accuracy")?,
                asr: if f[6] == "undefined" {
                    None
                } else {
                    Some(fl(f[6], "asr")?)
                },
                memory_bytes: int(f[7], "memory_bytes")?,
                master_seed: int(f[8], "master_seed")?,
                attack_seed: int(f[9], "attack_seed")?,
                eval_seed: int(f[10], "eval_seed")?,
                wall_time_s: fl(f[11], "wall_time_s")?,
            });
        }
        Ok(EvalReport { rows })
    }
}

fn sort_key(r: &EvalRow) -> (usize, f64, &'static str, f64, usize, u64) {
    (
        r.m,
        r.epsilon_train,
        r.attack.as_str(),
        r.epsilon_attack,
        r.eot_samples,
        r.master_seed,
    )
}

/// Grid of configurations evaluated by [`sweep`]. Every combination of pool
/// size, training budget, attack, and master seed becomes one row.
#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub pool_sizes: Vec<usize>,
    pub epsilon_trains: Vec<f64>,
    pub attacks: Vec<AttackConfig>,
    pub master_seeds: Vec<u64>,
    /// Template for member training; `epsilon_train` and `seed` are set per
    /// cell.
    pub train: TrainConfig,
    pub protocol: EvalProtocol,
    /// Member checkpoints are cached here and reused across cells and runs.
    pub cache_dir: Option<PathBuf>,
}

impl SweepConfig {
    fn validate(&self) -> Result<()> {
        if self.pool_sizes.is_empty()
            || self.epsilon_trains.is_empty()
            || self.attacks.is_empty()
            || self.master_seeds.is_empty()
        {
            return Err(Error::Config("sweep grid has an empty axis".into()));
        }
        if self.pool_sizes.contains(&0) {
            return Err(Error::Config("pool sizes must be positive".into()));
        }
        for a in &self.attacks {
            a.validate()?;
        }
        for &e in &self.epsilon_trains {
            if !(0.0..=1.0).contains(&e) {
                return Err(Error::Config(format!("epsilon_train {e} outside [0, 1]")));
            }
        }
        self.protocol.validate()
    }
}

/// Evaluates the full grid. Pools for one (master seed, training budget)
/// share members: the pool of size M uses the first M member seeds, so the
/// largest pool's members cover every smaller pool. Rows whose keys appear
/// in `done` are skipped, which makes reruns resumable from a partial CSV.
pub fn sweep(
    arch: &Architecture,
    train_ds: &Dataset,
    test_ds: &Dataset,
    cfg: &SweepConfig,
    done: Option<&EvalReport>,
) -> Result<EvalReport> {
    cfg.validate()?;
    let max_m = *cfg.pool_sizes.iter().max().expect("non-empty");
    let mut have: HashMap<RowKey, EvalRow> = HashMap::new();
    if let Some(prev) = done {
        for r in &prev.rows {
            have.insert(r.key(), r.clone());
        }
    }

    let mut rows = Vec::new();
    for &master_seed in &cfg.master_seeds {
        for &epsilon_train in &cfg.epsilon_trains {
            let wanted = cfg.pool_sizes.iter().any(|&m| {
                cfg.attacks.iter().any(|a| {
                    let probe = row_key(m, epsilon_train, a, master_seed);
                    !have.contains_key(&probe)
                })
            });
            let members = if wanted {
                train_members(arch, train_ds, cfg, epsilon_train, master_seed, max_m)?
            } else {
                Vec::new()
            };
            for &m in &cfg.pool_sizes {
                for attack in &cfg.attacks {
                    let key = row_key(m, epsilon_train, attack, master_seed);
                    if let Some(r) = have.get(&key) {
                        rows.push(r.clone());
                        continue;
                    }
                    let pool =
                        SwitchingPool::from_members(members[..m].to_vec(), master_seed)?;
                    let started = Instant::now();
                    let clean = eval_clean(&pool, test_ds)?;
                    let outcome = eval_asr(&pool, test_ds, attack, &cfg.protocol)?;
                    rows.push(EvalRow {
                        m,
                        epsilon_train,
                        attack: attack.kind,
                        epsilon_attack: attack.epsilon,
                        eot_samples: attack.eot_samples,
                        clean_accuracy: clean,
                        asr: outcome.asr(),
                        memory_bytes: pool.memory_bytes(),
                        master_seed,
                        attack_seed: attack.seed,
                        eval_seed: cfg.protocol.seed,
                        wall_time_s: started.elapsed().as_secs_f64(),
                    });
                }
            }
        }
    }
    Ok(EvalReport { rows })
}

fn row_key(m: usize, epsilon_train: f64, attack: &AttackConfig, master_seed: u64) -> RowKey {
    (
        m,
        epsilon_train.to_bits(),
        attack.kind,
        attack.epsilon.to_bits(),
        attack.eot_samples,
        master_seed,
    )
}

/// Trains (or loads from cache) the first `count` members for one
/// (master seed, training budget) pair.
fn train_members(
    arch: &Architecture,
    train_ds: &Dataset,
    cfg: &SweepConfig,
    epsilon_train: f64,
    master_seed: u64,
    count: usize,
) -> Result<Vec<Model<f32>>> {
    cached_members(
        arch,
        train_ds,
        &cfg.train,
        epsilon_train,
        master_seed,
        count,
        cfg.cache_dir.as_deref(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synthetic;
    use crate::model::init_params;
    use crate::pool::build_pool;

    fn arch() -> Architecture {
        Architecture::synthetic((1, 8, 8), 4).unwrap()
    }

    fn trained_pool(m: usize) -> SwitchingPool {
        let ds = make_synthetic(4, 32, 8, 11).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 16,
            ..TrainConfig::default()
        };
        build_pool(&arch(), &ds, m, &cfg, 77).unwrap()
    }

    #[test]
    fn clean_accuracy_is_the_mean_of_member_accuracies() {
        let pool = trained_pool(3);
        let ds = make_synthetic(4, 16, 8, 12).unwrap();
        let got = eval_clean(&pool, &ds).unwrap();
        let mut acc = 0.0;
        for member in pool.members() {
            let preds = member.predict_batch(ds.images()).unwrap();
            let c = preds.iter().zip(ds.labels()).filter(|(p, l)| p == l).count();
            acc += c as f64 / ds.len() as f64;
        }
        assert_eq!(got, acc / 3.0);
    }

    #[test]
    fn zero_budget_attack_never_succeeds() {
        let pool = trained_pool(2);
        let ds = make_synthetic(4, 16, 8, 12).unwrap();
        let attack = AttackConfig::fgsm(0.0);
        let protocol = EvalProtocol::new(32, 5);
        match eval_asr(&pool, &ds, &attack, &protocol).unwrap() {
            AsrOutcome::Defined { asr, per_example, .. } => {
                assert_eq!(asr, 0.0);
                assert!(per_example.iter().all(|&(_, s)| s == 0.0));
            }
            AsrOutcome::Undefined { .. } => {} // possible if training was poor
        }
    }

    #[test]
    fn per_example_scores_are_member_fractions() {
        let pool = trained_pool(2);
        let ds = make_synthetic(4, 16, 8, 12).unwrap();
        let attack = AttackConfig::fgsm(0.3).with_seed(9);
        let protocol = EvalProtocol::new(48, 5);
        if let AsrOutcome::Defined { asr, per_example, eligible } =
            eval_asr(&pool, &ds, &attack, &protocol).unwrap()
        {
            assert_eq!(per_example.len(), eligible);
            for &(_, s) in &per_example {
                // With 2 members the only possible fractions are 0, 1/2, 1.
                assert!(s == 0.0 || s == 0.5 || s == 1.0, "score {s}");
            }
            let mean = per_example.iter().map(|&(_, s)| s).sum::<f64>()
                / per_example.len() as f64;
            assert_eq!(asr, mean);
        }
    }

    #[test]
    fn hopeless_pool_reports_undefined() {
        // Fresh random members almost surely misclassify something; with a
        // single test example drawn, an all-wrong draw gives Undefined. Use
        // an untrained pool and tiny count to force it deterministically.
        let members = (0..2)
            .map(|i| init_params::<f32>(&arch(), 900 + i))
            .collect();
        let pool = SwitchingPool::from_members(members, 0).unwrap();
        let ds = make_synthetic(4, 64, 8, 12).unwrap();
        let attack = AttackConfig::fgsm(0.1);
        // Scan seeds for a draw where eligibility is empty; untrained pools
        // are wrong on most inputs so this terminates immediately in
        // practice.
        for seed in 0..64 {
            let protocol = EvalProtocol::new(1, seed);
            if let AsrOutcome::Undefined { evaluated } =
                eval_asr(&pool, &ds, &attack, &protocol).unwrap()
            {
                assert_eq!(evaluated, 1);
                return;
            }
        }
        panic!("an untrained pool was never all-wrong on a single example");
    }

    #[test]
    fn csv_round_trip_is_byte_identical() {
        let report = EvalReport {
            rows: vec![
                EvalRow {
                    m: 4,
                    epsilon_train: 0.3,
                    attack: AttackKind::Pgd,
                    epsilon_attack: 0.3,
                    eot_samples: 10,
                    clean_accuracy: 0.9625,
                    asr: Some(0.112),
                    memory_bytes: 4 * 9 * 4,
                    master_seed: 42,
                    attack_seed: 7,
                    eval_seed: 5,
                    wall_time_s: 1.25,
                },
                EvalRow {
                    m: 1,
                    epsilon_train: 0.0,
                    attack: AttackKind::Fgsm,
                    epsilon_attack: 0.1,
                    eot_samples: 1,
                    clean_accuracy: 0.75,
                    asr: None,
                    memory_bytes: 9 * 4,
                    master_seed: 42,
                    attack_seed: 7,
                    eval_seed: 5,
                    wall_time_s: 0.5,
                },
            ],
        };
        let a = report.emit_csv().unwrap();
        let b = EvalReport::parse_csv(&a).unwrap().emit_csv().unwrap();
        assert_eq!(a, b);
        // Emission sorts: the m = 1 row comes first.
        assert!(a.lines().nth(1).unwrap().starts_with("1,"));
        assert!(a.contains(",undefined,"));
    }

    #[test]
    fn csv_rejects_malformed_input() {
        assert!(EvalReport::parse_csv("").is_err());
        assert!(EvalReport::parse_csv("wrong,header\n").is_err());
        let short = format!("{CSV_HEADER}\n1,2,3\n");
        assert!(EvalReport::parse_csv(&short).is_err());
        let bad_attack = format!(
            "{CSV_HEADER}\n1,0.0,unknown,0.1,1,0.9,0.5,36,42,7,5,0.1\n"
        );
        assert!(EvalReport::parse_csv(&bad_attack).is_err());
        assert!(EvalReport::default().emit_csv().is_err());
    }

    #[test]
    fn sweep_covers_the_grid_and_resumes() {
        let train = make_synthetic(4, 24, 8, 1).unwrap();
        let test = make_synthetic(4, 12, 8, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let cfg = SweepConfig {
            pool_sizes: vec![1, 2],
            epsilon_trains: vec![0.0, 0.1],
            attacks: vec![
                AttackConfig::fgsm(0.1).with_seed(3),
                {
                    let mut a = AttackConfig::pgd(0.1).with_seed(3);
                    a.steps = 3;
                    a
                },
            ],
            master_seeds: vec![40, 41],
            train: TrainConfig {
                epochs: 1,
                batch_size: 16,
                inner_steps: 2,
                ..TrainConfig::default()
            },
            protocol: EvalProtocol::new(16, 5),
            cache_dir: Some(dir.path().to_path_buf()),
        };
        let report = sweep(&arch(), &train, &test, &cfg, None).unwrap();
        assert_eq!(report.rows.len(), 2 * 2 * 2 * 2);

        // A resumed sweep with the cache reuses every row verbatim modulo
        // wall time, and a fresh sweep from the cache reproduces the
        // measured numbers exactly.
        let resumed = sweep(&arch(), &train, &test, &cfg, Some(&report)).unwrap();
        assert_eq!(report.emit_csv().unwrap(), resumed.emit_csv().unwrap());
        let recomputed = sweep(&arch(), &train, &test, &cfg, None).unwrap();
        for (a, b) in report.rows.iter().zip(&recomputed.rows) {
            assert_eq!(a.clean_accuracy, b.clean_accuracy);
            assert_eq!(a.asr, b.asr);
            assert_eq!(a.memory_bytes, b.memory_bytes);
        }
    }

    #[test]
    fn sweep_rejects_empty_axes() {
        let train = make_synthetic(4, 8, 8, 1).unwrap();
        let test = make_synthetic(4, 8, 8, 2).unwrap();
        let cfg = SweepConfig {
            pool_sizes: vec![],
            epsilon_trains: vec![0.0],
            attacks: vec![AttackConfig::fgsm(0.1)],
            master_seeds: vec![1],
            train: TrainConfig::default(),
            protocol: EvalProtocol::new(4, 0),
            cache_dir: None,
        };
        assert!(sweep(&arch(), &train, &test, &cfg, None).is_err());
    }
}
