//! Subcommand implementations. Each takes the effective config, does its
//! work under the output directory, and writes a manifest hashing every
//! artifact it produced.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use advms::data::{load_cifar10, load_mnist, make_synthetic, subset, Dataset};
use advms::eval::{eval_asr, eval_clean, sweep, EvalProtocol, EvalReport, EvalRow, SweepConfig};
use advms::plot::{asr_vs_epsilon_svg, tradeoff_svg};
use advms::pool::{cached_members, load_pool, save_pool, SwitchingPool};
use advms::rng::derive_seed;
use advms::tensor::Tensor;
use advms::{attack_batch, build_architecture, Architecture, DatasetId, GradientOracle};
use advms::{Error, Result};

use crate::config::{DatasetSection, RunConfig};
use crate::manifest::Manifest;

/// Root holding `mnist/` or `cifar-10-batches-bin/`: the config value,
/// falling back to ADVMS_DATA_DIR, falling back to `data`.
fn data_root(ds: &DatasetSection) -> PathBuf {
    if !ds.data_dir.is_empty() {
        return PathBuf::from(&ds.data_dir);
    }
    match std::env::var("ADVMS_DATA_DIR") {
        Ok(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => PathBuf::from("data"),
    }
}

fn load_split(ds: &DatasetSection, train: bool) -> Result<Dataset> {
    let (count, tag) = if train {
        (ds.train_count, "train")
    } else {
        (ds.test_count, "test")
    };
    match ds.id {
        DatasetId::Synthetic => {
            if count == 0 {
                return Err(Error::Config(format!(
                    "synthetic {tag}_count must be positive"
                )));
            }
            if count % ds.classes != 0 {
                return Err(Error::Config(format!(
                    "synthetic {tag}_count {count} is not a multiple of classes {}",
                    ds.classes
                )));
            }
            make_synthetic(
                ds.classes,
                count / ds.classes,
                ds.side,
                derive_seed(ds.seed, tag, 0),
            )
        }
        DatasetId::Mnist => {
            let dir = data_root(ds).join("mnist");
            let stem = if train { "train" } else { "t10k" };
            let full = load_mnist(
                &dir.join(format!("{stem}-images-idx3-ubyte")),
                &dir.join(format!("{stem}-labels-idx1-ubyte")),
            )?;
            trim(full, count, derive_seed(ds.seed, tag, 0))
        }
        DatasetId::Cifar10 => {
            let dir = data_root(ds).join("cifar-10-batches-bin");
            let names: Vec<PathBuf> = if train {
                (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect()
            } else {
                vec![dir.join("test_batch.bin")]
            };
            let refs: Vec<&Path> = names.iter().map(PathBuf::as_path).collect();
            let full = load_cifar10(&refs)?;
            trim(full, count, derive_seed(ds.seed, tag, 0))
        }
    }
}

fn trim(full: Dataset, count: usize, seed: u64) -> Result<Dataset> {
    if count == 0 {
        Ok(full)
    } else {
        subset(&full, count, seed)
    }
}

fn build_arch(ds: &DatasetSection) -> Result<Architecture> {
    match ds.id {
        DatasetId::Synthetic => Architecture::synthetic((1, ds.side, ds.side), ds.classes),
        id => Ok(build_architecture(id)),
    }
}

fn protocol_for(cfg: &RunConfig, test: &Dataset) -> EvalProtocol {
    let count = if cfg.eval.test_count == 0 {
        test.len()
    } else {
        cfg.eval.test_count
    };
    EvalProtocol::new(count, cfg.eval.seed)
}

/// Clean accuracy of one model over at most `cap` examples of `ds`.
fn accuracy(model: &advms::Model<f32>, ds: &Dataset, cap: usize) -> Result<f64> {
    let n = ds.len().min(cap);
    let idx: Vec<usize> = (0..n).collect();
    let batch = ds.gather(&idx)?;
    let preds = model.predict_batch(&batch.images)?;
    let correct = preds
        .iter()
        .zip(&batch.labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(correct as f64 / n as f64)
}

/// Trains the pool members (reusing cached checkpoints), saves the pool, and
/// writes the run manifest.
pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    if cfg.pool.m == 0 {
        return Err(Error::Argument("pool size m must be positive".into()));
    }
    let arch = build_arch(&cfg.dataset)?;
    let train_ds = load_split(&cfg.dataset, true)?;
    let out = cfg.output_dir();
    fs::create_dir_all(&out)?;
    let cache = out.join("cache");

    let template = cfg.train.to_train_config();
    let members = cached_members(
        &arch,
        &train_ds,
        &template,
        cfg.pool.epsilon_train,
        cfg.pool.master_seed,
        cfg.pool.m,
        Some(&cache),
    )?;
    for (i, member) in members.iter().enumerate() {
        let acc = accuracy(member, &train_ds, 512)?;
        println!(
            "member {i}: init_seed {} epsilon_train {} train_accuracy {acc:.4}",
            member.init_seed(),
            member.train_epsilon()
        );
    }
    let pool = SwitchingPool::from_members(members, cfg.pool.master_seed)?;
    println!(
        "pool: m {} memory_bytes {}",
        pool.size(),
        pool.memory_bytes()
    );
    save_pool(&pool, &out.join("pool"))?;

    let mut man = Manifest::new("train", cfg);
    man.add_artifact(&out, "pool/pool.cfg")?;
    for i in 0..pool.size() {
        man.add_artifact(&out, &format!("pool/member_{i:03}.ckpt"))?;
    }
    let path = man.write(&out)?;
    println!("manifest: {}", path.display());
    Ok(())
}

/// Runs every configured attack against a saved pool, dumps the adversarial
/// batches, and prints a constraint audit per attack.
pub fn cmd_attack(cfg: &RunConfig, pool_manifest: &Path) -> Result<()> {
    let pool = load_pool(pool_manifest)?;
    let test_ds = load_split(&cfg.dataset, false)?;
    let protocol = protocol_for(cfg, &test_ds);
    let eval_set = subset(
        &test_ds,
        protocol.test_count.min(test_ds.len()),
        protocol.seed,
    )?;
    let idx: Vec<usize> = (0..eval_set.len()).collect();
    let batch = eval_set.gather(&idx)?;
    let out = cfg.output_dir();
    fs::create_dir_all(&out)?;

    let mut man =
        Manifest::new("attack", cfg).with_meta("pool", &pool_manifest.display().to_string());
    for (ai, section) in cfg.attacks.iter().enumerate() {
        let attack = section.to_attack_config();
        attack.validate()?;
        let oracle = if attack.eot_samples > 1 {
            GradientOracle::PoolEot {
                pool: &pool,
                samples: attack.eot_samples,
            }
        } else {
            GradientOracle::PoolSnapshot(&pool)
        };
        let x_adv = attack_batch(&oracle, &batch, &attack)?;

        let mut max_pert = 0f32;
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for (a, o) in x_adv.data().iter().zip(batch.images.data()) {
            max_pert = max_pert.max((a - o).abs());
            lo = lo.min(*a);
            hi = hi.max(*a);
        }
        let ball_ok = f64::from(max_pert) <= attack.epsilon + 1e-6;
        let box_ok = (0.0..=1.0).contains(&lo) && (0.0..=1.0).contains(&hi);
        let name = format!("adv_{ai:03}.bin");
        write_tensor(&out.join(&name), &x_adv)?;
        println!(
            "attack {ai} ({} eps {} eot {}): n {} max_perturbation {max_pert:.6} pixel_range [{lo:.4}, {hi:.4}] ball_ok {ball_ok} box_ok {box_ok} -> {name}",
            attack.kind,
            attack.epsilon,
            attack.eot_samples,
            batch.ids.len(),
        );
        if !ball_ok || !box_ok {
            return Err(Error::Argument(format!(
                "attack {ai} violated its constraints"
            )));
        }
        man.add_artifact(&out, &name)?;
    }
    let path = man.write(&out)?;
    println!("manifest: {}", path.display());
    Ok(())
}

/// Raw tensor dump: rank u8, dims u32 little-endian, data f32 little-endian.
fn write_tensor(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let mut bytes = Vec::with_capacity(1 + 4 * t.shape().len() + 4 * t.numel());
    bytes.push(t.shape().len() as u8);
    for &d in t.shape() {
        bytes.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Evaluates the saved pool under every configured attack, printing each
/// result row and writing the report CSV.
pub fn cmd_eval(cfg: &RunConfig, pool_manifest: &Path) -> Result<()> {
    let pool = load_pool(pool_manifest)?;
    let test_ds = load_split(&cfg.dataset, false)?;
    let protocol = protocol_for(cfg, &test_ds);
    let out = cfg.output_dir();
    fs::create_dir_all(&out)?;

    let clean = eval_clean(&pool, &test_ds)?;
    let mut report = EvalReport::default();
    for section in &cfg.attacks {
        let attack = section.to_attack_config();
        let started = Instant::now();
        let outcome = eval_asr(&pool, &test_ds, &attack, &protocol)?;
        let row = EvalRow {
            m: pool.size(),
            epsilon_train: pool.train_epsilon(),
            attack: attack.kind,
            epsilon_attack: attack.epsilon,
            eot_samples: attack.eot_samples,
            clean_accuracy: clean,
            asr: outcome.asr(),
            memory_bytes: pool.memory_bytes(),
            master_seed: pool.master_seed(),
            attack_seed: attack.seed,
            eval_seed: protocol.seed,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        let asr = match row.asr {
            Some(v) => format!("{v:.6}"),
            None => "undefined".into(),
        };
        println!(
            "m {} epsilon_train {} attack {} eps {} eot {}: clean {:.6} asr {asr} memory_bytes {}",
            row.m,
            row.epsilon_train,
            row.attack,
            row.epsilon_attack,
            row.eot_samples,
            row.clean_accuracy,
            row.memory_bytes,
        );
        report.rows.push(row);
    }
    fs::write(out.join("report.csv"), report.emit_csv()?)?;

    let mut man =
        Manifest::new("eval", cfg).with_meta("pool", &pool_manifest.display().to_string());
    man.add_artifact(&out, "report.csv")?;
    let path = man.write(&out)?;
    println!("manifest: {}", path.display());
    Ok(())
}

/// Runs the configured sweep grid, resuming from an existing report CSV when
/// allowed, and writes the CSV plus optional plots.
pub fn cmd_sweep(cfg: &RunConfig) -> Result<()> {
    let arch = build_arch(&cfg.dataset)?;
    let train_ds = load_split(&cfg.dataset, true)?;
    let test_ds = load_split(&cfg.dataset, false)?;
    let protocol = protocol_for(cfg, &test_ds);
    let out = cfg.output_dir();
    fs::create_dir_all(&out)?;

    let sweep_cfg = SweepConfig {
        pool_sizes: cfg.sweep.pool_sizes.clone(),
        epsilon_trains: cfg.sweep.epsilon_trains.clone(),
        attacks: cfg.attacks.iter().map(|a| a.to_attack_config()).collect(),
        master_seeds: cfg.sweep.master_seeds.clone(),
        train: cfg.train.to_train_config(),
        protocol,
        cache_dir: Some(out.join("cache")),
    };
    let csv_path = out.join("report.csv");
    let done = if cfg.sweep.resume && csv_path.exists() {
        let text = fs::read_to_string(&csv_path)?;
        Some(EvalReport::parse_csv(&text)?)
    } else {
        None
    };
    let report = sweep(&arch, &train_ds, &test_ds, &sweep_cfg, done.as_ref())?;
    fs::write(&csv_path, report.emit_csv()?)?;
    println!("sweep: {} rows -> {}", report.rows.len(), csv_path.display());

    let mut man = Manifest::new("sweep", cfg);
    man.add_artifact(&out, "report.csv")?;
    if cfg.output.plots {
        fs::write(out.join("asr_vs_epsilon.svg"), asr_vs_epsilon_svg(&report)?)?;
        fs::write(out.join("tradeoff.svg"), tradeoff_svg(&report)?)?;
        man.add_artifact(&out, "asr_vs_epsilon.svg")?;
        man.add_artifact(&out, "tradeoff.svg")?;
    }
    let path = man.write(&out)?;
    println!("manifest: {}", path.display());
    Ok(())
}

/// Renders plots and a text table from an existing report CSV.
pub fn cmd_report(cfg: &RunConfig, csv: &Path) -> Result<()> {
    let text = fs::read_to_string(csv)?;
    let report = EvalReport::parse_csv(&text)?;
    let out = cfg.output_dir();
    fs::create_dir_all(&out)?;

    println!("m epsilon_train attack epsilon_attack eot clean asr memory_bytes");
    for r in &report.rows {
        let asr = match r.asr {
            Some(v) => format!("{v:.4}"),
            None => "undefined".into(),
        };
        println!(
            "{} {} {} {} {} {:.4} {asr} {}",
            r.m, r.epsilon_train, r.attack, r.epsilon_attack, r.eot_samples, r.clean_accuracy, r.memory_bytes
        );
    }
    fs::write(out.join("asr_vs_epsilon.svg"), asr_vs_epsilon_svg(&report)?)?;
    fs::write(out.join("tradeoff.svg"), tradeoff_svg(&report)?)?;

    let mut man = Manifest::new("report", cfg).with_meta("csv", &csv.display().to_string());
    man.add_artifact(&out, "asr_vs_epsilon.svg")?;
    man.add_artifact(&out, "tradeoff.svg")?;
    let path = man.write(&out)?;
    println!("manifest: {}", path.display());
    Ok(())
}
