//! Switching pools: M homogeneous sub-models, one drawn uniformly at random
//! per inference.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::arch::Architecture;
use crate::checkpoint::{load_model, save_model};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::derive_seed;
use crate::tensor::Tensor;
use crate::train::{train_adversarial, TrainConfig};

/// A pool of sub-models sharing one architecture and one training budget.
#[derive(Debug, Clone)]
pub struct SwitchingPool {
    members: Vec<Model<f32>>,
    master_seed: u64,
}

impl SwitchingPool {
    /// Assembles a pool from existing models, enforcing homogeneity (same
    /// architecture, same training budget). Duplicate members are allowed
    /// here; pools built by [`build_pool`] always have distinct
    /// initializations.
    pub fn from_members(members: Vec<Model<f32>>, master_seed: u64) -> Result<SwitchingPool> {
        if members.is_empty() {
            return Err(Error::Argument("a pool needs at least one member".into()));
        }
        let fp = members[0].arch().fingerprint();
        let eps = members[0].train_epsilon();
        for (i, m) in members.iter().enumerate().skip(1) {
            if m.arch().fingerprint() != fp {
                return Err(Error::Argument(format!(
                    "member {i} has a different architecture"
                )));
            }
            if m.train_epsilon() != eps {
                return Err(Error::Argument(format!(
                    "member {i} was trained under epsilon {} (pool has {})",
                    m.train_epsilon(),
                    eps
                )));
            }
        }
        Ok(SwitchingPool {
            members,
            master_seed,
        })
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn members(&self) -> &[Model<f32>] {
        &self.members
    }

    pub fn member(&self, i: usize) -> Result<&Model<f32>> {
        self.members
            .get(i)
            .ok_or_else(|| Error::Index(format!("member {i} of {}", self.members.len())))
    }

    pub fn arch(&self) -> &Architecture {
        self.members[0].arch()
    }

    pub fn train_epsilon(&self) -> f64 {
        self.members[0].train_epsilon()
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    /// Draws a uniform member index for one inference.
    pub fn activate(&self, rng: &mut ChaCha8Rng) -> usize {
        rng.gen_range(0..self.members.len())
    }

    /// Classifies `x` with a freshly drawn member (a new draw every call).
    pub fn predict(&self, x: &Tensor<f32>, rng: &mut ChaCha8Rng) -> Result<usize> {
        let m = self.activate(rng);
        self.members[m].predict(x)
    }

    /// Bytes of single-precision parameters across all members: exactly
    /// linear in the pool size.
    pub fn memory_bytes(&self) -> u64 {
        self.members.len() as u64 * self.arch().param_count() as u64 * 4
    }
}

/// Trains an M-member pool: member i (1-based) trains with seed
/// hash(master_seed, i), so members differ only in their random streams.
pub fn build_pool(
    arch: &Architecture,
    ds: &Dataset,
    m: usize,
    cfg: &TrainConfig,
    master_seed: u64,
) -> Result<SwitchingPool> {
    if m == 0 {
        return Err(Error::Argument("pool size must be positive".into()));
    }
    let members: Result<Vec<Model<f32>>> = (1..=m as u64)
        .into_par_iter()
        .map(|i| {
            let member_cfg = TrainConfig {
                seed: derive_seed(master_seed, "member", i),
                ..cfg.clone()
            };
            train_adversarial(arch, ds, &member_cfg)
        })
        .collect();
    SwitchingPool::from_members(members?, master_seed)
}

/// As [`build_pool`], but each member checkpoint is cached in `cache_dir`
/// keyed by architecture, training data, and the member's full training
/// configuration; cache hits skip training entirely. Members for one master
/// seed are shared across pool sizes because the key is per member.
pub fn cached_members(
    arch: &Architecture,
    ds: &Dataset,
    template: &TrainConfig,
    epsilon_train: f64,
    master_seed: u64,
    count: usize,
    cache_dir: Option<&Path>,
) -> Result<Vec<Model<f32>>> {
    if count == 0 {
        return Err(Error::Argument("pool size must be positive".into()));
    }
    let ds_hash = dataset_hash(ds);
    let mut members = Vec::with_capacity(count);
    for i in 1..=count as u64 {
        let member_cfg = TrainConfig {
            epsilon_train,
            seed: derive_seed(master_seed, "member", i),
            ..template.clone()
        };
        let cache_path =
            cache_dir.map(|d| d.join(format!("{}.ckpt", member_hash(arch, &ds_hash, &member_cfg))));
        if let Some(p) = &cache_path {
            if p.exists() {
                let model = load_model(p)?;
                if model.arch().fingerprint() != arch.fingerprint()
                    || model.train_epsilon() != epsilon_train
                {
                    return Err(Error::Format(format!(
                        "cached checkpoint {} does not match its key",
                        p.display()
                    )));
                }
                members.push(model);
                continue;
            }
        }
        let model = train_adversarial(arch, ds, &member_cfg)?;
        if let Some(p) = &cache_path {
            std::fs::create_dir_all(p.parent().expect("cache path has a parent"))?;
            save_model(&model, p)?;
        }
        members.push(model);
    }
    Ok(members)
}

fn dataset_hash(ds: &Dataset) -> String {
    let mut h = Sha256::new();
    for &v in ds.images().data() {
        h.update(v.to_le_bytes());
    }
    for &l in ds.labels() {
        h.update((l as u64).to_le_bytes());
    }
    hex16(&h.finalize())
}

/// Cache key: architecture, training data, and the full member training
/// configuration (the member seed included).
fn member_hash(arch: &Architecture, ds_hash: &str, cfg: &TrainConfig) -> String {
    let mut h = Sha256::new();
    h.update(arch.fingerprint().as_bytes());
    h.update(ds_hash.as_bytes());
    h.update(cfg.epochs.to_le_bytes());
    h.update(cfg.batch_size.to_le_bytes());
    h.update(cfg.learning_rate.to_le_bytes());
    h.update(cfg.momentum.to_le_bytes());
    h.update(cfg.epsilon_train.to_le_bytes());
    h.update(cfg.inner_steps.to_le_bytes());
    h.update(cfg.inner_step_size.to_le_bytes());
    h.update(cfg.seed.to_le_bytes());
    hex16(&h.finalize())
}

fn hex16(digest: &[u8]) -> String {
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes every member checkpoint plus a `pool.cfg` manifest into `dir`,
/// returning the manifest path. Floats are printed in shortest round-trip
/// form, so load-after-save is exact.
pub fn save_pool(pool: &SwitchingPool, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    manifest.push_str("[pool]\n");
    let arch_id = pool
        .arch()
        .id()
        .ok_or_else(|| Error::Argument("custom architectures are not checkpointable".into()))?;
    manifest.push_str(&format!("arch = {arch_id}\n"));
    manifest.push_str(&format!("m = {}\n", pool.size()));
    manifest.push_str(&format!("epsilon_train = {}\n", pool.train_epsilon()));
    manifest.push_str(&format!("master_seed = {}\n", pool.master_seed()));
    for (i, member) in pool.members().iter().enumerate() {
        let name = format!("member_{i:03}.ckpt");
        save_model(member, &dir.join(&name))?;
        manifest.push_str(&format!("member_{i} = {name}\n"));
    }
    let path = dir.join("pool.cfg");
    std::fs::write(&path, manifest)?;
    Ok(path)
}

/// Loads a pool manifest written by [`save_pool`], validating homogeneity,
/// the member count, the training budget, and that member initializations
/// are pairwise distinct.
pub fn load_pool(manifest_path: &Path) -> Result<SwitchingPool> {
    let text = std::fs::read_to_string(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut arch_id = None;
    let mut m = None;
    let mut epsilon_train = None;
    let mut master_seed = None;
    let mut member_paths: Vec<(usize, PathBuf)> = Vec::new();
    let mut in_pool = false;
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if line.starts_with('[') {
            in_pool = line == "[pool]";
            if !in_pool {
                return Err(Error::Format(format!(
                    "line {}: unknown section {line}",
                    ln + 1
                )));
            }
            continue;
        }
        if !in_pool {
            return Err(Error::Format(format!(
                "line {}: key outside [pool] section",
                ln + 1
            )));
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("line {}: expected key = value", ln + 1)))?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "arch" => arch_id = Some(value.parse::<crate::arch::DatasetId>()?),
            "m" => {
                m = Some(value.parse::<usize>().map_err(|_| {
                    Error::Format(format!("line {}: bad member count {value}", ln + 1))
                })?)
            }
            "epsilon_train" => {
                epsilon_train = Some(value.parse::<f64>().map_err(|_| {
                    Error::Format(format!("line {}: bad epsilon {value}", ln + 1))
                })?)
            }
            "master_seed" => {
                master_seed = Some(value.parse::<u64>().map_err(|_| {
                    Error::Format(format!("line {}: bad seed {value}", ln + 1))
                })?)
            }
            k if k.starts_with("member_") => {
                let idx: usize = k["member_".len()..].parse().map_err(|_| {
                    Error::Format(format!("line {}: bad member key {k}", ln + 1))
                })?;
                member_paths.push((idx, dir.join(value)));
            }
            other => {
                return Err(Error::Format(format!(
                    "line {}: unknown key {other}",
                    ln + 1
                )))
            }
        }
    }
    let m = m.ok_or_else(|| Error::Format("manifest missing m".into()))?;
    let epsilon_train =
        epsilon_train.ok_or_else(|| Error::Format("manifest missing epsilon_train".into()))?;
    let master_seed =
        master_seed.ok_or_else(|| Error::Format("manifest missing master_seed".into()))?;
    let arch_id = arch_id.ok_or_else(|| Error::Format("manifest missing arch".into()))?;
    if member_paths.len() != m {
        return Err(Error::Format(format!(
            "manifest lists {} members but m = {m}",
            member_paths.len()
        )));
    }
    member_paths.sort_by_key(|&(i, _)| i);
    if member_paths.iter().enumerate().any(|(want, &(got, _))| want != got) {
        return Err(Error::Format(format!(
            "member indices must be 0..{m} contiguous"
        )));
    }
    let members: Result<Vec<Model<f32>>> =
        member_paths.iter().map(|(_, p)| load_model(p)).collect();
    let members = members?;
    for (i, member) in members.iter().enumerate() {
        if member.arch().id() != Some(arch_id) {
            return Err(Error::Format(format!(
                "member {i} checkpoint is {:?}, manifest says {arch_id}",
                member.arch().id()
            )));
        }
        if member.train_epsilon() != epsilon_train {
            return Err(Error::Format(format!(
                "member {i} trained under {} but manifest says {epsilon_train}",
                member.train_epsilon()
            )));
        }
    }
    for i in 0..members.len() {
        for j in (i + 1)..members.len() {
            if members[i].init_seed() == members[j].init_seed() {
                return Err(Error::Format(format!(
                    "members {i} and {j} share init seed {}",
                    members[i].init_seed()
                )));
            }
        }
    }
    SwitchingPool::from_members(members, master_seed)
}
