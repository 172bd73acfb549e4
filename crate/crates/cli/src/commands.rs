//! Subcommands. Each reads its inputs, runs a pipeline stage and writes its
//! artifacts into the output directory, which is locked for the duration.

use std::fs::{self, OpenOptions};
use std::io::{ErrorKind, Write as _};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use crsfuse::checkpoint::Checkpoint;
use crsfuse::dataset::{generate_synthetic, write_conversations, Dataset, CONVERSATIONS_FILE};
use crsfuse::finetune::EvalResult;
use crsfuse::model::{DualEncoder, Generator};
use crsfuse::simulator::simulate_dataset;
use indexmap::IndexMap;
use log::info;

use crate::config::RunConfig;
use crate::pipeline;

pub const LOCK_FILE: &str = ".crsfuse.lock";
pub const SIMULATE_SUMMARY: &str = "simulate_summary.tsv";
pub const GENERATOR_CHECKPOINT: &str = "generator.ckpt";
pub const GENERATOR_LOG: &str = "generator_log.tsv";
pub const PRETRAIN_CHECKPOINT: &str = "pretrain.ckpt";
pub const PRETRAIN_LOG: &str = "pretrain_log.tsv";
pub const FINETUNE_CHECKPOINT: &str = "finetune.ckpt";
pub const FINETUNE_LOG: &str = "finetune_log.tsv";
pub const REPORT: &str = "report.tsv";
pub const RANKS: &str = "ranks.tsv";

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct OutDirLock {
    path: PathBuf,
}

impl OutDirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == ErrorKind::AlreadyExists => Err(anyhow!(
                "output directory {} is in use by another run (delete {} if it is stale)",
                dir.display(),
                path.display()
            )),
            Err(e) => Err(e).with_context(|| format!("creating {}", path.display())),
        }
    }
}

impl Drop for OutDirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

/// Settings recorded in checkpoints. Paths are left out so that identical
/// runs into different directories produce identical files.
fn checkpoint_metadata(cfg: &RunConfig, stage: &str) -> IndexMap<String, String> {
    const PATHS: [&str; 5] = [
        "data_dir",
        "out_dir",
        "conversations",
        "checkpoint",
        "generator",
    ];
    let mut m: IndexMap<String, String> = IndexMap::new();
    m.insert("stage".into(), stage.into());
    for (k, v) in cfg.entries() {
        if !PATHS.contains(&k) {
            m.insert(format!("config.{k}"), v);
        }
    }
    m.insert(
        "rng".into(),
        format!("chacha8 seed {} with per-stage streams", cfg.seed),
    );
    m
}

fn save_model(cfg: &RunConfig, model: &DualEncoder, stage: &str, name: &str) -> Result<PathBuf> {
    let mut c = Checkpoint::from_dual_encoder(model);
    c.metadata.extend(checkpoint_metadata(cfg, stage));
    let path = cfg.out_dir.join(name);
    c.save(&path)?;
    Ok(path)
}

pub fn load_model(cfg: &RunConfig, data: &Dataset, path: &Path) -> Result<DualEncoder> {
    let c = Checkpoint::load(path)?;
    c.to_dual_encoder(&cfg.model, &data.catalog)
        .with_context(|| format!("loading {} with the configured model shape", path.display()))
}

pub fn load_generator(path: &Path, data: &Dataset) -> Result<Generator> {
    let c = Checkpoint::load(path)?;
    Ok(c.to_generator(data.catalog.item_vocab_size())?)
}

pub fn cmd_gen_synthetic(cfg: &RunConfig) -> Result<()> {
    let _lock = OutDirLock::acquire(&cfg.out_dir)?;
    let data = generate_synthetic(&cfg.synthetic_config())?;
    data.save_dir(&cfg.out_dir)?;
    info!(
        "wrote {} users, {} items, {} records to {}",
        data.log.user_count(),
        data.catalog.item_count(),
        data.records.len(),
        cfg.out_dir.display()
    );
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimulateSummary {
    pub records: usize,
    pub mean_attributes: f64,
}

pub fn simulate_summary_tsv(s: &SimulateSummary) -> String {
    format!(
        "records\t{}\nmean_attributes\t{:.6}\n",
        s.records, s.mean_attributes
    )
}

pub fn cmd_simulate(cfg: &RunConfig) -> Result<SimulateSummary> {
    let _lock = OutDirLock::acquire(&cfg.out_dir)?;
    let data = Dataset::load_dir(&cfg.data_dir)?;
    let records = simulate_dataset(&data.log, &data.catalog, &cfg.simulator_config(), cfg.seed);
    write_conversations(&cfg.out_dir.join(CONVERSATIONS_FILE), &records, &data.vocab)?;
    let total: usize = records.iter().map(|r| r.attributes.len()).sum();
    let summary = SimulateSummary {
        records: records.len(),
        mean_attributes: if records.is_empty() {
            0.0
        } else {
            total as f64 / records.len() as f64
        },
    };
    write(
        &cfg.out_dir,
        SIMULATE_SUMMARY,
        &simulate_summary_tsv(&summary),
    )?;
    info!(
        "simulated {} conversations, mean {:.3} attributes",
        summary.records, summary.mean_attributes
    );
    Ok(summary)
}

pub fn cmd_pretrain(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let _lock = OutDirLock::acquire(&cfg.out_dir)?;
    let data = pipeline::load_data(cfg)?;
    let split = pipeline::split(&data)?;
    let generator = if !pipeline::needs_generator(cfg) {
        None
    } else if let Some(path) = &cfg.generator {
        Some(load_generator(path, &data)?)
    } else if cfg.train_generator {
        let (gen, losses) = pipeline::fit_generator(cfg, &data, &split)?;
        let mut c = Checkpoint::from_generator(&gen);
        c.metadata.extend(checkpoint_metadata(cfg, "generator"));
        c.save(&cfg.out_dir.join(GENERATOR_CHECKPOINT))?;
        let mut log = String::from("epoch\tloss\n");
        for (e, l) in losses.iter().enumerate() {
            log.push_str(&format!("{e}\t{l:.6}\n"));
        }
        write(&cfg.out_dir, GENERATOR_LOG, &log)?;
        info!("trained the negative generator for {} epochs", losses.len());
        Some(gen)
    } else {
        bail!(
            "generator negatives need --generator <checkpoint> when generator training is disabled"
        );
    };

    let mut log = String::from("epoch\tmip\tsad\n");
    let model = pipeline::pretrain_model(cfg, &data, &split, generator.as_ref(), |e, s| {
        info!("pretrain epoch {e}: mip {:.4} sad {:.4}", s.mip, s.sad);
        log.push_str(&format!("{e}\t{:.6}\t{:.6}\n", s.mip, s.sad));
    })?;
    write(&cfg.out_dir, PRETRAIN_LOG, &log)?;
    let path = save_model(cfg, &model, "pretrain", PRETRAIN_CHECKPOINT)?;
    info!("saved {}", path.display());
    Ok(())
}

pub fn cmd_finetune(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let _lock = OutDirLock::acquire(&cfg.out_dir)?;
    let data = pipeline::load_data(cfg)?;
    let split = pipeline::split(&data)?;
    let model = match &cfg.checkpoint {
        Some(path) => load_model(cfg, &data, path)?,
        None => {
            info!("no checkpoint given; fine-tuning from scratch");
            pipeline::init_model(cfg, &data)?
        }
    };
    let generator = match &cfg.generator {
        Some(path) => Some(load_generator(path, &data)?),
        None => None,
    };
    let mut log = String::from("epoch\tloss\tvalid_ndcg10\n");
    let (model, hist) =
        pipeline::finetune_model(cfg, &data, &split, model, generator.as_ref(), |e, l, v| {
            let v = v.map_or_else(|| "nan".to_string(), |v| format!("{v:.6}"));
            info!("finetune epoch {e}: loss {l:.4} valid ndcg@10 {v}");
            log.push_str(&format!("{e}\t{l:.6}\t{v}\n"));
        })?;
    write(&cfg.out_dir, FINETUNE_LOG, &log)?;
    let path = save_model(cfg, &model, "finetune", FINETUNE_CHECKPOINT)?;
    if let Some(best) = hist.best_epoch {
        info!("kept epoch {best}; saved {}", path.display());
    }
    Ok(())
}

pub fn cmd_evaluate(cfg: &RunConfig) -> Result<EvalResult> {
    cfg.validate()?;
    let path = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| anyhow!("evaluate needs --checkpoint"))?;
    let _lock = OutDirLock::acquire(&cfg.out_dir)?;
    let data = pipeline::load_data(cfg)?;
    let split = pipeline::split(&data)?;
    let model = load_model(cfg, &data, path)?;
    let res = pipeline::evaluate_records(cfg, &model, &data, &split.test)?;
    write(
        &cfg.out_dir,
        REPORT,
        &pipeline::report_tsv(&cfg.model_name, &res),
    )?;
    write(
        &cfg.out_dir,
        RANKS,
        &pipeline::rank_dump(&data, &split.test, &res),
    )?;
    info!(
        "{}: MRR {:.4} NDCG@10 {:.4} over {} records",
        cfg.model_name,
        res.mrr,
        res.ndcg10,
        res.ranks.len()
    );
    Ok(res)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let a = OutDirLock::acquire(dir.path()).unwrap();
        assert!(OutDirLock::acquire(dir.path()).is_err());
        drop(a);
        assert!(!dir.path().join(LOCK_FILE).exists());
        OutDirLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn metadata_leaves_out_paths() {
        let mut c = RunConfig::default();
        c.out_dir = "/somewhere".into();
        let m = checkpoint_metadata(&c, "pretrain");
        assert!(m.values().all(|v| !v.contains("somewhere")));
        assert_eq!(m["config.dim"], "64");
    }
}
