//! In-memory stages shared by the subcommands: generator training,
//! pre-training, fine-tuning and evaluation.

use anyhow::{bail, Context, Result};
use crsfuse::dataset::{
    leave_one_out_split, pretrain_cutoffs, read_conversations, ConversationRecord, Dataset,
    SplitSpec,
};
use crsfuse::finetune::{self, EvalResult, FinetuneHistory};
use crsfuse::model::{DualEncoder, Generator};
use crsfuse::negsampler::{train_generator, NegativePolicy, NegativeSampler};
use crsfuse::optim::{AdamConfig, AdamState};
use crsfuse::pretrain::{pretrain_epoch, training_windows, EpochStats};
use crsfuse::rng;

use crate::config::RunConfig;

// Stream tags under the run seed.
const GENERATOR_STREAM: u64 = 1;
const INIT_STREAM: u64 = 2;
const PRETRAIN_STREAM: u64 = 3;

/// Loads the data directory, taking records from `conversations` when set.
pub fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    let mut data = Dataset::load_dir(&cfg.data_dir)?;
    if cfg.conversations.is_some() {
        let path = cfg.conversations_path();
        data.records = read_conversations(&path, &data.vocab)?;
        data.validate()?;
    }
    Ok(data)
}

pub fn split(data: &Dataset) -> Result<SplitSpec> {
    if data.records.is_empty() {
        bail!("no conversation records found; run `simulate` first or pass --conversations");
    }
    Ok(leave_one_out_split(&data.records))
}

/// Item windows for pre-training and the generator, cut before each user's
/// first held-out conversation.
pub fn pretrain_sequences(cfg: &RunConfig, data: &Dataset, split: &SplitSpec) -> Vec<Vec<u32>> {
    training_windows(
        &data.log,
        &pretrain_cutoffs(&data.log, split),
        cfg.model.max_items,
    )
}

pub fn fit_generator(
    cfg: &RunConfig,
    data: &Dataset,
    split: &SplitSpec,
) -> Result<(Generator, Vec<f64>)> {
    let seqs = pretrain_sequences(cfg, data, split);
    let mut r = rng::derived(cfg.seed, &[GENERATOR_STREAM]);
    Ok(train_generator(
        &seqs,
        &data.catalog,
        cfg.model.clone(),
        &cfg.generator_training(),
        &mut r,
    )?)
}

/// Fresh dual encoder. Pre-trained and scratch runs of one seed start from
/// the same parameters.
pub fn init_model(cfg: &RunConfig, data: &Dataset) -> Result<DualEncoder> {
    Ok(DualEncoder::new(
        cfg.model.clone(),
        &data.catalog,
        &mut rng::derived(cfg.seed, &[INIT_STREAM]),
    )?)
}

/// Whether pre-training with `cfg` draws generator negatives.
pub fn needs_generator(cfg: &RunConfig) -> bool {
    !cfg.no_mip && matches!(cfg.neg_policy, NegativePolicy::Generator { .. })
}

pub fn pretrain_model(
    cfg: &RunConfig,
    data: &Dataset,
    split: &SplitSpec,
    generator: Option<&Generator>,
    mut on_epoch: impl FnMut(usize, &EpochStats),
) -> Result<DualEncoder> {
    cfg.validate()?;
    let policy = if cfg.no_mip {
        NegativePolicy::Uniform
    } else {
        cfg.neg_policy
    };
    let sampler = NegativeSampler::new(policy, generator)?;
    let seqs = pretrain_sequences(cfg, data, split);
    let mut model = init_model(cfg, data)?;
    let mut adam = AdamState::new(
        &model.store,
        AdamConfig::with_lr(cfg.pretrain_learning_rate()),
    );
    let pcfg = cfg.pretrain_config();
    let mut r = rng::derived(cfg.seed, &[PRETRAIN_STREAM]);
    for epoch in 0..cfg.pretrain_epoch_count() {
        let stats = pretrain_epoch(
            &mut model,
            &mut adam,
            &seqs,
            &data.catalog,
            &sampler,
            &pcfg,
            &mut r,
        )?;
        on_epoch(epoch, &stats);
    }
    Ok(model)
}

pub fn finetune_model(
    cfg: &RunConfig,
    data: &Dataset,
    split: &SplitSpec,
    mut model: DualEncoder,
    generator: Option<&Generator>,
    on_epoch: impl FnMut(usize, f64, Option<f64>),
) -> Result<(DualEncoder, FinetuneHistory)> {
    cfg.validate()?;
    if split.train.is_empty() {
        bail!("no training records for fine-tuning");
    }
    let sampler = NegativeSampler::new(cfg.finetune_neg_policy, generator)
        .context("fine-tuning with generator negatives needs --generator")?;
    let hist = finetune::finetune(
        &mut model,
        &split.train,
        &split.valid,
        &data.log,
        &data.catalog,
        &sampler,
        &cfg.finetune_config(),
        cfg.seed,
        on_epoch,
    )?;
    Ok((model, hist))
}

pub fn evaluate_records(
    cfg: &RunConfig,
    model: &DualEncoder,
    data: &Dataset,
    records: &[ConversationRecord],
) -> Result<EvalResult> {
    if records.is_empty() {
        bail!("the test split is empty");
    }
    Ok(finetune::evaluate(
        model,
        &data.log,
        &data.catalog,
        records,
        cfg.seed,
    )?)
}

pub const REPORT_HEADER: &str = "model_name\tMRR\tNDCG@10\tnum_records";

pub fn report_tsv(name: &str, res: &EvalResult) -> String {
    format!(
        "{REPORT_HEADER}\n{name}\t{:.6}\t{:.6}\t{}\n",
        res.mrr,
        res.ndcg10,
        res.ranks.len()
    )
}

/// Per-record ranks with raw user and item ids.
pub fn rank_dump(data: &Dataset, records: &[ConversationRecord], res: &EvalResult) -> String {
    let mut s = String::from("user\ttarget\thistory_cutoff\trank\n");
    for (r, rank) in records.iter().zip(&res.ranks) {
        let user = data
            .vocab
            .users
            .raw(r.user)
            .map_or_else(|| r.user.to_string(), str::to_string);
        let item = data
            .vocab
            .items
            .raw(r.target)
            .map_or_else(|| r.target.to_string(), str::to_string);
        s.push_str(&format!("{user}\t{item}\t{}\t{rank}\n", r.history_cutoff));
    }
    s
}
