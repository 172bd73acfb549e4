//! Run configuration: built-in defaults, overridden by a `key = value` file,
//! overridden by command-line flags.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use crsfuse::dataset::SyntheticConfig;
use crsfuse::finetune::FinetuneConfig;
use crsfuse::model::ModelConfig;
use crsfuse::negsampler::{GeneratorTraining, NegativePolicy};
use crsfuse::pretrain::PretrainConfig;
use crsfuse::simulator::SimulatorConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    /// Conversation records; defaults to the data directory's file.
    pub conversations: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
    /// Pre-trained generator; trained on the fly when absent.
    pub generator: Option<PathBuf>,
    pub train_generator: bool,
    pub model_name: String,
    pub seed: u64,

    pub model: ModelConfig,
    pub mask_prob: f64,
    pub substitution_prob: f64,
    pub lambda_mip: f32,
    pub lambda_sad: f32,
    pub no_mip: bool,
    pub no_sad: bool,
    pub neg_policy: NegativePolicy,
    pub top_k: usize,
    /// Negatives for fine-tuning. Uniform unless asked otherwise.
    pub finetune_neg_policy: NegativePolicy,
    pub batch_size: usize,
    pub clip: f64,
    /// Overrides both stage learning rates when set.
    pub lr: Option<f32>,
    pub pretrain_lr: f32,
    pub finetune_lr: f32,
    pub generator_lr: f32,
    /// Overrides both stage epoch counts when set.
    pub epochs: Option<usize>,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub generator_epochs: usize,
    pub patience: usize,

    pub max_asks: usize,
    pub filter_rejected: bool,
    pub synthetic: SyntheticConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            conversations: None,
            out_dir: PathBuf::from("out"),
            checkpoint: None,
            generator: None,
            train_generator: true,
            model_name: "model".into(),
            seed: 0,
            model: ModelConfig::default(),
            mask_prob: 0.2,
            substitution_prob: 0.5,
            lambda_mip: 1.0,
            lambda_sad: 1.0,
            no_mip: false,
            no_sad: false,
            neg_policy: NegativePolicy::Generator { top_k: 100 },
            top_k: 100,
            finetune_neg_policy: NegativePolicy::Uniform,
            batch_size: 256,
            clip: 0.1,
            lr: None,
            pretrain_lr: 1e-3,
            finetune_lr: 1e-4,
            generator_lr: 1e-3,
            epochs: None,
            pretrain_epochs: 30,
            finetune_epochs: 50,
            generator_epochs: 30,
            patience: 5,
            max_asks: 15,
            filter_rejected: false,
            synthetic: SyntheticConfig::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| anyhow!("invalid value `{value}` for `{key}`: {e}"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => bail!("invalid value `{value}` for `{key}`: expected true or false"),
    }
}

fn with_top_k(policy: NegativePolicy, top_k: usize) -> NegativePolicy {
    match policy {
        NegativePolicy::Generator { .. } => NegativePolicy::Generator { top_k },
        p => p,
    }
}

impl RunConfig {
    /// Sets one key. Keys use underscores; dashes are accepted too.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let v = value.trim();
        let k = key.as_str();
        match k {
            "data_dir" => self.data_dir = v.into(),
            "conversations" => self.conversations = Some(v.into()),
            "out_dir" => self.out_dir = v.into(),
            "checkpoint" => self.checkpoint = Some(v.into()),
            "generator" => self.generator = Some(v.into()),
            "train_generator" => self.train_generator = parse_bool(k, v)?,
            "model_name" => self.model_name = v.into(),
            "seed" => self.seed = parse(k, v)?,
            "dim" => self.model.dim = parse(k, v)?,
            "layers" => self.model.layers = parse(k, v)?,
            "heads" => self.model.heads = parse(k, v)?,
            "max_items" => self.model.max_items = parse(k, v)?,
            "max_attributes" => self.model.max_attributes = parse(k, v)?,
            "dropout" => self.model.dropout = parse(k, v)?,
            "mask_prob" => self.mask_prob = parse(k, v)?,
            "substitution_prob" => self.substitution_prob = parse(k, v)?,
            "lambda_mip" => self.lambda_mip = parse(k, v)?,
            "lambda_sad" => self.lambda_sad = parse(k, v)?,
            "no_mip" => self.no_mip = parse_bool(k, v)?,
            "no_sad" => self.no_sad = parse_bool(k, v)?,
            "neg_policy" => self.neg_policy = with_top_k(parse(k, v)?, self.top_k),
            "finetune_neg_policy" => {
                self.finetune_neg_policy = with_top_k(parse(k, v)?, self.top_k)
            }
            "top_k" => {
                self.top_k = parse(k, v)?;
                self.neg_policy = with_top_k(self.neg_policy, self.top_k);
                self.finetune_neg_policy = with_top_k(self.finetune_neg_policy, self.top_k);
            }
            "batch_size" => self.batch_size = parse(k, v)?,
            "clip" => self.clip = parse(k, v)?,
            "lr" => self.lr = Some(parse(k, v)?),
            "pretrain_lr" => self.pretrain_lr = parse(k, v)?,
            "finetune_lr" => self.finetune_lr = parse(k, v)?,
            "generator_lr" => self.generator_lr = parse(k, v)?,
            "epochs" => self.epochs = Some(parse(k, v)?),
            "pretrain_epochs" => self.pretrain_epochs = parse(k, v)?,
            "finetune_epochs" => self.finetune_epochs = parse(k, v)?,
            "generator_epochs" => self.generator_epochs = parse(k, v)?,
            "patience" => self.patience = parse(k, v)?,
            "max_asks" => self.max_asks = parse(k, v)?,
            "filter_rejected" => self.filter_rejected = parse_bool(k, v)?,
            "users" => self.synthetic.users = parse(k, v)?,
            "items" => self.synthetic.items = parse(k, v)?,
            "attributes" => self.synthetic.attributes = parse(k, v)?,
            "attrs_per_item" => self.synthetic.attrs_per_item = parse(k, v)?,
            "sessions_per_user" => self.synthetic.sessions_per_user = parse(k, v)?,
            "history_len" => self.synthetic.history_len = parse(k, v)?,
            "latent_size" => self.synthetic.latent_size = parse(k, v)?,
            _ => bail!("unknown configuration key `{key}`"),
        }
        Ok(())
    }

    /// Applies a `key = value` file. Blank lines and `#` comments are skipped.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("{}:{}: expected `key = value`", path.display(), n + 1))?;
            self.set(k, v)
                .with_context(|| format!("{}:{}", path.display(), n + 1))?;
        }
        Ok(())
    }

    pub fn conversations_path(&self) -> PathBuf {
        self.conversations
            .clone()
            .unwrap_or_else(|| self.data_dir.join(crsfuse::dataset::CONVERSATIONS_FILE))
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            mask_prob: self.mask_prob,
            substitution_prob: self.substitution_prob,
            lambda_mip: if self.no_mip { 0.0 } else { self.lambda_mip },
            lambda_sad: if self.no_sad { 0.0 } else { self.lambda_sad },
            batch_size: self.batch_size,
            clip: self.clip,
        }
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        FinetuneConfig {
            epochs: self.epochs.unwrap_or(self.finetune_epochs),
            batch_size: self.batch_size,
            lr: self.lr.unwrap_or(self.finetune_lr),
            clip: self.clip,
            patience: self.patience,
        }
    }

    pub fn pretrain_epoch_count(&self) -> usize {
        self.epochs.unwrap_or(self.pretrain_epochs)
    }

    pub fn pretrain_learning_rate(&self) -> f32 {
        self.lr.unwrap_or(self.pretrain_lr)
    }

    pub fn generator_training(&self) -> GeneratorTraining {
        GeneratorTraining {
            epochs: self.generator_epochs,
            batch_size: self.batch_size,
            lr: self.generator_lr,
            clip: self.clip,
        }
    }

    pub fn simulator_config(&self) -> SimulatorConfig {
        SimulatorConfig {
            max_asks: self.max_asks,
            filter_rejected: self.filter_rejected,
        }
    }

    pub fn synthetic_config(&self) -> SyntheticConfig {
        SyntheticConfig {
            seed: self.seed,
            ..self.synthetic.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            bail!("batch_size must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.mask_prob) || !(0.0..=1.0).contains(&self.substitution_prob)
        {
            bail!("mask_prob and substitution_prob must lie in [0, 1]");
        }
        if self.no_mip && self.no_sad {
            bail!("--no-mip and --no-sad together leave nothing to pre-train");
        }
        if self.top_k == 0 {
            bail!("top_k must be at least 1");
        }
        Ok(())
    }

    /// Every setting as `key = value` lines, readable by [`apply_file`].
    ///
    /// [`apply_file`]: RunConfig::apply_file
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let path = |p: &Path| p.display().to_string();
        let mut e = vec![
            ("data_dir", path(&self.data_dir)),
            ("out_dir", path(&self.out_dir)),
        ];
        if let Some(p) = &self.conversations {
            e.push(("conversations", path(p)));
        }
        if let Some(p) = &self.checkpoint {
            e.push(("checkpoint", path(p)));
        }
        if let Some(p) = &self.generator {
            e.push(("generator", path(p)));
        }
        e.extend([
            ("train_generator", self.train_generator.to_string()),
            ("model_name", self.model_name.clone()),
            ("seed", self.seed.to_string()),
            ("dim", self.model.dim.to_string()),
            ("layers", self.model.layers.to_string()),
            ("heads", self.model.heads.to_string()),
            ("max_items", self.model.max_items.to_string()),
            ("max_attributes", self.model.max_attributes.to_string()),
            ("dropout", self.model.dropout.to_string()),
            ("mask_prob", self.mask_prob.to_string()),
            ("substitution_prob", self.substitution_prob.to_string()),
            ("lambda_mip", self.lambda_mip.to_string()),
            ("lambda_sad", self.lambda_sad.to_string()),
            ("no_mip", self.no_mip.to_string()),
            ("no_sad", self.no_sad.to_string()),
            ("neg_policy", policy_name(self.neg_policy)),
            ("finetune_neg_policy", policy_name(self.finetune_neg_policy)),
            ("top_k", self.top_k.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("clip", self.clip.to_string()),
        ]);
        if let Some(lr) = self.lr {
            e.push(("lr", lr.to_string()));
        }
        e.extend([
            ("pretrain_lr", self.pretrain_lr.to_string()),
            ("finetune_lr", self.finetune_lr.to_string()),
            ("generator_lr", self.generator_lr.to_string()),
        ]);
        if let Some(n) = self.epochs {
            e.push(("epochs", n.to_string()));
        }
        e.extend([
            ("pretrain_epochs", self.pretrain_epochs.to_string()),
            ("finetune_epochs", self.finetune_epochs.to_string()),
            ("generator_epochs", self.generator_epochs.to_string()),
            ("patience", self.patience.to_string()),
            ("max_asks", self.max_asks.to_string()),
            ("filter_rejected", self.filter_rejected.to_string()),
            ("users", self.synthetic.users.to_string()),
            ("items", self.synthetic.items.to_string()),
            ("attributes", self.synthetic.attributes.to_string()),
            ("attrs_per_item", self.synthetic.attrs_per_item.to_string()),
            (
                "sessions_per_user",
                self.synthetic.sessions_per_user.to_string(),
            ),
            ("history_len", self.synthetic.history_len.to_string()),
            ("latent_size", self.synthetic.latent_size.to_string()),
        ]);
        e
    }
}

fn policy_name(p: NegativePolicy) -> String {
    match p {
        NegativePolicy::Uniform => "uniform".into(),
        NegativePolicy::Generator { .. } => "generator".into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flag_beats_file_beats_default() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.conf");
        fs::write(&file, "# shared\ndim = 32\nlayers = 3\nbatch-size = 64\n").unwrap();
        let mut c = RunConfig::default();
        c.apply_file(&file).unwrap();
        c.set("dim", "16").unwrap();
        assert_eq!(c.model.dim, 16);
        assert_eq!(c.model.layers, 3);
        assert_eq!(c.batch_size, 64);
        assert_eq!(c.model.heads, 2);
    }

    #[test]
    fn text_round_trips() {
        let mut c = RunConfig::default();
        c.set("neg_policy", "uniform").unwrap();
        c.set("epochs", "3").unwrap();
        c.set("checkpoint", "a/b.ckpt").unwrap();
        c.set("top_k", "7").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c");
        fs::write(&file, c.to_text()).unwrap();
        let mut d = RunConfig::default();
        d.apply_file(&file).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn top_k_follows_policy() {
        let mut c = RunConfig::default();
        c.set("top_k", "5").unwrap();
        assert_eq!(c.neg_policy, NegativePolicy::Generator { top_k: 5 });
        c.set("neg_policy", "uniform").unwrap();
        c.set("neg_policy", "generator").unwrap();
        assert_eq!(c.neg_policy, NegativePolicy::Generator { top_k: 5 });
    }

    #[test]
    fn bad_entries_are_rejected() {
        let mut c = RunConfig::default();
        assert!(c.set("nonsense", "1").is_err());
        assert!(c.set("dim", "wide").is_err());
        assert!(c.set("no_sad", "maybe").is_err());
        c.no_mip = true;
        c.no_sad = true;
        assert!(c.validate().is_err());
    }

    #[test]
    fn stage_overrides() {
        let mut c = RunConfig::default();
        assert_eq!(c.finetune_config().lr, 1e-4);
        assert_eq!(c.pretrain_learning_rate(), 1e-3);
        c.set("lr", "0.5").unwrap();
        c.set("epochs", "2").unwrap();
        assert_eq!(c.finetune_config().lr, 0.5);
        assert_eq!(c.pretrain_epoch_count(), 2);
        c.set("no_sad", "true").unwrap();
        assert_eq!(c.pretrain_config().lambda_sad, 0.0);
    }
}
