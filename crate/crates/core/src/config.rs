//! Run configuration as flat `key = value` text. Every key has a default;
//! unknown or repeated keys are rejected.

use std::collections::BTreeMap;
use std::path::Path;

use crate::association::{LossWeights, Mode};
use crate::datagen::{BatchConfig, DataConfig, RenderConfig};
use crate::diffcore::LrSchedule;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub seed: u64,
    pub epochs: usize,
    /// 0 means one pass over the training tuples per epoch.
    pub steps_per_epoch: usize,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub schedule: LrSchedule,
    pub momentum: f64,
    pub batch: BatchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Proposed,
            seed: 0,
            epochs: 30,
            steps_per_epoch: 0,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            weights: LossWeights::default(),
            schedule: LrSchedule::default(),
            momentum: 0.9,
            batch: BatchConfig::default(),
        }
    }
}

/// `(key, description)` for every accepted key, in output order.
pub const KEYS: &[(&str, &str)] = &[
    ("mode", "loss configuration: basel, rank1, rank2, GDA, LRA, proposed"),
    ("seed", "training seed (initialization and batch sampling)"),
    ("epochs", "training epochs"),
    ("steps_per_epoch", "SGD steps per epoch; 0 = train tuples / batch tuples, rounded up"),
    ("n_train_ids", "training identities"),
    ("n_test_ids", "test identities (at least 2)"),
    ("images_per_id", "images per identity (at least 2)"),
    ("data_seed", "dataset generation seed"),
    ("distractor_group", "test identities per group differing only in shoe color (at most 8)"),
    ("missing_text_rate", "fraction of tuples whose description is replaced by another of the same identity"),
    ("height", "image height in pixels"),
    ("width", "image width in pixels"),
    ("noise", "maximum additive pixel noise"),
    ("max_shift", "maximum vertical jitter in pixels"),
    ("flip_prob", "horizontal flip probability"),
    ("conv1", "channels of the first conv block"),
    ("conv2", "channels of the second conv block"),
    ("conv3", "channels of the third conv block"),
    ("d", "feature-map, description and phrase feature size"),
    ("d_out", "identity feature size"),
    ("d_e", "word embedding size"),
    ("d_h", "LSTM hidden size"),
    ("pool_h", "bin pooling window height"),
    ("pool_w", "bin pooling window width"),
    ("forget_bias", "initial LSTM forget-gate bias"),
    ("embed_gain", "multiplier on the word-embedding init bound"),
    ("score_gain", "score-head init gain, weights start negative; 0 keeps plain init"),
    ("attention_gain", "attention-head init gain, weights start negative; 0 keeps plain init"),
    ("decoder_in_gain", "multiplier on the decoder input projection init"),
    ("language_lr", "learning-rate multiplier for text encoder, text classifier, score, attention and decoder"),
    ("lambda_t", "weight of the description identity loss"),
    ("lambda_dis", "weight of the global association loss"),
    ("lambda_rec", "weight of the phrase reconstruction loss"),
    ("margin", "ranking margin on cosine similarity"),
    ("lr", "initial learning rate"),
    ("lr_decayed", "learning rate after decay"),
    ("decay_after", "last epoch at the initial learning rate"),
    ("momentum", "SGD momentum"),
    ("persons", "identities per batch"),
    ("tuples_per_person", "tuples per identity in a batch"),
    ("negs_per_image", "negative descriptions per image"),
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("invalid value `{value}` for `{key}`: {e}")))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "mode" => self.mode = v.parse()?,
            "seed" => self.seed = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "steps_per_epoch" => self.steps_per_epoch = parse(key, v)?,
            "n_train_ids" => self.data.n_train_ids = parse(key, v)?,
            "n_test_ids" => self.data.n_test_ids = parse(key, v)?,
            "images_per_id" => self.data.images_per_id = parse(key, v)?,
            "data_seed" => self.data.seed = parse(key, v)?,
            "distractor_group" => self.data.distractor_group = parse(key, v)?,
            "missing_text_rate" => self.data.missing_text_rate = parse(key, v)?,
            "height" => self.data.render.height = parse(key, v)?,
            "width" => self.data.render.width = parse(key, v)?,
            "noise" => self.data.render.noise = parse(key, v)?,
            "max_shift" => self.data.render.max_shift = parse(key, v)?,
            "flip_prob" => self.data.render.flip_prob = parse(key, v)?,
            "conv1" => self.model.conv_widths[0] = parse(key, v)?,
            "conv2" => self.model.conv_widths[1] = parse(key, v)?,
            "conv3" => self.model.conv_widths[2] = parse(key, v)?,
            "d" => self.model.d = parse(key, v)?,
            "d_out" => self.model.d_out = parse(key, v)?,
            "d_e" => self.model.d_e = parse(key, v)?,
            "d_h" => self.model.d_h = parse(key, v)?,
            "pool_h" => self.model.pool_window.0 = parse(key, v)?,
            "pool_w" => self.model.pool_window.1 = parse(key, v)?,
            "forget_bias" => self.model.forget_bias = parse(key, v)?,
            "embed_gain" => self.model.embed_gain = parse(key, v)?,
            "score_gain" => self.model.score_gain = parse(key, v)?,
            "attention_gain" => self.model.attention_gain = parse(key, v)?,
            "decoder_in_gain" => self.model.decoder_in_gain = parse(key, v)?,
            "language_lr" => self.model.language_lr = parse(key, v)?,
            "lambda_t" => self.weights.lambda_t = parse(key, v)?,
            "lambda_dis" => self.weights.lambda_dis = parse(key, v)?,
            "lambda_rec" => self.weights.lambda_rec = parse(key, v)?,
            "margin" => self.weights.margin = parse(key, v)?,
            "lr" => self.schedule.initial = parse(key, v)?,
            "lr_decayed" => self.schedule.decayed = parse(key, v)?,
            "decay_after" => self.schedule.decay_after = parse(key, v)?,
            "momentum" => self.momentum = parse(key, v)?,
            "persons" => self.batch.persons = parse(key, v)?,
            "tuples_per_person" => self.batch.tuples_per_person = parse(key, v)?,
            "negs_per_image" => self.batch.negs_per_image = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let s = match key {
            "mode" => self.mode.to_string(),
            "seed" => self.seed.to_string(),
            "epochs" => self.epochs.to_string(),
            "steps_per_epoch" => self.steps_per_epoch.to_string(),
            "n_train_ids" => self.data.n_train_ids.to_string(),
            "n_test_ids" => self.data.n_test_ids.to_string(),
            "images_per_id" => self.data.images_per_id.to_string(),
            "data_seed" => self.data.seed.to_string(),
            "distractor_group" => self.data.distractor_group.to_string(),
            "missing_text_rate" => self.data.missing_text_rate.to_string(),
            "height" => self.data.render.height.to_string(),
            "width" => self.data.render.width.to_string(),
            "noise" => self.data.render.noise.to_string(),
            "max_shift" => self.data.render.max_shift.to_string(),
            "flip_prob" => self.data.render.flip_prob.to_string(),
            "conv1" => self.model.conv_widths[0].to_string(),
            "conv2" => self.model.conv_widths[1].to_string(),
            "conv3" => self.model.conv_widths[2].to_string(),
            "d" => self.model.d.to_string(),
            "d_out" => self.model.d_out.to_string(),
            "d_e" => self.model.d_e.to_string(),
            "d_h" => self.model.d_h.to_string(),
            "pool_h" => self.model.pool_window.0.to_string(),
            "pool_w" => self.model.pool_window.1.to_string(),
            "forget_bias" => self.model.forget_bias.to_string(),
            "embed_gain" => self.model.embed_gain.to_string(),
            "score_gain" => self.model.score_gain.to_string(),
            "attention_gain" => self.model.attention_gain.to_string(),
            "decoder_in_gain" => self.model.decoder_in_gain.to_string(),
            "language_lr" => self.model.language_lr.to_string(),
            "lambda_t" => self.weights.lambda_t.to_string(),
            "lambda_dis" => self.weights.lambda_dis.to_string(),
            "lambda_rec" => self.weights.lambda_rec.to_string(),
            "margin" => self.weights.margin.to_string(),
            "lr" => self.schedule.initial.to_string(),
            "lr_decayed" => self.schedule.decayed.to_string(),
            "decay_after" => self.schedule.decay_after.to_string(),
            "momentum" => self.momentum.to_string(),
            "persons" => self.batch.persons.to_string(),
            "tuples_per_person" => self.batch.tuples_per_person.to_string(),
            "negs_per_image" => self.batch.negs_per_image.to_string(),
            _ => return None,
        };
        Some(s)
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", i + 1)));
            }
            self.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, e.to_string().trim_start_matches("configuration error: "))))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    /// Every key with its current value.
    pub fn to_map(&self) -> BTreeMap<String, String> {
        KEYS.iter()
            .map(|(k, _)| (k.to_string(), self.get(k).expect("listed key")))
            .collect()
    }

    /// All keys in documented order, one per line.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|(k, _)| format!("{k} = {}\n", self.get(k).expect("listed key")))
            .collect()
    }

    /// Commented listing of every key and its default.
    pub fn documented_defaults() -> String {
        let d = Self::default();
        KEYS.iter()
            .map(|(k, doc)| format!("# {doc}\n{k} = {}\n", d.get(k).expect("listed key")))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.data.render.validate()?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch.persons == 0 || self.batch.tuples_per_person == 0 {
            return Err(Error::Config("persons and tuples_per_person must be at least 1".into()));
        }
        if self.batch.tuples_per_person > self.data.images_per_id {
            return Err(Error::Config("tuples_per_person exceeds images_per_id".into()));
        }
        if !(self.schedule.initial > 0.0 && self.schedule.decayed > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        let m = &self.model;
        if [m.d, m.d_out, m.d_e, m.d_h].contains(&0) || m.conv_widths.contains(&0) {
            return Err(Error::Config("model sizes must be positive".into()));
        }
        if !(m.language_lr > 0.0 && m.language_lr.is_finite()) {
            return Err(Error::Config("language_lr must be positive".into()));
        }
        let gains = [m.forget_bias, m.embed_gain, m.score_gain, m.attention_gain, m.decoder_in_gain];
        if !gains.iter().all(|x| x.is_finite()) || m.score_gain < 0.0 || m.attention_gain < 0.0 {
            return Err(Error::Config("init gains must be finite and head gains non-negative".into()));
        }
        Ok(())
    }

    pub fn render(&self) -> RenderConfig {
        self.data.render
    }
}
