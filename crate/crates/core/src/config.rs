//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. One file may hold
//! data, model and training keys together; unknown keys are an error.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::data::SyntheticConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues(pub BTreeMap<String, String>);

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", i + 1)));
            }
            if map.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {k}", i + 1)));
            }
        }
        Ok(KeyValues(map))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Removes `key` and parses its value.
    pub fn take_parsed<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        match self.0.remove(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| Error::Config(format!("{key} = {v}: {e}"))),
        }
    }

    fn take_into<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: fmt::Display,
    {
        if let Some(v) = self.take_parsed(key)? {
            *slot = v;
        }
        Ok(())
    }

    pub fn ensure_consumed(&self) -> Result<()> {
        match self.0.keys().next() {
            None => Ok(()),
            Some(k) => Err(Error::Config(format!("unknown key {k}"))),
        }
    }
}

impl fmt::Display for KeyValues {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.0 {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

macro_rules! key_value_struct {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl $ty {
            pub fn to_key_values(&self) -> BTreeMap<String, String> {
                let mut m = BTreeMap::new();
                $( m.insert(stringify!($field).to_string(), self.$field.to_string()); )*
                m
            }

            /// Takes this struct's keys out of `kv`, starting from the defaults.
            pub fn from_key_values(kv: &mut KeyValues) -> Result<Self> {
                let mut out = Self::default();
                $( kv.take_into(stringify!($field), &mut out.$field)?; )*
                Ok(out)
            }
        }
    };
}

key_value_struct!(ModelConfig {
    feature_dim,
    d_model,
    heads,
    head_dim,
    state_dim,
    d_conv,
    chunk_size,
    layers,
    classes,
    rank,
    dt_rank,
    ffn_mult,
    use_intensity,
    use_regram,
    use_d_skip,
});

key_value_struct!(SyntheticConfig {
    train_videos,
    test_videos,
    min_len,
    max_len,
    feature_dim,
    classes,
    duration_shape,
    separation,
    noise,
    blur,
    skip_prob,
    seed,
});

key_value_struct!(TrainConfig {
    lr,
    weight_decay,
    warmup_epochs,
    epochs,
    clip_len,
    tbptt_k,
    w_sm,
    w_trans,
    label_smoothing,
    sigma_l,
    sigma_r,
    grad_clip,
    precision,
    seed,
    target_accuracy,
});

/// Everything a run needs, read from one file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub data: SyntheticConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    /// `feature_dim` and `classes` are shared between data and model; `seed`
    /// seeds the data generator, `init_seed` the model and training run.
    pub fn from_key_values(mut kv: KeyValues) -> Result<Self> {
        if let Some(s) = kv.0.remove("init_seed") {
            kv.0.insert("__train_seed".into(), s);
        }
        let data = SyntheticConfig::from_key_values(&mut kv)?;
        let mut model = ModelConfig::from_key_values(&mut kv)?;
        model.feature_dim = data.feature_dim;
        model.classes = data.classes;
        if let Some(s) = kv.0.remove("__train_seed") {
            kv.0.insert("seed".into(), s);
        }
        let train = TrainConfig::from_key_values(&mut kv)?;
        kv.ensure_consumed()?;
        model.validate()?;
        data.validate()?;
        train.validate()?;
        Ok(RunConfig { data, model, train })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_key_values(KeyValues::load(path)?)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_key_values(KeyValues::parse(text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_shared_keys() {
        let cfg = RunConfig::parse(
            "# toy run\nfeature_dim = 12\nclasses=3\nd_model = 8\nlr = 0.003\n\nseed = 4\ninit_seed = 9\nuse_regram = false\n",
        )
        .unwrap();
        assert_eq!(cfg.model.feature_dim, 12);
        assert_eq!(cfg.model.classes, 3);
        assert_eq!(cfg.data.seed, 4);
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.train.lr, 0.003);
        assert!(!cfg.model.use_regram);
    }

    #[test]
    fn rejects_unknown_duplicate_and_malformed() {
        assert!(matches!(RunConfig::parse("colour = red"), Err(Error::Config(_))));
        assert!(KeyValues::parse("a = 1\na = 2").is_err());
        assert!(KeyValues::parse("just words").is_err());
        assert!(RunConfig::parse("heads = many").is_err());
    }

    #[test]
    fn model_config_round_trips() {
        let cfg = ModelConfig::tiny();
        let mut kv = KeyValues(cfg.to_key_values());
        assert_eq!(ModelConfig::from_key_values(&mut kv).unwrap(), cfg);
        kv.ensure_consumed().unwrap();
    }
}
