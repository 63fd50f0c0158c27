//! Model and training configuration, plus the `key=value` text format used
//! by the train CLI and embedded in checkpoints. Unknown keys are errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::decoder::{DecoderConfig, DecoderKind, Sampling};
use crate::encoder::Pooling;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    BiGru,
    Cnn,
}

/// Architecture hyperparameters; everything needed to rebuild a model
/// skeleton from a checkpoint.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    /// Vocabulary size including the three specials.
    pub vocab_size: usize,
    pub d_e: usize,
    pub d_h_dir: usize,
    pub pooling: Pooling,
    pub encoder: EncoderKind,
    /// Channel widths of the convolutional ablation encoder.
    pub cnn_channels: Vec<usize>,
    pub decoder: DecoderConfig,
    pub max_src_len: usize,
}

impl ModelConfig {
    /// Dimension of the sentence representation fed to the decoder.
    pub fn rep_dim(&self) -> usize {
        match self.encoder {
            EncoderKind::BiGru => match self.pooling {
                Pooling::MeanMax => 4 * self.d_h_dir,
                Pooling::MaxOnly => 2 * self.d_h_dir,
            },
            EncoderKind::Cnn => self.cnn_channels.iter().sum(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 4 {
            return Err(Error::Config(
                "vocabulary must hold the specials plus at least one token".into(),
            ));
        }
        for (name, v) in [
            ("d_e", self.d_e),
            ("d_h_dir", self.d_h_dir),
            ("max_src_len", self.max_src_len),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.encoder == EncoderKind::Cnn
            && (self.cnn_channels.len() != 4 || self.cnn_channels.iter().any(|&c| c == 0))
        {
            return Err(Error::Config(
                "cnn encoder takes exactly four positive channel widths".into(),
            ));
        }
        self.decoder.validate()
    }
}

/// Full training configuration: architecture plus optimization knobs.
/// `vocab_size` is not part of the config file; it comes from the
/// vocabulary supplied at train time.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub n: usize,
    pub max_src_len: usize,
    pub epochs: usize,
    /// Hard step budget; when set it wins over `epochs`, and 0 is a valid
    /// budget (initialize, save, stop).
    pub steps: Option<usize>,
    pub seed: u64,
    pub pooling: Pooling,
    pub d_e: usize,
    pub d_h_dir: usize,
    pub encoder: EncoderKind,
    pub cnn_channels: Vec<usize>,
    pub decoder_kind: DecoderKind,
    pub sampling: Option<Sampling>,
    pub channels: Option<Vec<usize>>,
    pub ckpt_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.0005,
            batch_size: 512,
            n: 30,
            max_src_len: 30,
            epochs: 1,
            steps: None,
            seed: 0,
            pooling: Pooling::MeanMax,
            d_e: 300,
            d_h_dir: 300,
            encoder: EncoderKind::BiGru,
            cnn_channels: vec![300, 300, 300, 300],
            decoder_kind: DecoderKind::PawCnn,
            sampling: None,
            channels: None,
            ckpt_every: 1000,
        }
    }
}

impl TrainConfig {
    /// Widths used when the config file does not pin `channels`.
    fn default_channels(kind: DecoderKind) -> Vec<usize> {
        match kind {
            DecoderKind::PawCnn | DecoderKind::ArCnn => vec![600, 1200],
            DecoderKind::PawRnn => vec![600, 300],
            DecoderKind::ArRnn => vec![600],
        }
    }

    pub fn decoder_config(&self) -> DecoderConfig {
        DecoderConfig {
            kind: self.decoder_kind,
            sampling: self.sampling,
            n: self.n,
            channels: self
                .channels
                .clone()
                .unwrap_or_else(|| Self::default_channels(self.decoder_kind)),
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_e: self.d_e,
            d_h_dir: self.d_h_dir,
            pooling: self.pooling,
            encoder: self.encoder,
            cnn_channels: self.cnn_channels.clone(),
            decoder: self.decoder_config(),
            max_src_len: self.max_src_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::Config("lr must be positive and finite".into()));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("n", self.n),
            ("max_src_len", self.max_src_len),
            ("ckpt_every", self.ckpt_every),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.epochs == 0 && self.steps.is_none() {
            return Err(Error::Config("set epochs or steps".into()));
        }
        // the remaining cross-field checks ride on a throwaway model config
        self.model_config(4).validate()
    }

    /// Parses `key=value` lines. Every field has a key; omitted keys keep
    /// their defaults; unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Parse(format!(
                    "line {}: expected key=value, got {raw:?}",
                    lineno + 1
                )));
            };
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| {
                Error::Parse(format!("line {}: bad {what} value {value:?}", lineno + 1))
            };
            match key {
                "lr" => cfg.lr = value.parse().map_err(|_| bad("lr"))?,
                "batch_size" => cfg.batch_size = value.parse().map_err(|_| bad("batch_size"))?,
                "n" => cfg.n = value.parse().map_err(|_| bad("n"))?,
                "max_src_len" => {
                    cfg.max_src_len = value.parse().map_err(|_| bad("max_src_len"))?
                }
                "epochs" => cfg.epochs = value.parse().map_err(|_| bad("epochs"))?,
                "steps" => cfg.steps = Some(value.parse().map_err(|_| bad("steps"))?),
                "seed" => cfg.seed = value.parse().map_err(|_| bad("seed"))?,
                "pooling" => cfg.pooling = parse_pooling(value).ok_or_else(|| bad("pooling"))?,
                "d_e" => cfg.d_e = value.parse().map_err(|_| bad("d_e"))?,
                "d_h_dir" => cfg.d_h_dir = value.parse().map_err(|_| bad("d_h_dir"))?,
                "encoder" => cfg.encoder = parse_encoder(value).ok_or_else(|| bad("encoder"))?,
                "cnn_channels" => {
                    cfg.cnn_channels = parse_list(value).ok_or_else(|| bad("cnn_channels"))?
                }
                "decoder" => {
                    cfg.decoder_kind = parse_decoder(value).ok_or_else(|| bad("decoder"))?
                }
                "sampling" => cfg.sampling = parse_sampling(value).ok_or_else(|| bad("sampling"))?,
                "channels" => {
                    cfg.channels = Some(parse_list(value).ok_or_else(|| bad("channels"))?)
                }
                "ckpt_every" => cfg.ckpt_every = value.parse().map_err(|_| bad("ckpt_every"))?,
                other => {
                    return Err(Error::Parse(format!(
                        "line {}: unknown config key {other:?}",
                        lineno + 1
                    )));
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn pooling_name(p: Pooling) -> &'static str {
    match p {
        Pooling::MeanMax => "mean_max",
        Pooling::MaxOnly => "max_only",
    }
}

fn parse_pooling(s: &str) -> Option<Pooling> {
    match s {
        "mean_max" => Some(Pooling::MeanMax),
        "max_only" => Some(Pooling::MaxOnly),
        _ => None,
    }
}

pub fn encoder_name(e: EncoderKind) -> &'static str {
    match e {
        EncoderKind::BiGru => "bigru",
        EncoderKind::Cnn => "cnn",
    }
}

fn parse_encoder(s: &str) -> Option<EncoderKind> {
    match s {
        "bigru" => Some(EncoderKind::BiGru),
        "cnn" => Some(EncoderKind::Cnn),
        _ => None,
    }
}

pub fn decoder_name(k: DecoderKind) -> &'static str {
    match k {
        DecoderKind::PawCnn => "paw_cnn",
        DecoderKind::PawRnn => "paw_rnn",
        DecoderKind::ArRnn => "ar_rnn",
        DecoderKind::ArCnn => "ar_cnn",
    }
}

fn parse_decoder(s: &str) -> Option<DecoderKind> {
    match s {
        "paw_cnn" => Some(DecoderKind::PawCnn),
        "paw_rnn" => Some(DecoderKind::PawRnn),
        "ar_rnn" => Some(DecoderKind::ArRnn),
        "ar_cnn" => Some(DecoderKind::ArCnn),
        _ => None,
    }
}

pub fn sampling_name(s: Option<Sampling>) -> &'static str {
    match s {
        None => "none",
        Some(Sampling::TeacherForcing) => "teacher_forcing",
        Some(Sampling::AlwaysSampling) => "always_sampling",
        Some(Sampling::UniformSampling) => "uniform_sampling",
    }
}

fn parse_sampling(s: &str) -> Option<Option<Sampling>> {
    match s {
        "none" => Some(None),
        "teacher_forcing" => Some(Some(Sampling::TeacherForcing)),
        "always_sampling" => Some(Some(Sampling::AlwaysSampling)),
        "uniform_sampling" => Some(Some(Sampling::UniformSampling)),
        _ => None,
    }
}

fn parse_list(s: &str) -> Option<Vec<usize>> {
    s.split(',')
        .map(|part| part.trim().parse::<usize>().ok())
        .collect()
}

fn list_string(v: &[usize]) -> String {
    v.iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

/// Serializes a model config to the `key=value` block stored in
/// checkpoints.
pub fn model_config_to_kv(cfg: &ModelConfig) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "vocab_size={}", cfg.vocab_size);
    let _ = writeln!(out, "d_e={}", cfg.d_e);
    let _ = writeln!(out, "d_h_dir={}", cfg.d_h_dir);
    let _ = writeln!(out, "pooling={}", pooling_name(cfg.pooling));
    let _ = writeln!(out, "encoder={}", encoder_name(cfg.encoder));
    let _ = writeln!(out, "cnn_channels={}", list_string(&cfg.cnn_channels));
    let _ = writeln!(out, "decoder={}", decoder_name(cfg.decoder.kind));
    let _ = writeln!(out, "sampling={}", sampling_name(cfg.decoder.sampling));
    let _ = writeln!(out, "n={}", cfg.decoder.n);
    let _ = writeln!(out, "channels={}", list_string(&cfg.decoder.channels));
    let _ = writeln!(out, "max_src_len={}", cfg.max_src_len);
    out
}

/// Parses the checkpoint `key=value` block back into a model config plus
/// any extra keys (training state, embedded vocabulary).
pub fn model_config_from_kv(text: &str) -> Result<(ModelConfig, BTreeMap<String, String>)> {
    let mut map: BTreeMap<String, String> = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim_end();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Format(format!(
                "config line {}: expected key=value",
                lineno + 1
            )));
        };
        map.insert(key.to_string(), value.to_string());
    }
    let mut take = |key: &str| -> Result<String> {
        map.remove(key)
            .ok_or_else(|| Error::Format(format!("config missing key {key:?}")))
    };
    let parse_usize = |key: &str, v: String| -> Result<usize> {
        v.parse()
            .map_err(|_| Error::Format(format!("config key {key:?}: bad value {v:?}")))
    };
    let vocab_size = parse_usize("vocab_size", take("vocab_size")?)?;
    let d_e = parse_usize("d_e", take("d_e")?)?;
    let d_h_dir = parse_usize("d_h_dir", take("d_h_dir")?)?;
    let pooling = {
        let v = take("pooling")?;
        parse_pooling(&v).ok_or_else(|| Error::Format(format!("bad pooling {v:?}")))?
    };
    let encoder = {
        let v = take("encoder")?;
        parse_encoder(&v).ok_or_else(|| Error::Format(format!("bad encoder {v:?}")))?
    };
    let cnn_channels = {
        let v = take("cnn_channels")?;
        parse_list(&v).ok_or_else(|| Error::Format(format!("bad cnn_channels {v:?}")))?
    };
    let kind = {
        let v = take("decoder")?;
        parse_decoder(&v).ok_or_else(|| Error::Format(format!("bad decoder {v:?}")))?
    };
    let sampling = {
        let v = take("sampling")?;
        parse_sampling(&v).ok_or_else(|| Error::Format(format!("bad sampling {v:?}")))?
    };
    let n = parse_usize("n", take("n")?)?;
    let channels = {
        let v = take("channels")?;
        parse_list(&v).ok_or_else(|| Error::Format(format!("bad channels {v:?}")))?
    };
    let max_src_len = parse_usize("max_src_len", take("max_src_len")?)?;
    let cfg = ModelConfig {
        vocab_size,
        d_e,
        d_h_dir,
        pooling,
        encoder,
        cnn_channels,
        decoder: DecoderConfig {
            kind,
            sampling,
            n,
            channels,
        },
        max_src_len,
    };
    cfg.validate()?;
    Ok((cfg, map))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_reference_setup() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr, 0.0005);
        assert_eq!(cfg.batch_size, 512);
        assert_eq!(cfg.n, 30);
        assert_eq!(cfg.max_src_len, 30);
        assert_eq!(cfg.d_h_dir, 300);
        let mc = cfg.model_config(20003);
        assert_eq!(mc.rep_dim(), 1200);
        assert!(mc.validate().is_ok());
    }

    #[test]
    fn parse_overrides_and_rejects_unknown_keys() {
        let cfg = TrainConfig::parse(
            "lr=0.001\nbatch_size=8\nn=5\ndecoder=ar_rnn\nsampling=teacher_forcing\nchannels=32\nseed=7\n",
        )
        .unwrap();
        assert_eq!(cfg.lr, 0.001);
        assert_eq!(cfg.batch_size, 8);
        assert_eq!(cfg.decoder_kind, DecoderKind::ArRnn);
        assert_eq!(cfg.sampling, Some(Sampling::TeacherForcing));
        assert_eq!(cfg.channels, Some(vec![32]));

        let err = TrainConfig::parse("learning_rate=0.1\n").unwrap_err();
        assert!(err.to_string().contains("unknown config key"));
        assert!(TrainConfig::parse("lr=banana\n").is_err());
        // AR decoder without sampling fails validation
        assert!(TrainConfig::parse("decoder=ar_cnn\n").is_err());
    }

    #[test]
    fn model_config_kv_round_trip() {
        let cfg = TrainConfig::parse("decoder=paw_rnn\nchannels=12,5\nn=4\nd_e=6\nd_h_dir=3\n")
            .unwrap()
            .model_config(50);
        let text = model_config_to_kv(&cfg);
        let (back, extra) = model_config_from_kv(&text).unwrap();
        assert!(extra.is_empty());
        assert_eq!(back.vocab_size, 50);
        assert_eq!(back.d_e, 6);
        assert_eq!(back.decoder.kind, DecoderKind::PawRnn);
        assert_eq!(back.decoder.channels, vec![12, 5]);
        assert_eq!(back.rep_dim(), cfg.rep_dim());

        // extra keys ride along
        let (_, extra) = model_config_from_kv(&format!("{text}step=42\nvocab=a b c\n")).unwrap();
        assert_eq!(extra.get("step").map(String::as_str), Some("42"));
    }
}
