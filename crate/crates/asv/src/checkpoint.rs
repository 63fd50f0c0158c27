//! Checkpoint archive, bit-exact across a save/load round trip.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   b"ASV1"
//! version u32 (currently 1)
//! config  u32 byte length, then UTF-8 key=value lines (model config,
//!         training step, embedded vocabulary)
//! tensors repeated until 4 bytes remain:
//!           u32 name length, name bytes,
//!           u32 rank, u32 dims...,
//!           f32 row-major payload
//! crc     u32 CRC32 (IEEE) of the whole tensor region
//! ```
//!
//! Writes go to a temp file in the target directory and rename into place.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::adam::AdamState;
use crate::config::{model_config_from_kv, model_config_to_kv};
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"ASV1";
const VERSION: u32 = 1;

/// Everything a resumed run needs.
pub struct Checkpoint {
    pub model: Model<f32>,
    pub vocab: Vocabulary,
    pub step: u64,
    /// Adam moments in `visit_params` order, when the checkpoint was
    /// written mid-training.
    pub adam: Option<Vec<AdamState<f32>>>,
}

pub fn save(
    path: &Path,
    model: &Model<f32>,
    vocab: &Vocabulary,
    step: u64,
    adam: Option<&[AdamState<f32>]>,
) -> Result<()> {
    if vocab.len() != model.config.vocab_size {
        return Err(Error::Shape(format!(
            "vocabulary has {} entries, model expects {}",
            vocab.len(),
            model.config.vocab_size
        )));
    }
    let mut config_text = model_config_to_kv(&model.config);
    config_text.push_str(&format!("step={step}\n"));
    config_text.push_str(&format!("vocab={}\n", vocab.tokens().join(" ")));

    let mut tensors: Vec<u8> = Vec::new();
    let mut write_tensor = |name: &str, t: &Tensor<f32>| {
        tensors.extend_from_slice(&(name.len() as u32).to_le_bytes());
        tensors.extend_from_slice(name.as_bytes());
        tensors.extend_from_slice(&(t.dims().len() as u32).to_le_bytes());
        for &d in t.dims() {
            tensors.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            tensors.extend_from_slice(&v.to_le_bytes());
        }
    };
    model.visit_params(|name, t| write_tensor(&name, t));
    if let Some(states) = adam {
        let names = model.param_names();
        if states.len() != names.len() {
            return Err(Error::Shape(format!(
                "{} adam states for {} parameters",
                states.len(),
                names.len()
            )));
        }
        for (name, st) in names.iter().zip(states) {
            write_tensor(&format!("adam.m.{name}"), &st.m);
            write_tensor(&format!("adam.v.{name}"), &st.v);
        }
    }
    let crc = crc32fast::hash(&tensors);

    let mut bytes = Vec::with_capacity(12 + config_text.len() + tensors.len() + 4);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(config_text.len() as u32).to_le_bytes());
    bytes.extend_from_slice(config_text.as_bytes());
    bytes.extend_from_slice(&tensors);
    bytes.extend_from_slice(&crc.to_le_bytes());

    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "checkpoint".into())
    ));
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| Error::io(path.display().to_string(), e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Corruption(format!(
                "truncated checkpoint while reading {what}"
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "{}: not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(Error::Version(format!(
            "{}: unsupported checkpoint version {version} (expected {VERSION})",
            path.display()
        )));
    }
    let cfg_len = cur.u32("config length")? as usize;
    let cfg_bytes = cur.take(cfg_len, "config text")?;
    let config_text = std::str::from_utf8(cfg_bytes)
        .map_err(|_| Error::Format("config text is not UTF-8".into()))?;

    if cur.remaining() < 4 {
        return Err(Error::Corruption("missing checksum".into()));
    }
    let tensor_region = &bytes[cur.pos..bytes.len() - 4];
    let stored_crc = {
        let b = &bytes[bytes.len() - 4..];
        u32::from_le_bytes([b[0], b[1], b[2], b[3]])
    };
    if crc32fast::hash(tensor_region) != stored_crc {
        return Err(Error::Corruption(format!(
            "{}: checksum mismatch",
            path.display()
        )));
    }

    let mut tensors: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    let mut tcur = Cursor {
        bytes: tensor_region,
        pos: 0,
    };
    while tcur.remaining() > 0 {
        let name_len = tcur.u32("tensor name length")? as usize;
        let name = std::str::from_utf8(tcur.take(name_len, "tensor name")?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = tcur.u32("tensor rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(tcur.u32("tensor dim")? as usize);
        }
        let len: usize = dims.iter().product();
        let payload = tcur.take(len * 4, "tensor payload")?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.insert(name, Tensor::from_vec(&dims, data)?);
    }

    let (config, extra) = model_config_from_kv(config_text)?;
    let step: u64 = extra
        .get("step")
        .ok_or_else(|| Error::Format("config missing key \"step\"".into()))?
        .parse()
        .map_err(|_| Error::Format("bad step value".into()))?;
    let vocab_line = extra
        .get("vocab")
        .ok_or_else(|| Error::Format("config missing key \"vocab\"".into()))?;
    let tokens: Vec<String> = vocab_line.split(' ').map(str::to_string).collect();
    if tokens.len() != config.vocab_size || tokens.len() < 3 {
        return Err(Error::Format(format!(
            "embedded vocabulary has {} tokens, config says {}",
            tokens.len(),
            config.vocab_size
        )));
    }
    let vocab = Vocabulary::from_tokens(tokens.into_iter().skip(3))?;

    // start from a zero-seeded skeleton and fill every tensor by name
    let mut model = Model::<f32>::init(config, 0)?;
    let mut missing = Vec::new();
    model.visit_params_mut(|name, t| match tensors.remove(name) {
        Some(loaded) if loaded.dims() == t.dims() => *t = loaded,
        Some(loaded) => missing.push(format!(
            "{name}: dims {:?} do not match {:?}",
            loaded.dims(),
            t.dims()
        )),
        None => missing.push(format!("{name}: absent")),
    });
    if !missing.is_empty() {
        return Err(Error::Format(format!(
            "checkpoint tensors do not match the config: {}",
            missing.join("; ")
        )));
    }

    // remaining tensors must be adam moments, in full or not at all
    let adam = if tensors.keys().any(|k| k.starts_with("adam.")) {
        let mut states = Vec::new();
        for name in model.param_names() {
            let m = tensors
                .remove(&format!("adam.m.{name}"))
                .ok_or_else(|| Error::Format(format!("missing adam.m.{name}")))?;
            let v = tensors
                .remove(&format!("adam.v.{name}"))
                .ok_or_else(|| Error::Format(format!("missing adam.v.{name}")))?;
            states.push(AdamState {
                step_count: step,
                m,
                v,
            });
        }
        Some(states)
    } else {
        None
    };
    if let Some(stray) = tensors.keys().next() {
        return Err(Error::Format(format!("unexpected tensor {stray:?}")));
    }
    Ok(Checkpoint {
        model,
        vocab,
        step,
        adam,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TrainConfig;

    fn toy() -> (Model<f32>, Vocabulary) {
        let vocab = Vocabulary::from_tokens(
            ["we", "ran", "home", "fast"].map(str::to_string),
        )
        .unwrap();
        let cfg = TrainConfig::parse("d_e=3\nd_h_dir=2\nn=2\nchannels=4,5\nmax_src_len=5\n")
            .unwrap()
            .model_config(vocab.len());
        (Model::init(cfg, 9).unwrap(), vocab)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (model, vocab) = toy();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.ckpt");
        save(&path, &model, &vocab, 17, None).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.step, 17);
        assert!(loaded.adam.is_none());
        assert_eq!(loaded.vocab.tokens(), vocab.tokens());
        let mut want: Vec<(String, Vec<f32>)> = Vec::new();
        model.visit_params(|n, t| want.push((n, t.data().to_vec())));
        let mut got: Vec<(String, Vec<f32>)> = Vec::new();
        loaded.model.visit_params(|n, t| got.push((n, t.data().to_vec())));
        assert_eq!(want, got);
        // encoding after the round trip is bitwise identical
        let sents = vec![vec![3, 4, 5]];
        assert_eq!(
            model.encode(&sents).unwrap(),
            loaded.model.encode(&sents).unwrap()
        );
    }

    #[test]
    fn adam_states_round_trip() {
        let (model, vocab) = toy();
        let mut states = Vec::new();
        model.visit_params(|_, t| {
            let mut st = AdamState::new(t.dims());
            st.step_count = 3;
            st.m.data_mut().iter_mut().for_each(|v| *v = 0.25);
            states.push(st);
        });
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.ckpt");
        save(&path, &model, &vocab, 3, Some(&states)).unwrap();
        let loaded = load(&path).unwrap();
        let loaded_states = loaded.adam.unwrap();
        assert_eq!(loaded_states.len(), states.len());
        for (a, b) in loaded_states.iter().zip(&states) {
            assert_eq!(a.m.data(), b.m.data());
            assert_eq!(a.v.data(), b.v.data());
            assert_eq!(a.step_count, 3);
        }
    }

    #[test]
    fn tampered_payload_byte_fails_checksum() {
        let (model, vocab) = toy();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.ckpt");
        save(&path, &model, &vocab, 0, None).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() - 100; // inside the tensor region
        bytes[mid] ^= 0x40;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load(&path), Err(Error::Corruption(_))));
    }

    #[test]
    fn wrong_version_is_a_version_error() {
        let (model, vocab) = toy();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.ckpt");
        save(&path, &model, &vocab, 0, None).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 99;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load(&path), Err(Error::Version(_))));

        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load(&path), Err(Error::Format(_))));
    }

    #[test]
    fn truncation_is_detected() {
        let (model, vocab) = toy();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.ckpt");
        save(&path, &model, &vocab, 0, None).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load(&path).is_err());
    }
}
