//! Binary checkpoint format.
//!
//! ```text
//! "SPFF" | u32 version | u32 config_len | config (UTF-8 `key = value` lines)
//! | u32 count | count x (u16 name_len | name | u8 ndim | ndim x u32 | f32 data)
//! ```
//! All integers and floats little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{CheckpointError, Error, Result};
use crate::model::{Model, ModelConfig};
use crate::optim::{AdamConfig, AdamState};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"SPFF";
pub const VERSION: u32 = 1;

const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub config: BTreeMap<String, String>,
    pub tensors: IndexMap<String, Tensor<f32>>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or(CheckpointError::Truncated(what))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }
}

fn parse_config(text: &str) -> Result<BTreeMap<String, String>, CheckpointError> {
    let mut map = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CheckpointError::Config(format!("line {line:?} has no '='")))?;
        if map.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
            return Err(CheckpointError::Config(format!("key {} repeated", k.trim())));
        }
    }
    Ok(map)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let mut cfg = String::new();
        for (k, v) in &self.config {
            if k.contains(['=', '\n']) || v.contains('\n') || k.trim() != k || v.trim() != v {
                return Err(CheckpointError::Config(format!("unencodable entry {k:?}")).into());
            }
            cfg.push_str(&format!("{k} = {v}\n"));
        }
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let nb = name.as_bytes();
            let name_len = u16::try_from(nb.len())
                .map_err(|_| Error::InvalidArgument(format!("tensor name too long: {name}")))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(nb);
            out.push(t.ndim() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { buf, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: VERSION,
            });
        }
        let cfg_len = r.u32("config length")? as usize;
        let text = std::str::from_utf8(r.take(cfg_len, "config block")?)
            .map_err(|_| CheckpointError::Config("not UTF-8".into()))?;
        let config = parse_config(text)?;
        let count = r.u32("tensor count")?;
        let mut tensors = IndexMap::new();
        for _ in 0..count {
            let len = r.u16("tensor name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "tensor name")?)
                .map_err(|_| CheckpointError::Config("tensor name not UTF-8".into()))?
                .to_string();
            let ndim = r.u8("tensor rank")? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32("tensor dims")? as usize);
            }
            let numel: usize = shape.iter().product();
            let bytes = r.take(numel.checked_mul(4).ok_or(CheckpointError::Truncated("tensor data"))?, "tensor data")?;
            let data = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data)
                .map_err(|e| CheckpointError::Config(format!("tensor {name}: {e}")))?;
            if tensors.contains_key(&name) {
                return Err(CheckpointError::DuplicateName(name));
            }
            tensors.insert(name, t);
        }
        if r.pos != buf.len() {
            return Err(CheckpointError::TrailingBytes);
        }
        Ok(Self { config, tensors })
    }

    /// Writes via a temporary sibling then renames, so readers never see a
    /// partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("partial");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_bytes(&fs::read(path)?)?)
    }

    /// Model parameters plus optional optimizer moments and extra settings.
    pub fn from_model(
        model: &Model<f32>,
        adam: Option<&AdamState<f32>>,
        extra: &[(&str, String)],
    ) -> Self {
        let mut config: BTreeMap<String, String> = model
            .config
            .to_pairs()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        for (k, v) in extra {
            config.insert(k.to_string(), v.clone());
        }
        let mut tensors = IndexMap::new();
        for (name, t) in model.params.iter() {
            tensors.insert(name.to_string(), Tensor::new(t.shape(), t.data().to_vec()).unwrap());
        }
        if let Some(a) = adam {
            config.insert("adam_t".into(), a.t.to_string());
            config.insert("adam_beta1".into(), format!("{:?}", a.config.beta1));
            config.insert("adam_beta2".into(), format!("{:?}", a.config.beta2));
            config.insert("adam_eps".into(), format!("{:?}", a.config.eps));
            for ((name, _), (m, v)) in model.params.iter().zip(a.m.iter().zip(&a.v)) {
                tensors.insert(format!("{ADAM_M}{name}"), m.clone());
                tensors.insert(format!("{ADAM_V}{name}"), v.clone());
            }
        }
        Self { config, tensors }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        ModelConfig::from_map(&self.config).map_err(|e| CheckpointError::Incompatible(e.to_string()).into())
    }

    /// Rebuilds the model; every expected parameter must be present with the
    /// expected shape.
    pub fn model(&self) -> Result<Model<f32>> {
        let mut model = Model::<f32>::init(self.model_config()?, 0)?;
        let names: Vec<String> = model.params.names().map(String::from).collect();
        for name in &names {
            let t = self
                .tensors
                .get(name)
                .ok_or_else(|| CheckpointError::Incompatible(format!("missing tensor {name}")))?;
            let slot = model.params.get_mut(name)?;
            if slot.shape() != t.shape() {
                return Err(CheckpointError::Incompatible(format!(
                    "{name} has shape {:?}, model expects {:?}",
                    t.shape(),
                    slot.shape()
                ))
                .into());
            }
            *slot = t.clone();
        }
        let extra = self
            .tensors
            .keys()
            .find(|k| !k.starts_with(ADAM_M) && !k.starts_with(ADAM_V) && !model.params.contains(k));
        if let Some(k) = extra {
            return Err(CheckpointError::Incompatible(format!("unexpected tensor {k}")).into());
        }
        Ok(model)
    }

    /// Same as [`Checkpoint::model`] but also insists on scale `r`.
    pub fn model_for_scale(&self, r: usize) -> Result<Model<f32>> {
        let cfg = self.model_config()?;
        if cfg.scale != r {
            return Err(Error::ScaleMismatch {
                checkpoint: cfg.scale,
                requested: r,
            });
        }
        self.model()
    }

    /// Optimizer state aligned with `model`'s parameter order, if stored.
    pub fn adam(&self, model: &Model<f32>) -> Result<Option<AdamState<f32>>> {
        let Some(t) = self.config.get("adam_t") else {
            return Ok(None);
        };
        let num = |k: &str| -> Result<f64> {
            self.config
                .get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| CheckpointError::Config(format!("bad or missing {k}")).into())
        };
        let t = t
            .parse()
            .map_err(|_| CheckpointError::Config(format!("bad adam_t {t:?}")))?;
        let config = AdamConfig {
            beta1: num("adam_beta1")?,
            beta2: num("adam_beta2")?,
            eps: num("adam_eps")?,
        };
        let mut state = AdamState::new(model.params.tensors(), config);
        state.t = t;
        for (i, (name, p)) in model.params.iter().enumerate() {
            for (prefix, dst) in [(ADAM_M, &mut state.m[i]), (ADAM_V, &mut state.v[i])] {
                let key = format!("{prefix}{name}");
                let src = self
                    .tensors
                    .get(&key)
                    .ok_or_else(|| CheckpointError::Incompatible(format!("missing tensor {key}")))?;
                if src.shape() != p.shape() {
                    return Err(CheckpointError::Incompatible(format!("{key} shape mismatch")).into());
                }
                *dst = src.clone();
            }
        }
        Ok(Some(state))
    }

    pub fn get_u64(&self, key: &str) -> Result<u64> {
        self.config
            .get(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| CheckpointError::Config(format!("bad or missing {key}")).into())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Model<f32> {
        Model::init(ModelConfig::toy(2), 3).unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let m = toy();
        let mut adam = AdamState::new(m.params.tensors(), AdamConfig::default());
        adam.t = 17;
        adam.m[0].data_mut()[0] = 0.25;
        let ck = Checkpoint::from_model(&m, Some(&adam), &[("step", "17".into())]);
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        ck.save(&a).unwrap();
        let back = Checkpoint::load(&a).unwrap();
        assert_eq!(back, ck);
        back.save(&b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

        let m2 = back.model().unwrap();
        assert_eq!(m2, m);
        let adam2 = back.adam(&m2).unwrap().unwrap();
        assert_eq!(adam2, adam);
        assert_eq!(back.get_u64("step").unwrap(), 17);
    }

    #[test]
    fn header_layout() {
        let ck = Checkpoint {
            config: [("a".to_string(), "1".to_string())].into_iter().collect(),
            tensors: [("w".to_string(), Tensor::new(vec![2], vec![1.0f32, -2.0]).unwrap())]
                .into_iter()
                .collect(),
        };
        let b = ck.to_bytes().unwrap();
        let mut expect = b"SPFF".to_vec();
        expect.extend(1u32.to_le_bytes());
        expect.extend(6u32.to_le_bytes());
        expect.extend(b"a = 1\n");
        expect.extend(1u32.to_le_bytes());
        expect.extend(1u16.to_le_bytes());
        expect.extend(b"w");
        expect.push(1);
        expect.extend(2u32.to_le_bytes());
        expect.extend(1.0f32.to_le_bytes());
        expect.extend((-2.0f32).to_le_bytes());
        assert_eq!(b, expect);
    }

    fn bytes() -> Vec<u8> {
        Checkpoint::from_model(&toy(), None, &[]).to_bytes().unwrap()
    }

    #[test]
    fn corrupted_magic() {
        let mut b = bytes();
        b[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&b), Err(CheckpointError::BadMagic(_))));
    }

    #[test]
    fn wrong_version() {
        let mut b = bytes();
        b[4] = 2;
        assert!(matches!(
            Checkpoint::from_bytes(&b),
            Err(CheckpointError::Version { found: 2, expected: 1 })
        ));
    }

    #[test]
    fn truncation_anywhere() {
        let b = bytes();
        for cut in [2, 6, 10, 40, b.len() / 2, b.len() - 1] {
            assert!(
                matches!(Checkpoint::from_bytes(&b[..cut]), Err(CheckpointError::Truncated(_))),
                "cut at {cut}"
            );
        }
    }

    #[test]
    fn trailing_bytes() {
        let mut b = bytes();
        b.push(0);
        assert!(matches!(Checkpoint::from_bytes(&b), Err(CheckpointError::TrailingBytes)));
    }

    #[test]
    fn duplicate_names() {
        let one = |name: &[u8]| {
            let mut v = 1u16.to_le_bytes().to_vec();
            v.extend(name);
            v.push(1);
            v.extend(1u32.to_le_bytes());
            v.extend(0f32.to_le_bytes());
            v
        };
        let mut b = b"SPFF".to_vec();
        b.extend(1u32.to_le_bytes());
        b.extend(0u32.to_le_bytes());
        b.extend(2u32.to_le_bytes());
        b.extend(one(b"x"));
        b.extend(one(b"x"));
        assert!(matches!(Checkpoint::from_bytes(&b), Err(CheckpointError::DuplicateName(n)) if n == "x"));
    }

    #[test]
    fn scale_mismatch_is_explicit() {
        let ck = Checkpoint::from_model(&toy(), None, &[]);
        assert!(matches!(
            ck.model_for_scale(4),
            Err(Error::ScaleMismatch { checkpoint: 2, requested: 4 })
        ));
        assert!(ck.model_for_scale(2).is_ok());
    }

    #[test]
    fn missing_or_reshaped_tensor_is_incompatible() {
        let mut ck = Checkpoint::from_model(&toy(), None, &[]);
        ck.tensors.shift_remove("shallow.b");
        assert!(matches!(ck.model(), Err(Error::Checkpoint(CheckpointError::Incompatible(_)))));
        let mut ck = Checkpoint::from_model(&toy(), None, &[]);
        ck.config.insert("channels".into(), "8".into());
        assert!(matches!(ck.model(), Err(Error::Checkpoint(CheckpointError::Incompatible(_)))));
    }

    #[test]
    fn failed_load_leaves_no_state() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.ckpt");
        fs::write(&p, b"NOPE").unwrap();
        assert!(matches!(
            Checkpoint::load(&p),
            Err(Error::Checkpoint(CheckpointError::BadMagic(_)))
        ));
    }
}
