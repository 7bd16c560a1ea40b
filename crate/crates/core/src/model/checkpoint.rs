//! Binary checkpoints: magic, version, a JSON header with the architecture
//! and lexicon, then every tensor by name with its shape.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ParamLayout, TinyVlm};
use crate::embed_store::Cursor;
use crate::error::{Error, Result};
use crate::lexicon::Lexicon;

pub const CKP_MAGIC: &[u8; 8] = b"SECATCKP";
pub const CKP_VERSION: u8 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    tokens: Vec<String>,
    dynamic_start: usize,
    dynamic_len: usize,
}

fn fmt_err(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        detail: detail.into(),
    }
}

impl TinyVlm {
    pub fn to_checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let lex = self.lexicon();
        let header = Header {
            config: self.config().clone(),
            tokens: lex.tokens().to_vec(),
            dynamic_start: lex.dynamic_range().start,
            dynamic_len: lex.dynamic_range().len(),
        };
        let json = serde_json::to_vec(&header)?;
        let layout = self.layout();
        let mut out = Vec::with_capacity(16 + json.len() + 4 * layout.total() + 64 * layout.tensors().len());
        out.extend_from_slice(CKP_MAGIC);
        out.push(CKP_VERSION);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(layout.tensors().len() as u32).to_le_bytes());
        for t in layout.tensors() {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &self.params()[t.range()] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 9 {
            return Err(Error::Length("checkpoint shorter than header".into()));
        }
        if &bytes[..8] != CKP_MAGIC {
            return Err(fmt_err(format!("bad magic {:?}", &bytes[..8])));
        }
        if bytes[8] != CKP_VERSION {
            return Err(fmt_err(format!("unsupported version {}", bytes[8])));
        }
        let mut cur = Cursor::new(&bytes[9..]);
        let json_len = cur.u32()? as usize;
        let header: Header = serde_json::from_slice(cur.take(json_len)?)?;
        let lexicon = Lexicon::from_tokens(header.tokens, header.dynamic_start, header.dynamic_len)?;
        header.config.validate()?;
        let layout = ParamLayout::new(&header.config, lexicon.len());
        let n = cur.u32()? as usize;
        if n != layout.tensors().len() {
            return Err(fmt_err(format!(
                "{n} tensors, architecture has {}",
                layout.tensors().len()
            )));
        }
        let mut params = vec![0.0f32; layout.total()];
        for spec in layout.tensors() {
            let name_len = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(name_len)?).map_err(|e| fmt_err(e.to_string()))?;
            if name != spec.name {
                return Err(fmt_err(format!("expected tensor {}, found {name}", spec.name)));
            }
            let rank = cur.u32()? as usize;
            let shape = (0..rank)
                .map(|_| cur.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            if shape != spec.shape {
                return Err(fmt_err(format!(
                    "tensor {name} has shape {shape:?}, expected {:?}",
                    spec.shape
                )));
            }
            for v in &mut params[spec.range()] {
                *v = f32::from_le_bytes(cur.take4()?);
            }
        }
        if cur.remaining() != 0 {
            return Err(fmt_err(format!("{} trailing bytes", cur.remaining())));
        }
        Self::from_parts(header.config, lexicon, params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_checkpoint_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Missing {
                what: "checkpoint",
                path: path.to_path_buf(),
            });
        }
        Self::from_checkpoint_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lexicon::BASE_NAMES;

    fn model() -> TinyVlm {
        let names: Vec<String> = BASE_NAMES[..4].iter().map(|s| s.to_string()).collect();
        let lex = Lexicon::new(&names, 3).unwrap();
        let cfg = ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            prefix_len: 2,
            embed_dim: 4,
            map_hidden: 6,
            max_len: 20,
            init_std: 0.1,
            map_gain: 1.0,
        };
        TinyVlm::new(cfg, lex, 3).unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let m = model();
        let bytes = m.to_checkpoint_bytes().unwrap();
        assert_eq!(&bytes[..8], b"SECATCKP");
        assert_eq!(bytes[8], 1);
        let back = TinyVlm::from_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(back.lexicon(), m.lexicon());
        assert_eq!(back.config(), m.config());
        assert_eq!(back.to_checkpoint_bytes().unwrap(), bytes);
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let bytes = model().to_checkpoint_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            TinyVlm::from_checkpoint_bytes(&bad),
            Err(Error::Format { .. })
        ));
        assert!(matches!(
            TinyVlm::from_checkpoint_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Length(_))
        ));
        let mut extra = bytes;
        extra.push(0);
        assert!(TinyVlm::from_checkpoint_bytes(&extra).is_err());
    }

    #[test]
    fn missing_file() {
        let err = TinyVlm::load(Path::new("/nonexistent/ckpt.bin")).unwrap_err();
        assert!(matches!(err, Error::Missing { .. }));
    }
}
