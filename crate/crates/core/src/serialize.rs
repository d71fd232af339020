//! Weights files: a text manifest followed by a little-endian `f32` payload.
//!
//! ```text
//! siamtpn-weights
//! version 1
//! config channels 32
//! ...
//! param head.cls.out.w 1,1,32,2 0 64
//! ...
//! payload 123456
//! sha256 9f86d0...
//! end
//! <payload bytes>
//! ```
//!
//! Offsets and lengths count `f32` values. Architecture keys in the config
//! echo must match the model being loaded; postprocessing keys are carried
//! along so [`load_model`] can rebuild the full configuration.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::Settings;
use crate::error::{Result, WeightsError};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: &str = "siamtpn-weights";
pub const FORMAT_VERSION: u32 = 1;

fn hex(bytes: &[u8]) -> String {
    bytes
        .iter()
        .fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}

/// Encodes every parameter of `model`.
pub fn encode_weights(model: &Model) -> Vec<u8> {
    let mut payload = Vec::with_capacity(model.store.num_scalars() * 4);
    let mut head = format!("{MAGIC}\nversion {FORMAT_VERSION}\n");
    for (k, v) in model
        .cfg
        .to_settings()
        .to_text()
        .lines()
        .filter_map(|l| l.split_once(" = "))
    {
        let _ = writeln!(head, "config {k} {v}");
    }
    let mut offset = 0;
    for (_, p) in model.store.iter() {
        let shape: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
        let _ = writeln!(
            head,
            "param {} {} {} {}",
            p.name,
            shape.join(","),
            offset,
            p.value.len()
        );
        offset += p.value.len();
        for &v in p.value.data() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let _ = writeln!(head, "payload {}", payload.len());
    let _ = writeln!(head, "sha256 {}", hex(&Sha256::digest(&payload)));
    head.push_str("end\n");
    let mut out = head.into_bytes();
    out.extend_from_slice(&payload);
    out
}

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

/// Parsed file contents before they are matched against a model.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightsFile {
    pub config: Settings,
    params: Vec<(String, Entry)>,
    payload: Vec<f32>,
}

impl WeightsFile {
    pub fn parse(bytes: &[u8]) -> Result<Self, WeightsError> {
        if !bytes.starts_with(format!("{MAGIC}\n").as_bytes()) {
            return Err(WeightsError::BadMagic);
        }
        let mut pos = 0;
        let mut lines = Vec::new();
        loop {
            let end = bytes[pos..].iter().position(|&b| b == b'\n');
            let Some(end) = end else {
                return Err(WeightsError::Manifest {
                    line: lines.len() + 1,
                    reason: "manifest is not terminated by `end`".into(),
                });
            };
            let line = std::str::from_utf8(&bytes[pos..pos + end]).map_err(|_| {
                WeightsError::Manifest {
                    line: lines.len() + 1,
                    reason: "not valid UTF-8".into(),
                }
            })?;
            pos += end + 1;
            if line == "end" {
                break;
            }
            lines.push(line);
        }
        let bad = |line: usize, reason: &str| WeightsError::Manifest {
            line,
            reason: reason.to_string(),
        };
        let version = lines
            .get(1)
            .and_then(|l| l.strip_prefix("version "))
            .ok_or_else(|| bad(2, "expected `version N`"))?;
        let version: u32 = version
            .trim()
            .parse()
            .map_err(|_| bad(2, "version is not an integer"))?;
        if version != FORMAT_VERSION {
            return Err(WeightsError::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }

        let mut config = Settings::new();
        let mut params = Vec::new();
        let mut payload_len = None;
        let mut checksum = None;
        for (i, line) in lines.iter().enumerate().skip(2) {
            let n = i + 1;
            let (tag, rest) = line
                .split_once(' ')
                .ok_or_else(|| bad(n, "missing value"))?;
            match tag {
                "config" => {
                    let (k, v) = rest
                        .split_once(' ')
                        .ok_or_else(|| bad(n, "expected `config KEY VALUE`"))?;
                    config.set(k, v);
                }
                "param" => {
                    let f: Vec<&str> = rest.split(' ').collect();
                    let [name, shape, offset, len] = f[..] else {
                        return Err(bad(n, "expected `param NAME SHAPE OFFSET LEN`"));
                    };
                    let shape = if shape.is_empty() {
                        Vec::new()
                    } else {
                        shape
                            .split(',')
                            .map(str::parse)
                            .collect::<std::result::Result<Vec<usize>, _>>()
                            .map_err(|_| bad(n, "bad shape"))?
                    };
                    let offset = offset.parse().map_err(|_| bad(n, "bad offset"))?;
                    let len: usize = len.parse().map_err(|_| bad(n, "bad length"))?;
                    if shape.iter().product::<usize>() != len {
                        return Err(bad(n, "length disagrees with shape"));
                    }
                    params.push((name.to_string(), Entry { shape, offset, len }));
                }
                "payload" => {
                    payload_len = Some(
                        rest.parse::<usize>()
                            .map_err(|_| bad(n, "bad payload size"))?,
                    )
                }
                "sha256" => checksum = Some(rest.to_string()),
                _ => return Err(bad(n, "unknown record")),
            }
        }
        let total = lines.len() + 1;
        let payload_len = payload_len.ok_or_else(|| bad(total, "missing `payload` record"))?;
        let checksum = checksum.ok_or_else(|| bad(total, "missing `sha256` record"))?;
        let data = &bytes[pos..];
        if data.len() < payload_len {
            return Err(WeightsError::Truncated {
                expected: payload_len,
                found: data.len(),
            });
        }
        if data.len() > payload_len || payload_len % 4 != 0 {
            return Err(bad(total, "payload size disagrees with file length"));
        }
        if hex(&Sha256::digest(data)) != checksum {
            return Err(WeightsError::Checksum);
        }
        let payload: Vec<f32> = data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        for (name, e) in &params {
            if e.offset + e.len > payload.len() {
                return Err(bad(total, &format!("`{name}` extends past the payload")));
            }
        }
        Ok(WeightsFile {
            config,
            params,
            payload,
        })
    }

    pub fn read(path: &Path) -> crate::Result<Self> {
        Ok(Self::parse(&fs::read(path)?)?)
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|(n, _)| n.as_str())
    }

    /// Copies matching parameters into `model` after checking the
    /// architecture echo and every shape.
    pub fn apply(&self, model: &mut Model) -> Result<(), WeightsError> {
        for (key, want) in model.cfg.echo() {
            let found = self.config.raw(&key).unwrap_or("<missing>");
            if found != want {
                return Err(WeightsError::ConfigMismatch {
                    key,
                    file: found.to_string(),
                    model: want,
                });
            }
        }
        let index: HashMap<&str, &Entry> =
            self.params.iter().map(|(n, e)| (n.as_str(), e)).collect();
        let mut updates = Vec::with_capacity(model.store.len());
        for (id, p) in model.store.iter() {
            let e = index
                .get(p.name.as_str())
                .ok_or_else(|| WeightsError::MissingParam(p.name.clone()))?;
            if e.shape != p.value.shape() {
                return Err(WeightsError::ShapeMismatch {
                    name: p.name.clone(),
                    file: e.shape.clone(),
                    model: p.value.shape().to_vec(),
                });
            }
            let data = self.payload[e.offset..e.offset + e.len]
                .iter()
                .map(|&v| v as f64)
                .collect();
            updates.push((id, data));
        }
        for (id, data) in updates {
            let t = model.store.get_mut(id);
            let shape = t.shape().to_vec();
            *t = Tensor::new(shape, data).expect("length checked against shape");
        }
        Ok(())
    }

    /// Full configuration stored in the file.
    pub fn model_config(&self) -> crate::Result<ModelConfig> {
        self.config.model_config(&ModelConfig::default())
    }
}

pub fn save_weights(path: &Path, model: &Model) -> crate::Result<()> {
    fs::write(path, encode_weights(model))?;
    Ok(())
}

pub fn load_weights(path: &Path, model: &mut Model) -> crate::Result<()> {
    Ok(WeightsFile::read(path)?.apply(model)?)
}

/// Builds a model from the configuration echoed in the file and loads its weights.
pub fn load_model(path: &Path) -> crate::Result<Model> {
    let file = WeightsFile::read(path)?;
    let mut model = Model::new(file.model_config()?)?;
    file.apply(&mut model)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Model {
        Model::new(ModelConfig::toy(8, 2, 1)).unwrap()
    }

    fn code(bytes: &[u8]) -> u32 {
        WeightsFile::parse(bytes).unwrap_err().code()
    }

    #[test]
    fn round_trip_is_stable() {
        let m = model();
        let bytes = encode_weights(&m);
        let file = WeightsFile::parse(&bytes).unwrap();
        let mut n = Model::new(file.model_config().unwrap()).unwrap();
        file.apply(&mut n).unwrap();
        assert_eq!(n.cfg, m.cfg);
        assert_eq!(encode_weights(&n), bytes);
        for ((_, a), (_, b)) in m.store.iter().zip(n.store.iter()) {
            for (x, y) in a.value.data().iter().zip(b.value.data()) {
                assert!((x - y).abs() <= 1e-7 * x.abs().max(1e-30));
            }
        }
    }

    #[test]
    fn corruptions_have_distinct_codes() {
        let bytes = encode_weights(&model());
        let text_end = bytes.windows(5).position(|w| w == b"\nend\n").unwrap() + 5;
        let manifest = std::str::from_utf8(&bytes[..text_end]).unwrap().to_string();
        let with = |m: String| {
            let mut b = m.into_bytes();
            b.extend_from_slice(&bytes[text_end..]);
            b
        };

        assert_eq!(code(b"garbage\n"), 10);
        assert_eq!(
            code(&with(manifest.replacen("version 1", "version 9", 1))),
            11
        );
        assert_eq!(code(&with(manifest.replacen("param ", "param\t", 1))), 12);
        assert_eq!(code(&bytes[..bytes.len() - 7]), 16);
        let mut flipped = bytes.clone();
        let last = flipped.len() - 1;
        flipped[last] ^= 0x40;
        assert_eq!(code(&flipped), 17);

        let file = WeightsFile::parse(&bytes).unwrap();
        let mut wider = Model::new(ModelConfig::toy(16, 2, 1)).unwrap();
        assert_eq!(file.apply(&mut wider).unwrap_err().code(), 13);

        let renamed = with(manifest.replacen("param head.cls.out.w", "param head.cls.out.x", 1));
        assert_eq!(
            WeightsFile::parse(&renamed)
                .unwrap()
                .apply(&mut model())
                .unwrap_err()
                .code(),
            15
        );
    }

    #[test]
    fn shape_mismatch_detected() {
        let bytes = encode_weights(&model());
        let file = WeightsFile::parse(&bytes).unwrap();
        let mut m = model();
        let id = m.store.find("head.cls.out.b").unwrap();
        let n = m.store.get(id).len();
        *m.store.get_mut(id) = Tensor::zeros([n, 1]);
        assert_eq!(file.apply(&mut m).unwrap_err().code(), 14);
    }
}
