//! Where sequences and model settings come from.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use siamtpn_core::config::{Settings, MODEL_KEYS};
use siamtpn_core::synth::{load_sequence, synth_sequence, Sequence, SequenceSpec};

/// A sequence on disk or a generated one.
#[derive(Clone, Debug, PartialEq)]
pub enum Source {
    Dir(PathBuf),
    Synthetic(SequenceSpec),
}

impl Source {
    /// `easy:FRAMES:TEXTURE_SEED:SEED`, a `.json` sequence spec, or a
    /// directory of PPM frames with `groundtruth.txt`.
    pub fn parse(s: &str) -> Result<Source> {
        if let Some(rest) = s.strip_prefix("easy:") {
            let parts: Vec<&str> = rest.split(':').collect();
            let [frames, texture, seed] = parts[..] else {
                bail!("expected easy:FRAMES:TEXTURE_SEED:SEED, got `{s}`");
            };
            return Ok(Source::Synthetic(SequenceSpec::easy(
                frames
                    .parse()
                    .with_context(|| format!("bad frame count in `{s}`"))?,
                texture
                    .parse()
                    .with_context(|| format!("bad texture seed in `{s}`"))?,
                seed.parse().with_context(|| format!("bad seed in `{s}`"))?,
            )));
        }
        let path = Path::new(s);
        if path.extension().is_some_and(|e| e == "json") {
            let text = fs::read_to_string(path).with_context(|| format!("reading {s}"))?;
            let spec: SequenceSpec =
                serde_json::from_str(&text).with_context(|| format!("parsing {s}"))?;
            return Ok(Source::Synthetic(spec));
        }
        Ok(Source::Dir(path.to_path_buf()))
    }

    pub fn load(&self) -> Result<Sequence> {
        Ok(match self {
            Source::Dir(d) => {
                load_sequence(d).with_context(|| format!("loading sequence {}", d.display()))?
            }
            Source::Synthetic(spec) => synth_sequence(spec)?,
        })
    }
}

/// One source per non-empty, non-comment line of a suite file. A suite
/// argument that is not a file is read as a comma-separated list.
pub fn parse_suite(arg: &str) -> Result<Vec<Source>> {
    let path = Path::new(arg);
    let entries: Vec<String> = if path.is_file() {
        let base = path.parent().unwrap_or(Path::new("."));
        fs::read_to_string(path)?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| {
                if l.starts_with("easy:") || Path::new(l).is_absolute() {
                    l.to_string()
                } else {
                    base.join(l).to_string_lossy().into_owned()
                }
            })
            .collect()
    } else {
        arg.split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect()
    };
    if entries.is_empty() {
        bail!("suite `{arg}` lists no sequences");
    }
    entries.iter().map(|e| Source::parse(e)).collect()
}

/// Reads `--config`, then layers `--set` pairs and explicit flags on top.
pub fn settings(config: Option<&Path>, overrides: &[(String, String)]) -> Result<Settings> {
    let mut s = match config {
        Some(p) => Settings::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => Settings::new(),
    };
    for (k, v) in overrides {
        s.set(k, v.clone());
    }
    s.check_keys(MODEL_KEYS)?;
    Ok(s)
}

pub fn parse_key_value(s: &str) -> std::result::Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .filter(|(k, _)| !k.is_empty())
        .ok_or_else(|| format!("expected KEY=VALUE, got `{s}`"))
}

/// Worker count: `SIAMTPN_THREADS` if set, else the available parallelism.
pub fn thread_cap() -> Result<usize> {
    match std::env::var("SIAMTPN_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(crate::UsageError(format!(
                "SIAMTPN_THREADS must be a positive integer, got `{v}`"
            ))
            .into()),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn easy_shorthand() {
        let Source::Synthetic(s) = Source::parse("easy:12:3:4").unwrap() else {
            panic!("expected synthetic");
        };
        assert_eq!(s, SequenceSpec::easy(12, 3, 4));
        assert!(Source::parse("easy:12:3").is_err());
        assert_eq!(
            Source::parse("some/dir").unwrap(),
            Source::Dir("some/dir".into())
        );
    }

    #[test]
    fn inline_suite() {
        assert_eq!(parse_suite("easy:5:1:1, easy:6:1:2").unwrap().len(), 2);
        assert!(parse_suite(" , ").is_err());
    }

    #[test]
    fn key_values() {
        assert_eq!(
            parse_key_value("heads = 4").unwrap(),
            ("heads".into(), "4".into())
        );
        assert!(parse_key_value("=4").is_err());
        assert!(parse_key_value("heads").is_err());
    }
}
