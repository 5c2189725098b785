//! Versioned plain-text checkpoint format.
//!
//! ```text
//! osda-checkpoint
//! version 1
//! num_known 4
//! num_extra 8
//! seed 7
//! steps 2000
//! layers 3
//! layer 0 2 64 relu
//! w <fan_out values>        (one line per weight row, fan_in lines)
//! b <fan_out values>
//! ...
//! end
//! ```
//!
//! Floats are written with the shortest representation that parses back to
//! the identical value, so a save/load roundtrip is bitwise exact.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::model::{Activation, Dense, ExpandedClassifier};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &str = "osda-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TrainingMeta {
    pub seed: u64,
    pub steps: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub model: ExpandedClassifier<T>,
    pub meta: TrainingMeta,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(model: ExpandedClassifier<T>, meta: TrainingMeta) -> Self {
        Self { model, meta }
    }

    pub fn to_text(&self) -> String {
        let m = &self.model;
        let mut out = String::new();
        let _ = writeln!(out, "{CHECKPOINT_MAGIC}");
        let _ = writeln!(out, "version {CHECKPOINT_VERSION}");
        let _ = writeln!(out, "num_known {}", m.num_known());
        let _ = writeln!(out, "num_extra {}", m.num_extra());
        let _ = writeln!(out, "seed {}", self.meta.seed);
        let _ = writeln!(out, "steps {}", self.meta.steps);
        let _ = writeln!(out, "layers {}", m.layers().len());
        for (i, l) in m.layers().iter().enumerate() {
            let _ = writeln!(
                out,
                "layer {i} {} {} {}",
                l.fan_in(),
                l.fan_out(),
                l.activation.as_str()
            );
            for row in l.weight.rows() {
                out.push('w');
                for v in row {
                    let _ = write!(out, " {v}");
                }
                out.push('\n');
            }
            out.push('b');
            for v in l.bias.iter() {
                let _ = write!(out, " {v}");
            }
            out.push('\n');
        }
        out.push_str("end\n");
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = Lines {
            inner: text.lines(),
            line_no: 0,
        };
        let magic = lines.next_line()?;
        if magic.trim() != CHECKPOINT_MAGIC {
            return Err(Error::CorruptCheckpoint(format!("bad header {magic:?}")));
        }
        let version: u32 = lines.keyed("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let num_known: usize = lines.keyed("num_known")?;
        let num_extra: usize = lines.keyed("num_extra")?;
        let seed: u64 = lines.keyed("seed")?;
        let steps: u64 = lines.keyed("steps")?;
        let n_layers: usize = lines.keyed("layers")?;

        let mut layers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let header = lines.next_line()?;
            let parts: Vec<&str> = header.split_whitespace().collect();
            if parts.len() != 5 || parts[0] != "layer" || parts[1] != i.to_string() {
                return Err(lines.corrupt(format!("expected header for layer {i}")));
            }
            let fan_in: usize = parts[2].parse().map_err(|_| lines.corrupt("bad fan_in"))?;
            let fan_out: usize = parts[3].parse().map_err(|_| lines.corrupt("bad fan_out"))?;
            let activation =
                Activation::parse(parts[4]).ok_or_else(|| lines.corrupt("unknown activation"))?;
            let mut weight = Vec::with_capacity(fan_in * fan_out);
            for _ in 0..fan_in {
                let row = lines.values::<T>("w")?;
                if row.len() != fan_out {
                    return Err(Error::CheckpointShape(format!(
                        "layer {i}: weight row has {} values, header says {fan_out}",
                        row.len()
                    )));
                }
                weight.extend(row);
            }
            let bias = lines.values::<T>("b")?;
            if bias.len() != fan_out {
                return Err(Error::CheckpointShape(format!(
                    "layer {i}: bias has {} values, header says {fan_out}",
                    bias.len()
                )));
            }
            layers.push(Dense {
                weight: Array2::from_shape_vec((fan_in, fan_out), weight).expect("counted"),
                bias: Array2::from_shape_vec((1, fan_out), bias).expect("counted"),
                activation,
            });
        }
        if lines.next_line()?.trim() != "end" {
            return Err(lines.corrupt("missing end marker"));
        }
        let model = ExpandedClassifier::from_layers(layers, num_known, num_extra)
            .map_err(|e| Error::CheckpointShape(e.to_string()))?;
        Ok(Self {
            model,
            meta: TrainingMeta { seed, steps },
        })
    }
}

struct Lines<'a> {
    inner: std::str::Lines<'a>,
    line_no: usize,
}

impl<'a> Lines<'a> {
    fn corrupt(&self, msg: impl std::fmt::Display) -> Error {
        Error::CorruptCheckpoint(format!("line {}: {msg}", self.line_no))
    }

    fn next_line(&mut self) -> Result<&'a str> {
        self.line_no += 1;
        self.inner
            .next()
            .ok_or_else(|| Error::CorruptCheckpoint(format!("truncated at line {}", self.line_no)))
    }

    fn keyed<V: std::str::FromStr>(&mut self, key: &str) -> Result<V> {
        let line = self.next_line()?;
        let mut it = line.split_whitespace();
        if it.next() != Some(key) {
            return Err(self.corrupt(format!("expected `{key}`")));
        }
        let v = it
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| self.corrupt(format!("bad value for `{key}`")))?;
        if it.next().is_some() {
            return Err(self.corrupt("trailing tokens"));
        }
        Ok(v)
    }

    fn values<T: Scalar>(&mut self, tag: &str) -> Result<Vec<T>> {
        let line = self.next_line()?;
        let mut it = line.split_whitespace();
        if it.next() != Some(tag) {
            return Err(self.corrupt(format!("expected `{tag}` row")));
        }
        it.map(|tok| tok.parse::<T>().map_err(|_| self.corrupt(format!("bad number {tok:?}"))))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint<f64> {
        let src = ExpandedClassifier::<f64>::build_source(3, &[5, 4], 4, 21).unwrap();
        Checkpoint::new(
            src.expand_head(3, 2).unwrap(),
            TrainingMeta { seed: 21, steps: 17 },
        )
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let ck = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::<f64>::load(&path).unwrap();
        assert_eq!(back, ck);
        let x = Array2::from_shape_fn((4, 3), |(i, j)| (i as f64) * 0.37 - (j as f64) * 1.1);
        let a = ck.model.logits(&x).unwrap();
        let b = back.model.logits(&x).unwrap();
        assert!(a.iter().zip(b.iter()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn f32_roundtrip_is_bitwise() {
        let src = ExpandedClassifier::<f32>::build_source(2, &[3], 2, 5).unwrap();
        let ck = Checkpoint::new(src, TrainingMeta::default());
        assert_eq!(Checkpoint::<f32>::parse(&ck.to_text()).unwrap(), ck);
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let text = sample().to_text();
        let cut = &text[..text.len() / 2];
        let cut = &cut[..cut.rfind('\n').unwrap() + 1];
        assert!(matches!(
            Checkpoint::<f64>::parse(cut),
            Err(Error::CorruptCheckpoint(_))
        ));
    }

    #[test]
    fn bumped_version_is_rejected() {
        let text = sample().to_text().replace("version 1", "version 2");
        assert!(matches!(
            Checkpoint::<f64>::parse(&text),
            Err(Error::CheckpointVersion { found: 2, expected: 1 })
        ));
    }

    #[test]
    fn inconsistent_shapes_are_rejected() {
        let text = sample().to_text().replace("num_extra 3", "num_extra 4");
        assert!(matches!(
            Checkpoint::<f64>::parse(&text),
            Err(Error::CheckpointShape(_))
        ));
        let text = sample().to_text().replacen("layer 0 3 5 relu", "layer 0 3 6 relu", 1);
        assert!(matches!(
            Checkpoint::<f64>::parse(&text),
            Err(Error::CheckpointShape(_))
        ));
    }
}
