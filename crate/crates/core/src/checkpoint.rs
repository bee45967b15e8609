//! Text checkpoint container.
//!
//! ```text
//! geofuse-checkpoint v1
//! config <k>
//! <k lines of key=value>
//! classes <c>
//! <c class ids, one per line>
//! params <p>
//! param <name> <trainable 0|1> <rank> <dims...>
//! <IEEE-754 bit patterns in hex, space separated>
//! ...
//! end
//! ```
//!
//! Values are stored as raw `f64` bits, so a save/load round trip is exact.

use std::fs;
use std::path::Path;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::model::GeoFuseModel;
use crate::tensor::{Tensor, TensorError};

pub const MAGIC: &str = "geofuse-checkpoint v1";

pub fn to_text(model: &GeoFuseModel, config: &ExperimentConfig) -> String {
    let mut out = String::new();
    out.push_str(MAGIC);
    out.push('\n');
    let pairs = config.to_pairs();
    out.push_str(&format!("config {}\n", pairs.len()));
    for (k, v) in pairs {
        out.push_str(&format!("{k}={v}\n"));
    }
    out.push_str(&format!("classes {}\n", model.classes.len()));
    for c in &model.classes {
        out.push_str(c);
        out.push('\n');
    }
    out.push_str(&format!("params {}\n", model.store.len()));
    for (_, p) in model.store.iter() {
        let dims: Vec<String> = p.value.shape().iter().map(ToString::to_string).collect();
        out.push_str(&format!("param {} {} {} {}\n", p.name, u8::from(p.trainable), dims.len(), dims.join(" ")));
        let words: Vec<String> = p.value.data().iter().map(|v| format!("{:016x}", v.to_bits())).collect();
        out.push_str(&words.join(" "));
        out.push('\n');
    }
    out.push_str("end\n");
    out
}

pub fn save(path: &Path, model: &GeoFuseModel, config: &ExperimentConfig) -> Result<()> {
    fs::write(path, to_text(model, config)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Reader<'a> {
    fn next(&mut self) -> Result<(usize, &'a str)> {
        self.lines.next().map(|(n, l)| (n + 1, l)).ok_or_else(|| Error::Data("checkpoint ends early".into()))
    }

    fn header(&mut self, word: &str) -> Result<usize> {
        let (n, line) = self.next()?;
        line.strip_prefix(word)
            .and_then(|r| r.trim().parse().ok())
            .ok_or_else(|| Error::Data(format!("checkpoint line {n}: expected `{word} <count>`")))
    }
}

/// Rebuilds the model described by the embedded config and overwrites every
/// parameter. Missing tensors and shape mismatches are errors naming the
/// tensor.
pub fn from_text(text: &str) -> Result<(GeoFuseModel, ExperimentConfig)> {
    let mut r = Reader { lines: text.lines().enumerate() };
    if r.next()?.1 != MAGIC {
        return Err(Error::Data(format!("not a checkpoint (expected `{MAGIC}` header)")));
    }
    let k = r.header("config")?;
    let mut pairs = Vec::with_capacity(k);
    for _ in 0..k {
        let (n, line) = r.next()?;
        let (a, b) =
            line.split_once('=').ok_or_else(|| Error::Data(format!("checkpoint line {n}: bad config entry")))?;
        pairs.push((a.to_string(), b.to_string()));
    }
    let mut config = ExperimentConfig::default();
    for (a, b) in &pairs {
        config.set(a, b)?;
    }
    config.validate()?;
    let c = r.header("classes")?;
    let classes = (0..c).map(|_| r.next().map(|(_, l)| l.to_string())).collect::<Result<Vec<_>>>()?;
    let mut model = GeoFuseModel::new(config.model, classes, 0)?;
    let p = r.header("params")?;
    if p != model.store.len() {
        return Err(Error::Data(format!("checkpoint has {p} tensors, model expects {}", model.store.len())));
    }
    for _ in 0..p {
        let (n, line) = r.next()?;
        let bad = || Error::Data(format!("checkpoint line {n}: malformed param header"));
        let f: Vec<&str> = line.split(' ').collect();
        if f.len() < 4 || f[0] != "param" {
            return Err(bad());
        }
        let name = f[1];
        let trainable = match f[2] {
            "1" => true,
            "0" => false,
            _ => return Err(bad()),
        };
        let rank: usize = f[3].parse().map_err(|_| bad())?;
        if f.len() != 4 + rank {
            return Err(bad());
        }
        let shape = f[4..].iter().map(|d| d.parse()).collect::<Result<Vec<usize>, _>>().map_err(|_| bad())?;
        let (vn, vline) = r.next()?;
        let data = vline
            .split_ascii_whitespace()
            .map(|w| u64::from_str_radix(w, 16).map(f64::from_bits))
            .collect::<Result<Vec<f64>, _>>()
            .map_err(|_| Error::Data(format!("checkpoint line {vn}: bad value for `{name}`")))?;
        let id = model
            .store
            .id_of(name)
            .ok_or_else(|| Error::Data(format!("checkpoint tensor `{name}` does not exist in the model")))?;
        let expected = model.store.value(id).shape().to_vec();
        if shape != expected {
            return Err(Error::Data(format!(
                "shape mismatch for tensor `{name}`: checkpoint {shape:?}, model {expected:?}"
            )));
        }
        let value = Tensor::new(&shape, data).map_err(|e| match e {
            TensorError::Length { .. } => Error::Data(format!("tensor `{name}` has the wrong number of values")),
            other => other.into(),
        })?;
        *model.store.value_mut(id) = value;
        model.store.set_trainable(id, trainable);
    }
    if r.next()?.1 != "end" {
        return Err(Error::Data("checkpoint is missing its `end` marker".into()));
    }
    Ok((model, config))
}

pub fn load(path: &Path) -> Result<(GeoFuseModel, ExperimentConfig)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_text(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::model::ModelConfig;

    fn config() -> ExperimentConfig {
        ExperimentConfig {
            model: ModelConfig {
                encoder: EncoderConfig {
                    image_size: 16,
                    patch_size: 8,
                    d_model: 8,
                    depth: 1,
                    heads: 2,
                    ..EncoderConfig::default()
                },
                fusion_heads: 2,
                channel_heads: 2,
                channel: false,
                ..ModelConfig::default()
            },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = config();
        let mut model = GeoFuseModel::new(cfg.model, vec!["a".into(), "b".into()], 7).unwrap();
        // awkward values survive too
        let id = model.store.id_of("head.classifier.bias").unwrap();
        model.store.value_mut(id).data_mut()[0] = -0.0;
        model.store.value_mut(id).data_mut()[1] = f64::MIN_POSITIVE / 3.0;
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save(&p, &model, &cfg).unwrap();
        let (back, cfg2) = load(&p).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(back.classes, model.classes);
        for ((_, a), (_, b)) in model.store.iter().zip(back.store.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.trainable, b.trainable);
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value), "{}", a.name);
        }
        assert!(!back.store.get(back.fusion.gate_w3).trainable);
    }

    #[test]
    fn shape_mismatch_names_the_tensor() {
        let cfg = config();
        let model = GeoFuseModel::new(cfg.model, vec!["a".into(), "b".into()], 7).unwrap();
        let text =
            to_text(&model, &cfg).replace("param head.bottleneck.bias 1 1 8", "param head.bottleneck.bias 1 1 9");
        let err = from_text(&text).unwrap_err().to_string();
        assert!(err.contains("head.bottleneck.bias"), "{err}");
        assert!(from_text("hello").is_err());
    }
}
