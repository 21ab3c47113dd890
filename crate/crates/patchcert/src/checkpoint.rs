//! Binary checkpoint container.
//!
//! Layout: magic `PCRT`, version u16 LE, a length-prefixed UTF-8 metadata
//! block (`key = value` lines), a length-prefixed UTF-8 architecture
//! descriptor, then little-endian f32 parameter blobs in layer order, each
//! preceded by its shape. Round trips are byte-identical.

use crate::error::{Error, Result};
use crate::network::{Layer, Network, Parameter};
use crate::predictor::MarginPredictor;
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"PCRT";
const VERSION: u16 = 1;

/// Ordered key/value training metadata carried inside a checkpoint.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub entries: Vec<(String, String)>,
}

impl CheckpointMeta {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, key: &str, value: impl ToString) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(v);
            s.push('\n');
        }
        s
    }

    fn from_text(text: &str) -> Self {
        let mut entries = Vec::new();
        for line in text.lines() {
            if let Some((k, v)) = line.split_once('=') {
                entries.push((k.trim().to_string(), v.trim().to_string()));
            }
        }
        CheckpointMeta { entries }
    }
}

/// A persisted model: the classifier or the guided-training margin predictor.
#[derive(Debug)]
pub enum Model {
    Classifier(Network),
    Predictor(MarginPredictor),
}

fn descriptor(model: &Model) -> String {
    match model {
        Model::Classifier(net) => {
            let mut s = String::from("network classifier\n");
            let is_ = net.input_shape();
            s.push_str(&format!("input {} {} {}\n", is_[0], is_[1], is_[2]));
            s.push_str(&format!("labels {}\n", net.labels()));
            for layer in net.layers() {
                match layer {
                    Layer::Affine { weight, .. } => {
                        let ws = weight.value.shape();
                        s.push_str(&format!("affine {} {}\n", ws[1], ws[0]));
                    }
                    Layer::Conv2d { kernel, stride, .. } => {
                        let ks = kernel.value.shape();
                        s.push_str(&format!(
                            "conv2d {} {} {} {} {}\n",
                            ks[1], ks[0], ks[2], ks[3], stride
                        ));
                    }
                    Layer::Relu => s.push_str("relu\n"),
                    Layer::Flatten => s.push_str("flatten\n"),
                }
            }
            s
        }
        Model::Predictor(p) => {
            let (c, h, w) = p.input_shape();
            let (gh, gw) = p.grid();
            format!(
                "network predictor\ninput {c} {h} {w}\nlabels {}\ngrid {gh} {gw}\n",
                p.labels()
            )
        }
    }
}

fn model_params(model: &Model) -> Vec<&Parameter> {
    match model {
        Model::Classifier(net) => net.parameters(),
        Model::Predictor(p) => p.parameters(),
    }
}

/// Serializes a model with its metadata.
pub fn save_checkpoint(model: &Model, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let meta_text = meta.to_text();
    out.extend_from_slice(&(meta_text.len() as u32).to_le_bytes());
    out.extend_from_slice(meta_text.as_bytes());
    let arch = descriptor(model);
    out.extend_from_slice(&(arch.len() as u32).to_le_bytes());
    out.extend_from_slice(arch.as_bytes());
    let params = model_params(model);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        let shape = p.value.shape();
        out.push(shape.len() as u8);
        for &e in shape {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.offset + n > self.bytes.len() {
            return Err(Error::Format {
                path: self.path.clone(),
                detail: format!("truncated while reading {what}"),
                offset: self.offset as u64,
            });
        }
        let s = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn text(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::Format {
            path: self.path.clone(),
            detail: format!("{what} is not valid UTF-8"),
            offset: self.offset as u64,
        })
    }
}

fn parse_classifier(lines: &[&str]) -> Result<Network> {
    let mut input = None;
    let mut labels = None;
    let mut layers: Vec<Layer> = Vec::new();
    for line in &lines[1..] {
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("input") => {
                let dims: Vec<usize> = parts.map(|p| p.parse().unwrap_or(0)).collect();
                if dims.len() != 3 || dims.contains(&0) {
                    return Err(Error::Integrity(format!("bad input line '{line}'")));
                }
                input = Some(dims);
            }
            Some("labels") => {
                labels = parts.next().and_then(|p| p.parse().ok());
            }
            Some("flatten") => layers.push(Layer::Flatten),
            Some("relu") => layers.push(Layer::Relu),
            Some("affine") => {
                let dims: Vec<usize> = parts.map(|p| p.parse().unwrap_or(0)).collect();
                if dims.len() != 2 || dims.contains(&0) {
                    return Err(Error::Integrity(format!("bad affine line '{line}'")));
                }
                layers.push(Layer::Affine {
                    weight: Parameter::new(Tensor::zeros(&[dims[1], dims[0]])),
                    bias: Parameter::new(Tensor::zeros(&[dims[1]])),
                });
            }
            Some("conv2d") => {
                let dims: Vec<usize> = parts.map(|p| p.parse().unwrap_or(0)).collect();
                if dims.len() != 5 || dims.contains(&0) {
                    return Err(Error::Integrity(format!("bad conv2d line '{line}'")));
                }
                layers.push(Layer::Conv2d {
                    kernel: Parameter::new(Tensor::zeros(&[dims[1], dims[0], dims[2], dims[3]])),
                    bias: Parameter::new(Tensor::zeros(&[dims[1]])),
                    stride: dims[4],
                });
            }
            Some(other) => {
                return Err(Error::Integrity(format!("unknown layer kind '{other}'")))
            }
            None => {}
        }
    }
    let input = input.ok_or_else(|| Error::Integrity("descriptor missing input line".into()))?;
    let labels = labels.ok_or_else(|| Error::Integrity("descriptor missing labels".into()))?;
    Network::new(layers, input, labels)
}

fn parse_predictor(lines: &[&str]) -> Result<MarginPredictor> {
    let mut input = None;
    let mut labels = None;
    let mut grid = None;
    for line in &lines[1..] {
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("input") => {
                let dims: Vec<usize> = parts.map(|p| p.parse().unwrap_or(0)).collect();
                input = Some(dims);
            }
            Some("labels") => labels = parts.next().and_then(|p| p.parse().ok()),
            Some("grid") => {
                let dims: Vec<usize> = parts.map(|p| p.parse().unwrap_or(0)).collect();
                grid = Some(dims);
            }
            _ => {}
        }
    }
    let input = input.ok_or_else(|| Error::Integrity("predictor missing input".into()))?;
    let labels = labels.ok_or_else(|| Error::Integrity("predictor missing labels".into()))?;
    let grid = grid.ok_or_else(|| Error::Integrity("predictor missing grid".into()))?;
    if input.len() != 3 || grid.len() != 2 {
        return Err(Error::Integrity("bad predictor geometry".into()));
    }
    // parameter values are overwritten from the blobs below
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    MarginPredictor::new(input[0], input[1], input[2], (grid[0], grid[1]), labels, &mut rng)
}

/// Loads a checkpoint, reconstructing the architecture then the parameters.
pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointMeta)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader {
        bytes: &bytes,
        offset: 0,
        path: path.display().to_string(),
    };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format {
            path: r.path.clone(),
            detail: format!("bad magic {magic:?}, want {MAGIC:?}"),
            offset: 0,
        });
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::Format {
            path: r.path.clone(),
            detail: format!("unsupported version {version}, want {VERSION}"),
            offset: 4,
        });
    }
    let meta = CheckpointMeta::from_text(&r.text("metadata")?);
    let arch = r.text("architecture descriptor")?;
    let lines: Vec<&str> = arch.lines().collect();
    let mut model = match lines.first() {
        Some(&"network classifier") => Model::Classifier(parse_classifier(&lines)?),
        Some(&"network predictor") => Model::Predictor(parse_predictor(&lines)?),
        other => {
            return Err(Error::Integrity(format!(
                "unknown network type {other:?}"
            )))
        }
    };

    let declared = r.u32("parameter count")? as usize;
    {
        let params: Vec<&mut Parameter> = match &mut model {
            Model::Classifier(net) => net.parameters_mut(),
            Model::Predictor(p) => p.parameters_mut(),
        };
        if declared != params.len() {
            return Err(Error::Integrity(format!(
                "checkpoint holds {declared} parameters, architecture needs {}",
                params.len()
            )));
        }
        for (i, param) in params.into_iter().enumerate() {
            let ndim = r.take(1, "shape rank")?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32("shape extent")? as usize);
            }
            if shape != param.value.shape() {
                return Err(Error::Integrity(format!(
                    "parameter {i}: blob shape {shape:?} does not match descriptor shape {:?}",
                    param.value.shape()
                )));
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(4 * numel, "parameter data").map_err(|e| match e {
                Error::Format { offset, .. } => Error::Integrity(format!(
                    "parameter {i} (shape {shape:?}) truncated at byte {offset}"
                )),
                other => other,
            })?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            param.value = Tensor::from_vec(shape.clone(), data)?;
            param.grad = Tensor::zeros(&shape);
        }
    }
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::build_architecture;

    fn sample_net(seed: u64) -> Network {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        build_architecture("conv-small", 1, 12, 12, 10, &mut rng).unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let net = sample_net(3);
        let mut meta = CheckpointMeta::new();
        meta.push("dataset", "mnist");
        meta.push("epoch", 7);
        let p1 = dir.path().join("a.pcrt");
        let p2 = dir.path().join("b.pcrt");
        save_checkpoint(&Model::Classifier(net), &meta, &p1).unwrap();
        let (model, meta2) = load_checkpoint(&p1).unwrap();
        assert_eq!(meta2.get("dataset"), Some("mnist"));
        assert_eq!(meta2.get("epoch"), Some("7"));
        save_checkpoint(&model, &meta2, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn forward_pass_identical_after_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let net = sample_net(4);
        let path = dir.path().join("net.pcrt");
        save_checkpoint(&Model::Classifier(net.clone()), &CheckpointMeta::new(), &path).unwrap();
        let (model, _) = load_checkpoint(&path).unwrap();
        let Model::Classifier(loaded) = model else {
            panic!("expected classifier")
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let x = Tensor::uniform(&[1, 1, 12, 12], 1.0, &mut rng);
            let a = net.forward(&x).unwrap();
            let b = loaded.forward(&x).unwrap();
            assert_eq!(a.data(), b.data(), "bit-exact forward after load");
        }
    }

    #[test]
    fn predictor_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pred = MarginPredictor::new(1, 8, 8, (7, 7), 4, &mut rng).unwrap();
        let path = dir.path().join("pred.pcrt");
        let x = Tensor::uniform(&[1, 1, 8, 8], 1.0, &mut rng);
        let before = pred.forward(&x).unwrap();
        save_checkpoint(&Model::Predictor(pred), &CheckpointMeta::new(), &path).unwrap();
        let (model, _) = load_checkpoint(&path).unwrap();
        let Model::Predictor(loaded) = model else {
            panic!("expected predictor")
        };
        assert_eq!(loaded.forward(&x).unwrap().data(), before.data());
    }

    #[test]
    fn truncated_blob_names_the_parameter() {
        let dir = tempfile::tempdir().unwrap();
        let net = sample_net(6);
        let path = dir.path().join("net.pcrt");
        save_checkpoint(&Model::Classifier(net), &CheckpointMeta::new(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 64]).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("parameter") && msg.contains("truncated"), "{msg}");
    }

    #[test]
    fn bad_magic_and_version_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pcrt");
        std::fs::write(&path, b"NOPE\x01\x00").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::Format { .. })
        ));
        let mut good = b"PCRT".to_vec();
        good.extend_from_slice(&9u16.to_le_bytes());
        std::fs::write(&path, &good).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }
}
