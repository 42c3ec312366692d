//! `DNCKPT1` checkpoints: magic, u32 LE header length, JSON header, then
//! little-endian f32 data in the order parameters, running statistics,
//! optimizer mean squares, optimizer momenta.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{OptimizerConfig, RmsProp};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::topology::{parse_topology, Model};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DNCKPT1\n";

/// A trained model with everything needed to resume.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub optimizer: RmsProp<f32>,
    pub epoch: usize,
    pub val_miou: f64,
    pub rng: ChaCha8Rng,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Section {
    Param,
    Buffer,
    MeanSquare,
    Momentum,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    section: Section,
    shape: Vec<usize>,
    /// Offset in f32 elements from the start of the data area.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct RngState {
    seed: String,
    stream: u64,
    /// 128-bit word position, as a decimal string.
    word_pos: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    topology: String,
    epoch: usize,
    val_miou: f64,
    optimizer: OptimizerConfig,
    optimizer_steps: u64,
    rng: RngState,
    tensors: Vec<TensorEntry>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<[u8; 32]> {
    if s.len() != 64 {
        return None;
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).ok()?;
    }
    Some(out)
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut data: Vec<f32> = Vec::new();
        let mut push = |name: String, section: Section, shape: Vec<usize>, values: &[f32]| {
            tensors.push(TensorEntry {
                name,
                section,
                shape,
                offset: data.len(),
            });
            data.extend_from_slice(values);
        };
        let params = self.model.params();
        for p in &params {
            push(
                p.name.clone(),
                Section::Param,
                p.tensor.shape().to_vec(),
                p.tensor.data(),
            );
        }
        for (name, t) in self.model.buffers() {
            push(name, Section::Buffer, t.shape().to_vec(), t.data());
        }
        for (p, ms) in params.iter().zip(&self.optimizer.ms) {
            push(
                format!("{}.ms", p.name),
                Section::MeanSquare,
                p.tensor.shape().to_vec(),
                ms,
            );
        }
        for (p, mom) in params.iter().zip(&self.optimizer.mom) {
            push(
                format!("{}.mom", p.name),
                Section::Momentum,
                p.tensor.shape().to_vec(),
                mom,
            );
        }
        let header = Header {
            topology: self.model.spec().render(),
            epoch: self.epoch,
            val_miou: self.val_miou,
            optimizer: self.optimizer.cfg.clone(),
            optimizer_steps: self.optimizer.steps,
            rng: RngState {
                seed: hex(&self.rng.get_seed()),
                stream: self.rng.get_stream(),
                word_pos: self.rng.get_word_pos().to_string(),
            },
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(12 + json.len() + 4 * data.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        Ok(out)
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let format = |message: String| Error::Format {
            path: path.to_owned(),
            message,
        };
        let corrupt = |message: String| Error::Corruption {
            path: path.to_owned(),
            message,
        };
        if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(format("missing DNCKPT1 magic".into()));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let json = bytes
            .get(12..12 + hlen)
            .ok_or_else(|| corrupt(format!("header length {hlen} runs past the end of the file")))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| format(format!("bad header: {e}")))?;
        let raw = &bytes[12 + hlen..];
        if !raw.len().is_multiple_of(4) {
            return Err(corrupt("data area is not a whole number of f32 values".into()));
        }
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();

        let spec = parse_topology(&header.topology)?;
        let mut model = Model::<f32>::build(&spec, 0)?;
        let sizes: Vec<usize> = model.params().iter().map(|p| p.tensor.len()).collect();
        let mut optimizer = RmsProp::new(header.optimizer.clone(), &sizes);
        optimizer.steps = header.optimizer_steps;

        let by_section = |section: Section| header.tensors.iter().filter(move |t| t.section == section);
        let fetch = |t: &TensorEntry| -> Result<Tensor<f32>> {
            let len: usize = t.shape.iter().product();
            let values = data
                .get(t.offset..t.offset + len)
                .ok_or_else(|| corrupt(format!("tensor `{}` runs past the data area", t.name)))?;
            Tensor::new(&t.shape, values.to_vec()).map_err(|e| corrupt(format!("tensor `{}`: {e}", t.name)))
        };
        let expect = |want: &str, got: &TensorEntry, shape: &[usize]| {
            if got.name != want || got.shape != shape {
                Err(corrupt(format!(
                    "expected `{want}` {shape:?}, found `{}` {:?}",
                    got.name, got.shape
                )))
            } else {
                Ok(())
            }
        };
        let count = |section: Section| header.tensors.iter().filter(|t| t.section == section).count();
        let n_params = sizes.len();
        let n_buffers = model.buffers().len();
        if count(Section::Param) != n_params
            || count(Section::Buffer) != n_buffers
            || count(Section::MeanSquare) != n_params
            || count(Section::Momentum) != n_params
        {
            return Err(corrupt("tensor directory does not match the topology".into()));
        }
        for (p, entry) in model.params_mut().into_iter().zip(by_section(Section::Param)) {
            expect(&p.name, entry, p.tensor.shape())?;
            *p.tensor = fetch(entry)?;
        }
        for ((name, t), entry) in model.buffers_mut().into_iter().zip(by_section(Section::Buffer)) {
            expect(&name, entry, t.shape())?;
            *t = fetch(entry)?;
        }
        let names: Vec<(String, Vec<usize>)> = model
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.tensor.shape().to_vec()))
            .collect();
        for (i, entry) in by_section(Section::MeanSquare).enumerate() {
            expect(&format!("{}.ms", names[i].0), entry, &names[i].1)?;
            optimizer.ms[i] = fetch(entry)?.into_data();
        }
        for (i, entry) in by_section(Section::Momentum).enumerate() {
            expect(&format!("{}.mom", names[i].0), entry, &names[i].1)?;
            optimizer.mom[i] = fetch(entry)?.into_data();
        }

        let seed = unhex(&header.rng.seed).ok_or_else(|| format("bad rng seed".into()))?;
        let word_pos: u128 = header
            .rng
            .word_pos
            .parse()
            .map_err(|_| format("bad rng word position".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(header.rng.stream);
        rng.set_word_pos(word_pos);

        Ok(Self {
            model,
            optimizer,
            epoch: header.epoch,
            val_miou: header.val_miou,
            rng,
        })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, ckpt.encode()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::decode(&bytes, path)
}
