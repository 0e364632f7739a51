//! Versioned binary checkpoints.
//!
//! Layout: magic `SSNETCKP`, format version (u32 LE), a length-prefixed JSON
//! config block (training config, generator config, epoch index, cumulative
//! batch counter), then a record count followed by parameter records of
//! `(name, rank, dims, little-endian f32 payload)`. Generator records carry a
//! `generator.` prefix, discriminator records a `discriminator.` prefix, and
//! both include normalization running statistics so a reload reproduces
//! forward outputs bit for bit.

use crate::error::{Error, Result};
use crate::networks::{Discriminator, Generator, GeneratorConfig};
use crate::training::TrainConfig;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"SSNETCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ConfigBlock {
    train_config: TrainConfig,
    generator_config: GeneratorConfig,
    epoch: u32,
    batch_counter: u64,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub version: u32,
    pub train_config: TrainConfig,
    pub generator_config: GeneratorConfig,
    pub epoch: u32,
    pub batch_counter: u64,
    pub generator_params: Vec<NamedTensor>,
    pub discriminator_params: Vec<NamedTensor>,
}

fn collect_params<F: FnOnce(&mut dyn FnMut(&str, &mut crate::nn::Param<f32>))>(
    walk: F,
) -> Vec<NamedTensor> {
    let mut out = Vec::new();
    walk(&mut |name, p| {
        out.push(NamedTensor {
            name: name.to_string(),
            dims: p.shape.iter().map(|&d| d as u32).collect(),
            data: p.data.clone(),
        });
    });
    out
}

impl Checkpoint {
    pub fn capture(
        generator: &mut Generator<f32>,
        discriminator: &mut Discriminator<f32>,
        train_config: &TrainConfig,
        epoch: u32,
        batch_counter: u64,
    ) -> Self {
        Checkpoint {
            version: FORMAT_VERSION,
            train_config: train_config.clone(),
            generator_config: generator.config.clone(),
            epoch,
            batch_counter,
            generator_params: collect_params(|f| generator.visit_params(f)),
            discriminator_params: collect_params(|f| discriminator.visit_params(f)),
        }
    }

    /// Rebuild the generator with stored parameters (including running
    /// statistics), so forward outputs match the captured network exactly.
    pub fn build_generator(&self) -> Result<Generator<f32>> {
        let mut gen = Generator::new(self.generator_config.clone(), 0)?;
        restore(&mut |f| gen.visit_params(f), &self.generator_params, "generator")?;
        Ok(gen)
    }

    pub fn build_discriminator(&self) -> Result<Discriminator<f32>> {
        let mut disc = Discriminator::new(0);
        restore(
            &mut |f| disc.visit_params(f),
            &self.discriminator_params,
            "discriminator",
        )?;
        Ok(disc)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&self.version.to_le_bytes());
        let config = ConfigBlock {
            train_config: self.train_config.clone(),
            generator_config: self.generator_config.clone(),
            epoch: self.epoch,
            batch_counter: self.batch_counter,
        };
        let config_json =
            serde_json::to_vec(&config).map_err(|e| Error::Checkpoint(e.to_string()))?;
        bytes.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&config_json);

        let total = self.generator_params.len() + self.discriminator_params.len();
        bytes.extend_from_slice(&(total as u32).to_le_bytes());
        for (prefix, tensors) in [
            ("generator", &self.generator_params),
            ("discriminator", &self.discriminator_params),
        ] {
            for t in tensors.iter() {
                let full = format!("{prefix}.{}", t.name);
                let name_bytes = full.as_bytes();
                bytes.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
                bytes.extend_from_slice(name_bytes);
                bytes.push(t.dims.len() as u8);
                for &d in &t.dims {
                    bytes.extend_from_slice(&d.to_le_bytes());
                }
                for &v in &t.data {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| Error::io(path, e))?
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        let mut cur = Cursor { bytes: &bytes, at: 0 };
        let magic = cur.take(8)?;
        if magic != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let version = cur.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let config_len = cur.u32()? as usize;
        let config: ConfigBlock = serde_json::from_slice(cur.take(config_len)?)
            .map_err(|e| Error::Checkpoint(format!("bad config block: {e}")))?;
        let count = cur.u32()? as usize;
        let mut generator_params = Vec::new();
        let mut discriminator_params = Vec::new();
        for _ in 0..count {
            let name_len = cur.u16()? as usize;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|e| Error::Checkpoint(format!("bad record name: {e}")))?
                .to_string();
            let rank = cur.take(1)?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(cur.u32()?);
            }
            let numel: usize = dims.iter().map(|&d| d as usize).product();
            let payload = cur.take(4 * numel)?;
            let data: Vec<f32> = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if let Some(rest) = name.strip_prefix("generator.") {
                generator_params.push(NamedTensor { name: rest.to_string(), dims, data });
            } else if let Some(rest) = name.strip_prefix("discriminator.") {
                discriminator_params.push(NamedTensor { name: rest.to_string(), dims, data });
            } else {
                return Err(Error::Checkpoint(format!(
                    "record {name:?} has neither generator nor discriminator prefix"
                )));
            }
        }
        if cur.at != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after the last record",
                bytes.len() - cur.at
            )));
        }
        Ok(Checkpoint {
            version,
            train_config: config.train_config,
            generator_config: config.generator_config,
            epoch: config.epoch,
            batch_counter: config.batch_counter,
            generator_params,
            discriminator_params,
        })
    }
}

type ParamWalk<'a> = &'a mut dyn FnMut(&mut dyn FnMut(&str, &mut crate::nn::Param<f32>));

fn restore(walk: ParamWalk<'_>, tensors: &[NamedTensor], what: &str) -> Result<()> {
    let mut by_name: HashMap<&str, &NamedTensor> =
        tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    let mut problem: Option<String> = None;
    walk(&mut |name, p| {
        if problem.is_some() {
            return;
        }
        match by_name.remove(name) {
            Some(t) => {
                let dims: Vec<usize> = t.dims.iter().map(|&d| d as usize).collect();
                if dims != p.shape {
                    problem = Some(format!(
                        "{what} record {name:?} has shape {dims:?}, expected {:?}",
                        p.shape
                    ));
                    return;
                }
                p.data.copy_from_slice(&t.data);
            }
            None => problem = Some(format!("{what} record {name:?} missing")),
        }
    });
    if let Some(p) = problem {
        return Err(Error::Checkpoint(p));
    }
    if let Some(stale) = by_name.keys().next() {
        return Err(Error::Checkpoint(format!(
            "{what} record {stale:?} does not match any parameter"
        )));
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bad_magic_and_truncation_are_rejected() {
        let dir = std::env::temp_dir().join(format!("ssnet-ckpt-fmt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.ckpt");
        std::fs::write(&path, b"NOTMAGIC\x01\x00\x00\x00").unwrap();
        let err = Checkpoint::load(&path).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
        std::fs::write(&path, b"SSNETCK").unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}
