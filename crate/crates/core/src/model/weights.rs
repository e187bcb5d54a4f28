use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelConfig, ParamGroup};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Named parameter arrays, iterated in name order.
pub type ParamMap<T = f32> = BTreeMap<String, Tensor<T>>;

const MAGIC: &[u8; 5] = b"IRCN1";

/// Parameters of a full detector plus the metadata needed to rebuild it.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub seed: u64,
    pub class_names: Vec<String>,
    pub params: ParamMap,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    format: String,
    config_hash: String,
    seed: u64,
    class_names: Vec<String>,
    config: ModelConfig,
}

impl ModelConfig {
    /// First 8 bytes (little-endian) of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> u64 {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
    }
}

fn default_class_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("class_{i}")).collect()
}

/// Standard deviation for a weight array. Hidden layers get He-normal
/// scaling; the RPN and detector outputs start small so early losses stay
/// close to chance.
fn init_std(name: &str, shape: &[usize]) -> f64 {
    match name {
        "rpn.cls.weight" | "rpn.reg.weight" | "head.cls.weight" => 0.01,
        "head.reg.weight" => 0.001,
        _ => {
            let fan_in: usize = if shape.len() == 4 { shape[1..].iter().product() } else { shape[0] };
            (2.0 / fan_in as f64).sqrt()
        }
    }
}

impl ModelWeights {
    /// Seeded random initialisation. Each array draws from its own stream
    /// keyed by `(seed, name)`, so a layer's initial values do not depend on
    /// which other layers the config contains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamMap::new();
        for (name, shape) in config.parameter_shapes() {
            let tensor = if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(seed, &name));
                let normal = Normal::new(0.0, init_std(&name, &shape)).expect("positive std");
                Tensor::from_fn(&shape, |_| normal.sample(&mut rng) as f32)
            };
            params.insert(name, tensor);
        }
        let class_names = default_class_names(config.num_classes);
        Ok(ModelWeights { config, seed, class_names, params })
    }

    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = config.parameter_shapes().into_iter().map(|(n, s)| (n, Tensor::zeros(&s))).collect();
        let class_names = default_class_names(config.num_classes);
        Ok(ModelWeights { config, seed: 0, class_names, params })
    }

    pub fn with_class_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.config.num_classes {
            return Err(Error::Validation(format!(
                "{} class names given for a {}-class model",
                names.len(),
                self.config.num_classes
            )));
        }
        self.class_names = names;
        Ok(self)
    }

    /// Checks that the parameter set is exactly the one the config expects.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let expected = self.config.parameter_shapes();
        for (name, shape) in &expected {
            match self.params.get(name) {
                None => return Err(Error::param(name.clone(), "missing")),
                Some(t) if t.shape() != &shape[..] => {
                    return Err(Error::param(name.clone(), format!("shape {:?}, expected {shape:?}", t.shape())))
                }
                _ => {}
            }
        }
        if self.params.len() != expected.len() {
            let extra = self.params.keys().find(|k| !expected.iter().any(|(n, _)| n == *k));
            return Err(Error::param(extra.cloned().unwrap_or_default(), "not part of this config"));
        }
        if self.class_names.len() != self.config.num_classes {
            return Err(Error::Validation("class name count differs from num_classes".into()));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn config_hash(&self) -> u64 {
        self.config.hash()
    }

    pub fn cast<T: Scalar>(&self) -> ParamMap<T> {
        self.params.iter().map(|(n, t)| (n.clone(), t.cast())).collect()
    }

    /// Hex SHA-256 over the names and raw bytes of one parameter group.
    pub fn group_checksum(&self, group: ParamGroup) -> String {
        self.checksum_where(|n| ParamGroup::of(n) == Some(group))
    }

    /// Hex SHA-256 over every parameter.
    pub fn checksum(&self) -> String {
        self.checksum_where(|_| true)
    }

    fn checksum_where(&self, keep: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.params.iter().filter(|(n, _)| keep(n)) {
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Sidecar path holding config and class names next to a weight file.
    pub fn sidecar_path(path: &Path) -> PathBuf {
        path.with_extension("json")
    }

    /// Writes the binary weight file at `path` and the JSON sidecar beside it.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let mut bytes = Vec::new();
        write_weight_file(&mut bytes, &self.params, self.config_hash());
        fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
        let sidecar = Sidecar {
            format: "IRCN1".into(),
            config_hash: format!("{:016x}", self.config_hash()),
            seed: self.seed,
            class_names: self.class_names.clone(),
            config: self.config.clone(),
        };
        let side = Self::sidecar_path(path);
        let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
        fs::write(&side, json).map_err(|e| Error::io(side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let (params, hash) = read_weight_file(&bytes)?;
        let side = Self::sidecar_path(path);
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let sidecar: Sidecar =
            serde_json::from_str(&text).map_err(|e| Error::WeightFile(format!("{}: {e}", side.display())))?;
        if sidecar.config.hash() != hash {
            return Err(Error::WeightFile(format!(
                "config hash {:016x} in {} does not match {:016x} in the weight file",
                sidecar.config.hash(),
                side.display(),
                hash
            )));
        }
        let weights =
            ModelWeights { config: sidecar.config, seed: sidecar.seed, class_names: sidecar.class_names, params };
        weights.validate()?;
        Ok(weights)
    }
}

/// Total scalar count over all arrays.
pub fn count_parameters(weights: &ModelWeights) -> usize {
    weights.params.values().map(Tensor::numel).sum()
}

/// Serializes `params` as: magic `IRCN1`, then per array `u32` name length,
/// UTF-8 name, `u32` rank, `u32` extents, `f32` data (all little-endian), then
/// an 8-byte config hash.
pub fn write_weight_file(out: &mut Vec<u8>, params: &ParamMap, config_hash: u64) {
    out.extend_from_slice(MAGIC);
    for (name, t) in params {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&config_hash.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::WeightFile(format!("truncated while reading {what} at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")) as usize)
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

/// Parses a weight file; returns the arrays and the config hash trailer.
pub fn read_weight_file(bytes: &[u8]) -> Result<(ParamMap, u64)> {
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::WeightFile("missing IRCN1 magic".into()));
    }
    let mut r = Reader { bytes, pos: MAGIC.len() };
    let mut params = ParamMap::new();
    // the trailer is the only thing that can occupy exactly the last 8 bytes
    while r.remaining() > 8 {
        let len = r.u32("name length")?;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::WeightFile(format!("name at byte {} is not UTF-8", r.pos - len)))?
            .to_string();
        let rank = r.u32("rank")?;
        if rank == 0 || rank > 8 {
            return Err(Error::WeightFile(format!("{name}: unsupported rank {rank}")));
        }
        let shape = (0..rank).map(|_| r.u32("extent")).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
        let numel = numel.filter(|&n| n.checked_mul(4).is_some_and(|b| b <= r.remaining()));
        let Some(numel) = numel else {
            return Err(Error::WeightFile(format!("{name}: shape {shape:?} exceeds the file")));
        };
        let data = r
            .take(numel * 4, "data")?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| Error::WeightFile(format!("{name}: {e}")))?;
        if params.insert(name.clone(), tensor).is_some() {
            return Err(Error::WeightFile(format!("duplicate array {name}")));
        }
    }
    if r.remaining() != 8 {
        return Err(Error::WeightFile("missing config hash trailer".into()));
    }
    let hash = u64::from_le_bytes(r.take(8, "trailer")?.try_into().expect("8 bytes"));
    Ok((params, hash))
}
