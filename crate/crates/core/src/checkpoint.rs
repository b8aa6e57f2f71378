//! Binary checkpoint format.
//!
//! ```text
//! "CPRX" | version u32 | meta_len u32 | meta JSON | record_count u32 | records...
//! record: name_len u32 | name | dtype u8 | rank u32 | extents u64[rank] | data (LE)
//! ```
//! All integers are little-endian. Parameters are stored as `<layer>.weight`
//! / `<layer>.bias`, batch-norm statistics as `<layer>.running_mean` /
//! `<layer>.running_var`, head parameters under `head.` and optimizer
//! velocities under `velocity/`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Mlp, MlpSpec, Network, NetworkSpec, ParamSet, RunningStats};
use crate::tensor::{DType, Float, Tensor};

pub const MAGIC: &[u8; 4] = b"CPRX";
pub const VERSION: u32 = 1;
pub const HEAD_PREFIX: &str = "head";
pub const VELOCITY_PREFIX: &str = "velocity/";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    /// Free-form origin tag, e.g. `init`, `snapshot`, `drop`, `final`.
    pub tag: String,
    pub config_hash: String,
    pub step: u64,
    pub epoch: f64,
    pub learning_rate: f64,
    pub seed: u64,
    pub loss_scale: f64,
    pub network: NetworkSpec,
    pub head: Option<MlpSpec>,
}

/// Named float32 arrays plus training metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

fn stat_names(layer: &str) -> (String, String) {
    (format!("{layer}.running_mean"), format!("{layer}.running_var"))
}

impl Checkpoint {
    pub fn from_parts(
        meta: CheckpointMeta,
        net: &Network<f32>,
        head: Option<&Mlp<f32>>,
        velocity: Option<&BTreeMap<String, Tensor<f32>>>,
    ) -> Self {
        let mut tensors = net.params.tensors.clone();
        for (layer, s) in &net.stats {
            let (m, v) = stat_names(layer);
            let c = s.mean.len();
            tensors.insert(m, Tensor::new(vec![c], s.mean.clone()).expect("stat length"));
            tensors.insert(v, Tensor::new(vec![c], s.var.clone()).expect("stat length"));
        }
        if let Some(h) = head {
            tensors.extend(h.params.tensors.iter().map(|(k, v)| (k.clone(), v.clone())));
        }
        if let Some(vel) = velocity {
            tensors.extend(vel.iter().map(|(k, v)| (format!("{VELOCITY_PREFIX}{k}"), v.clone())));
        }
        Checkpoint { meta, tensors }
    }

    /// Every parameter and statistic the embedded specs require, with the
    /// right shape, and nothing unaccounted for.
    pub fn validate(&self) -> Result<()> {
        let spec = &self.meta.network;
        let mut expected: BTreeMap<String, Vec<usize>> = spec
            .parameter_shapes()
            .and_then(|p| Ok(p.into_iter().chain(spec.statistic_shapes()?).collect()))
            .map_err(|e| Error::Checkpoint(format!("embedded network spec invalid: {e}")))?;
        if let Some(h) = &self.meta.head {
            expected.extend(h.parameter_shapes(HEAD_PREFIX));
        }
        for (name, shape) in &expected {
            match self.tensors.get(name) {
                None => return Err(Error::Checkpoint(format!("missing record `{name}`"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Checkpoint(format!(
                        "record `{name}` has shape {:?}, spec needs {shape:?}",
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        for (name, t) in &self.tensors {
            let known = match name.strip_prefix(VELOCITY_PREFIX) {
                Some(param) => expected.get(param).is_some_and(|s| s.as_slice() == t.shape()),
                None => expected.contains_key(name),
            };
            if !known {
                return Err(Error::Checkpoint(format!("record `{name}` is not part of the embedded specs")));
            }
        }
        Ok(())
    }

    pub fn network(&self) -> Result<Network<f32>> {
        self.validate()?;
        let spec = &self.meta.network;
        let params = spec
            .parameter_shapes()?
            .into_iter()
            .map(|(n, _)| {
                let t = self.tensors[&n].clone();
                (n, t)
            })
            .collect();
        let mut stats = BTreeMap::new();
        for layer in spec.layers.iter().filter(|l| l.op == crate::model::LayerKind::BatchNorm) {
            let (m, v) = stat_names(&layer.name);
            stats.insert(
                layer.name.clone(),
                RunningStats { mean: self.tensors[&m].data().to_vec(), var: self.tensors[&v].data().to_vec() },
            );
        }
        Ok(Network { spec: spec.clone(), params: ParamSet { tensors: params }, stats })
    }

    pub fn head(&self) -> Result<Option<Mlp<f32>>> {
        let Some(spec) = &self.meta.head else { return Ok(None) };
        self.validate()?;
        let tensors = spec
            .parameter_shapes(HEAD_PREFIX)
            .into_iter()
            .map(|(n, _)| {
                let t = self.tensors[&n].clone();
                (n, t)
            })
            .collect();
        Ok(Some(Mlp { spec: spec.clone(), prefix: HEAD_PREFIX.into(), params: ParamSet { tensors } }))
    }

    pub fn velocity(&self) -> BTreeMap<String, Tensor<f32>> {
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(VELOCITY_PREFIX).map(|p| (p.to_string(), v.clone())))
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(64 + meta.len() + self.tensors.values().map(|t| 4 * t.numel() + 64).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            write_record(&mut out, name, t);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
        }
        let meta_len = r.u32("metadata length")? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len, "metadata")?)
            .map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        let count = r.u32("record count")?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let (name, t) = read_record(&mut r)?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(Error::Checkpoint(format!("record `{name}` appears twice")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes after last record", bytes.len() - r.pos)));
        }
        let ck = Checkpoint { meta, tensors };
        ck.validate()?;
        Ok(ck)
    }
}

fn write_record<F: Float>(out: &mut Vec<u8>, name: &str, t: &Tensor<F>) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(F::DTYPE.tag());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated file while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

fn read_record(r: &mut Reader<'_>) -> Result<(String, Tensor<f32>)> {
    let len = r.u32("record name length")? as usize;
    let name = String::from_utf8(r.take(len, "record name")?.to_vec())
        .map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?;
    let what = format!("record `{name}`");
    let tag = r.take(1, &what)?[0];
    match DType::from_tag(tag) {
        Some(DType::Float32) => {}
        Some(other) => {
            return Err(Error::Checkpoint(format!("record `{name}` has dtype {other:?}, expected Float32")));
        }
        None => return Err(Error::Checkpoint(format!("record `{name}` has unknown dtype tag {tag}"))),
    }
    let rank = r.u32(&what)? as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::Checkpoint(format!("record `{name}` has implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u64(&what)? as usize);
    }
    let numel = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
    let bytes = numel
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Checkpoint(format!("record `{name}` extents overflow")))?;
    let raw = r.take(bytes, &what)?;
    let data = raw.chunks_exact(4).map(f32::read_le).collect();
    let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("record `{name}`: {e}")))?;
    Ok((name, t))
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    ck.validate()?;
    let bytes = ck.to_bytes()?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::PaddingMode;

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = NetworkSpec::mini_vgg(1, 32, PaddingMode::Zero);
        let mut net = Network::<f32>::build(&spec, &mut rng).unwrap();
        net.stats.values_mut().for_each(|s| s.mean.iter_mut().for_each(|m| *m = 0.25));
        let head_spec = MlpSpec { input: 176, hidden: vec![8], output: 64 };
        let head = Mlp::build(&head_spec, HEAD_PREFIX, &mut rng).unwrap();
        let mut vel = BTreeMap::new();
        vel.insert("conv1_1.bias".to_string(), Tensor::full(vec![16], 0.5f32));
        let meta = CheckpointMeta {
            tag: "init".into(),
            config_hash: "abc".into(),
            step: 7,
            epoch: 0.5,
            learning_rate: 0.01,
            seed: 3,
            loss_scale: 0.3,
            network: spec,
            head: Some(head_spec),
        };
        Checkpoint::from_parts(meta, &net, Some(&head), Some(&vel))
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.network().unwrap().stats["conv1_1_bn"].mean[0], 0.25);
        assert_eq!(back.velocity().len(), 1);
        assert!(back.head().unwrap().is_some());
    }

    #[test]
    fn truncation_is_detected() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err().to_string();
            assert!(err.contains("truncated") || err.contains("magic"), "{err}");
        }
    }

    #[test]
    fn corrupted_dtype_names_the_record() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        let name = b"conv2_1.weight";
        let at = bytes.windows(name.len()).position(|w| w == name).unwrap() + name.len();
        for bad in [2u8, 0xff] {
            let mut b = bytes.clone();
            b[at] = bad;
            let err = Checkpoint::from_bytes(&b).unwrap_err().to_string();
            assert!(err.contains("conv2_1.weight"), "{err}");
        }
    }

    #[test]
    fn missing_parameter_and_bad_header() {
        let mut ck = sample();
        ck.tensors.remove("conv3_2.weight");
        assert!(ck.validate().unwrap_err().to_string().contains("conv3_2.weight"));
        let mut bytes = sample().to_bytes().unwrap();
        bytes[4] = 9;
        assert!(Checkpoint::from_bytes(&bytes).unwrap_err().to_string().contains("version"));
        bytes[0] = b'X';
        assert!(Checkpoint::from_bytes(&bytes).unwrap_err().to_string().contains("magic"));
    }
}
