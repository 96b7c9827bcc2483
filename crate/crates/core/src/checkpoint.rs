//! Binary network checkpoints.
//!
//! Layout (little-endian): `b"EQNSCKPT"`, `u32` version, `u64` manifest
//! length, manifest JSON, `u32` array count, then per array: `u32` name
//! length, name, `u32` rank, `u64` dims, `f64` values.

use std::collections::BTreeMap;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Parameter, Tensor};
use crate::gconv::{GConvError, GConvLayer, GKernel, KernelInput, MixedLayer};
use crate::groups::{PointGroup, ELEMENT_ORDERING_TAG};
use crate::model::{BackboneSpec, BatchNorm, ConvUnit, Dense, ModelError, Network};

pub const MAGIC: &[u8; 8] = b"EQNSCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("bad manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("element ordering {found:?} differs from {expected:?}")]
    OrderingMismatch { found: String, expected: String },
    #[error("missing array {0}")]
    MissingArray(String),
    #[error("array {0}: {1}")]
    BadArray(String, String),
    #[error(transparent)]
    GConv(#[from] GConvError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GConvDesc {
    pub group: PointGroup,
    pub input: KernelInput,
    pub c_out: usize,
    pub c_in: usize,
    pub k: usize,
    pub out_route: Vec<usize>,
    pub in_route: Vec<usize>,
    pub weight_norm: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerDesc {
    Static { layer: GConvDesc },
    Mixed { branches: Vec<GConvDesc> },
    Rpp { equi: GConvDesc, free: GConvDesc },
    Plain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub ordering: String,
    pub spec: BackboneSpec,
    pub top: PointGroup,
    pub genotype: Option<Vec<PointGroup>>,
    pub seeds: BTreeMap<String, u64>,
    pub layers: Vec<LayerDesc>,
    /// Free-form fields written by the caller (e.g. run configuration).
    #[serde(default)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

fn desc(l: &GConvLayer) -> GConvDesc {
    GConvDesc {
        group: l.kernel.group,
        input: l.kernel.input,
        c_out: l.kernel.c_out,
        c_in: l.kernel.c_in,
        k: l.kernel.k,
        out_route: l.out_route.clone(),
        in_route: l.in_route.clone(),
        weight_norm: l.gain.is_some(),
    }
}

fn push_layer(arrays: &mut Vec<(String, Tensor)>, name: &str, l: &GConvLayer) {
    arrays.push((format!("{name}.kernel"), l.kernel.weights.value.clone()));
    if let Some(g) = &l.gain {
        arrays.push((format!("{name}.gain"), g.value.clone()));
    }
}

fn push_norm(arrays: &mut Vec<(String, Tensor)>, name: &str, bn: &BatchNorm) {
    let n = bn.running_mean.len();
    arrays.push((format!("{name}.gamma"), bn.gamma.value.clone()));
    arrays.push((format!("{name}.beta"), bn.beta.value.clone()));
    let t = |v: &[f64]| Tensor::new(vec![n], v.to_vec()).expect("1-d shape");
    arrays.push((format!("{name}.running_mean"), t(&bn.running_mean)));
    arrays.push((format!("{name}.running_var"), t(&bn.running_var)));
}

/// Manifest and named arrays describing `net`.
pub fn to_parts(net: &Network, extra: BTreeMap<String, serde_json::Value>) -> (Manifest, Vec<(String, Tensor)>) {
    let mut arrays = Vec::new();
    let mut layers = Vec::new();
    for (l, (unit, bn)) in net.convs.iter().zip(&net.norms).enumerate() {
        let name = format!("conv{l}");
        layers.push(match unit {
            ConvUnit::Static(g) => {
                push_layer(&mut arrays, &name, g);
                LayerDesc::Static { layer: desc(g) }
            }
            ConvUnit::Mixed(m) => {
                arrays.push((format!("{name}.logits"), m.logits.value.clone()));
                for (b, br) in m.branches.iter().enumerate() {
                    push_layer(&mut arrays, &format!("{name}.branch{b}"), br);
                }
                LayerDesc::Mixed {
                    branches: m.branches.iter().map(desc).collect(),
                }
            }
            ConvUnit::Rpp { equi, free } => {
                push_layer(&mut arrays, &format!("{name}.equi"), equi);
                push_layer(&mut arrays, &format!("{name}.free"), free);
                LayerDesc::Rpp {
                    equi: desc(equi),
                    free: desc(free),
                }
            }
            ConvUnit::Plain(p) => {
                arrays.push((format!("{name}.filter"), p.value.clone()));
                LayerDesc::Plain
            }
        });
        push_norm(&mut arrays, &format!("bn{l}"), bn);
    }
    arrays.push(("fc1.w".into(), net.fc1.w.value.clone()));
    arrays.push(("fc1.b".into(), net.fc1.b.value.clone()));
    push_norm(&mut arrays, "head_bn", &net.head_norm);
    arrays.push(("fc2.w".into(), net.fc2.w.value.clone()));
    arrays.push(("fc2.b".into(), net.fc2.b.value.clone()));
    let manifest = Manifest {
        ordering: ELEMENT_ORDERING_TAG.to_string(),
        spec: net.spec.clone(),
        top: net.top,
        genotype: net.genotype(),
        seeds: net.seeds.clone(),
        layers,
        extra,
    };
    (manifest, arrays)
}

pub fn encode(manifest: &Manifest, arrays: &[(String, Tensor)]) -> Result<Vec<u8>, CheckpointError> {
    let json = serde_json::to_vec(manifest)?;
    let mut out = Vec::new();
    let io = |e: std::io::Error| CheckpointError::Io { path: "<buffer>".into(), source: e };
    (|| -> std::io::Result<()> {
        out.write_all(MAGIC)?;
        out.write_u32::<LittleEndian>(VERSION)?;
        out.write_u64::<LittleEndian>(json.len() as u64)?;
        out.write_all(&json)?;
        out.write_u32::<LittleEndian>(arrays.len() as u32)?;
        for (name, t) in arrays {
            out.write_u32::<LittleEndian>(name.len() as u32)?;
            out.write_all(name.as_bytes())?;
            out.write_u32::<LittleEndian>(t.shape().len() as u32)?;
            for &d in t.shape() {
                out.write_u64::<LittleEndian>(d as u64)?;
            }
            for &v in t.data() {
                out.write_f64::<LittleEndian>(v)?;
            }
        }
        Ok(())
    })()
    .map_err(io)?;
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(Manifest, Vec<(String, Tensor)>), CheckpointError> {
    let mut r = Cursor::new(bytes);
    let t = |_| CheckpointError::Truncated;
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(t)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.read_u32::<LittleEndian>().map_err(t)?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let len = r.read_u64::<LittleEndian>().map_err(t)? as usize;
    let start = r.position() as usize;
    let json = bytes.get(start..start.saturating_add(len)).ok_or(CheckpointError::Truncated)?;
    let manifest: Manifest = serde_json::from_slice(json)?;
    if manifest.ordering != ELEMENT_ORDERING_TAG {
        return Err(CheckpointError::OrderingMismatch {
            found: manifest.ordering,
            expected: ELEMENT_ORDERING_TAG.into(),
        });
    }
    r.set_position((start + len) as u64);
    let count = r.read_u32::<LittleEndian>().map_err(t)?;
    let mut arrays = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let n = r.read_u32::<LittleEndian>().map_err(t)? as usize;
        let remaining = bytes.len() - r.position() as usize;
        if n > remaining {
            return Err(CheckpointError::Truncated);
        }
        let mut name = vec![0u8; n];
        r.read_exact(&mut name).map_err(t)?;
        let name = String::from_utf8(name).map_err(|_| CheckpointError::BadArray("?".into(), "name is not utf-8".into()))?;
        let rank = r.read_u32::<LittleEndian>().map_err(t)? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.read_u64::<LittleEndian>().map_err(t)? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let remaining = (bytes.len() - r.position() as usize) / 8;
        let numel = numel.filter(|&n| n <= remaining).ok_or(CheckpointError::Truncated)?;
        let mut data = vec![0.0; numel];
        r.read_f64_into::<LittleEndian>(&mut data).map_err(t)?;
        let tensor = Tensor::new(shape, data).map_err(|e| CheckpointError::BadArray(name.clone(), e.to_string()))?;
        arrays.push((name, tensor));
    }
    if (r.position() as usize) != bytes.len() {
        return Err(CheckpointError::BadArray("<trailer>".into(), "unexpected trailing bytes".into()));
    }
    Ok((manifest, arrays))
}

struct Arrays(BTreeMap<String, Tensor>);

impl Arrays {
    fn take(&mut self, name: &str) -> Result<Tensor, CheckpointError> {
        self.0.remove(name).ok_or_else(|| CheckpointError::MissingArray(name.into()))
    }

    fn layer(&mut self, name: &str, d: &GConvDesc) -> Result<GConvLayer, CheckpointError> {
        let w = self.take(&format!("{name}.kernel"))?;
        let kernel = GKernel::new(d.group, d.input, d.c_out, d.c_in, d.k, w)?;
        let mut layer = GConvLayer::with_routes(kernel, d.out_route.clone(), d.in_route.clone())?;
        if d.weight_norm {
            layer.gain = Some(Parameter::frozen(self.take(&format!("{name}.gain"))?));
        }
        Ok(layer)
    }

    fn norm(&mut self, name: &str, group: usize) -> Result<BatchNorm, CheckpointError> {
        let gamma = self.take(&format!("{name}.gamma"))?;
        let mut bn = BatchNorm::new(gamma.data().len(), group);
        bn.gamma = Parameter::new(gamma);
        bn.beta = Parameter::new(self.take(&format!("{name}.beta"))?);
        bn.running_mean = self.take(&format!("{name}.running_mean"))?.data().to_vec();
        bn.running_var = self.take(&format!("{name}.running_var"))?.data().to_vec();
        if bn.beta.numel() != bn.running_mean.len() || bn.running_var.len() != bn.running_mean.len() {
            return Err(CheckpointError::BadArray(name.into(), "inconsistent norm sizes".into()));
        }
        Ok(bn)
    }

    fn dense(&mut self, name: &str) -> Result<Dense, CheckpointError> {
        Ok(Dense {
            w: Parameter::new(self.take(&format!("{name}.w"))?),
            b: Parameter::new(self.take(&format!("{name}.b"))?),
        })
    }
}

pub fn from_parts(manifest: &Manifest, arrays: Vec<(String, Tensor)>) -> Result<Network, CheckpointError> {
    manifest.spec.validate()?;
    let mut a = Arrays(arrays.into_iter().collect());
    let group = manifest.top.order();
    let mut convs = Vec::new();
    let mut norms = Vec::new();
    for (l, d) in manifest.layers.iter().enumerate() {
        let name = format!("conv{l}");
        convs.push(match d {
            LayerDesc::Static { layer } => ConvUnit::Static(a.layer(&name, layer)?),
            LayerDesc::Mixed { branches } => {
                let logits = Parameter::new(a.take(&format!("{name}.logits"))?);
                let branches = branches
                    .iter()
                    .enumerate()
                    .map(|(b, bd)| a.layer(&format!("{name}.branch{b}"), bd))
                    .collect::<Result<Vec<_>, _>>()?;
                ConvUnit::Mixed(MixedLayer::new(branches, logits)?)
            }
            LayerDesc::Rpp { equi, free } => ConvUnit::Rpp {
                equi: a.layer(&format!("{name}.equi"), equi)?,
                free: a.layer(&format!("{name}.free"), free)?,
            },
            LayerDesc::Plain => ConvUnit::Plain(Parameter::new(a.take(&format!("{name}.filter"))?)),
        });
        norms.push(a.norm(&format!("bn{l}"), group)?);
    }
    let fc1 = a.dense("fc1")?;
    let head_norm = a.norm("head_bn", 1)?;
    let fc2 = a.dense("fc2")?;
    if let Some(name) = a.0.keys().next() {
        return Err(CheckpointError::BadArray(name.clone(), "unused array".into()));
    }
    Ok(Network {
        spec: manifest.spec.clone(),
        top: manifest.top,
        convs,
        norms,
        fc1,
        head_norm,
        fc2,
        seeds: manifest.seeds.clone(),
    })
}

pub fn to_bytes(net: &Network, extra: BTreeMap<String, serde_json::Value>) -> Result<Vec<u8>, CheckpointError> {
    let (m, a) = to_parts(net, extra);
    encode(&m, &a)
}

pub fn from_bytes(bytes: &[u8]) -> Result<(Network, Manifest), CheckpointError> {
    let (m, a) = decode(bytes)?;
    Ok((from_parts(&m, a)?, m))
}

pub fn save(path: &Path, net: &Network, extra: BTreeMap<String, serde_json::Value>) -> Result<(), CheckpointError> {
    let bytes = to_bytes(net, extra)?;
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&bytes))
        .map_err(|e| CheckpointError::Io {
            path: path.display().to_string(),
            source: e,
        })
}

pub fn load(path: &Path) -> Result<(Network, Manifest), CheckpointError> {
    let bytes = std::fs::read(path).map_err(|e| CheckpointError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build, Mode};
    use rand::SeedableRng;

    fn spec(mode: Mode) -> BackboneSpec {
        BackboneSpec {
            n_conv_layers: 2,
            base_expanded_width: 8,
            widen_after: None,
            pool_after: vec![1],
            kernel_size: 3,
            in_channels: 1,
            n_classes: 10,
            head_hidden_width: 8,
            mode,
        }
    }

    fn nets() -> Vec<Network> {
        let d4 = build(&spec(BackboneSpec::uniform(PointGroup::D4, 2)), 1).unwrap();
        vec![
            d4.relax_layer(1, PointGroup::C4).unwrap(),
            build(&spec(Mode::Mixed(PointGroup::ALL.to_vec())), 2).unwrap(),
            build(&spec(Mode::Rpp), 3).unwrap(),
            d4.collapsed().unwrap(),
        ]
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::uniform(&[2, 1, 8, 8], -1.0, 1.0, &mut rng);
        for net in nets() {
            let extra = BTreeMap::from([("note".to_string(), serde_json::json!("x"))]);
            let bytes = to_bytes(&net, extra).unwrap();
            let (back, m) = from_bytes(&bytes).unwrap();
            assert_eq!(m.extra["note"], "x");
            assert_eq!(to_bytes(&back, m.extra.clone()).unwrap(), bytes);
            assert_eq!(back.logits(&x).unwrap(), net.logits(&x).unwrap());
        }
    }

    #[test]
    fn rejects_corruption() {
        let bytes = to_bytes(&nets()[0], BTreeMap::new()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad), Err(CheckpointError::BadMagic)));
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 3]), Err(CheckpointError::Truncated)));
        assert!(matches!(from_bytes(&bytes[..20]), Err(CheckpointError::Truncated)));
        let mut v = bytes.clone();
        v[8] = 9;
        assert!(matches!(from_bytes(&v), Err(CheckpointError::UnsupportedVersion(9))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("n.ckpt");
        let net = nets().remove(1);
        save(&p, &net, BTreeMap::new()).unwrap();
        let (back, m) = load(&p).unwrap();
        assert_eq!(m.layers.len(), 2);
        assert!(back.is_mixed());
    }
}
