//! Named parameter groups, the freezing schedule, group hashing and
//! checkpoint I/O.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Group {
    Backbone,
    MetaNet,
    BlendMlp,
    /// Dense and prototype heads introduced at a 1-based step.
    Head(usize),
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Group::Backbone => f.write_str("backbone"),
            Group::MetaNet => f.write_str("meta_net"),
            Group::BlendMlp => f.write_str("blend_mlp"),
            Group::Head(t) => write!(f, "heads.{t}"),
        }
    }
}

impl Group {
    pub fn parse(name: &str) -> Option<Group> {
        match name {
            "backbone" => Some(Group::Backbone),
            "meta_net" => Some(Group::MetaNet),
            "blend_mlp" => Some(Group::BlendMlp),
            _ => name.strip_prefix("heads.")?.parse().ok().map(Group::Head),
        }
    }

    /// Group of a fully qualified parameter name.
    pub fn of_param(name: &str) -> Option<Group> {
        if let Some(rest) = name.strip_prefix("heads.") {
            let step = rest.split('.').next()?;
            return Group::parse(&format!("heads.{step}"));
        }
        Group::parse(name.split('.').next()?)
    }
}

#[derive(Debug)]
pub struct Param {
    pub name: String,
    pub group: Group,
    pub var: Var,
}

/// Every scalar of the model lives in exactly one group; frozen groups
/// hand out detached tensors so no gradient is ever produced for them.
#[derive(Debug)]
pub struct ParameterRegistry {
    params: Vec<Param>,
    index: HashMap<String, usize>,
    trainable: BTreeMap<Group, bool>,
    dtype: DType,
    device: Device,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupDigest {
    pub name: String,
    pub n_params: usize,
    pub sha256: String,
}

/// Sidecar manifest written next to every checkpoint.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub step: usize,
    pub groups: Vec<GroupDigest>,
}

impl Manifest {
    pub fn digest(&self, group: &str) -> Option<&GroupDigest> {
        self.groups.iter().find(|g| g.name == group)
    }
}

impl ParameterRegistry {
    pub fn new(dtype: DType, device: Device) -> Self {
        Self { params: Vec::new(), index: HashMap::new(), trainable: BTreeMap::new(), dtype, device }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Registers `group.local` (heads: `heads.<t>.local`).
    pub fn add(&mut self, group: Group, local: &str, value: Tensor) -> Result<String> {
        let name = format!("{group}.{local}");
        if self.index.contains_key(&name) {
            return Err(Error::contract(format!("parameter {name} registered twice")));
        }
        let var = Var::from_tensor(&value.to_dtype(self.dtype)?)?;
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name: name.clone(), group, var });
        self.trainable.entry(group).or_insert(true);
        Ok(name)
    }

    pub fn param(&self, name: &str) -> Result<&Param> {
        self.index
            .get(name)
            .map(|&i| &self.params[i])
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))
    }

    /// Tensor for use in a forward pass. Detached when its group is frozen.
    pub fn get(&self, name: &str) -> Result<Tensor> {
        let p = self.param(name)?;
        let t = p.var.as_tensor();
        Ok(if self.is_trainable(p.group) { t.clone() } else { t.detach() })
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn groups(&self) -> Vec<Group> {
        self.trainable.keys().copied().collect()
    }

    pub fn is_trainable(&self, group: Group) -> bool {
        self.trainable.get(&group).copied().unwrap_or(false)
    }

    pub fn set_trainable(&mut self, group: Group, on: bool) {
        if let Some(flag) = self.trainable.get_mut(&group) {
            *flag = on;
        }
    }

    pub fn trainable_groups(&self) -> Vec<Group> {
        self.trainable.iter().filter(|(_, &on)| on).map(|(g, _)| *g).collect()
    }

    pub fn trainable_params(&self) -> impl Iterator<Item = &Param> {
        self.params.iter().filter(|p| self.is_trainable(p.group))
    }

    /// Step 1 trains everything. Later steps train only that step's heads.
    pub fn apply_freeze_schedule(&mut self, step: usize) {
        for (group, flag) in self.trainable.iter_mut() {
            *flag = step <= 1 || *group == Group::Head(step);
        }
    }

    pub fn freeze_all(&mut self) {
        for flag in self.trainable.values_mut() {
            *flag = false;
        }
    }

    pub fn n_params(&self, group: Group) -> usize {
        self.params.iter().filter(|p| p.group == group).map(|p| p.var.elem_count()).sum()
    }

    pub fn total_params(&self) -> usize {
        self.params.iter().map(|p| p.var.elem_count()).sum()
    }

    /// SHA-256 over the group's parameters in name order: name, shape and
    /// little-endian values.
    pub fn group_hash(&self, group: Group) -> Result<String> {
        let mut members: Vec<&Param> = self.params.iter().filter(|p| p.group == group).collect();
        members.sort_by(|a, b| a.name.cmp(&b.name));
        let mut h = Sha256::new();
        for p in members {
            h.update(p.name.as_bytes());
            h.update([0u8]);
            for &d in p.var.dims() {
                h.update((d as u64).to_le_bytes());
            }
            h.update(tensor_bytes(p.var.as_tensor())?);
        }
        Ok(hex::encode(h.finalize()))
    }

    pub fn manifest(&self, step: usize) -> Result<Manifest> {
        let groups = self
            .groups()
            .into_iter()
            .map(|g| Ok(GroupDigest { name: g.to_string(), n_params: self.n_params(g), sha256: self.group_hash(g)? }))
            .collect::<Result<_>>()?;
        Ok(Manifest { step, groups })
    }

    /// Groups that must be bit-identical to the previous checkpoint after
    /// `step` has trained.
    pub fn frozen_since_previous(&self, step: usize) -> Vec<Group> {
        if step <= 1 {
            return Vec::new();
        }
        self.groups().into_iter().filter(|g| *g != Group::Head(step)).collect()
    }

    /// Compares frozen groups against the previous step's manifest.
    pub fn verify_frozen(&self, step: usize, previous: &Manifest) -> Result<()> {
        for g in self.frozen_since_previous(step) {
            let name = g.to_string();
            let expected = previous
                .digest(&name)
                .ok_or_else(|| Error::contract(format!("group {name} missing from step {} manifest", previous.step)))?;
            if self.group_hash(g)? != expected.sha256 {
                return Err(Error::FrozenDrift { group: name, step });
            }
        }
        Ok(())
    }

    /// Deep copy with every group frozen.
    pub fn snapshot(&self) -> Result<Self> {
        let mut out = Self::new(self.dtype, self.device.clone());
        for p in &self.params {
            out.index.insert(p.name.clone(), out.params.len());
            out.params.push(Param {
                name: p.name.clone(),
                group: p.group,
                var: Var::from_tensor(&p.var.as_tensor().copy()?)?,
            });
            out.trainable.insert(p.group, false);
        }
        Ok(out)
    }

    pub fn set_value(&self, name: &str, value: &Tensor) -> Result<()> {
        let p = self.param(name)?;
        if p.var.dims() != value.dims() {
            return Err(Error::shape(format!("{name}: expected {:?}, got {:?}", p.var.dims(), value.dims())));
        }
        p.var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// Overwrites every parameter from a checkpoint holding exactly the
    /// same names.
    pub fn load_checkpoint(&self, ckpt: &Checkpoint) -> Result<()> {
        if ckpt.tensors.len() != self.params.len() {
            return Err(Error::contract(format!(
                "checkpoint holds {} tensors, model has {} parameters",
                ckpt.tensors.len(),
                self.params.len()
            )));
        }
        for (name, t) in &ckpt.tensors {
            self.set_value(name, t)?;
        }
        Ok(())
    }

    /// Writes a safetensors archive; step index and freeze flags go into
    /// the header metadata.
    pub fn save(&self, path: &Path, step: usize) -> Result<()> {
        let st_dtype = match self.dtype {
            DType::F32 => safetensors::Dtype::F32,
            DType::F64 => safetensors::Dtype::F64,
            other => return Err(Error::contract(format!("unsupported checkpoint dtype {other:?}"))),
        };
        let buffers: Vec<(String, Vec<usize>, Vec<u8>)> = self
            .params
            .iter()
            .map(|p| Ok((p.name.clone(), p.var.dims().to_vec(), tensor_bytes(p.var.as_tensor())?)))
            .collect::<Result<_>>()?;
        let views = buffers
            .iter()
            .map(|(n, shape, bytes)| Ok((n.clone(), safetensors::tensor::TensorView::new(st_dtype, shape.clone(), bytes)?)))
            .collect::<Result<Vec<_>>>()?;
        let flags: BTreeMap<String, bool> = self.trainable.iter().map(|(g, &on)| (g.to_string(), on)).collect();
        let meta = HashMap::from([
            ("step".to_string(), step.to_string()),
            ("trainable".to_string(), serde_json::to_string(&flags)?),
        ]);
        safetensors::tensor::serialize_to_file(views, Some(meta), path)?;
        Ok(())
    }
}

/// Raw checkpoint contents.
#[derive(Debug)]
pub struct Checkpoint {
    pub step: usize,
    pub trainable: BTreeMap<String, bool>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn read(path: &Path, device: &Device) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingCheckpoint(path.to_path_buf()));
        }
        let bytes = std::fs::read(path)?;
        let (_, header) = safetensors::SafeTensors::read_metadata(&bytes)?;
        let meta = header.metadata().clone().unwrap_or_default();
        let step = meta.get("step").and_then(|s| s.parse().ok()).unwrap_or(0);
        let trainable = match meta.get("trainable") {
            Some(s) => serde_json::from_str(s)?,
            None => BTreeMap::new(),
        };
        let st = safetensors::SafeTensors::deserialize(&bytes)?;
        let mut tensors = Vec::new();
        for (name, view) in st.tensors() {
            let shape = view.shape().to_vec();
            let data = view.data();
            let t = match view.dtype() {
                safetensors::Dtype::F32 => {
                    let v: Vec<f32> = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                    Tensor::from_vec(v, shape, device)?
                }
                safetensors::Dtype::F64 => {
                    let v: Vec<f64> = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                    Tensor::from_vec(v, shape, device)?
                }
                other => return Err(Error::contract(format!("unsupported tensor dtype {other:?} in {name}"))),
            };
            tensors.push((name, t));
        }
        tensors.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(Self { step, trainable, tensors })
    }
}

pub fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::F64 => flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        other => return Err(Error::contract(format!("unsupported dtype {other:?}"))),
    })
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    if !path.exists() {
        return Err(Error::MissingCheckpoint(path.to_path_buf()));
    }
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}
