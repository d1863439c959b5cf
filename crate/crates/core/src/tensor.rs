//! Dense tensors, group-tagged parameter stores, and the binary checkpoint
//! record format shared by parameter checkpoints and importance matrices.

use std::collections::BTreeMap;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Row-major dense array of 64-bit reals with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    pub tracked: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::config(format!("zero dimension in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::config(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data, grad: None, tracked: false })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n], grad: None, tracked: false }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(&[1], value)
    }

    /// Normal draws with standard deviation `std`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
            .collect();
        Tensor { shape: shape.to_vec(), data, grad: None, tracked: false }
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor { shape: shape.to_vec(), data, grad: None, tracked: false }
    }

    /// `[C, C, 1, 1]` weight whose 1×1 convolution is the identity map.
    pub fn identity_1x1(channels: usize) -> Self {
        let mut t = Self::zeros(&[channels, channels, 1, 1]);
        for c in 0..channels {
            t.data[c * channels + c] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Hash over shape and exact bit patterns; equal hashes mean bit-identical values.
    pub fn content_hash(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.shape.hash(&mut h);
        for v in &self.data {
            v.to_bits().hash(&mut h);
        }
        h.finish()
    }
}

/// Parameter group a tensor belongs to, derived from its dotted name prefix.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum GroupTag {
    Backbone,
    Fpn(usize),
    ClsTower,
    RegTower,
    ClsHead(usize),
    CtrHead,
    RegHead,
    DmFpn { task: usize, level: usize },
    DmCh(usize),
    /// Any other first name segment; used by generic stores and fixtures.
    Other(String),
}

/// Index-free view of a [`GroupTag`], used by masks and policies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKind {
    Backbone,
    Fpn,
    ClsTower,
    RegTower,
    ClsHead,
    CtrHead,
    RegHead,
    DmFpn,
    DmCh,
    Other,
}

impl GroupTag {
    pub fn from_name(name: &str) -> GroupTag {
        let mut parts = name.split('.');
        let head = parts.next().unwrap_or("");
        let mut idx = || parts.next().and_then(|s| s.parse::<usize>().ok());
        match head {
            "backbone" => GroupTag::Backbone,
            "cls_tower" => GroupTag::ClsTower,
            "reg_tower" => GroupTag::RegTower,
            "ctr_head" => GroupTag::CtrHead,
            "reg_head" => GroupTag::RegHead,
            "fpn" => match idx() {
                Some(l) => GroupTag::Fpn(l),
                None => GroupTag::Other(head.to_string()),
            },
            "cls_head" => match idx() {
                Some(t) => GroupTag::ClsHead(t),
                None => GroupTag::Other(head.to_string()),
            },
            "dm_ch" => match idx() {
                Some(t) => GroupTag::DmCh(t),
                None => GroupTag::Other(head.to_string()),
            },
            "dm_fpn" => match (idx(), idx()) {
                (Some(task), Some(level)) => GroupTag::DmFpn { task, level },
                _ => GroupTag::Other(head.to_string()),
            },
            other => GroupTag::Other(other.to_string()),
        }
    }

    pub fn kind(&self) -> GroupKind {
        match self {
            GroupTag::Backbone => GroupKind::Backbone,
            GroupTag::Fpn(_) => GroupKind::Fpn,
            GroupTag::ClsTower => GroupKind::ClsTower,
            GroupTag::RegTower => GroupKind::RegTower,
            GroupTag::ClsHead(_) => GroupKind::ClsHead,
            GroupTag::CtrHead => GroupKind::CtrHead,
            GroupTag::RegHead => GroupKind::RegHead,
            GroupTag::DmFpn { .. } => GroupKind::DmFpn,
            GroupTag::DmCh(_) => GroupKind::DmCh,
            GroupTag::Other(_) => GroupKind::Other,
        }
    }

    /// Task that owns this group, for task-specific groups.
    pub fn task(&self) -> Option<usize> {
        match self {
            GroupTag::ClsHead(t) | GroupTag::DmCh(t) => Some(*t),
            GroupTag::DmFpn { task, .. } => Some(*task),
            _ => None,
        }
    }
}

impl fmt::Display for GroupTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GroupTag::Backbone => write!(f, "backbone"),
            GroupTag::Fpn(l) => write!(f, "fpn.{l}"),
            GroupTag::ClsTower => write!(f, "cls_tower"),
            GroupTag::RegTower => write!(f, "reg_tower"),
            GroupTag::ClsHead(t) => write!(f, "cls_head.{t}"),
            GroupTag::CtrHead => write!(f, "ctr_head"),
            GroupTag::RegHead => write!(f, "reg_head"),
            GroupTag::DmFpn { task, level } => write!(f, "dm_fpn.{task}.{level}"),
            GroupTag::DmCh(t) => write!(f, "dm_ch.{t}"),
            GroupTag::Other(s) => write!(f, "{s}"),
        }
    }
}

/// Named parameters, iterated in name order so every reduction over the
/// store is reproducible.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    params: BTreeMap<String, Tensor>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::usage(format!("parameter `{name}` already exists")));
        }
        self.params.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::config(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar parameter count.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn num_scalars_where(&self, pred: impl Fn(&GroupTag) -> bool) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| pred(&GroupTag::from_name(n)))
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn groups(&self) -> Vec<GroupTag> {
        let mut tags: Vec<GroupTag> = self.names().map(GroupTag::from_name).collect();
        tags.sort();
        tags.dedup();
        tags
    }

    pub fn clear_grads(&mut self) {
        for t in self.params.values_mut() {
            t.grad = None;
        }
    }

    /// Per-parameter content hashes, for before/after equality checks.
    pub fn hashes(&self) -> BTreeMap<String, u64> {
        self.params.iter().map(|(k, v)| (k.clone(), v.content_hash())).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        write_records(std::io::BufWriter::new(f), CHECKPOINT_MAGIC, self.iter())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        let records = read_records(std::io::BufReader::new(f), CHECKPOINT_MAGIC)?;
        let mut store = ParameterStore::new();
        for (name, t) in records {
            store.insert(name, t)?;
        }
        Ok(store)
    }
}

pub const CHECKPOINT_MAGIC: &[u8] = b"DIODE1";
pub const IMPORTANCE_MAGIC: &[u8] = b"IMPT1";

/// Record layout: magic, u32 count, then per record
/// {u32 name length, UTF-8 name, u32 rank, u64 dims, f64 values}, all little-endian.
pub fn write_records<'a, W: Write>(
    mut w: W,
    magic: &[u8],
    records: impl Iterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    let records: Vec<_> = records.collect();
    w.write_all(magic)?;
    w.write_all(&(records.len() as u32).to_le_bytes())?;
    for (name, t) in records {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_records<R: Read>(mut r: R, magic: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut got = vec![0u8; magic.len()];
    r.read_exact(&mut got)?;
    if got != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&got),
            String::from_utf8_lossy(magic)
        )));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn group_tags_parse_from_names() {
        assert_eq!(GroupTag::from_name("backbone.conv1.weight"), GroupTag::Backbone);
        assert_eq!(GroupTag::from_name("fpn.1.lateral.bias"), GroupTag::Fpn(1));
        assert_eq!(GroupTag::from_name("cls_head.3.weight"), GroupTag::ClsHead(3));
        assert_eq!(
            GroupTag::from_name("dm_fpn.2.1.weight"),
            GroupTag::DmFpn { task: 2, level: 1 }
        );
        assert_eq!(GroupTag::from_name("dm_ch.4.bias"), GroupTag::DmCh(4));
        assert_eq!(GroupTag::from_name("a.w"), GroupTag::Other("a".into()));
        assert_eq!(GroupTag::from_name("dm_fpn.2.1.weight").task(), Some(2));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut store = ParameterStore::new();
        store.insert("backbone.conv1.weight", Tensor::randn(&[4, 1, 3, 3], 1.0, &mut rng)).unwrap();
        store.insert("cls_head.0.bias", Tensor::full(&[2], -2.0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        store.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..6], b"DIODE1");
        let back = ParameterStore::load(&path).unwrap();
        assert_eq!(back.hashes(), store.hashes());
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let t = Tensor::scalar(1.0);
        let mut buf = Vec::new();
        write_records(&mut buf, IMPORTANCE_MAGIC, [("x", &t)].into_iter()).unwrap();
        assert!(read_records(&buf[..], CHECKPOINT_MAGIC).is_err());
        assert_eq!(read_records(&buf[..], IMPORTANCE_MAGIC).unwrap().len(), 1);
    }

    #[test]
    fn duplicate_insert_fails() {
        let mut s = ParameterStore::new();
        s.insert("a.w", Tensor::scalar(1.0)).unwrap();
        assert!(s.insert("a.w", Tensor::scalar(2.0)).is_err());
    }
}
