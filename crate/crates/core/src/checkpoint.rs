//! `PMVT` container: named little-endian arrays with a trailing CRC32.
//!
//! Layout: magic `PMVT`, u32 version, u32 entry count, then per entry a
//! u16 name length, name bytes, u8 dtype, u8 rank and u64 dims; after the
//! manifest come the payloads in manifest order, then a CRC32 of all
//! preceding bytes.

use std::path::Path;

use crate::compress::{CompressionPlan, LayerPlan, MergeMatrix, PlanEntry, ReconstructMatrix};
use crate::error::{Error, Result};
use crate::finetune::{Moments, RunningLoss, TrainState};
use crate::scoring::TokenMask;
use crate::tensor::Tensor;
use crate::vit::{ModelConfig, Vit, VitParams};

pub const MAGIC: &[u8; 4] = b"PMVT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Array {
    F64(Vec<f64>),
    U8(Vec<u8>),
    U64(Vec<u64>),
}

impl Array {
    fn dtype(&self) -> u8 {
        match self {
            Array::F64(_) => 0,
            Array::U8(_) => 1,
            Array::U64(_) => 2,
        }
    }

    fn len(&self) -> usize {
        match self {
            Array::F64(v) => v.len(),
            Array::U8(v) => v.len(),
            Array::U64(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Array,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub entries: Vec<Entry>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: &[usize], data: Array) -> Result<()> {
        let name = name.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("checkpoint entry", shape, &[data.len()]));
        }
        if name.len() > u16::MAX as usize || shape.len() > u8::MAX as usize {
            return Err(Error::Format(format!("entry `{name}` name or rank too long")));
        }
        self.entries.retain(|e| e.name != name);
        self.entries.push(Entry { name, shape: shape.to_vec(), data });
        Ok(())
    }

    pub fn insert_tensor(&mut self, name: impl Into<String>, t: &Tensor) -> Result<()> {
        self.insert(name, t.shape(), Array::F64(t.data().to_vec()))
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    fn require(&self, name: &str) -> Result<&Entry> {
        self.get(name).ok_or_else(|| Error::Format(format!("checkpoint has no entry `{name}`")))
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let e = self.require(name)?;
        match &e.data {
            Array::F64(v) => Tensor::new(&e.shape, v.clone()),
            _ => Err(Error::Format(format!("entry `{name}` is not f64"))),
        }
    }

    pub fn u64s(&self, name: &str) -> Result<&[u64]> {
        match &self.require(name)?.data {
            Array::U64(v) => Ok(v),
            _ => Err(Error::Format(format!("entry `{name}` is not u64"))),
        }
    }

    pub fn u8s(&self, name: &str) -> Result<&[u8]> {
        match &self.require(name)?.data {
            Array::U8(v) => Ok(v),
            _ => Err(Error::Format(format!("entry `{name}` is not u8"))),
        }
    }

    pub fn f64s(&self, name: &str) -> Result<&[f64]> {
        match &self.require(name)?.data {
            Array::F64(v) => Ok(v),
            _ => Err(Error::Format(format!("entry `{name}` is not f64"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.data.dtype());
            out.push(e.shape.len() as u8);
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
        }
        for e in &self.entries {
            match &e.data {
                Array::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Array::U8(v) => out.extend_from_slice(v),
                Array::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(Error::Format("not a PMVT checkpoint".into()));
        }
        let mut r = Reader { bytes, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version { found: version, expected: VERSION });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(Error::Format("checkpoint CRC mismatch".into()));
        }
        let mut r = Reader { bytes: body, pos: 8 };
        let count = r.u32()? as usize;
        let mut manifest = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("entry name is not UTF-8".into()))?
                .to_string();
            let dtype = r.u8()?;
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            manifest.push((name, dtype, shape));
        }
        let mut entries = Vec::with_capacity(manifest.len());
        for (name, dtype, shape) in manifest {
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("entry `{name}` shape overflows")))?;
            let data = match dtype {
                0 => Array::F64(r.take(n.saturating_mul(8))?.chunks(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
                1 => Array::U8(r.take(n)?.to_vec()),
                2 => Array::U64(r.take(n.saturating_mul(8))?.chunks(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect()),
                other => return Err(Error::Format(format!("entry `{name}` has unknown dtype {other}"))),
            };
            entries.push(Entry { name, shape, data });
        }
        if r.pos != body.len() {
            return Err(Error::Format("trailing bytes after payload".into()));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn config_to_u64(c: &ModelConfig) -> Vec<u64> {
    [c.image_size, c.patch_size, c.channels, c.embed_dim, c.depth, c.heads, c.mlp_ratio, c.num_classes]
        .map(|v| v as u64)
        .to_vec()
}

fn config_from_u64(v: &[u64]) -> Result<ModelConfig> {
    if v.len() != 8 {
        return Err(Error::Format(format!("model config has {} fields, expected 8", v.len())));
    }
    let u = |i: usize| v[i] as usize;
    let c = ModelConfig {
        image_size: u(0),
        patch_size: u(1),
        channels: u(2),
        embed_dim: u(3),
        depth: u(4),
        heads: u(5),
        mlp_ratio: u(6),
        num_classes: u(7),
    };
    c.validate()?;
    Ok(c)
}

pub fn put_model(c: &mut Container, prefix: &str, model: &Vit) -> Result<()> {
    c.insert(format!("{prefix}config"), &[8], Array::U64(config_to_u64(&model.config)))?;
    let mut out = Ok(());
    model.params.for_each(&mut |name, t| {
        if out.is_ok() {
            out = c.insert_tensor(format!("{prefix}{name}"), t);
        }
    });
    out
}

pub fn get_model(c: &Container, prefix: &str) -> Result<Vit> {
    let config = config_from_u64(c.u64s(&format!("{prefix}config"))?)?;
    let mut params = VitParams::init(&config, 0)?;
    let mut out = Ok(());
    params.for_each_mut(&mut |name, t| {
        if out.is_err() {
            return;
        }
        match c.tensor(&format!("{prefix}{name}")) {
            Ok(v) if v.shape() == t.shape() => *t = v,
            Ok(v) => out = Err(Error::shape("checkpoint parameter", v.shape(), t.shape())),
            Err(e) => out = Err(e),
        }
    });
    out.map(|_| Vit { config, params })
}

pub fn put_plan(c: &mut Container, plan: &CompressionPlan) -> Result<()> {
    let kinds: Vec<u64> = plan.layers.iter().map(|l| u64::from(matches!(l, LayerPlan::Compressed(_)))).collect();
    c.insert("plan.layers", &[kinds.len()], Array::U64(kinds))?;
    for (l, p) in plan.layers.iter().enumerate() {
        let LayerPlan::Compressed(e) = p else { continue };
        c.insert(format!("plan.{l}.mask"), &[e.tokens()], Array::U8(e.mask.as_bytes()))?;
        c.insert_tensor(format!("plan.{l}.merge"), &e.merge.matrix)?;
        c.insert_tensor(format!("plan.{l}.reconstruct"), &e.reconstruct.matrix)?;
        let groups: Vec<u64> = e.merge.groups.iter().flat_map(|g| [g.start as u64, g.end as u64]).collect();
        c.insert(format!("plan.{l}.groups"), &[e.merge.groups.len(), 2], Array::U64(groups))?;
    }
    Ok(())
}

pub fn get_plan(c: &Container) -> Result<CompressionPlan> {
    let kinds = c.u64s("plan.layers")?;
    let mut layers = Vec::with_capacity(kinds.len());
    for (l, &k) in kinds.iter().enumerate() {
        if k == 0 {
            layers.push(LayerPlan::Exempt);
            continue;
        }
        let mask = TokenMask(c.u8s(&format!("plan.{l}.mask"))?.iter().map(|&b| b != 0).collect());
        let groups = c.u64s(&format!("plan.{l}.groups"))?.chunks(2).map(|g| g[0] as usize..g[1] as usize).collect();
        let entry = PlanEntry {
            mask,
            merge: MergeMatrix { matrix: c.tensor(&format!("plan.{l}.merge"))?, groups },
            reconstruct: ReconstructMatrix { matrix: c.tensor(&format!("plan.{l}.reconstruct"))? },
        };
        entry.validate()?;
        layers.push(LayerPlan::Compressed(entry));
    }
    Ok(CompressionPlan { layers })
}

pub fn put_state(c: &mut Container, s: &TrainState) -> Result<()> {
    let scalars = vec![s.epoch as u64, s.step as u64, s.seed, u64::from(s.frozen), s.running.count];
    c.insert("state.scalars", &[5], Array::U64(scalars))?;
    c.insert("state.running", &[3], Array::F64(vec![s.running.loss, s.running.ce, s.running.kl]))?;
    for (name, m) in &s.moments {
        c.insert(format!("state.m.{name}"), &[m.m.len()], Array::F64(m.m.clone()))?;
        c.insert(format!("state.v.{name}"), &[m.v.len()], Array::F64(m.v.clone()))?;
    }
    Ok(())
}

pub fn get_state(c: &Container) -> Result<TrainState> {
    let s = c.u64s("state.scalars")?;
    let r = c.f64s("state.running")?;
    if s.len() != 5 || r.len() != 3 {
        return Err(Error::Format("malformed train state".into()));
    }
    let mut state = TrainState {
        epoch: s[0] as usize,
        step: s[1] as usize,
        seed: s[2],
        frozen: s[3] != 0,
        moments: Default::default(),
        running: RunningLoss { loss: r[0], ce: r[1], kl: r[2], count: s[4] },
    };
    for e in &c.entries {
        if let Some(name) = e.name.strip_prefix("state.m.") {
            let v = c.f64s(&format!("state.v.{name}"))?.to_vec();
            state.moments.insert(name.to_string(), Moments { m: c.f64s(&e.name)?.to_vec(), v });
        }
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compress::global_plan;
    use crate::scoring::ImportanceScores;

    #[test]
    fn container_round_trip_is_bit_identical() {
        let mut c = Container::new();
        c.insert("a", &[2, 2], Array::F64(vec![1.5, -0.0, f64::MIN_POSITIVE, 1e300])).unwrap();
        c.insert("b", &[3], Array::U8(vec![1, 2, 3])).unwrap();
        c.insert("c", &[], Array::U64(vec![7])).unwrap();
        let bytes = c.to_bytes();
        assert_eq!(&bytes[..4], b"PMVT");
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.f64s("a").unwrap()[1].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn rejects_bad_files() {
        let mut c = Container::new();
        c.insert("x", &[1], Array::U8(vec![9])).unwrap();
        let good = c.to_bytes();

        let mut v2 = good.clone();
        v2[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(Container::from_bytes(&v2), Err(Error::Version { found: 2, expected: 1 })));

        let mut flipped = good.clone();
        let at = good.len() - 5;
        flipped[at] ^= 1;
        assert!(matches!(Container::from_bytes(&flipped), Err(Error::Format(_))));
        assert!(Container::from_bytes(&good[..10]).is_err());
        assert!(Container::from_bytes(b"NOPE0000000000000000").is_err());
        assert!(c.insert("bad", &[2], Array::U8(vec![1])).is_err());
    }

    #[test]
    fn model_plan_state_round_trip() {
        let cfg = ModelConfig { image_size: 8, patch_size: 4, embed_dim: 8, heads: 2, depth: 2, num_classes: 3, ..ModelConfig::tiny() };
        let model = Vit::new(cfg, 3).unwrap();
        let scores = ImportanceScores::single(vec![vec![1.0, 0.5, 0.2, 0.7, 0.1]; 2]);
        let plan = global_plan(&scores, 0.6, 0.2, &[0], true).unwrap();
        let mut state = TrainState::new(4);
        state.step = 11;
        state.running.loss = 0.1 + 0.2;
        state.moments.insert("head.w".into(), Moments { m: vec![0.5, 1e-20], v: vec![3.0, 4.0] });

        let mut c = Container::new();
        put_model(&mut c, "model.", &model).unwrap();
        put_plan(&mut c, &plan).unwrap();
        put_state(&mut c, &state).unwrap();
        let back = Container::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(get_model(&back, "model.").unwrap(), model);
        assert_eq!(get_plan(&back).unwrap(), plan);
        assert_eq!(get_state(&back).unwrap(), state);
        assert!(get_model(&back, "teacher.").is_err());
    }
}
