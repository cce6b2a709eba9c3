use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{AdamW, ParamKind, ParamStore};

const MAGIC: &[u8; 4] = b"DCSN";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Which training step produced a checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Stage1 = 1,
    Stage2 = 2,
    Stage3 = 3,
    Finetune = 4,
}

impl Stage {
    fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            1 => Self::Stage1,
            2 => Self::Stage2,
            3 => Self::Stage3,
            4 => Self::Finetune,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Stage1 => "stage1",
            Self::Stage2 => "stage2",
            Self::Stage3 => "stage3",
            Self::Finetune => "finetune",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

/// Optimizer moments of one parameter, stored at full precision.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentBlock {
    pub name: String,
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingState {
    /// Last completed epoch.
    pub epoch: u64,
    pub rng: (u64, u64),
    pub optimizer_steps: u64,
    pub moments: Vec<MomentBlock>,
    /// Extra named solver state, such as warm-start potentials.
    pub aux: Vec<(String, Vec<f64>)>,
}

/// `DCSN` magic, version, stage, named little-endian `f32` parameter
/// blocks and an optional training-state blob.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub params: Vec<ParamBlock>,
    pub state: Option<TrainingState>,
}

impl Checkpoint {
    /// Snapshot of every parameter. Values are rounded to `f32`.
    pub fn capture(stage: Stage, store: &ParamStore) -> Self {
        let params = store
            .iter()
            .map(|(_, p)| ParamBlock {
                name: p.name.clone(),
                kind: p.kind,
                shape: p.tensor.shape().to_vec(),
                values: p.tensor.data().iter().map(|&v| v as f32).collect(),
            })
            .collect();
        Self {
            stage,
            params,
            state: None,
        }
    }

    pub fn with_state(mut self, store: &ParamStore, opt: &AdamW, rng: &Rng, epoch: u64) -> Self {
        let moments = store
            .iter()
            .zip(opt.moments())
            .filter(|(_, (m, _))| !m.is_empty())
            .map(|((_, p), (m, v))| MomentBlock {
                name: p.name.clone(),
                first: m.to_vec(),
                second: v.to_vec(),
            })
            .collect();
        self.state = Some(TrainingState {
            epoch,
            rng: rng.state(),
            optimizer_steps: opt.steps(),
            moments,
            aux: Vec::new(),
        });
        self
    }

    /// Copies every stored block into `store`. Every block must name an
    /// existing parameter of the same shape; parameters absent from the
    /// checkpoint keep their values.
    pub fn apply(&self, store: &mut ParamStore) -> Result<()> {
        for b in &self.params {
            let id = store.id(&b.name).ok_or_else(|| Error::UnknownParameter(b.name.clone()))?;
            let p = store.get_mut(id);
            if p.tensor.shape() != b.shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "checkpoint load",
                    lhs: p.tensor.shape().to_vec(),
                    rhs: b.shape.clone(),
                });
            }
            for (d, &s) in p.tensor.data_mut().iter_mut().zip(&b.values) {
                *d = f64::from(s);
            }
        }
        Ok(())
    }

    /// Rebuilds optimizer moments and the RNG from the training state.
    pub fn restore_training(&self, store: &ParamStore, opt: &mut AdamW) -> Result<Option<(u64, Rng)>> {
        let Some(st) = &self.state else {
            return Ok(None);
        };
        let mut first = vec![Vec::new(); store.len()];
        let mut second = vec![Vec::new(); store.len()];
        for m in &st.moments {
            let id = store.id(&m.name).ok_or_else(|| Error::UnknownParameter(m.name.clone()))?;
            first[id.index()] = m.first.clone();
            second[id.index()] = m.second.clone();
        }
        opt.restore(st.optimizer_steps, first, second);
        Ok(Some((st.epoch, Rng::from_state(st.rng.0, st.rng.1))))
    }

    pub fn has(&self, prefix: &str) -> bool {
        self.params.iter().any(|b| b.name.starts_with(prefix))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(self.stage as u8);
        put_u32(&mut out, self.params.len());
        for b in &self.params {
            put_str(&mut out, &b.name);
            out.push(match b.kind {
                ParamKind::Weight => 0,
                ParamKind::Buffer => 1,
            });
            put_u32(&mut out, b.shape.len());
            for &e in &b.shape {
                put_u32(&mut out, e);
            }
            for v in &b.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        match &self.state {
            None => out.push(0),
            Some(st) => {
                out.push(1);
                for v in [st.epoch, st.rng.0, st.rng.1, st.optimizer_steps] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                put_u32(&mut out, st.moments.len());
                for m in &st.moments {
                    put_str(&mut out, &m.name);
                    put_u32(&mut out, m.first.len());
                    for v in m.first.iter().chain(&m.second) {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                put_u32(&mut out, st.aux.len());
                for (name, vals) in &st.aux {
                    put_str(&mut out, name);
                    put_u32(&mut out, vals.len());
                    for v in vals {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(r.err("bad magic, not a checkpoint"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.err(&format!("unsupported version {version}")));
        }
        let stage = Stage::from_u8(r.u8()?).ok_or_else(|| r.err("unknown stage tag"))?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name = r.string()?;
            let kind = match r.u8()? {
                0 => ParamKind::Weight,
                1 => ParamKind::Buffer,
                _ => return Err(r.err("unknown parameter kind")),
            };
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| r.err("block too large"))?)?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            params.push(ParamBlock {
                name,
                kind,
                shape,
                values,
            });
        }
        let state = match r.u8()? {
            0 => None,
            1 => {
                let (epoch, s0, s1, steps) = (r.u64()?, r.u64()?, r.u64()?, r.u64()?);
                let count = r.u32()? as usize;
                let mut moments = Vec::with_capacity(count.min(4096));
                for _ in 0..count {
                    let name = r.string()?;
                    let n = r.u32()? as usize;
                    let read = |r: &mut Reader| (0..n).map(|_| r.u64().map(f64::from_bits)).collect::<Result<Vec<_>>>();
                    let first = read(&mut r)?;
                    let second = read(&mut r)?;
                    moments.push(MomentBlock { name, first, second });
                }
                let count = r.u32()? as usize;
                let mut aux = Vec::with_capacity(count.min(4096));
                for _ in 0..count {
                    let name = r.string()?;
                    let n = r.u32()? as usize;
                    let vals = (0..n).map(|_| r.u64().map(f64::from_bits)).collect::<Result<Vec<_>>>()?;
                    aux.push((name, vals));
                }
                Some(TrainingState {
                    epoch,
                    rng: (s0, s1),
                    optimizer_steps: steps,
                    moments,
                    aux,
                })
            }
            _ => return Err(r.err("bad training-state flag")),
        };
        if r.pos != bytes.len() {
            return Err(r.err("trailing bytes"));
        }
        Ok(Self { stage, params, state })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: &str) -> Error {
        Error::Checkpoint {
            path: self.path.to_path_buf(),
            msg: format!("{msg} (at byte {})", self.pos),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err("truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.err("parameter name is not UTF-8"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a.w", Tensor::new(vec![2, 2], vec![0.1, -2.5, 3.0, 1e-7]).unwrap(), ParamKind::Weight)
            .unwrap();
        s.add("a.rm", Tensor::vector(vec![0.3]), ParamKind::Buffer).unwrap();
        s
    }

    #[test]
    fn round_trip_after_snap_is_exact() {
        let mut s = store();
        s.snap_to_f32();
        let ck = Checkpoint::capture(Stage::Stage2, &s);
        let back = Checkpoint::from_bytes(&ck.to_bytes(), Path::new("x")).unwrap();
        assert_eq!(ck, back);
        let mut t = store();
        t.get_mut(t.id("a.w").unwrap()).tensor.data_mut().fill(9.0);
        back.apply(&mut t).unwrap();
        assert_eq!(s.hash_prefix(""), t.hash_prefix(""));
    }

    #[test]
    fn training_state_round_trips() {
        let mut s = store();
        let mut g = crate::tensor::Graph::new();
        let w = g.param(&s, s.id("a.w").unwrap());
        let l = g.sum(w);
        g.backward(l).unwrap();
        s.absorb(&mut g);
        let mut opt = AdamW::new(1e-3, 0.01);
        opt.step(&mut s).unwrap();
        let rng = Rng::from_state(7, 41);
        let mut ck = Checkpoint::capture(Stage::Stage1, &s).with_state(&s, &opt, &rng, 3);
        ck.state.as_mut().unwrap().aux.push(("warm.0".into(), vec![1.5, -0.25]));
        let back = Checkpoint::from_bytes(&ck.to_bytes(), Path::new("x")).unwrap();
        assert_eq!(ck, back);
        let mut opt2 = AdamW::new(1e-3, 0.01);
        let (epoch, r) = back.restore_training(&s, &mut opt2).unwrap().unwrap();
        assert_eq!((epoch, r.state()), (3, (7, 41)));
        assert_eq!(opt, opt2);
    }

    #[test]
    fn rejects_bad_input() {
        let p = Path::new("ck");
        let mut bytes = Checkpoint::capture(Stage::Stage1, &store()).to_bytes();
        assert!(Checkpoint::from_bytes(b"XXXX", p).is_err());
        bytes[4] = 9;
        let e = Checkpoint::from_bytes(&bytes, p).unwrap_err();
        assert!(e.to_string().contains("version"), "{e}");
        let good = Checkpoint::capture(Stage::Stage1, &store()).to_bytes();
        assert!(Checkpoint::from_bytes(&good[..good.len() - 3], p).is_err());
    }

    #[test]
    fn apply_rejects_unknown_and_misshapen() {
        let ck = Checkpoint::capture(Stage::Stage1, &store());
        let mut other = ParamStore::new();
        assert!(matches!(ck.apply(&mut other), Err(Error::UnknownParameter(_))));
        other.add("a.w", Tensor::zeros(&[4]), ParamKind::Weight).unwrap();
        assert!(ck.apply(&mut other).is_err());
    }
}
