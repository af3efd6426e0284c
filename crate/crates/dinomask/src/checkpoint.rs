//! Binary checkpoint format.
//!
//! Layout: a 64-byte header, the resolved config text, the center block,
//! then name-prefixed little-endian tensor entries (student and teacher
//! parameters plus AdamW moments). Entry order is fixed by the canonical
//! parameter walk, so save -> load -> save is byte-identical.
//!
//! Header (little-endian):
//!   magic "DNMK" | version u32 | config fingerprint u64 | step u64 |
//!   seed u64 | optimizer step u64 | entry count u32 | config length u32 |
//!   center length u32 | 12 reserved zero bytes

use std::fs;
use std::path::Path;

use crate::config::RunConfig;
use crate::distill::{Center, TrainState};
use crate::error::{Error, Result};
use crate::optim::OptimState;
use crate::rng::fnv1a64;
use crate::tensor::{Dtype, Tensor};
use crate::vit::DinoParams;

const MAGIC: &[u8; 4] = b"DNMK";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 64;

fn put_entry(buf: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(Dtype::F32.code());
    buf.push(t.shape().len() as u8);
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes the full training state; see module docs for the layout.
pub fn save_checkpoint(state: &TrainState, cfg: &RunConfig, path: &Path) -> Result<()> {
    let named = state.student.named();
    if named.len() != state.opt.len() {
        return Err(Error::Checkpoint(format!(
            "optimizer state covers {} parameters, model has {}",
            state.opt.len(),
            named.len()
        )));
    }
    let opt_t = state.opt.first().map(|o| o.t).unwrap_or(0);
    if state.opt.iter().any(|o| o.t != opt_t) {
        return Err(Error::Checkpoint(
            "optimizer step counters diverged across parameters".into(),
        ));
    }

    let config_text = cfg.to_text();
    let n_entries = 4 * named.len() as u32;

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&cfg.fingerprint().to_le_bytes());
    buf.extend_from_slice(&state.step.to_le_bytes());
    buf.extend_from_slice(&state.seed.to_le_bytes());
    buf.extend_from_slice(&opt_t.to_le_bytes());
    buf.extend_from_slice(&n_entries.to_le_bytes());
    buf.extend_from_slice(&(config_text.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(state.center.c.len() as u32).to_le_bytes());
    buf.resize(HEADER_LEN, 0);

    buf.extend_from_slice(config_text.as_bytes());
    buf.extend_from_slice(&state.center.momentum.to_le_bytes());
    for v in &state.center.c {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for (name, t) in &named {
        put_entry(&mut buf, &format!("student.{name}"), t);
    }
    for (name, t) in state.teacher.named() {
        put_entry(&mut buf, &format!("teacher.{name}"), &t);
    }
    for ((name, t), opt) in named.iter().zip(&state.opt) {
        let numel = t.numel();
        let m = Tensor::from_vec(opt.m.clone(), vec![numel])?;
        let v = Tensor::from_vec(opt.v.clone(), vec![numel])?;
        put_entry(&mut buf, &format!("opt.{name}.m"), &m);
        put_entry(&mut buf, &format!("opt.{name}.v"), &v);
    }

    fs::write(path, &buf).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Checkpoint(format!(
                "truncated file: wanted {n} bytes at offset {}, have {}",
                self.pos,
                self.data.len()
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
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

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn read_entry(cur: &mut Cursor) -> Result<(String, Tensor<f32>)> {
    let name_len = cur.u16()? as usize;
    let name = std::str::from_utf8(cur.take(name_len)?)
        .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?
        .to_string();
    let dtype = cur.take(1)?[0];
    if dtype != Dtype::F32.code() {
        return Err(Error::Checkpoint(format!(
            "entry {name}: unsupported dtype code {dtype}"
        )));
    }
    let ndim = cur.take(1)?[0] as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(cur.u32()? as usize);
    }
    let numel: usize = shape.iter().product();
    let raw = cur.take(numel * 4)?;
    let data = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Tensor::from_vec(data, shape).map(|t| (name, t))
}

/// Deserializes a checkpoint. The embedded config is returned so callers
/// can decide how to reconcile it with their own settings.
pub fn load_checkpoint(path: &Path) -> Result<(TrainState, RunConfig)> {
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    if data.len() < HEADER_LEN {
        return Err(Error::Checkpoint(format!(
            "{}: file shorter than the {HEADER_LEN}-byte header",
            path.display()
        )));
    }
    let mut cur = Cursor { data: &data, pos: 0 };
    let magic = cur.take(4)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic {magic:02x?}, not a checkpoint",
            path.display()
        )));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: format version {version}, this build reads {VERSION}",
            path.display()
        )));
    }
    let fingerprint = cur.u64()?;
    let step = cur.u64()?;
    let seed = cur.u64()?;
    let opt_t = cur.u64()?;
    let n_entries = cur.u32()? as usize;
    let config_len = cur.u32()? as usize;
    let center_len = cur.u32()? as usize;
    cur.pos = HEADER_LEN;

    let config_text = std::str::from_utf8(cur.take(config_len)?)
        .map_err(|_| Error::Checkpoint("config text is not UTF-8".into()))?
        .to_string();
    if fnv1a64(config_text.as_bytes()) != fingerprint {
        return Err(Error::Checkpoint(
            "config fingerprint does not match embedded config text".into(),
        ));
    }
    let cfg = RunConfig::from_text(&config_text)?;
    cfg.validate()?;

    let momentum = cur.f64()?;
    let mut center = Center::new(center_len, momentum)?;
    for c in center.c.iter_mut() {
        *c = cur.f64()?;
    }

    let mut entries = std::collections::HashMap::new();
    for _ in 0..n_entries {
        let (name, t) = read_entry(&mut cur)?;
        entries.insert(name, t);
    }
    if cur.pos != data.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last entry",
            data.len() - cur.pos
        )));
    }

    let vit_cfg = cfg.vit();
    let mut rng = crate::rng::rng_from_seed(0);
    let mut student = DinoParams::<f32>::init(&vit_cfg, &mut rng)?;
    let mut teacher = student.clone();
    let mut opt = Vec::new();
    let fill = |params: &mut DinoParams<f32>, prefix: &str| -> Result<()> {
        for (name, t) in params.named_mut() {
            let key = format!("{prefix}.{name}");
            let src = entries
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing entry {key}")))?;
            if src.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "entry {key}: stored shape {:?} does not match model {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            t.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    };
    fill(&mut student, "student")?;
    fill(&mut teacher, "teacher")?;
    student.set_requires_grad(true);
    teacher.set_requires_grad(false);

    for (name, t) in student.named() {
        let mut st = OptimState::zeros(t.numel());
        for (field, dst) in [("m", &mut st.m), ("v", &mut st.v)] {
            let key = format!("opt.{name}.{field}");
            let src = entries
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing entry {key}")))?;
            if src.numel() != t.numel() {
                return Err(Error::Checkpoint(format!(
                    "entry {key}: {} values for a {}-element parameter",
                    src.numel(),
                    t.numel()
                )));
            }
            dst.copy_from_slice(src.data());
        }
        st.t = opt_t;
        opt.push(st);
    }

    Ok((
        TrainState {
            student,
            teacher,
            opt,
            center,
            step,
            seed,
        },
        cfg,
    ))
}

/// Model-shape compatibility between a checkpoint's config and the
/// caller's: the architecture and view resolutions must agree; schedule
/// or evaluation keys may differ freely.
pub fn compatible(a: &RunConfig, b: &RunConfig) -> bool {
    a.vit() == b.vit()
}
