//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic            8 bytes  "HMQCKPT\0"
//! version          u32      currently 1
//! kind             u8       0 = float, 1 = quantized
//! arch             string   (u32 length + UTF-8 bytes)
//! input            3 x u32  channels, height, width
//! num_classes      u32
//! params           u32 count, then per parameter:
//!                    name string, kind u8 (0 weight / 1 bias),
//!                    shape (u32 ndim + u32 each), f32 data
//! weight blocks    u32 count, then per block (see below)
//! act blocks       u32 count, same encoding
//! optimizers       u8 count, then per optimizer:
//!                    lr f32, step u64, u32 buffer count,
//!                    per buffer u64 len + f32 m data + f32 v data
//! rng              u64 seed + u128 word position
//! ```
//!
//! Block encoding: name string, max_exponent i32, signed u8, bit-width list
//! (u32 count + u8 each), numel u64, group (u8 flag + u32), pi shape + f32
//! data, temperature f32, mode u8 (0 training / 1 frozen), frozen choice
//! (u8 flag + 2 x u32).

use crate::error::{Error, Result};
use crate::hmq::{HmqMode, HmqState, SearchSpace};
use crate::model::{Arch, HmqBlock, Model, Param, ParamKind, QuantModel};
use crate::optim::{MomentBuffers, RAdam, RAdamConfig};
use crate::rng::RunRng;
use crate::tensor::Tensor;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use std::io::{Cursor, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"HMQCKPT\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    Float,
    Quantized,
}

pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub quant_model: QuantModel,
    pub optimizers: Vec<RAdam>,
    pub rng_seed: u64,
    pub rng_word_pos: u128,
}

fn write_string<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_string<R: Read>(r: &mut R) -> Result<String> {
    let len = r.read_u32::<LittleEndian>()? as usize;
    if len > 1 << 20 {
        return Err(Error::Checkpoint(format!("string length {len} implausible")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Checkpoint(format!("invalid UTF-8: {e}")))
}

fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_u32::<LittleEndian>(t.shape().len() as u32)?;
    for &d in t.shape() {
        w.write_u32::<LittleEndian>(d as u32)?;
    }
    for &v in t.data() {
        w.write_f32::<LittleEndian>(v)?;
    }
    Ok(())
}

fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let ndim = r.read_u32::<LittleEndian>()? as usize;
    if ndim > 8 {
        return Err(Error::Checkpoint(format!("rank {ndim} implausible")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r.read_u32::<LittleEndian>()? as usize);
    }
    let numel: usize = shape.iter().product();
    if numel > 1 << 28 {
        return Err(Error::Checkpoint(format!("tensor with {numel} elements implausible")));
    }
    let mut data = vec![0.0f32; numel];
    for v in data.iter_mut() {
        *v = r.read_f32::<LittleEndian>()?;
    }
    Tensor::new(shape, data)
}

fn write_block<W: Write>(w: &mut W, b: &HmqBlock) -> Result<()> {
    write_string(w, &b.name)?;
    w.write_i32::<LittleEndian>(b.space.max_exponent())?;
    w.write_u8(b.space.signed() as u8)?;
    w.write_u32::<LittleEndian>(b.space.bit_widths().len() as u32)?;
    for &bit in b.space.bit_widths() {
        w.write_u8(bit)?;
    }
    w.write_u64::<LittleEndian>(b.numel as u64)?;
    match b.group {
        Some(g) => {
            w.write_u8(1)?;
            w.write_u32::<LittleEndian>(g as u32)?;
        }
        None => {
            w.write_u8(0)?;
            w.write_u32::<LittleEndian>(0)?;
        }
    }
    write_tensor(w, &b.state.pi)?;
    w.write_f32::<LittleEndian>(b.state.temperature)?;
    w.write_u8(match b.state.mode {
        HmqMode::Training => 0,
        HmqMode::Frozen => 1,
    })?;
    match b.state.frozen_choice {
        Some((ti, bi)) => {
            w.write_u8(1)?;
            w.write_u32::<LittleEndian>(ti as u32)?;
            w.write_u32::<LittleEndian>(bi as u32)?;
        }
        None => {
            w.write_u8(0)?;
            w.write_u32::<LittleEndian>(0)?;
            w.write_u32::<LittleEndian>(0)?;
        }
    }
    Ok(())
}

fn read_block<R: Read>(r: &mut R) -> Result<HmqBlock> {
    let name = read_string(r)?;
    let max_exponent = r.read_i32::<LittleEndian>()?;
    let signed = r.read_u8()? != 0;
    let bit_count = r.read_u32::<LittleEndian>()? as usize;
    if bit_count > 8 {
        return Err(Error::Checkpoint(format!("{bit_count} bit-widths implausible")));
    }
    let mut bits = Vec::with_capacity(bit_count);
    for _ in 0..bit_count {
        bits.push(r.read_u8()?);
    }
    let space = SearchSpace::new(max_exponent, &bits, signed)
        .map_err(|e| Error::Checkpoint(format!("block {name}: {e}")))?;
    let numel = r.read_u64::<LittleEndian>()? as usize;
    let has_group = r.read_u8()? != 0;
    let group_val = r.read_u32::<LittleEndian>()? as usize;
    let group = has_group.then_some(group_val);
    let pi = read_tensor(r)?.with_grad();
    if pi.numel() != space.len() {
        return Err(Error::Checkpoint(format!(
            "block {name}: pi has {} entries for a {}-scheme space",
            pi.numel(),
            space.len()
        )));
    }
    let temperature = r.read_f32::<LittleEndian>()?;
    let mode = match r.read_u8()? {
        0 => HmqMode::Training,
        1 => HmqMode::Frozen,
        m => return Err(Error::Checkpoint(format!("unknown block mode {m}"))),
    };
    let has_choice = r.read_u8()? != 0;
    let ti = r.read_u32::<LittleEndian>()? as usize;
    let bi = r.read_u32::<LittleEndian>()? as usize;
    let frozen_choice = has_choice.then_some((ti, bi));
    let k = space.len();
    Ok(HmqBlock {
        name,
        space,
        state: HmqState {
            pi,
            gumbel: vec![0.0; k],
            temperature,
            mode,
            frozen_choice,
        },
        numel,
        group,
    })
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    let w = &mut buf;
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u8(match ckpt.kind {
        CheckpointKind::Float => 0,
        CheckpointKind::Quantized => 1,
    })?;
    let model = &ckpt.quant_model.model;
    write_string(w, model.arch.name())?;
    w.write_u32::<LittleEndian>(model.input.0 as u32)?;
    w.write_u32::<LittleEndian>(model.input.1 as u32)?;
    w.write_u32::<LittleEndian>(model.input.2 as u32)?;
    w.write_u32::<LittleEndian>(model.num_classes as u32)?;
    w.write_u32::<LittleEndian>(model.params.len() as u32)?;
    for p in &model.params {
        write_string(w, &p.name)?;
        w.write_u8(match p.kind {
            ParamKind::Weight => 0,
            ParamKind::Bias => 1,
        })?;
        write_tensor(w, &p.tensor)?;
    }
    w.write_u32::<LittleEndian>(ckpt.quant_model.weight_hmqs.len() as u32)?;
    for b in &ckpt.quant_model.weight_hmqs {
        write_block(w, b)?;
    }
    w.write_u32::<LittleEndian>(ckpt.quant_model.act_hmqs.len() as u32)?;
    for b in &ckpt.quant_model.act_hmqs {
        write_block(w, b)?;
    }
    w.write_u8(ckpt.optimizers.len() as u8)?;
    for opt in &ckpt.optimizers {
        w.write_f32::<LittleEndian>(opt.config.learning_rate)?;
        w.write_u64::<LittleEndian>(opt.step_count)?;
        w.write_u32::<LittleEndian>(opt.buffers.len() as u32)?;
        for buf in &opt.buffers {
            w.write_u64::<LittleEndian>(buf.m.len() as u64)?;
            for &v in &buf.m {
                w.write_f32::<LittleEndian>(v)?;
            }
            for &v in &buf.v {
                w.write_f32::<LittleEndian>(v)?;
            }
        }
    }
    w.write_u64::<LittleEndian>(ckpt.rng_seed)?;
    w.write_u128::<LittleEndian>(ckpt.rng_word_pos)?;
    std::fs::write(path, &buf)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    let mut r = Cursor::new(bytes.as_slice());
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let kind = match r.read_u8()? {
        0 => CheckpointKind::Float,
        1 => CheckpointKind::Quantized,
        k => return Err(Error::Checkpoint(format!("unknown checkpoint kind {k}"))),
    };
    let arch = Arch::parse(&read_string(&mut r)?)?;
    let input = (
        r.read_u32::<LittleEndian>()? as usize,
        r.read_u32::<LittleEndian>()? as usize,
        r.read_u32::<LittleEndian>()? as usize,
    );
    let num_classes = r.read_u32::<LittleEndian>()? as usize;

    // rebuild the layer topology, then overwrite every parameter
    let mut scratch = RunRng::new(0);
    let mut model: Model = crate::model::build_model(arch, input, num_classes, &mut scratch);
    let param_count = r.read_u32::<LittleEndian>()? as usize;
    if param_count != model.params.len() {
        return Err(Error::Checkpoint(format!(
            "{param_count} parameters stored, architecture {} has {}",
            arch.name(),
            model.params.len()
        )));
    }
    for p in model.params.iter_mut() {
        let name = read_string(&mut r)?;
        let kind = match r.read_u8()? {
            0 => ParamKind::Weight,
            1 => ParamKind::Bias,
            k => return Err(Error::Checkpoint(format!("unknown parameter kind {k}"))),
        };
        let tensor = read_tensor(&mut r)?.with_grad();
        if name != p.name || kind != p.kind || tensor.shape() != p.tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter mismatch: stored {name} {:?}, expected {} {:?}",
                tensor.shape(),
                p.name,
                p.tensor.shape()
            )));
        }
        *p = Param { name, kind, tensor };
    }
    let weight_block_count = r.read_u32::<LittleEndian>()? as usize;
    let mut weight_hmqs = Vec::with_capacity(weight_block_count);
    for _ in 0..weight_block_count {
        weight_hmqs.push(read_block(&mut r)?);
    }
    let act_block_count = r.read_u32::<LittleEndian>()? as usize;
    let mut act_hmqs = Vec::with_capacity(act_block_count);
    for _ in 0..act_block_count {
        act_hmqs.push(read_block(&mut r)?);
    }
    let opt_count = r.read_u8()? as usize;
    let mut optimizers = Vec::with_capacity(opt_count);
    for _ in 0..opt_count {
        let lr = r.read_f32::<LittleEndian>()?;
        let step_count = r.read_u64::<LittleEndian>()?;
        let buf_count = r.read_u32::<LittleEndian>()? as usize;
        let mut buffers = Vec::with_capacity(buf_count);
        for _ in 0..buf_count {
            let len = r.read_u64::<LittleEndian>()? as usize;
            if len > 1 << 28 {
                return Err(Error::Checkpoint(format!("moment buffer of {len} implausible")));
            }
            let mut m = vec![0.0f32; len];
            for v in m.iter_mut() {
                *v = r.read_f32::<LittleEndian>()?;
            }
            let mut vbuf = vec![0.0f32; len];
            for v in vbuf.iter_mut() {
                *v = r.read_f32::<LittleEndian>()?;
            }
            buffers.push(MomentBuffers { m, v: vbuf });
        }
        let mut opt = RAdam::new(RAdamConfig::with_lr(lr), &[]);
        opt.step_count = step_count;
        opt.buffers = buffers;
        optimizers.push(opt);
    }
    let rng_seed = r.read_u64::<LittleEndian>()?;
    let rng_word_pos = r.read_u128::<LittleEndian>()?;
    if (r.position() as usize) != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after checkpoint payload",
            bytes.len() - r.position() as usize
        )));
    }
    Ok(Checkpoint {
        kind,
        quant_model: QuantModel {
            model,
            weight_hmqs,
            act_hmqs,
        },
        optimizers,
        rng_seed,
        rng_word_pos,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{attach_hmqs, build_model};

    #[test]
    fn roundtrip_preserves_everything() {
        let mut rng = RunRng::new(3);
        let model = build_model(Arch::Mlp2, (1, 8, 8), 10, &mut rng);
        let calib = vec![1.5f32; model.act_slots.len()];
        let qm = attach_hmqs(model, &[2, 4, 8], &calib, 1 << 16).unwrap();
        let opt = RAdam::new(RAdamConfig::with_lr(0.01), &qm.model.param_sizes());
        let ckpt = Checkpoint {
            kind: CheckpointKind::Quantized,
            quant_model: qm,
            optimizers: vec![opt],
            rng_seed: 3,
            rng_word_pos: rng.word_pos(),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        save(&path, &ckpt).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.kind, CheckpointKind::Quantized);
        assert_eq!(loaded.quant_model.model.params.len(), ckpt.quant_model.model.params.len());
        for (a, b) in loaded.quant_model.model.params.iter().zip(&ckpt.quant_model.model.params) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.tensor.data(), b.tensor.data());
        }
        for (a, b) in loaded.quant_model.weight_hmqs.iter().zip(&ckpt.quant_model.weight_hmqs) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.space, b.space);
            assert_eq!(a.state.pi.data(), b.state.pi.data());
            assert_eq!(a.state.mode, b.state.mode);
        }
        assert_eq!(loaded.rng_seed, 3);
        assert_eq!(loaded.rng_word_pos, ckpt.rng_word_pos);

        // identical second save is byte-identical
        let path2 = dir.path().join("b.ckpt");
        save(&path2, &loaded).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn rejects_corrupt_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOTACKPTxxxxxxxxxxx").unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(_))));
    }
}
