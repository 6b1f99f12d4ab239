//! Binary checkpoint: parameters, iteration counter and optimizer state.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2};

use crate::model::EmbeddingParams;
use crate::optimizer::{AdamState, PlateauScheduler};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"TWCKPT\0\x01";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to continue training after iteration `iteration`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    pub params: EmbeddingParams,
    pub iteration: u64,
    /// Overall loss after `iteration` (the starting loss when 0).
    pub last_loss: f64,
    pub adam_step_size: f64,
    pub plateau: Option<PlateauScheduler>,
    /// Per-block Adam moments, rows then columns; empty for Fisher runs.
    pub row_adam: Vec<AdamState>,
    pub col_adam: Vec<AdamState>,
}

fn write_f64s<W: Write>(out: &mut W, xs: impl IntoIterator<Item = f64>) -> std::io::Result<()> {
    xs.into_iter()
        .try_for_each(|x| out.write_f64::<LittleEndian>(x))
}

fn read_f64s<R: Read>(input: &mut R, len: usize) -> std::io::Result<Vec<f64>> {
    let mut v = vec![0.0; len];
    input.read_f64_into::<LittleEndian>(&mut v)?;
    Ok(v)
}

fn invalid(msg: impl Into<String>) -> std::io::Error {
    std::io::Error::new(std::io::ErrorKind::InvalidData, msg.into())
}

impl TrainerState {
    pub fn write<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let p = &self.params;
        let (n, d) = (p.n(), p.dim());
        out.write_all(&CHECKPOINT_MAGIC)?;
        out.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
        out.write_u64::<LittleEndian>(n as u64)?;
        out.write_u64::<LittleEndian>(d as u64)?;
        write_f64s(&mut out, p.w.iter().copied())?;
        write_f64s(&mut out, p.b.iter().copied())?;
        write_f64s(&mut out, p.wt.iter().copied())?;
        write_f64s(&mut out, p.bt.iter().copied())?;
        out.write_u64::<LittleEndian>(self.iteration)?;
        out.write_f64::<LittleEndian>(self.last_loss)?;
        out.write_f64::<LittleEndian>(self.adam_step_size)?;
        match &self.plateau {
            None => out.write_u8(0)?,
            Some(s) => {
                out.write_u8(1)?;
                write_f64s(&mut out, [s.factor, s.threshold, s.best])?;
                out.write_u32::<LittleEndian>(s.patience)?;
                out.write_u32::<LittleEndian>(s.bad_iterations)?;
            }
        }
        let has_adam = !self.row_adam.is_empty();
        out.write_u8(has_adam as u8)?;
        if has_adam {
            for st in self.row_adam.iter().chain(&self.col_adam) {
                out.write_u64::<LittleEndian>(st.t)?;
                write_f64s(&mut out, st.m.iter().copied())?;
                write_f64s(&mut out, st.v.iter().copied())?;
            }
        }
        out.flush()
    }

    pub fn read<R: Read>(mut input: R) -> std::io::Result<Self> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(invalid("not a checkpoint file"));
        }
        let version = input.read_u32::<LittleEndian>()?;
        if version != CHECKPOINT_VERSION {
            return Err(invalid(format!("unsupported checkpoint version {version}")));
        }
        let n = input.read_u64::<LittleEndian>()? as usize;
        let d = input.read_u64::<LittleEndian>()? as usize;
        if n == 0 || n.checked_mul(d.max(1)).is_none_or(|c| c > 1 << 34) {
            return Err(invalid(format!("implausible shape {n} x {d}")));
        }
        let w = Array2::from_shape_vec((n, d), read_f64s(&mut input, n * d)?)
            .map_err(|e| invalid(e.to_string()))?;
        let b = Array1::from(read_f64s(&mut input, n)?);
        let wt = Array2::from_shape_vec((n, d), read_f64s(&mut input, n * d)?)
            .map_err(|e| invalid(e.to_string()))?;
        let bt = Array1::from(read_f64s(&mut input, n)?);
        let params = EmbeddingParams::new(w, b, wt, bt).map_err(|e| invalid(e.to_string()))?;
        let iteration = input.read_u64::<LittleEndian>()?;
        let last_loss = input.read_f64::<LittleEndian>()?;
        let adam_step_size = input.read_f64::<LittleEndian>()?;
        let plateau = match input.read_u8()? {
            0 => None,
            1 => {
                let f = read_f64s(&mut input, 3)?;
                let mut s = PlateauScheduler::new(f[0], input.read_u32::<LittleEndian>()?);
                s.threshold = f[1];
                s.best = f[2];
                s.bad_iterations = input.read_u32::<LittleEndian>()?;
                Some(s)
            }
            x => return Err(invalid(format!("bad plateau flag {x}"))),
        };
        let (mut row_adam, mut col_adam) = (Vec::new(), Vec::new());
        match input.read_u8()? {
            0 => {}
            1 => {
                for k in 0..2 * n {
                    let t = input.read_u64::<LittleEndian>()?;
                    let m = Array1::from(read_f64s(&mut input, d + 1)?);
                    let v = Array1::from(read_f64s(&mut input, d + 1)?);
                    let st = AdamState { m, v, t };
                    if k < n {
                        row_adam.push(st);
                    } else {
                        col_adam.push(st);
                    }
                }
            }
            x => return Err(invalid(format!("bad optimizer flag {x}"))),
        }
        Ok(Self {
            params,
            iteration,
            last_loss,
            adam_step_size,
            plateau,
            row_adam,
            col_adam,
        })
    }
}
