//! Ensemble export: columnar CSV and a compact binary cache.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::problem::{ControlSpace, JumpMeasure, MarkDistribution};
use crate::sim::{EnsembleMode, JumpTrajectory, PathEnsemble, SimError, SimResult, TimeGrid};
use crate::summary::PathSummarySpec;

pub const ENSEMBLE_MAGIC: &[u8; 16] = b"RBSDE-ENS-v1\0\0\0\0";

const FLAG_JUMPS: u32 = 1;
const FLAG_SUMMARIES: u32 = 2;

impl PathEnsemble {
    /// One row per (path, node): path_id, t, x1..xn, action, jump_flag.
    pub fn write_csv<W: Write>(&self, w: W) -> SimResult<()> {
        self.write_csv_head(w, self.n_paths)
    }

    /// Same layout as [`PathEnsemble::write_csv`], limited to the first `n` paths.
    pub fn write_csv_head<W: Write>(&self, mut w: W, n: usize) -> SimResult<()> {
        write!(w, "path_id,t")?;
        for i in 0..self.dim_state {
            write!(w, ",x{}", i + 1)?;
        }
        writeln!(w, ",action,jump_flag")?;
        for p in 0..n.min(self.n_paths) {
            for k in 0..=self.grid.n_steps() {
                write!(w, "{},{}", p, self.grid.time(k))?;
                for x in self.state(p, k) {
                    write!(w, ",{x}")?;
                }
                writeln!(w, ",{},{}", self.control(p, k), u8::from(self.jump_flag(p, k)))?;
            }
        }
        Ok(())
    }

    pub fn write_binary<W: Write>(&self, mut w: W) -> SimResult<()> {
        w.write_all(ENSEMBLE_MAGIC)?;
        let mut flags = 0;
        if self.jumps.is_some() {
            flags |= FLAG_JUMPS;
        }
        if self.summaries.is_some() {
            flags |= FLAG_SUMMARIES;
        }
        w.write_u64::<LittleEndian>(self.n_paths as u64)?;
        w.write_u64::<LittleEndian>(self.grid.n_steps() as u64)?;
        w.write_u32::<LittleEndian>(self.dim_state as u32)?;
        w.write_u32::<LittleEndian>(self.dim_noise as u32)?;
        w.write_f64::<LittleEndian>(self.grid.t_end())?;
        w.write_u64::<LittleEndian>(self.seed)?;
        w.write_u32::<LittleEndian>(flags)?;
        w.write_u8(match self.mode {
            EnsembleMode::Controlled => 0,
            EnsembleMode::Randomized => 1,
            EnsembleMode::Intensity => 2,
        })?;
        let s = &self.summary_spec;
        w.write_u8(u8::from(s.running_sup))?;
        w.write_u8(u8::from(s.running_mean))?;
        w.write_u32::<LittleEndian>(s.lags.len() as u32)?;
        for &l in &s.lags {
            w.write_u64::<LittleEndian>(l as u64)?;
        }
        write_f64s(&mut w, &self.x0)?;
        write_f64s(&mut w, &self.states)?;
        write_f64s(&mut w, &self.increments)?;
        write_f64s(&mut w, &self.controls)?;
        for &d in &self.divergent {
            w.write_u8(u8::from(d))?;
        }
        if let Some(sm) = &self.summaries {
            write_f64s(&mut w, sm)?;
        }
        match &self.measure {
            None => w.write_u8(0)?,
            Some(m) => {
                w.write_u8(1)?;
                w.write_f64::<LittleEndian>(m.lambda_total())?;
                match m.space() {
                    ControlSpace::Finite { actions, .. } => {
                        w.write_u8(0)?;
                        w.write_u32::<LittleEndian>(actions.len() as u32)?;
                        write_f64s(&mut w, actions)?;
                        match m.marks() {
                            MarkDistribution::Uniform => w.write_u8(0)?,
                            MarkDistribution::Weights(ws) => {
                                w.write_u8(1)?;
                                write_f64s(&mut w, ws)?;
                            }
                        }
                    }
                    ControlSpace::Interval { lo, hi } => {
                        w.write_u8(1)?;
                        w.write_f64::<LittleEndian>(*lo)?;
                        w.write_f64::<LittleEndian>(*hi)?;
                    }
                }
            }
        }
        if let Some(js) = &self.jumps {
            for j in js {
                w.write_f64::<LittleEndian>(j.a0)?;
                w.write_u64::<LittleEndian>(j.times.len() as u64)?;
                write_f64s(&mut w, &j.times)?;
                write_f64s(&mut w, &j.marks)?;
            }
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> SimResult<Self> {
        let mut magic = [0u8; 16];
        r.read_exact(&mut magic)?;
        if &magic != ENSEMBLE_MAGIC {
            return Err(SimError::Format("bad magic header".into()));
        }
        let n_paths = r.read_u64::<LittleEndian>()? as usize;
        let n_steps = r.read_u64::<LittleEndian>()? as usize;
        let n = r.read_u32::<LittleEndian>()? as usize;
        let d = r.read_u32::<LittleEndian>()? as usize;
        let t_end = r.read_f64::<LittleEndian>()?;
        let seed = r.read_u64::<LittleEndian>()?;
        let flags = r.read_u32::<LittleEndian>()?;
        let mode = match r.read_u8()? {
            0 => EnsembleMode::Controlled,
            1 => EnsembleMode::Randomized,
            2 => EnsembleMode::Intensity,
            m => return Err(SimError::Format(format!("unknown mode {m}"))),
        };
        let running_sup = r.read_u8()? != 0;
        let running_mean = r.read_u8()? != 0;
        let n_lags = r.read_u32::<LittleEndian>()? as usize;
        let mut lags = Vec::with_capacity(n_lags);
        for _ in 0..n_lags {
            lags.push(r.read_u64::<LittleEndian>()? as usize);
        }
        let summary_spec = PathSummarySpec { dim_state: n, running_sup, running_mean, lags };
        let grid = TimeGrid::new(t_end, n_steps)?;
        let x0 = read_f64s(&mut r, n)?;
        let states = read_f64s(&mut r, (n_steps + 1) * n_paths * n)?;
        let increments = read_f64s(&mut r, n_steps * n_paths * d)?;
        let controls = read_f64s(&mut r, (n_steps + 1) * n_paths)?;
        let mut divergent = Vec::with_capacity(n_paths);
        for _ in 0..n_paths {
            divergent.push(r.read_u8()? != 0);
        }
        let summaries = if flags & FLAG_SUMMARIES != 0 {
            Some(read_f64s(&mut r, (n_steps + 1) * n_paths * summary_spec.dim())?)
        } else {
            None
        };
        let measure = match r.read_u8()? {
            0 => None,
            _ => {
                let lambda = r.read_f64::<LittleEndian>()?;
                let (space, marks) = match r.read_u8()? {
                    0 => {
                        let m = r.read_u32::<LittleEndian>()? as usize;
                        let actions = read_f64s(&mut r, m)?;
                        let marks = match r.read_u8()? {
                            0 => MarkDistribution::Uniform,
                            _ => MarkDistribution::Weights(read_f64s(&mut r, m)?),
                        };
                        (ControlSpace::finite(actions)?, marks)
                    }
                    _ => {
                        let lo = r.read_f64::<LittleEndian>()?;
                        let hi = r.read_f64::<LittleEndian>()?;
                        (ControlSpace::interval(lo, hi)?, MarkDistribution::Uniform)
                    }
                };
                Some(JumpMeasure::new(space, lambda, marks)?)
            }
        };
        let jumps = if flags & FLAG_JUMPS != 0 {
            let mut js = Vec::with_capacity(n_paths);
            for _ in 0..n_paths {
                let a0 = r.read_f64::<LittleEndian>()?;
                let len = r.read_u64::<LittleEndian>()? as usize;
                let times = read_f64s(&mut r, len)?;
                let marks = read_f64s(&mut r, len)?;
                js.push(JumpTrajectory { a0, times, marks });
            }
            Some(js)
        } else {
            None
        };
        Ok(PathEnsemble {
            grid,
            n_paths,
            dim_state: n,
            dim_noise: d,
            seed,
            mode,
            x0,
            summary_spec,
            measure,
            states,
            increments,
            controls,
            summaries,
            jumps,
            divergent,
        })
    }
}

fn write_f64s<W: Write>(w: &mut W, xs: &[f64]) -> std::io::Result<()> {
    for &x in xs {
        w.write_f64::<LittleEndian>(x)?;
    }
    Ok(())
}

fn read_f64s<R: Read>(r: &mut R, len: usize) -> std::io::Result<Vec<f64>> {
    let mut v = vec![0.0; len];
    r.read_f64_into::<LittleEndian>(&mut v)?;
    Ok(v)
}
