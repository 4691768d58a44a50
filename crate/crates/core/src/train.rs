//! Optimizer bookkeeping shared by every training loop: the learning-rate
//! schedule, AdamW state persistence and the per-step run log.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use indexmap::IndexMap;
use lesion_tensor::{AdamW, AdamWConfig, Archive, LrSchedule, Moments, ParamStore, Tensor};

use crate::error::{io_err, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub weight_decay: f32,
    pub batch: usize,
}

impl OptimConfig {
    pub fn schedule(&self) -> Result<LrSchedule> {
        Ok(LrSchedule::new(self.lr, self.warmup_steps, self.total_steps)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub wall_secs: f64,
}

/// Per-step training record, serialized as `step,loss,lr,wall_secs`.
#[derive(Clone, Debug, Default)]
pub struct RunLog {
    pub rows: Vec<LogRow>,
}

impl RunLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,lr,wall_secs\n");
        for r in &self.rows {
            writeln!(s, "{},{:e},{:e},{:.3}", r.step, r.loss, r.lr, r.wall_secs).unwrap();
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Contract(format!("run log line {}: `{line}`", i + 1));
            if f.len() != 4 {
                return Err(bad());
            }
            rows.push(LogRow {
                step: f[0].parse().map_err(|_| bad())?,
                loss: f[1].parse().map_err(|_| bad())?,
                lr: f[2].parse().map_err(|_| bad())?,
                wall_secs: f[3].parse().map_err(|_| bad())?,
            });
        }
        Ok(Self { rows })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(io_err(path))?)
    }

    /// Mean loss over rows `[from, to)`.
    pub fn window_mean(&self, from: usize, to: usize) -> f64 {
        let w = &self.rows[from.min(self.rows.len())..to.min(self.rows.len())];
        w.iter().map(|r| r.loss).sum::<f64>() / w.len().max(1) as f64
    }
}

/// AdamW plus schedule and step counter. `step` is the number of updates
/// already applied; the next update uses `lr_at(step)`.
pub struct Trainer {
    pub opt: AdamW,
    pub schedule: LrSchedule,
    pub log: RunLog,
    started: Instant,
    offset_secs: f64,
}

impl Trainer {
    pub fn new(cfg: &OptimConfig) -> Result<Self> {
        Ok(Self {
            opt: AdamW::new(AdamWConfig {
                weight_decay: cfg.weight_decay,
                ..AdamWConfig::default()
            }),
            schedule: cfg.schedule()?,
            log: RunLog::default(),
            started: Instant::now(),
            offset_secs: 0.0,
        })
    }

    pub fn step(&self) -> u64 {
        self.opt.state.step
    }

    pub fn done(&self) -> bool {
        self.step() >= self.schedule.total_steps()
    }

    pub fn lr(&self) -> Result<f64> {
        Ok(self.schedule.lr_at(self.step())?)
    }

    /// Apply one update and log `loss`.
    pub fn apply(
        &mut self,
        params: &mut ParamStore,
        grads: &IndexMap<String, Tensor>,
        loss: f64,
    ) -> Result<()> {
        let step = self.step();
        let lr = self.lr()?;
        self.opt.step(params, grads, lr as f32)?;
        self.log.rows.push(LogRow {
            step,
            loss,
            lr,
            wall_secs: self.offset_secs + self.started.elapsed().as_secs_f64(),
        });
        Ok(())
    }

    /// Record a skipped update (no gradient); the step counter still advances.
    pub fn skip(&mut self, loss: f64) -> Result<()> {
        let lr = self.lr()?;
        self.log.rows.push(LogRow {
            step: self.step(),
            loss,
            lr,
            wall_secs: self.offset_secs + self.started.elapsed().as_secs_f64(),
        });
        self.opt.state.step += 1;
        Ok(())
    }

    /// Store moments and the step counter under `opt.*`.
    pub fn save_into(&self, archive: &mut Archive) {
        archive.insert("opt.step", Tensor::scalar(self.step() as f32));
        for (name, m) in &self.opt.state.moments {
            archive.insert(format!("opt.m.{name}"), m.m.clone());
            archive.insert(format!("opt.v.{name}"), m.v.clone());
        }
    }

    /// Restore state written by [`Trainer::save_into`] and truncate `log` to it.
    pub fn restore(&mut self, archive: &Archive, log: RunLog) -> Result<()> {
        let step = archive.scalar("opt.step")? as u64;
        self.opt.state.step = step;
        self.opt.state.moments.clear();
        for (key, m) in &archive.entries {
            if let Some(name) = key.strip_prefix("opt.m.") {
                let v = archive.get(&format!("opt.v.{name}"))?;
                self.opt.state.moments.insert(
                    name.to_string(),
                    Moments {
                        m: m.clone(),
                        v: v.clone(),
                    },
                );
            }
        }
        self.log = log;
        self.log.rows.retain(|r| r.step < step);
        self.offset_secs = self.log.rows.last().map_or(0.0, |r| r.wall_secs);
        self.started = Instant::now();
        Ok(())
    }
}

/// Copy every entry of `params` into `archive` unchanged.
pub fn params_into(params: &ParamStore, archive: &mut Archive) {
    for (k, v) in params.iter() {
        archive.insert(k, v.clone());
    }
}

/// Every archive entry whose name starts with `prefix`.
pub fn params_from(archive: &Archive, prefix: &str) -> ParamStore {
    let mut store = ParamStore::new();
    for (k, v) in &archive.entries {
        if k.starts_with(prefix) {
            store.insert(k.clone(), v.clone());
        }
    }
    store
}
