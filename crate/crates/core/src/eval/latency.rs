use std::hint::black_box;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::env::EnvState;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::ConditionedMlp;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HardwareInfo {
    pub cpu_model: String,
    pub logical_cpus: usize,
    pub os: String,
    pub arch: String,
}

impl HardwareInfo {
    pub fn describe(&self) -> String {
        format!(
            "{} ({} logical cpus, {}/{})",
            self.cpu_model, self.logical_cpus, self.os, self.arch
        )
    }
}

pub fn hardware_manifest() -> HardwareInfo {
    let cpu_model = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|v| v.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".to_string());
    HardwareInfo {
        cpu_model,
        logical_cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
        os: std::env::consts::OS.to_string(),
        arch: std::env::consts::ARCH.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub trials: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub max_ms: f64,
    pub hardware: HardwareInfo,
}

/// Times batch-1 action selection for agent 0 of `env`: observation
/// packing, the policy forward and the argmax. Runs on the calling thread.
pub fn latency_benchmark(
    policy: &ConditionedMlp,
    cond: &[f64],
    env: &EnvState,
    trials: usize,
    warmup: usize,
) -> Result<LatencyStats> {
    if trials == 0 {
        return Err(Error::Parameter("latency benchmark needs trials > 0".into()));
    }
    let cond = Matrix::from_vec(1, cond.len(), cond.to_vec())?;
    let mut obs = Matrix::zeros(1, env.obs_dim());
    let once = |obs: &mut Matrix| -> Result<usize> {
        env.observe_into(0, obs.row_mut(0));
        let logits = policy.forward(black_box(obs), &cond, &[0])?;
        let row = logits.row(0);
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        Ok(best)
    };
    for _ in 0..warmup {
        black_box(once(&mut obs)?);
    }
    let mut ms = Vec::with_capacity(trials);
    for _ in 0..trials {
        let t = Instant::now();
        black_box(once(&mut obs)?);
        ms.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let mean_ms = ms.iter().sum::<f64>() / trials as f64;
    ms.sort_by(f64::total_cmp);
    let pct = |q: f64| ms[((q * trials as f64).ceil() as usize).clamp(1, trials) - 1];
    Ok(LatencyStats {
        trials,
        mean_ms,
        p50_ms: pct(0.5),
        p95_ms: pct(0.95),
        max_ms: ms[trials - 1],
        hardware: hardware_manifest(),
    })
}
