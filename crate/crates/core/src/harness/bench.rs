use std::time::Instant;

use serde::{Deserialize, Serialize};

/// Runs `f` `repeats` times and returns the wall time of each run in seconds.
pub fn time_repeats<T, E>(repeats: usize, mut f: impl FnMut() -> Result<T, E>) -> Result<Vec<f64>, E> {
    (0..repeats)
        .map(|_| {
            let start = Instant::now();
            f()?;
            Ok(start.elapsed().as_secs_f64())
        })
        .collect()
}

pub fn median(samples: &[f64]) -> f64 {
    if samples.is_empty() {
        return f64::NAN;
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub scene: String,
    pub stage: String,
    pub samples: Vec<f64>,
    pub median: f64,
}

impl BenchRow {
    pub fn new(scene: &str, stage: &str, samples: Vec<f64>) -> Self {
        Self { scene: scene.into(), stage: stage.into(), median: median(&samples), samples }
    }
}

/// Machine the timings were taken on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub os: String,
    pub arch: String,
    pub cpus: usize,
    pub cpu_model: String,
    pub crate_version: String,
}

impl Fingerprint {
    pub fn current() -> Self {
        let cpu_model = std::fs::read_to_string("/proc/cpuinfo")
            .ok()
            .and_then(|s| s.lines().find(|l| l.starts_with("model name")).and_then(|l| l.split(':').nth(1)).map(|v| v.trim().to_string()))
            .unwrap_or_else(|| "unknown".into());
        Self {
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
            cpu_model,
            crate_version: env!("CARGO_PKG_VERSION").into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub fingerprint: Fingerprint,
    pub rows: Vec<BenchRow>,
    /// Median FastMNMF time over median neural inference time, over all scenes.
    pub speedup: f64,
}

impl BenchReport {
    pub fn stage_median(&self, stage: &str) -> f64 {
        let all: Vec<f64> = self.rows.iter().filter(|r| r.stage == stage).flat_map(|r| r.samples.iter().copied()).collect();
        median(&all)
    }

    /// Fingerprint as `#` comment lines, then one tab-separated row per
    /// (scene, stage) with the median and the individual samples.
    pub fn to_tsv(&self) -> String {
        let f = &self.fingerprint;
        let mut out = format!(
            "# os: {}\n# arch: {}\n# cpus: {}\n# cpu_model: {}\n# version: {}\n# speedup: {:.3}\nscene\tstage\trepeats\tmedian_s\tsamples_s\n",
            f.os, f.arch, f.cpus, f.cpu_model, f.crate_version, self.speedup
        );
        for r in &self.rows {
            let samples: Vec<String> = r.samples.iter().map(|s| format!("{s:.6}")).collect();
            out.push_str(&format!("{}\t{}\t{}\t{:.6}\t{}\n", r.scene, r.stage, r.samples.len(), r.median, samples.join(",")));
        }
        out
    }
}
