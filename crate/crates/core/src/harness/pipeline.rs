use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::bench::{time_repeats, BenchReport, BenchRow, Fingerprint};
use super::config::{Method, RunConfig};
use super::metrics::{evaluate_scene, EvalReport};
use super::{At, AtPath, HarnessError};
use crate::dsp::{istft_padded, stft_padded, wav_read, wav_write, ComplexSpectrogram, MultichannelWave};
use crate::fastmnmf::{fastmnmf_fit, fastmnmf_init, fastmnmf_separate};
use crate::neural::{infer, neural_separate, train, MetricRecord, NeuralModel, TrainReport};
use crate::scenesim::{generate_scene, scene_seed};

pub const MANIFEST: &str = "manifest.jsonl";
pub const ESTIMATES: &str = "estimates.jsonl";
pub const RESOLVED_CONFIG: &str = "config.resolved.toml";
pub const CHECKPOINT: &str = "model.ffca";
pub const METRICS: &str = "metrics.jsonl";
pub const TIMING: &str = "timing.tsv";
pub const REPORT: &str = "report.tsv";
pub const BENCH: &str = "bench.tsv";

/// Index offset of held-out scene seeds, so the test set does not move when
/// the training set grows.
const TEST_INDEX_BASE: u64 = 1 << 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One dataset scene. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub split: Split,
    pub seed: u64,
    pub mixture: String,
    /// Multichannel reverberant image of each source.
    pub references: Vec<String>,
    /// Scene description as JSON.
    pub metadata: String,
}

/// Estimates for one scene, relative to the estimates directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub id: String,
    pub estimates: Vec<String>,
}

fn create_dir(dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).at_path(dir)
}

fn write_text(path: &Path, text: &str) -> Result<(), HarnessError> {
    fs::write(path, text).at_path(path)
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), HarnessError> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).expect("record serializes"));
        text.push('\n');
    }
    write_text(path, &text)
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, HarnessError> {
    let text = fs::read_to_string(path).at_path(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| HarnessError::Format(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

pub fn write_resolved_config(cfg: &RunConfig, out: &Path) -> Result<(), HarnessError> {
    write_text(&out.join(RESOLVED_CONFIG), &cfg.to_toml())
}

/// Renders `dataset.train` training and `dataset.test` held-out scenes into
/// `out`, with a manifest and the resolved configuration.
pub fn simulate(cfg: &RunConfig, out: &Path) -> Result<Vec<ManifestRecord>, HarnessError> {
    create_dir(out)?;
    write_resolved_config(cfg, out)?;
    let plan = (0..cfg.dataset.train)
        .map(|i| (Split::Train, format!("train-{i:05}"), i as u64))
        .chain((0..cfg.dataset.test).map(|i| (Split::Test, format!("test-{i:05}"), TEST_INDEX_BASE + i as u64)));
    let mut records = Vec::new();
    for (split, id, index) in plan {
        let seed = scene_seed(cfg.scene.seed, index);
        let scene = generate_scene(&cfg.scene, seed).at("simulate")?;
        let rel = format!("scenes/{id}");
        create_dir(&out.join(&rel))?;
        let mixture = format!("{rel}/mixture.wav");
        wav_write(out.join(&mixture), &scene.mixture).at("simulate")?;
        let mut references = Vec::new();
        for (k, img) in scene.images.iter().enumerate() {
            let p = format!("{rel}/source{k}.wav");
            wav_write(out.join(&p), img).at("simulate")?;
            references.push(p);
        }
        let metadata = format!("{rel}/scene.json");
        let meta = scene.metadata(&id, seed, &cfg.scene);
        write_text(&out.join(&metadata), &(serde_json::to_string_pretty(&meta).expect("metadata serializes") + "\n"))?;
        records.push(ManifestRecord { id, split, seed, mixture, references, metadata });
    }
    write_jsonl(&out.join(MANIFEST), &records)?;
    Ok(records)
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestRecord>, HarnessError> {
    read_jsonl(path)
}

fn load_spectrograms(cfg: &RunConfig, manifest: &Path, split: Split) -> Result<Vec<(ManifestRecord, MultichannelWave, ComplexSpectrogram)>, HarnessError> {
    let dir = base_dir(manifest);
    let mut out = Vec::new();
    for r in load_manifest(manifest)?.into_iter().filter(|r| r.split == split) {
        let wave = wav_read(dir.join(&r.mixture)).at("load")?;
        if wave.num_channels() != cfg.scene.mics {
            return Err(HarnessError::Config(format!(
                "scene {} has {} channels, configuration expects {}",
                r.id,
                wave.num_channels(),
                cfg.scene.mics
            )));
        }
        let spec = stft_padded(&wave, cfg.stft).at("stft")?;
        out.push((r, wave, spec));
    }
    if out.is_empty() {
        return Err(HarnessError::EmptyInput(format!("no {split:?} scenes in {}", manifest.display()).to_lowercase()));
    }
    Ok(out)
}

/// Trains a freshly initialized network on the manifest's training split.
/// Writes the checkpoint, the per-step metrics (no timings) and the
/// per-step wall clock to `out`.
pub fn train_pipeline(
    cfg: &RunConfig,
    manifest: &Path,
    out: &Path,
    mut on_step: impl FnMut(&MetricRecord),
) -> Result<TrainReport, HarnessError> {
    create_dir(out)?;
    write_resolved_config(cfg, out)?;
    let data: Vec<ComplexSpectrogram> = load_spectrograms(cfg, manifest, Split::Train)?.into_iter().map(|(_, _, s)| s).collect();
    let mut model = NeuralModel::new(cfg.neural(), cfg.train.seed).at("train")?;
    let metrics_path = out.join(METRICS);
    let mut log = BufWriter::new(fs::File::create(&metrics_path).at_path(&metrics_path)?);
    let mut io_error = None;
    let report = train(&mut model, &data, &cfg.train, |rec, _| {
        let line = serde_json::to_string(rec).expect("record serializes");
        if let Err(e) = writeln!(log, "{line}") {
            io_error.get_or_insert(e);
        }
        on_step(rec);
    });
    let flushed = log.flush();
    if let Some(e) = io_error {
        return Err::<TrainReport, _>(e).at_path(&metrics_path);
    }
    flushed.at_path(&metrics_path)?;
    let report = report.at("train")?;
    model.save(out.join(CHECKPOINT)).at("train")?;
    let mut timing = String::from("step\twall_s\n");
    for (r, t) in report.metrics.iter().zip(&report.wall_seconds) {
        timing.push_str(&format!("{}\t{t:.6}\n", r.step));
    }
    write_text(&out.join(TIMING), &timing)?;
    Ok(report)
}

/// Separates every held-out scene with the configured method and writes one
/// mono WAV per estimated source at the reference microphone.
pub fn separate_pipeline(cfg: &RunConfig, manifest: &Path, checkpoint: Option<&Path>, out: &Path) -> Result<Vec<EstimateRecord>, HarnessError> {
    let model = match (cfg.separate.method, checkpoint) {
        (Method::Neural, Some(p)) => Some(NeuralModel::load(p).at("load checkpoint")?),
        (Method::Neural, None) => return Err(HarnessError::Config("neural separation needs a checkpoint".into())),
        (Method::Fastmnmf, _) => None,
    };
    if let Some(m) = &model {
        if m.config.bins != cfg.neural().bins || m.config.channels != cfg.scene.mics {
            return Err(HarnessError::Config(format!(
                "checkpoint expects {} bins and {} channels, configuration gives {} and {}",
                m.config.bins,
                m.config.channels,
                cfg.neural().bins,
                cfg.scene.mics
            )));
        }
    }
    let scenes = load_spectrograms(cfg, manifest, Split::Test)?;
    create_dir(out)?;
    write_resolved_config(cfg, out)?;
    let reference = cfg.separate.reference;
    let mut records = Vec::new();
    let mut timing = String::from("scene\tstage\tseconds\n");
    for (r, wave, spec) in &scenes {
        let start = Instant::now();
        let sep = match &model {
            Some(m) => neural_separate(m, spec, reference).at("separate")?,
            None => {
                let f = &cfg.fastmnmf;
                let mut p = fastmnmf_init(spec, f.sources, f.bases, r.seed).at("separate")?;
                fastmnmf_fit(&mut p, spec, f.iterations).at("separate")?;
                fastmnmf_separate(&p, spec, reference).at("separate")?
            }
        };
        timing.push_str(&format!("{}\tseparate\t{:.6}\n", r.id, start.elapsed().as_secs_f64()));
        let rel = r.id.clone();
        create_dir(&out.join(&rel))?;
        let mut estimates = Vec::new();
        for (k, s) in sep.sources.iter().enumerate() {
            let w = istft_padded(s, cfg.stft, wave.sample_rate(), wave.len()).at("istft")?;
            let p = format!("{rel}/estimate{k}.wav");
            wav_write(out.join(&p), &w).at("separate")?;
            estimates.push(p);
        }
        records.push(EstimateRecord { id: r.id.clone(), estimates });
    }
    write_jsonl(&out.join(ESTIMATES), &records)?;
    write_text(&out.join(TIMING), &timing)?;
    Ok(records)
}

/// Scores the estimates in `estimates_dir` against the manifest references
/// at the configured reference microphone and writes the report.
pub fn evaluate_pipeline(cfg: &RunConfig, manifest: &Path, estimates_dir: &Path, out: &Path) -> Result<EvalReport, HarnessError> {
    let dir = base_dir(manifest);
    let records = load_manifest(manifest)?;
    let estimates: Vec<EstimateRecord> = read_jsonl(&estimates_dir.join(ESTIMATES))?;
    if estimates.is_empty() {
        return Err(HarnessError::EmptyInput("no estimates to evaluate".into()));
    }
    let m = cfg.separate.reference;
    let mono = |path: PathBuf| -> Result<Vec<f64>, HarnessError> {
        let w = wav_read(&path).at("evaluate")?;
        let ch = if w.num_channels() == 1 { 0 } else { m };
        if ch >= w.num_channels() {
            return Err(HarnessError::Config(format!("{} has no channel {ch}", path.display())));
        }
        Ok(w.channel(ch).to_vec())
    };
    let mut scenes = Vec::new();
    let mut timing = String::from("scene\tstage\tseconds\n");
    for e in &estimates {
        let start = Instant::now();
        let r = records
            .iter()
            .find(|r| r.id == e.id)
            .ok_or_else(|| HarnessError::Format(format!("estimate for unknown scene {}", e.id)))?;
        let refs = r.references.iter().map(|p| mono(dir.join(p))).collect::<Result<Vec<_>, _>>()?;
        let est = e.estimates.iter().map(|p| mono(estimates_dir.join(p))).collect::<Result<Vec<_>, _>>()?;
        let mix = mono(dir.join(&r.mixture))?;
        scenes.push(evaluate_scene(&r.id, &est, &refs, &mix).at("evaluate")?);
        timing.push_str(&format!("{}\tevaluate\t{:.6}\n", r.id, start.elapsed().as_secs_f64()));
    }
    let report = EvalReport::new(scenes);
    create_dir(out)?;
    write_resolved_config(cfg, out)?;
    write_text(&out.join(REPORT), &report.to_tsv())?;
    write_text(&out.join(TIMING), &timing)?;
    Ok(report)
}

/// Times one inference pass of the network against
/// `bench.fastmnmf_iterations` FastMNMF iterations on the same mixtures,
/// with the same number of sources.
pub fn bench_pipeline(cfg: &RunConfig, checkpoint: Option<&Path>, out: Option<&Path>) -> Result<BenchReport, HarnessError> {
    if cfg.bench.scenes == 0 {
        return Err(HarnessError::EmptyInput("bench needs at least one scene".into()));
    }
    let model = match checkpoint {
        Some(p) => NeuralModel::load(p).at("load checkpoint")?,
        None => NeuralModel::new(cfg.neural(), cfg.seed).at("bench")?,
    };
    let sources = model.config.sources;
    let iters = cfg.bench.fastmnmf_iterations;
    let mut rows = Vec::new();
    for i in 0..cfg.bench.scenes {
        let seed = scene_seed(cfg.scene.seed, TEST_INDEX_BASE + i as u64);
        let scene = generate_scene(&cfg.scene, seed).at("bench")?;
        let spec = stft_padded(&scene.mixture, cfg.stft).at("bench")?;
        let id = format!("bench-{i:03}");
        let neural = time_repeats(cfg.bench.repeats, || infer(&model, &spec)).at("bench: neural inference")?;
        let nmf = time_repeats(cfg.bench.repeats, || {
            let mut p = fastmnmf_init(&spec, sources, cfg.fastmnmf.bases, seed)?;
            fastmnmf_fit(&mut p, &spec, iters)
        })
        .at("bench: fastmnmf")?;
        rows.push(BenchRow::new(&id, "neural_inference", neural));
        rows.push(BenchRow::new(&id, &format!("fastmnmf_{iters}"), nmf));
    }
    let mut report = BenchReport { fingerprint: Fingerprint::current(), rows, speedup: 0.0 };
    report.speedup = report.stage_median(&format!("fastmnmf_{iters}")) / report.stage_median("neural_inference");
    if let Some(dir) = out {
        create_dir(dir)?;
        write_resolved_config(cfg, dir)?;
        write_text(&dir.join(BENCH), &report.to_tsv())?;
    }
    Ok(report)
}
