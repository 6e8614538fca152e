//! Synthetic corpora on disk: WAV files, JSON degradation sidecars and CSV
//! manifests, plus an in-memory view with cached features.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{load_wav, write_wav};
use crate::degrade::{apply_degradation, oracle_mos_shifted, sample_degradation, DegradationSpec, SamplerConfig};
use crate::error::{Error, Result};
use crate::features::{extract, FeatureConfig, FeatureTensor};
use crate::synth::synth_clean;

pub const MANIFEST_HEADER: [&str; 4] = ["clip_path", "mos", "dataset_id", "split"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Invalid(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub clip_path: String,
    pub mos: Option<f64>,
    pub dataset_id: String,
    pub split: Split,
}

impl ManifestEntry {
    pub fn validate(&self) -> Result<()> {
        if self.dataset_id.is_empty() {
            return Err(Error::Invalid(format!("{}: empty dataset_id", self.clip_path)));
        }
        if let Some(m) = self.mos {
            if !(1.0..=5.0).contains(&m) {
                return Err(Error::Invalid(format!("{}: MOS {m} outside [1, 5]", self.clip_path)));
            }
        }
        Ok(())
    }
}

fn fmt_mos(m: Option<f64>) -> String {
    m.map(|v| format!("{v:.6}")).unwrap_or_default()
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = String::new();
    out.push_str(&MANIFEST_HEADER.join(","));
    out.push('\n');
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    for e in entries {
        w.write_record([
            e.clip_path.as_str(),
            &fmt_mos(e.mos),
            e.dataset_id.as_str(),
            e.split.as_str(),
        ])
        .map_err(|err| Error::Invalid(err.to_string()))?;
    }
    let body = w.into_inner().map_err(|err| Error::Invalid(err.to_string()))?;
    out.push_str(&String::from_utf8_lossy(&body));
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let ingest = |message: String| Error::Ingest {
        path: path.to_path_buf(),
        message,
    };
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(|e| ingest(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(ingest(format!("bad manifest header {headers:?}")));
    }
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| ingest(e.to_string()))?;
        let mos = match rec[1].trim() {
            "" => None,
            s => Some(s.parse::<f64>().map_err(|e| ingest(format!("row {}: {e}", line + 2)))?),
        };
        let entry = ManifestEntry {
            clip_path: rec[0].to_string(),
            mos,
            dataset_id: rec[2].to_string(),
            split: Split::parse(&rec[3]).map_err(|e| ingest(format!("row {}: {e}", line + 2)))?,
        };
        entry.validate().map_err(|e| ingest(e.to_string()))?;
        out.push(entry);
    }
    Ok(out)
}

pub fn sidecar_path(wav: &Path) -> PathBuf {
    wav.with_extension("json")
}

pub fn write_sidecar(wav: &Path, spec: &DegradationSpec) -> Result<()> {
    let path = sidecar_path(wav);
    let mut text = serde_json::to_string(spec).map_err(|e| Error::Invalid(e.to_string()))?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// The degradation sidecar next to a WAV, if there is one.
pub fn read_sidecar(wav: &Path) -> Result<Option<DegradationSpec>> {
    let path = sidecar_path(wav);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let spec: DegradationSpec = serde_json::from_str(&text).map_err(|e| Error::Ingest {
        path: path.clone(),
        message: e.to_string(),
    })?;
    spec.validate()?;
    Ok(Some(spec))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub id: String,
    /// Unlabeled corpora keep their sidecars but get no MOS.
    #[serde(default = "yes")]
    pub labeled: bool,
    #[serde(default)]
    pub train: usize,
    #[serde(default)]
    pub val: usize,
    #[serde(default)]
    pub test: usize,
    /// Dataset-specific rating offset, applied to the oracle logit.
    #[serde(default = "one")]
    pub oracle_scale: f64,
    #[serde(default)]
    pub oracle_shift: f64,
}

fn yes() -> bool {
    true
}

fn one() -> f64 {
    1.0
}

impl DatasetConfig {
    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub duration_s: f64,
    /// Share of clips left undegraded, on top of what the sampler yields.
    pub clean_fraction: f64,
    pub degradation: SamplerConfig,
    pub features: FeatureConfig,
    pub datasets: Vec<DatasetConfig>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            duration_s: 1.0,
            clean_fraction: 0.0,
            degradation: SamplerConfig::default(),
            features: FeatureConfig::default(),
            datasets: Vec::new(),
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1.0..=30.0).contains(&self.duration_s) {
            return Err(Error::Config("corpus.duration_s must lie in [1, 30]".into()));
        }
        if !(0.0..=1.0).contains(&self.clean_fraction) {
            return Err(Error::Config("corpus.clean_fraction must lie in [0, 1]".into()));
        }
        self.degradation.validate()?;
        let mut seen = std::collections::BTreeSet::new();
        for d in &self.datasets {
            let ok_id = !d.id.is_empty()
                && d.id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
            if !ok_id {
                return Err(Error::Config(format!("corpus.datasets: bad id `{}`", d.id)));
            }
            if !seen.insert(&d.id) {
                return Err(Error::Config(format!("corpus.datasets: duplicate id `{}`", d.id)));
            }
            if !(d.oracle_scale > 0.0 && d.oracle_scale.is_finite() && d.oracle_shift.is_finite()) {
                return Err(Error::Config(format!(
                    "corpus.datasets.{}: oracle_scale must be positive",
                    d.id
                )));
            }
        }
        Ok(())
    }
}

/// SplitMix64 finalizer, used to derive independent per-clip seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn clip_seed(seed: u64, dataset: usize, split: Split, idx: usize) -> u64 {
    let s = mix_seed(seed, dataset as u64);
    let s = mix_seed(s, split as u64);
    mix_seed(s, idx as u64)
}

/// Degradation spec, clean source seed and label for one generated clip.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipPlan {
    pub rel_path: String,
    pub source_seed: u64,
    pub spec: DegradationSpec,
    pub entry: ManifestEntry,
}

/// Everything `build_corpus` would write, without touching the disk.
pub fn plan_corpus(cfg: &CorpusConfig, seed: u64) -> Result<Vec<ClipPlan>> {
    cfg.validate()?;
    let mut plans = Vec::new();
    for split in Split::ALL {
        for (di, d) in cfg.datasets.iter().enumerate() {
            for idx in 0..d.count(split) {
                let cs = clip_seed(seed, di, split, idx);
                let mut rng = ChaCha8Rng::seed_from_u64(cs);
                let source_seed = rng.random::<u64>();
                let spec = if rng.random_bool(cfg.clean_fraction) {
                    DegradationSpec::clean(rng.random())
                } else {
                    sample_degradation(&mut rng, &cfg.degradation)
                };
                // Rounded to what the manifest stores.
                let mos = d.labeled.then(|| {
                    let m = oracle_mos_shifted(&spec, d.oracle_scale, d.oracle_shift).mos;
                    (m * 1e6).round() / 1e6
                });
                let rel_path = format!("{}/{}/{:05}.wav", d.id, split.as_str(), idx);
                plans.push(ClipPlan {
                    entry: ManifestEntry {
                        clip_path: rel_path.clone(),
                        mos,
                        dataset_id: d.id.clone(),
                        split,
                    },
                    rel_path,
                    source_seed,
                    spec,
                });
            }
        }
    }
    Ok(plans)
}

pub fn manifest_path(root: &Path, split: Split) -> PathBuf {
    root.join(format!("{}.csv", split.as_str()))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorpusSummary {
    pub counts: BTreeMap<Split, usize>,
    pub labeled: usize,
    pub unlabeled: usize,
}

impl std::fmt::Display for CorpusSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let get = |s| self.counts.get(&s).copied().unwrap_or(0);
        write!(
            f,
            "train={} val={} test={} (labeled {}, unlabeled {})",
            get(Split::Train),
            get(Split::Val),
            get(Split::Test),
            self.labeled,
            self.unlabeled
        )
    }
}

/// Render one planned clip to audio.
pub fn render_clip(plan: &ClipPlan, duration_s: f64) -> Result<crate::audio::AudioClip> {
    let mut clip = synth_clean(plan.source_seed, duration_s)?;
    clip.clip_id = plan.rel_path.clone();
    apply_degradation(&clip, &plan.spec)
}

/// Write WAVs, sidecars and one manifest per split under `root`.
pub fn build_corpus(cfg: &CorpusConfig, seed: u64, root: &Path) -> Result<CorpusSummary> {
    let plans = plan_corpus(cfg, seed)?;
    let mut summary = CorpusSummary::default();
    for p in &plans {
        let path = root.join(&p.rel_path);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        write_wav(&path, &render_clip(p, cfg.duration_s)?)?;
        write_sidecar(&path, &p.spec)?;
        *summary.counts.entry(p.entry.split).or_default() += 1;
        if p.entry.mos.is_some() {
            summary.labeled += 1;
        } else {
            summary.unlabeled += 1;
        }
    }
    for split in Split::ALL {
        let rows: Vec<ManifestEntry> = plans
            .iter()
            .filter(|p| p.entry.split == split)
            .map(|p| p.entry.clone())
            .collect();
        write_manifest(&manifest_path(root, split), &rows)?;
    }
    info!("corpus written to {}: {summary}", root.display());
    Ok(summary)
}

/// A clip held in memory with its features.
#[derive(Clone, Debug)]
pub struct Clip {
    pub id: String,
    pub dataset_id: String,
    pub mos: Option<f64>,
    pub spec: Option<DegradationSpec>,
    pub features: FeatureTensor,
}

/// Clips of one dataset and split.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub id: String,
    pub clips: Vec<Clip>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }
}

/// Group clips by dataset id, in id order.
pub fn group(clips: Vec<Clip>) -> Vec<Dataset> {
    let mut map: BTreeMap<String, Vec<Clip>> = BTreeMap::new();
    for c in clips {
        map.entry(c.dataset_id.clone()).or_default().push(c);
    }
    map.into_iter().map(|(id, clips)| Dataset { id, clips }).collect()
}

/// Which manifest rows to keep when loading.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Labels {
    Labeled,
    Unlabeled,
    Any,
}

/// Load one split's manifest, decode audio and extract features.
pub fn load_split(root: &Path, split: Split, which: Labels, feat: &FeatureConfig) -> Result<Vec<Dataset>> {
    let manifest = manifest_path(root, split);
    let entries = read_manifest(&manifest)?;
    let mut clips = Vec::new();
    for e in entries {
        let keep = match which {
            Labels::Labeled => e.mos.is_some(),
            Labels::Unlabeled => e.mos.is_none(),
            Labels::Any => true,
        };
        if !keep {
            continue;
        }
        let path = root.join(&e.clip_path);
        let audio = load_wav(&path)?;
        let spec = read_sidecar(&path)?;
        clips.push(Clip {
            id: e.clip_path.clone(),
            dataset_id: e.dataset_id.clone(),
            mos: e.mos,
            spec,
            features: extract(&audio, feat)?,
        });
    }
    if clips.is_empty() {
        warn!("{}: no {which:?} clips", manifest.display());
    }
    Ok(group(clips))
}

/// Build clips straight from a plan, skipping the disk. Audio goes through
/// 16-bit quantization so the result matches a round trip through WAV.
pub fn materialize(cfg: &CorpusConfig, seed: u64, feat: &FeatureConfig) -> Result<BTreeMap<Split, Vec<Clip>>> {
    let mut out: BTreeMap<Split, Vec<Clip>> = BTreeMap::new();
    for p in plan_corpus(cfg, seed)? {
        let mut audio = render_clip(&p, cfg.duration_s)?;
        for s in audio.samples.iter_mut() {
            *s = crate::audio::quantize_i16(*s) as f32 / 32768.0;
        }
        out.entry(p.entry.split).or_default().push(Clip {
            id: p.rel_path,
            dataset_id: p.entry.dataset_id,
            mos: p.entry.mos,
            spec: Some(p.spec),
            features: extract(&audio, feat)?,
        });
    }
    Ok(out)
}

/// Append-only text writer that always uses LF line endings.
pub(crate) fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for l in lines {
        f.write_all(l.as_bytes()).map_err(|e| Error::io(path, e))?;
        f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
