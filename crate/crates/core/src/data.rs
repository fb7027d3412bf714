//! Dataset ingestion and synthesis: the on-disk layout, the STSF feature
//! container (with a CSV alternative for fixtures), the synthetic corruption
//! backbone standing in for a frozen upstream network, and a generator for
//! complete synthetic datasets.

use crate::error::{Error, Result};
use crate::segments::{extract_segments, LabelSequence};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::io::{Read, Write as _};
use std::path::{Path, PathBuf};

// ── class mapping ────────────────────────────────────────────────────

/// Bidirectional class id <-> name table from mapping.txt ("id name" lines).
#[derive(Debug, Clone)]
pub struct ClassMap {
    names: Vec<String>,
}

impl ClassMap {
    pub fn new(names: Vec<String>) -> Self {
        ClassMap { names }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name_of(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(|s| s.as_str())
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (id_str, name) = line.split_once(' ').ok_or_else(|| {
                Error::Parse(format!("{}:{}: expected \"id name\"", origin.display(), lineno + 1))
            })?;
            let id: usize = id_str.parse().map_err(|_| {
                Error::Parse(format!("{}:{}: bad class id", origin.display(), lineno + 1))
            })?;
            entries.push((id, name.trim().to_string()));
        }
        entries.sort_by_key(|&(id, _)| id);
        if entries.iter().enumerate().any(|(i, &(id, _))| i != id) {
            return Err(Error::Integrity(format!(
                "{}: class ids must be a contiguous range starting at 0",
                origin.display()
            )));
        }
        Ok(ClassMap::new(entries.into_iter().map(|(_, n)| n).collect()))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (id, name) in self.names.iter().enumerate() {
            writeln!(out, "{id} {name}").expect("format");
        }
        out
    }
}

// ── feature files ────────────────────────────────────────────────────

const FEATURE_MAGIC: &[u8; 4] = b"STSF";
const FEATURE_VERSION: u32 = 1;

/// Writes a [T×D] feature matrix: magic "STSF", version u32 LE, T u64 LE,
/// D u64 LE, then T·D little-endian f32 values row-major.
pub fn write_features(path: &Path, features: &Tensor) -> Result<()> {
    if features.rank() != 2 {
        return Err(Error::shape("write_features", "expected rank-2".to_string()));
    }
    let mut out = Vec::with_capacity(24 + features.numel() * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(features.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(features.cols() as u64).to_le_bytes());
    for &v in features.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

fn read_features_stsf(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|_| Error::NotFound(format!("feature file {}", path.display())))?
        .read_to_end(&mut bytes)?;
    if bytes.len() < 24 || &bytes[0..4] != FEATURE_MAGIC {
        return Err(Error::Integrity(format!(
            "{} is not a feature file (bad magic)",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FEATURE_VERSION {
        return Err(Error::Integrity(format!("unsupported feature version {version}")));
    }
    let t = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let d = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let expected = 24 + t * d * 4;
    if bytes.len() != expected {
        return Err(Error::Integrity(format!(
            "{}: declared {}x{} needs {} bytes, file has {}",
            path.display(),
            t,
            d,
            expected,
            bytes.len()
        )));
    }
    let mut data = Vec::with_capacity(t * d);
    for chunk in bytes[24..].chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
    }
    Tensor::new(vec![t, d], data)
}

fn read_features_csv(path: &Path) -> Result<Tensor> {
    let text = std::fs::read_to_string(path)
        .map_err(|_| Error::NotFound(format!("feature file {}", path.display())))?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> =
            line.split(',').map(|v| v.trim().parse::<f64>()).collect();
        let row = row.map_err(|_| {
            Error::Parse(format!("{}:{}: bad float", path.display(), lineno + 1))
        })?;
        rows.push(row);
    }
    Tensor::from_rows(&rows)
        .map_err(|_| Error::Integrity(format!("{}: ragged rows", path.display())))
}

/// Reads either container by extension: `.stsf` binary, `.csv` text.
pub fn read_features(path: &Path) -> Result<Tensor> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => read_features_csv(path),
        _ => read_features_stsf(path),
    }
}

// ── label and probability files ──────────────────────────────────────

pub fn write_labels(path: &Path, labels: &LabelSequence, map: &ClassMap) -> Result<()> {
    let mut out = String::new();
    for &l in labels.labels() {
        let name = map
            .name_of(l)
            .ok_or_else(|| Error::Integrity(format!("label id {l} has no name")))?;
        writeln!(out, "{name}").expect("format");
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_labels(path: &Path, map: &ClassMap) -> Result<LabelSequence> {
    let text = std::fs::read_to_string(path)
        .map_err(|_| Error::NotFound(format!("label file {}", path.display())))?;
    let mut labels = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let name = line.trim();
        if name.is_empty() {
            continue;
        }
        let id = map.id_of(name).ok_or_else(|| {
            Error::Integrity(format!(
                "{}:{}: unknown action name {name:?}",
                path.display(),
                lineno + 1
            ))
        })?;
        labels.push(id);
    }
    if labels.is_empty() {
        return Err(Error::Integrity(format!("{} has no frames", path.display())));
    }
    Ok(LabelSequence(labels))
}

pub fn write_probs(path: &Path, probs: &Tensor) -> Result<()> {
    let mut out = String::new();
    for i in 0..probs.rows() {
        let row: Vec<String> = probs.row(i).iter().map(|v| format!("{v}")).collect();
        writeln!(out, "{}", row.join("\t")).expect("format");
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_probs(path: &Path) -> Result<Tensor> {
    let text = std::fs::read_to_string(path)
        .map_err(|_| Error::NotFound(format!("prediction file {}", path.display())))?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> =
            line.split('\t').map(|v| v.parse::<f64>()).collect();
        rows.push(row.map_err(|_| {
            Error::Parse(format!("{}:{}: bad float", path.display(), lineno + 1))
        })?);
    }
    Tensor::from_rows(&rows)
        .map_err(|_| Error::Integrity(format!("{}: ragged rows", path.display())))
}

// ── dataset layout ───────────────────────────────────────────────────

/// Root directory with mapping.txt, groundTruth/, features/, predictions/
/// and splits/.
#[derive(Debug, Clone)]
pub struct DatasetLayout {
    pub root: PathBuf,
}

/// One loaded video.
#[derive(Debug, Clone)]
pub struct VideoData {
    pub id: String,
    pub features: Tensor,
    pub gt: LabelSequence,
    /// Backbone outputs, when a prediction file exists.
    pub init: Option<InitPrediction>,
}

#[derive(Debug, Clone)]
pub struct InitPrediction {
    pub labels: LabelSequence,
    pub probs: Tensor,
}

impl DatasetLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DatasetLayout { root: root.into() }
    }

    pub fn mapping_path(&self) -> PathBuf {
        self.root.join("mapping.txt")
    }

    pub fn gt_path(&self, id: &str) -> PathBuf {
        self.root.join("groundTruth").join(format!("{id}.txt"))
    }

    pub fn features_path(&self, id: &str) -> PathBuf {
        self.root.join("features").join(format!("{id}.stsf"))
    }

    pub fn predictions_path(&self, id: &str) -> PathBuf {
        self.root.join("predictions").join(format!("{id}.tsv"))
    }

    pub fn split_path(&self, name: &str) -> PathBuf {
        self.root.join("splits").join(format!("{name}.split"))
    }

    pub fn class_map(&self) -> Result<ClassMap> {
        let path = self.mapping_path();
        let text = std::fs::read_to_string(&path)
            .map_err(|_| Error::NotFound(format!("mapping file {}", path.display())))?;
        ClassMap::parse(&text, &path)
    }

    /// Newline-separated video ids; `split` may be a bare split name or a
    /// path to a split file.
    pub fn read_split(&self, split: &str) -> Result<Vec<String>> {
        let candidate = Path::new(split);
        let path = if candidate.exists() {
            candidate.to_path_buf()
        } else {
            let named = self.split_path(split);
            if named.exists() {
                named
            } else {
                return Err(Error::NotFound(format!("split {split}")));
            }
        };
        let text = std::fs::read_to_string(&path)?;
        let ids: Vec<String> =
            text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
        if ids.is_empty() {
            return Err(Error::Integrity(format!("{} lists no videos", path.display())));
        }
        Ok(ids)
    }

    /// Loads one video and checks that every piece agrees on T.
    pub fn load_video(&self, id: &str, map: &ClassMap) -> Result<VideoData> {
        let gt = read_labels(&self.gt_path(id), map)?;
        let features = read_features(&self.features_path(id))?;
        if features.rows() != gt.len() {
            return Err(Error::Integrity(format!(
                "video {id}: features have {} frames, labels {}",
                features.rows(),
                gt.len()
            )));
        }
        let pred_path = self.predictions_path(id);
        let init = if pred_path.exists() {
            let probs = read_probs(&pred_path)?;
            if probs.rows() != gt.len() {
                return Err(Error::Integrity(format!(
                    "video {id}: predictions have {} frames, labels {}",
                    probs.rows(),
                    gt.len()
                )));
            }
            if probs.cols() != map.len() {
                return Err(Error::Integrity(format!(
                    "video {id}: predictions have {} classes, mapping {}",
                    probs.cols(),
                    map.len()
                )));
            }
            let labels =
                LabelSequence((0..probs.rows()).map(|t| argmax_row(probs.row(t))).collect());
            Some(InitPrediction { labels, probs })
        } else {
            None
        };
        Ok(VideoData { id: id.to_string(), features, gt, init })
    }
}

fn argmax_row(row: &[f64]) -> usize {
    crate::segments::argmax(row)
}

// ── synthetic backbone ───────────────────────────────────────────────

/// Knobs of the corruption process standing in for a real backbone's error
/// modes, plus the synthetic feature model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorruptionConfig {
    /// Boundary jitter sigma as a fraction of the adjacent segment length.
    pub boundary_jitter: f64,
    /// Per-segment probability of flipping the label to a random other one.
    pub label_flip: f64,
    /// Per-segment probability of an over-segmentation split.
    pub split_prob: f64,
    /// Per-boundary probability of merging into the previous segment.
    pub merge_prob: f64,
    /// Probability mass the synthetic backbone puts on its own prediction.
    pub label_confidence: f64,
    /// Width of generated features.
    pub feature_dim: usize,
    /// Standard deviation of features around their class means.
    pub feature_sigma: f64,
    /// Dataset-level seed; per-video streams derive from it.
    pub seed: u64,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        CorruptionConfig {
            boundary_jitter: 0.15,
            label_flip: 0.15,
            split_prob: 0.0,
            merge_prob: 0.0,
            label_confidence: 0.8,
            feature_dim: 64,
            feature_sigma: 1.0,
            seed: 0,
        }
    }
}

impl CorruptionConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("label_flip", self.label_flip),
            ("split_prob", self.split_prob),
            ("merge_prob", self.merge_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0,1], got {p}")));
            }
        }
        if self.boundary_jitter < 0.0 {
            return Err(Error::Config("boundary_jitter must be >= 0".to_string()));
        }
        if !(0.0..=1.0).contains(&self.label_confidence) || self.label_confidence == 0.0 {
            return Err(Error::Config("label_confidence must be in (0,1]".to_string()));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be positive".to_string()));
        }
        if self.feature_sigma < 0.0 {
            return Err(Error::Config("feature_sigma must be >= 0".to_string()));
        }
        Ok(())
    }

    pub fn any_corruption(&self) -> bool {
        self.boundary_jitter > 0.0
            || self.label_flip > 0.0
            || self.split_prob > 0.0
            || self.merge_prob > 0.0
    }
}

/// Backbone outputs for one video.
#[derive(Debug, Clone)]
pub struct SynthOutputs {
    pub init_pred: LabelSequence,
    /// [T×|C|] rows summing to 1.
    pub probs: Tensor,
    /// [T×feature_dim] class-conditioned Gaussian features (on the ground
    /// truth, so the corruption stays recoverable).
    pub features: Tensor,
}

fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller; u is kept away from 0.
    let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let v: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    (-2.0 * u.ln()).sqrt() * v.cos()
}

#[derive(Clone)]
struct Run {
    label: usize,
    len: usize,
}

fn runs_to_labels(runs: &[Run]) -> LabelSequence {
    let mut labels = Vec::new();
    for r in runs {
        labels.extend(std::iter::repeat_n(r.label, r.len));
    }
    LabelSequence(labels)
}

fn corrupt_once(
    gt_runs: &[Run],
    classes: usize,
    cfg: &CorruptionConfig,
    rng: &mut ChaCha8Rng,
) -> LabelSequence {
    let mut runs: Vec<Run> = gt_runs.to_vec();

    // Merge: a segment absorbs its successor's identity.
    for i in 1..runs.len() {
        if rng.gen_bool(cfg.merge_prob) {
            runs[i].label = runs[i - 1].label;
        }
    }

    // Label flips.
    for run in &mut runs {
        if rng.gen_bool(cfg.label_flip) {
            let offset = rng.gen_range(1..classes);
            run.label = (run.label + offset) % classes;
        }
    }

    // Over-segmentation: plant a short intruder inside a segment.
    let mut split = Vec::with_capacity(runs.len());
    for run in runs {
        if run.len >= 4 && rng.gen_bool(cfg.split_prob) {
            let intruder_len = (run.len / 5).clamp(1, run.len - 2);
            let left_len = rng.gen_range(1..run.len - intruder_len);
            let right_len = run.len - left_len - intruder_len;
            let offset = rng.gen_range(1..classes);
            split.push(Run { label: run.label, len: left_len });
            split.push(Run { label: (run.label + offset) % classes, len: intruder_len });
            split.push(Run { label: run.label, len: right_len });
        } else {
            split.push(run);
        }
    }
    let mut runs = split;

    // Boundary jitter, scaled by the shorter neighbor.
    if cfg.boundary_jitter > 0.0 {
        for i in 1..runs.len() {
            let scale = cfg.boundary_jitter * runs[i - 1].len.min(runs[i].len) as f64;
            let shift = (gaussian(rng) * scale).round() as isize;
            let shift = shift.clamp(-(runs[i - 1].len as isize - 1), runs[i].len as isize - 1);
            runs[i - 1].len = (runs[i - 1].len as isize + shift) as usize;
            runs[i].len = (runs[i].len as isize - shift) as usize;
        }
    }

    runs_to_labels(&runs)
}

/// Corrupts a ground-truth segmentation into a plausible backbone output and
/// synthesizes class-conditioned features. Deterministic in (cfg, stream).
/// When any corruption knob is positive the produced prediction is
/// guaranteed to differ from the ground truth.
pub fn synth_backbone(
    gt: &LabelSequence,
    classes: usize,
    cfg: &CorruptionConfig,
    stream: u64,
) -> Result<SynthOutputs> {
    cfg.validate()?;
    if classes < 2 {
        return Err(Error::Config("need at least 2 classes".to_string()));
    }
    if gt.is_empty() {
        return Err(Error::Contract("synth_backbone: empty ground truth".to_string()));
    }
    if let Some(&bad) = gt.labels().iter().find(|&&l| l >= classes) {
        return Err(Error::Contract(format!("label {bad} out of range for {classes} classes")));
    }
    let gt_runs: Vec<Run> = extract_segments(gt)
        .into_iter()
        .map(|s| Run { label: s.label, len: s.len() })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut init_pred = corrupt_once(&gt_runs, classes, cfg, &mut rng);
    if cfg.any_corruption() {
        let mut tries = 0;
        while init_pred == *gt && tries < 16 {
            init_pred = corrupt_once(&gt_runs, classes, cfg, &mut rng);
            tries += 1;
        }
        if init_pred == *gt {
            // Degenerate draw: force one flip so refinement has headroom.
            let mut labels = init_pred.0.clone();
            labels[0] = (labels[0] + 1) % classes;
            init_pred = LabelSequence(labels);
        }
    }

    let t_len = gt.len();
    let spread = if classes > 1 { (1.0 - cfg.label_confidence) / (classes - 1) as f64 } else { 0.0 };
    let mut probs = Tensor::zeros(vec![t_len, classes]);
    for (t, &l) in init_pred.labels().iter().enumerate() {
        for c in 0..classes {
            probs.data_mut()[t * classes + c] =
                if c == l { cfg.label_confidence } else { spread };
        }
    }

    // Class means come from a dataset-level stream so every video shares
    // the same feature geometry.
    let mut means_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0C1A_55E5);
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..cfg.feature_dim).map(|_| gaussian(&mut means_rng)).collect())
        .collect();
    let mut features = Tensor::zeros(vec![t_len, cfg.feature_dim]);
    for (t, &l) in gt.labels().iter().enumerate() {
        for d in 0..cfg.feature_dim {
            features.data_mut()[t * cfg.feature_dim + d] =
                means[l][d] + cfg.feature_sigma * gaussian(&mut rng);
        }
    }
    Ok(SynthOutputs { init_pred, probs, features })
}

// ── synthetic dataset generation ─────────────────────────────────────

/// Shape of a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_videos: usize,
    pub frames_lo: usize,
    pub frames_hi: usize,
    pub classes: usize,
    pub mean_segment_len: usize,
    pub train_fraction: f64,
    pub corruption: CorruptionConfig,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_videos: 25,
            frames_lo: 280,
            frames_hi: 320,
            classes: 6,
            mean_segment_len: 30,
            train_fraction: 0.8,
            corruption: CorruptionConfig::default(),
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        self.corruption.validate()?;
        if self.n_videos == 0 {
            return Err(Error::Config("n_videos must be positive".to_string()));
        }
        if self.frames_lo == 0 || self.frames_lo > self.frames_hi {
            return Err(Error::Config(format!(
                "bad frame range {}..{}",
                self.frames_lo, self.frames_hi
            )));
        }
        if self.classes < 2 {
            return Err(Error::Config("need at least 2 classes".to_string()));
        }
        if self.mean_segment_len == 0 {
            return Err(Error::Config("mean_segment_len must be positive".to_string()));
        }
        if !(0.0..=1.0).contains(&self.train_fraction) {
            return Err(Error::Config("train_fraction must be in [0,1]".to_string()));
        }
        Ok(())
    }
}

/// Markov segment chain: labels avoid repeating their predecessor, lengths
/// are geometric with the configured mean (at least 2 frames).
fn generate_gt(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> LabelSequence {
    let t_len = rng.gen_range(spec.frames_lo..=spec.frames_hi);
    let p = 1.0 / spec.mean_segment_len as f64;
    let mut labels = Vec::with_capacity(t_len);
    let mut prev: Option<usize> = None;
    while labels.len() < t_len {
        let label = match prev {
            None => rng.gen_range(0..spec.classes),
            Some(l) => (l + rng.gen_range(1..spec.classes)) % spec.classes,
        };
        let u: f64 = rng.gen_range(0.0..1.0);
        let geometric = ((1.0 - u).ln() / (1.0 - p).ln()).floor() as usize;
        let len = (2 + geometric).min(t_len - labels.len());
        labels.extend(std::iter::repeat_n(label, len));
        prev = Some(label);
    }
    LabelSequence(labels)
}

/// Generates and writes a complete dataset; returns the layout. Byte
/// deterministic in the spec (including its corruption seed).
pub fn make_synthetic_dataset(spec: &SynthSpec, out_dir: &Path) -> Result<DatasetLayout> {
    spec.validate()?;
    let layout = DatasetLayout::new(out_dir);
    std::fs::create_dir_all(out_dir.join("groundTruth"))?;
    std::fs::create_dir_all(out_dir.join("features"))?;
    std::fs::create_dir_all(out_dir.join("predictions"))?;
    std::fs::create_dir_all(out_dir.join("splits"))?;

    let map = ClassMap::new((0..spec.classes).map(|c| format!("action_{c:02}")).collect());
    std::fs::write(layout.mapping_path(), map.to_text())?;

    let mut ids = Vec::with_capacity(spec.n_videos);
    for v in 0..spec.n_videos {
        let id = format!("vid_{v:03}");
        let mut gt_rng = ChaCha8Rng::seed_from_u64(
            spec.corruption.seed ^ (v as u64).wrapping_mul(0x517C_C1B7_2722_0A95),
        );
        let gt = generate_gt(spec, &mut gt_rng);
        let synth = synth_backbone(&gt, spec.classes, &spec.corruption, v as u64)?;
        write_labels(&layout.gt_path(&id), &gt, &map)?;
        write_features(&layout.features_path(&id), &synth.features)?;
        write_probs(&layout.predictions_path(&id), &synth.probs)?;
        ids.push(id);
    }

    let n_train = ((spec.n_videos as f64) * spec.train_fraction).round() as usize;
    let n_train = n_train.min(spec.n_videos);
    let write_split = |name: &str, ids: &[String]| -> Result<()> {
        let mut text = String::new();
        for id in ids {
            writeln!(text, "{id}").expect("format");
        }
        std::fs::write(layout.split_path(name), text)?;
        Ok(())
    };
    write_split("all", &ids)?;
    write_split("train", &ids[..n_train])?;
    if n_train < spec.n_videos {
        write_split("test", &ids[n_train..])?;
    }
    Ok(layout)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::frame_accuracy;
    use tempfile::tempdir;

    fn seq(labels: &[usize]) -> LabelSequence {
        LabelSequence(labels.to_vec())
    }

    #[test]
    fn feature_file_roundtrip_binary_and_csv() {
        let dir = tempdir().unwrap();
        let t = Tensor::from_rows(&[vec![1.0, -2.5, 0.25], vec![0.0, 3.5, -1.0]]).unwrap();

        let bin = dir.path().join("a.stsf");
        write_features(&bin, &t).unwrap();
        let back = read_features(&bin).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert_eq!(back.data(), t.data()); // f32-exact values survive

        // Same matrix as CSV loads identically.
        let csv = dir.path().join("a.csv");
        std::fs::write(&csv, "1.0,-2.5,0.25\n0.0,3.5,-1.0\n").unwrap();
        let from_csv = read_features(&csv).unwrap();
        assert_eq!(from_csv.data(), back.data());
    }

    #[test]
    fn corrupt_feature_payload_is_integrity_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.stsf");
        let t = Tensor::zeros(vec![3, 2]);
        write_features(&path, &t).unwrap();
        // Truncate the payload.
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        match read_features(&path) {
            Err(Error::Integrity(msg)) => assert!(msg.contains("bad.stsf")),
            other => panic!("expected integrity error, got {other:?}"),
        }
    }

    #[test]
    fn labels_roundtrip_through_mapping() {
        let dir = tempdir().unwrap();
        let map = ClassMap::new(vec!["cut".to_string(), "mix".to_string()]);
        let path = dir.path().join("v.txt");
        write_labels(&path, &seq(&[0, 1, 1]), &map).unwrap();
        let back = read_labels(&path, &map).unwrap();
        assert_eq!(back, seq(&[0, 1, 1]));
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "cut\nmix\nmix\n");
    }

    #[test]
    fn unknown_action_name_is_integrity_error() {
        let dir = tempdir().unwrap();
        let map = ClassMap::new(vec!["cut".to_string()]);
        let path = dir.path().join("v.txt");
        std::fs::write(&path, "cut\nchop\n").unwrap();
        assert!(matches!(read_labels(&path, &map), Err(Error::Integrity(_))));
    }

    #[test]
    fn mapping_requires_contiguous_ids() {
        let p = Path::new("mapping.txt");
        assert!(ClassMap::parse("0 a\n2 b\n", p).is_err());
        let map = ClassMap::parse("1 b\n0 a\n", p).unwrap();
        assert_eq!(map.name_of(1), Some("b"));
    }

    #[test]
    fn identity_corruption_returns_ground_truth() {
        let gt = seq(&[0, 0, 1, 1, 2, 2, 2]);
        let cfg = CorruptionConfig {
            boundary_jitter: 0.0,
            label_flip: 0.0,
            split_prob: 0.0,
            merge_prob: 0.0,
            ..Default::default()
        };
        let out = synth_backbone(&gt, 3, &cfg, 0).unwrap();
        assert_eq!(out.init_pred, gt);
    }

    #[test]
    fn forced_flip_changes_every_segment() {
        let gt = seq(&[0, 0, 0, 1, 1, 1]);
        let cfg = CorruptionConfig {
            boundary_jitter: 0.0,
            label_flip: 1.0,
            split_prob: 0.0,
            merge_prob: 0.0,
            ..Default::default()
        };
        let out = synth_backbone(&gt, 2, &cfg, 1).unwrap();
        // |C| = 2: a forced flip is deterministic.
        assert_eq!(out.init_pred, seq(&[1, 1, 1, 0, 0, 0]));
    }

    #[test]
    fn probs_rows_sum_to_one_and_argmax_matches() {
        let gt = seq(&[0, 0, 1, 1, 2, 2]);
        let cfg = CorruptionConfig { label_flip: 0.5, ..Default::default() };
        let out = synth_backbone(&gt, 3, &cfg, 2).unwrap();
        for t in 0..gt.len() {
            let row = out.probs.row(t);
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert_eq!(argmax_row(row), out.init_pred.labels()[t]);
        }
        assert!(out.init_pred.labels().iter().all(|&l| l < 3));
    }

    #[test]
    fn positive_corruption_never_returns_perfect_prediction() {
        let cfg = CorruptionConfig { label_flip: 0.05, boundary_jitter: 0.0, ..Default::default() };
        for stream in 0..50 {
            let gt = seq(&[0, 0, 0, 0, 1, 1, 1, 1]);
            let out = synth_backbone(&gt, 3, &cfg, stream).unwrap();
            let acc = frame_accuracy(&out.init_pred, &gt).unwrap();
            assert!(acc < 100.0, "stream {stream} produced a perfect prediction");
        }
    }

    #[test]
    fn jitter_displacement_matches_statistical_oracle() {
        // One boundary between two 50-frame segments, jitter sigma 0.2:
        // requested shifts are N(0, 10). E|shift| = 10*sqrt(2/pi) ≈ 7.979,
        // sd(|shift|) ≈ 6.03. Mean over 1000 draws stays within 3 sigma of
        // the mean plus rounding slack.
        let sigma = 0.2;
        let scale = sigma * 50.0;
        let expected_mean = scale * (2.0 / std::f64::consts::PI).sqrt();
        let sd = scale * (1.0 - 2.0 / std::f64::consts::PI).sqrt();
        let bound = 3.0 * sd / (1000f64).sqrt() + 0.5;

        let gt = seq(&[vec![0usize; 50], vec![1usize; 50]].concat());
        let cfg = CorruptionConfig {
            boundary_jitter: sigma,
            label_flip: 0.0,
            split_prob: 0.0,
            merge_prob: 0.0,
            ..Default::default()
        };
        let mut total = 0.0;
        for stream in 0..1000u64 {
            let out = synth_backbone(&gt, 2, &cfg, stream).unwrap();
            let segs = extract_segments(&out.init_pred);
            // Jitter alone preserves the two-run structure.
            assert_eq!(segs.len(), 2);
            total += (segs[0].end as f64 - 49.0).abs();
        }
        let mean = total / 1000.0;
        assert!(
            (mean - expected_mean).abs() < bound,
            "mean |displacement| {mean} vs expected {expected_mean} ± {bound}"
        );
    }

    #[test]
    fn synth_backbone_is_deterministic_per_stream() {
        let gt = seq(&[0, 0, 1, 1, 2, 2, 0, 0]);
        let cfg = CorruptionConfig::default();
        let a = synth_backbone(&gt, 3, &cfg, 7).unwrap();
        let b = synth_backbone(&gt, 3, &cfg, 7).unwrap();
        assert_eq!(a.init_pred, b.init_pred);
        assert_eq!(a.features.data(), b.features.data());
        let c = synth_backbone(&gt, 3, &cfg, 8).unwrap();
        assert_ne!(a.features.data(), c.features.data());
    }

    #[test]
    fn generated_dataset_has_expected_files_and_loads() {
        let dir = tempdir().unwrap();
        let spec = SynthSpec {
            n_videos: 4,
            frames_lo: 40,
            frames_hi: 60,
            classes: 3,
            mean_segment_len: 8,
            train_fraction: 0.75,
            corruption: CorruptionConfig { feature_dim: 6, seed: 11, ..Default::default() },
        };
        let layout = make_synthetic_dataset(&spec, dir.path()).unwrap();
        let map = layout.class_map().unwrap();
        assert_eq!(map.len(), 3);

        let all = layout.read_split("all").unwrap();
        assert_eq!(all.len(), 4);
        assert_eq!(layout.read_split("train").unwrap().len(), 3);
        assert_eq!(layout.read_split("test").unwrap().len(), 1);

        for id in &all {
            let video = layout.load_video(id, &map).unwrap();
            assert_eq!(video.features.cols(), 6);
            assert_eq!(video.features.rows(), video.gt.len());
            let init = video.init.expect("generated datasets carry predictions");
            assert_eq!(init.labels.len(), video.gt.len());
            assert!((40..=60).contains(&video.gt.len()));
        }
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let spec = SynthSpec {
            n_videos: 3,
            frames_lo: 30,
            frames_hi: 40,
            classes: 3,
            mean_segment_len: 6,
            train_fraction: 0.67,
            corruption: CorruptionConfig { feature_dim: 4, seed: 5, ..Default::default() },
        };
        let read_all = |root: &Path| -> Vec<(String, Vec<u8>)> {
            let mut files = Vec::new();
            let mut stack = vec![root.to_path_buf()];
            while let Some(dir) = stack.pop() {
                let mut entries: Vec<_> =
                    std::fs::read_dir(&dir).unwrap().map(|e| e.unwrap().path()).collect();
                entries.sort();
                for path in entries {
                    if path.is_dir() {
                        stack.push(path);
                    } else {
                        let rel = path.strip_prefix(root).unwrap().display().to_string();
                        files.push((rel, std::fs::read(&path).unwrap()));
                    }
                }
            }
            files.sort();
            files
        };
        let dir_a = tempdir().unwrap();
        let dir_b = tempdir().unwrap();
        make_synthetic_dataset(&spec, dir_a.path()).unwrap();
        make_synthetic_dataset(&spec, dir_b.path()).unwrap();
        assert_eq!(read_all(dir_a.path()), read_all(dir_b.path()));
    }

    #[test]
    fn missing_video_is_not_found() {
        let dir = tempdir().unwrap();
        let spec = SynthSpec {
            n_videos: 1,
            frames_lo: 20,
            frames_hi: 20,
            classes: 2,
            mean_segment_len: 5,
            train_fraction: 1.0,
            corruption: CorruptionConfig { feature_dim: 3, ..Default::default() },
        };
        let layout = make_synthetic_dataset(&spec, dir.path()).unwrap();
        let map = layout.class_map().unwrap();
        assert!(matches!(layout.load_video("vid_999", &map), Err(Error::NotFound(_))));
        assert!(matches!(layout.read_split("bogus"), Err(Error::NotFound(_))));
    }

    #[test]
    fn length_mismatch_is_integrity_error_with_both_lengths() {
        let dir = tempdir().unwrap();
        let spec = SynthSpec {
            n_videos: 1,
            frames_lo: 20,
            frames_hi: 20,
            classes: 2,
            mean_segment_len: 5,
            train_fraction: 1.0,
            corruption: CorruptionConfig { feature_dim: 3, ..Default::default() },
        };
        let layout = make_synthetic_dataset(&spec, dir.path()).unwrap();
        let map = layout.class_map().unwrap();
        // Overwrite the features with a wrong-length matrix.
        write_features(&layout.features_path("vid_000"), &Tensor::zeros(vec![5, 3])).unwrap();
        match layout.load_video("vid_000", &map) {
            Err(Error::Integrity(msg)) => {
                assert!(msg.contains('5') && msg.contains("20"), "{msg}");
            }
            other => panic!("expected integrity error, got {other:?}"),
        }
    }
}
