//! Flow-to-image conversion, dataset manifests and zero-positive splits.
//!
//! A traffic flow is an ordered list of packets; each packet's bytes are
//! reshaped row-major into an `H x W` plane (divide by 255, zero-pad or
//! truncate to `H*W`), and the first `P` planes are stacked into a
//! `P x H x W` sample. Samples live on disk as raw little-endian `f32`
//! blobs indexed by a TOML manifest that carries the shape.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::spectral;

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const SCHEMA_VERSION: u32 = 1;

/// Ground-truth class of a flow or sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Anomalous,
    Unknown,
}

impl Label {
    pub fn as_str(&self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Anomalous => "anomalous",
            Label::Unknown => "unknown",
        }
    }

    pub fn parse(s: &str) -> Result<Label> {
        match s.trim().to_ascii_lowercase().as_str() {
            "normal" => Ok(Label::Normal),
            "anomalous" | "anomaly" => Ok(Label::Anomalous),
            "unknown" => Ok(Label::Unknown),
            other => Err(Error::Data(format!("unknown label {other:?}"))),
        }
    }
}

/// A raw flow: ordered packets of bytes plus a label.
#[derive(Debug, Clone)]
pub struct RawFlow {
    pub flow_id: String,
    pub packets: Vec<Vec<u8>>,
    pub label: Label,
}

/// Sample geometry shared by a whole corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleShape {
    pub p: usize,
    pub h: usize,
    pub w: usize,
}

impl SampleShape {
    pub fn new(p: usize, h: usize, w: usize) -> Self {
        SampleShape { p, h, w }
    }

    pub fn len(&self) -> usize {
        self.p * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A `P x H x W` traffic image with values in `[0, 1]`.
///
/// The constructor enforces the range/finiteness invariant, so any
/// `TrafficSample` in the program is valid by construction.
#[derive(Debug, Clone)]
pub struct TrafficSample {
    data: Array3<f32>,
    pub label: Label,
    pub source_id: String,
}

impl TrafficSample {
    pub fn new(data: Array3<f32>, label: Label, source_id: impl Into<String>) -> Result<Self> {
        for &v in data.iter() {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::Data(format!(
                    "sample value {v} outside [0, 1] or not finite"
                )));
            }
        }
        Ok(TrafficSample {
            data,
            label,
            source_id: source_id.into(),
        })
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn shape(&self) -> SampleShape {
        let s = self.data.shape();
        SampleShape::new(s[0], s[1], s[2])
    }

    /// Data widened to `f64` for the spectral/model pipeline.
    pub fn to_f64(&self) -> Array3<f64> {
        self.data.mapv(|v| v as f64)
    }
}

/// One manifest entry; `path` is relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub path: String,
    pub label: Label,
    pub source_id: String,
}

/// Index of a corpus on disk: shape header plus one record per sample file.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub shape: SampleShape,
    pub records: Vec<ManifestRecord>,
    /// Directory the record paths are resolved against.
    pub root: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct ManifestFilev1 {
    schema_version: u32,
    p: usize,
    h: usize,
    w: usize,
    #[serde(default, rename = "sample")]
    samples: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn counts(&self) -> BTreeMap<Label, usize> {
        let mut m = BTreeMap::new();
        for r in &self.records {
            *m.entry(r.label).or_insert(0) += 1;
        }
        m
    }

    pub fn count(&self, label: Label) -> usize {
        self.records.iter().filter(|r| r.label == label).count()
    }

    pub fn save(&self) -> Result<()> {
        let file = ManifestFilev1 {
            schema_version: self.schema_version,
            p: self.shape.p,
            h: self.shape.h,
            w: self.shape.w,
            samples: self.records.clone(),
        };
        let text = toml::to_string(&file)
            .map_err(|e| Error::Data(format!("manifest serialization failed: {e}")))?;
        let path = self.root.join(MANIFEST_FILE);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let file: ManifestFilev1 = toml::from_str(&text)
            .map_err(|e| Error::Data(format!("manifest parse failed: {e}")))?;
        if file.schema_version != SCHEMA_VERSION {
            return Err(Error::Data(format!(
                "unsupported manifest schema version {}",
                file.schema_version
            )));
        }
        let manifest = DatasetManifest {
            schema_version: file.schema_version,
            shape: SampleShape::new(file.p, file.h, file.w),
            records: file.samples,
            root: dir.to_path_buf(),
        };
        manifest.validate()?;
        Ok(manifest)
    }

    /// Checks every referenced file exists and has the declared byte length.
    pub fn validate(&self) -> Result<()> {
        let expect = self.shape.len() as u64 * 4;
        for r in &self.records {
            let path = self.root.join(&r.path);
            let meta = fs::metadata(&path).map_err(|e| Error::io(&path, e))?;
            if meta.len() != expect {
                return Err(Error::Shape(format!(
                    "{} holds {} bytes, expected {} for {}x{}x{} f32",
                    path.display(),
                    meta.len(),
                    expect,
                    self.shape.p,
                    self.shape.h,
                    self.shape.w
                )));
            }
        }
        Ok(())
    }

    pub fn load_record(&self, record: &ManifestRecord) -> Result<TrafficSample> {
        let path = self.root.join(&record.path);
        let data = read_sample_data(&path, self.shape)?;
        TrafficSample::new(data, record.label, record.source_id.clone())
    }

    pub fn load_all(&self) -> Result<Vec<TrafficSample>> {
        self.records.iter().map(|r| self.load_record(r)).collect()
    }
}

/// Reshapes one packet's bytes into an `H x W` plane in `[0, 1]`.
///
/// The first `H*W` bytes are laid out row-major and divided by 255; shorter
/// packets are zero-padded at the tail and longer ones truncated.
pub fn packet_to_image(packet: &[u8], h: usize, w: usize) -> Array2<f32> {
    let mut plane = Array2::<f32>::zeros((h, w));
    for (i, &b) in packet.iter().take(h * w).enumerate() {
        plane[[i / w, i % w]] = b as f32 / 255.0;
    }
    plane
}

/// Stacks the first `p` packets of a flow into a sample, zero-padding
/// missing planes. The flow label and id carry over.
pub fn flow_to_sample(flow: &RawFlow, p: usize, h: usize, w: usize) -> TrafficSample {
    let mut data = Array3::<f32>::zeros((p, h, w));
    for (k, packet) in flow.packets.iter().take(p).enumerate() {
        data.slice_mut(ndarray::s![k, .., ..])
            .assign(&packet_to_image(packet, h, w));
    }
    TrafficSample {
        data,
        label: flow.label,
        source_id: flow.flow_id.clone(),
    }
}

/// Draws exactly `train_size` normal records with the seeded generator;
/// everything else (remaining normals plus all non-normals) becomes the
/// test set in manifest order. The train set never contains an anomaly.
pub fn build_split(
    manifest: &DatasetManifest,
    train_size: usize,
    seed: u64,
) -> Result<(Vec<ManifestRecord>, Vec<ManifestRecord>)> {
    let normal_idx: Vec<usize> = manifest
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.label == Label::Normal)
        .map(|(i, _)| i)
        .collect();
    if normal_idx.len() < train_size {
        return Err(Error::InsufficientNormals {
            need: train_size,
            have: normal_idx.len(),
        });
    }
    let mut shuffled = normal_idx;
    shuffled.shuffle(&mut stream(seed, 0x5871_1700));
    let train_set: std::collections::HashSet<usize> =
        shuffled[..train_size].iter().copied().collect();
    let train = shuffled[..train_size]
        .iter()
        .map(|&i| manifest.records[i].clone())
        .collect();
    let test = manifest
        .records
        .iter()
        .enumerate()
        .filter(|(i, _)| !train_set.contains(i))
        .map(|(_, r)| r.clone())
        .collect();
    Ok((train, test))
}

// ---------------------------------------------------------------------------
// On-disk sample format: raw little-endian f32, row-major P x H x W, no header.
// ---------------------------------------------------------------------------

pub fn write_sample_data(path: &Path, data: &Array3<f32>) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for &v in data.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_sample_data(path: &Path, shape: SampleShape) -> Result<Array3<f32>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() != shape.len() * 4 {
        return Err(Error::Shape(format!(
            "{} holds {} bytes, expected {}",
            path.display(),
            bytes.len(),
            shape.len() * 4
        )));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Array3::from_shape_vec((shape.p, shape.h, shape.w), values)
        .map_err(|e| Error::Shape(e.to_string()))
}

/// Writes a set of samples under `dir/samples/` and indexes them with a
/// manifest at `dir/manifest.toml`.
pub fn write_corpus(dir: &Path, samples: &[TrafficSample]) -> Result<DatasetManifest> {
    let shape = match samples.first() {
        Some(s) => s.shape(),
        None => return Err(Error::Data("cannot write an empty corpus".into())),
    };
    let sample_dir = dir.join("samples");
    fs::create_dir_all(&sample_dir).map_err(|e| Error::io(&sample_dir, e))?;
    let mut records = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        if s.shape() != shape {
            return Err(Error::Shape(format!(
                "sample {} shape differs from corpus shape",
                s.source_id
            )));
        }
        let rel = format!("samples/{}_{:06}.bin", s.label.as_str(), i);
        write_sample_data(&dir.join(&rel), s.data())?;
        records.push(ManifestRecord {
            path: rel,
            label: s.label,
            source_id: s.source_id.clone(),
        });
    }
    let manifest = DatasetManifest {
        schema_version: SCHEMA_VERSION,
        shape,
        records,
        root: dir.to_path_buf(),
    };
    manifest.save()?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// Synthetic corpus
// ---------------------------------------------------------------------------

/// Generator parameters for the synthetic corpus.
///
/// Each class owns a smooth template plus a small basis of high-frequency
/// texture fields. A normal sample is its class template plus a random
/// positive mixture over the class basis (renormalized to `texture_amp`)
/// plus noise, so normals vary but stay inside the class texture span.
/// Anomalies blend in a fresh texture drawn outside the basis at the same
/// amplitude (and optionally drift the smooth template), so the anomaly
/// lives in the *pattern* of the high band, not its energy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub p: usize,
    pub h: usize,
    pub w: usize,
    pub n_classes: usize,
    /// Number of texture basis fields per class; 1 means a fixed texture.
    pub textures_per_class: usize,
    /// Standard deviation of the high-frequency texture field.
    pub texture_amp: f64,
    /// Half-width of the uniform per-element noise.
    pub noise_amp: f64,
    /// Gaussian cutoff used to shape the synthetic texture band.
    pub cutoff: f64,
    /// Fraction of the sample texture replaced by a fresh one in anomalies.
    pub anomaly_texture_mix: f64,
    /// Drift of the anomalous low-frequency template toward the next class.
    pub anomaly_low_shift: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            p: 8,
            h: 32,
            w: 32,
            n_classes: 2,
            textures_per_class: 4,
            texture_amp: 0.18,
            noise_amp: 0.02,
            cutoff: 5.0,
            anomaly_texture_mix: 1.0,
            anomaly_low_shift: 0.0,
        }
    }
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        if self.p == 0 || self.h == 0 || self.w == 0 {
            return Err(Error::Config("sample dimensions must be positive".into()));
        }
        if self.n_classes == 0 {
            return Err(Error::Config("n_classes must be >= 1".into()));
        }
        if self.textures_per_class == 0 {
            return Err(Error::Config("textures_per_class must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.anomaly_texture_mix) {
            return Err(Error::Config("anomaly_texture_mix must lie in [0,1]".into()));
        }
        if self.cutoff <= 0.0 {
            return Err(Error::Config("cutoff must be positive".into()));
        }
        Ok(())
    }
}

fn gaussian_blob_template(spec: &SynthSpec, class: usize, seed: u64) -> Array3<f64> {
    let mut rng = stream(seed, 0xB10B_0000 + class as u64);
    let (p, h, w) = (spec.p, spec.h, spec.w);
    let mut t = Array3::<f64>::zeros((p, h, w));
    for plane in 0..p {
        let n_blobs = 3;
        for _ in 0..n_blobs {
            let ch = rng.gen_range(0.0..h as f64);
            let cw = rng.gen_range(0.0..w as f64);
            let sigma = rng.gen_range(h as f64 / 6.0..h as f64 / 3.0);
            let amp = rng.gen_range(0.5..1.0);
            for y in 0..h {
                for x in 0..w {
                    let d2 = (y as f64 - ch).powi(2) + (x as f64 - cw).powi(2);
                    t[[plane, y, x]] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
                }
            }
        }
    }
    // rescale into [0.25, 0.75] so texture + noise rarely clip
    let min = t.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = t.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (max - min).max(1e-12);
    t.mapv(|v| 0.25 + 0.5 * (v - min) / span)
}

/// Recenters `t` to zero mean and rescales it to standard deviation `amp`.
fn normalize_to_amp(t: &mut Array3<f64>, amp: f64) {
    let n = t.len() as f64;
    let mean = t.sum() / n;
    let var = t.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let scale = amp / var.sqrt().max(1e-12);
    t.mapv_inplace(|v| (v - mean) * scale);
}

fn highpass_texture(spec: &SynthSpec, seed: u64, tag: u64) -> Result<Array3<f64>> {
    let mut rng = stream(seed, tag);
    let (p, h, w) = (spec.p, spec.h, spec.w);
    let mut white = Array3::<f64>::zeros((p, h, w));
    for v in white.iter_mut() {
        *v = rng.sample::<f64, _>(rand_distr::StandardNormal);
    }
    let bands = spectral::decouple_array(&white, spec.cutoff)?;
    let mut tex = bands.high;
    normalize_to_amp(&mut tex, spec.texture_amp);
    Ok(tex)
}

/// Random sign-symmetric mixture over a class texture basis, renormalized to
/// `amp`. Symmetric coefficients keep the normal population free of a common
/// mean direction a linear probe could latch onto.
fn texture_from_basis<R: Rng>(basis: &[Array3<f64>], rng: &mut R, amp: f64) -> Array3<f64> {
    let mut t = Array3::<f64>::zeros(basis[0].dim());
    for b in basis {
        let c = rng.gen_range(-1.0..1.0);
        t.scaled_add(c, b);
    }
    normalize_to_amp(&mut t, amp);
    t
}

fn mix_textures(base: &Array3<f64>, fresh: &Array3<f64>, mix: f64, amp: f64) -> Array3<f64> {
    let mut t = base * (1.0 - mix) + fresh * mix;
    normalize_to_amp(&mut t, amp);
    t
}

/// Generates a labeled synthetic corpus under `dir` and returns its manifest.
/// Deterministic in `seed`: the same call produces byte-identical files.
pub fn synth_corpus(
    dir: &Path,
    n_normal: usize,
    n_anomalous: usize,
    seed: u64,
    spec: &SynthSpec,
) -> Result<DatasetManifest> {
    spec.validate()?;
    let templates: Vec<Array3<f64>> = (0..spec.n_classes)
        .map(|k| gaussian_blob_template(spec, k, seed))
        .collect();
    let bases: Vec<Vec<Array3<f64>>> = (0..spec.n_classes)
        .map(|k| {
            (0..spec.textures_per_class)
                .map(|j| {
                    let tag = 0x7E87_0000 + (k * spec.textures_per_class + j) as u64;
                    highpass_texture(spec, seed, tag)
                })
                .collect::<Result<_>>()
        })
        .collect::<Result<_>>()?;

    let mut samples = Vec::with_capacity(n_normal + n_anomalous);
    for i in 0..n_normal {
        let k = i % spec.n_classes;
        let mut rng = stream(seed, 0x4E00_0000 + i as u64);
        let tex = texture_from_basis(&bases[k], &mut rng, spec.texture_amp);
        let mut data = &templates[k] + &tex;
        for v in data.iter_mut() {
            *v += rng.gen_range(-spec.noise_amp..=spec.noise_amp);
        }
        samples.push(quantize(data, Label::Normal, format!("synth-n-{i:06}")));
    }
    for j in 0..n_anomalous {
        let k = j % spec.n_classes;
        let mut rng = stream(seed, 0xA401_0000 + j as u64);
        let own = texture_from_basis(&bases[k], &mut rng, spec.texture_amp);
        let fresh = highpass_texture(spec, seed, 0xA400_0000 + j as u64)?;
        let tex = mix_textures(&own, &fresh, spec.anomaly_texture_mix, spec.texture_amp);
        let mut template = templates[k].clone();
        if spec.anomaly_low_shift > 0.0 && spec.n_classes > 1 {
            let other = &templates[(k + 1) % spec.n_classes];
            template = &template * (1.0 - spec.anomaly_low_shift) + other * spec.anomaly_low_shift;
        }
        let mut data = template + tex;
        for v in data.iter_mut() {
            *v += rng.gen_range(-spec.noise_amp..=spec.noise_amp);
        }
        samples.push(quantize(data, Label::Anomalous, format!("synth-a-{j:06}")));
    }
    write_corpus(dir, &samples)
}

fn quantize(data: Array3<f64>, label: Label, source_id: String) -> TrafficSample {
    let data = data.mapv(|v| v.clamp(0.0, 1.0) as f32);
    TrafficSample {
        data,
        label,
        source_id,
    }
}

// ---------------------------------------------------------------------------
// External flow layouts
// ---------------------------------------------------------------------------

/// Reads flows from `root/<label>/<flow_id>/<packet files>`, packets ordered
/// by filename. Labels are the directory names `normal`, `anomalous`,
/// `unknown`; other top-level directories are rejected.
pub fn ingest_flow_dir(root: &Path) -> Result<Vec<RawFlow>> {
    let mut flows = Vec::new();
    let mut label_dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    label_dirs.sort();
    for label_dir in label_dirs {
        let name = label_dir
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string();
        let label = Label::parse(&name)?;
        let mut flow_dirs: Vec<PathBuf> = fs::read_dir(&label_dir)
            .map_err(|e| Error::io(&label_dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        flow_dirs.sort();
        for flow_dir in flow_dirs {
            let mut packet_files: Vec<PathBuf> = fs::read_dir(&flow_dir)
                .map_err(|e| Error::io(&flow_dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file())
                .collect();
            packet_files.sort();
            let mut packets = Vec::with_capacity(packet_files.len());
            for pf in packet_files {
                packets.push(fs::read(&pf).map_err(|e| Error::io(&pf, e))?);
            }
            let flow_id = format!(
                "{}/{}",
                name,
                flow_dir.file_name().and_then(|n| n.to_str()).unwrap_or("?")
            );
            flows.push(RawFlow {
                flow_id,
                packets,
                label,
            });
        }
    }
    Ok(flows)
}

/// Reads flows from a CSV with header `flow_id,label,packets` where
/// `packets` is a space-separated list of hex-encoded packet bodies.
pub fn ingest_hex_csv(path: &Path) -> Result<Vec<RawFlow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => Error::Data(format!("cannot open {}: {e}", path.display())),
        _ => Error::Data(format!("csv error in {}: {e}", path.display())),
    })?;
    let mut flows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Data(format!("csv error: {e}")))?;
        if record.len() < 3 {
            return Err(Error::Data(format!(
                "hex csv rows need 3 fields, found {}",
                record.len()
            )));
        }
        let flow_id = record[0].to_string();
        let label = Label::parse(&record[1])?;
        let mut packets = Vec::new();
        for tok in record[2].split_whitespace() {
            let bytes = hex::decode(tok)
                .map_err(|e| Error::Data(format!("bad hex packet in flow {flow_id}: {e}")))?;
            packets.push(bytes);
        }
        flows.push(RawFlow {
            flow_id,
            packets,
            label,
        });
    }
    Ok(flows)
}
