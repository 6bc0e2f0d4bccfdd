//! Synthetic longitudinal cohort and its on-disk format.
//!
//! Each patient has 2–8 visits separated by gaps drawn from a fixed set of
//! month values. A latent lesion intensity `g` follows
//! `g_t = g_{t−1} + r·Δt_t + 𝒩(0, σ_g)`; every view of a visit shows a
//! Gaussian blob of amplitude `g_t` over background noise. Cases have `r > 0`
//! and sit a margin `m` below the threshold `θ` at their last visit, so `g`
//! reaches `θ` after `m / r` months; the event follows after an extra lead
//! time. Controls have `r = 0` and are censored.
//!
//! # Layout
//!
//! A dataset directory holds `manifest.json` and one `<id>.f32` payload per
//! patient. Payloads are little-endian `f32`, row-major, with the present
//! views of every visit concatenated in visit order. The manifest records
//! for every tensor its byte offset and shape, and the SHA-256 of each
//! payload file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::hazard::{Outcome, MONTHS_PER_YEAR};
use crate::model::{ImageConfig, Visit, VisitContent, MAX_VIEWS};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const DTYPE_F32LE: &str = "f32le";

/// Lesion model parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlobSpec {
    /// Event threshold `θ` on the latent intensity.
    pub threshold: f64,
    /// Growth rates of cases are log-uniform in this range (per month).
    pub rate_range: [f64; 2],
    /// Distance `θ − g` of a case at its last visit (uniform).
    pub margin_range: [f64; 2],
    /// Std of the per-visit random-walk term.
    pub drift_std: f64,
    /// Control intensities are uniform in this range.
    pub control_level: [f64; 2],
    /// Blob radius (std, pixels).
    pub width: f64,
    /// Background pixel noise std.
    pub noise_std: f64,
    /// Std of a per-visit intensity offset shared by all views of a visit.
    pub exposure_std: f64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self {
            threshold: 3.0,
            rate_range: [0.025, 0.12],
            margin_range: [1.0, 1.5],
            drift_std: 0.05,
            control_level: [0.0, 2.0],
            width: 6.0,
            noise_std: 0.02,
            exposure_std: 0.5,
        }
    }
}

/// Everything that determines a generated cohort.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortSpec {
    pub seed: u64,
    pub patients: usize,
    /// Inclusive range of visits per patient.
    pub visits: [usize; 2],
    /// Inter-visit gaps in months.
    pub gap_choices: Vec<f64>,
    /// Chance that a gap repeats the patient's preferred gap instead of
    /// being drawn afresh.
    pub gap_persistence: f64,
    pub case_fraction: f64,
    pub image_size: usize,
    pub views: usize,
    /// Chance that a view is absent (at least one view is always kept).
    pub missing_view_prob: f64,
    pub blob: BlobSpec,
    /// Upper bound of the uniform lead time added to the crossing time.
    pub lead_months: f64,
    /// Control follow-up after the last visit (uniform, months).
    pub follow_up_months: [f64; 2],
    pub folds: usize,
}

impl Default for CohortSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            patients: 1000,
            visits: [2, 8],
            gap_choices: vec![12.0, 18.0, 24.0, 30.0, 36.0],
            gap_persistence: 0.8,
            case_fraction: 0.8,
            image_size: 32,
            views: MAX_VIEWS,
            missing_view_prob: 0.1,
            blob: BlobSpec::default(),
            lead_months: 12.0,
            follow_up_months: [12.0, 72.0],
            folds: 5,
        }
    }
}

impl CohortSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patients == 0 {
            return bad("patients must be positive".into());
        }
        if self.visits[0] < 2 || self.visits[1] < self.visits[0] {
            return bad(format!("visit range {:?} must satisfy 2 ≤ min ≤ max", self.visits));
        }
        if self.gap_choices.is_empty() || self.gap_choices.iter().any(|g| !(12.0..=36.0).contains(g)) {
            return bad(format!("gap choices {:?} must be non-empty within [12, 36]", self.gap_choices));
        }
        if !(0.0..=1.0).contains(&self.case_fraction) {
            return bad(format!("case fraction {} outside [0, 1]", self.case_fraction));
        }
        if self.image_size == 0 || self.views == 0 || self.views > MAX_VIEWS {
            return bad(format!("image size {} / views {} invalid", self.image_size, self.views));
        }
        if !(0.0..=1.0).contains(&self.gap_persistence) {
            return bad("gap persistence must lie in [0, 1]".into());
        }
        if !(0.0..1.0).contains(&self.missing_view_prob) {
            return bad("missing view probability must lie in [0, 1)".into());
        }
        let b = &self.blob;
        if !(b.rate_range[0] > 0.0 && b.rate_range[1] >= b.rate_range[0]) {
            return bad(format!("rate range {:?} must be positive and ordered", b.rate_range));
        }
        if b.control_level[1] < b.control_level[0] || b.control_level[1] >= b.threshold {
            return bad("control levels must be ordered and below the threshold".into());
        }
        if !(b.width > 0.0 && b.noise_std >= 0.0 && b.drift_std >= 0.0 && b.exposure_std >= 0.0) {
            return bad("blob width must be positive and noise non-negative".into());
        }
        let ordered = |r: [f64; 2]| r[0] > 0.0 && r[1] >= r[0];
        if !ordered(b.margin_range) || !ordered(self.follow_up_months) || self.lead_months < 0.0 {
            return bad("margin, lead and follow-up ranges must be positive and ordered".into());
        }
        if self.folds < 2 {
            return bad("need at least two folds".into());
        }
        Ok(())
    }

    pub fn image(&self) -> [usize; 3] {
        [1, self.image_size, self.image_size]
    }
}

/// Patient-level fold from a hash of the id.
pub fn fold_of(id: &str, folds: usize) -> usize {
    let digest = Sha256::digest(id.as_bytes());
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    (u64::from_le_bytes(head) % folds as u64) as usize
}

pub fn patient_id(index: usize) -> String {
    format!("p{index:05}")
}

/// One patient as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct PatientRecord {
    pub id: String,
    pub visits: Vec<Visit>,
    pub outcome: Outcome,
    pub fold: usize,
}

impl PatientRecord {
    /// Gaps between consecutive visits, with 0 for the first.
    pub fn gaps(&self) -> Vec<f64> {
        visit_gaps(&self.visits)
    }
}

fn visit_gaps(visits: &[Visit]) -> Vec<f64> {
    (0..visits.len())
        .map(|i| if i == 0 { 0.0 } else { visits[i].time - visits[i - 1].time })
        .collect()
}

/// Generator-side truth kept alongside the images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentTruth {
    pub rate: f64,
    pub levels: Vec<f64>,
}

/// Event time after the last visit for a case at latent `level` growing at
/// `rate`, with lead time `lead`.
pub fn case_event_time(level: f64, rate: f64, threshold: f64, lead: f64) -> f64 {
    (threshold - level) / rate + lead
}

/// Two case histories with identical per-visit intensities but different
/// gaps must imply different growth rates and event times.
pub fn audit_gap_dependence(spec: &CohortSpec) -> Result<()> {
    let (short, long) = (spec.gap_choices.iter().cloned().fold(f64::INFINITY, f64::min), spec.gap_choices.iter().cloned().fold(0.0, f64::max));
    let levels = [spec.blob.threshold * 0.25, spec.blob.threshold * 0.5];
    let rise = levels[1] - levels[0];
    let (r_short, r_long) = (rise / short, rise / long);
    let t_short = case_event_time(levels[1], r_short, spec.blob.threshold, 0.0);
    let t_long = case_event_time(levels[1], r_long, spec.blob.threshold, 0.0);
    if short == long || r_short == r_long || t_short == t_long {
        return Err(Error::Config(
            "gap choices do not separate growth rates; identical images would imply identical outcomes".into(),
        ));
    }
    Ok(())
}

fn log_uniform(rng: &mut impl Rng, range: [f64; 2]) -> f64 {
    if range[0] == range[1] {
        return range[0];
    }
    (rng.gen_range(range[0].ln()..range[1].ln())).exp()
}

fn uniform(rng: &mut impl Rng, range: [f64; 2]) -> f64 {
    if range[0] == range[1] {
        return range[0];
    }
    rng.gen_range(range[0]..range[1])
}

fn render_view(
    spec: &CohortSpec,
    center: (f64, f64),
    amplitude: f64,
    offset: f64,
    rng: &mut impl Rng,
) -> Tensor {
    let s = spec.image_size;
    let noise = Normal::new(0.0, spec.blob.noise_std).expect("finite std");
    let two_w2 = 2.0 * spec.blob.width * spec.blob.width;
    Tensor::from_fn(&[1, s, s], |i| {
        let (y, x) = ((i / s) as f64, (i % s) as f64);
        let r2 = (y - center.0).powi(2) + (x - center.1).powi(2);
        // payloads are stored as f32
        (offset + amplitude * (-r2 / two_w2).exp() + noise.sample(rng)) as f32 as f64
    })
}

const MAX_CASE_TRIES: usize = 10_000;

/// Generates patient `index`; deterministic in `(spec, index)`.
pub fn generate_patient(spec: &CohortSpec, index: usize) -> Result<(PatientRecord, LatentTruth)> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let n_visits = rng.gen_range(spec.visits[0]..=spec.visits[1]);
    let choices = &spec.gap_choices;
    let preferred = choices[rng.gen_range(0..choices.len())];
    let gaps: Vec<f64> = (0..n_visits)
        .map(|i| {
            if i == 0 {
                0.0
            } else if rng.gen_bool(spec.gap_persistence) {
                preferred
            } else {
                choices[rng.gen_range(0..choices.len())]
            }
        })
        .collect();
    let span: f64 = gaps.iter().sum();
    let is_case = rng.gen_bool(spec.case_fraction);
    let b = &spec.blob;
    let drift = Normal::new(0.0, b.drift_std).expect("finite std");

    let (rate, levels, outcome) = if is_case {
        let mut found = None;
        for _ in 0..MAX_CASE_TRIES {
            let rate = log_uniform(&mut rng, b.rate_range);
            let margin = uniform(&mut rng, b.margin_range);
            let noise: Vec<f64> = (1..n_visits).map(|_| drift.sample(&mut rng)).collect();
            // start low enough that the walk ends exactly `margin` below θ
            let mut g = b.threshold - margin - rate * span - noise.iter().sum::<f64>();
            let mut levels = Vec::with_capacity(n_visits);
            for (i, &gap) in gaps.iter().enumerate() {
                if i > 0 {
                    g += rate * gap + noise[i - 1];
                }
                levels.push(g);
            }
            if levels.iter().all(|&l| l < b.threshold) {
                let lead = uniform(&mut rng, [0.0, spec.lead_months]);
                let time = case_event_time(*levels.last().expect("≥2 visits"), rate, b.threshold, lead);
                found = Some((rate, levels, Outcome::Event { time }));
                break;
            }
        }
        found.ok_or_else(|| Error::Config(format!("patient {index}: could not place a case below θ")))?
    } else {
        let level = uniform(&mut rng, b.control_level);
        let mut g = level;
        let levels = gaps
            .iter()
            .enumerate()
            .map(|(i, _)| {
                if i > 0 {
                    g += drift.sample(&mut rng);
                }
                g
            })
            .collect();
        let follow_up = uniform(&mut rng, spec.follow_up_months);
        (0.0, levels, Outcome::Censored { follow_up })
    };

    let margin = (2.0 * b.width).min(spec.image_size as f64 / 2.0);
    let hi = spec.image_size as f64 - margin;
    let center = if hi > margin {
        (rng.gen_range(margin..hi), rng.gen_range(margin..hi))
    } else {
        (spec.image_size as f64 / 2.0, spec.image_size as f64 / 2.0)
    };

    let exposure = Normal::new(0.0, b.exposure_std).expect("finite std");
    let mut time = 0.0;
    let mut visits = Vec::with_capacity(n_visits);
    for (&gap, &level) in gaps.iter().zip(&levels) {
        time += gap;
        let offset = exposure.sample(&mut rng);
        let keep_first = rng.gen_range(0..spec.views);
        let views = (0..spec.views)
            .map(|v| {
                let present = v == keep_first || !rng.gen_bool(spec.missing_view_prob);
                let img = render_view(spec, center, level, offset, &mut rng);
                present.then_some(img)
            })
            .collect();
        visits.push(Visit {
            time,
            content: VisitContent::Views(views),
        });
    }
    let id = patient_id(index);
    let fold = fold_of(&id, spec.folds);
    Ok((
        PatientRecord {
            id,
            visits,
            outcome,
            fold,
        },
        LatentTruth { rate, levels },
    ))
}

/// Generates the whole cohort in memory.
pub fn generate_records(spec: &CohortSpec) -> Result<Vec<PatientRecord>> {
    spec.validate()?;
    audit_gap_dependence(spec)?;
    (0..spec.patients).map(|i| generate_patient(spec, i).map(|(r, _)| r)).collect()
}

/// Reference to a tensor inside a payload file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRef {
    /// Byte offset in the patient's payload file.
    pub offset: u64,
    pub shape: Vec<usize>,
}

impl TensorRef {
    pub fn byte_len(&self) -> u64 {
        4 * self.shape.iter().product::<usize>() as u64
    }
}

/// Images or precomputed features of one visit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisitPayload {
    /// One entry per view slot; `null` for an absent view.
    Views(Vec<Option<TensorRef>>),
    Features(TensorRef),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisitEntry {
    /// Months since the first visit.
    pub time: f64,
    /// Months since the previous visit; 0 for the first.
    pub gap: f64,
    #[serde(flatten)]
    pub payload: VisitPayload,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatientEntry {
    pub id: String,
    pub fold: usize,
    /// Payload file, relative to the manifest.
    pub file: String,
    pub bytes: u64,
    pub sha256: String,
    pub outcome: Outcome,
    pub visits: Vec<VisitEntry>,
}

/// Contents of `manifest.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub dtype: String,
    /// Image extent `[C, H, W]` of every view.
    pub image: [usize; 3],
    pub folds: usize,
    /// Generator settings, when the data is synthetic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cohort: Option<CohortSpec>,
    pub patients: Vec<PatientEntry>,
}

impl DatasetManifest {
    pub fn image_config(&self, patch: usize) -> ImageConfig {
        ImageConfig {
            channels: self.image[0],
            height: self.image[1],
            width: self.image[2],
            patch,
        }
    }

    /// Patient ids per fold.
    pub fn splits(&self) -> BTreeMap<usize, Vec<String>> {
        let mut m: BTreeMap<usize, Vec<String>> = BTreeMap::new();
        for p in &self.patients {
            m.entry(p.fold).or_default().push(p.id.clone());
        }
        m
    }
}

fn push_tensor(buf: &mut Vec<u8>, t: &Tensor) -> TensorRef {
    let offset = buf.len() as u64;
    for &v in t.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    TensorRef {
        offset,
        shape: t.shape().to_vec(),
    }
}

fn encode_patient(rec: &PatientRecord) -> (Vec<u8>, Vec<VisitEntry>) {
    let mut buf = Vec::new();
    let gaps = rec.gaps();
    let visits = rec
        .visits
        .iter()
        .zip(gaps)
        .map(|(v, gap)| {
            let payload = match &v.content {
                VisitContent::Views(views) => {
                    VisitPayload::Views(views.iter().map(|img| img.as_ref().map(|t| push_tensor(&mut buf, t))).collect())
                }
                VisitContent::Features(f) => VisitPayload::Features(push_tensor(&mut buf, f)),
            };
            VisitEntry {
                time: v.time,
                gap,
                payload,
            }
        })
        .collect();
    (buf, visits)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `records` as a dataset directory and returns its manifest.
pub fn write_dataset(
    dir: &Path,
    records: &[PatientRecord],
    image: [usize; 3],
    folds: usize,
    cohort: Option<&CohortSpec>,
) -> Result<DatasetManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut patients = Vec::with_capacity(records.len());
    for rec in records {
        let (buf, visits) = encode_patient(rec);
        let file = format!("{}.f32", rec.id);
        write_file(&dir.join(&file), &buf)?;
        patients.push(PatientEntry {
            id: rec.id.clone(),
            fold: rec.fold,
            file,
            bytes: buf.len() as u64,
            sha256: hex::encode(Sha256::digest(&buf)),
            outcome: rec.outcome,
            visits,
        });
    }
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        dtype: DTYPE_F32LE.into(),
        image,
        folds,
        cohort: cohort.cloned(),
        patients,
    };
    let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json("manifest", e))?;
    text.push('\n');
    write_file(&dir.join(MANIFEST_FILE), text.as_bytes())?;
    Ok(manifest)
}

/// Generates a cohort and writes it to `dir`.
pub fn generate(spec: &CohortSpec, dir: &Path) -> Result<DatasetManifest> {
    let records = generate_records(spec)?;
    write_dataset(dir, &records, spec.image(), spec.folds, Some(spec))
}

/// Reads and checks `manifest.json` in `dir`.
pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Data(format!(
            "unsupported format version {} (expected {FORMAT_VERSION})",
            m.format_version
        )));
    }
    if m.dtype != DTYPE_F32LE {
        return Err(Error::Data(format!("unsupported dtype {:?}", m.dtype)));
    }
    if m.folds == 0 {
        return Err(Error::Data("fold count must be positive".into()));
    }
    let mut seen = std::collections::BTreeSet::new();
    for p in &m.patients {
        if !seen.insert(&p.id) {
            return Err(Error::Data(format!("patient {} appears twice", p.id)));
        }
        if p.fold >= m.folds {
            return Err(Error::Data(format!("patient {}: fold {} of {}", p.id, p.fold, m.folds)));
        }
    }
    Ok(m)
}

fn decode_tensor(id: &str, buf: &[u8], r: &TensorRef) -> Result<Tensor> {
    let start = r.offset as usize;
    let end = start + r.byte_len() as usize;
    if end > buf.len() || !r.offset.is_multiple_of(4) {
        return Err(Error::Data(format!(
            "patient {id}: tensor at byte {start}..{end} exceeds payload of {} bytes",
            buf.len()
        )));
    }
    let data = buf[start..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::new(r.shape.clone(), data).map_err(|e| Error::Data(format!("patient {id}: {e}")))
}

/// Loads and validates one patient of `manifest`.
pub fn read_patient(dir: &Path, manifest: &DatasetManifest, entry: &PatientEntry) -> Result<PatientRecord> {
    let id = &entry.id;
    let path = dir.join(&entry.file);
    let buf = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if buf.len() as u64 != entry.bytes {
        return Err(Error::Data(format!(
            "patient {id}: payload has {} bytes, manifest says {}",
            buf.len(),
            entry.bytes
        )));
    }
    if hex::encode(Sha256::digest(&buf)) != entry.sha256 {
        return Err(Error::Data(format!("patient {id}: checksum mismatch")));
    }
    entry
        .outcome
        .validate()
        .map_err(|e| Error::Data(format!("patient {id}: {e}")))?;
    if entry.visits.is_empty() {
        return Err(Error::Data(format!("patient {id}: no visits")));
    }
    let mut visits = Vec::with_capacity(entry.visits.len());
    for (i, v) in entry.visits.iter().enumerate() {
        let expected_gap = if i == 0 { 0.0 } else { v.time - entry.visits[i - 1].time };
        if i > 0 && v.time <= entry.visits[i - 1].time {
            return Err(Error::Data(format!("patient {id}: visit times are not increasing")));
        }
        if v.gap != expected_gap {
            return Err(Error::Data(format!(
                "patient {id}: visit {i} gap {} disagrees with times ({expected_gap})",
                v.gap
            )));
        }
        let content = match &v.payload {
            VisitPayload::Views(views) => {
                let mut imgs = Vec::with_capacity(views.len());
                for r in views {
                    imgs.push(match r {
                        Some(r) => {
                            if r.shape != manifest.image {
                                return Err(Error::Data(format!(
                                    "patient {id}: view shape {:?}, expected {:?}",
                                    r.shape, manifest.image
                                )));
                            }
                            Some(decode_tensor(id, &buf, r)?)
                        }
                        None => None,
                    });
                }
                if imgs.iter().all(Option::is_none) {
                    return Err(Error::Data(format!("patient {id}: visit {i} has no view")));
                }
                VisitContent::Views(imgs)
            }
            VisitPayload::Features(r) => {
                if r.shape.len() != 3 {
                    return Err(Error::Data(format!("patient {id}: features must be [d, H, W]")));
                }
                VisitContent::Features(decode_tensor(id, &buf, r)?)
            }
        };
        visits.push(Visit { time: v.time, content });
    }
    Ok(PatientRecord {
        id: id.clone(),
        visits,
        outcome: entry.outcome,
        fold: entry.fold,
    })
}

/// Streams the records of the dataset in `dir`.
pub struct DatasetReader {
    dir: PathBuf,
    manifest: DatasetManifest,
    next: usize,
}

impl DatasetReader {
    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }
}

impl Iterator for DatasetReader {
    type Item = Result<PatientRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        let entry = self.manifest.patients.get(self.next)?;
        self.next += 1;
        Some(read_patient(&self.dir, &self.manifest, entry))
    }
}

pub fn read_dataset(dir: &Path) -> Result<DatasetReader> {
    Ok(DatasetReader {
        manifest: read_manifest(dir)?,
        dir: dir.to_path_buf(),
        next: 0,
    })
}

/// Reads every record into memory.
pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<PatientRecord>)> {
    let reader = read_dataset(dir)?;
    let manifest = reader.manifest().clone();
    let records = reader.collect::<Result<Vec<_>>>()?;
    Ok((manifest, records))
}

/// Counts of events per yearly bin `((k−1)·12, k·12]`, `k = 1..=years`;
/// events past the last bin are counted in the final slot.
pub fn event_histogram(records: &[PatientRecord], years: usize) -> Vec<usize> {
    let mut bins = vec![0; years + 1];
    for r in records {
        if let Outcome::Event { time } = r.outcome {
            let k = ((time / MONTHS_PER_YEAR).ceil() as usize).clamp(1, years + 1);
            bins[k - 1] += 1;
        }
    }
    bins
}

/// Short description of a cohort.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortSummary {
    pub patients: usize,
    pub cases: usize,
    pub controls: usize,
    pub visits: usize,
    pub absent_views: usize,
    /// Events per yearly bin, with a final bin for later events.
    pub events_per_year: Vec<usize>,
    pub patients_per_fold: Vec<usize>,
}

pub fn summarize(records: &[PatientRecord], folds: usize, years: usize) -> CohortSummary {
    let cases = records.iter().filter(|r| r.outcome.is_event()).count();
    let mut per_fold = vec![0; folds];
    for r in records {
        if r.fold < folds {
            per_fold[r.fold] += 1;
        }
    }
    let absent_views = records
        .iter()
        .flat_map(|r| &r.visits)
        .map(|v| match &v.content {
            VisitContent::Views(vs) => vs.iter().filter(|x| x.is_none()).count(),
            VisitContent::Features(_) => 0,
        })
        .sum();
    CohortSummary {
        patients: records.len(),
        cases,
        controls: records.len() - cases,
        visits: records.iter().map(|r| r.visits.len()).sum(),
        absent_views,
        events_per_year: event_histogram(records, years),
        patients_per_fold: per_fold,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CohortSpec {
        CohortSpec {
            patients: 12,
            image_size: 8,
            ..Default::default()
        }
    }

    #[test]
    fn default_spec_is_valid() {
        CohortSpec::default().validate().unwrap();
        audit_gap_dependence(&CohortSpec::default()).unwrap();
    }

    #[test]
    fn invalid_specs() {
        let mut s = small();
        s.gap_choices = vec![6.0];
        assert!(matches!(s.validate(), Err(Error::Config(_))));
        let mut s = small();
        s.visits = [1, 3];
        assert!(s.validate().is_err());
        let mut s = small();
        s.gap_choices = vec![24.0];
        assert!(audit_gap_dependence(&s).is_err());
    }

    #[test]
    fn gaps_and_first_visit() {
        let spec = small();
        for r in generate_records(&spec).unwrap() {
            let g = r.gaps();
            assert_eq!(g[0], 0.0);
            assert!(g[1..].iter().all(|x| spec.gap_choices.contains(x)));
            assert!((2..=8).contains(&r.visits.len()));
        }
    }

    #[test]
    fn no_cases_means_all_censored() {
        let spec = CohortSpec {
            case_fraction: 0.0,
            ..small()
        };
        assert!(generate_records(&spec).unwrap().iter().all(|r| !r.outcome.is_event()));
    }

    #[test]
    fn cases_stay_below_threshold_while_observed() {
        let spec = CohortSpec {
            case_fraction: 1.0,
            patients: 50,
            ..small()
        };
        for i in 0..spec.patients {
            let (r, truth) = generate_patient(&spec, i).unwrap();
            assert!(truth.rate > 0.0);
            assert!(truth.levels.iter().all(|&l| l < spec.blob.threshold));
            assert!(r.outcome.time() > 0.0);
        }
    }

    #[test]
    fn patients_are_independent_of_cohort_size() {
        let a = generate_patient(&small(), 3).unwrap();
        let b = generate_patient(&CohortSpec { patients: 500, ..small() }, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn folds_are_stable() {
        assert_eq!(fold_of("p00001", 5), fold_of("p00001", 5));
        assert!((0..200).map(|i| fold_of(&patient_id(i), 5)).collect::<std::collections::BTreeSet<_>>().len() == 5);
    }
}
