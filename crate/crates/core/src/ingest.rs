//! Per-frame behavioral signals: OpenFace-style CSV tables, audio energy
//! series, labels and the dataset manifest.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::Read;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::bfi2::item_column;

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("missing column {0:?}")]
    MissingColumn(String),
    #[error("file has no data rows")]
    EmptyFile,
    #[error("no frame was successfully tracked")]
    AllFramesFailed,
    #[error("series has {0} frames, need at least 2")]
    TooFewFrames(usize),
    #[error("unsupported audio format: {0}")]
    UnsupportedFormat(String),
    #[error("audio contains no samples")]
    EmptyAudio,
    #[error("bad value {value:?} in column {column:?} at row {row}")]
    BadValue {
        column: String,
        row: usize,
        value: String,
    },
    #[error("referenced file does not exist: {0}")]
    DanglingReference(PathBuf),
    #[error("duplicate session {0}")]
    DuplicateSession(String),
    #[error("no label row for participant {0}")]
    MissingLabelRow(String),
    #[error("session references unknown participant {0}")]
    UnknownParticipant(String),
    #[error("session {0} pairs a participant with themself")]
    SelfDyad(String),
    #[error("unsupported manifest version {0}")]
    ManifestVersion(u32),
    #[error("invalid frame rate {0}")]
    FrameRate(f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Wav(#[from] hound::Error),
}

pub type Result<T> = std::result::Result<T, IngestError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    ActionUnits,
    Gaze,
    HeadPose,
    Audio,
}

impl Modality {
    pub const ALL: [Modality; 4] = [
        Modality::ActionUnits,
        Modality::Gaze,
        Modality::HeadPose,
        Modality::Audio,
    ];

    pub fn channels(self) -> usize {
        match self {
            Modality::ActionUnits => AU_INTENSITY.len() + AU_PRESENCE.len(),
            Modality::Gaze => 6,
            Modality::HeadPose => 6,
            Modality::Audio => 1,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::ActionUnits => "action_units",
            Modality::Gaze => "gaze",
            Modality::HeadPose => "head_pose",
            Modality::Audio => "audio",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Talk,
    Ghost,
    Lego,
    Animals,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Talk, Task::Ghost, Task::Lego, Task::Animals];

    pub fn name(self) -> &'static str {
        match self {
            Task::Talk => "talk",
            Task::Ghost => "ghost",
            Task::Lego => "lego",
            Task::Animals => "animals",
        }
    }

    pub fn parse(s: &str) -> Option<Task> {
        Task::ALL.into_iter().find(|t| t.name().eq_ignore_ascii_case(s))
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// OpenFace 2.0 action units with an intensity (`_r`) output.
pub const AU_INTENSITY: [u8; 17] = [1, 2, 4, 5, 6, 7, 9, 10, 12, 14, 15, 17, 20, 23, 25, 26, 45];
/// OpenFace 2.0 action units with a presence (`_c`) output.
pub const AU_PRESENCE: [u8; 18] = [1, 2, 4, 5, 6, 7, 9, 10, 12, 14, 15, 17, 20, 23, 25, 26, 28, 45];
pub const GAZE_COLUMNS: [&str; 6] = ["gaze_0_x", "gaze_0_y", "gaze_0_z", "gaze_1_x", "gaze_1_y", "gaze_1_z"];
pub const POSE_COLUMNS: [&str; 6] = ["pose_Tx", "pose_Ty", "pose_Tz", "pose_Rx", "pose_Ry", "pose_Rz"];
pub const AU_INTENSITY_MAX: f64 = 5.0;

pub fn au_columns() -> Vec<String> {
    AU_INTENSITY
        .iter()
        .map(|n| format!("AU{n:02}_r"))
        .chain(AU_PRESENCE.iter().map(|n| format!("AU{n:02}_c")))
        .collect()
}

/// Identity of the video a series came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeriesMeta {
    pub participant_id: String,
    pub session_id: String,
    pub task: Task,
}

/// Variable-length frames x channels signal for one modality of one participant.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalitySeries {
    pub modality: Modality,
    pub frame_rate: f64,
    pub data: Array2<f64>,
    pub meta: SeriesMeta,
}

impl ModalitySeries {
    pub fn new(modality: Modality, frame_rate: f64, data: Array2<f64>, meta: SeriesMeta) -> Result<Self> {
        if !(frame_rate.is_finite() && frame_rate > 0.0) {
            return Err(IngestError::FrameRate(frame_rate));
        }
        if data.nrows() < 2 {
            return Err(IngestError::TooFewFrames(data.nrows()));
        }
        assert_eq!(data.ncols(), modality.channels(), "channel count for {modality}");
        Ok(Self {
            modality,
            frame_rate,
            data,
            meta,
        })
    }

    pub fn frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn channels(&self) -> usize {
        self.data.ncols()
    }
}

/// The three visual series parsed from one OpenFace table.
#[derive(Debug, Clone)]
pub struct VisualSeries {
    pub action_units: ModalitySeries,
    pub gaze: ModalitySeries,
    pub head_pose: ModalitySeries,
    /// Frames with `success = 0` (or non-finite values) that were interpolated.
    pub interpolated_frames: usize,
    /// AU values pulled back into their legal range.
    pub clamped_values: usize,
}

pub fn parse_openface_csv(path: impl AsRef<Path>, meta: &SeriesMeta, frame_rate: f64) -> Result<VisualSeries> {
    let file = std::fs::File::open(path)?;
    parse_openface_reader(file, meta, frame_rate)
}

pub fn parse_openface_reader<R: Read>(reader: R, meta: &SeriesMeta, frame_rate: f64) -> Result<VisualSeries> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(false)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| IngestError::MissingColumn(name.to_string()))
    };
    let success_col = find("success")?;
    let au_names = au_columns();
    let mut columns = Vec::with_capacity(47);
    for name in au_names.iter().map(String::as_str).chain(GAZE_COLUMNS).chain(POSE_COLUMNS) {
        columns.push(find(name)?);
    }

    let mut rows: Vec<[f64; 47]> = Vec::new();
    let mut ok: Vec<bool> = Vec::new();
    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        let parse = |col: usize| -> Result<f64> {
            let raw = record.get(col).unwrap_or("");
            raw.parse::<f64>().map_err(|_| IngestError::BadValue {
                column: headers.get(col).unwrap_or("?").to_string(),
                row: r + 1,
                value: raw.to_string(),
            })
        };
        let success = parse(success_col)?;
        let mut row = [0.0; 47];
        for (slot, &col) in row.iter_mut().zip(&columns) {
            *slot = parse(col)?;
        }
        ok.push(success != 0.0 && row.iter().all(|v| v.is_finite()));
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(IngestError::EmptyFile);
    }
    if !ok.iter().any(|&s| s) {
        return Err(IngestError::AllFramesFailed);
    }

    let n = rows.len();
    let mut all = Array2::<f64>::zeros((n, 47));
    for (i, row) in rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            all[[i, j]] = v;
        }
    }
    let interpolated_frames = fill_failed_frames(&mut all, &ok);

    let mut clamped_values = 0;
    let n_int = AU_INTENSITY.len();
    for mut row in all.rows_mut() {
        for (j, v) in row.iter_mut().take(Modality::ActionUnits.channels()).enumerate() {
            let fixed = if j < n_int {
                v.clamp(0.0, AU_INTENSITY_MAX)
            } else if *v >= 0.5 {
                1.0
            } else {
                0.0
            };
            if fixed != *v {
                clamped_values += 1;
                *v = fixed;
            }
        }
    }
    if clamped_values > 0 {
        log::warn!(
            "{}/{}: clamped {clamped_values} action-unit values",
            meta.session_id,
            meta.participant_id
        );
    }

    let au = all.slice(ndarray::s![.., 0..35]).to_owned();
    let gaze = all.slice(ndarray::s![.., 35..41]).to_owned();
    let pose = all.slice(ndarray::s![.., 41..47]).to_owned();
    Ok(VisualSeries {
        action_units: ModalitySeries::new(Modality::ActionUnits, frame_rate, au, meta.clone())?,
        gaze: ModalitySeries::new(Modality::Gaze, frame_rate, gaze, meta.clone())?,
        head_pose: ModalitySeries::new(Modality::HeadPose, frame_rate, pose, meta.clone())?,
        interpolated_frames,
        clamped_values,
    })
}

/// Replaces rows with `ok[i] == false` by linear interpolation between the
/// nearest good rows; leading/trailing gaps hold the nearest good value.
/// Returns the number of rows replaced. `ok` must contain at least one `true`.
pub fn fill_failed_frames(data: &mut Array2<f64>, ok: &[bool]) -> usize {
    let good: Vec<usize> = ok.iter().enumerate().filter(|(_, &s)| s).map(|(i, _)| i).collect();
    let mut filled = 0;
    let mut next: usize = 0; // index into `good` of the first good row >= i
    for i in 0..data.nrows() {
        if ok[i] {
            next += 1;
            continue;
        }
        filled += 1;
        let before = next.checked_sub(1).map(|k| good[k]);
        let after = good.get(next).copied();
        for j in 0..data.ncols() {
            data[[i, j]] = match (before, after) {
                (Some(a), Some(b)) => {
                    let w = (i - a) as f64 / (b - a) as f64;
                    data[[a, j]] + w * (data[[b, j]] - data[[a, j]])
                }
                (Some(a), None) => data[[a, j]],
                (None, Some(b)) => data[[b, j]],
                (None, None) => unreachable!("at least one successful frame"),
            };
        }
    }
    filled
}

/// Log energy `ln(1 + sum x^2)` of consecutive sample windows, one per video frame.
/// Frame `j` covers samples `[floor(j*sr/fr), floor((j+1)*sr/fr))`.
pub fn log_energy_frames(samples: &[f64], sample_rate: f64, frame_rate: f64) -> Vec<f64> {
    let per_frame = sample_rate / frame_rate;
    let n_frames = (samples.len() as f64 / per_frame).floor() as usize;
    (0..n_frames)
        .map(|j| {
            let start = (j as f64 * per_frame).floor() as usize;
            let end = (((j + 1) as f64 * per_frame).floor() as usize).min(samples.len());
            samples[start..end].iter().map(|x| x * x).sum::<f64>().ln_1p()
        })
        .collect()
}

/// Reads a mono waveform (`.wav`, 16-bit PCM or 32-bit float) or a
/// one-column CSV holding an already computed per-frame series.
pub fn ingest_audio(path: impl AsRef<Path>, meta: &SeriesMeta, frame_rate: f64) -> Result<ModalitySeries> {
    let path = path.as_ref();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    let series = match ext.as_str() {
        "wav" => {
            let (samples, rate) = read_wav_mono(path)?;
            if samples.is_empty() {
                return Err(IngestError::EmptyAudio);
            }
            log_energy_frames(&samples, rate, frame_rate)
        }
        "csv" => read_column_csv(path)?,
        other => return Err(IngestError::UnsupportedFormat(other.to_string())),
    };
    if series.is_empty() {
        return Err(IngestError::EmptyAudio);
    }
    let n = series.len();
    let data = Array2::from_shape_vec((n, 1), series).expect("n x 1");
    ModalitySeries::new(Modality::Audio, frame_rate, data, meta.clone())
}

pub fn read_wav_mono(path: &Path) -> Result<(Vec<f64>, f64)> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(IngestError::UnsupportedFormat(format!("{} channels", spec.channels)));
    }
    let samples = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<Vec<_>, _>>()?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<Vec<_>, _>>()?,
        (fmt, bits) => {
            return Err(IngestError::UnsupportedFormat(format!("{fmt:?} {bits}-bit")));
        }
    };
    Ok((samples, spec.sample_rate as f64))
}

pub fn write_wav_f32(path: &Path, samples: &[f32], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for &s in samples {
        w.write_sample(s)?;
    }
    w.finalize()?;
    Ok(())
}

fn read_column_csv(path: &Path) -> Result<Vec<f64>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut out = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let raw = rec.get(0).unwrap_or("");
        match raw.parse::<f64>() {
            Ok(v) if v.is_finite() => out.push(v),
            // tolerate a single header line
            Err(_) if r == 0 => {}
            _ => {
                return Err(IngestError::BadValue {
                    column: "0".into(),
                    row: r + 1,
                    value: raw.to_string(),
                })
            }
        }
    }
    Ok(out)
}

/// Ground-truth item responses per participant, in item-id order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabelTable {
    pub item_ids: Vec<u32>,
    pub rows: BTreeMap<String, Vec<f64>>,
    /// Responses pulled back into the Likert range while reading.
    pub clamped_values: usize,
}

pub const LIKERT_MIN: f64 = 1.0;
pub const LIKERT_MAX: f64 = 5.0;
pub const N_ITEMS: u32 = 60;

pub fn read_labels_csv(path: impl AsRef<Path>) -> Result<LabelTable> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = rdr.headers()?.clone();
    let pid_col = headers
        .iter()
        .position(|h| h == "participant_id")
        .ok_or_else(|| IngestError::MissingColumn("participant_id".into()))?;
    let item_ids: Vec<u32> = (1..=N_ITEMS).collect();
    let item_cols = item_ids
        .iter()
        .map(|&id| {
            let name = item_column(id);
            headers
                .iter()
                .position(|h| h == name)
                .ok_or(IngestError::MissingColumn(name))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut table = LabelTable {
        item_ids,
        ..Default::default()
    };
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let pid = rec.get(pid_col).unwrap_or("").to_string();
        let mut values = Vec::with_capacity(item_cols.len());
        for &c in &item_cols {
            let raw = rec.get(c).unwrap_or("");
            let v: f64 = raw.parse::<i64>().map(|v| v as f64).map_err(|_| IngestError::BadValue {
                column: headers.get(c).unwrap_or("?").to_string(),
                row: r + 1,
                value: raw.to_string(),
            })?;
            let fixed = v.clamp(LIKERT_MIN, LIKERT_MAX);
            if fixed != v {
                table.clamped_values += 1;
            }
            values.push(fixed);
        }
        table.rows.insert(pid, values);
    }
    if table.clamped_values > 0 {
        log::warn!("clamped {} label values into [1, 5]", table.clamped_values);
    }
    Ok(table)
}

pub fn write_labels_csv(path: impl AsRef<Path>, rows: &BTreeMap<String, Vec<f64>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["participant_id".to_string()];
    header.extend((1..=N_ITEMS).map(item_column));
    w.write_record(&header)?;
    for (pid, values) in rows {
        let mut rec = vec![pid.clone()];
        rec.extend(values.iter().map(|v| format!("{}", v.round() as i64)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantInfo {
    pub id: String,
    pub age: f64,
    pub gender: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantFiles {
    pub openface: PathBuf,
    pub audio: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionFiles {
    pub target: ParticipantFiles,
    pub partner: ParticipantFiles,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEntry {
    pub session_id: String,
    pub task: Task,
    pub target_id: String,
    pub partner_id: String,
    pub files: SessionFiles,
}

fn default_labels() -> PathBuf {
    PathBuf::from("labels.csv")
}

/// On-disk manifest document. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub version: u32,
    pub frame_rate: f64,
    #[serde(default = "default_labels")]
    pub labels: PathBuf,
    pub participants: Vec<ParticipantInfo>,
    pub sessions: Vec<SessionEntry>,
}

/// A validated manifest with absolute paths and loaded labels.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub frame_rate: f64,
    pub labels_path: PathBuf,
    pub labels: LabelTable,
    pub participants: Vec<ParticipantInfo>,
    pub sessions: Vec<SessionEntry>,
}

impl DatasetManifest {
    pub fn participant(&self, id: &str) -> Option<&ParticipantInfo> {
        self.participants.iter().find(|p| p.id == id)
    }

    pub fn sessions_for_task(&self, task: Task) -> impl Iterator<Item = &SessionEntry> {
        self.sessions.iter().filter(move |s| s.task == task)
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let file: ManifestFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if file.version != 1 {
        return Err(IngestError::ManifestVersion(file.version));
    }
    if !(file.frame_rate.is_finite() && file.frame_rate > 0.0) {
        return Err(IngestError::FrameRate(file.frame_rate));
    }
    let resolve = |p: &Path| -> Result<PathBuf> {
        let full = if p.is_absolute() { p.to_path_buf() } else { root.join(p) };
        if full.is_file() {
            Ok(full)
        } else {
            Err(IngestError::DanglingReference(full))
        }
    };

    let known: HashSet<&str> = file.participants.iter().map(|p| p.id.as_str()).collect();
    let mut seen = HashSet::new();
    let mut sessions = Vec::with_capacity(file.sessions.len());
    for s in &file.sessions {
        if !seen.insert((s.session_id.clone(), s.task)) {
            return Err(IngestError::DuplicateSession(format!("{}/{}", s.session_id, s.task)));
        }
        for id in [&s.target_id, &s.partner_id] {
            if !known.contains(id.as_str()) {
                return Err(IngestError::UnknownParticipant(id.clone()));
            }
        }
        if s.target_id == s.partner_id {
            return Err(IngestError::SelfDyad(s.session_id.clone()));
        }
        let files = |f: &ParticipantFiles| -> Result<ParticipantFiles> {
            Ok(ParticipantFiles {
                openface: resolve(&f.openface)?,
                audio: resolve(&f.audio)?,
            })
        };
        sessions.push(SessionEntry {
            files: SessionFiles {
                target: files(&s.files.target)?,
                partner: files(&s.files.partner)?,
            },
            ..s.clone()
        });
    }

    let labels_path = resolve(&file.labels)?;
    let labels = read_labels_csv(&labels_path)?;
    for p in &file.participants {
        if !labels.rows.contains_key(&p.id) {
            return Err(IngestError::MissingLabelRow(p.id.clone()));
        }
    }
    Ok(DatasetManifest {
        frame_rate: file.frame_rate,
        labels_path,
        labels,
        participants: file.participants,
        sessions,
    })
}

/// All four modality series of one participant in one task video.
#[derive(Debug, Clone)]
pub struct ParticipantBundle {
    pub participant_id: String,
    pub series: [ModalitySeries; 4],
}

impl ParticipantBundle {
    pub fn get(&self, m: Modality) -> &ModalitySeries {
        &self.series[m.index()]
    }
}

/// One dyadic task video with both participants' signals.
#[derive(Debug, Clone)]
pub struct SessionRecord {
    pub session_id: String,
    pub task: Task,
    pub target: ParticipantBundle,
    pub partner: ParticipantBundle,
}

pub fn load_bundle(files: &ParticipantFiles, meta: &SeriesMeta, frame_rate: f64) -> Result<ParticipantBundle> {
    let visual = parse_openface_csv(&files.openface, meta, frame_rate)?;
    let audio = ingest_audio(&files.audio, meta, frame_rate)?;
    Ok(ParticipantBundle {
        participant_id: meta.participant_id.clone(),
        series: [visual.action_units, visual.gaze, visual.head_pose, audio],
    })
}

pub fn load_session(entry: &SessionEntry, frame_rate: f64) -> Result<SessionRecord> {
    let meta = |pid: &str| SeriesMeta {
        participant_id: pid.to_string(),
        session_id: entry.session_id.clone(),
        task: entry.task,
    };
    Ok(SessionRecord {
        session_id: entry.session_id.clone(),
        task: entry.task,
        target: load_bundle(&entry.files.target, &meta(&entry.target_id), frame_rate)?,
        partner: load_bundle(&entry.files.partner, &meta(&entry.partner_id), frame_rate)?,
    })
}

/// Writes the three visual series as an OpenFace-style CSV with every frame
/// marked successful. Values are printed in shortest round-trip form.
pub fn write_openface_csv(
    path: impl AsRef<Path>,
    au: &Array2<f64>,
    gaze: &Array2<f64>,
    pose: &Array2<f64>,
    frame_rate: f64,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = ["frame", "timestamp", "confidence", "success"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(GAZE_COLUMNS.iter().map(|s| s.to_string()));
    header.extend(POSE_COLUMNS.iter().map(|s| s.to_string()));
    header.extend(au_columns());
    w.write_record(&header)?;
    for i in 0..au.nrows() {
        let mut rec = vec![
            (i + 1).to_string(),
            format!("{}", i as f64 / frame_rate),
            "0.98".to_string(),
            "1".to_string(),
        ];
        rec.extend(gaze.row(i).iter().map(|v| v.to_string()));
        rec.extend(pose.row(i).iter().map(|v| v.to_string()));
        rec.extend(au.row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn meta() -> SeriesMeta {
        SeriesMeta {
            participant_id: "p1".into(),
            session_id: "s1".into(),
            task: Task::Talk,
        }
    }

    fn header() -> String {
        let mut h = vec!["frame".to_string(), "success".to_string()];
        h.extend(au_columns());
        h.extend(GAZE_COLUMNS.iter().map(|s| s.to_string()));
        h.extend(POSE_COLUMNS.iter().map(|s| s.to_string()));
        h.join(", ")
    }

    fn row(frame: usize, success: u8, value: f64) -> String {
        let mut r = vec![frame.to_string(), success.to_string()];
        r.extend((0..47).map(|j| if j < 17 { value.to_string() } else if j < 35 { "0".into() } else { value.to_string() }));
        r.join(", ")
    }

    #[test]
    fn zero_table_parses_to_zero_matrix() {
        let csv = format!("{}\n{}\n{}\n", header(), row(1, 1, 0.0), row(2, 1, 0.0));
        let v = parse_openface_reader(csv.as_bytes(), &meta(), 25.0).unwrap();
        assert_eq!(v.action_units.data, Array2::<f64>::zeros((2, 35)));
        assert_eq!(v.gaze.channels(), 6);
        assert_eq!(v.head_pose.channels(), 6);
        assert_eq!(v.interpolated_frames, 0);
    }

    #[test]
    fn failed_frame_is_interpolated() {
        let csv = format!(
            "{}\n{}\n{}\n{}\n",
            header(),
            row(1, 1, 1.0),
            row(2, 0, 4.5),
            row(3, 1, 3.0)
        );
        let v = parse_openface_reader(csv.as_bytes(), &meta(), 25.0).unwrap();
        assert_eq!(v.action_units.data[[1, 0]], 2.0);
        assert_eq!(v.gaze.data[[1, 3]], 2.0);
        assert_eq!(v.interpolated_frames, 1);
    }

    #[test]
    fn edge_frames_hold_nearest_value() {
        let csv = format!(
            "{}\n{}\n{}\n{}\n",
            header(),
            row(1, 0, 9.0),
            row(2, 1, 2.0),
            row(3, 0, 9.0)
        );
        let v = parse_openface_reader(csv.as_bytes(), &meta(), 25.0).unwrap();
        assert_eq!(v.head_pose.data.column(0).to_vec(), vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn error_paths() {
        let csv = format!("{}\n", header());
        assert!(matches!(
            parse_openface_reader(csv.as_bytes(), &meta(), 25.0),
            Err(IngestError::EmptyFile)
        ));
        let csv = format!("{}\n{}\n{}\n", header(), row(1, 0, 1.0), row(2, 0, 1.0));
        assert!(matches!(
            parse_openface_reader(csv.as_bytes(), &meta(), 25.0),
            Err(IngestError::AllFramesFailed)
        ));
        let csv = header().replace("gaze_1_y", "gaze_1_q");
        assert!(matches!(
            parse_openface_reader(csv.as_bytes(), &meta(), 25.0),
            Err(IngestError::MissingColumn(c)) if c == "gaze_1_y"
        ));
        let csv = format!("{}\n{}\n", header(), row(1, 1, 1.0));
        assert!(matches!(
            parse_openface_reader(csv.as_bytes(), &meta(), 25.0),
            Err(IngestError::TooFewFrames(1))
        ));
    }

    #[test]
    fn au_values_are_clamped() {
        let csv = format!("{}\n{}\n{}\n", header(), row(1, 1, 7.0), row(2, 1, -1.0));
        let v = parse_openface_reader(csv.as_bytes(), &meta(), 25.0).unwrap();
        assert_eq!(v.action_units.data[[0, 0]], 5.0);
        assert_eq!(v.action_units.data[[1, 0]], 0.0);
        assert_eq!(v.clamped_values, 34);
    }

    #[test]
    fn interpolation_stays_within_successful_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = rng.random_range(2..40);
            let mut data = Array2::from_shape_fn((n, 3), |_| rng.random_range(-5.0..5.0));
            let mut ok: Vec<bool> = (0..n).map(|_| rng.random_bool(0.6)).collect();
            ok[rng.random_range(0..n)] = true;
            let (lo, hi): (Vec<f64>, Vec<f64>) = (0..3)
                .map(|j| {
                    let good = (0..n).filter(|&i| ok[i]).map(|i| data[[i, j]]);
                    let lo = good.clone().fold(f64::INFINITY, f64::min);
                    (lo, good.fold(f64::NEG_INFINITY, f64::max))
                })
                .unzip();
            fill_failed_frames(&mut data, &ok);
            for i in 0..n {
                for j in 0..3 {
                    assert!(data[[i, j]] >= lo[j] && data[[i, j]] <= hi[j]);
                }
            }
        }
    }

    #[test]
    fn parsing_is_deterministic() {
        let csv = format!("{}\n{}\n{}\n{}\n", header(), row(1, 1, 1.5), row(2, 0, 0.0), row(3, 1, 2.25));
        let a = parse_openface_reader(csv.as_bytes(), &meta(), 25.0).unwrap();
        let b = parse_openface_reader(csv.as_bytes(), &meta(), 25.0).unwrap();
        assert_eq!(a.action_units, b.action_units);
        assert_eq!(a.gaze, b.gaze);
    }

    fn wav_series(samples: &[f32], sr: u32, fr: f64) -> ModalitySeries {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        write_wav_f32(&p, samples, sr).unwrap();
        ingest_audio(&p, &meta(), fr).unwrap()
    }

    #[test]
    fn silent_audio_has_zero_energy() {
        let s = wav_series(&[0.0; 1600], 1600, 25.0);
        assert_eq!(s.frames(), 25);
        assert!(s.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_amplitude_gives_constant_energy() {
        let s = wav_series(&[0.25; 1600], 1600, 25.0);
        let first = s.data[[0, 0]];
        assert!((first - (64.0f64 * 0.0625).ln_1p()).abs() < 1e-12);
        assert!(s.data.iter().all(|&v| v == first));
    }

    #[test]
    fn wav_energy_matches_windowed_sum_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // 1000 Hz at 30 fps: non-integer window length
        let samples: Vec<f32> = (0..5000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s = wav_series(&samples, 1000, 30.0);
        let per = 1000.0 / 30.0;
        let n = (5000.0 / per) as usize;
        assert_eq!(s.frames(), n);
        for j in 0..n {
            let mut e = 0.0;
            for (t, &x) in samples.iter().enumerate() {
                // a sample belongs to frame j when floor(j*per) <= t < floor((j+1)*per)
                if t >= (j as f64 * per).floor() as usize && t < ((j + 1) as f64 * per).floor() as usize {
                    e += (x as f64) * (x as f64);
                }
            }
            assert!((s.data[[j, 0]] - (1.0 + e).ln()).abs() < 1e-6);
        }
    }

    #[test]
    fn pcm16_and_csv_audio() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 100,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&p, spec).unwrap();
        for _ in 0..100 {
            w.write_sample(16384i16).unwrap();
        }
        w.finalize().unwrap();
        let s = ingest_audio(&p, &meta(), 10.0).unwrap();
        assert_eq!(s.frames(), 10);
        assert!((s.data[[0, 0]] - (1.0 + 10.0 * 0.25f64).ln()).abs() < 1e-12);

        let c = dir.path().join("a.csv");
        std::fs::write(&c, "energy\n0.5\n1.5\n2.5\n").unwrap();
        let s = ingest_audio(&c, &meta(), 10.0).unwrap();
        assert_eq!(s.data.column(0).to_vec(), vec![0.5, 1.5, 2.5]);

        let m = dir.path().join("a.mp3");
        std::fs::write(&m, "x").unwrap();
        assert!(matches!(ingest_audio(&m, &meta(), 10.0), Err(IngestError::UnsupportedFormat(_))));
        let e = dir.path().join("e.wav");
        write_wav_f32(&e, &[], 100).unwrap();
        assert!(matches!(ingest_audio(&e, &meta(), 10.0), Err(IngestError::EmptyAudio)));
    }

    fn write_manifest(dir: &Path, sessions: serde_json::Value) -> PathBuf {
        let mut rows = BTreeMap::new();
        rows.insert("a".to_string(), vec![3.0; 60]);
        rows.insert("b".to_string(), vec![3.0; 60]);
        write_labels_csv(dir.join("labels.csv"), &rows).unwrap();
        let doc = serde_json::json!({
            "version": 1,
            "frame_rate": 25.0,
            "participants": [
                {"id": "a", "age": 30, "gender": "F"},
                {"id": "b", "age": 40, "gender": "M"}
            ],
            "sessions": sessions,
        });
        let p = dir.join("manifest.json");
        std::fs::write(&p, serde_json::to_string_pretty(&doc).unwrap()).unwrap();
        p
    }

    fn entry(id: &str, of: &str) -> serde_json::Value {
        serde_json::json!({
            "session_id": id, "task": "talk", "target_id": "a", "partner_id": "b",
            "files": {
                "target": {"openface": of, "audio": "a.wav"},
                "partner": {"openface": of, "audio": "a.wav"}
            }
        })
    }

    #[test]
    fn manifest_validation() {
        let dir = tempfile::tempdir().unwrap();
        let m = load_manifest(write_manifest(dir.path(), serde_json::json!([]))).unwrap();
        assert!(m.sessions.is_empty());
        assert_eq!(m.labels.rows.len(), 2);

        let p = write_manifest(dir.path(), serde_json::json!([entry("s1", "missing.csv")]));
        assert!(matches!(load_manifest(&p), Err(IngestError::DanglingReference(_))));

        std::fs::write(dir.path().join("of.csv"), "x").unwrap();
        std::fs::write(dir.path().join("a.wav"), "x").unwrap();
        let p = write_manifest(dir.path(), serde_json::json!([entry("s1", "of.csv"), entry("s1", "of.csv")]));
        assert!(matches!(load_manifest(&p), Err(IngestError::DuplicateSession(_))));

        let p = write_manifest(dir.path(), serde_json::json!([entry("s1", "of.csv")]));
        let mut rows = BTreeMap::new();
        rows.insert("a".to_string(), vec![3.0; 60]);
        write_labels_csv(dir.path().join("labels.csv"), &rows).unwrap();
        assert!(matches!(load_manifest(&p), Err(IngestError::MissingLabelRow(id)) if id == "b"));
    }

    #[test]
    fn labels_round_trip_and_clamp() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("labels.csv");
        let mut rows = BTreeMap::new();
        rows.insert("x".to_string(), (0..60).map(|i| (i % 5 + 1) as f64).collect());
        write_labels_csv(&p, &rows).unwrap();
        let t = read_labels_csv(&p).unwrap();
        assert_eq!(t.rows, rows);
        let text = std::fs::read_to_string(&p).unwrap().replacen(",1,", ",9,", 1);
        std::fs::write(&p, text).unwrap();
        let t = read_labels_csv(&p).unwrap();
        assert_eq!(t.clamped_values, 1);
        assert!(t.rows["x"].iter().all(|&v| (1.0..=5.0).contains(&v)));
    }
}
