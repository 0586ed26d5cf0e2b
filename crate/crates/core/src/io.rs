//! File formats for descriptors, poses and external score channels.
//!
//! Binary descriptor layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes   "VPRDESC1"
//! count    u64       N
//! dim      u32       D
//! ids      N x (u32 byte length, UTF-8 bytes)
//! payload  N*D f32   row-major, IEEE-754 little-endian
//! ```
//!
//! Text descriptor fallback (`.csv` / `.txt`): one `id,v1,...,vD` row per
//! descriptor. Pose tables are `id,x,y[,z]` and score tables are
//! `query_id,score`; both accept an optional header row, `,` separators and
//! `.` decimals.

use std::collections::HashSet;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Descriptor, DescriptorSet, Method, ModelError, Pose, PoseSet, UncertaintyRecord};

pub const DESCRIPTOR_MAGIC: &[u8; 8] = b"VPRDESC1";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Open { path: String, source: io::Error },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("bad magic {0:?}, expected \"VPRDESC1\"")]
    BadMagic(Vec<u8>),
    #[error("truncated payload: {0}")]
    TruncatedPayload(String),
    #[error("parse error at line {line}: {message}")]
    ParseError { line: u64, message: String },
    #[error("mixed pose dimensions: line {line} has {found} coordinates, expected {expected}")]
    MixedDimensions { line: u64, expected: usize, found: usize },
    #[error("duplicate query id {0}")]
    DuplicateQueryId(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl IoError {
    fn parse(line: u64, message: impl Into<String>) -> Self {
        IoError::ParseError {
            line,
            message: message.into(),
        }
    }
}

fn open(path: &Path) -> Result<BufReader<File>, IoError> {
    File::open(path).map(BufReader::new).map_err(|source| IoError::Open {
        path: path.display().to_string(),
        source,
    })
}

fn create(path: &Path) -> Result<BufWriter<File>, IoError> {
    File::create(path).map(BufWriter::new).map_err(|source| IoError::Open {
        path: path.display().to_string(),
        source,
    })
}

fn is_text_path(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref(),
        Some("csv") | Some("txt")
    )
}

/// Loads descriptors from `path`. Files ending in `.csv` or `.txt` use the
/// text format; anything else must be the binary format.
pub fn load_descriptors(path: impl AsRef<Path>) -> Result<DescriptorSet, IoError> {
    let path = path.as_ref();
    let reader = open(path)?;
    if is_text_path(path) {
        read_descriptors_text(reader)
    } else {
        read_descriptors_binary(reader)
    }
}

/// Writes descriptors in the binary format (or text, for `.csv`/`.txt`).
pub fn save_descriptors(path: impl AsRef<Path>, set: &DescriptorSet) -> Result<(), IoError> {
    let path = path.as_ref();
    let mut w = create(path)?;
    if is_text_path(path) {
        write_descriptors_text(&mut w, set)?;
    } else {
        write_descriptors_binary(&mut w, set)?;
    }
    w.flush()?;
    Ok(())
}

fn truncated(what: &str) -> impl Fn(io::Error) -> IoError + '_ {
    move |e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            IoError::TruncatedPayload(what.to_string())
        } else {
            IoError::Io(e)
        }
    }
}

pub fn read_descriptors_binary<R: Read>(mut r: R) -> Result<DescriptorSet, IoError> {
    let mut magic = [0u8; 8];
    let mut got = 0;
    while got < magic.len() {
        match r.read(&mut magic[got..])? {
            0 => break,
            n => got += n,
        }
    }
    if &magic[..got] != DESCRIPTOR_MAGIC.as_slice() {
        return Err(IoError::BadMagic(magic[..got].to_vec()));
    }
    let count = r.read_u64::<LittleEndian>().map_err(truncated("header count"))?;
    let dim = r.read_u32::<LittleEndian>().map_err(truncated("header dim"))? as usize;
    let count = usize::try_from(count).map_err(|_| IoError::TruncatedPayload("count overflows".into()))?;

    let mut ids = Vec::with_capacity(count.min(1 << 20));
    for i in 0..count {
        let len = r.read_u32::<LittleEndian>().map_err(truncated("id table"))? as usize;
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf).map_err(truncated("id table"))?;
        let id = String::from_utf8(buf).map_err(|e| IoError::parse(0, format!("id {i} is not UTF-8: {e}")))?;
        ids.push(id);
    }

    let mut row = vec![0f32; dim];
    let mut descriptors = Vec::with_capacity(count);
    for id in ids {
        r.read_f32_into::<LittleEndian>(&mut row)
            .map_err(|e| truncated("payload")(e))?;
        descriptors.push(Descriptor::new(id, row.iter().map(|&v| v as f64).collect()));
    }
    Ok(DescriptorSet::new(descriptors)?)
}

/// Values are narrowed to `f32` on write.
pub fn write_descriptors_binary<W: Write>(mut w: W, set: &DescriptorSet) -> Result<(), IoError> {
    w.write_all(DESCRIPTOR_MAGIC)?;
    w.write_u64::<LittleEndian>(set.len() as u64)?;
    w.write_u32::<LittleEndian>(set.dim() as u32)?;
    for d in set {
        w.write_u32::<LittleEndian>(d.id.len() as u32)?;
        w.write_all(d.id.as_bytes())?;
    }
    for d in set {
        for &v in &d.values {
            w.write_f32::<LittleEndian>(v as f32)?;
        }
    }
    Ok(())
}

fn csv_reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(r)
}

fn record_line(rec: &csv::StringRecord) -> u64 {
    rec.position().map(|p| p.line()).unwrap_or(0)
}

fn csv_err(e: csv::Error) -> IoError {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    IoError::parse(line, e.to_string())
}

fn parse_f64(field: &str, line: u64) -> Result<f64, IoError> {
    field
        .parse::<f64>()
        .map_err(|e| IoError::parse(line, format!("{field:?}: {e}")))
}

/// A leading row whose numeric columns do not parse is treated as a header.
fn is_header(rec: &csv::StringRecord) -> bool {
    rec.iter().skip(1).any(|f| f.parse::<f64>().is_err())
}

pub fn read_descriptors_text<R: Read>(r: R) -> Result<DescriptorSet, IoError> {
    let mut descriptors = Vec::new();
    for (i, rec) in csv_reader(r).records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let line = record_line(&rec);
        if i == 0 && is_header(&rec) {
            continue;
        }
        if rec.len() < 2 {
            return Err(IoError::parse(line, "expected id followed by at least one value"));
        }
        let values = rec
            .iter()
            .skip(1)
            .map(|f| parse_f64(f, line))
            .collect::<Result<Vec<_>, _>>()?;
        descriptors.push(Descriptor::new(&rec[0], values));
    }
    if descriptors.is_empty() {
        return Err(IoError::parse(0, "no descriptor rows"));
    }
    Ok(DescriptorSet::new(descriptors)?)
}

pub fn write_descriptors_text<W: Write>(mut w: W, set: &DescriptorSet) -> Result<(), IoError> {
    for d in set {
        w.write_all(d.id.as_bytes())?;
        for v in &d.values {
            write!(w, ",{v}")?;
        }
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn load_poses(path: impl AsRef<Path>) -> Result<PoseSet, IoError> {
    read_poses(open(path.as_ref())?)
}

/// Pose dimensionality is taken from the first data row.
pub fn read_poses<R: Read>(r: R) -> Result<PoseSet, IoError> {
    let mut poses = Vec::new();
    let mut dim = None;
    for (i, rec) in csv_reader(r).records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let line = record_line(&rec);
        if i == 0 && is_header(&rec) {
            continue;
        }
        let found = rec.len().saturating_sub(1);
        if !(2..=3).contains(&found) {
            return Err(IoError::parse(
                line,
                format!("expected id,x,y[,z], got {} fields", rec.len()),
            ));
        }
        match dim {
            None => dim = Some(found),
            Some(expected) if expected != found => return Err(IoError::MixedDimensions { line, expected, found }),
            _ => {}
        }
        let coords = rec
            .iter()
            .skip(1)
            .map(|f| parse_f64(f, line))
            .collect::<Result<Vec<_>, _>>()?;
        poses.push(Pose::new(&rec[0], coords));
    }
    if poses.is_empty() {
        return Err(IoError::parse(0, "no pose rows"));
    }
    Ok(PoseSet::new(poses)?)
}

pub fn save_poses(path: impl AsRef<Path>, poses: &PoseSet) -> Result<(), IoError> {
    let mut w = create(path.as_ref())?;
    write_poses(&mut w, poses)?;
    w.flush()?;
    Ok(())
}

pub fn write_poses<W: Write>(mut w: W, poses: &PoseSet) -> Result<(), IoError> {
    w.write_all(if poses.dim() == 3 {
        b"id,x,y,z\n".as_slice()
    } else {
        b"id,x,y\n"
    })?;
    for p in poses {
        w.write_all(p.id.as_bytes())?;
        for c in &p.coords {
            write!(w, ",{c}")?;
        }
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// How to read the numbers of an external score table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    /// Higher means less certain (e.g. learned per-image variance).
    Uncertainty,
    /// Higher means more certain (e.g. inlier counts); negated into a score.
    Confidence,
}

/// One external per-query channel loaded from a score table.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreChannel {
    pub name: String,
    pub polarity: Polarity,
    pub records: Vec<UncertaintyRecord>,
}

impl ScoreChannel {
    pub fn get(&self, query_id: &str) -> Option<&UncertaintyRecord> {
        self.records.iter().find(|r| r.query_id == query_id)
    }
}

pub fn load_external_scores(path: impl AsRef<Path>, name: &str, polarity: Polarity) -> Result<ScoreChannel, IoError> {
    read_external_scores(open(path.as_ref())?, name, polarity)
}

pub fn read_external_scores<R: Read>(r: R, name: &str, polarity: Polarity) -> Result<ScoreChannel, IoError> {
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (i, rec) in csv_reader(r).records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let line = record_line(&rec);
        if i == 0 && is_header(&rec) {
            continue;
        }
        if rec.len() != 2 {
            return Err(IoError::parse(
                line,
                format!("expected query_id,score, got {} fields", rec.len()),
            ));
        }
        let value = parse_f64(&rec[1], line)?;
        if !value.is_finite() {
            return Err(IoError::parse(line, "score is not finite"));
        }
        let query_id = rec[0].to_string();
        if !seen.insert(query_id.clone()) {
            return Err(IoError::DuplicateQueryId(query_id));
        }
        let method = Method::External(name.to_string());
        records.push(match polarity {
            Polarity::Uncertainty => UncertaintyRecord::new(query_id, method, value),
            Polarity::Confidence => {
                if value < 0.0 {
                    return Err(IoError::parse(line, "confidence must be nonnegative"));
                }
                UncertaintyRecord {
                    gv_confidence: Some(value),
                    ..UncertaintyRecord::new(query_id, method, -value)
                }
            }
        });
    }
    Ok(ScoreChannel {
        name: name.to_string(),
        polarity,
        records,
    })
}

/// Writes `query_id,score` rows. `values` are written as given (raw
/// confidences for confidence channels).
pub fn save_scores<'a>(path: impl AsRef<Path>, rows: impl IntoIterator<Item = (&'a str, f64)>) -> Result<(), IoError> {
    let mut w = create(path.as_ref())?;
    w.write_all(b"query_id,score\n")?;
    for (id, v) in rows {
        writeln!(w, "{id},{v}")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(rows: &[(&str, &[f64])]) -> DescriptorSet {
        DescriptorSet::new(rows.iter().map(|(id, v)| Descriptor::new(*id, v.to_vec())).collect()).unwrap()
    }

    #[test]
    fn binary_small_file() {
        let s = set(&[("a", &[1.0, 2.0, 3.0]), ("b", &[-0.5, 0.25, 8.0])]);
        let mut buf = Vec::new();
        write_descriptors_binary(&mut buf, &s).unwrap();
        assert_eq!(&buf[..8], b"VPRDESC1");
        assert_eq!(buf.len(), 8 + 8 + 4 + (4 + 1) * 2 + 2 * 3 * 4);
        let back = read_descriptors_binary(buf.as_slice()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn bad_magic() {
        let err = read_descriptors_binary(b"XXXX".as_slice()).unwrap_err();
        assert!(matches!(err, IoError::BadMagic(m) if m == b"XXXX"));
    }

    #[test]
    fn truncated_payload() {
        let s = set(&[("a", &[1.0, 2.0, 3.0])]);
        let mut buf = Vec::new();
        write_descriptors_binary(&mut buf, &s).unwrap();
        buf.truncate(buf.len() - 2);
        assert!(matches!(
            read_descriptors_binary(buf.as_slice()),
            Err(IoError::TruncatedPayload(_))
        ));
    }

    #[test]
    fn large_random_round_trip() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let s = DescriptorSet::new(
            (0..100)
                .map(|i| {
                    Descriptor::new(
                        format!("img_{i:04}.jpg"),
                        (0..2048).map(|_| rng.random::<f32>() as f64 * 2.0 - 1.0).collect(),
                    )
                })
                .collect(),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        save_descriptors(&path, &s).unwrap();
        assert_eq!(load_descriptors(&path).unwrap(), s);
    }

    #[test]
    fn text_descriptors() {
        let s = read_descriptors_text("a,1,2\nb,3,4.5\n".as_bytes()).unwrap();
        assert_eq!(s, set(&[("a", &[1.0, 2.0]), ("b", &[3.0, 4.5])]));
        let err = read_descriptors_text("a,1,2\nb,x,4\n".as_bytes()).unwrap_err();
        assert!(matches!(err, IoError::ParseError { line: 2, .. }));
    }

    #[test]
    fn poses_2d() {
        let p = read_poses("a,0,0\nb,3,4\n".as_bytes()).unwrap();
        assert_eq!(p.dim(), 2);
        assert_eq!(p.len(), 2);
        assert_eq!(p.get("b").unwrap().coords, vec![3.0, 4.0]);
    }

    #[test]
    fn poses_with_header_and_3d() {
        let p = read_poses("id,x,y,z\na,0,0,1\n".as_bytes()).unwrap();
        assert_eq!(p.dim(), 3);
    }

    #[test]
    fn mixed_pose_dimensions() {
        let err = read_poses("a,0,0\nb,1,2,3\n".as_bytes()).unwrap_err();
        assert!(matches!(
            err,
            IoError::MixedDimensions {
                line: 2,
                expected: 2,
                found: 3
            }
        ));
    }

    #[test]
    fn empty_pose_file() {
        assert!(matches!(read_poses("".as_bytes()), Err(IoError::ParseError { .. })));
    }

    #[test]
    fn confidence_channel_is_negated() {
        let ch = read_external_scores("query_id,score\nq1,250\n".as_bytes(), "gv", Polarity::Confidence).unwrap();
        let r = &ch.records[0];
        assert_eq!(r.gv_confidence, Some(250.0));
        assert_eq!(r.score, -250.0);
        assert_eq!(r.method, Method::External("gv".into()));
    }

    #[test]
    fn uncertainty_channel_is_kept() {
        let ch = read_external_scores("query_id,score\nq1,0.73\n".as_bytes(), "stun", Polarity::Uncertainty).unwrap();
        assert_eq!(ch.records[0].score, 0.73);
        assert_eq!(ch.records[0].gv_confidence, None);
    }

    #[test]
    fn duplicate_query_rows() {
        let err =
            read_external_scores("query_id,score\nq1,1\nq1,2\n".as_bytes(), "x", Polarity::Uncertainty).unwrap_err();
        assert!(matches!(err, IoError::DuplicateQueryId(id) if id == "q1"));
    }

    #[test]
    fn no_rows_are_dropped() {
        let text: String = (0..500).map(|i| format!("q{i},{}\n", i as f64 * 0.5)).collect();
        let ch = read_external_scores(text.as_bytes(), "x", Polarity::Uncertainty).unwrap();
        assert_eq!(ch.records.len(), 500);
    }

    proptest! {
        #[test]
        fn binary_round_trip_is_identity(
            rows in prop::collection::vec(prop::collection::vec(-1e6f32..1e6, 3), 1..20),
        ) {
            let s = DescriptorSet::new(
                rows.iter().enumerate()
                    .map(|(i, v)| Descriptor::new(format!("r{i}"), v.iter().map(|&x| x as f64).collect()))
                    .collect(),
            ).unwrap();
            let mut buf = Vec::new();
            write_descriptors_binary(&mut buf, &s).unwrap();
            prop_assert_eq!(read_descriptors_binary(buf.as_slice()).unwrap(), s);
        }

        #[test]
        fn pose_text_round_trip(coords in prop::collection::vec((-1e5f64..1e5, -1e5f64..1e5), 1..30)) {
            let poses = PoseSet::new(
                coords.iter().enumerate().map(|(i, (x, y))| Pose::new(format!("p{i}"), vec![*x, *y])).collect(),
            ).unwrap();
            let mut buf = Vec::new();
            write_poses(&mut buf, &poses).unwrap();
            prop_assert_eq!(read_poses(buf.as_slice()).unwrap(), poses);
        }
    }
}
