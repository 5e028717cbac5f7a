//! JSON-lines dataset files, one record per frame.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{DataSource, TrainingSample};
use crate::error::{Error, Result};
use crate::face::{BlendshapeSequence, MotorSequence};
use crate::plant::SEQUENCE_RATE_HZ;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub seq_id: u64,
    pub frame_idx: usize,
    pub blendshape: Vec<f32>,
    pub motor: Vec<f32>,
    pub source: DataSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<String>,
    /// Bootstrap iteration that produced the frame; lets baselines replay the
    /// same curriculum.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub round: Option<usize>,
}

pub fn write_dataset(path: impl AsRef<Path>, samples: &[TrainingSample]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (seq_id, s) in samples.iter().enumerate() {
        for t in 0..s.len() {
            let rec = FrameRecord {
                seq_id: seq_id as u64,
                frame_idx: t,
                blendshape: s.blendshape.frame(t).to_vec(),
                motor: s.motor.data().row(t).to_vec(),
                source: s.source,
                image_path: None,
                round: Some(s.round),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset, regrouping frames by `seq_id` in order of first
/// appearance. Frames of a sequence must be contiguous from index 0.
pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<TrainingSample>> {
    let reader = BufReader::new(File::open(path)?);
    let mut order: Vec<u64> = Vec::new();
    let mut groups: HashMap<u64, Vec<FrameRecord>> = HashMap::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: FrameRecord = serde_json::from_str(&line).map_err(|e| {
            Error::InvalidInput(format!("dataset line {}: {e}", lineno + 1))
        })?;
        let group = groups.entry(rec.seq_id).or_insert_with(|| {
            order.push(rec.seq_id);
            Vec::new()
        });
        group.push(rec);
    }
    order
        .into_iter()
        .map(|id| assemble(id, groups.remove(&id).unwrap_or_default()))
        .collect()
}

fn assemble(seq_id: u64, mut frames: Vec<FrameRecord>) -> Result<TrainingSample> {
    frames.sort_by_key(|f| f.frame_idx);
    let bad = |msg: String| Error::InvalidInput(format!("sequence {seq_id}: {msg}"));
    if frames.iter().enumerate().any(|(i, f)| f.frame_idx != i) {
        return Err(bad("frame indices are not contiguous from 0".into()));
    }
    let first = &frames[0];
    let (bs_dim, dof, source, round) = (
        first.blendshape.len(),
        first.motor.len(),
        first.source,
        first.round.unwrap_or(0),
    );
    if frames
        .iter()
        .any(|f| f.blendshape.len() != bs_dim || f.motor.len() != dof || f.source != source)
    {
        return Err(bad("inconsistent frame widths or sources".into()));
    }
    let t = frames.len();
    let bs = Array2::from_shape_vec(
        (t, bs_dim),
        frames.iter().flat_map(|f| f.blendshape.iter().copied()).collect(),
    )
    .map_err(|e| bad(e.to_string()))?;
    let motor = Array2::from_shape_vec(
        (t, dof),
        frames.iter().flat_map(|f| f.motor.iter().copied()).collect(),
    )
    .map_err(|e| bad(e.to_string()))?;
    TrainingSample::new(
        MotorSequence::clean(motor).map_err(|e| bad(e.to_string()))?,
        BlendshapeSequence::new(bs, SEQUENCE_RATE_HZ).map_err(|e| bad(e.to_string()))?,
        source,
        round,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(v: f32, source: DataSource, round: usize) -> TrainingSample {
        let m = Array2::from_shape_fn((3, 2), |(i, j)| v * (i + j) as f32 / 4.0);
        let b = Array2::from_shape_fn((3, 4), |(i, j)| (v + 0.1 * (i * j) as f32).min(1.0));
        TrainingSample::new(
            MotorSequence::clean(m).unwrap(),
            BlendshapeSequence::new(b, SEQUENCE_RATE_HZ).unwrap(),
            source,
            round,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_preserves_values_and_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let data = vec![
            sample(0.3, DataSource::Static, 0),
            sample(1.0 / 3.0, DataSource::Bootstrap, 2),
        ];
        write_dataset(&path, &data).unwrap();
        assert_eq!(read_dataset(&path).unwrap(), data);
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 6);
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        for key in ["seq_id", "frame_idx", "blendshape", "motor", "source"] {
            assert!(first.get(key).is_some(), "missing {key}");
        }
        assert_eq!(first["source"], "static");
    }

    #[test]
    fn accepts_external_records_without_optional_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ext.jsonl");
        let lines = [
            r#"{"seq_id":7,"frame_idx":1,"blendshape":[0.2],"motor":[0.5,0.5],"source":"external","image_path":"img/1.png"}"#,
            r#"{"seq_id":7,"frame_idx":0,"blendshape":[0.1],"motor":[0.4,0.6],"source":"external"}"#,
        ];
        std::fs::write(&path, lines.join("\n")).unwrap();
        let data = read_dataset(&path).unwrap();
        assert_eq!(data.len(), 1);
        assert_eq!(data[0].len(), 2);
        assert_eq!(data[0].source, DataSource::External);
        assert_eq!(data[0].blendshape.frame(0)[0], 0.1);
    }

    #[test]
    fn gaps_and_bad_values_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            r#"{"seq_id":1,"frame_idx":1,"blendshape":[0.1],"motor":[0.4],"source":"static"}"#,
        )
        .unwrap();
        assert!(read_dataset(&path).is_err());
        std::fs::write(
            &path,
            r#"{"seq_id":1,"frame_idx":0,"blendshape":[0.1],"motor":[1.4],"source":"static"}"#,
        )
        .unwrap();
        assert!(read_dataset(&path).is_err());
    }
}
