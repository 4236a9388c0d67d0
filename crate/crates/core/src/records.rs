//! Line-delimited JSON exchange format for detections and ground truths.
//!
//! One record per line: `{"image_id", "class_id", "cx", "cy", "w", "h"}`
//! plus `"score"` on detections and an optional `"ignored"` flag on
//! ground truths. Coordinates are normalized. Numbers are written in
//! shortest round-trip decimal form, so write→read is exact for finite
//! values.

use crate::bbox::BBox;
use crate::eval::{Detection, GroundTruth};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: invalid box: {source}")]
    InvalidBox {
        line: usize,
        #[source]
        source: crate::bbox::BoxError,
    },
    #[error("line {line}: detection record is missing a score")]
    MissingScore { line: usize },
    #[error("line {line}: score {score} outside [0, 1]")]
    ScoreOutOfRange { line: usize, score: f64 },
    #[error("write failed: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Serialize, Deserialize)]
struct BoxRecord {
    image_id: String,
    class_id: usize,
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    score: Option<f64>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    ignored: bool,
}

pub fn write_detections<W: Write>(mut out: W, dets: &[Detection]) -> Result<(), RecordError> {
    for det in dets {
        let rec = BoxRecord {
            image_id: det.image_id.clone(),
            class_id: det.class_id,
            cx: det.bbox.cx(),
            cy: det.bbox.cy(),
            w: det.bbox.w(),
            h: det.bbox.h(),
            score: Some(det.score),
            ignored: false,
        };
        serde_json::to_writer(&mut out, &rec).map_err(std::io::Error::other)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_ground_truths<W: Write>(mut out: W, gts: &[GroundTruth]) -> Result<(), RecordError> {
    for gt in gts {
        let rec = BoxRecord {
            image_id: gt.image_id.clone(),
            class_id: gt.class_id,
            cx: gt.bbox.cx(),
            cy: gt.bbox.cy(),
            w: gt.bbox.w(),
            h: gt.bbox.h(),
            score: None,
            ignored: gt.ignored,
        };
        serde_json::to_writer(&mut out, &rec).map_err(std::io::Error::other)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

fn parse_lines<R: BufRead>(input: R) -> Result<Vec<(usize, BoxRecord)>, RecordError> {
    let mut records = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let line_no = idx + 1;
        let text = line.map_err(RecordError::Io)?;
        if text.trim().is_empty() {
            continue;
        }
        let rec: BoxRecord = serde_json::from_str(&text).map_err(|source| RecordError::Json {
            line: line_no,
            source,
        })?;
        records.push((line_no, rec));
    }
    Ok(records)
}

pub fn read_detections<R: BufRead>(input: R) -> Result<Vec<Detection>, RecordError> {
    parse_lines(input)?
        .into_iter()
        .map(|(line, rec)| {
            let bbox = BBox::new(rec.cx, rec.cy, rec.w, rec.h)
                .map_err(|source| RecordError::InvalidBox { line, source })?;
            let score = rec.score.ok_or(RecordError::MissingScore { line })?;
            if !(0.0..=1.0).contains(&score) {
                return Err(RecordError::ScoreOutOfRange { line, score });
            }
            Ok(Detection {
                image_id: rec.image_id,
                class_id: rec.class_id,
                bbox,
                score,
            })
        })
        .collect()
}

pub fn read_ground_truths<R: BufRead>(input: R) -> Result<Vec<GroundTruth>, RecordError> {
    parse_lines(input)?
        .into_iter()
        .map(|(line, rec)| {
            let bbox = BBox::new(rec.cx, rec.cy, rec.w, rec.h)
                .map_err(|source| RecordError::InvalidBox { line, source })?;
            Ok(GroundTruth {
                image_id: rec.image_id,
                class_id: rec.class_id,
                bbox,
                ignored: rec.ignored,
            })
        })
        .collect()
}
