//! VisDrone annotation format.
//!
//! One object per line, `x,y,w,h,score,category,truncation,occlusion`:
//! integer fields, pixel coordinates with a top-left origin. A trailing
//! comma (present in some distributions) is tolerated. Categories 1–10
//! are real classes and map to class ids 0–9; category 0 (ignored
//! regions) and 11 (others) are kept but flagged ignored.

use thiserror::Error;
use tinydet_core::bbox::BBox;
use tinydet_core::eval::GroundTruth;

#[derive(Debug, Error, PartialEq)]
pub enum VisDroneError {
    #[error("line {line}: malformed annotation: {content:?}")]
    MalformedLine { line: usize, content: String },
    #[error("line {line}: box size must be positive, got {w}x{h}")]
    NonPositiveSize { line: usize, w: i64, h: i64 },
}

/// One annotation line, verbatim.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VisDroneRecord {
    pub x: i64,
    pub y: i64,
    pub w: i64,
    pub h: i64,
    pub score: i64,
    pub category: i64,
    pub truncation: i64,
    pub occlusion: i64,
}

impl VisDroneRecord {
    pub fn is_ignored(&self) -> bool {
        self.category == 0 || self.category == 11
    }
}

/// Parse annotation text into records. Blank lines are skipped; line
/// numbers in errors are 1-indexed.
pub fn parse_visdrone_records(text: &str) -> Result<Vec<VisDroneRecord>, VisDroneError> {
    let mut records = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let malformed = || VisDroneError::MalformedLine {
            line,
            content: raw.to_string(),
        };

        let mut fields: Vec<&str> = raw.split(',').map(str::trim).collect();
        if fields.last() == Some(&"") {
            fields.pop();
        }
        if fields.len() < 6 || fields.len() > 8 {
            return Err(malformed());
        }
        let mut values = [0i64; 8];
        for (slot, field) in values.iter_mut().zip(&fields) {
            *slot = field.parse().map_err(|_| malformed())?;
        }
        let rec = VisDroneRecord {
            x: values[0],
            y: values[1],
            w: values[2],
            h: values[3],
            score: values[4],
            category: values[5],
            truncation: values[6],
            occlusion: values[7],
        };
        if rec.w <= 0 || rec.h <= 0 {
            return Err(VisDroneError::NonPositiveSize {
                line,
                w: rec.w,
                h: rec.h,
            });
        }
        if !(0..=11).contains(&rec.category) {
            return Err(malformed());
        }
        records.push(rec);
    }
    Ok(records)
}

/// Canonical eight-field form, one record per line, LF endings.
pub fn serialize_visdrone_records(records: &[VisDroneRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.x, r.y, r.w, r.h, r.score, r.category, r.truncation, r.occlusion
        ));
    }
    out
}

/// Convert records to normalized center-format ground truths for an image
/// of the given pixel dimensions.
pub fn records_to_ground_truths(
    records: &[VisDroneRecord],
    image_id: &str,
    image_w: u32,
    image_h: u32,
) -> Vec<GroundTruth> {
    assert!(
        image_w > 0 && image_h > 0,
        "image dimensions must be positive"
    );
    let sw = image_w as f64;
    let sh = image_h as f64;
    records
        .iter()
        .map(|r| {
            let cx = (r.x as f64 + r.w as f64 / 2.0) / sw;
            let cy = (r.y as f64 + r.h as f64 / 2.0) / sh;
            let bbox = BBox::new(cx, cy, r.w as f64 / sw, r.h as f64 / sh)
                .expect("positive pixel sizes stay positive after scaling");
            let class_id = if r.is_ignored() {
                0
            } else {
                (r.category - 1) as usize
            };
            GroundTruth {
                image_id: image_id.to_string(),
                class_id,
                bbox,
                ignored: r.is_ignored(),
            }
        })
        .collect()
}

/// Parse annotation text straight to ground truths.
pub fn parse_visdrone_annotations(
    text: &str,
    image_id: &str,
    image_w: u32,
    image_h: u32,
) -> Result<Vec<GroundTruth>, VisDroneError> {
    let records = parse_visdrone_records(text)?;
    Ok(records_to_ground_truths(
        &records, image_id, image_w, image_h,
    ))
}
