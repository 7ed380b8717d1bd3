//! Annotation files.
//!
//! * `dot-csv`: header `x,y`, one point per row.
//! * `box-jsonl`: one `{image, x, y, w, h, track_id, class_id, frame}` object
//!   per line. The same records double as the video-pair manifest.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::geometry::{BBox, Point};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnnotationFormat {
    DotCsv,
    BoxJsonl,
    VideoManifest,
}

impl FromStr for AnnotationFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dot-csv" => Ok(Self::DotCsv),
            "box-jsonl" => Ok(Self::BoxJsonl),
            "video-manifest" => Ok(Self::VideoManifest),
            other => Err(Error::InvalidArgument(format!("unknown annotation format `{other}`"))),
        }
    }
}

impl fmt::Display for AnnotationFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::DotCsv => "dot-csv",
            Self::BoxJsonl => "box-jsonl",
            Self::VideoManifest => "video-manifest",
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DotAnnotationSet {
    pub points: Vec<Point>,
    /// Typical object radius in pixels, when known.
    #[serde(default)]
    pub object_radius_hint: Option<f64>,
}

impl DotAnnotationSet {
    pub fn new(points: Vec<Point>) -> Self {
        Self {
            points,
            object_radius_hint: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate_bounds(&self, width: usize, height: usize) -> Result<()> {
        for (i, p) in self.points.iter().enumerate() {
            if !(p.x >= 0.0 && p.y >= 0.0 && p.x < width as f64 && p.y < height as f64) {
                return Err(Error::OutOfBounds(format!(
                    "point {i} at ({}, {}) outside {width}x{height}",
                    p.x, p.y
                )));
            }
        }
        Ok(())
    }
}

fn default_zero() -> u64 {
    0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxRecord {
    pub image: String,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    #[serde(default = "default_zero")]
    pub track_id: u64,
    #[serde(default)]
    pub class_id: u32,
    #[serde(default = "default_zero")]
    pub frame: u64,
}

impl BoxRecord {
    pub fn bbox(&self) -> BBox {
        BBox::new(self.x, self.y, self.w, self.h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Annotations {
    Dots(DotAnnotationSet),
    Boxes(Vec<BoxRecord>),
}

pub fn parse_dot_csv(text: &str, path: &Path) -> Result<DotAnnotationSet> {
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim().replace(' ', "") == "x,y" => {}
        Some((_, header)) => return Err(err(1, format!("expected header `x,y`, found `{header}`"))),
        None => return Err(err(1, "missing header `x,y`".into())),
    }
    let mut points = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 2 {
            return Err(err(lineno, format!("expected 2 fields, found {}", fields.len())));
        }
        let parse = |s: &str, name: &str| -> Result<f64> {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(lineno, format!("{name} is not a number: `{s}`")))
        };
        points.push(Point::new(parse(fields[0], "x")?, parse(fields[1], "y")?));
    }
    Ok(DotAnnotationSet::new(points))
}

pub fn parse_box_jsonl(text: &str, path: &Path) -> Result<Vec<BoxRecord>> {
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: BoxRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        rec.bbox().validate().map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push(rec);
    }
    Ok(records)
}

/// Loads an annotation file. When `bounds` is given, points must fall inside
/// and boxes must intersect a `width × height` image.
pub fn load_annotations(path: impl AsRef<Path>, format: AnnotationFormat, bounds: Option<(usize, usize)>) -> Result<Annotations> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    match format {
        AnnotationFormat::DotCsv => {
            let dots = parse_dot_csv(&text, path)?;
            if let Some((w, h)) = bounds {
                dots.validate_bounds(w, h)?;
            }
            Ok(Annotations::Dots(dots))
        }
        AnnotationFormat::BoxJsonl | AnnotationFormat::VideoManifest => {
            let boxes = parse_box_jsonl(&text, path)?;
            if let Some((w, h)) = bounds {
                if let Some(b) = boxes.iter().find(|b| !b.bbox().intersects(w, h)) {
                    return Err(Error::OutOfBounds(format!("box {:?} outside {w}x{h}", b.bbox())));
                }
            }
            Ok(Annotations::Boxes(boxes))
        }
    }
}

pub fn dot_csv_string(dots: &DotAnnotationSet) -> String {
    let mut s = String::from("x,y\n");
    for p in &dots.points {
        s.push_str(&format!("{},{}\n", p.x, p.y));
    }
    s
}

pub fn box_jsonl_string(records: &[BoxRecord]) -> Result<String> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn header_only_csv_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "a.csv", "x,y\n");
        let Annotations::Dots(d) = load_annotations(&p, AnnotationFormat::DotCsv, None).unwrap() else {
            panic!()
        };
        assert!(d.is_empty());
    }

    #[test]
    fn rows_are_kept_in_file_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "a.csv", "x,y\n3,4\n1.5,2\n10,0\n");
        let Annotations::Dots(d) = load_annotations(&p, AnnotationFormat::DotCsv, Some((20, 20))).unwrap() else {
            panic!()
        };
        assert_eq!(d.points, vec![Point::new(3.0, 4.0), Point::new(1.5, 2.0), Point::new(10.0, 0.0)]);
    }

    #[test]
    fn non_numeric_row_cites_its_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "a.csv", "x,y\nabc,4\n");
        match load_annotations(&p, AnnotationFormat::DotCsv, None) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn out_of_bounds_point_is_a_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "a.csv", "x,y\n3,4\n30,4\n");
        assert!(matches!(
            load_annotations(&p, AnnotationFormat::DotCsv, Some((20, 20))),
            Err(Error::OutOfBounds(_))
        ));
    }

    #[test]
    fn box_jsonl_round_trip_and_errors() {
        let recs = vec![
            BoxRecord { image: "a.png".into(), x: 1.0, y: 2.0, w: 10.0, h: 12.0, track_id: 7, class_id: 2, frame: 0 },
            BoxRecord { image: "a.png".into(), x: 5.0, y: 6.0, w: 8.0, h: 8.0, track_id: 8, class_id: 3, frame: 1 },
        ];
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "b.jsonl", &box_jsonl_string(&recs).unwrap());
        assert_eq!(
            load_annotations(&p, AnnotationFormat::VideoManifest, None).unwrap(),
            Annotations::Boxes(recs)
        );
        let bad = write(&dir, "c.jsonl", "{\"image\":\"a\",\"x\":0,\"y\":0,\"w\":1,\"h\":1}\n{\"image\":\"a\",\"x\":0}\n");
        match load_annotations(&bad, AnnotationFormat::BoxJsonl, None) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        let degenerate = write(&dir, "d.jsonl", "{\"image\":\"a\",\"x\":0,\"y\":0,\"w\":0,\"h\":1}\n");
        assert!(load_annotations(&degenerate, AnnotationFormat::BoxJsonl, None).is_err());
    }

    #[test]
    fn format_names_parse() {
        for f in ["dot-csv", "box-jsonl", "video-manifest"] {
            assert_eq!(f.parse::<AnnotationFormat>().unwrap().to_string(), f);
        }
        assert!("xml".parse::<AnnotationFormat>().is_err());
    }
}
