use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{HdError, Result};

/// One object in YOLO convention: centre and size normalized to the image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub class_id: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Slack for boxes that touch the border after decimal round-off.
const EDGE_TOL: f64 = 1e-6;

impl AnnotationRecord {
    pub fn new(class_id: usize, cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let r = Self { class_id, cx, cy, w, h };
        r.check().map_err(HdError::Dataset)?;
        Ok(r)
    }

    fn check(&self) -> std::result::Result<(), String> {
        let vals = [self.cx, self.cy, self.w, self.h];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err("non-finite coordinate".into());
        }
        if self.w <= 0.0 || self.h <= 0.0 || self.w > 1.0 || self.h > 1.0 {
            return Err(format!("box size {}x{} outside (0, 1]", self.w, self.h));
        }
        let (x0, x1) = (self.cx - self.w / 2.0, self.cx + self.w / 2.0);
        let (y0, y1) = (self.cy - self.h / 2.0, self.cy + self.h / 2.0);
        if x0 < -EDGE_TOL || y0 < -EDGE_TOL || x1 > 1.0 + EDGE_TOL || y1 > 1.0 + EDGE_TOL {
            return Err(format!(
                "box ({}, {}, {}, {}) leaves the unit square",
                self.cx, self.cy, self.w, self.h
            ));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// `[cx, cy, w, h]` in pixels.
    pub fn to_pixels(&self, width: usize, height: usize) -> [f64; 4] {
        let (w, h) = (width as f64, height as f64);
        [self.cx * w, self.cy * h, self.w * w, self.h * h]
    }

    pub fn to_line(&self) -> String {
        format!("{} {:.6} {:.6} {:.6} {:.6}", self.class_id, self.cx, self.cy, self.w, self.h)
    }
}

/// Parse YOLO-txt contents; `path` is only used in error messages.
pub fn parse_labels(text: &str, path: &Path) -> Result<Vec<AnnotationRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| HdError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(err(format!("expected 5 fields, found {}", fields.len())));
        }
        let class_id: usize = fields[0]
            .parse()
            .map_err(|_| err(format!("bad class id `{}`", fields[0])))?;
        let mut v = [0.0; 4];
        for (k, f) in fields[1..].iter().enumerate() {
            v[k] = f.parse().map_err(|_| err(format!("bad number `{f}`")))?;
        }
        let r = AnnotationRecord {
            class_id,
            cx: v[0],
            cy: v[1],
            w: v[2],
            h: v[3],
        };
        r.check().map_err(err)?;
        out.push(r);
    }
    Ok(out)
}

pub fn read_labels(path: &Path) -> Result<Vec<AnnotationRecord>> {
    match std::fs::read_to_string(path) {
        Ok(s) => parse_labels(&s, path),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
        Err(e) => Err(HdError::io(path, e)),
    }
}

pub fn format_labels(records: &[AnnotationRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&r.to_line());
        s.push('\n');
    }
    s
}

pub fn write_labels(path: &Path, records: &[AnnotationRecord]) -> Result<()> {
    std::fs::write(path, format_labels(records)).map_err(|e| HdError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_a_centred_box() {
        let r = parse_labels("0 0.5 0.5 0.1 0.1\n", Path::new("a.txt")).unwrap();
        assert_eq!(r, vec![AnnotationRecord::new(0, 0.5, 0.5, 0.1, 0.1).unwrap()]);
    }

    #[test]
    fn empty_file_has_no_records() {
        assert!(parse_labels("", Path::new("a.txt")).unwrap().is_empty());
        assert!(parse_labels("\n  \n", Path::new("a.txt")).unwrap().is_empty());
    }

    #[test]
    fn errors_carry_file_and_line() {
        let text = "0 0.5 0.5 0.1 0.1\n1 0.5 x 0.1 0.1\n";
        match parse_labels(text, Path::new("lbl/img3.txt")) {
            Err(HdError::Parse { path, line, .. }) => {
                assert_eq!(path, Path::new("lbl/img3.txt"));
                assert_eq!(line, 2);
            }
            other => panic!("{other:?}"),
        }
        let e = parse_labels("0 0.5 0.5 0.1\n", Path::new("f.txt")).unwrap_err();
        assert!(e.to_string().starts_with("f.txt:1:"), "{e}");
    }

    #[test]
    fn rejects_out_of_range() {
        for line in ["0 0.95 0.5 0.2 0.1", "0 0.5 0.5 0 0.1", "0 0.5 0.5 1.5 0.1", "-1 0.5 0.5 0.1 0.1"] {
            assert!(parse_labels(line, Path::new("f.txt")).is_err(), "{line}");
        }
    }

    #[test]
    fn missing_file_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        assert!(read_labels(&dir.path().join("none.txt")).unwrap().is_empty());
    }
}
