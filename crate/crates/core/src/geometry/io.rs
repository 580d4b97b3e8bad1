//! Plain-text landmark sequence files.
//!
//! ```text
//! LANDMARKS version=1 fps=62.5 n_frames=2 n_points=68
//! x1 y1 z1 ... x68 y68 z68
//! x1 y1 z1 ... x68 y68 z68
//! ```
//!
//! Values are written in shortest round-trip form, so save/load is lossless.

use std::fmt::Write as _;
use std::path::Path;

use super::landmarks::{LandmarkFrame, LandmarkSequence, FLAT_DIM, N_LANDMARKS};
use super::GeometryError;

const MAGIC: &str = "LANDMARKS";
const VERSION: u32 = 1;

pub fn format_sequence(seq: &LandmarkSequence) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{MAGIC} version={VERSION} fps={} n_frames={} n_points={N_LANDMARKS}",
        seq.fps(),
        seq.len()
    );
    for f in seq.frames() {
        let line: Vec<String> = f.to_flat().iter().map(|v| format!("{v}")).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

fn parse_err(line: usize, msg: impl Into<String>) -> GeometryError {
    GeometryError::Parse { line, msg: msg.into() }
}

/// Parses `key=value` tokens of a header line after the magic word.
fn header_fields<'a>(line: &'a str, magic: &str, lineno: usize) -> Result<Vec<(&'a str, &'a str)>, GeometryError> {
    let mut toks = line.split_whitespace();
    if toks.next() != Some(magic) {
        return Err(parse_err(lineno, format!("expected header starting with '{magic}'")));
    }
    toks.map(|t| t.split_once('=').ok_or_else(|| parse_err(lineno, format!("malformed header token '{t}'"))))
        .collect()
}

pub fn parse_sequence(text: &str) -> Result<LandmarkSequence, GeometryError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| parse_err(1, "empty file"))?;
    let fields = header_fields(header, MAGIC, 1)?;
    let get = |k: &str| {
        fields
            .iter()
            .find(|(key, _)| *key == k)
            .map(|(_, v)| *v)
            .ok_or_else(|| parse_err(1, format!("missing header field '{k}'")))
    };
    let version: u32 = get("version")?.parse().map_err(|_| parse_err(1, "bad field 'version'"))?;
    if version != VERSION {
        return Err(parse_err(1, format!("unsupported version {version}")));
    }
    let fps: f64 = get("fps")?.parse().map_err(|_| parse_err(1, "bad field 'fps'"))?;
    let n_frames: usize = get("n_frames")?.parse().map_err(|_| parse_err(1, "bad field 'n_frames'"))?;
    let n_points: usize = get("n_points")?.parse().map_err(|_| parse_err(1, "bad field 'n_points'"))?;
    if n_points != N_LANDMARKS {
        return Err(parse_err(1, format!("field 'n_points' must be {N_LANDMARKS}, got {n_points}")));
    }
    let mut frames = Vec::with_capacity(n_frames);
    for (idx, line) in lines {
        let lineno = idx + 1;
        let vals = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| parse_err(lineno, format!("bad number '{t}'"))))
            .collect::<Result<Vec<_>, _>>()?;
        if vals.len() != FLAT_DIM {
            return Err(parse_err(lineno, format!("expected {FLAT_DIM} values, got {}", vals.len())));
        }
        frames.push(LandmarkFrame::from_flat(&vals).map_err(|e| parse_err(lineno, e.to_string()))?);
    }
    if frames.len() != n_frames {
        return Err(parse_err(1, format!("field 'n_frames' says {n_frames}, found {}", frames.len())));
    }
    LandmarkSequence::new(frames, fps)
}

pub fn save_sequence(seq: &LandmarkSequence, path: impl AsRef<Path>) -> Result<(), GeometryError> {
    std::fs::write(path, format_sequence(seq))?;
    Ok(())
}

pub fn load_sequence(path: impl AsRef<Path>) -> Result<LandmarkSequence, GeometryError> {
    parse_sequence(&std::fs::read_to_string(path)?)
}

/// Loads a single-frame template file.
pub fn load_template(path: impl AsRef<Path>) -> Result<LandmarkFrame, GeometryError> {
    let seq = load_sequence(path)?;
    if seq.len() != 1 {
        return Err(parse_err(1, format!("template must have n_frames=1, got {}", seq.len())));
    }
    Ok(seq.frame(0).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::landmarks::{standard_template, Point3};

    #[test]
    fn round_trip_is_exact() {
        let t = standard_template();
        let f2 = t.translated(&Point3::new(0.1, 1.0 / 3.0, -2e-17));
        let seq = LandmarkSequence::new(vec![t, f2], 62.5).unwrap();
        let text = format_sequence(&seq);
        let back = parse_sequence(&text).unwrap();
        assert_eq!(back, seq);
        assert_eq!(format_sequence(&back), text);
    }

    #[test]
    fn errors_name_the_field() {
        let seq = LandmarkSequence::repeat(&standard_template(), 1, 62.5).unwrap();
        let text = format_sequence(&seq);
        let bad = text.replace("n_points=68", "n_points=67");
        assert!(parse_sequence(&bad).unwrap_err().to_string().contains("n_points"));
        let bad = text.replace("n_frames=1", "n_frames=2");
        assert!(parse_sequence(&bad).unwrap_err().to_string().contains("n_frames"));
        let bad = text.replacen(" ", " nan_x ", 6);
        assert!(parse_sequence(&bad).is_err());
        let mut short = text.clone();
        short.truncate(text.rfind(' ').unwrap());
        assert!(parse_sequence(&short).is_err());
    }

    #[test]
    fn nan_payload_rejected() {
        let seq = LandmarkSequence::repeat(&standard_template(), 1, 62.5).unwrap();
        let text = format_sequence(&seq);
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let mut vals: Vec<&str> = lines[1].split(' ').collect();
        vals[3] = "NaN";
        lines[1] = vals.join(" ");
        assert!(parse_sequence(&lines.join("\n")).is_err());
    }
}
