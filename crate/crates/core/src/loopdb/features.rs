//! Plain-text feature interchange:
//!
//! ```text
//! D <dim>
//! frame <index> <count>
//! x y d1 ... dD        (count lines)
//! ```

use std::fmt::Write as _;

use nalgebra::Vector2;

use super::{normalize, LocalFeature, LoopDbError};

pub fn write_features(dim: usize, frames: &[Vec<LocalFeature>]) -> String {
    let mut s = String::new();
    writeln!(s, "D {dim}").unwrap();
    for (k, feats) in frames.iter().enumerate() {
        writeln!(s, "frame {k} {}", feats.len()).unwrap();
        for f in feats {
            write!(s, "{} {}", f.position.x, f.position.y).unwrap();
            for d in &f.descriptor {
                write!(s, " {d}").unwrap();
            }
            s.push('\n');
        }
    }
    s
}

/// Returns the descriptor dimension and per-frame features. Frames must be
/// listed in order starting at 0; descriptors off unit length by more than
/// 1e-6 are renormalized.
pub fn parse_features(text: &str) -> Result<(usize, Vec<Vec<LocalFeature>>), LoopDbError> {
    let err = |line: usize, reason: String| LoopDbError::Parse { line, reason };
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    let (ln, header) = lines.next().ok_or_else(|| err(1, "missing 'D <dim>' header".into()))?;
    let dim = match header.split_whitespace().collect::<Vec<_>>()[..] {
        ["D", d] => d.parse::<usize>().ok().filter(|&d| d > 0).ok_or_else(|| err(ln, format!("bad dimension '{d}'")))?,
        _ => return Err(err(ln, format!("expected 'D <dim>', found '{header}'"))),
    };
    let mut frames = Vec::new();
    while let Some((ln, line)) = lines.next() {
        let count = match line.split_whitespace().collect::<Vec<_>>()[..] {
            ["frame", idx, count] => {
                let idx: usize = idx.parse().map_err(|_| err(ln, format!("bad frame index '{idx}'")))?;
                if idx != frames.len() {
                    return Err(err(ln, format!("expected frame {}, found {idx}", frames.len())));
                }
                count.parse::<usize>().map_err(|_| err(ln, format!("bad feature count '{count}'")))?
            }
            _ => return Err(err(ln, format!("expected 'frame <index> <count>', found '{line}'"))),
        };
        let mut feats = Vec::with_capacity(count);
        for _ in 0..count {
            let (ln, line) = lines.next().ok_or_else(|| err(ln, "file ends inside a frame".into()))?;
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>().ok().filter(|v| v.is_finite()))
                .collect::<Option<_>>()
                .ok_or_else(|| err(ln, "non-numeric token".into()))?;
            if vals.len() != dim + 2 {
                return Err(err(ln, format!("expected {} values, found {}", dim + 2, vals.len())));
            }
            let mut desc = vals[2..].to_vec();
            let n = desc.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-6 {
                normalize(&mut desc);
            }
            feats.push(LocalFeature { position: Vector2::new(vals[0], vals[1]), descriptor: desc });
        }
        frames.push(feats);
    }
    Ok((dim, frames))
}
