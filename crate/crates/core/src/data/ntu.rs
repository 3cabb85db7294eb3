//! Reader for the NTU RGB+D `.skeleton` text format.
//!
//! ```text
//! <frame count>
//! per frame:
//!   <body count>
//!   per body:
//!     <body id> <clipped edges> <hand states ...> <lean x> <lean y> <tracking state>
//!     <joint count>
//!     per joint: x y z depthX depthY colorX colorY orientW orientX orientY orientZ trackingState
//! ```
//!
//! Only the first three joint fields are used. Bodies are matched across
//! frames by id; when more than `bodies` distinct ids appear, the ones with
//! the largest coordinate variance are kept.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::preprocess::{SkeletonSequence, COORDS, DEFAULT_MAX_FRAMES};
use crate::tensor::Tensor;

pub const NTU_JOINTS: usize = 25;
pub const NTU_BODIES: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NtuReadOptions {
    /// Output length `T`; longer clips are truncated, shorter ones zero padded.
    pub frames: usize,
    pub joints: usize,
    pub bodies: usize,
}

impl Default for NtuReadOptions {
    fn default() -> Self {
        NtuReadOptions { frames: DEFAULT_MAX_FRAMES, joints: NTU_JOINTS, bodies: NTU_BODIES }
    }
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    line: usize,
}

impl<'a> Lines<'a> {
    fn next(&mut self, what: &str) -> Result<&'a str> {
        loop {
            match self.inner.next() {
                Some((i, l)) => {
                    self.line = i + 1;
                    if !l.trim().is_empty() {
                        return Ok(l);
                    }
                }
                None => {
                    return Err(Error::Parse { line: self.line + 1, message: format!("unexpected end of file, expected {what}") });
                }
            }
        }
    }

    fn count(&mut self, what: &str) -> Result<usize> {
        let l = self.next(what)?;
        l.trim().parse().map_err(|_| self.err(format!("expected {what}, found {:?}", l.trim())))
    }

    fn err(&self, message: String) -> Error {
        Error::Parse { line: self.line, message }
    }
}

/// Per-body joint positions for the frames in which the body appears.
struct Track {
    frames: BTreeMap<usize, Vec<[f64; 3]>>,
    first_seen: usize,
}

impl Track {
    fn variance(&self) -> f64 {
        let values: Vec<f64> = self.frames.values().flatten().flatten().copied().collect();
        if values.is_empty() {
            return 0.0;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
    }
}

/// Parses `.skeleton` text into a sequence with the given label and id.
pub fn parse_ntu_skeleton(text: &str, sample_id: &str, label: usize, opts: &NtuReadOptions) -> Result<SkeletonSequence> {
    let mut lines = Lines { inner: text.lines().enumerate(), line: 0 };
    let frame_count = lines.count("frame count")?;
    if frame_count == 0 {
        return Err(Error::Input(format!("{sample_id}: sequence declares 0 frames")));
    }
    let mut tracks: BTreeMap<String, Track> = BTreeMap::new();
    for f in 0..frame_count {
        let body_count = lines.count("body count")?;
        for _ in 0..body_count {
            let info = lines.next("body info")?;
            let id = info.split_whitespace().next().unwrap_or_default().to_string();
            let joint_count = lines.count("joint count")?;
            if joint_count != opts.joints {
                return Err(lines.err(format!("body has {joint_count} joints, expected {}", opts.joints)));
            }
            let mut joints = Vec::with_capacity(joint_count);
            for _ in 0..joint_count {
                let l = lines.next("joint record")?;
                let fields: Vec<&str> = l.split_whitespace().collect();
                if fields.len() < COORDS {
                    return Err(lines.err(format!("joint record has {} fields, expected at least 3", fields.len())));
                }
                let mut xyz = [0.0; 3];
                for (dst, s) in xyz.iter_mut().zip(&fields) {
                    *dst = s.parse().map_err(|_| lines.err(format!("invalid coordinate {s:?}")))?;
                }
                joints.push(xyz);
            }
            let track = tracks.entry(id).or_insert_with(|| Track { frames: BTreeMap::new(), first_seen: f });
            if track.frames.insert(f, joints).is_some() {
                return Err(lines.err(format!("body appears twice in frame {f}")));
            }
        }
    }

    let mut ranked: Vec<&Track> = tracks.values().collect();
    ranked.sort_by(|a, b| b.variance().total_cmp(&a.variance()).then(a.first_seen.cmp(&b.first_seen)));
    ranked.truncate(opts.bodies);
    ranked.sort_by_key(|t| t.first_seen);

    let (t, v, m) = (opts.frames, opts.joints, opts.bodies);
    let valid = frame_count.min(t);
    let mut data = Tensor::zeros(&[COORDS, t, v, m]);
    let out = data.data_mut();
    for (b, track) in ranked.iter().enumerate() {
        for (&f, joints) in track.frames.range(..valid) {
            for (j, xyz) in joints.iter().enumerate() {
                for (c, &x) in xyz.iter().enumerate() {
                    out[((c * t + f) * v + j) * m + b] = x;
                }
            }
        }
    }
    SkeletonSequence::new(data, valid, label, sample_id)
}

/// Zero-based action label from an NTU file name such as `S001C002P003R002A013`.
pub fn ntu_action_label(name: &str) -> Option<usize> {
    let pos = name.rfind('A')?;
    let digits: String = name[pos + 1..].chars().take_while(char::is_ascii_digit).collect();
    let action: usize = digits.parse().ok()?;
    action.checked_sub(1)
}

/// Reads a `.skeleton` file; the label comes from the `A###` part of the name.
pub fn read_ntu_skeleton(path: impl AsRef<Path>, opts: &NtuReadOptions) -> Result<SkeletonSequence> {
    let path = path.as_ref();
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
    let label = ntu_action_label(stem)
        .ok_or_else(|| Error::Input(format!("cannot read an action label from file name {}", path.display())))?;
    let text = std::fs::read_to_string(path)?;
    parse_ntu_skeleton(&text, stem, label, opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn body(id: &str, joints: usize, f: impl Fn(usize) -> [f64; 3]) -> String {
        let mut s = format!("{id} 0 1 1 1 1 0 0.1 0.2 2\n{joints}\n");
        for j in 0..joints {
            let [x, y, z] = f(j);
            s.push_str(&format!("{x} {y} {z} 0 0 0 0 1 0 0 0 2\n"));
        }
        s
    }

    #[test]
    fn labels_from_names() {
        assert_eq!(ntu_action_label("S001C002P003R002A013"), Some(12));
        assert_eq!(ntu_action_label("S001C002P003R002A000"), None);
        assert_eq!(ntu_action_label("clip"), None);
    }

    #[test]
    fn zero_frames_rejected() {
        assert!(matches!(parse_ntu_skeleton("0\n", "x", 0, &NtuReadOptions::default()), Err(Error::Input(_))));
    }

    #[test]
    fn malformed_joint_reports_line() {
        let text = format!("1\n1\n{}", body("7", 3, |j| [j as f64, 0.0, 0.0]));
        let mut lines: Vec<&str> = text.lines().collect();
        lines[5] = "1 zz 0";
        let opts = NtuReadOptions { frames: 4, joints: 3, bodies: 2 };
        match parse_ntu_skeleton(&lines.join("\n"), "x", 0, &opts) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 6),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn pads_to_length() {
        let text = format!("2\n1\n{}1\n{}", body("1", 2, |j| [j as f64, 1.0, 2.0]), body("1", 2, |_| [5.0, 5.0, 5.0]));
        let opts = NtuReadOptions { frames: 4, joints: 2, bodies: 2 };
        let s = parse_ntu_skeleton(&text, "x", 3, &opts).unwrap();
        assert_eq!(s.valid_frames, 2);
        assert_eq!(s.data.get(&[0, 0, 1, 0]), 1.0);
        assert_eq!(s.data.get(&[1, 1, 0, 0]), 5.0);
        assert_eq!(s.data.get(&[1, 2, 0, 0]), 0.0);
        assert_eq!(s.data.get(&[0, 0, 1, 1]), 0.0);
    }
}
