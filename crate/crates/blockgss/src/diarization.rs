//! Diarization input: speaker segments and their frame-level activity view.
//!
//! Segment files are plain text, one `label start_sec end_sec` triple per
//! line, `#` starting a comment. Segments become an activity matrix with one
//! row per STFT frame and one column per source. Column 0 is the stationary
//! noise class and is always active; speakers occupy columns 1.. in order of
//! first appearance in the file.

use std::collections::HashMap;

use ndarray::{Array2, ArrayView2, Axis};

use crate::stft::StftConfig;
use crate::{Error, Result};

/// Column index of the always-active noise class.
pub const NOISE_SOURCE: usize = 0;

/// One diarized speaker turn, in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub speaker: String,
    pub start_sec: f64,
    pub end_sec: f64,
}

/// Parsed segment annotations in file order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SegmentList {
    pub entries: Vec<Segment>,
}

impl SegmentList {
    /// Speaker labels in order of first appearance.
    pub fn speakers(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for seg in &self.entries {
            if !seen.contains(&seg.speaker) {
                seen.push(seg.speaker.clone());
            }
        }
        seen
    }
}

/// Parses segment text. Lines are `label start end`, whitespace separated;
/// blank lines and `#` comments are skipped. CRLF input is accepted.
pub fn parse_segments(text: &str) -> Result<SegmentList> {
    let mut entries = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let speaker = parts.next().expect("nonempty line has a first token");
        let start: f64 = parse_field(parts.next(), idx, "start time")?;
        let end: f64 = parse_field(parts.next(), idx, "end time")?;
        if parts.next().is_some() {
            return Err(Error::Parse {
                line: idx + 1,
                message: "expected exactly three fields: label start end".into(),
            });
        }
        if !start.is_finite() || !end.is_finite() || start < 0.0 || end < start {
            return Err(Error::Parse {
                line: idx + 1,
                message: format!("invalid interval [{start}, {end}]"),
            });
        }
        entries.push(Segment {
            speaker: speaker.to_string(),
            start_sec: start,
            end_sec: end,
        });
    }
    Ok(SegmentList { entries })
}

fn parse_field(field: Option<&str>, idx: usize, what: &str) -> Result<f64> {
    let text = field.ok_or_else(|| Error::Parse {
        line: idx + 1,
        message: format!("missing {what}"),
    })?;
    text.parse().map_err(|_| Error::Parse {
        line: idx + 1,
        message: format!("cannot parse {what} from {text:?}"),
    })
}

/// Frame-by-source activity, including the all-ones noise column.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivityMatrix {
    data: Array2<u8>,
    labels: Vec<String>,
}

impl ActivityMatrix {
    /// Builds directly from a `(frames, sources)` array. Column 0 must be
    /// all ones; entries must be 0 or 1.
    pub fn from_raw(data: Array2<u8>, labels: Vec<String>) -> Result<Self> {
        if data.ncols() != labels.len() + 1 {
            return Err(Error::ShapeMismatch(format!(
                "{} activity columns need {} speaker labels, got {}",
                data.ncols(),
                data.ncols().saturating_sub(1),
                labels.len()
            )));
        }
        for (t, row) in data.outer_iter().enumerate() {
            if row[NOISE_SOURCE] != 1 {
                return Err(Error::ShapeMismatch(format!(
                    "noise column must be all ones, frame {t} is {}",
                    row[NOISE_SOURCE]
                )));
            }
            if row.iter().any(|&v| v > 1) {
                return Err(Error::ShapeMismatch(format!(
                    "activity entries must be 0 or 1, frame {t} violates this"
                )));
            }
        }
        Ok(Self { data, labels })
    }

    pub fn num_frames(&self) -> usize {
        self.data.nrows()
    }

    /// Sources including noise; speakers are `1..num_sources()`.
    pub fn num_sources(&self) -> usize {
        self.data.ncols()
    }

    pub fn is_active(&self, frame: usize, source: usize) -> bool {
        self.data[(frame, source)] != 0
    }

    /// Speaker label for a source index (`source >= 1`).
    pub fn label(&self, source: usize) -> &str {
        &self.labels[source - 1]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn view(&self) -> ArrayView2<'_, u8> {
        self.data.view()
    }

    /// Rows `start..end` as a view, for feeding one block to the engine.
    pub fn block(&self, start: usize, end: usize) -> ArrayView2<'_, u8> {
        self.data.slice(ndarray::s![start..end, ..])
    }

    /// Maximal runs of consecutive active frames per speaker, ordered by
    /// start frame. `end` is exclusive.
    pub fn utterance_runs(&self) -> Vec<UtteranceRun> {
        let mut runs = Vec::new();
        for source in 1..self.num_sources() {
            let col = self.data.index_axis(Axis(1), source);
            let mut open: Option<usize> = None;
            for (t, &v) in col.iter().enumerate() {
                match (open, v != 0) {
                    (None, true) => open = Some(t),
                    (Some(start), false) => {
                        runs.push(UtteranceRun {
                            source,
                            start,
                            end: t,
                        });
                        open = None;
                    }
                    _ => {}
                }
            }
            if let Some(start) = open {
                runs.push(UtteranceRun {
                    source,
                    start,
                    end: self.num_frames(),
                });
            }
        }
        runs.sort_by_key(|r| (r.start, r.source));
        runs
    }
}

/// A maximal run of active frames for one speaker; `end` exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UtteranceRun {
    pub source: usize,
    pub start: usize,
    pub end: usize,
}

/// Rasterizes segments onto the frame grid.
///
/// Frame `t` is active for a speaker when the frame's start time
/// `t * hop / rate` falls inside one of their segments (start inclusive,
/// end exclusive).
pub fn segments_to_activities(
    segments: &SegmentList,
    config: &StftConfig,
    num_frames: usize,
) -> ActivityMatrix {
    let speakers = segments.speakers();
    let index: HashMap<&str, usize> = speakers
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i + 1))
        .collect();
    let mut data = Array2::<u8>::zeros((num_frames, speakers.len() + 1));
    data.column_mut(NOISE_SOURCE).fill(1);
    for seg in &segments.entries {
        let source = index[seg.speaker.as_str()];
        for t in 0..num_frames {
            let at = config.frame_start_sec(t);
            if at >= seg.start_sec && at < seg.end_sec {
                data[(t, source)] = 1;
            }
        }
    }
    ActivityMatrix {
        data,
        labels: speakers,
    }
}
