//! Writing generated scenes to disk.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use blockgss::diarization::SegmentList;
use blockgss::eval::Scene;

use crate::wav;

/// Files produced by [`write_scene`].
pub struct ScenePaths {
    pub mixture: PathBuf,
    pub segments: PathBuf,
    pub references: Vec<(String, PathBuf)>,
}

/// Lays a scene out as `mixture.wav`, `segments.txt` and per-speaker
/// `refs/<speaker>.wav`.
pub fn write_scene(dir: &Path, scene: &Scene) -> Result<ScenePaths> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("cannot create {}", dir.display()))?;
    let mixture = dir.join("mixture.wav");
    wav::write_wav(&mixture, &scene.mixture, scene.sample_rate_hz)?;

    let segments = dir.join("segments.txt");
    std::fs::write(&segments, render_segments(&scene.segments))
        .with_context(|| format!("cannot write {}", segments.display()))?;

    let refs_dir = dir.join("refs");
    std::fs::create_dir_all(&refs_dir)?;
    let mut references = Vec::new();
    for (i, speaker) in scene.segments.speakers().iter().enumerate() {
        let path = refs_dir.join(format!("{speaker}.wav"));
        wav::write_wav_mono(&path, &scene.references[i], scene.sample_rate_hz)?;
        references.push((speaker.clone(), path));
    }
    Ok(ScenePaths {
        mixture,
        segments,
        references,
    })
}

/// Renders segments in the `label start end` text format the parser accepts.
pub fn render_segments(segments: &SegmentList) -> String {
    let mut out = String::new();
    for segment in &segments.entries {
        out.push_str(&format!(
            "{} {:.6} {:.6}\n",
            segment.speaker, segment.start_sec, segment.end_sec
        ));
    }
    out
}
