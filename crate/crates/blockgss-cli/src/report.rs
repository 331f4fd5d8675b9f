//! Line-oriented run reports.
//!
//! A report is `key=value` lines followed by one tab-separated `utt` line per
//! emitted utterance, so it stays trivially greppable and diffable.

use std::path::PathBuf;

use anyhow::{Context, Result};

#[derive(Debug, Clone)]
pub struct UttRecord {
    pub speaker: String,
    pub start_sec: f64,
    pub end_sec: f64,
    pub path: Option<PathBuf>,
    pub si_sdr_db: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub mode: String,
    pub audio_duration_sec: f64,
    /// Time with at least one speaker active; never exceeds the audio
    /// duration.
    pub speech_duration_sec: f64,
    pub processing_sec: f64,
    /// Present for streaming runs only.
    pub lookahead_violations: Option<usize>,
    /// Extra mode-specific `key=value` pairs, emitted in order.
    pub extras: Vec<(String, String)>,
    pub records: Vec<UttRecord>,
}

impl RunReport {
    /// Processing time over speech time; undefined without speech.
    pub fn rtf(&self) -> Option<f64> {
        if self.speech_duration_sec > 0.0 {
            Some(self.processing_sec / self.speech_duration_sec)
        } else {
            None
        }
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("mode={}\n", self.mode));
        out.push_str(&format!("audio_duration_sec={:.6}\n", self.audio_duration_sec));
        out.push_str(&format!("speech_duration_sec={:.6}\n", self.speech_duration_sec));
        out.push_str(&format!("processing_sec={:.6}\n", self.processing_sec));
        match self.rtf() {
            Some(rtf) => out.push_str(&format!("rtf={rtf:.6}\n")),
            None => out.push_str("rtf=NA\n"),
        }
        out.push_str(&format!("utterances={}\n", self.records.len()));
        if let Some(violations) = self.lookahead_violations {
            out.push_str(&format!("lookahead_violations={violations}\n"));
        }
        for (key, value) in &self.extras {
            out.push_str(&format!("{key}={value}\n"));
        }
        for record in &self.records {
            let path = record
                .path
                .as_ref()
                .map_or_else(|| "-".to_string(), |p| p.display().to_string());
            let score = record
                .si_sdr_db
                .map_or_else(|| "NA".to_string(), |v| format!("{v:.2}"));
            out.push_str(&format!(
                "utt\t{}\t{:.3}\t{:.3}\t{}\t{}\n",
                record.speaker, record.start_sec, record.end_sec, path, score
            ));
        }
        out
    }

    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.render())
            .with_context(|| format!("cannot write report to {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> RunReport {
        RunReport {
            mode: "online".into(),
            audio_duration_sec: 60.0,
            speech_duration_sec: 40.0,
            processing_sec: 10.0,
            lookahead_violations: Some(0),
            extras: vec![("strategy".into(), "decay".into())],
            records: vec![
                UttRecord {
                    speaker: "alice".into(),
                    start_sec: 0.48,
                    end_sec: 2.912,
                    path: Some(PathBuf::from("out/alice_480_2912.wav")),
                    si_sdr_db: Some(8.214),
                },
                UttRecord {
                    speaker: "bob".into(),
                    start_sec: 2.0,
                    end_sec: 3.5,
                    path: None,
                    si_sdr_db: None,
                },
            ],
        }
    }

    #[test]
    fn renders_totals_and_utterance_lines() {
        let text = sample().render();
        assert!(text.contains("mode=online\n"));
        assert!(text.contains("rtf=0.250000\n"));
        assert!(text.contains("utterances=2\n"));
        assert!(text.contains("lookahead_violations=0\n"));
        assert!(text.contains("strategy=decay\n"));
        assert!(text.contains("utt\talice\t0.480\t2.912\tout/alice_480_2912.wav\t8.21\n"));
        assert!(text.contains("utt\tbob\t2.000\t3.500\t-\tNA\n"));
    }

    #[test]
    fn rtf_undefined_without_speech() {
        let mut report = sample();
        report.speech_duration_sec = 0.0;
        report.records.clear();
        report.lookahead_violations = None;
        let text = report.render();
        assert!(text.contains("rtf=NA\n"));
        assert!(!text.contains("lookahead_violations"));
        assert!(text.contains("utterances=0\n"));
    }
}
