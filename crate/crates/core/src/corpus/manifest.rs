use std::collections::HashSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// One corpus item, as written in a manifest line `path|phonemes|speaker_id[|style]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UtteranceRecord {
    /// As written in the manifest; relative paths are resolved against the manifest's directory.
    pub audio_path: PathBuf,
    pub phonemes: Vec<String>,
    pub speaker_id: String,
    pub style: Option<String>,
}

impl UtteranceRecord {
    /// The audio file stem, used as the utterance id.
    pub fn utt_id(&self) -> String {
        self.audio_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
    }

    pub fn phoneme_string(&self) -> String {
        self.phonemes.join(" ")
    }

    pub fn resolved_path(&self, base_dir: &Path) -> PathBuf {
        if self.audio_path.is_absolute() {
            self.audio_path.clone()
        } else {
            base_dir.join(&self.audio_path)
        }
    }

    pub fn to_line(&self) -> String {
        let mut line = format!("{}|{}|{}", self.audio_path.display(), self.phoneme_string(), self.speaker_id);
        if let Some(style) = &self.style {
            line.push('|');
            line.push_str(style);
        }
        line
    }
}

/// Parsed manifest plus the records whose audio is missing on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub records: Vec<UtteranceRecord>,
    pub base_dir: PathBuf,
    /// `(line number, resolved path)` of records whose audio file does not exist.
    pub missing_audio: Vec<(usize, PathBuf)>,
}

impl Manifest {
    pub fn speakers(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for r in &self.records {
            if !seen.contains(&r.speaker_id) {
                seen.push(r.speaker_id.clone());
            }
        }
        seen.sort();
        seen
    }

    /// Sorted set of phoneme symbols used by the records.
    pub fn symbols(&self) -> Vec<String> {
        let mut s: Vec<String> =
            self.records.iter().flat_map(|r| r.phonemes.iter().cloned()).collect::<HashSet<_>>().into_iter().collect();
        s.sort();
        s
    }
}

/// Parses manifest text. Blank lines and lines starting with `#` are skipped.
pub fn parse_manifest(text: &str, origin: &Path) -> Result<Vec<UtteranceRecord>> {
    let mut records = Vec::new();
    let mut ids = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let malformed = |reason: &str| Error::MalformedManifest {
            path: origin.to_path_buf(),
            line: line_no,
            reason: reason.to_string(),
        };
        let fields: Vec<&str> = line.split('|').collect();
        if !(3..=4).contains(&fields.len()) {
            return Err(malformed(&format!("expected 3 or 4 `|`-separated fields, found {}", fields.len())));
        }
        let path = fields[0].trim();
        let phonemes: Vec<String> = fields[1].split_whitespace().map(str::to_string).collect();
        let speaker = fields[2].trim();
        if path.is_empty() {
            return Err(malformed("empty audio path"));
        }
        if phonemes.is_empty() {
            return Err(malformed("empty phoneme sequence"));
        }
        if speaker.is_empty() {
            return Err(malformed("empty speaker id"));
        }
        let style = match fields.get(3).map(|s| s.trim()) {
            Some("") => return Err(malformed("empty style tag")),
            Some(s) => Some(s.to_string()),
            None => None,
        };
        let record = UtteranceRecord { audio_path: PathBuf::from(path), phonemes, speaker_id: speaker.to_string(), style };
        if !ids.insert(record.utt_id()) {
            return Err(Error::DuplicateUtterance(record.utt_id()));
        }
        records.push(record);
    }
    Ok(records)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path)?;
    let records = parse_manifest(&text, path)?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut missing_audio = Vec::new();
    let mut line_of = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(i, _)| i + 1);
    for r in &records {
        let line = line_of.next().unwrap_or(0);
        let p = r.resolved_path(&base_dir);
        if !p.exists() {
            missing_audio.push((line, p));
        }
    }
    Ok(Manifest { records, base_dir, missing_audio })
}

pub fn write_manifest<W: Write>(records: &[UtteranceRecord], mut writer: W) -> Result<()> {
    for r in records {
        writeln!(writer, "{}", r.to_line())?;
    }
    Ok(())
}

pub fn save_manifest(records: &[UtteranceRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_manifest(records, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}
