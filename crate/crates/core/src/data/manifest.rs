//! Tab-separated dataset manifests with a fixed header line.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const MANIFEST_HEADER: &str = "id\tpath\tsamples\tspeaker\tlanguage";

/// One utterance: id, WAV path (relative to the manifest), sample count,
/// and optional task labels. An empty field means the label is absent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub path: String,
    pub samples: usize,
    pub speaker: Option<String>,
    pub language: Option<String>,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = String::new();
    out.push_str(MANIFEST_HEADER);
    out.push('\n');
    for e in entries {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            e.id,
            e.path,
            e.samples,
            e.speaker.as_deref().unwrap_or(""),
            e.language.as_deref().unwrap_or("")
        ));
    }
    let mut file = fs::File::create(path)?;
    file.write_all(out.as_bytes())?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let name = path.display().to_string();
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == MANIFEST_HEADER => {}
        _ => {
            return Err(Error::MalformedLine {
                path: name,
                line: 1,
                reason: format!("expected header {MANIFEST_HEADER:?}"),
            })
        }
    }
    let mut entries = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(Error::MalformedLine {
                path: name,
                line: idx + 1,
                reason: format!("expected 5 tab-separated fields, got {}", fields.len()),
            });
        }
        let samples: usize = fields[2].parse().map_err(|_| Error::MalformedLine {
            path: name.clone(),
            line: idx + 1,
            reason: format!("bad sample count {}", fields[2]),
        })?;
        if fields[0].is_empty() || samples == 0 {
            return Err(Error::MalformedLine {
                path: name.clone(),
                line: idx + 1,
                reason: "id must be non-empty and samples positive".into(),
            });
        }
        let opt = |s: &str| if s.is_empty() { None } else { Some(s.to_string()) };
        entries.push(ManifestEntry {
            id: fields[0].to_string(),
            path: fields[1].to_string(),
            samples,
            speaker: opt(fields[3]),
            language: opt(fields[4]),
        });
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip_with_absent_labels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tsv");
        let entries = vec![
            ManifestEntry {
                id: "u1".into(),
                path: "wav/u1.wav".into(),
                samples: 8000,
                speaker: Some("spk3".into()),
                language: None,
            },
            ManifestEntry {
                id: "u2".into(),
                path: "wav/u2.wav".into(),
                samples: 4000,
                speaker: None,
                language: Some("lang1".into()),
            },
        ];
        write_manifest(&path, &entries).unwrap();
        let back = read_manifest(&path).unwrap();
        assert_eq!(back, entries);
    }

    #[test]
    fn manifest_rejects_bad_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tsv");
        fs::write(&path, "wrong header\n").unwrap();
        assert!(read_manifest(&path).is_err());

        fs::write(&path, format!("{MANIFEST_HEADER}\nu1\twav/u1.wav\t0\t\t\n")).unwrap();
        assert!(read_manifest(&path).is_err());

        fs::write(&path, format!("{MANIFEST_HEADER}\nu1\twav only three\n")).unwrap();
        assert!(read_manifest(&path).is_err());
    }
}
