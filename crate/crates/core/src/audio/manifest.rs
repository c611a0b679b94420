use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One annotated audio of a dataset manifest (JSON lines).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    /// WAV path relative to the manifest's directory.
    pub wav: String,
    pub duration_s: f64,
    pub cuts_s: Vec<f64>,
}

impl ManifestRecord {
    pub fn wav_path(&self, manifest_dir: &Path) -> PathBuf {
        manifest_dir.join(&self.wav)
    }
}

/// Reads a JSON-lines manifest, skipping blank lines.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyManifest(path.display().to_string()));
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_empty() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let recs = vec![
            ManifestRecord { id: "a".into(), wav: "a.wav".into(), duration_s: 1.5, cuts_s: vec![0.5, 1.0] },
            ManifestRecord { id: "b".into(), wav: "sub/b.wav".into(), duration_s: 2.0, cuts_s: vec![] },
        ];
        write_manifest(&p, &recs).unwrap();
        assert_eq!(read_manifest(&p).unwrap(), recs);
        assert_eq!(recs[1].wav_path(dir.path()), dir.path().join("sub/b.wav"));

        std::fs::write(&p, "\n\n").unwrap();
        assert!(matches!(read_manifest(&p), Err(Error::EmptyManifest(_))));
        std::fs::write(&p, "{\"id\": 3}\n").unwrap();
        assert!(matches!(read_manifest(&p), Err(Error::Json(_))));
    }
}
