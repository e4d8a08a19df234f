use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    /// Contiguous 0-based speaker index.
    pub speaker: usize,
    /// Path as written in the manifest (relative to the manifest's directory
    /// unless absolute).
    pub path: PathBuf,
}

/// Utterance list with speakers re-indexed in order of first appearance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    /// `speaker_labels[i]` is the original label of speaker index `i`.
    pub speaker_labels: Vec<String>,
    /// Directory that relative entry paths are resolved against.
    pub root: PathBuf,
}

impl Manifest {
    /// Builds a manifest from `(id, speaker_label, path)` triples.
    pub fn from_entries<I, S>(entries: I, root: impl Into<PathBuf>) -> Result<Self>
    where
        I: IntoIterator<Item = (S, S, PathBuf)>,
        S: Into<String>,
    {
        let mut labels: Vec<String> = Vec::new();
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for (id, label, path) in entries {
            let (id, label) = (id.into(), label.into());
            if !seen.insert(id.clone()) {
                return Err(Error::Validation(format!("duplicate utterance id {id:?}")));
            }
            let speaker = *index.entry(label.clone()).or_insert_with(|| {
                labels.push(label);
                labels.len() - 1
            });
            out.push(ManifestEntry { id, speaker, path });
        }
        if out.is_empty() {
            return Err(Error::Validation("manifest has no entries (no speakers)".into()));
        }
        Ok(Manifest {
            entries: out,
            speaker_labels: labels,
            root: root.into(),
        })
    }

    pub fn num_speakers(&self) -> usize {
        self.speaker_labels.len()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.root.join(&entry.path)
        }
    }

    pub fn index_of(&self) -> HashMap<&str, usize> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.id.as_str(), i))
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{} {} {}",
                e.id,
                self.speaker_labels[e.speaker],
                e.path.display()
            );
        }
        s
    }
}

/// Parses `id speaker_label relative_path` lines. Blank lines and `#` comments
/// are skipped.
pub fn parse_manifest(text: &str, origin: &str, root: impl Into<PathBuf>) -> Result<Manifest> {
    let mut triples = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                path: origin.to_string(),
                line: n + 1,
                msg: format!("expected `id speaker path`, got {} fields", fields.len()),
            });
        }
        triples.push((fields[0], fields[1], PathBuf::from(fields[2])));
    }
    Manifest::from_entries(triples, root)
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_manifest(&text, &path.display().to_string(), root)
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    std::fs::write(path, manifest.to_text()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_is_rejected() {
        assert!(matches!(parse_manifest("", "m", "."), Err(Error::Validation(_))));
        assert!(matches!(parse_manifest("# only\n\n", "m", "."), Err(Error::Validation(_))));
    }

    #[test]
    fn labels_are_reindexed() {
        let m = parse_manifest("u1 bob a.wav\nu2 alice b.wav\nu3 bob c.wav\n", "m", ".").unwrap();
        assert_eq!(m.num_speakers(), 2);
        assert_eq!(m.speaker_labels, vec!["bob", "alice"]);
        assert_eq!(
            m.entries.iter().map(|e| e.speaker).collect::<Vec<_>>(),
            vec![0, 1, 0]
        );
    }

    #[test]
    fn malformed_line_reports_line_number() {
        match parse_manifest("u1 a x.wav\nbroken line\n", "m.txt", ".") {
            Err(Error::Parse { line, path, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(path, "m.txt");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn duplicate_id_is_rejected() {
        assert!(matches!(
            parse_manifest("u1 a x.wav\nu1 b y.wav\n", "m", "."),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn write_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("manifest.txt");
        let m = parse_manifest("a s1 w/a.wav\nb s2 w/b.wav\nc s1 /abs/c.wav\n", "m", dir.path()).unwrap();
        write_manifest(&p, &m).unwrap();
        let back = load_manifest(&p).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.resolve(&back.entries[0]), dir.path().join("w/a.wav"));
        assert_eq!(back.resolve(&back.entries[2]), PathBuf::from("/abs/c.wav"));
    }
}
