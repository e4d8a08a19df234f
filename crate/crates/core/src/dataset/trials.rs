use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use super::manifest::Manifest;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrialPair {
    pub same_speaker: bool,
    pub utt_a: String,
    pub utt_b: String,
}

/// Parses `<label 0|1> <id_a> <id_b>` lines without resolving ids.
pub fn parse_trials(text: &str, origin: &str) -> Result<Vec<TrialPair>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: origin.to_string(),
            line: n + 1,
            msg,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(err(format!("expected `label id_a id_b`, got {} fields", fields.len())));
        }
        let same_speaker = match fields[0] {
            "1" => true,
            "0" => false,
            other => return Err(err(format!("label must be 0 or 1, got {other:?}"))),
        };
        out.push(TrialPair {
            same_speaker,
            utt_a: fields[1].to_string(),
            utt_b: fields[2].to_string(),
        });
    }
    Ok(out)
}

/// Checks that every trial id exists in `manifest`; the error names the first offender.
pub fn validate_trials(trials: &[TrialPair], manifest: &Manifest) -> Result<()> {
    let index = manifest.index_of();
    for (i, t) in trials.iter().enumerate() {
        for id in [&t.utt_a, &t.utt_b] {
            if !index.contains_key(id.as_str()) {
                return Err(Error::Validation(format!(
                    "trial {}: utterance id {id:?} not in manifest",
                    i + 1
                )));
            }
        }
    }
    Ok(())
}

pub fn load_trials(path: &Path, manifest: &Manifest) -> Result<Vec<TrialPair>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let trials = parse_trials(&text, &path.display().to_string())?;
    validate_trials(&trials, manifest)?;
    Ok(trials)
}

pub fn trials_to_text(trials: &[TrialPair]) -> String {
    let mut s = String::new();
    for t in trials {
        let _ = writeln!(s, "{} {} {}", u8::from(t.same_speaker), t.utt_a, t.utt_b);
    }
    s
}

/// Parses `id nuisance_class` lines (written next to synthetic manifests).
pub fn parse_nuisance(text: &str, origin: &str) -> Result<HashMap<String, usize>> {
    let mut out = HashMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let parsed = match fields.as_slice() {
            [id, class] => class.parse::<usize>().ok().map(|c| (id.to_string(), c)),
            _ => None,
        };
        let (id, class) = parsed.ok_or_else(|| Error::Parse {
            path: origin.to_string(),
            line: n + 1,
            msg: "expected `id nuisance_class`".into(),
        })?;
        out.insert(id, class);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use std::path::PathBuf;

    use super::*;

    fn manifest() -> Manifest {
        Manifest::from_entries(
            [
                ("u1", "a", PathBuf::from("1.wav")),
                ("u2", "a", PathBuf::from("2.wav")),
                ("u3", "b", PathBuf::from("3.wav")),
            ],
            ".",
        )
        .unwrap()
    }

    #[test]
    fn labels_parse() {
        let t = parse_trials("1 u1 u2\n0 u1 u3\n", "t").unwrap();
        assert!(t[0].same_speaker);
        assert!(!t[1].same_speaker);
        validate_trials(&t, &manifest()).unwrap();
        assert_eq!(parse_trials(&trials_to_text(&t), "t").unwrap(), t);
    }

    #[test]
    fn two_fields_is_parse_error_at_line() {
        match parse_trials("1 u1 u2\n1 u1\n", "t") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_label_and_unknown_id() {
        assert!(matches!(parse_trials("2 u1 u2\n", "t"), Err(Error::Parse { .. })));
        let t = parse_trials("1 u1 u9\n", "t").unwrap();
        match validate_trials(&t, &manifest()) {
            Err(Error::Validation(msg)) => assert!(msg.contains("u9")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn nuisance_file() {
        let m = parse_nuisance("u1 0\nu2 3\n", "n").unwrap();
        assert_eq!(m["u2"], 3);
        assert!(parse_nuisance("u1\n", "n").is_err());
    }
}
