//! Input discovery: walk a directory tree, parse PAML-style control files,
//! and pair `<stem>.H0.ctl` / `<stem>.H1.ctl` files into bundles.
//!
//! The pairing convention is a filename one: both control files of a pair
//! live in the same directory and share a stem. Multiple stems per
//! directory are allowed; hierarchies of directories are allowed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use thiserror::Error;
use walkdir::WalkDir;

use crate::model::{Hypothesis, InputBundle};

/// A parsed `key = value` control file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ControlFile {
    pub path: PathBuf,
    /// Entries in file order; later duplicates have already overridden
    /// earlier ones.
    pub entries: IndexMap<String, String>,
}

pub const REQUIRED_KEYS: [&str; 3] = ["seqfile", "treefile", "outfile"];

#[derive(Debug, Error)]
pub enum ScanError {
    #[error("{path}: line {line}: malformed line (expected `key = value`)")]
    MalformedLine { path: PathBuf, line: usize },
    #[error("{path}: missing required key `{key}`")]
    MissingKey { path: PathBuf, key: String },
    #[error("{path}: key `{key}` has invalid value `{value}`")]
    InvalidValue {
        path: PathBuf,
        key: String,
        value: String,
    },
    #[error("{path}: `{key}` does not resolve to an existing file: {target}")]
    UnresolvedFile {
        path: PathBuf,
        key: String,
        target: PathBuf,
    },
    #[error("unpaired control file: {path} (every H0 needs a matching H1 and vice versa)")]
    UnpairedControlFile { path: PathBuf },
    #[error("{path}: filename says {filename_hyp} but fix_omega = {fix_omega}")]
    HypothesisMismatch {
        path: PathBuf,
        filename_hyp: Hypothesis,
        fix_omega: String,
    },
    #[error("pair {name}: the two outfile values must differ (both are `{outfile}`)")]
    DuplicateOutfile { name: String, outfile: String },
    #[error("not a directory: {0}")]
    NotADirectory(PathBuf),
    #[error("walk error: {0}")]
    Walk(#[from] walkdir::Error),
    #[error("io error reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl ControlFile {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|s| s.as_str())
    }

    /// H0 iff `fix_omega = 1`, H1 iff `fix_omega = 0`.
    pub fn hypothesis(&self) -> Result<Hypothesis, ScanError> {
        match self.get("fix_omega") {
            Some("1") => Ok(Hypothesis::H0),
            Some("0") => Ok(Hypothesis::H1),
            Some(other) => Err(ScanError::InvalidValue {
                path: self.path.clone(),
                key: "fix_omega".into(),
                value: other.to_string(),
            }),
            None => Err(ScanError::MissingKey {
                path: self.path.clone(),
                key: "fix_omega".into(),
            }),
        }
    }

    /// The fixed omega for H0 runs; defaults to 1 when absent.
    pub fn omega(&self) -> Result<f64, ScanError> {
        match self.get("omega") {
            None => Ok(1.0),
            Some(v) => v.parse::<f64>().map_err(|_| ScanError::InvalidValue {
                path: self.path.clone(),
                key: "omega".into(),
                value: v.to_string(),
            }),
        }
    }

    /// seqfile/treefile resolved relative to the control file's directory.
    pub fn resolved(&self, key: &str) -> Option<PathBuf> {
        let dir = self.path.parent().unwrap_or_else(|| Path::new("."));
        self.get(key).map(|v| dir.join(v))
    }
}

/// Parse a PAML-style control file: one `key = value` per line, `*` starts
/// a comment, blank lines ignored, later duplicate keys override earlier
/// ones. Required keys must be present, non-empty, and seqfile/treefile
/// must resolve to existing files.
pub fn parse_ctl(path: &Path) -> Result<ControlFile, ScanError> {
    let text = std::fs::read_to_string(path).map_err(|source| ScanError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut entries = IndexMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = match raw.find('*') {
            Some(pos) => &raw[..pos],
            None => raw,
        };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ScanError::MalformedLine {
                path: path.to_path_buf(),
                line: i + 1,
            });
        };
        entries.insert(key.trim().to_string(), value.trim().to_string());
    }
    let ctl = ControlFile {
        path: path.to_path_buf(),
        entries,
    };
    for key in REQUIRED_KEYS {
        match ctl.get(key) {
            None | Some("") => {
                return Err(ScanError::MissingKey {
                    path: path.to_path_buf(),
                    key: key.to_string(),
                })
            }
            _ => {}
        }
    }
    for key in ["seqfile", "treefile"] {
        let target = ctl.resolved(key).unwrap();
        if !target.is_file() {
            return Err(ScanError::UnresolvedFile {
                path: path.to_path_buf(),
                key: key.to_string(),
                target,
            });
        }
    }
    Ok(ctl)
}

/// Split `name.H0.ctl` into (stem, hypothesis).
fn split_ctl_name(file_name: &str) -> Option<(&str, Hypothesis)> {
    let stem = file_name
        .strip_suffix(".H0.ctl")
        .map(|s| (s, Hypothesis::H0))
        .or_else(|| file_name.strip_suffix(".H1.ctl").map(|s| (s, Hypothesis::H1)));
    match stem {
        Some((s, h)) if !s.is_empty() => Some((s, h)),
        _ => None,
    }
}

/// Recursively discover paired control files under `root`.
///
/// The walk follows symlinks (walkdir reports link cycles as errors),
/// visits entries in lexicographic order, and returns bundles sorted by
/// name. The result is a pure function of the directory contents.
pub fn scan(root: &Path) -> Result<Vec<InputBundle>, ScanError> {
    if !root.is_dir() {
        return Err(ScanError::NotADirectory(root.to_path_buf()));
    }
    // (relative dir, stem) -> per-hypothesis ctl path
    let mut pairs: BTreeMap<(PathBuf, String), [Option<PathBuf>; 2]> = BTreeMap::new();
    for entry in WalkDir::new(root)
        .follow_links(true)
        .sort_by_file_name()
    {
        let entry = entry?;
        if !entry.file_type().is_file() {
            continue;
        }
        let Some(name) = entry.file_name().to_str() else {
            continue;
        };
        let Some((stem, hyp)) = split_ctl_name(name) else {
            continue;
        };
        let rel_dir = entry
            .path()
            .parent()
            .unwrap()
            .strip_prefix(root)
            .unwrap_or_else(|_| Path::new(""))
            .to_path_buf();
        let slot = pairs.entry((rel_dir, stem.to_string())).or_default();
        slot[match hyp {
            Hypothesis::H0 => 0,
            Hypothesis::H1 => 1,
        }] = Some(entry.path().to_path_buf());
    }

    let mut bundles = Vec::with_capacity(pairs.len());
    for ((rel_dir, stem), [h0, h1]) in pairs {
        let (h0_ctl, h1_ctl) = match (h0, h1) {
            (Some(a), Some(b)) => (a, b),
            (Some(p), None) | (None, Some(p)) => {
                return Err(ScanError::UnpairedControlFile { path: p })
            }
            (None, None) => unreachable!(),
        };
        let name = if rel_dir.as_os_str().is_empty() {
            stem.clone()
        } else {
            format!("{}/{}", rel_dir.to_string_lossy().replace('\\', "/"), stem)
        };
        let bundle = build_bundle(name, h0_ctl, h1_ctl)?;
        bundles.push(bundle);
    }
    bundles.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(bundles)
}

fn build_bundle(name: String, h0_ctl: PathBuf, h1_ctl: PathBuf) -> Result<InputBundle, ScanError> {
    let c0 = parse_ctl(&h0_ctl)?;
    let c1 = parse_ctl(&h1_ctl)?;
    // Filename suffix must agree with fix_omega; silent mispairing would
    // corrupt the LRT downstream.
    for (ctl, expect) in [(&c0, Hypothesis::H0), (&c1, Hypothesis::H1)] {
        let actual = ctl.hypothesis()?;
        if actual != expect {
            return Err(ScanError::HypothesisMismatch {
                path: ctl.path.clone(),
                filename_hyp: expect,
                fix_omega: ctl.get("fix_omega").unwrap_or("").to_string(),
            });
        }
    }
    let out0 = c0.get("outfile").unwrap().to_string();
    let out1 = c1.get("outfile").unwrap().to_string();
    if out0 == out1 {
        return Err(ScanError::DuplicateOutfile { name, outfile: out0 });
    }
    let mut referenced = Vec::new();
    for ctl in [&c0, &c1] {
        for key in ["seqfile", "treefile"] {
            let p = ctl.resolved(key).unwrap();
            if !referenced.contains(&p) {
                referenced.push(p);
            }
        }
    }
    Ok(InputBundle {
        name,
        dir: h0_ctl.parent().unwrap().to_path_buf(),
        h0_ctl,
        h1_ctl,
        h0_outfile: out0,
        h1_outfile: out1,
        referenced_files: referenced,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn write(path: &Path, content: &str) {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(path, content).unwrap();
    }

    fn ctl_text(hyp: Hypothesis, stem: &str) -> String {
        let fix = match hyp {
            Hypothesis::H0 => 1,
            Hypothesis::H1 => 0,
        };
        format!(
            "seqfile = {stem}.fas\ntreefile = {stem}.nwk\noutfile = {stem}.{hyp}.out\nfix_omega = {fix}\nomega = 1\n"
        )
    }

    fn make_pair(dir: &Path, stem: &str) {
        write(&dir.join(format!("{stem}.fas")), ">A\nAAATAT\n>B\nAAATAC\n");
        write(&dir.join(format!("{stem}.nwk")), "(A,B);\n");
        write(
            &dir.join(format!("{stem}.H0.ctl")),
            &ctl_text(Hypothesis::H0, stem),
        );
        write(
            &dir.join(format!("{stem}.H1.ctl")),
            &ctl_text(Hypothesis::H1, stem),
        );
    }

    #[test]
    fn parse_ctl_basic() {
        let tmp = tempfile::tempdir().unwrap();
        write(tmp.path().join("a.fas").as_path(), ">A\nAAA\n");
        write(tmp.path().join("a.nwk").as_path(), "(A);\n");
        let p = tmp.path().join("a.H0.ctl");
        write(
            &p,
            "seqfile = a.fas\ntreefile = a.nwk\noutfile = a.H0.out\nfix_omega = 1\nomega = 1\n",
        );
        let ctl = parse_ctl(&p).unwrap();
        assert_eq!(ctl.entries.len(), 5);
        assert_eq!(ctl.hypothesis().unwrap(), Hypothesis::H0);
        assert_eq!(ctl.omega().unwrap(), 1.0);
    }

    #[test]
    fn parse_ctl_missing_treefile() {
        let tmp = tempfile::tempdir().unwrap();
        write(tmp.path().join("a.fas").as_path(), ">A\nAAA\n");
        let p = tmp.path().join("a.H0.ctl");
        write(&p, "* comment\nseqfile = a.fas\noutfile = x\nfix_omega = 1\n");
        match parse_ctl(&p) {
            Err(ScanError::MissingKey { key, .. }) => assert_eq!(key, "treefile"),
            other => panic!("expected MissingKey, got {other:?}"),
        }
    }

    #[test]
    fn parse_ctl_malformed_line() {
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("a.H0.ctl");
        write(&p, "seqfile a.fas\n");
        match parse_ctl(&p) {
            Err(ScanError::MalformedLine { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected MalformedLine, got {other:?}"),
        }
    }

    #[test]
    fn parse_ctl_later_duplicates_override_and_crlf_ok() {
        let tmp = tempfile::tempdir().unwrap();
        write(tmp.path().join("a.fas").as_path(), ">A\nAAA\n");
        write(tmp.path().join("a.nwk").as_path(), "(A);\n");
        let p = tmp.path().join("a.H1.ctl");
        write(
            &p,
            "seqfile = a.fas\r\ntreefile = a.nwk\r\noutfile = one\r\noutfile = two * trailing comment\r\nfix_omega = 0\r\n",
        );
        let ctl = parse_ctl(&p).unwrap();
        assert_eq!(ctl.get("outfile"), Some("two"));
    }

    #[test]
    fn scan_pairs_two_stems_per_directory() {
        let tmp = tempfile::tempdir().unwrap();
        let fam = tmp.path().join("fam1");
        make_pair(&fam, "ENSGT1");
        make_pair(&fam, "ENSGT2");
        let bundles = scan(tmp.path()).unwrap();
        assert_eq!(bundles.len(), 2);
        assert_eq!(bundles[0].name, "fam1/ENSGT1");
        assert_eq!(bundles[1].name, "fam1/ENSGT2");
        for b in &bundles {
            for f in &b.referenced_files {
                assert!(f.exists());
            }
        }
    }

    #[test]
    fn scan_empty_directory() {
        let tmp = tempfile::tempdir().unwrap();
        assert!(scan(tmp.path()).unwrap().is_empty());
    }

    #[test]
    fn scan_unpaired_is_hard_error() {
        let tmp = tempfile::tempdir().unwrap();
        write(tmp.path().join("x.fas").as_path(), ">A\nAAA\n");
        write(tmp.path().join("x.nwk").as_path(), "(A);\n");
        write(
            tmp.path().join("x.H0.ctl").as_path(),
            &ctl_text(Hypothesis::H0, "x"),
        );
        assert!(matches!(
            scan(tmp.path()),
            Err(ScanError::UnpairedControlFile { .. })
        ));
    }

    #[test]
    fn scan_rejects_hypothesis_mismatch() {
        let tmp = tempfile::tempdir().unwrap();
        write(tmp.path().join("x.fas").as_path(), ">A\nAAA\n");
        write(tmp.path().join("x.nwk").as_path(), "(A);\n");
        // H0 filename but fix_omega = 0.
        write(
            tmp.path().join("x.H0.ctl").as_path(),
            "seqfile = x.fas\ntreefile = x.nwk\noutfile = a\nfix_omega = 0\n",
        );
        write(
            tmp.path().join("x.H1.ctl").as_path(),
            &ctl_text(Hypothesis::H1, "x"),
        );
        assert!(matches!(
            scan(tmp.path()),
            Err(ScanError::HypothesisMismatch { .. })
        ));
    }

    #[test]
    fn scan_is_deterministic() {
        let tmp = tempfile::tempdir().unwrap();
        for fam in ["b", "a", "c"] {
            make_pair(&tmp.path().join(fam), "g");
        }
        let first = scan(tmp.path()).unwrap();
        let second = scan(tmp.path()).unwrap();
        assert_eq!(first, second);
        let names: Vec<_> = first.iter().map(|b| b.name.as_str()).collect();
        assert_eq!(names, ["a/g", "b/g", "c/g"]);
    }
}
