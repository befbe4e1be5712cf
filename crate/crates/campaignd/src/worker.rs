//! The executable task: parse alignment + tree + control file, compute a
//! deterministic surrogate likelihood for the given hypothesis, and emit a
//! tag-terminated output file. Also houses the campaign-level LRT.
//!
//! The surrogate replaces the real codon-model numerics with a cheap,
//! exactly reproducible formula that preserves the H0-nested-in-H1
//! property the likelihood-ratio test depends on:
//!
//! ```text
//! lnL(omega) = - sum over columns [ d(col) + |d(col) - omega| ]
//! ```
//!
//! where `d(col)` is the number of distinct non-gap codons in the column.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Hypothesis;
use crate::scanner::ControlFile;

/// Fixed omega grid for H1 optimization; ties break to the smallest value
/// so results are identical across sites.
pub const OMEGA_GRID: [f64; 5] = [0.0, 0.5, 1.0, 2.0, 5.0];

/// Terminal tag marking a complete output file.
pub const TERMINAL_TAG: &str = "Time used:";

/// Aligned codon sequences, all taxa the same length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodonAlignment {
    pub taxa: Vec<(String, Vec<String>)>,
}

pub const GAP_CODON: &str = "---";

#[derive(Debug, Error)]
pub enum WorkerError {
    #[error("alignment is empty")]
    EmptyAlignment,
    #[error("malformed FASTA: {0}")]
    MalformedFasta(String),
    #[error("sequence for `{0}` is not divisible by 3")]
    NotDivisibleBy3(String),
    #[error("sequences `{0}` and `{1}` have unequal lengths")]
    UnequalLengths(String, String),
    #[error("illegal character in `{label}` at position {pos}")]
    IllegalCharacter { label: String, pos: usize },
    #[error("mixed gap/base codon in `{label}` at codon {codon}")]
    MixedGapCodon { label: String, codon: usize },
    #[error("unbalanced parentheses in newick tree")]
    UnbalancedParens,
    #[error("malformed newick tree: {0}")]
    MalformedNewick(String),
    #[error("duplicate leaf label `{0}`")]
    DuplicateLeafLabel(String),
    #[error("more than one #1 foreground mark")]
    MultipleForegroundMarks,
    #[error("tree/alignment label mismatch: tree {tree:?} vs alignment {alignment:?}")]
    LabelMismatch {
        tree: Vec<String>,
        alignment: Vec<String>,
    },
    #[error("column index {0} out of range")]
    IndexOutOfRange(usize),
    #[error("lnL1 < lnL0 ({lnl1} < {lnl0}): negative LRT signals corruption")]
    NegativeLrt { lnl0: f64, lnl1: f64 },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Ctl(#[from] crate::scanner::ScanError),
    #[error("artificial failure injected via environment")]
    InjectedFailure,
}

fn io_err(path: &Path, source: std::io::Error) -> WorkerError {
    WorkerError::Io {
        path: path.to_path_buf(),
        source,
    }
}

impl CodonAlignment {
    /// Number of codon columns.
    pub fn len(&self) -> usize {
        self.taxa.first().map_or(0, |(_, c)| c.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Parse a FASTA file into a codon alignment: `>label` lines followed by
/// sequence lines; sequences are uppercased and split into triplets.
pub fn parse_alignment(path: &Path) -> Result<CodonAlignment, WorkerError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_alignment_str(&text)
}

pub fn parse_alignment_str(text: &str) -> Result<CodonAlignment, WorkerError> {
    let mut raw: Vec<(String, String)> = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(label) = line.strip_prefix('>') {
            raw.push((label.trim().to_string(), String::new()));
        } else {
            let Some(last) = raw.last_mut() else {
                return Err(WorkerError::MalformedFasta(
                    "sequence data before first header".into(),
                ));
            };
            last.1.push_str(&line.to_uppercase());
        }
    }
    if raw.is_empty() {
        return Err(WorkerError::EmptyAlignment);
    }
    let mut taxa = Vec::with_capacity(raw.len());
    for (label, seq) in &raw {
        for (pos, ch) in seq.chars().enumerate() {
            if !matches!(ch, 'A' | 'C' | 'G' | 'T' | '-') {
                return Err(WorkerError::IllegalCharacter {
                    label: label.clone(),
                    pos,
                });
            }
        }
        if seq.len() % 3 != 0 {
            return Err(WorkerError::NotDivisibleBy3(label.clone()));
        }
        let codons: Vec<String> = seq
            .as_bytes()
            .chunks(3)
            .map(|c| String::from_utf8(c.to_vec()).unwrap())
            .collect();
        for (i, codon) in codons.iter().enumerate() {
            let gaps = codon.bytes().filter(|&b| b == b'-').count();
            if gaps != 0 && gaps != 3 {
                return Err(WorkerError::MixedGapCodon {
                    label: label.clone(),
                    codon: i,
                });
            }
        }
        taxa.push((label.clone(), codons));
    }
    let first_len = taxa[0].1.len();
    if first_len == 0 {
        return Err(WorkerError::EmptyAlignment);
    }
    for (label, codons) in &taxa[1..] {
        if codons.len() != first_len {
            return Err(WorkerError::UnequalLengths(
                taxa[0].0.clone(),
                label.clone(),
            ));
        }
    }
    Ok(CodonAlignment { taxa })
}

/// A parsed Newick tree: leaf set plus the optional `#1` foreground mark.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhyloTree {
    pub newick: String,
    pub leaf_labels: Vec<String>,
    /// Canonical descriptor of the marked branch: the sorted leaf set of
    /// the clade below it, e.g. `{A,B}`.
    pub foreground_branch: Option<String>,
}

pub fn parse_newick(path: &Path) -> Result<PhyloTree, WorkerError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_newick_str(&text)
}

pub fn parse_newick_str(text: &str) -> Result<PhyloTree, WorkerError> {
    let s = text.trim();
    let body = s.strip_suffix(';').unwrap_or(s).trim();
    let mut parser = NewickParser {
        chars: body.chars().collect(),
        pos: 0,
        leaves: Vec::new(),
        foreground: None,
    };
    let _clade = parser.parse_subtree()?;
    parser.skip_ws();
    if parser.pos != parser.chars.len() {
        // Leftover input after a complete subtree means paren imbalance
        // like "((A,B,C);".
        return Err(WorkerError::UnbalancedParens);
    }
    let mut seen = std::collections::BTreeSet::new();
    for l in &parser.leaves {
        if !seen.insert(l.clone()) {
            return Err(WorkerError::DuplicateLeafLabel(l.clone()));
        }
    }
    Ok(PhyloTree {
        newick: s.to_string(),
        leaf_labels: parser.leaves,
        foreground_branch: parser.foreground,
    })
}

struct NewickParser {
    chars: Vec<char>,
    pos: usize,
    leaves: Vec<String>,
    foreground: Option<String>,
}

impl NewickParser {
    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    fn skip_ws(&mut self) {
        while matches!(self.peek(), Some(c) if c.is_whitespace()) {
            self.pos += 1;
        }
    }

    /// Returns the sorted leaf set of the parsed clade.
    fn parse_subtree(&mut self) -> Result<Vec<String>, WorkerError> {
        self.skip_ws();
        let clade = if self.peek() == Some('(') {
            self.pos += 1;
            let mut clade = self.parse_subtree()?;
            loop {
                self.skip_ws();
                match self.peek() {
                    Some(',') => {
                        self.pos += 1;
                        clade.extend(self.parse_subtree()?);
                    }
                    Some(')') => {
                        self.pos += 1;
                        break;
                    }
                    _ => return Err(WorkerError::UnbalancedParens),
                }
            }
            // Optional internal node label.
            self.read_label();
            clade
        } else {
            let label = self.read_label();
            if label.is_empty() {
                return Err(WorkerError::MalformedNewick(format!(
                    "expected leaf label at offset {}",
                    self.pos
                )));
            }
            self.leaves.push(label.clone());
            vec![label]
        };
        self.parse_suffix(&clade)?;
        Ok(clade)
    }

    /// Branch length and/or `#1` mark following a node.
    fn parse_suffix(&mut self, clade: &[String]) -> Result<(), WorkerError> {
        loop {
            self.skip_ws();
            match self.peek() {
                Some(':') => {
                    self.pos += 1;
                    self.skip_ws();
                    while matches!(self.peek(), Some(c) if c.is_ascii_digit() || c == '.' || c == '-' || c == 'e' || c == 'E' || c == '+')
                    {
                        self.pos += 1;
                    }
                }
                Some('#') => {
                    self.pos += 1;
                    if self.peek() != Some('1') {
                        return Err(WorkerError::MalformedNewick(
                            "only the #1 mark is supported".into(),
                        ));
                    }
                    self.pos += 1;
                    if self.foreground.is_some() {
                        return Err(WorkerError::MultipleForegroundMarks);
                    }
                    let mut sorted: Vec<&str> = clade.iter().map(|s| s.as_str()).collect();
                    sorted.sort_unstable();
                    self.foreground = Some(format!("{{{}}}", sorted.join(",")));
                }
                _ => return Ok(()),
            }
        }
    }

    fn read_label(&mut self) -> String {
        self.skip_ws();
        let start = self.pos;
        while matches!(self.peek(), Some(c) if !matches!(c, '(' | ')' | ',' | ':' | ';' | '#') && !c.is_whitespace())
        {
            self.pos += 1;
        }
        self.chars[start..self.pos].iter().collect()
    }
}

/// Number of distinct non-gap codons at a column; all-gap columns are 0.
pub fn column_distinct(alignment: &CodonAlignment, col: usize) -> Result<u32, WorkerError> {
    if col >= alignment.len() {
        return Err(WorkerError::IndexOutOfRange(col));
    }
    let mut distinct = std::collections::BTreeSet::new();
    for (_, codons) in &alignment.taxa {
        let codon = &codons[col];
        if codon != GAP_CODON {
            distinct.insert(codon.as_str());
        }
    }
    Ok(distinct.len() as u32)
}

/// The surrogate log-likelihood; strictly column-ordered so results are
/// bit-reproducible. All terms are multiples of 0.5, so f64 sums are exact.
pub fn stub_lnl(alignment: &CodonAlignment, omega: f64) -> Result<f64, WorkerError> {
    let mut total = 0.0;
    for col in 0..alignment.len() {
        let d = column_distinct(alignment, col)? as f64;
        total += d + (d - omega).abs();
    }
    Ok(-total)
}

/// Per-hypothesis result of one worker run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodResult {
    pub hypothesis: Hypothesis,
    pub lnl: f64,
    pub omega_hat: f64,
}

/// Evaluate the hypothesis named by `ctl` and write its tag-terminated
/// output file into `workdir`. On error the outfile is left without the
/// terminal tag so downstream validation fails.
pub fn run_task(ctl: &ControlFile, workdir: &Path) -> Result<LikelihoodResult, WorkerError> {
    let missing = |key: &str| {
        WorkerError::Ctl(crate::scanner::ScanError::MissingKey {
            path: ctl.path.clone(),
            key: key.to_string(),
        })
    };
    let alignment = parse_alignment(&ctl.resolved("seqfile").ok_or_else(|| missing("seqfile"))?)?;
    let tree = parse_newick(&ctl.resolved("treefile").ok_or_else(|| missing("treefile"))?)?;

    let mut tree_labels = tree.leaf_labels.clone();
    tree_labels.sort_unstable();
    let mut aln_labels: Vec<String> = alignment.taxa.iter().map(|(l, _)| l.clone()).collect();
    aln_labels.sort_unstable();
    if tree_labels != aln_labels {
        return Err(WorkerError::LabelMismatch {
            tree: tree_labels,
            alignment: aln_labels,
        });
    }

    let hypothesis = ctl.hypothesis()?;
    let result = match hypothesis {
        Hypothesis::H0 => {
            let omega = ctl.omega()?;
            LikelihoodResult {
                hypothesis,
                lnl: stub_lnl(&alignment, omega)?,
                omega_hat: omega,
            }
        }
        Hypothesis::H1 => {
            // Grid maximization; ties break to the smallest omega because
            // the grid is iterated in ascending order with a strict ">".
            let mut best: Option<(f64, f64)> = None;
            for &omega in &OMEGA_GRID {
                let lnl = stub_lnl(&alignment, omega)?;
                if best.map_or(true, |(b, _)| lnl > b) {
                    best = Some((lnl, omega));
                }
            }
            let (lnl, omega_hat) = best.unwrap();
            LikelihoodResult {
                hypothesis,
                lnl,
                omega_hat,
            }
        }
    };

    let outfile = workdir.join(ctl.get("outfile").unwrap_or("out"));
    let mut body = String::new();
    writeln!(body, "model = {hypothesis}").unwrap();
    writeln!(body, "lnL = {:.6}", result.lnl).unwrap();
    writeln!(body, "omega = {:.6}", result.omega_hat).unwrap();
    // Fixed value: output files must be byte-identical across runs.
    writeln!(body, "{TERMINAL_TAG} 0:00:00").unwrap();
    std::fs::write(&outfile, body).map_err(|e| io_err(&outfile, e))?;
    Ok(result)
}

/// Aggregated likelihood-ratio test for one bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrtRecord {
    pub bundle_name: String,
    pub lnl0: f64,
    pub lnl1: f64,
    pub lrt: f64,
    pub significant: bool,
}

/// `lrt = 2 (lnL1 - lnL0)`, significant iff above `threshold`.
pub fn lrt(lnl0: f64, lnl1: f64, threshold: f64) -> Result<(f64, bool), WorkerError> {
    if lnl1 < lnl0 {
        return Err(WorkerError::NegativeLrt { lnl0, lnl1 });
    }
    let stat = 2.0 * (lnl1 - lnl0);
    Ok((stat, stat > threshold))
}
