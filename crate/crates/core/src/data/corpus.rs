use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::text::{keywords_to_sequence, normalize_text};
use crate::error::{Error, Result};

/// One line of a corpus file: image (or M3TF feature) path, raw keyword
/// string with comma separators, raw description.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusRecord {
    pub image: PathBuf,
    pub keywords: String,
    pub description: String,
}

/// Reads a tab-separated corpus. Relative image paths are resolved against
/// the corpus file's directory; blank lines are ignored.
pub fn read_corpus(path: &Path) -> Result<Vec<CorpusRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [image, keywords, description] = fields[..] else {
            return Err(Error::Data(format!(
                "{}:{}: expected 3 tab-separated fields, found {}",
                path.display(),
                n + 1,
                fields.len()
            )));
        };
        out.push(CorpusRecord {
            image: base.join(image),
            keywords: keywords.to_owned(),
            description: description.to_owned(),
        });
    }
    if out.is_empty() {
        return Err(Error::Data(format!("{}: corpus is empty", path.display())));
    }
    Ok(out)
}

/// Writes records as TSV, storing image paths relative to `path`'s
/// directory when possible.
pub fn write_corpus(path: &Path, records: &[CorpusRecord]) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new(""));
    let mut text = String::new();
    for r in records {
        let image = r.image.strip_prefix(base).unwrap_or(&r.image);
        for field in [&r.keywords, &r.description] {
            if field.contains(['\t', '\n']) {
                return Err(Error::Data(format!(
                    "field {field:?} contains a tab or newline"
                )));
            }
        }
        writeln!(
            text,
            "{}\t{}\t{}",
            image.display(),
            r.keywords,
            r.description
        )
        .unwrap();
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthLimits {
    pub min_description: usize,
    pub max_description: usize,
    pub max_keywords: usize,
}

/// A record after tokenization and length enforcement.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PreparedRecord {
    pub image: PathBuf,
    pub keywords: Vec<String>,
    pub description: Vec<String>,
}

/// Records dropped or clipped during preparation.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SkipReport {
    pub dropped: Vec<(usize, String)>,
    pub clipped_descriptions: usize,
    pub clipped_keywords: usize,
}

impl SkipReport {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "dropped\t{}\nclipped_descriptions\t{}\nclipped_keywords\t{}\n",
            self.dropped.len(),
            self.clipped_descriptions,
            self.clipped_keywords
        );
        for (i, why) in &self.dropped {
            writeln!(s, "record {i}\t{why}").unwrap();
        }
        s
    }
}

/// Tokenizes every record; descriptions longer than the maximum are clipped,
/// shorter than the minimum dropped, and records without any keyword
/// dropped.
pub fn prepare_records(
    records: &[CorpusRecord],
    limits: LengthLimits,
) -> (Vec<PreparedRecord>, SkipReport) {
    let mut report = SkipReport::default();
    let mut out = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let mut description = normalize_text(&r.description);
        let mut keywords = keywords_to_sequence(&r.keywords);
        if description.len() < limits.min_description {
            report
                .dropped
                .push((i, format!("description has {} tokens", description.len())));
            continue;
        }
        if keywords.is_empty() {
            report.dropped.push((i, "no keywords".into()));
            continue;
        }
        if description.len() > limits.max_description {
            description.truncate(limits.max_description);
            report.clipped_descriptions += 1;
        }
        if keywords.len() > limits.max_keywords {
            keywords.truncate(limits.max_keywords);
            report.clipped_keywords += 1;
        }
        out.push(PreparedRecord {
            image: r.image.clone(),
            keywords,
            description,
        });
    }
    (out, report)
}

#[cfg(test)]
mod tests {
    use super::*;

    const LIMITS: LengthLimits = LengthLimits {
        min_description: 2,
        max_description: 4,
        max_keywords: 3,
    };

    #[test]
    fn round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.tsv");
        let records = vec![
            CorpusRecord {
                image: dir.path().join("images/a.ppm"),
                keywords: "drusen, left eye".into(),
                description: "Some text.".into(),
            },
            CorpusRecord {
                image: dir.path().join("b.m3tf"),
                keywords: "x".into(),
                description: "y z".into(),
            },
        ];
        write_corpus(&path, &records).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("images/a.ppm\tdrusen, left eye\tSome text.\n"));
        assert_eq!(read_corpus(&path).unwrap(), records);
    }

    #[test]
    fn malformed_lines_name_their_position() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.tsv");
        fs::write(&path, "a\tb\tc\n\nonly\ttwo\n").unwrap();
        let err = read_corpus(&path).unwrap_err().to_string();
        assert!(err.contains(":3:"), "{err}");
    }

    #[test]
    fn lengths_are_enforced() {
        let rec = |k: &str, d: &str| CorpusRecord {
            image: "i".into(),
            keywords: k.into(),
            description: d.into(),
        };
        let records = [
            rec("a", "one"),
            rec("a, b, c", "one two three four five"),
            rec(",", "one two"),
            rec("a", "one two"),
        ];
        let (out, report) = prepare_records(&records, LIMITS);
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].description, ["one", "two", "three", "four"]);
        assert_eq!(out[0].keywords, ["a", "[SEP]", "b"]);
        assert_eq!(
            report.dropped.iter().map(|d| d.0).collect::<Vec<_>>(),
            [0, 2]
        );
        assert_eq!(
            (report.clipped_descriptions, report.clipped_keywords),
            (1, 1)
        );
        assert!(report.to_text().starts_with("dropped\t2\n"));
    }
}
