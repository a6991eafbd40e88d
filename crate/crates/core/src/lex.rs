//! Lexical translation table: per source word, the top context-free target
//! translations with probabilities, used to shortlist the output softmax and
//! for unk replacement.

use crate::error::{Error, Result};
use std::collections::HashMap;
use std::path::Path;

/// Default number of translations kept per source word.
pub const DEFAULT_TOP_N: usize = 20;

#[derive(Debug, Clone, Default)]
pub struct LexTable {
    /// source word id -> (target word id, probability), sorted by descending
    /// probability with ties broken by ascending target id, length <= top_n.
    entries: HashMap<u32, Vec<(u32, f32)>>,
    /// Lines whose source or target word was not in the vocabulary.
    skipped: usize,
}

impl LexTable {
    /// An empty table; the decoder then scores the full vocabulary.
    pub fn empty() -> Self {
        LexTable::default()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn skipped(&self) -> usize {
        self.skipped
    }

    pub fn translations(&self, src_id: u32) -> Option<&[(u32, f32)]> {
        self.entries.get(&src_id).map(|v| v.as_slice())
    }

    /// Highest-probability translation of a source word, if any.
    pub fn top_translation(&self, src_id: u32) -> Option<u32> {
        self.entries.get(&src_id).and_then(|v| v.first()).map(|&(id, _)| id)
    }

    /// Builds a table directly from id triples (used by tests and generators).
    pub fn from_entries(entries: impl IntoIterator<Item = (u32, u32, f32)>, top_n: usize) -> Self {
        let mut map: HashMap<u32, Vec<(u32, f32)>> = HashMap::new();
        for (src, trg, p) in entries {
            map.entry(src).or_default().push((trg, p));
        }
        finalize(&mut map, top_n);
        LexTable { entries: map, skipped: 0 }
    }
}

fn finalize(map: &mut HashMap<u32, Vec<(u32, f32)>>, top_n: usize) {
    for list in map.values_mut() {
        list.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.0.cmp(&b.0))
        });
        list.truncate(top_n);
    }
}

/// Loads a TSV file of `source-word TAB target-word TAB probability` lines.
/// Words are resolved against the given vocabularies; lines naming unknown
/// words are skipped and counted. Each per-source list is sorted by
/// descending probability (ties: ascending target id) and truncated to
/// `top_n`.
pub fn load_lex_table(
    path: impl AsRef<Path>,
    top_n: usize,
    vocab_src: &[String],
    vocab_trg: &[String],
) -> Result<LexTable> {
    let text = std::fs::read_to_string(path)?;
    let src_index: HashMap<&str, u32> = vocab_src
        .iter()
        .enumerate()
        .map(|(i, t)| (t.as_str(), i as u32))
        .collect();
    let trg_index: HashMap<&str, u32> = vocab_trg
        .iter()
        .enumerate()
        .map(|(i, t)| (t.as_str(), i as u32))
        .collect();

    let mut map: HashMap<u32, Vec<(u32, f32)>> = HashMap::new();
    let mut skipped = 0usize;
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let (src, trg, prob) = match (parts.next(), parts.next(), parts.next(), parts.next()) {
            (Some(s), Some(t), Some(p), None) => (s, t, p),
            _ => {
                return Err(Error::Parse {
                    line: lineno + 1,
                    msg: "expected 'source<TAB>target<TAB>probability'".to_string(),
                })
            }
        };
        let p: f32 = prob.trim().parse().map_err(|_| Error::Parse {
            line: lineno + 1,
            msg: format!("bad probability '{prob}'"),
        })?;
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::Parse {
                line: lineno + 1,
                msg: format!("probability {p} outside (0, 1]"),
            });
        }
        match (src_index.get(src), trg_index.get(trg)) {
            (Some(&s), Some(&t)) => map.entry(s).or_default().push((t, p)),
            _ => skipped += 1,
        }
    }
    finalize(&mut map, top_n);
    Ok(LexTable { entries: map, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocabs() -> (Vec<String>, Vec<String>) {
        let mk = |prefix: &str, n: usize| -> Vec<String> {
            let mut v = vec!["<s>".into(), "</s>".into(), "<unk>".into()];
            v.extend((3..n).map(|i| format!("{prefix}{i}")));
            v
        };
        (mk("s", 40), mk("t", 40))
    }

    fn write_tsv(lines: &[String]) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("lex.tsv");
        std::fs::write(&p, lines.join("\n")).unwrap();
        (dir, p)
    }

    #[test]
    fn truncates_to_top_n_sorted() {
        let (src, trg) = vocabs();
        let lines: Vec<String> = (3..28)
            .map(|t| format!("s5\tt{t}\t{}", (t as f32) / 30.0))
            .collect();
        let (_d, p) = write_tsv(&lines);
        let table = load_lex_table(&p, 20, &src, &trg).unwrap();
        let list = table.translations(5).unwrap();
        assert_eq!(list.len(), 20);
        // Highest probability first = highest t id first here.
        assert_eq!(list[0].0, 27);
        assert!(list.windows(2).all(|w| w[0].1 >= w[1].1));
    }

    #[test]
    fn equal_probabilities_tie_break_by_target_id() {
        let table = LexTable::from_entries([(4, 7, 0.5), (4, 3, 0.5)], 20);
        let list = table.translations(4).unwrap();
        assert_eq!(list.iter().map(|e| e.0).collect::<Vec<_>>(), vec![3, 7]);
    }

    #[test]
    fn empty_file_is_empty_table() {
        let (src, trg) = vocabs();
        let (_d, p) = write_tsv(&[]);
        let table = load_lex_table(&p, 20, &src, &trg).unwrap();
        assert!(table.is_empty());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let (src, trg) = vocabs();
        let (_d, p) = write_tsv(&["s3\tt3\t0.5".to_string(), "garbage line".to_string()]);
        match load_lex_table(&p, 20, &src, &trg) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn out_of_range_probability_rejected() {
        let (src, trg) = vocabs();
        let (_d, p) = write_tsv(&["s3\tt3\t1.5".to_string()]);
        assert!(load_lex_table(&p, 20, &src, &trg).is_err());
        let (_d, p) = write_tsv(&["s3\tt3\t0".to_string()]);
        assert!(load_lex_table(&p, 20, &src, &trg).is_err());
    }

    #[test]
    fn unknown_words_skipped_and_counted() {
        let (src, trg) = vocabs();
        let lines = vec![
            "s3\tt3\t0.9".to_string(),
            "nosuch\tt4\t0.5".to_string(),
            "s4\tmissing\t0.5".to_string(),
        ];
        let (_d, p) = write_tsv(&lines);
        let table = load_lex_table(&p, 20, &src, &trg).unwrap();
        assert_eq!(table.skipped(), 2);
        assert_eq!(table.len(), 1);
        assert_eq!(table.top_translation(3), Some(3));
    }
}
