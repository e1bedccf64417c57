use std::fs;
use std::path::Path;

use super::{CorpusError, InteractionRecord, RawRecord, Result, Scenario, Vocabulary};

/// Parses one `scenario<TAB>user<TAB>item<TAB>day<TAB>terms` line.
/// Errors carry only the message; callers attach the location.
pub fn parse_raw_line(line: &str) -> std::result::Result<RawRecord, String> {
    let cols: Vec<&str> = line.split('\t').collect();
    if cols.len() != 5 {
        return Err(format!("expected 5 tab-separated columns, found {}", cols.len()));
    }
    let scenario = match cols[0] {
        "S" => Scenario::Search,
        "R" => Scenario::Rec,
        other => return Err(format!("unknown scenario `{other}`")),
    };
    let int = |name: &str, s: &str| -> std::result::Result<u64, String> {
        s.parse::<u64>()
            .map_err(|_| format!("{name} `{s}` is not a non-negative integer"))
    };
    let user = int("user_id", cols[1])? as usize;
    let item = int("item_id", cols[2])? as usize;
    let day = u32::try_from(int("day", cols[3])?).map_err(|_| "day out of range".to_string())?;
    let terms: Vec<String> = cols[4].split(' ').filter(|t| !t.is_empty()).map(str::to_string).collect();
    Ok(RawRecord {
        scenario,
        user,
        item,
        day,
        terms,
    })
}

pub fn format_raw_line(r: &RawRecord) -> String {
    format!(
        "{}\t{}\t{}\t{}\t{}",
        r.scenario.tag(),
        r.user,
        r.item,
        r.day,
        r.terms.join(" ")
    )
}

/// Reads every non-empty line of an interaction TSV, checking the
/// query/scenario invariant.
pub fn read_raw_records(path: &Path) -> Result<Vec<RawRecord>> {
    let text = fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let line_no = n + 1;
        let rec = parse_raw_line(line).map_err(|msg| CorpusError::Parse {
            path: path.to_path_buf(),
            line: line_no,
            msg,
        })?;
        match (rec.scenario, rec.terms.is_empty()) {
            (Scenario::Search, true) => {
                return Err(CorpusError::SearchWithoutQuery {
                    path: path.to_path_buf(),
                    line: line_no,
                })
            }
            (Scenario::Rec, false) => {
                return Err(CorpusError::RecWithQuery {
                    path: path.to_path_buf(),
                    line: line_no,
                })
            }
            _ => {}
        }
        out.push(rec);
    }
    Ok(out)
}

/// Reads a TSV and maps query terms through `vocab` (UNK for unseen terms).
pub fn parse_interactions(path: &Path, vocab: &Vocabulary) -> Result<Vec<InteractionRecord>> {
    Ok(read_raw_records(path)?
        .iter()
        .map(|r| r.to_record(vocab))
        .collect())
}

pub fn write_raw_records(path: &Path, records: &[RawRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&format_raw_line(r));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| CorpusError::io(path, e))
}

/// Writes id-mapped records back as terms.
pub fn write_records(path: &Path, records: &[InteractionRecord], vocab: &Vocabulary) -> Result<()> {
    let raw: Vec<RawRecord> = records
        .iter()
        .map(|r| RawRecord {
            scenario: r.scenario,
            user: r.user,
            item: r.item,
            day: r.day,
            terms: r
                .terms
                .iter()
                .map(|&t| vocab.term(t).unwrap_or("<unk>").to_string())
                .collect(),
        })
        .collect();
    write_raw_records(path, &raw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn search_line() {
        let vocab = Vocabulary::from_terms(["noodle", "spicy"]);
        let r = parse_raw_line("S\t4\t7\t3\tnoodle spicy").unwrap().to_record(&vocab);
        assert_eq!(
            r,
            InteractionRecord {
                scenario: Scenario::Search,
                user: 4,
                item: 7,
                day: 3,
                terms: vec![2, 3]
            }
        );
    }

    #[test]
    fn rec_line() {
        let r = parse_raw_line("R\t4\t9\t5\t").unwrap();
        assert_eq!(r.scenario, Scenario::Rec);
        assert_eq!((r.user, r.item, r.day), (4, 9, 5));
        assert!(r.terms.is_empty());
    }

    #[test]
    fn search_without_query_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.tsv");
        fs::write(&path, "R\t1\t1\t0\t\nS\t4\t7\t3\t\n").unwrap();
        let err = read_raw_records(&path).unwrap_err();
        assert!(err.to_string().ends_with(":2: Search record without query"), "{err}");
    }

    #[test]
    fn malformed_lines_name_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.tsv");
        fs::write(&path, "R\t1\t1\t0\t\n\nS\tx\t7\t3\tq\n").unwrap();
        let err = read_raw_records(&path).unwrap_err();
        assert!(matches!(err, CorpusError::Parse { line: 3, .. }), "{err}");
        fs::write(&path, "R\t1\t1\n").unwrap();
        assert!(matches!(read_raw_records(&path).unwrap_err(), CorpusError::Parse { line: 1, .. }));
    }

    #[test]
    fn unknown_terms_map_to_unk() {
        let vocab = Vocabulary::from_terms(["noodle"]);
        let r = parse_raw_line("S\t0\t0\t0\tnoodle zzz").unwrap().to_record(&vocab);
        assert_eq!(r.terms, vec![2, 1]);
    }

    fn arb_record() -> impl Strategy<Value = RawRecord> {
        (
            any::<bool>(),
            0usize..100_000,
            0usize..100_000,
            0u32..1000,
            prop::collection::vec("[a-z0-9]{1,8}", 1..5),
        )
            .prop_map(|(search, user, item, day, terms)| RawRecord {
                scenario: if search { Scenario::Search } else { Scenario::Rec },
                user,
                item,
                day,
                terms: if search { terms } else { Vec::new() },
            })
    }

    proptest! {
        #[test]
        fn serialize_parse_round_trip(records in prop::collection::vec(arb_record(), 0..40)) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("r.tsv");
            write_raw_records(&path, &records).unwrap();
            let bytes = fs::read(&path).unwrap();
            let parsed = read_raw_records(&path).unwrap();
            prop_assert_eq!(&parsed, &records);
            write_raw_records(&path, &parsed).unwrap();
            prop_assert_eq!(fs::read(&path).unwrap(), bytes);
        }
    }
}
