//! Case metadata CSV: one row per (case, view, lesion).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::birads::DescriptorVocabulary;
use crate::error::{Error, Result};

pub const METADATA_HEADER: [&str; 6] = ["case_id", "view", "image_path", "lesion_id", "descriptors", "pathology"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CaseRecord {
    pub case_id: String,
    pub cc_image: PathBuf,
    pub mlo_image: PathBuf,
    /// Descriptor tokens per lesion, ordered by lesion id.
    pub lesions: Vec<Vec<String>>,
    /// 1 = malignant, 0 = benign.
    pub label: u8,
}

pub fn parse_pathology(s: &str) -> Option<u8> {
    match s.trim() {
        "MALIGNANT" => Some(1),
        "BENIGN" | "BENIGN_WITHOUT_CALLBACK" => Some(0),
        _ => None,
    }
}

/// Sort key placing numeric lesion ids in numeric order.
fn lesion_key(id: &str) -> (u8, u64, String) {
    match id.parse::<u64>() {
        Ok(n) => (0, n, String::new()),
        Err(_) => (1, 0, id.to_string()),
    }
}

#[derive(Default)]
struct Pending {
    cc: Option<PathBuf>,
    mlo: Option<PathBuf>,
    lesions: BTreeMap<(u8, u64, String), Vec<String>>,
    label: u8,
}

/// Reads and groups the metadata rows. Every descriptor token is checked
/// against `vocab`; errors name the offending line (the header is line 1).
pub fn parse_metadata_csv(text: &str, vocab: &DescriptorVocabulary) -> Result<Vec<CaseRecord>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| Error::Validation(format!("metadata header: {e}")))?
        .clone();
    let found: Vec<&str> = header.iter().map(str::trim).collect();
    if found != METADATA_HEADER {
        return Err(Error::Validation(format!(
            "metadata header must be `{}`, got `{}`",
            METADATA_HEADER.join(","),
            found.join(",")
        )));
    }
    let mut order: Vec<String> = Vec::new();
    let mut cases: BTreeMap<String, Pending> = BTreeMap::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::Validation(format!("line {line}: {e}")))?;
        let field = |k: usize| row.get(k).unwrap_or("").trim();
        let case_id = field(0).to_string();
        if case_id.is_empty() {
            return Err(Error::Validation(format!("line {line}: empty case_id")));
        }
        let label = parse_pathology(field(5))
            .ok_or_else(|| Error::Validation(format!("line {line}: unknown pathology {:?}", field(5))))?;
        let tokens: Vec<String> = field(4)
            .split(';')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(str::to_string)
            .collect();
        for t in &tokens {
            vocab
                .resolve(t)
                .map_err(|_| Error::Validation(format!("line {line}: unknown descriptor token {t:?}")))?;
        }
        let path = PathBuf::from(field(2));
        let entry = cases.entry(case_id.clone()).or_insert_with(|| {
            order.push(case_id.clone());
            Pending::default()
        });
        let slot = match field(1).to_ascii_uppercase().as_str() {
            "CC" => &mut entry.cc,
            "MLO" => &mut entry.mlo,
            other => return Err(Error::Validation(format!("line {line}: unknown view {other:?}"))),
        };
        match slot {
            Some(existing) if *existing != path => {
                return Err(Error::Validation(format!(
                    "line {line}: case {case_id} lists two different {} images",
                    field(1)
                )))
            }
            _ => *slot = Some(path),
        }
        let lesion = entry.lesions.entry(lesion_key(field(3))).or_default();
        for t in tokens {
            if !lesion.contains(&t) {
                lesion.push(t);
            }
        }
        entry.label = entry.label.max(label);
    }
    order
        .into_iter()
        .map(|id| {
            let p = cases.remove(&id).expect("grouped case");
            let missing = |v: &str| Error::Validation(format!("case {id} has no {v} view"));
            Ok(CaseRecord {
                cc_image: p.cc.ok_or_else(|| missing("CC"))?,
                mlo_image: p.mlo.ok_or_else(|| missing("MLO"))?,
                lesions: p.lesions.into_values().collect(),
                label: p.label,
                case_id: id,
            })
        })
        .collect()
}

pub fn load_metadata_csv(path: &Path, vocab: &DescriptorVocabulary) -> Result<Vec<CaseRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_metadata_csv(&text, vocab)
}

/// Serializes records; lesions get ids `1..=K`.
pub fn metadata_csv_string(records: &[CaseRecord]) -> String {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(METADATA_HEADER).expect("in-memory write");
    for r in records {
        let pathology = if r.label == 1 { "MALIGNANT" } else { "BENIGN" };
        for (j, lesion) in r.lesions.iter().enumerate() {
            for (view, path) in [("CC", &r.cc_image), ("MLO", &r.mlo_image)] {
                let id = (j + 1).to_string();
                let desc = lesion.join(";");
                let p = path.to_string_lossy();
                w.write_record([r.case_id.as_str(), view, &p, &id, &desc, pathology])
                    .expect("in-memory write");
            }
        }
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

pub fn write_metadata_csv(path: &Path, records: &[CaseRecord]) -> Result<()> {
    crate::fsio::write_atomic(path, metadata_csv_string(records))
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "case_id,view,image_path,lesion_id,descriptors,pathology\n";

    fn vocab() -> DescriptorVocabulary {
        DescriptorVocabulary::default_classes()
    }

    #[test]
    fn two_rows_make_one_case() {
        let text = format!("{HEADER}c1,CC,a.pgm,1,Round;Circumscribed,BENIGN\nc1,MLO,b.pgm,1,Round;Circumscribed,BENIGN\n");
        let r = parse_metadata_csv(&text, &vocab()).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].lesions, vec![vec!["Round".to_string(), "Circumscribed".to_string()]]);
        assert_eq!(r[0].label, 0);
    }

    #[test]
    fn missing_view_names_the_case() {
        let text = format!("{HEADER}c7,CC,a.pgm,1,Oval,MALIGNANT\n");
        let err = parse_metadata_csv(&text, &vocab()).unwrap_err().to_string();
        assert!(err.contains("c7") && err.contains("MLO"), "{err}");
    }

    #[test]
    fn lesions_are_grouped_and_ordered_by_id() {
        let text = format!(
            "{HEADER}c1,MLO,b.pgm,2,Irregular,MALIGNANT\nc1,CC,a.pgm,10,Oval,MALIGNANT\n\
             c1,CC,a.pgm,2,Irregular;Spicular,MALIGNANT\nc1,MLO,b.pgm,10,Oval,MALIGNANT\n"
        );
        let r = parse_metadata_csv(&text, &vocab()).unwrap();
        assert_eq!(r[0].lesions.len(), 2);
        assert_eq!(r[0].lesions[0], vec!["Irregular".to_string(), "Spicular".to_string()]);
        assert_eq!(r[0].lesions[1], vec!["Oval".to_string()]);
        assert_eq!(r[0].label, 1);
    }

    #[test]
    fn row_errors_carry_line_numbers() {
        let bad_token = format!("{HEADER}c1,CC,a.pgm,1,Round,BENIGN\nc1,MLO,b.pgm,1,Squiggly,BENIGN\n");
        let err = parse_metadata_csv(&bad_token, &vocab()).unwrap_err().to_string();
        assert!(err.contains("line 3") && err.contains("Squiggly"), "{err}");
        let bad_path = format!("{HEADER}c1,CC,a.pgm,1,Round,UNSURE\n");
        let err = parse_metadata_csv(&bad_path, &vocab()).unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("UNSURE"), "{err}");
        let callback = format!("{HEADER}c1,CC,a.pgm,1,Round,BENIGN_WITHOUT_CALLBACK\nc1,MLO,b.pgm,1,Round,BENIGN\n");
        assert_eq!(parse_metadata_csv(&callback, &vocab()).unwrap()[0].label, 0);
    }

    #[test]
    fn write_then_parse_round_trips() {
        let records = vec![
            CaseRecord {
                case_id: "a".into(),
                cc_image: "images/a_CC.pgm".into(),
                mlo_image: "images/a_MLO.pgm".into(),
                lesions: vec![vec!["Oval".into()], vec!["Irregular".into(), "Ill-defined".into()]],
                label: 1,
            },
            CaseRecord {
                case_id: "b".into(),
                cc_image: "b1.png".into(),
                mlo_image: "b2.png".into(),
                lesions: vec![vec![]],
                label: 0,
            },
        ];
        let text = metadata_csv_string(&records);
        assert_eq!(parse_metadata_csv(&text, &vocab()).unwrap(), records);
    }
}
