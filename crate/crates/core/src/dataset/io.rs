use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Cohort, FeatureNames, PatientRecord, NUM_INTERVALS, NUM_VISITS, SCORE_DIM, STATIC_DIM};
use crate::error::{Error, Result};

/// Canonical column names in file order.
pub static CANONICAL_HEADER: std::sync::LazyLock<Vec<String>> = std::sync::LazyLock::new(|| {
    let mut cols = vec!["id".to_string()];
    cols.extend((1..=STATIC_DIM).map(|k| format!("s{k:02}")));
    for t in 0..NUM_VISITS {
        cols.extend((1..=SCORE_DIM).map(|d| format!("x{t}_{d:02}")));
    }
    cols.extend((1..=NUM_INTERVALS).map(|t| format!("y{t}")));
    cols.push("reason".to_string());
    cols
});

/// Source-to-canonical column renames plus optional display labels.
///
/// ```toml
/// [columns]
/// patient_id = "id"
/// Age = "s01"
///
/// [labels]
/// s14 = "prior_treatment"
/// ```
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ColumnMapping {
    #[serde(default)]
    pub columns: BTreeMap<String, String>,
    #[serde(default)]
    pub labels: BTreeMap<String, String>,
}

impl ColumnMapping {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mapping: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for target in mapping.columns.values() {
            if !CANONICAL_HEADER.contains(target) {
                return Err(Error::Schema(format!("mapping targets unknown column `{target}`")));
            }
        }
        Ok(mapping)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    fn canonical<'a>(&'a self, source: &'a str) -> &'a str {
        self.columns.get(source).map_or(source, String::as_str)
    }

    fn feature_names(&self) -> FeatureNames {
        let mut names = FeatureNames::default();
        for (k, name) in names.statics.iter_mut().enumerate() {
            if let Some(label) = self.labels.get(&format!("s{:02}", k + 1)) {
                *name = label.clone();
            }
        }
        for (d, name) in names.scores.iter_mut().enumerate() {
            if let Some(label) = self.labels.get(&format!("x_{:02}", d + 1)) {
                *name = label.clone();
            }
        }
        names
    }
}

/// Reads a cohort file, renaming columns through `mapping`.
pub fn load_cohort(path: &Path, mapping: &ColumnMapping) -> Result<Cohort> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_cohort(file, mapping)
}

pub fn read_cohort<R: std::io::Read>(reader: R, mapping: &ColumnMapping) -> Result<Cohort> {
    let mut rdr = csv::ReaderBuilder::new().flexible(false).from_reader(reader);
    let header = rdr.headers()?.clone();
    let mut index = BTreeMap::new();
    for (i, name) in header.iter().enumerate() {
        index.insert(mapping.canonical(name.trim()).to_string(), i);
    }
    for col in CANONICAL_HEADER.iter() {
        if col != "reason" && !index.contains_key(col) {
            return Err(Error::MissingColumn(col.clone()));
        }
    }
    let col = |name: &str| index.get(name).copied();

    let mut records = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let cell = |name: &str| col(name).and_then(|i| row.get(i)).unwrap_or("").trim();
        let id = cell("id").to_string();

        let mut s = Vec::with_capacity(STATIC_DIM);
        for k in 1..=STATIC_DIM {
            let name = format!("s{k:02}");
            s.push(parse_real(&id, &name, cell(&name))?.unwrap_or(f64::NAN));
        }

        let mut x = Array2::from_elem((NUM_VISITS, SCORE_DIM), f64::NAN);
        let mut mask = [false; NUM_VISITS];
        for t in 0..NUM_VISITS {
            let mut present = 0;
            for d in 0..SCORE_DIM {
                let name = format!("x{t}_{:02}", d + 1);
                if let Some(v) = parse_real(&id, &name, cell(&name))? {
                    x[[t, d]] = v;
                    present += 1;
                }
            }
            match present {
                0 => {}
                n if n == SCORE_DIM => mask[t] = true,
                n => {
                    return Err(Error::validation(
                        &id,
                        format!("visit {t} partially observed ({n} of {SCORE_DIM} scores)"),
                    ))
                }
            }
        }

        let mut y = [0u8; NUM_INTERVALS];
        for (t, slot) in y.iter_mut().enumerate() {
            let name = format!("y{}", t + 1);
            let raw = cell(&name);
            *slot = match raw {
                "0" | "0.0" => 0,
                "1" | "1.0" => 1,
                _ => {
                    return Err(Error::validation(
                        &id,
                        format!("{name} = `{raw}` is not binary"),
                    ))
                }
            };
        }

        let reason = cell("reason");
        records.push(PatientRecord {
            id,
            s,
            x,
            y,
            mask,
            withdrawal_reason: (!reason.is_empty()).then(|| reason.to_string()),
        });
    }
    Cohort::new(records, mapping.feature_names())
}

fn parse_real(id: &str, column: &str, raw: &str) -> Result<Option<f64>> {
    if raw.is_empty() || raw.eq_ignore_ascii_case("na") || raw.eq_ignore_ascii_case("nan") {
        return Ok(None);
    }
    raw.parse::<f64>()
        .map(Some)
        .map_err(|_| Error::validation(id, format!("{column} = `{raw}` is not a number")))
}

/// Writes the canonical CSV. Values use the shortest round-trip
/// representation, so loading and re-writing is byte-identical.
pub fn write_cohort<W: std::io::Write>(cohort: &Cohort, writer: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .quote_style(csv::QuoteStyle::Necessary)
        .from_writer(writer);
    w.write_record(CANONICAL_HEADER.iter())?;
    for r in &cohort.records {
        let mut row = Vec::with_capacity(CANONICAL_HEADER.len());
        row.push(r.id.clone());
        row.extend(r.s.iter().map(|v| v.to_string()));
        for t in 0..NUM_VISITS {
            for d in 0..SCORE_DIM {
                row.push(if r.mask[t] { r.x[[t, d]].to_string() } else { String::new() });
            }
        }
        row.extend(r.y.iter().map(|v| v.to_string()));
        row.push(r.withdrawal_reason.clone().unwrap_or_default());
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<cohort writer>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::fixtures::record;

    fn fixture_csv() -> String {
        let mut recs = vec![record("a", [1; 5]), record("b", [1, 1, 0, 0, 0]), record("c", [1, 0, 0, 0, 0])];
        recs[1].mask[4] = false;
        recs[1].x.row_mut(4).fill(f64::NAN);
        recs[2].withdrawal_reason = Some("moved away, far".into());
        recs[0].s[3] = 0.1 + 0.2;
        let cohort = Cohort::new(recs, FeatureNames::default()).unwrap();
        let mut buf = Vec::new();
        write_cohort(&cohort, &mut buf).unwrap();
        String::from_utf8(buf).unwrap()
    }

    #[test]
    fn header_layout() {
        assert_eq!(CANONICAL_HEADER.len(), 1 + 14 + 66 + 5 + 1);
        assert_eq!(CANONICAL_HEADER[1], "s01");
        assert_eq!(CANONICAL_HEADER[15], "x0_01");
        assert_eq!(CANONICAL_HEADER[80], "x5_11");
        assert_eq!(CANONICAL_HEADER[81], "y1");
    }

    #[test]
    fn three_record_fixture_loads() {
        let text = fixture_csv();
        let cohort = read_cohort(text.as_bytes(), &ColumnMapping::default()).unwrap();
        assert_eq!(cohort.len(), 3);
        let b = cohort.get("b").unwrap();
        assert_eq!(b.s.len(), 14);
        assert_eq!(b.x.ncols(), 11);
        assert_eq!(b.mask, [true, true, true, true, false, true]);
        assert_eq!(cohort.get("c").unwrap().withdrawal_reason.as_deref(), Some("moved away, far"));
    }

    #[test]
    fn reserialization_is_byte_identical() {
        let text = fixture_csv();
        let cohort = read_cohort(text.as_bytes(), &ColumnMapping::default()).unwrap();
        let mut again = Vec::new();
        write_cohort(&cohort, &mut again).unwrap();
        assert_eq!(text.as_bytes(), &again[..]);
    }

    #[test]
    fn missing_column_is_named() {
        let text = fixture_csv().replacen("x3_07", "bogus", 1);
        let err = read_cohort(text.as_bytes(), &ColumnMapping::default()).unwrap_err();
        assert!(matches!(err, Error::MissingColumn(ref c) if c == "x3_07"), "{err}");
    }

    #[test]
    fn mapping_renames_source_columns() {
        let text = fixture_csv().replacen("id,s01", "PatientID,Age", 1);
        let mapping = ColumnMapping::from_toml(
            "[columns]\nPatientID = \"id\"\nAge = \"s01\"\n[labels]\ns14 = \"prior_sit\"\n",
        )
        .unwrap();
        let cohort = read_cohort(text.as_bytes(), &mapping).unwrap();
        assert_eq!(cohort.len(), 3);
        assert_eq!(cohort.feature_names.statics[13], "prior_sit");
    }

    #[test]
    fn mapping_to_unknown_column_rejected() {
        assert!(ColumnMapping::from_toml("[columns]\nfoo = \"s99\"\n").is_err());
    }

    #[test]
    fn non_binary_label_names_record() {
        let text = fixture_csv();
        let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
        let mut cells: Vec<String> = lines[1].split(',').map(str::to_string).collect();
        cells[82] = "0.5".into();
        lines[1] = cells.join(",");
        let err = read_cohort(lines.join("\n").as_bytes(), &ColumnMapping::default()).unwrap_err();
        assert!(err.to_string().contains("`a`") && err.to_string().contains("y2"), "{err}");
    }

    #[test]
    fn partial_visit_rejected() {
        let text = fixture_csv();
        let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
        let mut cells: Vec<String> = lines[1].split(',').map(str::to_string).collect();
        cells[15 + 2 * 11 + 4] = String::new();
        lines[1] = cells.join(",");
        let err = read_cohort(lines.join("\n").as_bytes(), &ColumnMapping::default()).unwrap_err();
        assert!(err.to_string().contains("partially observed"), "{err}");
    }
}
