use std::collections::BTreeMap;
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::schema::{feature_names, one_hot_ranges, N_FEATURES, N_TARGETS, TARGET_NAMES};
use crate::error::{Error, Result};

/// One visit. Missing cells are stored as NaN.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Visit {
    pub visit: u32,
    pub features: Vec<f64>,
    pub targets: [f64; N_TARGETS],
    pub diagnosis: Option<String>,
}

impl Visit {
    #[inline]
    pub fn is_missing(&self, j: usize) -> bool {
        self.features[j].is_nan()
    }

    pub fn missing_mask(&self) -> Vec<bool> {
        self.features.iter().map(|v| v.is_nan()).collect()
    }

    pub fn targets_complete(&self) -> bool {
        self.targets.iter().all(|t| t.is_finite())
    }
}

fn same_bits(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

impl PartialEq for Visit {
    fn eq(&self, other: &Self) -> bool {
        self.visit == other.visit
            && same_bits(&self.features, &other.features)
            && same_bits(&self.targets, &other.targets)
            && self.diagnosis == other.diagnosis
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub id: String,
    /// Sorted by visit index.
    pub visits: Vec<Visit>,
}

impl Subject {
    /// Diagnosis of the first visit that carries one.
    pub fn diagnosis(&self) -> Option<&str> {
        self.visits.iter().find_map(|v| v.diagnosis.as_deref())
    }
}

/// Per-subject visit sequences, sorted by subject id.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LongitudinalDataset {
    pub subjects: Vec<Subject>,
}

impl LongitudinalDataset {
    /// Group visits by subject, sort, and check uniqueness and one-hot
    /// consistency. `line` gives each visit's source row for error reports.
    pub fn from_visits(rows: Vec<(String, Visit, usize)>) -> Result<Self> {
        let mut by_subject: BTreeMap<String, Vec<(Visit, usize)>> = BTreeMap::new();
        for (id, visit, line) in rows {
            validate_visit(&visit, line)?;
            by_subject.entry(id).or_default().push((visit, line));
        }
        let mut subjects = Vec::with_capacity(by_subject.len());
        for (id, mut visits) in by_subject {
            visits.sort_by_key(|(v, line)| (v.visit, *line));
            for pair in visits.windows(2) {
                if pair[0].0.visit == pair[1].0.visit {
                    return Err(Error::Ingest {
                        row: pair[1].1,
                        message: format!("duplicate visit {} for subject {id}", pair[1].0.visit),
                    });
                }
            }
            subjects.push(Subject {
                id,
                visits: visits.into_iter().map(|(v, _)| v).collect(),
            });
        }
        Ok(Self { subjects })
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn n_visits(&self) -> usize {
        self.subjects.iter().map(|s| s.visits.len()).sum()
    }

    pub fn subject_ids(&self) -> Vec<&str> {
        self.subjects.iter().map(|s| s.id.as_str()).collect()
    }

    pub fn has_diagnosis(&self) -> bool {
        self.subjects.iter().any(|s| s.diagnosis().is_some())
    }

    /// Subset keeping only the listed subject indices, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            subjects: indices.iter().map(|&i| self.subjects[i].clone()).collect(),
        }
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let header = rdr.headers()?.clone();
        let layout = ColumnLayout::from_header(&header)?;
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
            rows.push(layout.parse(&rec, line)?);
        }
        Self::from_visits(rows)
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::file(path, e))?;
        Self::read_csv(std::io::BufReader::new(file))
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let with_dx = self.has_diagnosis();
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["subject_id".to_string(), "visit".to_string()];
        header.extend(feature_names());
        header.extend(TARGET_NAMES.iter().map(|s| s.to_string()));
        if with_dx {
            header.push("diagnosis".into());
        }
        w.write_record(&header)?;
        let mut row: Vec<String> = Vec::with_capacity(header.len());
        for s in &self.subjects {
            for v in &s.visits {
                row.clear();
                row.push(s.id.clone());
                row.push(v.visit.to_string());
                row.extend(v.features.iter().map(|&x| format_cell(x)));
                row.extend(v.targets.iter().map(|&x| format_cell(x)));
                if with_dx {
                    row.push(v.diagnosis.clone().unwrap_or_default());
                }
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::file(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// Seventeen significant digits, enough to round-trip any f64.
pub fn format_cell(x: f64) -> String {
    if x.is_nan() {
        "NA".into()
    } else {
        format!("{x:.16e}")
    }
}

fn validate_visit(v: &Visit, line: usize) -> Result<()> {
    if v.features.len() != N_FEATURES {
        return Err(Error::Ingest {
            row: line,
            message: format!("expected {N_FEATURES} features, found {}", v.features.len()),
        });
    }
    for r in one_hot_ranges() {
        let hot = v.features[r.clone()].iter().filter(|&&x| x == 1.0).count();
        if hot > 1 {
            return Err(Error::Ingest {
                row: line,
                message: format!(
                    "one-hot group starting at column {} has {hot} active levels",
                    r.start
                ),
            });
        }
    }
    Ok(())
}

struct ColumnLayout {
    subject: usize,
    visit: usize,
    features: Vec<usize>,
    targets: Vec<usize>,
    diagnosis: Option<usize>,
}

impl ColumnLayout {
    fn from_header(header: &csv::StringRecord) -> Result<Self> {
        let mut index: HashMap<&str, usize> = HashMap::new();
        for (i, name) in header.iter().enumerate() {
            if index.insert(name, i).is_some() {
                return Err(Error::Ingest {
                    row: 1,
                    message: format!("duplicate column `{name}`"),
                });
            }
        }
        let names = feature_names();
        let mut known: Vec<&str> = vec!["subject_id", "visit", "diagnosis"];
        known.extend(names.iter().map(String::as_str));
        known.extend(TARGET_NAMES);
        if let Some(unknown) = header.iter().find(|h| !known.contains(h)) {
            return Err(Error::Ingest {
                row: 1,
                message: format!("unknown column `{unknown}`"),
            });
        }
        let get = |name: &str| {
            index.get(name).copied().ok_or_else(|| Error::Ingest {
                row: 1,
                message: format!("missing column `{name}`"),
            })
        };
        Ok(Self {
            subject: get("subject_id")?,
            visit: get("visit")?,
            features: names.iter().map(|n| get(n)).collect::<Result<_>>()?,
            targets: TARGET_NAMES.iter().map(|n| get(n)).collect::<Result<_>>()?,
            diagnosis: index.get("diagnosis").copied(),
        })
    }

    fn parse(&self, rec: &csv::StringRecord, line: usize) -> Result<(String, Visit, usize)> {
        let cell = |i: usize| rec.get(i).unwrap_or("");
        let id = cell(self.subject).to_string();
        if id.is_empty() {
            return Err(Error::Ingest {
                row: line,
                message: "empty subject_id".into(),
            });
        }
        let visit: u32 = cell(self.visit).parse().map_err(|_| Error::Ingest {
            row: line,
            message: format!("visit `{}` is not a non-negative integer", cell(self.visit)),
        })?;
        let number = |i: usize, what: &str| -> Result<f64> {
            let raw = cell(i);
            if raw.is_empty() || raw == "NA" {
                return Ok(f64::NAN);
            }
            match raw.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(Error::Ingest {
                    row: line,
                    message: format!("non-numeric cell `{raw}` in column {what}"),
                }),
            }
        };
        let names = feature_names();
        let features = self
            .features
            .iter()
            .zip(&names)
            .map(|(&i, n)| number(i, n))
            .collect::<Result<Vec<_>>>()?;
        let mut targets = [0.0; N_TARGETS];
        for (t, (&i, n)) in targets
            .iter_mut()
            .zip(self.targets.iter().zip(TARGET_NAMES))
        {
            *t = number(i, n)?;
        }
        let diagnosis = self
            .diagnosis
            .map(|i| cell(i).to_string())
            .filter(|d| !d.is_empty() && d != "NA");
        Ok((
            id,
            Visit {
                visit,
                features,
                targets,
                diagnosis,
            },
            line,
        ))
    }
}
