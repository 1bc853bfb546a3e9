use std::collections::BTreeSet;
use std::fs::File;
use std::path::Path;

use crate::error::{Error, Result};

pub const ID_COLUMNS: [&str; 4] = ["cell_id", "image_id", "individual_id", "label"];

#[derive(Clone, Debug, PartialEq)]
pub struct CellRecord {
    pub cell_id: String,
    pub image_id: String,
    pub individual_id: String,
    pub label: usize,
    pub features: Vec<f64>,
}

/// Frozen string-to-index map. Indices follow sorted order: numeric when
/// every label parses as an integer, lexicographic otherwise.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVocab {
    classes: Vec<String>,
}

impl LabelVocab {
    pub fn infer<'a>(labels: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let uniq: BTreeSet<&str> = labels.into_iter().collect();
        let mut classes: Vec<String> = uniq.into_iter().map(str::to_string).collect();
        if classes.is_empty() {
            return Err(Error::Data("no labels found".into()));
        }
        if classes.iter().all(|c| c.trim().parse::<i64>().is_ok()) {
            classes.sort_by_key(|c| c.trim().parse::<i64>().expect("checked"));
        }
        Ok(Self { classes })
    }

    pub fn from_classes(classes: Vec<String>) -> Result<Self> {
        let uniq: BTreeSet<&String> = classes.iter().collect();
        if classes.is_empty() || uniq.len() != classes.len() {
            return Err(Error::Data(format!("label vocabulary {classes:?} is empty or has duplicates")));
        }
        Ok(Self { classes })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn name(&self, index: usize) -> &str {
        &self.classes[index]
    }

    pub fn index_of(&self, label: &str) -> Result<usize> {
        self.classes
            .iter()
            .position(|c| c == label)
            .ok_or_else(|| Error::Data(format!("unknown label {label:?}; known labels are {:?}", self.classes)))
    }

    /// The class treated as positive for binary F1 and tumor-vs-rest AUC:
    /// `tumor` when present (case-insensitive), else index 1.
    pub fn positive_class(&self) -> usize {
        self.classes
            .iter()
            .position(|c| c.eq_ignore_ascii_case("tumor"))
            .unwrap_or(1.min(self.classes.len() - 1))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub feature_names: Vec<String>,
    pub vocab: LabelVocab,
    pub records: Vec<CellRecord>,
    /// Rows dropped at ingestion because a feature was not finite.
    pub dropped: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn n_classes(&self) -> usize {
        self.vocab.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label).collect()
    }

    /// Distinct individual ids in sorted order.
    pub fn individuals(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.records.iter().map(|r| r.individual_id.as_str()).collect();
        set.into_iter().map(str::to_string).collect()
    }

    /// Records whose individual is in `ids`, order preserved.
    pub fn subset(&self, ids: &BTreeSet<String>) -> Dataset {
        Dataset {
            feature_names: self.feature_names.clone(),
            vocab: self.vocab.clone(),
            records: self
                .records
                .iter()
                .filter(|r| ids.contains(&r.individual_id))
                .cloned()
                .collect(),
            dropped: 0,
        }
    }
}

/// A raw row as it comes off the file, label still a string.
#[derive(Clone, Debug, PartialEq)]
pub struct RawRecord {
    pub cell_id: String,
    pub image_id: String,
    pub individual_id: String,
    pub label: String,
    pub features: Vec<f64>,
}

/// Reads rows one at a time through a single reusable buffer.
pub struct CsvStream {
    reader: csv::Reader<File>,
    buf: csv::StringRecord,
    feature_names: Vec<String>,
    line: u64,
    dropped: usize,
}

impl CsvStream {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
        let header = reader.headers()?.clone();
        let names: Vec<&str> = header.iter().map(str::trim).collect();
        for (i, want) in ID_COLUMNS.iter().enumerate() {
            if names.get(i) != Some(want) {
                return Err(Error::Data(format!(
                    "{}: column {} must be {want:?}, found {:?}",
                    path.display(),
                    i + 1,
                    names.get(i).copied().unwrap_or("<missing>")
                )));
            }
        }
        let feature_names: Vec<String> = names[ID_COLUMNS.len()..].iter().map(|s| s.to_string()).collect();
        if feature_names.is_empty() {
            return Err(Error::Data(format!("{}: no feature columns", path.display())));
        }
        Ok(Self {
            reader,
            buf: csv::StringRecord::new(),
            feature_names,
            line: 1,
            dropped: 0,
        })
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    /// Rows skipped so far for holding a non-finite feature.
    pub fn dropped(&self) -> usize {
        self.dropped
    }

    fn parse_current(&self) -> Result<Option<RawRecord>> {
        let rec = &self.buf;
        let want = ID_COLUMNS.len() + self.feature_names.len();
        if rec.len() != want {
            return Err(Error::Data(format!(
                "line {}: {} fields, expected {want}",
                self.line,
                rec.len()
            )));
        }
        let mut features = Vec::with_capacity(self.feature_names.len());
        for (j, field) in rec.iter().skip(ID_COLUMNS.len()).enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::Data(format!(
                    "line {}: feature {} is not a number: {field:?}",
                    self.line, self.feature_names[j]
                ))
            })?;
            features.push(v);
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Ok(None);
        }
        Ok(Some(RawRecord {
            cell_id: rec[0].to_string(),
            image_id: rec[1].to_string(),
            individual_id: rec[2].to_string(),
            label: rec[3].trim().to_string(),
            features,
        }))
    }
}

impl Iterator for CsvStream {
    type Item = Result<RawRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            match self.reader.read_record(&mut self.buf) {
                Ok(false) => return None,
                Err(e) => return Some(Err(e.into())),
                Ok(true) => {}
            }
            self.line += 1;
            match self.parse_current() {
                Ok(Some(r)) => return Some(Ok(r)),
                Ok(None) => self.dropped += 1,
                Err(e) => return Some(Err(e)),
            }
        }
    }
}

fn collect(path: &Path) -> Result<(Vec<String>, Vec<RawRecord>, usize)> {
    let mut stream = CsvStream::open(path)?;
    let mut rows = Vec::new();
    for r in stream.by_ref() {
        rows.push(r?);
    }
    Ok((stream.feature_names.clone(), rows, stream.dropped))
}

fn finish(names: Vec<String>, rows: Vec<RawRecord>, dropped: usize, vocab: LabelVocab) -> Result<Dataset> {
    let records = rows
        .into_iter()
        .map(|r| {
            Ok(CellRecord {
                label: vocab.index_of(&r.label)?,
                cell_id: r.cell_id,
                image_id: r.image_id,
                individual_id: r.individual_id,
                features: r.features,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Dataset {
        feature_names: names,
        vocab,
        records,
        dropped,
    })
}

/// Loads a radiomics table and infers its label vocabulary.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let (names, rows, dropped) = collect(path.as_ref())?;
    let vocab = LabelVocab::infer(rows.iter().map(|r| r.label.as_str()))?;
    finish(names, rows, dropped, vocab)
}

/// Loads a table against a frozen vocabulary; unseen labels are errors.
pub fn load_csv_with_vocab(path: impl AsRef<Path>, vocab: &LabelVocab) -> Result<Dataset> {
    let (names, rows, dropped) = collect(path.as_ref())?;
    finish(names, rows, dropped, vocab.clone())
}

pub fn write_csv(path: impl AsRef<Path>, data: &Dataset) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let header = ID_COLUMNS
        .iter()
        .map(|s| s.to_string())
        .chain(data.feature_names.iter().cloned());
    w.write_record(header)?;
    let mut row: Vec<String> = Vec::new();
    for r in &data.records {
        row.clear();
        row.push(r.cell_id.clone());
        row.push(r.image_id.clone());
        row.push(r.individual_id.clone());
        row.push(data.vocab.name(r.label).to_string());
        // `{}` on f64 prints the shortest string that parses back exactly.
        row.extend(r.features.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
