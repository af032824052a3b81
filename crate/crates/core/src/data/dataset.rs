use std::collections::{HashMap, HashSet};
use std::path::Path;

use log::{info, warn};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Samples × features table with class labels.
///
/// Missing cells hold NaN and are flagged in `missing_mask` (row-major, `true` = missing).
#[derive(Debug, Clone, PartialEq)]
pub struct TabularDataset {
    pub sample_ids: Vec<String>,
    pub x: Tensor<f64>,
    pub y: Vec<usize>,
    pub feature_names: Vec<String>,
    pub class_names: Vec<String>,
    pub missing_mask: Option<Vec<bool>>,
}

impl TabularDataset {
    /// Builds a dataset and checks its invariants.
    pub fn new(
        sample_ids: Vec<String>,
        x: Tensor<f64>,
        y: Vec<usize>,
        feature_names: Vec<String>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        let ds = TabularDataset {
            sample_ids,
            x,
            y,
            feature_names,
            class_names,
            missing_mask: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn n_samples(&self) -> usize {
        self.y.len()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes()];
        for &c in &self.y {
            counts[c] += 1;
        }
        counts
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.y.len();
        if self.sample_ids.len() != n || self.x.shape() != [n, self.feature_names.len()] {
            return Err(Error::Integrity(format!(
                "inconsistent sizes: {} ids, {} labels, matrix {:?}, {} feature names",
                self.sample_ids.len(),
                n,
                self.x.shape(),
                self.feature_names.len()
            )));
        }
        let mut seen = HashSet::with_capacity(n);
        for id in &self.sample_ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::Integrity(format!("duplicate sample id {id:?}")));
            }
        }
        if let Some(&bad) = self.y.iter().find(|&&c| c >= self.class_names.len()) {
            return Err(Error::Integrity(format!(
                "class index {bad} out of range for {} classes",
                self.class_names.len()
            )));
        }
        if let Some(mask) = &self.missing_mask {
            if mask.len() != self.x.numel() {
                return Err(Error::Integrity("missing mask size differs from matrix".into()));
            }
        }
        Ok(())
    }

    /// Rows in the given order, with labels and mask.
    pub fn subset(&self, indices: &[usize]) -> TabularDataset {
        let m = self.n_features();
        TabularDataset {
            sample_ids: indices.iter().map(|&i| self.sample_ids[i].clone()).collect(),
            x: self.x.select_rows(indices),
            y: indices.iter().map(|&i| self.y[i]).collect(),
            feature_names: self.feature_names.clone(),
            class_names: self.class_names.clone(),
            missing_mask: self.missing_mask.as_ref().map(|mask| {
                indices
                    .iter()
                    .flat_map(|&i| mask[i * m..(i + 1) * m].iter().copied())
                    .collect()
            }),
        }
    }
}

fn detect_delimiter(header: &str) -> u8 {
    if header.contains('\t') {
        b'\t'
    } else {
        b','
    }
}

/// Reads a delimited table: first column sample ids, one label column, the
/// rest numeric features. An empty cell marks a missing value.
///
/// `delimiter = None` picks tab when the header line contains one, else comma.
pub fn load_table(path: &Path, label_column: &str, delimiter: Option<u8>) -> Result<TabularDataset> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::from(e).context(format!("reading {}", path.display())))?;
    parse_table(&text, label_column, delimiter)
        .map_err(|e| e.context(format!("loading {}", path.display())))
}

/// [`load_table`] on in-memory text.
pub fn parse_table(text: &str, label_column: &str, delimiter: Option<u8>) -> Result<TabularDataset> {
    let header_line = text.lines().next().unwrap_or("");
    let delim = delimiter.unwrap_or_else(|| detect_delimiter(header_line));
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delim)
        .has_headers(true)
        .from_reader(text.as_bytes());
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if headers.len() < 2 {
        return Err(Error::Parse {
            row: 0,
            column: String::new(),
            message: "header needs a sample id column and at least one more column".into(),
        });
    }
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .filter(|&i| i > 0)
        .ok_or_else(|| Error::Parse {
            row: 0,
            column: label_column.to_string(),
            message: "label column not found in header".into(),
        })?;
    let feature_cols: Vec<usize> = (1..headers.len()).filter(|&i| i != label_idx).collect();
    let feature_names: Vec<String> = feature_cols.iter().map(|&i| headers[i].clone()).collect();

    let mut sample_ids = Vec::new();
    let mut y = Vec::new();
    let mut data = Vec::new();
    let mut mask = Vec::new();
    let mut class_names: Vec<String> = Vec::new();
    let mut class_index: HashMap<String, usize> = HashMap::new();
    let mut seen_ids = HashSet::new();

    for (row, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != headers.len() {
            return Err(Error::Parse {
                row,
                column: String::new(),
                message: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        let id = record[0].trim().to_string();
        if !seen_ids.insert(id.clone()) {
            return Err(Error::Integrity(format!("duplicate sample id {id:?}")));
        }
        let label = record[label_idx].trim();
        if label.is_empty() {
            return Err(Error::Parse {
                row,
                column: label_column.to_string(),
                message: "empty label".into(),
            });
        }
        let next = class_names.len();
        let class = *class_index.entry(label.to_string()).or_insert_with(|| {
            class_names.push(label.to_string());
            next
        });
        for &c in &feature_cols {
            let cell = record[c].trim();
            if cell.is_empty() {
                data.push(f64::NAN);
                mask.push(true);
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row,
                column: headers[c].clone(),
                message: format!("cannot parse {cell:?} as a number"),
            })?;
            data.push(v);
            mask.push(false);
        }
        sample_ids.push(id);
        y.push(class);
    }
    if class_names.len() < 2 {
        return Err(Error::Task(format!(
            "classification needs at least 2 classes, found {}",
            class_names.len()
        )));
    }
    let n = y.len();
    let x = Tensor::new(&[n, feature_names.len()], data)?;
    let mut ds = TabularDataset::new(sample_ids, x, y, feature_names, class_names)?;
    if mask.iter().any(|&m| m) {
        ds.missing_mask = Some(mask);
    }
    Ok(ds)
}

/// Writes a dataset in the format [`load_table`] reads (comma-delimited).
pub fn write_table(ds: &TabularDataset, path: &Path, label_column: &str) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["sample_id".to_string(), label_column.to_string()];
    header.extend(ds.feature_names.iter().cloned());
    w.write_record(&header)?;
    let m = ds.n_features();
    for i in 0..ds.n_samples() {
        let mut rec = vec![ds.sample_ids[i].clone(), ds.class_names[ds.y[i]].clone()];
        for j in 0..m {
            let missing = ds.missing_mask.as_ref().is_some_and(|mk| mk[i * m + j]);
            rec.push(if missing {
                String::new()
            } else {
                format!("{}", ds.x.at(i, j))
            });
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Drops classes with `min_count` or fewer samples and re-indexes the rest densely.
pub fn filter_min_class(ds: &TabularDataset, min_count: usize) -> Result<TabularDataset> {
    if min_count < 1 {
        return Err(Error::Config("min_count must be >= 1".into()));
    }
    let counts = ds.class_counts();
    let kept: Vec<usize> = (0..counts.len()).filter(|&c| counts[c] > min_count).collect();
    if kept.is_empty() {
        return Err(Error::Task(format!(
            "no class has more than {min_count} samples"
        )));
    }
    let mut remap = vec![usize::MAX; counts.len()];
    for (new, &old) in kept.iter().enumerate() {
        remap[old] = new;
    }
    let rows: Vec<usize> = (0..ds.n_samples()).filter(|&i| remap[ds.y[i]] != usize::MAX).collect();
    let mut out = ds.subset(&rows);
    out.y = rows.iter().map(|&i| remap[ds.y[i]]).collect();
    out.class_names = kept.iter().map(|&c| ds.class_names[c].clone()).collect();
    if counts.len() != kept.len() {
        info!(
            "filter_min_class: kept {} of {} classes ({} samples)",
            kept.len(),
            counts.len(),
            rows.len()
        );
    }
    Ok(out)
}

/// Pairs two modalities on sample id, keeping `a`'s row order and class indexing.
/// Samples present in only one file are dropped and counted in the log.
pub fn join_modalities(a: &TabularDataset, b: &TabularDataset) -> Result<(TabularDataset, TabularDataset)> {
    let b_rows: HashMap<&str, usize> = b
        .sample_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let mut rows_a = Vec::new();
    let mut rows_b = Vec::new();
    for (i, id) in a.sample_ids.iter().enumerate() {
        if let Some(&j) = b_rows.get(id.as_str()) {
            let la = &a.class_names[a.y[i]];
            let lb = &b.class_names[b.y[j]];
            if la != lb {
                return Err(Error::Integrity(format!(
                    "sample {id:?} has label {la:?} in one modality and {lb:?} in the other"
                )));
            }
            rows_a.push(i);
            rows_b.push(j);
        }
    }
    let dropped = a.n_samples() + b.n_samples() - 2 * rows_a.len();
    if dropped > 0 {
        warn!("join: dropped {dropped} samples present in only one modality");
    }
    let ja = a.subset(&rows_a);
    let mut jb = b.subset(&rows_b);
    jb.y = ja.y.clone();
    jb.class_names = ja.class_names.clone();
    Ok((ja, jb))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_table_labels_in_first_appearance_order() {
        let text = "id,label,g1,g2\ns1,A,1,2\ns2,B,3,4\ns3,A,5,6\n";
        let ds = parse_table(text, "label", None).unwrap();
        assert_eq!(ds.n_classes(), 2);
        assert_eq!(ds.y, vec![0, 1, 0]);
        assert_eq!(ds.feature_names, vec!["g1", "g2"]);
        assert!(ds.missing_mask.is_none());
    }

    #[test]
    fn tab_delimited_with_empty_cell() {
        let text = "id\tg1\tlabel\tg2\ns1\t1\tA\t2\ns2\t3\tB\t4\ns3\t\tA\t6\n";
        let ds = parse_table(text, "label", None).unwrap();
        let mask = ds.missing_mask.as_ref().unwrap();
        assert!(mask[2 * 2]);
        assert_eq!(mask.iter().filter(|&&m| m).count(), 1);
        assert!(ds.x.at(2, 0).is_nan());
    }

    #[test]
    fn parse_errors() {
        let bad = "id,label,g1\ns1,A,1\ns2,B,x\n";
        match parse_table(bad, "label", None).unwrap_err() {
            Error::Parse { row, column, .. } => {
                assert_eq!(row, 1);
                assert_eq!(column, "g1");
            }
            e => panic!("{e}"),
        }
        let dup = "id,label,g1\ns1,A,1\ns1,B,2\n";
        assert!(matches!(parse_table(dup, "label", None), Err(Error::Integrity(_))));
        let single = "id,label,g1\ns1,A,1\ns2,A,2\n";
        assert!(matches!(parse_table(single, "label", None), Err(Error::Task(_))));
    }

    fn sized(counts: &[usize]) -> TabularDataset {
        let y: Vec<usize> = counts.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat_n(c, n)).collect();
        let n = y.len();
        TabularDataset::new(
            (0..n).map(|i| format!("s{i}")).collect(),
            Tensor::zeros(&[n, 1]),
            y,
            vec!["f".into()],
            (0..counts.len()).map(|c| format!("c{c}")).collect(),
        )
        .unwrap()
    }

    #[test]
    fn filter_is_strict() {
        let out = filter_min_class(&sized(&[200, 50]), 100).unwrap();
        assert_eq!(out.n_classes(), 1);
        let same = filter_min_class(&sized(&[150, 120]), 100).unwrap();
        assert_eq!(same, sized(&[150, 120]));
        let five = filter_min_class(&sized(&[150, 120, 101, 100, 99]), 100).unwrap();
        assert_eq!(five.n_classes(), 3);
        assert_eq!(five.class_counts(), vec![150, 120, 101]);
        assert!(matches!(filter_min_class(&sized(&[10, 20]), 100), Err(Error::Task(_))));
    }

    #[test]
    fn join_drops_unpaired() {
        let a = parse_table("id,label,g\ns1,A,1\ns2,B,2\ns3,A,3\n", "label", None).unwrap();
        let b = parse_table("id,label,h\ns3,A,30\ns1,A,10\ns9,B,90\n", "label", None).unwrap();
        let (ja, jb) = join_modalities(&a, &b).unwrap();
        assert_eq!(ja.sample_ids, vec!["s1", "s3"]);
        assert_eq!(jb.sample_ids, vec!["s1", "s3"]);
        assert_eq!(jb.x.data(), &[10.0, 30.0]);
        assert_eq!(ja.y, jb.y);
    }
}
