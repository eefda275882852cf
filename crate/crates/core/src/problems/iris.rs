use super::ProblemError;
use std::path::Path;

pub const CLASS_NAMES: [&str; 3] = ["setosa", "versicolor", "virginica"];
const N_FEATURES: usize = 4;

/// Standardized feature rows with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Vec<[f64; N_FEATURES]>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_counts(&self) -> [usize; 3] {
        let mut counts = [0; 3];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

pub fn load_iris(path: impl AsRef<Path>) -> Result<Dataset, ProblemError> {
    let text = std::fs::read_to_string(path.as_ref())
        .map_err(|e| ProblemError::Io(format!("{}: {e}", path.as_ref().display())))?;
    parse_iris(&text)
}

/// Parses `sepal_length,sepal_width,petal_length,petal_width,label` rows and
/// z-scores each feature column (population standard deviation).
///
/// Rows and columns in errors are 1-based; a header line is optional.
pub fn parse_iris(text: &str) -> Result<Dataset, ProblemError> {
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let row = idx + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if idx == 0 && is_header(&cells) {
            continue;
        }
        if cells.len() != N_FEATURES + 1 {
            return Err(ProblemError::WrongShape {
                row,
                message: format!("expected {} columns, found {}", N_FEATURES + 1, cells.len()),
            });
        }
        let mut feat = [0.0; N_FEATURES];
        for (col, cell) in cells[..N_FEATURES].iter().enumerate() {
            feat[col] = cell.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                ProblemError::ParseError { row, col: col + 1, message: format!("non-numeric feature {cell:?}") }
            })?;
        }
        let label = CLASS_NAMES
            .iter()
            .position(|name| {
                let cell = cells[N_FEATURES].trim_start_matches("Iris-");
                name.eq_ignore_ascii_case(cell)
            })
            .ok_or_else(|| ProblemError::WrongShape {
                row,
                message: format!("unknown label {:?}", cells[N_FEATURES]),
            })?;
        features.push(feat);
        labels.push(label);
    }
    if features.is_empty() {
        return Err(ProblemError::ParseError { row: 0, col: 0, message: "no data rows".into() });
    }
    standardize(&mut features);
    Ok(Dataset { features, labels })
}

fn is_header(cells: &[&str]) -> bool {
    cells.iter().take(N_FEATURES).all(|c| c.parse::<f64>().is_err())
}

fn standardize(rows: &mut [[f64; N_FEATURES]]) {
    let n = rows.len() as f64;
    for col in 0..N_FEATURES {
        let mean = rows.iter().map(|r| r[col]).sum::<f64>() / n;
        let var = rows.iter().map(|r| (r[col] - mean).powi(2)).sum::<f64>() / n;
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        for r in rows.iter_mut() {
            r[col] = (r[col] - mean) / sd;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iris_path() -> std::path::PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/iris.csv")
    }

    #[test]
    fn bundled_file_has_three_balanced_classes() {
        let d = load_iris(iris_path()).unwrap();
        assert_eq!(d.len(), 150);
        assert_eq!(d.class_counts(), [50, 50, 50]);
        for col in 0..4 {
            let mean: f64 = d.features.iter().map(|r| r[col]).sum::<f64>() / 150.0;
            let var: f64 = d.features.iter().map(|r| r[col] * r[col]).sum::<f64>() / 150.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_input_is_a_parse_error() {
        assert!(matches!(parse_iris(""), Err(ProblemError::ParseError { .. })));
    }

    #[test]
    fn bad_cell_is_located() {
        let text = "5.1,3.5,1.4,0.2,setosa\n4.9,abc,1.4,0.2,setosa\n";
        match parse_iris(text) {
            Err(ProblemError::ParseError { row, col, .. }) => assert_eq!((row, col), (2, 2)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn header_optional_and_labels_case_insensitive() {
        let with = "sepal_length,sepal_width,petal_length,petal_width,label\n1,2,3,4,SETOSA\n2,3,4,5,Virginica\n";
        let without = "1,2,3,4,setosa\n2,3,4,5,virginica\n";
        assert_eq!(parse_iris(with).unwrap(), parse_iris(without).unwrap());
    }

    #[test]
    fn shape_errors() {
        assert!(matches!(parse_iris("1,2,3,setosa\n"), Err(ProblemError::WrongShape { .. })));
        assert!(matches!(parse_iris("1,2,3,4,rose\n"), Err(ProblemError::WrongShape { .. })));
    }
}
