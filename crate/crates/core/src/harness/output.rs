//! Self-describing result tables: CSV with the full config echoed in header
//! comments, plus a JSON summary per experiment.

use serde::Serialize;

use crate::error::Result;

/// One table cell; floats print with the shortest round-trip representation.
#[derive(Debug, Clone, Serialize)]
#[serde(untagged)]
pub enum Cell {
    Int(i64),
    Float(f64),
    Text(String),
}

impl std::fmt::Display for Cell {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Cell::Int(v) => write!(f, "{v}"),
            Cell::Float(v) => write!(f, "{v}"),
            Cell::Text(v) => write!(f, "{v}"),
        }
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl From<i64> for Cell {
    fn from(v: i64) -> Self {
        Cell::Int(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

/// Rows of an experiment plus the config echo that makes the file
/// self-describing.
#[derive(Debug, Clone)]
pub struct ResultTable {
    pub columns: Vec<&'static str>,
    pub rows: Vec<Vec<Cell>>,
    /// Full TOML echo of the generating config.
    pub config_echo: String,
}

impl ResultTable {
    pub fn new(columns: Vec<&'static str>, config_echo: String) -> Self {
        ResultTable {
            columns,
            rows: Vec::new(),
            config_echo,
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    /// Deterministic CSV: version line, `#`-prefixed config echo, header, rows.
    pub fn write_csv(&self, mut out: impl std::io::Write) -> Result<()> {
        writeln!(out, "# generated by mfsde {}", env!("CARGO_PKG_VERSION"))?;
        for line in self.config_echo.lines() {
            writeln!(out, "# {line}")?;
        }
        writeln!(out, "{}", self.columns.join(","))?;
        for row in &self.rows {
            let mut first = true;
            for cell in row {
                if !first {
                    write!(out, ",")?;
                }
                write!(out, "{cell}")?;
                first = false;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("write to memory");
        String::from_utf8(buf).expect("CSV is UTF-8")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_is_deterministic() {
        let mut t = ResultTable::new(vec!["a", "b"], "x = 1\ny = 2".into());
        t.push(vec![Cell::Int(1), Cell::Float(0.5)]);
        t.push(vec![Cell::Text("n".into()), Cell::Float(1.0 / 3.0)]);
        let one = t.to_csv_string();
        let two = t.to_csv_string();
        assert_eq!(one, two);
        assert!(one.contains("# x = 1\n# y = 2\n"));
        assert!(one.contains("a,b\n1,0.5\n"));
        assert!(one.contains("0.3333333333333333"));
    }
}
