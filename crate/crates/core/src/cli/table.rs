//! CSV output. Reals use Rust's shortest round-trip decimal rendering
//! (`{}` on `f64`), lines end in LF, and there is no quoting: no cell
//! ever contains a comma.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;

use crate::error::{ensure, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    Int(u64),
    Real(f64),
    Text(String),
    Empty,
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cell::Int(v) => write!(f, "{v}"),
            Cell::Real(v) => write!(f, "{v}"),
            Cell::Text(s) => f.write_str(s),
            Cell::Empty => Ok(()),
        }
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as u64)
    }
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::Int(v)
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Real(v)
    }
}

impl From<Option<f64>> for Cell {
    fn from(v: Option<f64>) -> Self {
        v.map_or(Cell::Empty, Cell::Real)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(header: &[&'static str]) -> Self {
        Self {
            header: header.to_vec(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) -> Result<()> {
        ensure!(
            row.len() == self.header.len(),
            Argument,
            "row of {} cells for {} columns",
            row.len(),
            self.header.len()
        );
        for cell in &row {
            if let Cell::Text(s) = cell {
                ensure!(
                    !s.contains([',', '\n', '\r', '"']),
                    Argument,
                    "cell {s:?} would need quoting"
                );
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for row in &self.rows {
            for (i, cell) in row.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write!(out, "{cell}").expect("writing to a String");
            }
            out.push('\n');
        }
        out
    }
}

/// Writes `table` to `path`.
pub fn emit_csv(table: &Table, path: &Path) -> Result<()> {
    fs::write(path, table.render()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}
