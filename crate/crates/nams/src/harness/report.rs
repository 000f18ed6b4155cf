//! Report emission: versioned CSV tables and SVG bar charts regenerable
//! byte-for-byte from their CSV source.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::HarnessError;

pub const CSV_FORMAT_VERSION: u32 = 1;
pub const SVG_FORMAT_VERSION: u32 = 1;

/// A plain comma-separated table. Fields must not contain commas or
/// newlines; the writer rejects them rather than quoting.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        assert_eq!(row.len(), self.header.len(), "row arity mismatch");
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    pub fn to_string(&self) -> String {
        let mut out = format!("# csv_format_version={CSV_FORMAT_VERSION}\n");
        out.push_str(&self.header.join(","));
        out.push('\n');
        for row in &self.rows {
            for field in row {
                assert!(
                    !field.contains(',') && !field.contains('\n'),
                    "csv field may not contain commas or newlines: {field:?}"
                );
            }
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

pub fn write_csv(path: &Path, table: &CsvTable) -> Result<(), HarnessError> {
    std::fs::write(path, table.to_string()).map_err(|e| HarnessError::Io(e.to_string()))
}

pub fn read_csv(path: &Path) -> Result<CsvTable, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io(e.to_string()))?;
    let mut lines = text
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| HarnessError::Io("empty csv".into()))?
        .split(',')
        .map(|s| s.to_string())
        .collect();
    let rows = lines
        .map(|l| l.split(',').map(|s| s.to_string()).collect())
        .collect();
    Ok(CsvTable { header, rows })
}

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.6}")
}

/// Grouped bar chart from a CSV table: one bar per distinct combination of
/// `label_cols`, heights from the mean of `value_col` over matching rows.
/// The chart is a pure function of the CSV text, so regenerating from the
/// written file reproduces identical bytes. The source CSV is embedded as a
/// trailing XML comment.
pub fn csv_to_svg_bars(
    table: &CsvTable,
    label_cols: &[&str],
    value_col: &str,
    title: &str,
) -> Result<String, HarnessError> {
    let vcol = table
        .column(value_col)
        .ok_or_else(|| HarnessError::Io(format!("csv has no column {value_col}")))?;
    let lcols: Vec<usize> = label_cols
        .iter()
        .map(|c| {
            table
                .column(c)
                .ok_or_else(|| HarnessError::Io(format!("csv has no column {c}")))
        })
        .collect::<Result<_, _>>()?;

    let mut groups: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for row in &table.rows {
        let label = lcols
            .iter()
            .map(|&i| row[i].as_str())
            .collect::<Vec<_>>()
            .join("/");
        let value: f64 = row[vcol]
            .parse()
            .map_err(|_| HarnessError::Io(format!("non-numeric value {:?}", row[vcol])))?;
        let e = groups.entry(label).or_insert((0.0, 0));
        e.0 += value;
        e.1 += 1;
    }
    let bars: Vec<(String, f64)> = groups
        .into_iter()
        .map(|(label, (sum, n))| (label, sum / n as f64))
        .collect();

    let bar_w = 34.0;
    let gap = 14.0;
    let left = 60.0;
    let bottom = 250.0;
    let chart_h = 200.0;
    let width = left + bars.len() as f64 * (bar_w + gap) + 30.0;
    let height = bottom + 110.0;
    let max_v = bars.iter().map(|b| b.1).fold(1.0f64, f64::max);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" font-family=\"monospace\" font-size=\"11\">"
    );
    let _ = writeln!(svg, "<title>{title}</title>");
    let _ = writeln!(
        svg,
        "<text x=\"{left:.0}\" y=\"20\" font-size=\"14\">{title}</text>"
    );
    for tick in 0..=4 {
        let frac = tick as f64 / 4.0;
        let y = bottom - frac * chart_h;
        let v = frac * max_v;
        let _ = writeln!(
            svg,
            "<line x1=\"{left:.1}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"#cccccc\"/>",
            width - 20.0
        );
        let _ = writeln!(
            svg,
            "<text x=\"8\" y=\"{:.1}\">{:.2}</text>",
            y + 4.0,
            v
        );
    }
    for (i, (label, value)) in bars.iter().enumerate() {
        let x = left + i as f64 * (bar_w + gap);
        let h = chart_h * value / max_v;
        let y = bottom - h;
        let _ = writeln!(
            svg,
            "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{bar_w:.1}\" height=\"{h:.1}\" fill=\"#4878a8\"/>"
        );
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
            x + bar_w / 2.0,
            y - 4.0,
            fmt_f64(*value)
        );
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" transform=\"rotate(45 {:.1} {:.1})\">{}</text>",
            x + bar_w / 2.0,
            bottom + 14.0,
            x + bar_w / 2.0,
            bottom + 14.0,
            label
        );
    }
    let _ = writeln!(svg, "<!-- svg_format_version={SVG_FORMAT_VERSION}");
    let _ = writeln!(svg, "source-csv:");
    svg.push_str(&table.to_string());
    let _ = writeln!(svg, "-->");
    svg.push_str("</svg>\n");
    Ok(svg)
}
