//! Report emission: the CSV table and an SVG line chart, one polyline per
//! (dt, channel) over example count.

use std::io::Write;
use std::path::Path;

use super::{EvalError, Report, ReportRow};

/// 12 significant digits: reread values agree to well under 1e-9 relative.
fn fmt_val(v: f64) -> String {
    format!("{v:.11e}")
}

pub fn write_csv(report: &Report, path: &Path) -> Result<(), EvalError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "dt,example_count,channel,rmse,rmse_noise,n_queries,flags")?;
    for r in &report.rows {
        writeln!(
            f,
            "{},{},{},{},{},{},{}",
            r.dt,
            r.example_count,
            r.channel,
            r.rmse.map(fmt_val).unwrap_or_default(),
            r.rmse_noise.map(fmt_val).unwrap_or_default(),
            r.n_queries,
            r.flags.join(";"),
        )?;
    }
    f.flush()?;
    Ok(())
}

/// Parse rows back from the CSV schema above.
pub fn read_report_rows(path: &Path) -> Result<Vec<ReportRow>, EvalError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != "dt,example_count,channel,rmse,rmse_noise,n_queries,flags" {
        return Err(EvalError::Spec(format!("unexpected CSV header: {header}")));
    }
    let mut rows = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.splitn(7, ',').collect();
        if parts.len() != 7 {
            return Err(EvalError::Spec(format!(
                "line {}: expected 7 fields, got {}",
                ln + 2,
                parts.len()
            )));
        }
        let parse_opt = |s: &str| -> Result<Option<f64>, EvalError> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse::<f64>()
                    .map(Some)
                    .map_err(|e| EvalError::Spec(format!("line {}: {e}", ln + 2)))
            }
        };
        rows.push(ReportRow {
            dt: parts[0]
                .parse()
                .map_err(|e| EvalError::Spec(format!("line {}: {e}", ln + 2)))?,
            example_count: parts[1]
                .parse()
                .map_err(|e| EvalError::Spec(format!("line {}: {e}", ln + 2)))?,
            channel: parts[2].to_string(),
            rmse: parse_opt(parts[3])?,
            rmse_noise: parse_opt(parts[4])?,
            n_queries: parts[5]
                .parse()
                .map_err(|e| EvalError::Spec(format!("line {}: {e}", ln + 2)))?,
            flags: if parts[6].is_empty() {
                Vec::new()
            } else {
                parts[6].split(';').map(str::to_string).collect()
            },
        });
    }
    Ok(rows)
}

const SVG_W: f64 = 720.0;
const SVG_H: f64 = 480.0;
const MARGIN: f64 = 60.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

/// Line chart of RMSE over example count, one polyline per (dt, channel).
pub fn write_svg(report: &Report, path: &Path) -> Result<(), EvalError> {
    let rows: Vec<&ReportRow> = report.rows.iter().filter(|r| r.rmse.is_some()).collect();
    let mut series: Vec<(usize, String, Vec<(usize, f64)>)> = Vec::new();
    for r in &rows {
        let key = (r.dt, r.channel.clone());
        match series
            .iter_mut()
            .find(|(dt, ch, _)| *dt == key.0 && *ch == key.1)
        {
            Some((_, _, pts)) => pts.push((r.example_count, r.rmse.unwrap())),
            None => series.push((key.0, key.1, vec![(r.example_count, r.rmse.unwrap())])),
        }
    }
    let max_count = rows.iter().map(|r| r.example_count).max().unwrap_or(1).max(1);
    let max_rmse = rows
        .iter()
        .filter_map(|r| r.rmse)
        .fold(0.0f64, f64::max)
        .max(1e-12);

    let x = |count: usize| MARGIN + (SVG_W - 2.0 * MARGIN) * count as f64 / max_count as f64;
    let y = |v: f64| SVG_H - MARGIN - (SVG_H - 2.0 * MARGIN) * v / (1.05 * max_rmse);

    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_W}\" height=\"{SVG_H}\" viewBox=\"0 0 {SVG_W} {SVG_H}\">\n"
    ));
    out.push_str(&format!(
        "<rect x=\"0\" y=\"0\" width=\"{SVG_W}\" height=\"{SVG_H}\" fill=\"white\"/>\n"
    ));
    // axes
    out.push_str(&format!(
        "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n",
        m = MARGIN,
        b = SVG_H - MARGIN,
        r = SVG_W - MARGIN
    ));
    out.push_str(&format!(
        "<line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n",
        m = MARGIN,
        t = MARGIN,
        b = SVG_H - MARGIN
    ));
    out.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"12\">examples</text>\n",
        SVG_W / 2.0 - 30.0,
        SVG_H - MARGIN / 3.0
    ));
    out.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"12\" transform=\"rotate(-90 14 {})\">rmse</text>\n",
        14.0,
        SVG_H / 2.0,
        SVG_H / 2.0
    ));
    for (si, (dt, channel, pts)) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let points: Vec<String> = pts
            .iter()
            .map(|&(c, v)| format!("{:.2},{:.2}", x(c), y(v)))
            .collect();
        out.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            points.join(" ")
        ));
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" fill=\"{color}\">dt={dt} {channel}</text>\n",
            SVG_W - MARGIN + 4.0,
            MARGIN + 14.0 * si as f64
        ));
    }
    out.push_str("</svg>\n");
    std::fs::write(path, out)?;
    Ok(())
}

/// CSV always; SVG when a path is given.
pub fn emit_report(
    report: &Report,
    csv_path: &Path,
    svg_path: Option<&Path>,
) -> Result<(), EvalError> {
    if report.rows.is_empty() {
        return Err(EvalError::Spec("report has no rows".into()));
    }
    write_csv(report, csv_path)?;
    if let Some(svg) = svg_path {
        write_svg(report, svg)?;
    }
    Ok(())
}

/// FNV-1a hash of a file's bytes, for artifact provenance.
pub fn file_hash(path: &Path) -> std::io::Result<u64> {
    Ok(crate::rng::fnv1a64(&std::fs::read(path)?))
}
