//! SVG heatmaps and tables rebuilt from evaluator CSVs.

use std::fmt::Write as _;

use thiserror::Error;

use crate::embodiment::EmbodimentVector;
use crate::eval::{CellResult, ReturnMatrix};

#[derive(Debug, Error, PartialEq)]
pub enum ReportError {
    #[error("line {line}: {msg}")]
    Csv { line: usize, msg: String },
    #[error("no rows")]
    Empty,
}

const HEADER: &str = "torso,front,hind,method,noise,mean,std,zero_shot";

/// Parses the long-form matrix CSV back into one matrix per (method, noise),
/// in order of first appearance. Raw per-rollout returns are not stored in the
/// CSV and come back empty.
pub fn matrices_from_csv(text: &str) -> Result<Vec<ReturnMatrix>, ReportError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == HEADER => {}
        _ => return Err(ReportError::Csv { line: 1, msg: format!("expected header '{HEADER}'") }),
    }
    let mut out: Vec<ReturnMatrix> = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| ReportError::Csv { line: i + 1, msg };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(err(format!("expected 8 fields, got {}", f.len())));
        }
        let num = |s: &str| s.trim().parse::<f64>().map_err(|e| err(format!("'{s}': {e}")));
        let e = EmbodimentVector::new(num(f[0])?, num(f[1])?, num(f[2])?);
        let noise = num(f[4])?;
        let zero_shot = f[7].trim().parse::<bool>().map_err(|e| err(e.to_string()))?;
        let cell = CellResult { embodiment: e, mean: num(f[5])?, std: num(f[6])?, returns: Vec::new(), failures: 0, zero_shot };
        match out.iter_mut().find(|m| m.method == f[3] && m.noise_multiplier == noise) {
            Some(m) => m.cells.push(cell),
            None => out.push(ReturnMatrix { method: f[3].to_string(), noise_multiplier: noise, cells: vec![cell] }),
        }
    }
    if out.is_empty() {
        return Err(ReportError::Empty);
    }
    Ok(out)
}

const STOPS: [(u8, u8, u8); 5] = [(68, 1, 84), (59, 82, 139), (33, 145, 140), (94, 201, 98), (253, 231, 37)];

/// Viridis-like colour for `t` in `[0, 1]`.
pub fn colour(t: f64) -> String {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let x = t * (STOPS.len() - 1) as f64;
    let i = (x.floor() as usize).min(STOPS.len() - 2);
    let f = x - i as f64;
    let mix = |a: u8, b: u8| (a as f64 + f * (b as f64 - a as f64)).round() as u8;
    let (a, b) = (STOPS[i], STOPS[i + 1]);
    format!("#{:02x}{:02x}{:02x}", mix(a.0, b.0), mix(a.1, b.1), mix(a.2, b.2))
}

fn sorted_unique(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    v
}

/// One heatmap per torso value: rows are front lengths, columns hind
/// lengths. Training cells have a solid outline, unseen cells a dashed one.
/// `range` fixes the colour scale; by default it spans the matrix.
pub fn torso_heatmaps(matrix: &ReturnMatrix, range: Option<(f64, f64)>) -> Vec<(f64, String)> {
    let means: Vec<f64> = matrix.cells.iter().map(|c| c.mean).collect();
    let (lo, hi) = range.unwrap_or_else(|| {
        (means.iter().copied().fold(f64::INFINITY, f64::min), means.iter().copied().fold(f64::NEG_INFINITY, f64::max))
    });
    let span = if hi > lo { hi - lo } else { 1.0 };
    let torsos = sorted_unique(matrix.cells.iter().map(|c| c.embodiment.torso).collect());
    torsos
        .into_iter()
        .map(|t| {
            let slice: Vec<&CellResult> = matrix.cells.iter().filter(|c| (c.embodiment.torso - t).abs() < 1e-12).collect();
            let fronts = sorted_unique(slice.iter().map(|c| c.embodiment.front).collect());
            let hinds = sorted_unique(slice.iter().map(|c| c.embodiment.hind).collect());
            (t, slice_svg(&matrix.method, matrix.noise_multiplier, t, &slice, &fronts, &hinds, lo, span))
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn slice_svg(method: &str, noise: f64, torso: f64, cells: &[&CellResult], fronts: &[f64], hinds: &[f64], lo: f64, span: f64) -> String {
    const CELL: usize = 70;
    const LEFT: usize = 70;
    const TOP: usize = 50;
    let w = LEFT + CELL * hinds.len() + 20;
    let h = TOP + CELL * fronts.len() + 50;
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#).unwrap();
    writeln!(s, r#"<text x="{}" y="20" font-size="14">{method} (noise x{noise}), torso {torso:.3} m</text>"#, LEFT).unwrap();
    for (r, &f) in fronts.iter().enumerate().rev() {
        // Largest front length on top.
        let y = TOP + CELL * (fronts.len() - 1 - r);
        writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{f:.3}</text>"#, LEFT - 6, y + CELL / 2 + 4).unwrap();
        for (c, &hd) in hinds.iter().enumerate() {
            let x = LEFT + CELL * c;
            let Some(cell) = cells.iter().find(|k| (k.embodiment.front - f).abs() < 1e-12 && (k.embodiment.hind - hd).abs() < 1e-12)
            else {
                continue;
            };
            let t = (cell.mean - lo) / span;
            let dash = if cell.zero_shot { r#" stroke-dasharray="4 3""# } else { "" };
            writeln!(s, r#"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="{}" stroke="black"{dash}/>"#, colour(t)).unwrap();
            let ink = if t > 0.6 { "black" } else { "white" };
            writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" fill="{ink}">{:.1}</text>"#, x + CELL / 2, y + CELL / 2 + 4, cell.mean)
                .unwrap();
        }
    }
    let base = TOP + CELL * fronts.len();
    for (c, &hd) in hinds.iter().enumerate() {
        writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{hd:.3}</text>"#, LEFT + CELL * c + CELL / 2, base + 16).unwrap();
    }
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">hind (m)</text>"#, LEFT + CELL * hinds.len() / 2, base + 36).unwrap();
    writeln!(s, r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">front (m)</text>"#, TOP + CELL * fronts.len() / 2, TOP + CELL * fronts.len() / 2)
        .unwrap();
    s.push_str("</svg>\n");
    s
}

/// Markdown rendering of a method-table CSV.
pub fn table_markdown(csv: &str) -> String {
    let mut out = String::new();
    for (i, line) in csv.lines().enumerate() {
        let cols: Vec<&str> = line.split(',').collect();
        writeln!(out, "| {} |", cols.join(" | ")).unwrap();
        if i == 0 {
            writeln!(out, "|{}", "---|".repeat(cols.len())).unwrap();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embodiment::{evaluation_grid, training_grid, is_in};

    fn matrix() -> ReturnMatrix {
        let train = training_grid();
        let cells = evaluation_grid()
            .into_iter()
            .enumerate()
            .map(|(i, e)| CellResult { embodiment: e, mean: i as f64, std: 0.5, returns: vec![], failures: 0, zero_shot: !is_in(&train, &e) })
            .collect();
        ReturnMatrix { method: "eat".into(), noise_multiplier: 1.0, cells }
    }

    #[test]
    fn five_slices_for_the_evaluation_grid() {
        let maps = torso_heatmaps(&matrix(), None);
        assert_eq!(maps.len(), 5);
        for (_, svg) in &maps {
            assert_eq!(svg.matches("<rect").count(), 16);
            assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        }
    }

    #[test]
    fn csv_round_trip() {
        let m = matrix();
        let back = matrices_from_csv(&m.to_csv()).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].cells.len(), 80);
        assert_eq!(back[0].cells[7].embodiment, m.cells[7].embodiment);
        assert_eq!(back[0].cells[7].zero_shot, m.cells[7].zero_shot);
        assert!(matrices_from_csv("a,b\n").is_err());
    }

    #[test]
    fn colour_ends() {
        assert_eq!(colour(0.0), "#440154");
        assert_eq!(colour(1.0), "#fde725");
        assert_eq!(colour(f64::NAN), "#440154");
    }
}
