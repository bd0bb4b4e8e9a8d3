use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::pitch::PitchContour;

pub const FIGURE_CSV_HEADER: [&str; 4] = ["series", "frame", "f0_hz", "voiced"];

const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(214, 39, 40),
    RGBColor(44, 160, 44),
    RGBColor(148, 103, 189),
    RGBColor(255, 127, 14),
    RGBColor(23, 190, 207),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FigureFiles {
    pub svg: PathBuf,
    pub csv: PathBuf,
}

pub fn write_figure_csv<W: Write>(series: &[(String, PitchContour)], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(FIGURE_CSV_HEADER)?;
    for (name, c) in series {
        for (t, (&f, &v)) in c.f0.iter().zip(&c.voiced).enumerate() {
            w.write_record([name.clone(), t.to_string(), f.to_string(), u8::from(v).to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Parses a figure CSV back into named contours, in first-appearance order.
pub fn read_figure_csv<R: Read>(reader: R, hop_length: usize, sample_rate: u32, origin: &Path) -> Result<Vec<(String, PitchContour)>> {
    let bad = |reason: String| Error::Parse { path: origin.to_path_buf(), reason };
    let mut r = csv::Reader::from_reader(reader);
    if r.headers()?.iter().collect::<Vec<_>>() != FIGURE_CSV_HEADER {
        return Err(bad(format!("expected header {}", FIGURE_CSV_HEADER.join(","))));
    }
    let mut out: Vec<(String, Vec<f64>, Vec<bool>)> = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let row = i + 2;
        let name = rec.get(0).unwrap_or_default().to_string();
        let frame: usize = rec.get(1).and_then(|v| v.parse().ok()).ok_or_else(|| bad(format!("row {row}: bad frame")))?;
        let f: f64 = rec.get(2).and_then(|v| v.parse().ok()).ok_or_else(|| bad(format!("row {row}: bad f0_hz")))?;
        let v = match rec.get(3) {
            Some("0") => false,
            Some("1") => true,
            _ => return Err(bad(format!("row {row}: voiced must be 0 or 1"))),
        };
        let idx = match out.iter().position(|s| s.0 == name) {
            Some(idx) => idx,
            None => {
                out.push((name, Vec::new(), Vec::new()));
                out.len() - 1
            }
        };
        let entry = &mut out[idx];
        if frame != entry.1.len() {
            return Err(bad(format!("row {row}: frame {frame} out of order")));
        }
        entry.1.push(f);
        entry.2.push(v);
    }
    out.into_iter()
        .map(|(name, f0, voiced)| Ok((name, PitchContour::new(f0, voiced, hop_length, sample_rate).map_err(|e| bad(e.to_string()))?)))
        .collect()
}

/// Overlays the voiced segments of each contour (Hz over seconds) as an SVG and writes the
/// plotted values to a CSV next to it (same stem, `.csv`).
pub fn emit_pitch_figure(series: &[(String, PitchContour)], out_path: impl AsRef<Path>) -> Result<FigureFiles> {
    if series.is_empty() {
        return Err(Error::EmptyInput("figure series"));
    }
    let svg = out_path.as_ref().with_extension("svg");
    let csv_path = out_path.as_ref().with_extension("csv");
    if let Some(parent) = svg.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    write_figure_csv(series, std::fs::File::create(&csv_path)?)?;

    let secs = |c: &PitchContour, t: usize| t as f64 * c.hop_length as f64 / c.sample_rate as f64;
    let x_max = series.iter().map(|(_, c)| secs(c, c.len())).fold(0.01, f64::max);
    let y_max = series.iter().flat_map(|(_, c)| c.voiced_values()).fold(100.0, f64::max) * 1.1;
    let plot_err = |e: String| Error::Plot(e);
    {
        let root = SVGBackend::new(&svg, (900, 420)).into_drawing_area();
        root.fill(&WHITE).map_err(|e| plot_err(e.to_string()))?;
        let mut chart = ChartBuilder::on(&root)
            .margin(12)
            .x_label_area_size(36)
            .y_label_area_size(48)
            .build_cartesian_2d(0.0..x_max, 0.0..y_max)
            .map_err(|e| plot_err(e.to_string()))?;
        chart
            .configure_mesh()
            .x_desc("time (s)")
            .y_desc("F0 (Hz)")
            .draw()
            .map_err(|e| plot_err(e.to_string()))?;
        for (k, (name, c)) in series.iter().enumerate() {
            let color = PALETTE[k % PALETTE.len()];
            let mut segment: Vec<(f64, f64)> = Vec::new();
            let mut segments = Vec::new();
            for t in 0..c.len() {
                if c.voiced[t] {
                    segment.push((secs(c, t), c.f0[t]));
                } else if !segment.is_empty() {
                    segments.push(std::mem::take(&mut segment));
                }
            }
            if !segment.is_empty() {
                segments.push(segment);
            }
            for (i, seg) in segments.into_iter().enumerate() {
                let drawn = chart.draw_series(LineSeries::new(seg, color.stroke_width(2))).map_err(|e| plot_err(e.to_string()))?;
                if i == 0 {
                    drawn.label(name.as_str()).legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
                }
            }
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(|e| plot_err(e.to_string()))?;
        root.present().map_err(|e| plot_err(e.to_string()))?;
    }
    Ok(FigureFiles { svg, csv: csv_path })
}
