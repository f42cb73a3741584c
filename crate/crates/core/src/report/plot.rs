use std::path::Path;
use std::sync::OnceLock;

use plotters::coord::Shift;
use plotters::prelude::*;

use super::embed::EmbeddingSet;
use crate::data::{SequenceLabel, N_CLASSES};
use crate::error::{Error, Result};

/// Class colors in label index order (T1, T2, FLAIR, TOF, TraceW, DWI,
/// ADC, GRE, Perfusion).
pub const PALETTE: [(u8, u8, u8); N_CLASSES] = [
    (31, 119, 180),
    (255, 127, 14),
    (44, 160, 44),
    (214, 39, 40),
    (148, 103, 189),
    (140, 86, 75),
    (227, 119, 194),
    (127, 127, 127),
    (23, 190, 207),
];

const FONT_CANDIDATES: [&str; 3] = [
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
];

/// Registers a system sans-serif font once. Without one, plots are drawn
/// without text.
fn font_ready() -> bool {
    static READY: OnceLock<bool> = OnceLock::new();
    *READY.get_or_init(|| {
        for p in FONT_CANDIDATES {
            if let Ok(bytes) = std::fs::read(p) {
                let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                if plotters::style::register_font("sans-serif", FontStyle::Normal, bytes).is_ok() {
                    return true;
                }
            }
        }
        false
    })
}

fn draw_err<E: std::error::Error + Send + Sync>(e: DrawingAreaErrorKind<E>) -> Error {
    Error::format("plot", e.to_string())
}

fn draw<DB: DrawingBackend>(root: DrawingArea<DB, Shift>, set: &EmbeddingSet, coords: &ndarray::Array2<f64>, title: &str) -> Result<()>
where
    DB::ErrorType: 'static,
{
    let text = font_ready();
    root.fill(&WHITE).map_err(draw_err)?;
    let (plot_area, legend_area) = root.split_horizontally(root.dim_in_pixel().0.saturating_sub(140));
    let span = |c: usize| {
        let col = coords.column(c);
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let pad = ((hi - lo) * 0.05).max(1e-6);
        (lo - pad)..(hi + pad)
    };
    let mut builder = ChartBuilder::on(&plot_area);
    builder.margin(10);
    if text {
        builder.caption(title, ("sans-serif", 20)).x_label_area_size(30).y_label_area_size(40);
    }
    let mut chart = builder.build_cartesian_2d(span(0), span(1)).map_err(draw_err)?;
    if text {
        chart.configure_mesh().disable_mesh().draw().map_err(draw_err)?;
    }
    for (class, &(r, g, b)) in PALETTE.iter().enumerate() {
        let color = RGBColor(r, g, b);
        let points = set
            .labels
            .iter()
            .zip(coords.rows())
            .filter(|(l, _)| l.index() == class)
            .map(|(_, row)| Circle::new((row[0], row[1]), 3, color.mix(0.8).filled()));
        chart.draw_series(points).map_err(draw_err)?;
    }
    for (class, &(r, g, b)) in PALETTE.iter().enumerate() {
        let y = 40 + class as i32 * 22;
        legend_area.draw(&Rectangle::new([(10, y), (24, y + 14)], RGBColor(r, g, b).filled())).map_err(draw_err)?;
        if text {
            let name = SequenceLabel::ALL[class].name();
            legend_area.draw(&Text::new(name, (30, y), ("sans-serif", 14).into_font())).map_err(draw_err)?;
        }
    }
    root.present().map_err(draw_err)?;
    Ok(())
}

/// Writes `<stem>.png` and `<stem>.svg` scatter plots of the 2D coordinates,
/// colored by class with a fixed legend. Returns the two paths.
pub fn render_plot(set: &EmbeddingSet, stem: &Path, title: &str) -> Result<(std::path::PathBuf, std::path::PathBuf)> {
    let coords = set.coords2d.as_ref().ok_or_else(|| Error::validation("embeddings", "project to 2D before plotting"))?;
    if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let png = stem.with_extension("png");
    let svg = stem.with_extension("svg");
    draw(BitMapBackend::new(&png, (800, 600)).into_drawing_area(), set, coords, title)?;
    draw(SVGBackend::new(&svg, (800, 600)).into_drawing_area(), set, coords, title)?;
    Ok((png, svg))
}
