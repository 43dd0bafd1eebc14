//! Bar chart of the NLI label distribution as a PNG.

use std::collections::BTreeMap;
use std::path::Path;

use image::{Rgb, RgbImage};

use discourse_core::lm::NliLabel;

const WIDTH: u32 = 360;
const HEIGHT: u32 = 240;
const MARGIN: u32 = 20;

fn color(label: NliLabel) -> Rgb<u8> {
    match label {
        NliLabel::Entailment => Rgb([46, 139, 87]),
        NliLabel::Neutral => Rgb([150, 150, 150]),
        NliLabel::Contradiction => Rgb([200, 60, 60]),
    }
}

/// One bar per label, height proportional to its percentage, in
/// entailment / neutral / contradiction order.
pub fn render_nli_bars(pct: &BTreeMap<NliLabel, f64>) -> RgbImage {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let plot_h = HEIGHT - 2 * MARGIN;
    let slot = (WIDTH - 2 * MARGIN) / NliLabel::ALL.len() as u32;
    for (i, label) in NliLabel::ALL.iter().enumerate() {
        let p = pct.get(label).copied().unwrap_or(0.0).clamp(0.0, 100.0);
        let h = (p / 100.0 * plot_h as f64).round() as u32;
        let x0 = MARGIN + i as u32 * slot + slot / 6;
        let x1 = MARGIN + (i as u32 + 1) * slot - slot / 6;
        for x in x0..x1 {
            for y in (HEIGHT - MARGIN - h)..(HEIGHT - MARGIN) {
                img.put_pixel(x, y, color(*label));
            }
        }
    }
    for x in MARGIN..WIDTH - MARGIN {
        img.put_pixel(x, HEIGHT - MARGIN, Rgb([0, 0, 0]));
    }
    img
}

pub fn nli_bar_chart(pct: &BTreeMap<NliLabel, f64>, path: &Path) -> image::ImageResult<()> {
    render_nli_bars(pct).save_with_format(path, image::ImageFormat::Png)
}
