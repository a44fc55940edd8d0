use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io_util::write_file;
use crate::tensor::Tensor;

/// Channel-summed relevance, positive part, scaled so the maximum maps to 255.
pub fn heatmap_pixels(relevance: &Tensor) -> Result<(usize, usize, Vec<u8>)> {
    let summed = relevance.channel_sum()?;
    let (h, w) = (summed.shape()[0], summed.shape()[1]);
    let max = summed.data().iter().cloned().fold(0.0f32, f32::max);
    let pixels = summed
        .data()
        .iter()
        .map(|&v| {
            if max > 0.0 {
                (v.max(0.0) / max * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        })
        .collect();
    Ok((h, w, pixels))
}

/// Channel-summed raw relevance, one image row per line.
pub fn write_relevance_csv(relevance: &Tensor, path: &Path) -> Result<()> {
    let summed = relevance.channel_sum()?;
    let w = summed.shape()[1];
    let mut out = String::new();
    for row in summed.data().chunks(w) {
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            write!(out, "{v}").unwrap();
        }
        out.push('\n');
    }
    write_file(path, out.as_bytes())
}

/// Writes an 8-bit binary PGM heatmap to `pgm` and the raw relevance CSV to `csv`.
pub fn render_heatmap(relevance: &Tensor, pgm: &Path, csv: &Path) -> Result<()> {
    if relevance.rank() != 3 {
        return Err(Error::dim(format!("heatmap needs [C,H,W], got {:?}", relevance.shape())));
    }
    let (h, w, pixels) = heatmap_pixels(relevance)?;
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend_from_slice(&pixels);
    write_file(pgm, &bytes)?;
    write_relevance_csv(relevance, csv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_relevance_gives_black_image() {
        let (_, _, px) = heatmap_pixels(&Tensor::zeros(&[3, 4, 4])).unwrap();
        assert!(px.iter().all(|&p| p == 0));
    }

    #[test]
    fn single_hot_pixel() {
        let mut t = Tensor::zeros(&[3, 4, 4]);
        t.data_mut()[16 + 5] = 2.5;
        t.data_mut()[3] = -1.0;
        let (_, _, px) = heatmap_pixels(&t).unwrap();
        assert_eq!(px.iter().filter(|&&p| p == 255).count(), 1);
        assert_eq!(px[5], 255);
        assert_eq!(px.iter().filter(|&&p| p != 0).count(), 1);
    }

    #[test]
    fn pgm_header_and_csv_rows() {
        let dir = tempfile::tempdir().unwrap();
        let (pgm, csv) = (dir.path().join("h.pgm"), dir.path().join("h.csv"));
        render_heatmap(&Tensor::full(&[3, 64, 64], 0.5), &pgm, &csv).unwrap();
        let bytes = std::fs::read(&pgm).unwrap();
        assert!(bytes.starts_with(b"P5\n64 64\n255\n"));
        assert_eq!(bytes.len(), b"P5\n64 64\n255\n".len() + 64 * 64);
        let text = std::fs::read_to_string(&csv).unwrap();
        assert_eq!(text.lines().count(), 64);
        assert_eq!(text.lines().next().unwrap().split(',').count(), 64);
        assert!(text.starts_with("1.5,"));
    }
}
