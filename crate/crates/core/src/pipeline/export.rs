use std::fs;
use std::path::{Path, PathBuf};

use super::{Float, Model};
use crate::autodiff::Array;
use crate::error::{Error, Result};
use crate::feature_io::{write_feature_matrix, CaptionedClip, FeatureMatrix};

#[derive(Clone, Debug)]
pub struct AdjacencyExport {
    pub matrix_path: PathBuf,
    pub image_path: PathBuf,
    pub adjacency: Array<Float>,
}

/// Bilinear resampling of a `rows × cols` grid to `rows·factor × cols·factor`
/// with corner-aligned sample positions, so the four corners are copied.
pub fn bilinear_upscale(values: &[f64], rows: usize, cols: usize, factor: usize) -> Result<Vec<f64>> {
    if factor == 0 {
        return Err(Error::InvalidArgument("interpolation factor must be >= 1".into()));
    }
    if rows == 0 || cols == 0 || values.len() != rows * cols {
        return Err(Error::shape("bilinear_upscale", format!("{} values for {rows}x{cols}", values.len())));
    }
    let (out_r, out_c) = (rows * factor, cols * factor);
    let coord = |i: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        if n_out == 1 || n_in == 1 {
            return (0, 0, 0.0);
        }
        let x = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
        let lo = (x.floor() as usize).min(n_in - 1);
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, x - lo as f64)
    };
    let mut out = Vec::with_capacity(out_r * out_c);
    for r in 0..out_r {
        let (r0, r1, fr) = coord(r, rows, out_r);
        for c in 0..out_c {
            let (c0, c1, fc) = coord(c, cols, out_c);
            let at = |i: usize, j: usize| values[i * cols + j];
            let top = at(r0, c0) * (1.0 - fc) + at(r0, c1) * fc;
            let bottom = at(r1, c0) * (1.0 - fc) + at(r1, c1) * fc;
            out.push(top * (1.0 - fr) + bottom * fr);
        }
    }
    Ok(out)
}

/// Min-max normalises to `0..=255` (all zero for a constant matrix), then
/// upscales bilinearly and rounds.
pub fn heatmap_pixels(values: &[f64], rows: usize, cols: usize, factor: usize) -> Result<Vec<u8>> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let norm: Vec<f64> = values
        .iter()
        .map(|v| if span > 0.0 { (v - lo) / span } else { 0.0 })
        .collect();
    Ok(bilinear_upscale(&norm, rows, cols, factor)?
        .into_iter()
        .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect())
}

/// Binary greyscale PGM (`P5`, maxval 255).
pub fn write_pgm(path: impl AsRef<Path>, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::shape("write_pgm", format!("{} pixels for {width}x{height}", pixels.len())));
    }
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    let path = path.as_ref();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a file written by [`write_pgm`]; returns `(width, height, pixels)`.
pub fn read_pgm(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u8>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Parse {
        path: path.to_owned(),
        line: 1,
        message: m.to_owned(),
    };
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad("expected a P5 image with maxval 255"));
    }
    let width: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let height: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    let data = &bytes[pos + 1..];
    if data.len() != width * height {
        return Err(bad("pixel count does not match header"));
    }
    Ok((width, height, data.to_vec()))
}

/// Runs the encoder on `clip` and writes `<id>_adj.fmat` (raw `T×T`
/// adjacency) and `<id>_adj.pgm` (heatmap upscaled by `factor`) to `out_dir`.
pub fn export_adjacency(
    model: &Model,
    clip: &CaptionedClip,
    factor: usize,
    out_dir: impl AsRef<Path>,
) -> Result<AdjacencyExport> {
    if factor == 0 {
        return Err(Error::InvalidArgument("interpolation factor must be >= 1".into()));
    }
    if !model.graph_enabled() {
        return Err(Error::InvalidArgument(
            "model was built without graph attention; there is no adjacency to export".into(),
        ));
    }
    let adjacency = model
        .encode(&clip.features)?
        .adjacency
        .expect("graph enabled")
        .values;
    let t = adjacency.shape()[0];
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let matrix_path = dir.join(format!("{}_adj.fmat", clip.id));
    write_feature_matrix(&matrix_path, &FeatureMatrix::from_array(&adjacency)?)?;
    let pixels = heatmap_pixels(&adjacency.to_f64_vec(), t, t, factor)?;
    let image_path = dir.join(format!("{}_adj.pgm", clip.id));
    write_pgm(&image_path, t * factor, t * factor, &pixels)?;
    Ok(AdjacencyExport {
        matrix_path,
        image_path,
        adjacency,
    })
}
