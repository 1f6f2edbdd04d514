//! Plot data: binary PGM images, mask index lists and per-step episode dumps.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{shape_err, Result};
use crate::forward::{magnitude, Mask, SamplingMode};
use crate::pipeline::EpisodeTrace;
use crate::tensor::{Real, Tensor};

/// 8-bit binary PGM of `[H, W]` values mapped linearly from `[lo, hi]`.
pub fn write_pgm<T: Real, W: Write>(w: &mut W, img: &Tensor<T>, lo: f64, hi: f64) -> Result<()> {
    let [h, wd] = img.shape()[..] else {
        return Err(shape_err("write_pgm", format!("expected [H, W], got {:?}", img.shape())));
    };
    let span = if hi > lo { hi - lo } else { 1.0 };
    write!(w, "P5\n{wd} {h}\n255\n")?;
    let bytes: Vec<u8> = img
        .data()
        .iter()
        .map(|v| ((v.f64() - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    w.write_all(&bytes)?;
    Ok(())
}

/// PGM scaled to the image's own range.
pub fn write_pgm_auto<T: Real, W: Write>(w: &mut W, img: &Tensor<T>) -> Result<()> {
    let (lo, hi) = img
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v.f64()), b.max(v.f64())));
    write_pgm(w, img, lo.min(0.0), hi)
}

/// Mask as a 0/255 PGM of the full grid.
pub fn write_mask_pgm<W: Write>(w: &mut W, m: &Mask) -> Result<()> {
    write_pgm(w, &m.realize::<f64>(), 0.0, 1.0)
}

#[derive(Serialize)]
struct MaskIndices<'a> {
    mode: SamplingMode,
    rows: usize,
    cols: usize,
    indices: &'a [usize],
}

pub fn mask_json(m: &Mask) -> Result<String> {
    let indices = m.indices();
    Ok(serde_json::to_string(&MaskIndices {
        mode: m.mode(),
        rows: m.rows(),
        cols: m.cols(),
        indices: &indices,
    })?)
}

fn save(path: &Path, f: impl FnOnce(&mut std::io::BufWriter<std::fs::File>) -> Result<()>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    f(&mut out)?;
    out.flush()?;
    Ok(())
}

/// Writes `step{t}_mask.pgm/.json`, `step{t}_zero_filled.pgm`,
/// `step{t}_recon.pgm` and `step{t}_heatmap.pgm` into `dir`.
pub fn dump_trace<T: Real>(dir: impl AsRef<Path>, trace: &EpisodeTrace<T>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    for (t, rec) in trace.steps.iter().enumerate() {
        save(&dir.join(format!("step{t}_mask.pgm")), |w| write_mask_pgm(w, &rec.mask))?;
        std::fs::write(dir.join(format!("step{t}_mask.json")), mask_json(&rec.mask)?)?;
        let zf = magnitude(&rec.x_hat)?;
        save(&dir.join(format!("step{t}_zero_filled.pgm")), |w| write_pgm(w, &zf, 0.0, 1.0))?;
        if let Some(x) = &rec.x_tilde {
            save(&dir.join(format!("step{t}_recon.pgm")), |w| write_pgm(w, x, 0.0, 1.0))?;
        }
        if let Some(p) = &rec.heatmap {
            let grid = match rec.mask.mode() {
                SamplingMode::Point => p.clone(),
                SamplingMode::Line => {
                    let rows = rec.mask.rows();
                    let data = (0..rows).flat_map(|_| p.data().iter().copied()).collect();
                    Tensor::new(&[rows, p.len()], data)?
                }
            };
            save(&dir.join(format!("step{t}_heatmap.pgm")), |w| write_pgm(w, &grid, 0.0, 1.0))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_header_and_scaling() {
        let img = Tensor::<f64>::new(&[2, 3], vec![0.0, 0.5, 1.0, -1.0, 2.0, 0.25]).unwrap();
        let mut buf = Vec::new();
        write_pgm(&mut buf, &img, 0.0, 1.0).unwrap();
        let header = b"P5\n3 2\n255\n";
        assert_eq!(&buf[..header.len()], header);
        assert_eq!(&buf[header.len()..], &[0, 128, 255, 0, 255, 64]);
    }

    #[test]
    fn mask_index_list() {
        let mut m = Mask::empty(SamplingMode::Line, 4, 4);
        m.set(1, true);
        m.set(3, true);
        assert_eq!(mask_json(&m).unwrap(), r#"{"mode":"line","rows":4,"cols":4,"indices":[1,3]}"#);
    }
}
