//! Binary PGM (P5) slice snapshots.

use std::path::Path;

use iconforge_core::{Error, Volume};

fn mid_axial(v: &Volume) -> (usize, usize, Vec<f32>) {
    let [nx, ny, nz] = v.dims();
    let k = nz / 2;
    let mut out = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            out.push(v.get(i, j, k));
        }
    }
    (nx, ny, out)
}

fn to_gray(values: &[f32], lo: f32, hi: f32) -> Vec<u8> {
    let span = (hi - lo).max(f32::EPSILON);
    values.iter().map(|&x| (((x - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

/// Writes fixed, warped and |fixed - warped| side by side. Fixed and
/// warped share one gray scale; the difference uses its own.
pub fn write_triptych(fixed: &Volume, warped: &Volume, path: &Path) -> Result<(), Error> {
    let (w, h, f) = mid_axial(fixed);
    let (_, _, m) = mid_axial(warped);
    let d: Vec<f32> = f.iter().zip(&m).map(|(a, b)| (a - b).abs()).collect();
    let (lo, hi) = f.iter().chain(&m).fold((f32::MAX, f32::MIN), |(a, b), &x| (a.min(x), b.max(x)));
    let dmax = d.iter().cloned().fold(0.0, f32::max);
    let panels = [to_gray(&f, lo, hi), to_gray(&m, lo, hi), to_gray(&d, 0.0, dmax)];
    let mut bytes = format!("P5\n{} {}\n255\n", 3 * w, h).into_bytes();
    // image rows run top to bottom, so flip y
    for j in (0..h).rev() {
        for p in &panels {
            bytes.extend_from_slice(&p[j * w..(j + 1) * w]);
        }
    }
    std::fs::write(path, bytes)?;
    Ok(())
}
