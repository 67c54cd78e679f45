use crate::error::{contract, Result};

const WINDOW: usize = 8;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// Single-scale SSIM between two square images given row-major in `[-1, 1]`.
/// Values are rescaled to `[0, 1]` (so `L = 1`); statistics are taken over
/// every 8×8 window, or the whole image when the side is at most 8, and the
/// window scores are averaged.
pub fn ssim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(contract!("ssim: images of {} and {} pixels", a.len(), b.len()));
    }
    let side = (a.len() as f64).sqrt().round() as usize;
    if side * side != a.len() {
        return Err(contract!("ssim: {} pixels is not a square image", a.len()));
    }
    let x: Vec<f64> = a.iter().map(|v| (v + 1.0) / 2.0).collect();
    let y: Vec<f64> = b.iter().map(|v| (v + 1.0) / 2.0).collect();
    let w = WINDOW.min(side);
    let mut total = 0.0;
    let mut count = 0usize;
    for r0 in 0..=side - w {
        for c0 in 0..=side - w {
            let n = (w * w) as f64;
            let (mut mx, mut my) = (0.0, 0.0);
            for r in r0..r0 + w {
                for c in c0..c0 + w {
                    mx += x[r * side + c];
                    my += y[r * side + c];
                }
            }
            mx /= n;
            my /= n;
            let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
            for r in r0..r0 + w {
                for c in c0..c0 + w {
                    let dx = x[r * side + c] - mx;
                    let dy = y[r * side + c] - my;
                    vx += dx * dx;
                    vy += dy * dy;
                    cxy += dx * dy;
                }
            }
            vx /= n;
            vy /= n;
            cxy /= n;
            total += ((2.0 * mx * my + C1) * (2.0 * cxy + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}
