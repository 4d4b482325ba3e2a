//! Binary dilation with a square structuring element.

use crate::raster::Mask;
use crate::scenegen::VisibilityMap;

/// Dilation by a `(2r+1)×(2r+1)` square, i.e. `r` iterations of 3×3.
/// Pixels outside the raster count as unset.
pub fn dilate(mask: &Mask, radius: usize) -> Mask {
    let (w, h) = (mask.width(), mask.height());
    let rows = sweep(mask.data(), w, h, radius, true);
    Mask::from_vec(w, h, sweep(&rows, w, h, radius, false))
}

/// One separable pass using running counts.
fn sweep(src: &[bool], w: usize, h: usize, r: usize, horizontal: bool) -> Vec<bool> {
    let (lines, len) = if horizontal { (h, w) } else { (w, h) };
    let at = |line: usize, i: usize| if horizontal { line * w + i } else { i * w + line };
    let mut out = vec![false; w * h];
    for line in 0..lines {
        let mut prefix = vec![0u32; len + 1];
        for i in 0..len {
            prefix[i + 1] = prefix[i] + src[at(line, i)] as u32;
        }
        for i in 0..len {
            let lo = i.saturating_sub(r);
            let hi = (i + r + 1).min(len);
            out[at(line, i)] = prefix[hi] > prefix[lo];
        }
    }
    out
}

/// Dilates `seeds` by `radius` and sets the result in `out` wherever the
/// visibility map shows `owner`.
pub(crate) fn dilate_seeds_into(
    seeds: &[(usize, usize)],
    radius: usize,
    vis: &VisibilityMap,
    owner: u16,
    out: &mut Mask,
) {
    if seeds.is_empty() {
        return;
    }
    let (w, h) = (vis.width(), vis.height());
    let x0 = seeds.iter().map(|s| s.0).min().unwrap().saturating_sub(radius);
    let y0 = seeds.iter().map(|s| s.1).min().unwrap().saturating_sub(radius);
    let x1 = (seeds.iter().map(|s| s.0).max().unwrap() + radius + 1).min(w);
    let y1 = (seeds.iter().map(|s| s.1).max().unwrap() + radius + 1).min(h);
    let (bw, bh) = (x1 - x0, y1 - y0);
    let mut local = Mask::new(bw, bh, false);
    for &(x, y) in seeds {
        local.set(x - x0, y - y0, true);
    }
    let grown = dilate(&local, radius);
    for ly in 0..bh {
        for lx in 0..bw {
            if grown.get(lx, ly) && vis.get(x0 + lx, y0 + ly) == owner {
                out.set(x0 + lx, y0 + ly, true);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pixel_grows_to_square() {
        let mut m = Mask::new(11, 11, false);
        m.set(5, 5, true);
        let d = dilate(&m, 3);
        assert_eq!(d.count(), 49);
        assert!(d.get(2, 2) && d.get(8, 8) && !d.get(1, 5));
    }

    #[test]
    fn radius_matches_iterated_3x3() {
        let mut m = Mask::new(16, 12, false);
        for (x, y) in [(0, 0), (7, 3), (15, 11), (9, 9)] {
            m.set(x, y, true);
        }
        let mut it = m.clone();
        for _ in 0..3 {
            it = dilate(&it, 1);
        }
        assert_eq!(dilate(&m, 3), it);
    }
}
