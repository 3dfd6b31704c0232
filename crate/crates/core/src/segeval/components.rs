//! 8-connected component labelling.

use std::collections::VecDeque;

use super::mask::BinaryMask;

/// Pixel sets (as flat indices) of every 8-connected component, in
/// row-major order of their first pixel.
pub fn components(m: &BinaryMask) -> Vec<Vec<usize>> {
    let (h, w) = m.dims();
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !m.bits()[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut comp = Vec::new();
        while let Some(p) = queue.pop_front() {
            comp.push(p);
            let (y, x) = ((p / w) as isize, (p % w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if m.bits()[q] && !seen[q] {
                        seen[q] = true;
                        queue.push_back(q);
                    }
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

/// Mask holding only the given pixels.
pub fn component_mask(h: usize, w: usize, pixels: &[usize]) -> BinaryMask {
    let mut bits = vec![false; h * w];
    pixels.iter().for_each(|&p| bits[p] = true);
    BinaryMask::from_bits(h, w, bits).expect("sized to h×w")
}
