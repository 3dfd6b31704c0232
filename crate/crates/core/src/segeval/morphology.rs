//! Disk dilation and erosion.
//!
//! The radius-`r` disk is `{(dy, dx) : dy² + dx² ≤ r²}`; radius 1 is the
//! 4-neighbourhood plus centre. Dilation treats pixels outside the image as
//! background. Erosion only looks at in-image neighbours, so a full mask
//! erodes to itself.

use super::mask::BinaryMask;

pub fn disk(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut v = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dy * dy + dx * dx <= r * r {
                v.push((dy, dx));
            }
        }
    }
    v
}

fn shifted(m: &BinaryMask, y: usize, x: usize, dy: isize, dx: isize) -> Option<bool> {
    let ny = y as isize + dy;
    let nx = x as isize + dx;
    if ny < 0 || nx < 0 || ny >= m.height() as isize || nx >= m.width() as isize {
        None
    } else {
        Some(m.get(ny as usize, nx as usize))
    }
}

pub fn dilate(m: &BinaryMask, radius: usize) -> BinaryMask {
    let d = disk(radius);
    let mut out = BinaryMask::new(m.height(), m.width());
    for y in 0..m.height() {
        for x in 0..m.width() {
            if m.get(y, x) {
                for &(dy, dx) in &d {
                    if shifted(m, y, x, dy, dx).is_some() {
                        out.set((y as isize + dy) as usize, (x as isize + dx) as usize, true);
                    }
                }
            }
        }
    }
    out
}

pub fn erode(m: &BinaryMask, radius: usize) -> BinaryMask {
    let d = disk(radius);
    BinaryMask::from_fn(m.height(), m.width(), |y, x| {
        d.iter()
            .all(|&(dy, dx)| shifted(m, y, x, dy, dx).unwrap_or(true))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disk_sizes() {
        assert_eq!(disk(1).len(), 5);
        assert_eq!(disk(2).len(), 13);
    }

    #[test]
    fn identities() {
        assert!(dilate(&BinaryMask::new(6, 5), 2).is_empty());
        assert_eq!(erode(&BinaryMask::full(6, 5), 2), BinaryMask::full(6, 5));
    }

    #[test]
    fn single_pixel_plus() {
        let mut m = BinaryMask::new(5, 5);
        m.set(2, 2, true);
        let d = dilate(&m, 1);
        assert_eq!(d.count(), 5);
        for (y, x) in [(1, 2), (3, 2), (2, 1), (2, 3), (2, 2)] {
            assert!(d.get(y, x));
        }
        assert!(erode(&m, 1).is_empty());
    }
}
