//! Independent oracles shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use asbunet::ops::{conv2d_backward, conv2d_forward, ConvParams, Padding};
use asbunet::rf::{RfKind, RfLayer};
use asbunet::segeval::BinaryMask;
use asbunet::Tensor;
use rand::Rng;

/// Receptive field measured as the support of a one-hot output gradient
/// pushed back through all-ones convolutions without padding. Pools are
/// modelled as all-ones convolutions with the pool's kernel and stride.
pub fn empirical_rf(layers: &[RfLayer]) -> usize {
    let params: Vec<ConvParams> = layers
        .iter()
        .map(|l| {
            let (k, d) = match l.kind {
                RfKind::Pool => (l.kernel, 1),
                _ => (l.kernel, l.dilation),
            };
            ConvParams::new(
                Tensor::new((1, 1, k, k), 1.0).unwrap(),
                Tensor::zeros((1, 1, 1, 1)).unwrap(),
                l.stride,
                d,
                Padding::default(),
            )
            .unwrap()
        })
        .collect();
    let mut n = 1;
    let inputs = loop {
        let mut xs = vec![Tensor::new((1, 1, n, n), 1.0).unwrap()];
        let mut ok = true;
        for p in &params {
            match conv2d_forward(xs.last().unwrap(), p) {
                Ok(y) => xs.push(y),
                Err(_) => {
                    ok = false;
                    break;
                }
            }
        }
        if ok && !xs.last().unwrap().is_empty() {
            break xs;
        }
        n *= 2;
    };
    let out = inputs.last().unwrap().shape();
    let mut g = Tensor::zeros(out).unwrap();
    g.data_mut()[0] = 1.0;
    for (p, x) in params.iter().zip(&inputs).rev() {
        g = conv2d_backward(x, p, &g).unwrap().input;
    }
    let s = g.shape();
    let rows: Vec<usize> = (0..s.height)
        .filter(|&y| (0..s.width).any(|x| g.data()[y * s.width + x] != 0.0))
        .collect();
    let cols: Vec<usize> = (0..s.width)
        .filter(|&x| (0..s.height).any(|y| g.data()[y * s.width + x] != 0.0))
        .collect();
    let span_r = rows.last().unwrap() - rows[0] + 1;
    let span_c = cols.last().unwrap() - cols[0] + 1;
    assert_eq!(span_r, span_c, "square kernels give a square support");
    span_r
}

/// Straightforward per-pixel reimplementation of the ignore-band score.
pub mod brute {
    use super::BinaryMask;

    pub type Grid = Vec<Vec<bool>>;

    pub fn grid(m: &BinaryMask) -> Grid {
        (0..m.height())
            .map(|y| (0..m.width()).map(|x| m.get(y, x)).collect())
            .collect()
    }

    pub fn to_mask(g: &Grid) -> BinaryMask {
        BinaryMask::from_fn(g.len(), g[0].len(), |y, x| g[y][x])
    }

    fn in_disk(dy: i64, dx: i64, r: i64) -> bool {
        dy * dy + dx * dx <= r * r
    }

    /// Set if any pixel of the disk around it is set.
    pub fn dilate(g: &Grid, r: usize) -> Grid {
        let (h, w, r) = (g.len() as i64, g[0].len() as i64, r as i64);
        (0..h)
            .map(|y| {
                (0..w)
                    .map(|x| {
                        (-r..=r).any(|dy| {
                            (-r..=r).any(|dx| {
                                let (yy, xx) = (y + dy, x + dx);
                                in_disk(dy, dx, r)
                                    && yy >= 0
                                    && yy < h
                                    && xx >= 0
                                    && xx < w
                                    && g[yy as usize][xx as usize]
                            })
                        })
                    })
                    .collect()
            })
            .collect()
    }

    /// Set if every in-image pixel of the disk around it is set.
    pub fn erode(g: &Grid, r: usize) -> Grid {
        let (h, w, r) = (g.len() as i64, g[0].len() as i64, r as i64);
        (0..h)
            .map(|y| {
                (0..w)
                    .map(|x| {
                        (-r..=r).all(|dy| {
                            (-r..=r).all(|dx| {
                                let (yy, xx) = (y + dy, x + dx);
                                !in_disk(dy, dx, r)
                                    || yy < 0
                                    || yy >= h
                                    || xx < 0
                                    || xx >= w
                                    || g[yy as usize][xx as usize]
                            })
                        })
                    })
                    .collect()
            })
            .collect()
    }

    /// 8-connected labels by repeated minimum propagation; 0 is background.
    pub fn labels(g: &Grid) -> Vec<Vec<usize>> {
        let (h, w) = (g.len(), g[0].len());
        let mut lab: Vec<Vec<usize>> = (0..h)
            .map(|y| {
                (0..w)
                    .map(|x| if g[y][x] { y * w + x + 1 } else { 0 })
                    .collect()
            })
            .collect();
        loop {
            let mut changed = false;
            for y in 0..h {
                for x in 0..w {
                    if lab[y][x] == 0 {
                        continue;
                    }
                    for yy in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                        for xx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                            if lab[yy][xx] != 0 && lab[yy][xx] < lab[y][x] {
                                lab[y][x] = lab[yy][xx];
                                changed = true;
                            }
                        }
                    }
                }
            }
            if !changed {
                return lab;
            }
        }
    }

    pub fn component_grids(g: &Grid) -> Vec<Grid> {
        let lab = labels(g);
        let mut ids: Vec<usize> = lab.iter().flatten().copied().filter(|&l| l != 0).collect();
        ids.sort();
        ids.dedup();
        ids.iter()
            .map(|&id| {
                lab.iter()
                    .map(|row| row.iter().map(|&l| l == id).collect())
                    .collect()
            })
            .collect()
    }

    fn count(g: &Grid) -> usize {
        g.iter().flatten().filter(|&&b| b).count()
    }

    fn zip(a: &Grid, b: &Grid, f: impl Fn(bool, bool) -> bool) -> Grid {
        a.iter()
            .zip(b)
            .map(|(ra, rb)| ra.iter().zip(rb).map(|(&x, &y)| f(x, y)).collect())
            .collect()
    }

    pub fn radius(beta: f64, min_radius: usize, area: usize) -> usize {
        ((beta * (area as f64).sqrt()).round() as usize).max(min_radius)
    }

    /// Evaluation mask: 1 where pixels count.
    pub fn keep(label: &Grid, beta: f64, min_radius: usize) -> Grid {
        let mut band = zip(label, label, |_, _| false);
        for c in component_grids(label) {
            let r = radius(beta, min_radius, count(&c));
            let ring = zip(&dilate(&c, r), &erode(&c, r), |a, b| a != b);
            band = zip(&band, &ring, |a, b| a || b);
        }
        zip(&band, &band, |a, _| !a)
    }

    pub fn jaccard(label: &Grid, pred: &Grid, keep: &Grid) -> f64 {
        let (mut inter, mut union) = (0usize, 0usize);
        for y in 0..label.len() {
            for x in 0..label[0].len() {
                let (a, b) = (label[y][x] && keep[y][x], pred[y][x] && keep[y][x]);
                inter += (a && b) as usize;
                union += (a || b) as usize;
            }
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// (jaccard, misdetections, score)
    pub fn score(label: &Grid, pred: &Grid, beta: f64, min_radius: usize) -> (f64, usize, f64) {
        let k = keep(label, beta, min_radius);
        let mut kept = pred.clone();
        let mut mis = 0;
        for c in component_grids(pred) {
            let any = |other: &Grid| {
                (0..c.len()).any(|y| (0..c[0].len()).any(|x| c[y][x] && other[y][x]))
            };
            if !any(label) && any(&k) {
                mis += 1;
                kept = zip(&kept, &c, |a, b| a && !b);
            }
        }
        let j = jaccard(label, &kept, &k);
        (j, mis, j - mis as f64)
    }
}

/// Random blobby mask: a few filled rectangles and discs plus sparse speckle.
pub fn random_mask<R: Rng>(rng: &mut R, h: usize, w: usize) -> BinaryMask {
    let mut m = BinaryMask::new(h, w);
    for _ in 0..rng.random_range(0..4) {
        let (cy, cx) = (rng.random_range(0..h) as i64, rng.random_range(0..w) as i64);
        let r = rng.random_range(0..=(h.min(w) as i64 / 3).max(1));
        let disc = rng.random_bool(0.5);
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let inside = if disc {
                    (y - cy).pow(2) + (x - cx).pow(2) <= r * r
                } else {
                    (y - cy).abs() <= r && (x - cx).abs() <= r
                };
                if inside {
                    m.set(y as usize, x as usize, true);
                }
            }
        }
    }
    for _ in 0..rng.random_range(0..3) {
        m.set(rng.random_range(0..h), rng.random_range(0..w), true);
    }
    m
}

/// A prediction derived from `label` by random local edits.
pub fn perturbed<R: Rng>(rng: &mut R, label: &BinaryMask) -> BinaryMask {
    let (h, w) = label.dims();
    match rng.random_range(0..3) {
        0 => random_mask(rng, h, w),
        _ => {
            let mut p = label.clone();
            for _ in 0..rng.random_range(0..(h * w / 4).max(1)) {
                let (y, x) = (rng.random_range(0..h), rng.random_range(0..w));
                p.set(y, x, !p.get(y, x));
            }
            p
        }
    }
}
