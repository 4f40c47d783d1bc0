//! Brute-force morphology written straight from the neighbourhood
//! definitions: a `w × h` element anchored at `(⌊w/2⌋, ⌊h/2⌋)`, pixels
//! outside the mask read as air, dilation using the reflected element.

#![allow(dead_code)]

use priorpath::BinaryMask;

fn at(m: &BinaryMask, x: isize, y: isize) -> bool {
    x >= 0 && y >= 0 && (x as usize) < m.width() && (y as usize) < m.height() && m.get(x as usize, y as usize)
}

fn offsets(w: usize, h: usize) -> Vec<(isize, isize)> {
    let (ax, ay) = ((w / 2) as isize, (h / 2) as isize);
    let mut v = Vec::new();
    for j in 0..h as isize {
        for i in 0..w as isize {
            v.push((i - ax, j - ay));
        }
    }
    v
}

pub fn erode(m: &BinaryMask, w: usize, h: usize) -> BinaryMask {
    let offs = offsets(w, h);
    BinaryMask::from_fn(m.width(), m.height(), |x, y| {
        offs.iter().all(|&(dx, dy)| at(m, x as isize + dx, y as isize + dy))
    })
    .unwrap()
}

pub fn dilate(m: &BinaryMask, w: usize, h: usize) -> BinaryMask {
    let offs = offsets(w, h);
    BinaryMask::from_fn(m.width(), m.height(), |x, y| {
        offs.iter().any(|&(dx, dy)| at(m, x as isize - dx, y as isize - dy))
    })
    .unwrap()
}

pub fn open(m: &BinaryMask, w: usize, h: usize) -> BinaryMask {
    dilate(&erode(m, w, h), w, h)
}

pub fn close(m: &BinaryMask, w: usize, h: usize) -> BinaryMask {
    erode(&dilate(m, w, h), w, h)
}

/// Opening with 5×5, then closing with 10×10.
pub fn coarsen(m: &BinaryMask) -> BinaryMask {
    close(&open(m, 5, 5), 10, 10)
}

/// Random mask mixing salt noise with a few filled rectangles so both thin
/// and solid structures appear.
pub fn random_mask(w: usize, h: usize, rng: &mut impl rand::Rng) -> BinaryMask {
    let density = rng.random_range(0.1..0.9);
    let mut m = BinaryMask::from_fn(w, h, |_, _| rng.random_bool(density)).unwrap();
    for _ in 0..rng.random_range(0..4) {
        let (x0, y0) = (rng.random_range(0..w), rng.random_range(0..h));
        let (rw, rh) = (rng.random_range(1..=w / 2), rng.random_range(1..=h / 2));
        let fill = rng.random_bool(0.5);
        for y in y0..(y0 + rh).min(h) {
            for x in x0..(x0 + rw).min(w) {
                m.set(x, y, fill);
            }
        }
    }
    m
}

/// Mismatched pixels between two same-sized masks.
pub fn mismatches(a: &BinaryMask, b: &BinaryMask) -> usize {
    assert_eq!(a.dims(), b.dims());
    a.bits().iter().zip(b.bits()).filter(|(x, y)| x != y).count()
}
