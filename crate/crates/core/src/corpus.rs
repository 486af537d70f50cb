//! Synthetic toy images: a few Gaussian blobs plus one sinusoidal grating.

use crate::error::{Error, Result};
use crate::io::Signal;
use crate::prng::{Domain, PrngStream};

/// Image `index` of the corpus with root `seed`, on a `side x side` grid with
/// values in `[0, 1]`.
pub fn toy_image(seed: u64, index: u32, side: usize) -> Result<Signal> {
    if side == 0 {
        return Err(Error::Config("image side must be >= 1".into()));
    }
    let u = PrngStream::new(seed, Domain::Corpus).uniforms(index, 0, 32);
    let mut it = u.into_iter();
    let mut next = move || it.next().expect("enough uniforms");
    let blobs = 2 + (next() * 3.0) as usize;
    struct Blob {
        cx: f64,
        cy: f64,
        inv2s2: f64,
        amp: f64,
    }
    let blobs: Vec<Blob> = (0..blobs)
        .map(|_| {
            let cx = next();
            let cy = next();
            let s = 0.08 + 0.22 * next();
            let amp = (0.3 + 0.5 * next()) * if next() < 0.25 { -1.0 } else { 1.0 };
            Blob {
                cx,
                cy,
                inv2s2: 1.0 / (2.0 * s * s),
                amp,
            }
        })
        .collect();
    let freq = 1.0 + 3.0 * next();
    let angle = std::f64::consts::PI * next();
    let phase = 2.0 * std::f64::consts::PI * next();
    let g_amp = 0.05 + 0.15 * next();
    let base = 0.15 + 0.2 * next();
    let (fx, fy) = (freq * angle.cos(), freq * angle.sin());
    let mut data = Vec::with_capacity(side * side);
    for r in 0..side {
        for c in 0..side {
            let x = (c as f64 + 0.5) / side as f64;
            let y = (r as f64 + 0.5) / side as f64;
            let mut val = base;
            for b in &blobs {
                let d2 = (x - b.cx).powi(2) + (y - b.cy).powi(2);
                val += b.amp * (-d2 * b.inv2s2).exp();
            }
            val += g_amp * (2.0 * std::f64::consts::PI * (fx * x + fy * y) + phase).sin();
            data.push(val.clamp(0.0, 1.0));
        }
    }
    Signal::new(vec![side, side], data)
}

/// `count` images with indices `0..count`.
pub fn toy_corpus(seed: u64, count: usize, side: usize) -> Result<Vec<Signal>> {
    if count == 0 {
        return Err(Error::Config("corpus count must be >= 1".into()));
    }
    (0..count)
        .map(|i| toy_image(seed, i as u32, side))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn values_in_unit_interval() {
        let mut n = 0;
        for i in 0..40 {
            let s = toy_image(3, i, 16).unwrap();
            assert!(s.data.iter().all(|v| (0.0..=1.0).contains(v)));
            n += s.len();
        }
        assert!(n >= 10_000);
    }

    #[test]
    fn deterministic_and_varied() {
        let a = toy_corpus(1, 3, 8).unwrap();
        assert_eq!(a, toy_corpus(1, 3, 8).unwrap());
        assert_ne!(a[0], a[1]);
        assert!(matches!(toy_corpus(1, 0, 8), Err(Error::Config(_))));
    }
}
