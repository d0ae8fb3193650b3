//! Bilinear resampling shared by positional-table interpolation, resized crops
//! and observation preprocessing. Sample positions follow the half-pixel
//! convention: output index `o` reads source coordinate
//! `(o + 0.5) · in / out − 0.5`, clamped to the valid range.

/// One output tap: two source indices and the weight of the second.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

/// Taps for resampling `len` source samples starting at `start` onto `out`
/// samples.
pub(crate) fn taps(start: usize, len: usize, out: usize) -> Vec<Tap> {
    let scale = len as f64 / out as f64;
    (0..out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(len - 1);
            Tap {
                lo: start + lo,
                hi: start + hi,
                frac: src - lo as f64,
            }
        })
        .collect()
}

/// Dense `out × len` interpolation matrix for one axis.
pub(crate) fn matrix_1d(len: usize, out: usize) -> Vec<f64> {
    let mut m = vec![0.0; out * len];
    for (o, t) in taps(0, len, out).into_iter().enumerate() {
        m[o * len + t.lo] += 1.0 - t.frac;
        m[o * len + t.hi] += t.frac;
    }
    m
}

/// Bilinearly resizes a single-channel `h × w` plane (row-major) from the
/// window `[top, top+ch) × [left, left+cw)` to `oh × ow`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn resize_plane(
    src: &[f32],
    w: usize,
    top: usize,
    left: usize,
    ch: usize,
    cw: usize,
    oh: usize,
    ow: usize,
) -> Vec<f32> {
    let ty = taps(top, ch, oh);
    let tx = taps(left, cw, ow);
    let mut out = Vec::with_capacity(oh * ow);
    for y in &ty {
        for x in &tx {
            let p = |r: usize, c: usize| src[r * w + c] as f64;
            let top_v = p(y.lo, x.lo) * (1.0 - x.frac) + p(y.lo, x.hi) * x.frac;
            let bot_v = p(y.hi, x.lo) * (1.0 - x.frac) + p(y.hi, x.hi) * x.frac;
            out.push((top_v * (1.0 - y.frac) + bot_v * y.frac) as f32);
        }
    }
    out
}
