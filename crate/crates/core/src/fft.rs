//! Radix-2 Cooley-Tukey FFT over row-major planes.
//!
//! Spatial dims must be powers of two. The forward transform is
//! unnormalized; the inverse divides by the plane size, so a forward
//! transform of a unit impulse is flat ones and `ifft2(fft2(x)) == x` up
//! to rounding. Everything is plain f64 loops in a fixed order, so results
//! are bit-reproducible run to run.

use crate::error::{Error, Result};

pub fn is_pow2(n: usize) -> bool {
    n != 0 && n & (n - 1) == 0
}

pub fn check_pow2(h: usize, w: usize) -> Result<()> {
    if is_pow2(h) && is_pow2(w) {
        Ok(())
    } else {
        Err(Error::NonPowerOfTwo { h, w })
    }
}

/// In-place 1-D FFT of length `re.len()` (a power of two). The inverse
/// conjugates the twiddles and scales by 1/n.
pub fn fft1d(re: &mut [f64], im: &mut [f64], inverse: bool) {
    let n = re.len();
    debug_assert_eq!(n, im.len());
    debug_assert!(is_pow2(n));
    if n <= 1 {
        return;
    }

    // Bit-reversal permutation.
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = (i.reverse_bits() >> (usize::BITS - bits)) as usize;
        if j > i {
            re.swap(i, j);
            im.swap(i, j);
        }
    }

    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let ang = sign * std::f64::consts::TAU / len as f64;
        let (wr, wi) = (ang.cos(), ang.sin());
        for start in (0..n).step_by(len) {
            let mut cr = 1.0;
            let mut ci = 0.0;
            for k in 0..len / 2 {
                let a = start + k;
                let b = a + len / 2;
                let tr = re[b] * cr - im[b] * ci;
                let ti = re[b] * ci + im[b] * cr;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
                let ncr = cr * wr - ci * wi;
                ci = cr * wi + ci * wr;
                cr = ncr;
            }
        }
        len <<= 1;
    }

    if inverse {
        let scale = 1.0 / n as f64;
        for v in re.iter_mut() {
            *v *= scale;
        }
        for v in im.iter_mut() {
            *v *= scale;
        }
    }
}

/// In-place 2-D FFT of one `h` x `w` row-major plane: transform each row,
/// then each column.
pub fn fft2d(re: &mut [f64], im: &mut [f64], h: usize, w: usize, inverse: bool) {
    debug_assert_eq!(re.len(), h * w);
    for r in 0..h {
        fft1d(&mut re[r * w..(r + 1) * w], &mut im[r * w..(r + 1) * w], inverse);
    }
    let mut cr = vec![0.0; h];
    let mut ci = vec![0.0; h];
    for c in 0..w {
        for r in 0..h {
            cr[r] = re[r * w + c];
            ci[r] = im[r * w + c];
        }
        fft1d(&mut cr, &mut ci, inverse);
        for r in 0..h {
            re[r * w + c] = cr[r];
            im[r * w + c] = ci[r];
        }
    }
}

/// 2-D FFT applied independently to every `h` x `w` plane of a batched
/// buffer whose last two dims are spatial.
pub fn fft2d_batch(re: &mut [f64], im: &mut [f64], h: usize, w: usize, inverse: bool) {
    let plane = h * w;
    debug_assert_eq!(re.len() % plane, 0);
    for p in 0..re.len() / plane {
        let s = p * plane;
        fft2d(&mut re[s..s + plane], &mut im[s..s + plane], h, w, inverse);
    }
}

/// Moves the zero-frequency bin to the plane center (quadrant swap).
/// For even dims this is its own inverse.
pub fn fftshift2d(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            out[((r + h / 2) % h) * w + (c + w / 2) % w] = plane[r * w + c];
        }
    }
    out
}
