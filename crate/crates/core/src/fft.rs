//! Iterative radix-2 FFT over f64 complex pairs.
//!
//! Transform lengths are restricted to powers of two; the MFCC frontend
//! enforces that on its `n_fft` setting.

use std::f64::consts::PI;

/// One complex value as (re, im).
pub type Complex = (f64, f64);

/// In-place forward FFT. `buf.len()` must be a power of two.
pub fn fft_in_place(buf: &mut [Complex]) {
    let n = buf.len();
    assert!(n.is_power_of_two(), "fft length must be a power of two");
    if n <= 1 {
        return;
    }

    // bit-reversal permutation
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = (i.reverse_bits() >> (usize::BITS - bits)) as usize;
        if j > i {
            buf.swap(i, j);
        }
    }

    let mut len = 2;
    while len <= n {
        let ang = -2.0 * PI / len as f64;
        let (w_re, w_im) = (ang.cos(), ang.sin());
        for start in (0..n).step_by(len) {
            let mut cur = (1.0, 0.0);
            for k in 0..len / 2 {
                let (a_re, a_im) = buf[start + k];
                let (b_re, b_im) = buf[start + k + len / 2];
                let t_re = b_re * cur.0 - b_im * cur.1;
                let t_im = b_re * cur.1 + b_im * cur.0;
                buf[start + k] = (a_re + t_re, a_im + t_im);
                buf[start + k + len / 2] = (a_re - t_re, a_im - t_im);
                cur = (cur.0 * w_re - cur.1 * w_im, cur.0 * w_im + cur.1 * w_re);
            }
        }
        len <<= 1;
    }
}

/// Magnitude-squared spectrum of a real signal, bins 0..=n/2.
///
/// The input is zero-padded (or truncated) to `n_fft` samples.
pub fn real_power_spectrum(signal: &[f64], n_fft: usize) -> Vec<f64> {
    assert!(n_fft.is_power_of_two(), "n_fft must be a power of two");
    let mut buf: Vec<Complex> = Vec::with_capacity(n_fft);
    for i in 0..n_fft {
        buf.push((signal.get(i).copied().unwrap_or(0.0), 0.0));
    }
    fft_in_place(&mut buf);
    buf[..n_fft / 2 + 1]
        .iter()
        .map(|&(re, im)| re * re + im * im)
        .collect()
}
