//! Shared oracles for integration tests: a naive table-based DFT (independent
//! of the crate's radix-2 FFT) and tone synthesis helpers.

use std::f64::consts::PI;

/// O(n^2) DFT magnitude spectrum over bins 0..=n/2, using an exact twiddle
/// table indexed by (k*i) mod n. Any length is accepted.
pub fn naive_dft_magnitudes(signal: &[f64]) -> Vec<f64> {
    let n = signal.len();
    let table: Vec<(f64, f64)> = (0..n)
        .map(|j| {
            let ang = -2.0 * PI * j as f64 / n as f64;
            (ang.cos(), ang.sin())
        })
        .collect();
    (0..=n / 2)
        .map(|k| {
            let mut re = 0.0;
            let mut im = 0.0;
            for (i, &s) in signal.iter().enumerate() {
                let (c, si) = table[(k * i) % n];
                re += s * c;
                im += s * si;
            }
            (re * re + im * im).sqrt()
        })
        .collect()
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Pure sine at `freq_hz`, amplitude `amp`, `secs` seconds at `rate` Hz.
pub fn sine(freq_hz: f64, amp: f64, secs: f64, rate: u32) -> Vec<f64> {
    let n = (secs * rate as f64).round() as usize;
    (0..n)
        .map(|i| amp * (2.0 * PI * freq_hz * i as f64 / rate as f64).sin())
        .collect()
}
