//! Six-layer character acoustic model: three clipped-ReLU dense layers, a
//! unidirectional LSTM, another clipped-ReLU dense layer, and a softmax
//! output layer, with exact reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Mat;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    /// Width of one stacked feature row.
    pub n_input: usize,
    pub n_hidden: usize,
    /// Alphabet size plus one for the CTC blank.
    pub n_output: usize,
    pub relu_clip: f64,
    /// Dropout rate on the dense layers during training; 0 disables it.
    pub dropout: f64,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(n_input: usize, n_output: usize) -> Self {
        ModelConfig {
            n_input,
            n_hidden: 128,
            n_output,
            relu_clip: 20.0,
            dropout: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n_input < 1 || self.n_hidden < 1 || self.n_output < 2 {
            return Err(ModelError::ShapeMismatch(format!(
                "dims must satisfy n_input>=1, n_hidden>=1, n_output>=2 (got {}, {}, {})",
                self.n_input, self.n_hidden, self.n_output
            )));
        }
        if !(self.dropout >= 0.0 && self.dropout < 1.0) {
            return Err(ModelError::ShapeMismatch(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Closed-form parameter count; init asserts the built tensors agree.
    pub fn param_count(&self) -> usize {
        let (i, h, o) = (self.n_input, self.n_hidden, self.n_output);
        (h * i + h) + 2 * (h * h + h) + (8 * h * h + 4 * h) + (h * h + h) + (o * h + o)
    }
}

/// Dense layer parameters (or their gradients).
#[derive(Debug, Clone, PartialEq)]
pub struct Lin {
    pub w: Mat,
    pub b: Vec<f64>,
}

impl Lin {
    fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Lin {
            w: Mat::zeros(out_dim, in_dim),
            b: vec![0.0; out_dim],
        }
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.w.matvec(x, y);
        for (yi, bi) in y.iter_mut().zip(self.b.iter()) {
            *yi += bi;
        }
    }
}

/// LSTM parameters; gate rows are ordered input, forget, cell, output.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub wx: Mat,
    pub wh: Mat,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub cfg: ModelConfig,
    pub dense1: Lin,
    pub dense2: Lin,
    pub dense3: Lin,
    pub lstm: LstmParams,
    pub dense5: Lin,
    pub output: Lin,
}

impl ModelParams {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (i, h, o) = (cfg.n_input, cfg.n_hidden, cfg.n_output);
        ModelParams {
            cfg: cfg.clone(),
            dense1: Lin::zeros(h, i),
            dense2: Lin::zeros(h, h),
            dense3: Lin::zeros(h, h),
            lstm: LstmParams {
                wx: Mat::zeros(4 * h, h),
                wh: Mat::zeros(4 * h, h),
                b: vec![0.0; 4 * h],
            },
            dense5: Lin::zeros(h, h),
            output: Lin::zeros(o, h),
        }
    }

    /// All parameter tensors as flat slices, in the fixed serialization
    /// order: dense1..3 (w then b), lstm (wx, wh, b), dense5, output.
    pub fn flat(&self) -> Vec<&[f64]> {
        vec![
            self.dense1.w.as_slice(),
            &self.dense1.b,
            self.dense2.w.as_slice(),
            &self.dense2.b,
            self.dense3.w.as_slice(),
            &self.dense3.b,
            self.lstm.wx.as_slice(),
            self.lstm.wh.as_slice(),
            &self.lstm.b,
            self.dense5.w.as_slice(),
            &self.dense5.b,
            self.output.w.as_slice(),
            &self.output.b,
        ]
    }

    pub fn flat_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.dense1.w.as_mut_slice(),
            &mut self.dense1.b,
            self.dense2.w.as_mut_slice(),
            &mut self.dense2.b,
            self.dense3.w.as_mut_slice(),
            &mut self.dense3.b,
            self.lstm.wx.as_mut_slice(),
            self.lstm.wh.as_mut_slice(),
            &mut self.lstm.b,
            self.dense5.w.as_mut_slice(),
            &mut self.dense5.b,
            self.output.w.as_mut_slice(),
            &mut self.output.b,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.flat().iter().map(|s| s.len()).sum()
    }
}

/// Glorot-uniform weights ([-s, s], s = sqrt(6/(fan_in+fan_out)) per matrix),
/// zero biases except the LSTM forget gate's, which starts at 1.
pub fn init_model(cfg: &ModelConfig) -> ModelParams {
    cfg.validate().expect("invalid model config");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ModelParams::zeros(cfg);
    let h = cfg.n_hidden;

    let mut glorot = |m: &mut Mat| {
        let s = (6.0 / (m.rows() + m.cols()) as f64).sqrt();
        for v in m.as_mut_slice() {
            *v = rng.gen_range(-s..=s);
        }
    };
    glorot(&mut params.dense1.w);
    glorot(&mut params.dense2.w);
    glorot(&mut params.dense3.w);
    glorot(&mut params.lstm.wx);
    glorot(&mut params.lstm.wh);
    glorot(&mut params.dense5.w);
    glorot(&mut params.output.w);
    for v in &mut params.lstm.b[h..2 * h] {
        *v = 1.0;
    }

    assert_eq!(params.param_count(), cfg.param_count(), "parameter wiring bug");
    params
}

/// Everything the backward pass needs from a forward run. Dense activations
/// are stored before dropout; `masks` holds the inverted-dropout factors.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Mat,
    h1: Mat,
    h2: Mat,
    h3: Mat,
    /// Activated gate values per frame: [i | f | g | o], width 4*n_hidden.
    gates: Mat,
    cell: Mat,
    tanh_cell: Mat,
    h_lstm: Mat,
    h5: Mat,
    logits: Mat,
    probs: Mat,
    /// Dropout masks for h1, h2, h3, h5 (values 0 or 1/(1-rate)).
    masks: Option<[Mat; 4]>,
}

impl ForwardCache {
    /// Stable log-softmax of the cached logits.
    pub fn log_probs(&self) -> Mat {
        let mut out = self.logits.clone();
        for t in 0..out.rows() {
            let row = out.row_mut(t);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse: f64 = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        out
    }

    pub fn probs(&self) -> &Mat {
        &self.probs
    }

    /// Per-unit flags over the four clipped-ReLU layers: true where the unit
    /// sits strictly inside its linear region. The loss is not differentiable
    /// where a flag flips, so gradient probes must hold this pattern fixed;
    /// it also serves as a saturation diagnostic.
    pub fn relu_signature(&self, clip: f64) -> Vec<bool> {
        let mut sig = Vec::new();
        for m in [&self.h1, &self.h2, &self.h3, &self.h5] {
            for &v in m.as_slice() {
                sig.push(v > 0.0 && v < clip);
            }
        }
        sig
    }
}

fn clip_relu(z: f64, clip: f64) -> f64 {
    z.max(0.0).min(clip)
}

/// Derivative indicator of the clipped ReLU, taken from its output value:
/// 1 on the open interval (0, clip), 0 elsewhere.
fn relu_gate(h: f64, clip: f64) -> f64 {
    if h > 0.0 && h < clip {
        1.0
    } else {
        0.0
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Deterministic forward pass over stacked feature rows (no dropout).
pub fn forward(params: &ModelParams, input: &Mat) -> Result<(Mat, ForwardCache), ModelError> {
    forward_inner(params, input, None)
}

/// Forward pass with inverted dropout on the four dense layers; the masks
/// are drawn from `rng` and cached for the backward pass.
pub fn forward_dropout(
    params: &ModelParams,
    input: &Mat,
    rng: &mut ChaCha8Rng,
) -> Result<(Mat, ForwardCache), ModelError> {
    let rate = params.cfg.dropout;
    if rate == 0.0 {
        return forward_inner(params, input, None);
    }
    let t = input.rows();
    let h = params.cfg.n_hidden;
    let keep = 1.0 - rate;
    let mut masks = [
        Mat::zeros(t, h),
        Mat::zeros(t, h),
        Mat::zeros(t, h),
        Mat::zeros(t, h),
    ];
    for m in &mut masks {
        for v in m.as_mut_slice() {
            *v = if rng.gen_range(0.0..1.0) < keep { 1.0 / keep } else { 0.0 };
        }
    }
    forward_inner(params, input, Some(masks))
}

fn forward_inner(
    params: &ModelParams,
    input: &Mat,
    masks: Option<[Mat; 4]>,
) -> Result<(Mat, ForwardCache), ModelError> {
    let cfg = &params.cfg;
    if input.cols() != cfg.n_input {
        return Err(ModelError::ShapeMismatch(format!(
            "input width {} but model expects {}",
            input.cols(),
            cfg.n_input
        )));
    }
    let t_len = input.rows();
    let h = cfg.n_hidden;
    let clip = cfg.relu_clip;

    let mut cache = ForwardCache {
        input: input.clone(),
        h1: Mat::zeros(t_len, h),
        h2: Mat::zeros(t_len, h),
        h3: Mat::zeros(t_len, h),
        gates: Mat::zeros(t_len, 4 * h),
        cell: Mat::zeros(t_len, h),
        tanh_cell: Mat::zeros(t_len, h),
        h_lstm: Mat::zeros(t_len, h),
        h5: Mat::zeros(t_len, h),
        logits: Mat::zeros(t_len, cfg.n_output),
        probs: Mat::zeros(t_len, cfg.n_output),
        masks,
    };

    let mut buf = vec![0.0; h];
    let mut dropped = vec![0.0; h];
    let mut gates = vec![0.0; 4 * h];
    let mut h_prev = vec![0.0; h];
    let mut c_prev = vec![0.0; h];

    // consumed = activation * dropout mask (identity when masks are off)
    let apply_mask = |cache: &ForwardCache, layer: usize, t: usize, src: &[f64], dst: &mut [f64]| {
        match &cache.masks {
            Some(ms) => {
                for ((d, &s), &m) in dst.iter_mut().zip(src).zip(ms[layer].row(t)) {
                    *d = s * m;
                }
            }
            None => dst.copy_from_slice(src),
        }
    };

    for t in 0..t_len {
        params.dense1.apply(input.row(t), &mut buf);
        for (o, &z) in cache.h1.row_mut(t).iter_mut().zip(buf.iter()) {
            *o = clip_relu(z, clip);
        }
        apply_mask(&cache, 0, t, cache.h1.row(t), &mut dropped);

        params.dense2.apply(&dropped, &mut buf);
        for (o, &z) in cache.h2.row_mut(t).iter_mut().zip(buf.iter()) {
            *o = clip_relu(z, clip);
        }
        apply_mask(&cache, 1, t, cache.h2.row(t), &mut dropped);

        params.dense3.apply(&dropped, &mut buf);
        for (o, &z) in cache.h3.row_mut(t).iter_mut().zip(buf.iter()) {
            *o = clip_relu(z, clip);
        }
        apply_mask(&cache, 2, t, cache.h3.row(t), &mut dropped);

        // LSTM step
        params.lstm.wx.matvec(&dropped, &mut gates);
        params.lstm.wh.matvec_add(&h_prev, &mut gates);
        for (g, b) in gates.iter_mut().zip(params.lstm.b.iter()) {
            *g += b;
        }
        {
            let (gi, rest) = gates.split_at_mut(h);
            let (gf, rest) = rest.split_at_mut(h);
            let (gg, go) = rest.split_at_mut(h);
            for v in gi.iter_mut() {
                *v = sigmoid(*v);
            }
            for v in gf.iter_mut() {
                *v = sigmoid(*v);
            }
            for v in gg.iter_mut() {
                *v = v.tanh();
            }
            for v in go.iter_mut() {
                *v = sigmoid(*v);
            }
        }
        cache.gates.row_mut(t).copy_from_slice(&gates);
        for k in 0..h {
            let c = gates[h + k] * c_prev[k] + gates[k] * gates[2 * h + k];
            let tc = c.tanh();
            let hk = gates[3 * h + k] * tc;
            *cache.cell.at_mut(t, k) = c;
            *cache.tanh_cell.at_mut(t, k) = tc;
            *cache.h_lstm.at_mut(t, k) = hk;
            c_prev[k] = c;
            h_prev[k] = hk;
        }

        params.dense5.apply(cache.h_lstm.row(t), &mut buf);
        for (o, &z) in cache.h5.row_mut(t).iter_mut().zip(buf.iter()) {
            *o = clip_relu(z, clip);
        }
        apply_mask(&cache, 3, t, cache.h5.row(t), &mut dropped);

        let mut logits = vec![0.0; cfg.n_output];
        params.output.apply(&dropped, &mut logits);
        cache.logits.row_mut(t).copy_from_slice(&logits);
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in logits.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for (p, v) in cache.probs.row_mut(t).iter_mut().zip(logits.iter()) {
            *p = v / sum;
        }
    }

    let probs = cache.probs.clone();
    Ok((probs, cache))
}

/// Exact reverse-mode gradients for a matching forward cache, including
/// backpropagation through time across the LSTM scan.
pub fn backward(
    params: &ModelParams,
    cache: &ForwardCache,
    dlogits: &Mat,
) -> Result<ModelParams, ModelError> {
    let cfg = &params.cfg;
    let t_len = cache.input.rows();
    let h = cfg.n_hidden;
    if dlogits.rows() != t_len || dlogits.cols() != cfg.n_output {
        return Err(ModelError::ShapeMismatch(format!(
            "upstream gradient is {}x{}, expected {}x{}",
            dlogits.rows(),
            dlogits.cols(),
            t_len,
            cfg.n_output
        )));
    }
    let clip = cfg.relu_clip;
    let mut grads = ModelParams::zeros(cfg);

    let masked = |layer: usize, t: usize, src: &[f64], dst: &mut [f64]| match &cache.masks {
        Some(ms) => {
            for ((d, &s), &m) in dst.iter_mut().zip(src).zip(ms[layer].row(t)) {
                *d = s * m;
            }
        }
        None => dst.copy_from_slice(src),
    };

    let mut dh_next = vec![0.0; h];
    let mut dc_next = vec![0.0; h];
    let mut dh5 = vec![0.0; h];
    let mut dz = vec![0.0; h];
    let mut dgates = vec![0.0; 4 * h];
    let mut dh3 = vec![0.0; h];
    let mut dh2 = vec![0.0; h];
    let mut dh1 = vec![0.0; h];
    let mut consumed = vec![0.0; h];

    for t in (0..t_len).rev() {
        let dlog = dlogits.row(t);

        // output layer
        masked(3, t, cache.h5.row(t), &mut consumed);
        grads.output.w.add_outer(dlog, &consumed);
        for (gb, &d) in grads.output.b.iter_mut().zip(dlog) {
            *gb += d;
        }
        dh5.fill(0.0);
        params.output.w.matvec_transposed_add(dlog, &mut dh5);

        // dense5 (dropout then clipped ReLU)
        let h5 = cache.h5.row(t);
        for k in 0..h {
            let m = cache.masks.as_ref().map_or(1.0, |ms| ms[3].at(t, k));
            dz[k] = dh5[k] * m * relu_gate(h5[k], clip);
        }
        grads.dense5.w.add_outer(&dz, cache.h_lstm.row(t));
        for (gb, &d) in grads.dense5.b.iter_mut().zip(dz.iter()) {
            *gb += d;
        }

        // LSTM cell at t: dh pools the dense5 path and the recurrence
        let mut dh = vec![0.0; h];
        params.dense5.w.matvec_transposed_add(&dz, &mut dh);
        for (a, b) in dh.iter_mut().zip(dh_next.iter()) {
            *a += b;
        }

        let gates = cache.gates.row(t);
        let tanh_c = cache.tanh_cell.row(t);
        let c_prev_row;
        let c_prev: &[f64] = if t == 0 {
            &[]
        } else {
            c_prev_row = cache.cell.row(t - 1);
            c_prev_row
        };
        for k in 0..h {
            let (i, f, g, o) = (gates[k], gates[h + k], gates[2 * h + k], gates[3 * h + k]);
            let dc = dh[k] * o * (1.0 - tanh_c[k] * tanh_c[k]) + dc_next[k];
            let cp = if t == 0 { 0.0 } else { c_prev[k] };
            dgates[k] = dc * g * i * (1.0 - i);
            dgates[h + k] = dc * cp * f * (1.0 - f);
            dgates[2 * h + k] = dc * i * (1.0 - g * g);
            dgates[3 * h + k] = dh[k] * tanh_c[k] * o * (1.0 - o);
            dc_next[k] = dc * f;
        }

        masked(2, t, cache.h3.row(t), &mut consumed);
        grads.lstm.wx.add_outer(&dgates, &consumed);
        if t > 0 {
            grads.lstm.wh.add_outer(&dgates, cache.h_lstm.row(t - 1));
        }
        for (gb, &d) in grads.lstm.b.iter_mut().zip(dgates.iter()) {
            *gb += d;
        }
        dh_next.fill(0.0);
        params.lstm.wh.matvec_transposed_add(&dgates, &mut dh_next);
        dh3.fill(0.0);
        params.lstm.wx.matvec_transposed_add(&dgates, &mut dh3);

        // dense stack, mirrored
        let h3 = cache.h3.row(t);
        for k in 0..h {
            let m = cache.masks.as_ref().map_or(1.0, |ms| ms[2].at(t, k));
            dz[k] = dh3[k] * m * relu_gate(h3[k], clip);
        }
        masked(1, t, cache.h2.row(t), &mut consumed);
        grads.dense3.w.add_outer(&dz, &consumed);
        for (gb, &d) in grads.dense3.b.iter_mut().zip(dz.iter()) {
            *gb += d;
        }
        dh2.fill(0.0);
        params.dense3.w.matvec_transposed_add(&dz, &mut dh2);

        let h2 = cache.h2.row(t);
        for k in 0..h {
            let m = cache.masks.as_ref().map_or(1.0, |ms| ms[1].at(t, k));
            dz[k] = dh2[k] * m * relu_gate(h2[k], clip);
        }
        masked(0, t, cache.h1.row(t), &mut consumed);
        grads.dense2.w.add_outer(&dz, &consumed);
        for (gb, &d) in grads.dense2.b.iter_mut().zip(dz.iter()) {
            *gb += d;
        }
        dh1.fill(0.0);
        params.dense2.w.matvec_transposed_add(&dz, &mut dh1);

        let h1 = cache.h1.row(t);
        for k in 0..h {
            let m = cache.masks.as_ref().map_or(1.0, |ms| ms[0].at(t, k));
            dz[k] = dh1[k] * m * relu_gate(h1[k], clip);
        }
        grads.dense1.w.add_outer(&dz, cache.input.row(t));
        for (gb, &d) in grads.dense1.b.iter_mut().zip(dz.iter()) {
            *gb += d;
        }
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            n_input: 3,
            n_hidden: 5,
            n_output: 4,
            relu_clip: 20.0,
            dropout: 0.0,
            seed: 7,
        }
    }

    fn random_input(rng: &mut ChaCha8Rng, t: usize, w: usize) -> Mat {
        let mut m = Mat::zeros(t, w);
        for v in m.as_mut_slice() {
            *v = rng.gen_range(-2.0..2.0);
        }
        m
    }

    #[test]
    fn same_seed_gives_bitwise_identical_parameters() {
        let cfg = tiny_cfg();
        let a = init_model(&cfg);
        let b = init_model(&cfg);
        assert_eq!(a, b);
        let c = init_model(&ModelConfig { seed: 8, ..cfg });
        assert_ne!(a, c);
    }

    #[test]
    fn forget_gate_bias_starts_at_one_and_others_at_zero() {
        let cfg = tiny_cfg();
        let p = init_model(&cfg);
        let h = cfg.n_hidden;
        assert!(p.lstm.b[0..h].iter().all(|&v| v == 0.0));
        assert!(p.lstm.b[h..2 * h].iter().all(|&v| v == 1.0));
        assert!(p.lstm.b[2 * h..].iter().all(|&v| v == 0.0));
        assert!(p.dense1.b.iter().all(|&v| v == 0.0));
        assert!(p.output.b.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn weights_respect_glorot_bounds() {
        let cfg = ModelConfig {
            n_input: 26,
            n_hidden: 32,
            n_output: 29,
            relu_clip: 20.0,
            dropout: 0.0,
            seed: 3,
        };
        let p = init_model(&cfg);
        let mats = [
            &p.dense1.w,
            &p.dense2.w,
            &p.dense3.w,
            &p.lstm.wx,
            &p.lstm.wh,
            &p.dense5.w,
            &p.output.w,
        ];
        for m in mats {
            let s = (6.0 / (m.rows() + m.cols()) as f64).sqrt();
            assert!(m.as_slice().iter().all(|&v| v.abs() <= s));
        }
    }

    #[test]
    fn parameter_count_matches_analytic_formula() {
        for (i, h, o) in [(3, 5, 4), (26, 32, 29), (78, 128, 29)] {
            let cfg = ModelConfig {
                n_input: i,
                n_hidden: h,
                n_output: o,
                relu_clip: 20.0,
                dropout: 0.0,
                seed: 0,
            };
            assert_eq!(init_model(&cfg).param_count(), cfg.param_count());
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_are_positive() {
        let cfg = tiny_cfg();
        let p = init_model(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let input = random_input(&mut rng, 6, cfg.n_input);
        let (probs, _) = forward(&p, &input).unwrap();
        for t in 0..probs.rows() {
            let row = probs.row(t);
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn zero_output_layer_predicts_uniformly() {
        let cfg = tiny_cfg();
        let mut p = init_model(&cfg);
        p.output.w.fill(0.0);
        p.output.b.fill(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let input = random_input(&mut rng, 3, cfg.n_input);
        let (probs, _) = forward(&p, &input).unwrap();
        let expect = 1.0 / cfg.n_output as f64;
        for v in probs.as_slice() {
            assert!((v - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn outputs_are_causal_in_the_input() {
        let cfg = tiny_cfg();
        let p = init_model(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_input(&mut rng, 5, cfg.n_input);
        let mut b = a.clone();
        for v in b.row_mut(3) {
            *v += 1.0;
        }
        for v in b.row_mut(4) {
            *v -= 0.5;
        }
        let (pa, _) = forward(&p, &a).unwrap();
        let (pb, _) = forward(&p, &b).unwrap();
        for t in 0..3 {
            assert_eq!(pa.row(t), pb.row(t), "row {t} changed");
        }
        assert_ne!(pa.row(3), pb.row(3));
    }

    #[test]
    fn forward_rejects_wrong_input_width() {
        let cfg = tiny_cfg();
        let p = init_model(&cfg);
        let input = Mat::zeros(4, cfg.n_input + 1);
        assert!(matches!(
            forward(&p, &input),
            Err(ModelError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_parameter_gradients() {
        let cfg = tiny_cfg();
        let p = init_model(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let input = random_input(&mut rng, 4, cfg.n_input);
        let (_, cache) = forward(&p, &input).unwrap();
        let grads = backward(&p, &cache, &Mat::zeros(4, cfg.n_output)).unwrap();
        for s in grads.flat() {
            assert!(s.iter().all(|&v| v == 0.0));
        }
    }

    /// Cross-entropy against fixed targets; its logit gradient is
    /// probs - target, the same shape the CTC loss produces.
    fn ce_loss(probs: &Mat, targets: &Mat) -> f64 {
        let mut loss = 0.0;
        for t in 0..probs.rows() {
            for k in 0..probs.cols() {
                loss -= targets.at(t, k) * probs.at(t, k).ln();
            }
        }
        loss
    }

    /// Finite differences are only valid for perturbations that keep the
    /// kink pattern fixed; delegate to the public accessor.
    fn active_signature(cache: &ForwardCache, clip: f64) -> Vec<bool> {
        cache.relu_signature(clip)
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let cfg = tiny_cfg();
        let mut p = init_model(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let input = random_input(&mut rng, 4, cfg.n_input);
        let mut targets = Mat::zeros(4, cfg.n_output);
        for t in 0..4 {
            let hot = rng.gen_range(0..cfg.n_output);
            *targets.at_mut(t, hot) = 1.0;
        }

        let (probs, cache) = forward(&p, &input).unwrap();
        let mut dlogits = probs.clone();
        dlogits.add_scaled(&targets, -1.0);
        let grads = backward(&p, &cache, &dlogits).unwrap();

        let h_step = 1e-5;
        let base_sig = active_signature(&cache, cfg.relu_clip);
        let grad_flat: Vec<f64> = grads.flat().concat();
        let n_params = grad_flat.len();
        let mut checked = 0;
        // probe a spread of parameters across every tensor
        for idx in (0..n_params).step_by(7) {
            let probe = |p: &mut ModelParams, delta: f64| {
                let mut i = idx;
                for s in p.flat_mut() {
                    if i < s.len() {
                        s[i] += delta;
                        break;
                    }
                    i -= s.len();
                }
            };
            probe(&mut p, h_step);
            let (pp, cp) = forward(&p, &input).unwrap();
            let lp = ce_loss(&pp, &targets);
            probe(&mut p, -2.0 * h_step);
            let (pm, cm) = forward(&p, &input).unwrap();
            let lm = ce_loss(&pm, &targets);
            probe(&mut p, h_step);
            if active_signature(&cp, cfg.relu_clip) != base_sig
                || active_signature(&cm, cfg.relu_clip) != base_sig
            {
                continue;
            }

            let fd = (lp - lm) / (2.0 * h_step);
            let g = grad_flat[idx];
            let denom = fd.abs().max(g.abs()).max(1e-8);
            assert!(
                ((fd - g) / denom).abs() < 1e-4,
                "param {idx}: fd {fd} vs analytic {g}"
            );
            checked += 1;
        }
        assert!(checked > 50);
    }

    #[test]
    fn dropout_gradients_match_finite_differences_with_frozen_masks() {
        let cfg = ModelConfig {
            dropout: 0.4,
            ..tiny_cfg()
        };
        let p = init_model(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let input = random_input(&mut rng, 3, cfg.n_input);
        let mut mask_rng = ChaCha8Rng::seed_from_u64(99);
        let (probs, cache) = forward_dropout(&p, &input, &mut mask_rng).unwrap();
        assert!(cache.masks.is_some());
        let mut targets = Mat::zeros(3, cfg.n_output);
        for t in 0..3 {
            *targets.at_mut(t, t % cfg.n_output) = 1.0;
        }
        let mut dlogits = probs.clone();
        dlogits.add_scaled(&targets, -1.0);
        let grads = backward(&p, &cache, &dlogits).unwrap();

        // finite differences re-run the forward with the same frozen masks
        let rerun = |params: &ModelParams| {
            let masks = cache.masks.clone();
            let (probs, c) = super::forward_inner(params, &input, masks).unwrap();
            (ce_loss(&probs, &targets), active_signature(&c, cfg.relu_clip))
        };
        let h_step = 1e-5;
        let base_sig = active_signature(&cache, cfg.relu_clip);
        let grad_flat: Vec<f64> = grads.flat().concat();
        let mut p2 = p.clone();
        let mut checked = 0;
        for idx in (0..grad_flat.len()).step_by(11) {
            let probe = |p: &mut ModelParams, delta: f64| {
                let mut i = idx;
                for s in p.flat_mut() {
                    if i < s.len() {
                        s[i] += delta;
                        break;
                    }
                    i -= s.len();
                }
            };
            probe(&mut p2, h_step);
            let (lp, sig_p) = rerun(&p2);
            probe(&mut p2, -2.0 * h_step);
            let (lm, sig_m) = rerun(&p2);
            probe(&mut p2, h_step);
            if sig_p != base_sig || sig_m != base_sig {
                continue;
            }
            let fd = (lp - lm) / (2.0 * h_step);
            let g = grad_flat[idx];
            let denom = fd.abs().max(g.abs()).max(1e-8);
            assert!(
                ((fd - g) / denom).abs() < 1e-4,
                "param {idx}: fd {fd} vs analytic {g}"
            );
            checked += 1;
        }
        assert!(checked > 30);
    }

    #[test]
    fn gradients_are_causal_like_the_forward_pass() {
        let cfg = tiny_cfg();
        let p = init_model(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let full = random_input(&mut rng, 3, cfg.n_input);
        let mut truncated = Mat::zeros(2, cfg.n_input);
        for t in 0..2 {
            truncated.row_mut(t).copy_from_slice(full.row(t));
        }

        // upstream gradient lives only on frames 0..2
        let mut dl_full = Mat::zeros(3, cfg.n_output);
        let mut dl_trunc = Mat::zeros(2, cfg.n_output);
        for t in 0..2 {
            for k in 0..cfg.n_output {
                let v = rng.gen_range(-1.0..1.0);
                *dl_full.at_mut(t, k) = v;
                *dl_trunc.at_mut(t, k) = v;
            }
        }

        let (_, cache_full) = forward(&p, &full).unwrap();
        let (_, cache_trunc) = forward(&p, &truncated).unwrap();
        let g_full = backward(&p, &cache_full, &dl_full).unwrap();
        let g_trunc = backward(&p, &cache_trunc, &dl_trunc).unwrap();
        for (a, b) in g_full.flat().iter().zip(g_trunc.flat().iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(x, y, "future frames leaked into past gradients");
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny_cfg();
        let p = init_model(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let input = random_input(&mut rng, 5, cfg.n_input);
        let (a, _) = forward(&p, &input).unwrap();
        let (b, _) = forward(&p, &input).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn log_probs_agree_with_probs() {
        let cfg = tiny_cfg();
        let p = init_model(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let input = random_input(&mut rng, 4, cfg.n_input);
        let (probs, cache) = forward(&p, &input).unwrap();
        let lp = cache.log_probs();
        for t in 0..4 {
            for k in 0..cfg.n_output {
                assert!((lp.at(t, k).exp() - probs.at(t, k)).abs() < 1e-12);
            }
        }
    }
}

