//! Small dense networks with explicit backpropagation, the Adam rule, online
//! input standardization and the checkpoint file format.
//!
//! Checkpoint layout: one line of compact JSON ([`CheckpointHeader`])
//! terminated by `\n`, followed by `header.n_values` little-endian `f64`s.

use std::fs;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("non-finite activation in layer {layer}")]
    NonFinite { layer: usize },
    #[error("input length {got} does not match network input {expected}")]
    InputLength { expected: usize, got: usize },
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] io::Error),
    #[error("checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
}

/// Fully connected ReLU network with a linear output layer. All weights and
/// biases live in one flat vector, layer by layer (`W` row-major `out × in`,
/// then `b`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Activations recorded by [`Mlp::forward_traced`] for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    /// Input of every layer (post-ReLU of the previous one).
    inputs: Vec<Vec<f64>>,
}

fn layer_len(n_in: usize, n_out: usize) -> usize {
    n_in * n_out + n_out
}

impl Mlp {
    /// He-initialized weights; the output layer is scaled by `out_scale`.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], out_scale: f64, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "network needs input and output sizes");
        let mut params = Vec::new();
        let n_layers = sizes.len() - 1;
        for (l, win) in sizes.windows(2).enumerate() {
            let (n_in, n_out) = (win[0], win[1]);
            let scale = (2.0 / n_in as f64).sqrt() * if l + 1 == n_layers { out_scale } else { 1.0 };
            for _ in 0..n_in * n_out {
                let g: f64 = rng.sample(StandardNormal);
                params.push(g * scale);
            }
            params.extend(std::iter::repeat_n(0.0, n_out));
        }
        Self { sizes: sizes.to_vec(), params }
    }

    pub fn from_params(sizes: Vec<usize>, params: Vec<f64>) -> Result<Self, CheckpointError> {
        let expected: usize = sizes.windows(2).map(|w| layer_len(w[0], w[1])).sum();
        if sizes.len() < 2 || params.len() != expected {
            return Err(CheckpointError::Format(format!(
                "layer sizes {sizes:?} need {expected} values, got {}",
                params.len()
            )));
        }
        Ok(Self { sizes, params })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Offset of the bias vector of the last layer.
    pub fn output_bias_offset(&self) -> usize {
        self.params.len() - self.output_dim()
    }

    /// Zeroes the last layer's weight matrix (biases untouched).
    pub fn zero_output_weights(&mut self) {
        let n = self.sizes.len();
        let (n_in, n_out) = (self.sizes[n - 2], self.sizes[n - 1]);
        let start = self.params.len() - layer_len(n_in, n_out);
        self.params[start..start + n_in * n_out].iter_mut().for_each(|w| *w = 0.0);
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, NnError> {
        self.run(x, None)
    }

    pub fn forward_traced(&self, x: &[f64]) -> Result<(Vec<f64>, Trace), NnError> {
        let mut trace = Trace::default();
        let out = self.run(x, Some(&mut trace))?;
        Ok((out, trace))
    }

    fn run(&self, x: &[f64], mut trace: Option<&mut Trace>) -> Result<Vec<f64>, NnError> {
        if x.len() != self.input_dim() {
            return Err(NnError::InputLength { expected: self.input_dim(), got: x.len() });
        }
        let n_layers = self.sizes.len() - 1;
        let mut act = x.to_vec();
        let mut off = 0;
        for l in 0..n_layers {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[off..off + n_in * n_out];
            let b = &self.params[off + n_in * n_out..off + layer_len(n_in, n_out)];
            let mut next = b.to_vec();
            for (o, row) in w.chunks_exact(n_in).enumerate() {
                next[o] += row.iter().zip(&act).map(|(a, b)| a * b).sum::<f64>();
            }
            if l + 1 < n_layers {
                next.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            if next.iter().any(|v| !v.is_finite()) {
                return Err(NnError::NonFinite { layer: l });
            }
            if let Some(t) = trace.as_deref_mut() {
                t.inputs.push(std::mem::replace(&mut act, next));
            } else {
                act = next;
            }
            off += layer_len(n_in, n_out);
        }
        Ok(act)
    }

    /// Accumulates `∂(grad_out · y)/∂params` into `grads` and returns the
    /// gradient with respect to the network input.
    pub fn backward(&self, trace: &Trace, grad_out: &[f64], grads: &mut [f64]) -> Vec<f64> {
        let n_layers = self.sizes.len() - 1;
        let mut offsets = Vec::with_capacity(n_layers);
        let mut off = 0;
        for l in 0..n_layers {
            offsets.push(off);
            off += layer_len(self.sizes[l], self.sizes[l + 1]);
        }
        let mut delta = grad_out.to_vec();
        for l in (0..n_layers).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let off = offsets[l];
            let input = &trace.inputs[l];
            let w = &self.params[off..off + n_in * n_out];
            for o in 0..n_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let g_row = &mut grads[off + o * n_in..off + (o + 1) * n_in];
                for (g, &a) in g_row.iter_mut().zip(input) {
                    *g += d * a;
                }
                grads[off + n_in * n_out + o] += d;
            }
            let mut prev = vec![0.0; n_in];
            for (o, row) in w.chunks_exact(n_in).enumerate() {
                let d = delta[o];
                if d != 0.0 {
                    for (p, &wv) in prev.iter_mut().zip(row) {
                        *p += d * wv;
                    }
                }
            }
            if l > 0 {
                // ReLU derivative; `input` is the post-activation of layer l-1.
                for (p, &a) in prev.iter_mut().zip(input) {
                    if a <= 0.0 {
                        *p = 0.0;
                    }
                }
            }
            delta = prev;
        }
        delta
    }
}

/// Adam optimizer state for one flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }

    /// One descent step on `params` along `grads`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Per-coordinate running mean and population variance (Welford).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub count: u64,
    pub mean: Vec<f64>,
    m2: Vec<f64>,
}

impl RunningStats {
    pub fn new(dim: usize) -> Self {
        Self { count: 0, mean: vec![0.0; dim], m2: vec![0.0; dim] }
    }

    pub fn from_parts(count: u64, mean: Vec<f64>, var: Vec<f64>) -> Self {
        let m2 = var.iter().map(|v| v * count as f64).collect();
        Self { count, mean, m2 }
    }

    pub fn update(&mut self, x: &[f64]) {
        self.count += 1;
        let n = self.count as f64;
        for ((m, s), &v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let d = v - *m;
            *m += d / n;
            *s += d * (v - *m);
        }
    }

    pub fn var(&self) -> Vec<f64> {
        if self.count == 0 {
            return vec![1.0; self.mean.len()];
        }
        self.m2.iter().map(|s| s / self.count as f64).collect()
    }

    /// `(x - mean)/√(var + 1e-8)`; identity before the first update.
    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        if self.count == 0 {
            return x.to_vec();
        }
        x.iter()
            .zip(&self.mean)
            .zip(self.var())
            .map(|((&v, &m), var)| (v - m) / (var + 1e-8).sqrt())
            .collect()
    }
}

/// JSON header of a checkpoint file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: String,
    pub layers: Vec<usize>,
    pub n_values: usize,
    /// Component-specific metadata (running stats, clip bounds, window, ...).
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn write_checkpoint(path: &Path, header: &CheckpointHeader, values: &[f64]) -> Result<(), CheckpointError> {
    if header.n_values != values.len() {
        return Err(CheckpointError::Format("header value count mismatch".into()));
    }
    let mut buf = serde_json::to_vec(header)?;
    buf.push(b'\n');
    buf.reserve(values.len() * 8);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<(CheckpointHeader, Vec<f64>), CheckpointError> {
    let mut reader = BufReader::new(fs::File::open(path)?);
    let mut line = Vec::new();
    reader.read_until(b'\n', &mut line)?;
    if line.last() != Some(&b'\n') {
        return Err(CheckpointError::Format("missing header terminator".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&line[..line.len() - 1])?;
    let mut raw = Vec::new();
    reader.read_to_end(&mut raw)?;
    if raw.len() != header.n_values * 8 {
        return Err(CheckpointError::Format(format!(
            "expected {} payload bytes, found {}",
            header.n_values * 8,
            raw.len()
        )));
    }
    let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((header, values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Mlp::new(&[4, 6, 5, 3], 1.0, &mut rng);
        let x = [0.3, -1.2, 0.8, 0.1];
        let g_out = [0.7, -0.2, 1.1];
        let (_, trace) = net.forward_traced(&x).unwrap();
        let mut grads = vec![0.0; net.num_params()];
        let g_in = net.backward(&trace, &g_out, &mut grads);
        let objective = |n: &Mlp, x: &[f64]| -> f64 {
            n.forward(x).unwrap().iter().zip(&g_out).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        for i in (0..net.num_params()).step_by(7) {
            let mut p = net.clone();
            p.params_mut()[i] += h;
            let mut m = net.clone();
            m.params_mut()[i] -= h;
            let fd = (objective(&p, &x) - objective(&m, &x)) / (2.0 * h);
            assert!((fd - grads[i]).abs() < 1e-6 * (1.0 + fd.abs()), "param {i}: {fd} vs {}", grads[i]);
        }
        for k in 0..4 {
            let mut xp = x;
            xp[k] += h;
            let mut xm = x;
            xm[k] -= h;
            let fd = (objective(&net, &xp) - objective(&net, &xm)) / (2.0 * h);
            assert!((fd - g_in[k]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn adam_zero_lr_is_noop_and_descends_quadratic() {
        let mut p = vec![1.0, -2.0];
        let mut opt = Adam::new(2);
        opt.step(&mut p, &[1.0, 1.0], 0.0);
        assert_eq!(p, vec![1.0, -2.0]);
        for _ in 0..2000 {
            let g = vec![2.0 * p[0], 2.0 * p[1]];
            opt.step(&mut p, &g, 1e-2);
        }
        assert!(p[0].abs() < 1e-2 && p[1].abs() < 1e-2);
    }

    #[test]
    fn welford_hand_values() {
        let mut st = RunningStats::new(1);
        for v in [1.0, 2.0, 3.0] {
            st.update(&[v]);
        }
        assert_eq!(st.mean, vec![2.0]);
        assert!((st.var()[0] - 2.0 / 3.0).abs() < 1e-15);
        let z = st.normalize(&[3.0])[0];
        assert!((z - 1.0 / (2.0f64 / 3.0 + 1e-8).sqrt()).abs() < 1e-12);
        assert!((z - 1.224744).abs() < 1e-6);

        let mut c = RunningStats::new(2);
        for _ in 0..10 {
            c.update(&[5.0, -1.0]);
        }
        assert_eq!(c.normalize(&[5.0, -1.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn non_finite_activation_reports_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = Mlp::new(&[2, 3, 1], 1.0, &mut rng);
        net.params_mut()[0] = f64::INFINITY;
        match net.forward(&[1.0, 1.0]) {
            Err(NnError::NonFinite { layer }) => assert_eq!(layer, 0),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(net.forward(&[1.0]), Err(NnError::InputLength { .. })));
    }

    #[test]
    fn checkpoint_roundtrip_and_corruption() {
        let dir = std::env::temp_dir().join(format!("plumeseek-nn-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("net.ckpt");
        let values = vec![1.5, -0.25, f64::MIN_POSITIVE, 3.0e300];
        let header = CheckpointHeader {
            kind: "test".into(),
            layers: vec![1, 2],
            n_values: values.len(),
            meta: serde_json::json!({"k": 8}),
        };
        write_checkpoint(&path, &header, &values).unwrap();
        let (h2, v2) = read_checkpoint(&path).unwrap();
        assert_eq!(h2, header);
        assert_eq!(v2, values);

        let mut bytes = fs::read(&path).unwrap();
        bytes.pop();
        fs::write(&path, bytes).unwrap();
        assert!(matches!(read_checkpoint(&path), Err(CheckpointError::Format(_))));
        fs::remove_dir_all(&dir).ok();
    }
}
