//! Per-layer channel-importance gates.
//!
//! A module sits in front of a prunable layer and scales that layer's input
//! channel-wise: depthwise conv -> GAP -> FC -> batch norm -> ReLU, then a
//! gate head turns the per-channel activations into a scaling vector in
//! [0, 1]. The default head is the softmax-constrained one whose outputs feed
//! the pruning statistics; a per-channel sigmoid head is kept as an ablation
//! arm.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Param, ParamId, Tape, Tensor, Var};

/// Constraint-relaxation factor f(alpha) = C / (1 + alpha*(C-1)).
///
/// At alpha=0 a uniform softmax output times f is exactly 1 (identity gate);
/// at alpha=1 the softmax acts unscaled.
pub fn mitigation(channels: usize, alpha: f64) -> Result<f64> {
    if channels == 0 {
        return Err(Error::InvalidInput("mitigation needs at least one channel".into()));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidInput(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(channels as f64 / (1.0 + alpha * (channels as f64 - 1.0)))
}

/// Linear ramp 0 -> alpha_target over warmup_steps, then constant.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MitigationSchedule {
    pub alpha_target: f64,
    pub warmup_steps: u64,
}

impl MitigationSchedule {
    pub fn new(alpha_target: f64, warmup_steps: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha_target) {
            return Err(Error::InvalidInput("alpha_target outside [0, 1]".into()));
        }
        Ok(MitigationSchedule {
            alpha_target,
            warmup_steps,
        })
    }

    pub fn alpha_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.alpha_target
        } else {
            self.alpha_target * step as f64 / self.warmup_steps as f64
        }
    }
}

/// Turns the post-ReLU channel activations into (statistics vector, gate).
pub trait GateStrategy: Sync {
    fn name(&self) -> &'static str;

    /// Returns `(s, gate)`: `s` is what the statistics average, `gate` is the
    /// scaling vector applied to the feature maps.
    fn apply(&self, tape: &mut Tape, z: Var, channels: usize, alpha: f64) -> Result<(Var, Var)>;
}

/// softmax -> mitigation multiply -> clipped ReLU at 1.
pub struct SoftmaxGate;

impl GateStrategy for SoftmaxGate {
    fn name(&self) -> &'static str {
        "softmax"
    }

    fn apply(&self, tape: &mut Tape, z: Var, channels: usize, alpha: f64) -> Result<(Var, Var)> {
        let s = tape.softmax(z)?;
        let relaxed = tape.mul_scalar(s, mitigation(channels, alpha)?);
        let gate = tape.clipped_relu(relaxed, 1.0)?;
        Ok((s, gate))
    }
}

/// Per-channel sigmoid, the squeeze-and-excitation style ablation arm.
/// Statistics average the sigmoid outputs directly; alpha is unused.
pub struct SigmoidGate;

impl GateStrategy for SigmoidGate {
    fn name(&self) -> &'static str {
        "sigmoid"
    }

    fn apply(&self, tape: &mut Tape, z: Var, _channels: usize, _alpha: f64) -> Result<(Var, Var)> {
        let s = tape.sigmoid(z);
        Ok((s, s))
    }
}

static GATES: &[&dyn GateStrategy] = &[&SoftmaxGate, &SigmoidGate];

pub fn gate_by_name(name: &str) -> Result<&'static dyn GateStrategy> {
    GATES
        .iter()
        .copied()
        .find(|g| g.name() == name)
        .ok_or_else(|| Error::UnknownGate(name.to_string()))
}

pub fn gate_names() -> Vec<&'static str> {
    GATES.iter().map(|g| g.name()).collect()
}

/// Metadata of a module, serialized with the model topology.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionMeta {
    pub layer_id: String,
    pub channels: usize,
    pub fc_mode: bool,
    pub gate: String,
    pub kernel_size: usize,
}

/// One attention module with its parameters.
#[derive(Debug, Clone)]
pub struct AttentionModule {
    pub meta: AttentionMeta,
    /// Absent in fc_mode.
    pub dw_kernel: Option<Param>,
    pub fc_weight: Param,
    pub fc_bias: Param,
    pub bn_gamma: Param,
    pub bn_beta: Param,
    pub bn_mean: Tensor,
    pub bn_var: Tensor,
}

impl AttentionModule {
    /// Fresh module at the identity gate: FC weight/bias zero, batch norm at
    /// identity, small random depthwise kernel.
    pub fn new(layer_id: &str, channels: usize, fc_mode: bool, gate: &str, kernel_size: usize, seed: u64) -> Result<Self> {
        gate_by_name(gate)?;
        let prefix = format!("attn.{layer_id}");
        let dw_kernel = if fc_mode {
            None
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = channels * kernel_size * kernel_size;
            let data = (0..n).map(|_| rng.gen_range(-0.01..0.01)).collect();
            Some(Param::new(
                ParamId::new(&prefix, "dw_kernel"),
                Tensor::from_vec(&[channels, 1, kernel_size, kernel_size], data)?,
            ))
        };
        Ok(AttentionModule {
            meta: AttentionMeta {
                layer_id: layer_id.to_string(),
                channels,
                fc_mode,
                gate: gate.to_string(),
                kernel_size,
            },
            dw_kernel,
            fc_weight: Param::new(ParamId::new(&prefix, "fc_weight"), Tensor::zeros(&[channels, channels])),
            fc_bias: Param::new(ParamId::new(&prefix, "fc_bias"), Tensor::zeros(&[channels])),
            bn_gamma: Param::new(ParamId::new(&prefix, "bn_gamma"), Tensor::full(&[channels], 1.0)),
            bn_beta: Param::new(ParamId::new(&prefix, "bn_beta"), Tensor::zeros(&[channels])),
            bn_mean: Tensor::zeros(&[channels]),
            bn_var: Tensor::full(&[channels], 1.0),
        })
    }

    /// Gate the input. Returns `(scaled, s)` where `s` feeds the statistics.
    ///
    /// `train` selects batch-statistics mode for the module's batch norm.
    pub fn forward(&mut self, tape: &mut Tape, x: Var, alpha: f64, train: bool) -> Result<(Var, Var)> {
        let c = self.meta.channels;
        let got_c = tape.value(x).dim(1);
        if got_c != c {
            return Err(Error::dim(format!("attention module {}", self.meta.layer_id), c, got_c));
        }
        let pooled = if self.meta.fc_mode {
            x
        } else {
            let k = tape.param(self.dw_kernel.as_ref().expect("dw kernel present"));
            let pad = self.meta.kernel_size / 2;
            let d = tape.depthwise_conv2d(x, k, 1, pad)?;
            tape.global_average_pool(d)?
        };
        let w = tape.param(&self.fc_weight);
        let b = tape.param(&self.fc_bias);
        let z = tape.linear(pooled, w, Some(b))?;
        let g = tape.param(&self.bn_gamma);
        let bb = tape.param(&self.bn_beta);
        let z = tape.batchnorm(z, g, bb, &mut self.bn_mean, &mut self.bn_var, train, 0.1, 1e-5)?;
        let z = tape.relu(z);
        let (s, gate) = gate_by_name(&self.meta.gate)?.apply(tape, z, c, alpha)?;
        let scaled = tape.channel_scale(x, gate)?;
        Ok((scaled, s))
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        if let Some(k) = &self.dw_kernel {
            out.push(k);
        }
        out.extend([&self.fc_weight, &self.fc_bias, &self.bn_gamma, &self.bn_beta]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = Vec::new();
        if let Some(k) = &mut self.dw_kernel {
            out.push(k);
        }
        out.push(&mut self.fc_weight);
        out.push(&mut self.fc_bias);
        out.push(&mut self.bn_gamma);
        out.push(&mut self.bn_beta);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mitigation_endpoints() {
        for c in [1usize, 2, 64, 512] {
            assert_eq!(mitigation(c, 0.0).unwrap(), c as f64);
            assert_eq!(mitigation(c, 1.0).unwrap(), 1.0);
        }
    }

    #[test]
    fn mitigation_mid_value() {
        let v = mitigation(64, 0.06).unwrap();
        assert!((v - 64.0 / 4.78).abs() < 1e-10);
        assert!((v - 13.3891).abs() < 1e-3);
    }

    #[test]
    fn mitigation_monotone_decreasing() {
        let mut prev = f64::INFINITY;
        for i in 0..=100 {
            let v = mitigation(64, i as f64 / 100.0).unwrap();
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn mitigation_rejects_bad_alpha() {
        assert!(mitigation(4, -0.1).is_err());
        assert!(mitigation(4, 1.1).is_err());
    }

    #[test]
    fn schedule_ramp() {
        let s = MitigationSchedule::new(0.06, 1000).unwrap();
        assert_eq!(s.alpha_at(0), 0.0);
        assert_eq!(s.alpha_at(1000), 0.06);
        assert_eq!(s.alpha_at(5000), 0.06);
        assert!((s.alpha_at(250) - 0.015).abs() < 1e-12);
        // nondecreasing
        let mut prev = -1.0;
        for step in 0..1200 {
            let a = s.alpha_at(step);
            assert!(a >= prev);
            prev = a;
        }
    }

    #[test]
    fn identity_gate_at_init() {
        let mut m = AttentionModule::new("conv2", 4, false, "softmax", 3, 7).unwrap();
        let mut tape = Tape::new();
        let x = Tensor::from_vec(&[2, 4, 3, 3], (0..72).map(|i| i as f64 * 0.1 - 3.0).collect()).unwrap();
        let xv = tape.leaf(x.clone());
        let (scaled, s) = m.forward(&mut tape, xv, 0.0, true).unwrap();
        assert!(tape.value(scaled).max_abs_diff(&x) < 1e-12);
        for v in &tape.value(s).data {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn full_constraint_scales_by_inverse_channels() {
        let mut m = AttentionModule::new("conv2", 4, false, "softmax", 3, 7).unwrap();
        let mut tape = Tape::new();
        let x = Tensor::full(&[1, 4, 2, 2], 2.0);
        let xv = tape.leaf(x.clone());
        let (scaled, _) = m.forward(&mut tape, xv, 1.0, true).unwrap();
        for v in &tape.value(scaled).data {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn gate_entries_bounded_and_rows_normalized() {
        let mut m = AttentionModule::new("conv2", 6, false, "softmax", 3, 3).unwrap();
        // randomize the fc stage so the gate is nontrivial
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for v in m.fc_weight.value.data.iter_mut() {
            *v = rng.gen_range(-2.0..2.0);
        }
        let mut tape = Tape::new();
        let n = 3;
        let x = Tensor::from_vec(&[n, 6, 2, 2], (0..n * 24).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let xv = tape.leaf(x);
        let (_, s) = m.forward(&mut tape, xv, 0.5, true).unwrap();
        for ni in 0..n {
            let row: f64 = tape.value(s).data[ni * 6..(ni + 1) * 6].iter().sum();
            assert!((row - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_emphasis_tradeoff() {
        // raising one logit strictly lowers every other softmax entry
        let mut tape = Tape::new();
        let base = tape.leaf(Tensor::from_vec(&[1, 4], vec![0.1, 0.2, 0.3, 0.4]).unwrap());
        let bumped = tape.leaf(Tensor::from_vec(&[1, 4], vec![0.1, 1.2, 0.3, 0.4]).unwrap());
        let s0 = tape.softmax(base).unwrap();
        let s1 = tape.softmax(bumped).unwrap();
        for c in [0usize, 2, 3] {
            assert!(tape.value(s1).data[c] < tape.value(s0).data[c]);
        }
        assert!(tape.value(s1).data[1] > tape.value(s0).data[1]);
    }

    #[test]
    fn fc_mode_skips_spatial_stages() {
        let mut m = AttentionModule::new("fc1", 5, true, "softmax", 3, 0).unwrap();
        assert!(m.dw_kernel.is_none());
        let mut tape = Tape::new();
        let x = Tensor::from_vec(&[2, 5], (0..10).map(|i| i as f64).collect()).unwrap();
        let xv = tape.leaf(x.clone());
        let (scaled, _) = m.forward(&mut tape, xv, 0.0, true).unwrap();
        assert!(tape.value(scaled).max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn sigmoid_gate_registered() {
        assert!(gate_by_name("sigmoid").is_ok());
        assert!(gate_by_name("nope").is_err());
        let mut m = AttentionModule::new("conv2", 3, false, "sigmoid", 3, 1).unwrap();
        let mut tape = Tape::new();
        let xv = tape.leaf(Tensor::full(&[1, 3, 2, 2], 1.0));
        let (scaled, s) = m.forward(&mut tape, xv, 0.0, true).unwrap();
        // zero-init fc => sigmoid(0) = 0.5 everywhere
        for v in &tape.value(s).data {
            assert!((v - 0.5).abs() < 1e-12);
        }
        for v in &tape.value(scaled).data {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn module_gradients_match_finite_differences() {
        use crate::tensor::gradcheck;
        let mut m = AttentionModule::new("conv2", 3, false, "softmax", 3, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for v in m.fc_weight.value.data.iter_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
        let x = Tensor::from_vec(&[4, 3, 3, 3], (0..108).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let run = |m: &AttentionModule, x: &Tensor| {
            let mut m = m.clone();
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let (scaled, _) = m.forward(&mut tape, xv, 0.5, true).unwrap();
            // weighted sum keeps the upstream gradient non-uniform
            let mut wr = ChaCha8Rng::seed_from_u64(43);
            let w = tape.leaf(
                Tensor::from_vec(&[4, 3, 3, 3], (0..108).map(|_| wr.gen_range(-1.0..1.0)).collect()).unwrap(),
            );
            let prod = tape.mul(scaled, w).unwrap();
            let loss = tape.sum(prod);
            (tape, loss)
        };
        let (mut tape, loss) = run(&m, &x);
        let grads = tape.backward(loss).unwrap();
        for idx in 0..m.params().len() {
            let id = m.params()[idx].id.clone();
            let analytic = grads.get(&id).unwrap().clone();
            let numeric = {
                let mut probe = m.clone();
                let base = m.clone();
                let p = probe.params_mut().into_iter().nth(idx).unwrap();
                gradcheck::finite_difference(p, 1e-5, |p| {
                    let mut trial = base.clone();
                    *trial.params_mut().into_iter().nth(idx).unwrap() = p.clone();
                    let (tape, loss) = run(&trial, &x);
                    tape.value(loss).data[0]
                })
            };
            let err = gradcheck::max_relative_error(&analytic, &numeric);
            assert!(err < 1e-4, "param {id}: relative error {err}");
        }
    }
}
