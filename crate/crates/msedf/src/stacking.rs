//! Aggregation of stacked decoder outputs.
//!
//! Given the per-layer outputs `D_1..D_n` of a stacked GRU decoder at one
//! timestep, four strategies combine them into the stack output `O`:
//!
//! * SS  — simple stacking, `O = D_n`
//! * CS  — concatenation stacking, `O = D_1 | D_2 | ... | D_n`
//! * GWS — global weighted stacking, `O = sum_i alpha_i D_i` with one scalar
//!   weight per layer
//! * LWS — local weighted stacking, `O = sum_i W_i ⊙ D_i` with one weight per
//!   layer per feature component
//!
//! NS names the non-stacked depth-1 baseline. The GWS/LWS weights are
//! trainable and constrained to the simplex (nonnegative, summing to one per
//! layer for alpha and per feature column for W); the constraint is enforced
//! by softmax reparameterization of unconstrained logits, so it holds exactly
//! after any optimizer update.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// Maximum supported stack depth.
pub const MAX_DEPTH: usize = 5;

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StackStrategy {
    Ns,
    Ss,
    Cs,
    Gws,
    Lws,
}

impl StackStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            StackStrategy::Ns => "ns",
            StackStrategy::Ss => "ss",
            StackStrategy::Cs => "cs",
            StackStrategy::Gws => "gws",
            StackStrategy::Lws => "lws",
        }
    }

    pub fn parse(s: &str) -> Result<StackStrategy> {
        match s {
            "ns" => Ok(StackStrategy::Ns),
            "ss" => Ok(StackStrategy::Ss),
            "cs" => Ok(StackStrategy::Cs),
            "gws" => Ok(StackStrategy::Gws),
            "lws" => Ok(StackStrategy::Lws),
            other => Err(Error::InvalidConfig(format!(
                "unknown stacking strategy `{other}` (expected ns, ss, cs, gws or lws)"
            ))),
        }
    }
}

impl std::fmt::Display for StackStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Validated (strategy, depth) pair: NS is exactly depth 1, the stacking
/// strategies require depth 2..=5.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct StackConfig {
    strategy: StackStrategy,
    depth: usize,
}

impl StackConfig {
    pub fn new(strategy: StackStrategy, depth: usize) -> Result<StackConfig> {
        match strategy {
            StackStrategy::Ns if depth != 1 => Err(Error::InvalidConfig(format!(
                "ns is the non-stacked baseline and requires depth 1, got {depth}"
            ))),
            StackStrategy::Ss | StackStrategy::Cs | StackStrategy::Gws | StackStrategy::Lws
                if depth < 2 =>
            {
                Err(Error::InvalidConfig(format!(
                    "{strategy} requires depth >= 2, got {depth}"
                )))
            }
            _ if depth > MAX_DEPTH => Err(Error::InvalidConfig(format!(
                "depth {depth} exceeds the maximum of {MAX_DEPTH}"
            ))),
            _ => Ok(StackConfig { strategy, depth }),
        }
    }

    pub fn strategy(&self) -> StackStrategy {
        self.strategy
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    /// Width of the stack output given a per-layer width of `hidden`.
    pub fn output_width(&self, hidden: usize) -> usize {
        match self.strategy {
            StackStrategy::Cs => self.depth * hidden,
            _ => hidden,
        }
    }
}

/// Unconstrained logits behind the GWS/LWS simplex weights.
pub struct StackWeights {
    /// `1 x n`; softmax gives the per-layer scalars alpha.
    pub gws_logits: Tensor,
    /// `n x hidden`; column-wise softmax gives the per-component weights W.
    pub lws_logits: Tensor,
}

impl StackWeights {
    /// All-zero logits: uniform alpha and uniform W, so no layer is
    /// privileged at initialization.
    pub fn zeros(depth: usize, hidden: usize) -> StackWeights {
        StackWeights {
            gws_logits: Tensor::zeros(1, depth),
            lws_logits: Tensor::zeros(depth, hidden),
        }
    }

    pub fn depth(&self) -> usize {
        self.gws_logits.cols()
    }

    pub fn deep_clone(&self) -> StackWeights {
        StackWeights {
            gws_logits: self.gws_logits.deep_clone(),
            lws_logits: self.lws_logits.deep_clone(),
        }
    }
}

/// Map the unconstrained logits onto the simplex: `alpha = softmax(gws
/// logits)` and each column of `W` is the softmax of the corresponding
/// `lws_logits` column across layers. Differentiable; the sums equal one up
/// to rounding.
pub fn normalize_weights(tape: &Tape, weights: &StackWeights) -> Result<(Tensor, Tensor)> {
    if weights.depth() < 2 {
        return Err(Error::InvalidConfig(
            "stack weights require depth >= 2".to_string(),
        ));
    }
    let alpha = tape.softmax(&weights.gws_logits)?;
    let w = tape.col_softmax(&weights.lws_logits);
    Ok((alpha, w))
}

/// SS: the final layer's output, unchanged.
pub fn aggregate_ss(d: &[Tensor]) -> Result<Tensor> {
    d.last().cloned().ok_or(Error::EmptyInput("aggregate_ss"))
}

/// CS: concatenation in layer order.
pub fn aggregate_cs(tape: &Tape, d: &[Tensor]) -> Result<Tensor> {
    if d.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "cs requires at least 2 layers, got {}",
            d.len()
        )));
    }
    tape.concat(d)
}

/// GWS: convex combination with per-layer scalars.
pub fn aggregate_gws(tape: &Tape, d: &[Tensor], alpha: &Tensor) -> Result<Tensor> {
    tape.weighted_sum(alpha, d)
}

/// LWS: componentwise convex combination.
pub fn aggregate_lws(tape: &Tape, d: &[Tensor], w: &Tensor) -> Result<Tensor> {
    tape.elementwise_weighted_sum(w, d)
}

/// Dispatch to the configured aggregation over the per-layer outputs at the
/// current timestep.
pub fn stack_forward(
    tape: &Tape,
    cfg: &StackConfig,
    weights: &StackWeights,
    per_layer_last: &[Tensor],
) -> Result<Tensor> {
    if per_layer_last.len() != cfg.depth() {
        return Err(Error::ShapeMismatch {
            op: "stack_forward",
            lhs: (cfg.depth(), 0),
            rhs: (per_layer_last.len(), 0),
        });
    }
    if cfg.depth() == 1 {
        return Ok(per_layer_last[0].clone());
    }
    match cfg.strategy() {
        StackStrategy::Ns => Ok(per_layer_last[0].clone()),
        StackStrategy::Ss => aggregate_ss(per_layer_last),
        StackStrategy::Cs => aggregate_cs(tape, per_layer_last),
        StackStrategy::Gws => {
            let (alpha, _) = normalize_weights(tape, weights)?;
            aggregate_gws(tape, per_layer_last, &alpha)
        }
        StackStrategy::Lws => {
            let (_, w) = normalize_weights(tape, weights)?;
            aggregate_lws(tape, per_layer_last, &w)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(vals: &[&[f64]]) -> Vec<Tensor> {
        vals.iter().map(|v| Tensor::row(v)).collect()
    }

    #[test]
    fn config_invariants() {
        assert!(StackConfig::new(StackStrategy::Ns, 1).is_ok());
        assert!(StackConfig::new(StackStrategy::Ns, 2).is_err());
        assert!(StackConfig::new(StackStrategy::Ss, 1).is_err());
        assert!(StackConfig::new(StackStrategy::Lws, 5).is_ok());
        assert!(StackConfig::new(StackStrategy::Lws, 6).is_err());
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in [
            StackStrategy::Ns,
            StackStrategy::Ss,
            StackStrategy::Cs,
            StackStrategy::Gws,
            StackStrategy::Lws,
        ] {
            assert_eq!(StackStrategy::parse(s.name()).unwrap(), s);
            let json = serde_json::to_string(&s).unwrap();
            assert_eq!(json, format!("\"{}\"", s.name()));
        }
        assert!(StackStrategy::parse("lws2").is_err());
    }

    #[test]
    fn uniform_logits_give_uniform_alpha() {
        let tape = Tape::new();
        let weights = StackWeights::zeros(4, 3);
        let (alpha, w) = normalize_weights(&tape, &weights).unwrap();
        for i in 0..4 {
            assert!((alpha.get(0, i) - 0.25).abs() < 1e-12);
        }
        for i in 0..4 {
            for j in 0..3 {
                assert!((w.get(i, j) - 0.25).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn saturated_column_is_one_hot() {
        let tape = Tape::new();
        let weights = StackWeights {
            gws_logits: Tensor::zeros(1, 3),
            lws_logits: Tensor::from_vec(3, 1, vec![50.0, 0.0, 0.0]).unwrap(),
        };
        let (_, w) = normalize_weights(&tape, &weights).unwrap();
        assert!(w.get(0, 0) > 1.0 - 1e-12);
        assert!(w.get(1, 0) < 1e-12 && w.get(2, 0) < 1e-12);
    }

    #[test]
    fn column_sums_are_one_for_random_logits() {
        let tape = Tape::new();
        let vals: Vec<f64> = (0..3 * 7).map(|i| ((i * 37) as f64 * 0.11).sin() * 3.0).collect();
        let weights = StackWeights {
            gws_logits: Tensor::row(&[0.3, -1.0, 2.2]),
            lws_logits: Tensor::from_vec(3, 7, vals).unwrap(),
        };
        let (alpha, w) = normalize_weights(&tape, &weights).unwrap();
        let alpha_sum: f64 = alpha.to_vec().iter().sum();
        assert!((alpha_sum - 1.0).abs() < 1e-9);
        for j in 0..7 {
            let s: f64 = (0..3).map(|i| w.get(i, j)).sum();
            assert!((s - 1.0).abs() < 1e-9, "column {j} sums to {s}");
        }
    }

    #[test]
    fn ss_returns_last_and_blocks_gradient_to_others() {
        let d = rows(&[&[1.0], &[2.0], &[3.0]]);
        let out = aggregate_ss(&d).unwrap();
        assert_eq!(out.to_vec(), vec![3.0]);

        // single layer degenerates to the sole output
        let single = rows(&[&[7.0]]);
        assert_eq!(aggregate_ss(&single).unwrap().to_vec(), vec![7.0]);
        assert!(aggregate_ss(&[]).is_err());

        let tape = Tape::new();
        let loss = tape.sum(&aggregate_ss(&d).unwrap());
        tape.backward(&loss).unwrap();
        assert_eq!(d[0].grad_vec(), vec![0.0]);
        assert_eq!(d[1].grad_vec(), vec![0.0]);
        assert_eq!(d[2].grad_vec(), vec![1.0]);
    }

    #[test]
    fn cs_concatenates_in_layer_order() {
        let tape = Tape::new();
        let d = rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let out = aggregate_cs(&tape, &d).unwrap();
        assert_eq!(out.to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(
            StackConfig::new(StackStrategy::Cs, 3).unwrap().output_width(256),
            768
        );
    }

    #[test]
    fn gws_selector_and_mean() {
        let tape = Tape::new();
        let d = rows(&[&[5.0, 5.0], &[9.0, 9.0]]);
        let one_hot = Tensor::row(&[1.0, 0.0]);
        assert_eq!(aggregate_gws(&tape, &d, &one_hot).unwrap().to_vec(), vec![5.0, 5.0]);

        let d = rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let half = Tensor::row(&[0.5, 0.5]);
        assert_eq!(aggregate_gws(&tape, &d, &half).unwrap().to_vec(), vec![2.0, 3.0]);
    }

    #[test]
    fn convexity_identical_inputs_are_fixed_points() {
        let tape = Tape::new();
        let d = rows(&[&[1.5, -2.0], &[1.5, -2.0], &[1.5, -2.0]]);
        let alpha = Tensor::row(&[0.2, 0.3, 0.5]);
        let out = aggregate_gws(&tape, &d, &alpha).unwrap();
        for (a, b) in out.to_vec().iter().zip([1.5, -2.0].iter()) {
            assert!((a - b).abs() < 1e-12);
        }

        let w = Tensor::from_vec(3, 2, vec![0.1, 0.6, 0.2, 0.3, 0.7, 0.1]).unwrap();
        let out = aggregate_lws(&tape, &d, &w).unwrap();
        for (a, b) in out.to_vec().iter().zip([1.5, -2.0].iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn lws_per_component_selector_and_gws_reduction() {
        let tape = Tape::new();
        let d = rows(&[&[5.0, 6.0], &[7.0, 8.0]]);
        let w = Tensor::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(aggregate_lws(&tape, &d, &w).unwrap().to_vec(), vec![5.0, 8.0]);

        // uniform columns reduce LWS to GWS with uniform alpha
        let w = Tensor::from_vec(2, 2, vec![0.5; 4]).unwrap();
        let alpha = Tensor::row(&[0.5, 0.5]);
        let lws = aggregate_lws(&tape, &d, &w).unwrap();
        let gws = aggregate_gws(&tape, &d, &alpha).unwrap();
        for (a, b) in lws.to_vec().iter().zip(gws.to_vec().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cs_gradient_routes_to_correct_layer() {
        let d = rows(&[&[0.5, 0.5], &[0.25, 0.25]]);
        let weights = Tensor::row(&[1.0, 2.0, 3.0, 4.0]);
        let params: Vec<(String, Tensor)> = d
            .iter()
            .enumerate()
            .map(|(i, t)| (format!("d{i}"), t.clone()))
            .collect();
        let err = crate::tensor::finite_difference_check(&params, 1e-5, |tape| {
            let cat = aggregate_cs(tape, &d)?;
            let weighted = tape.hadamard(&cat, &weights)?;
            Ok(tape.sum(&weighted))
        })
        .unwrap();
        assert!(err < 1e-9);
        let tape = Tape::new();
        for t in &d {
            t.zero_grad();
        }
        let cat = aggregate_cs(&tape, &d).unwrap();
        let weighted = tape.hadamard(&cat, &weights).unwrap();
        let loss = tape.sum(&weighted);
        tape.backward(&loss).unwrap();
        assert_eq!(d[0].grad_vec(), vec![1.0, 2.0]);
        assert_eq!(d[1].grad_vec(), vec![3.0, 4.0]);
    }

    #[test]
    fn stack_forward_dispatch_equivalences() {
        let tape = Tape::new();
        let d = rows(&[&[0.4, -1.0], &[2.0, 0.3], &[-0.7, 1.2]]);

        // (SS, 3) is aggregate_ss
        let cfg = StackConfig::new(StackStrategy::Ss, 3).unwrap();
        let weights = StackWeights::zeros(3, 2);
        let ss = stack_forward(&tape, &cfg, &weights, &d).unwrap();
        assert_eq!(ss.to_vec(), d[2].to_vec());

        // GWS with alpha one-hot on the last layer equals SS bitwise
        let gws_cfg = StackConfig::new(StackStrategy::Gws, 3).unwrap();
        let saturated = StackWeights {
            gws_logits: Tensor::row(&[-2000.0, -2000.0, 0.0]),
            lws_logits: Tensor::zeros(3, 2),
        };
        let gws = stack_forward(&tape, &gws_cfg, &saturated, &d).unwrap();
        assert_eq!(gws.to_vec(), ss.to_vec());

        // LWS with uniform columns equals GWS with uniform alpha
        let uniform = StackWeights::zeros(3, 2);
        let lws_cfg = StackConfig::new(StackStrategy::Lws, 3).unwrap();
        let lws = stack_forward(&tape, &lws_cfg, &uniform, &d).unwrap();
        let gws_u = stack_forward(&tape, &gws_cfg, &uniform, &d).unwrap();
        for (a, b) in lws.to_vec().iter().zip(gws_u.to_vec().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn stack_forward_depth_mismatch_is_rejected() {
        let tape = Tape::new();
        let cfg = StackConfig::new(StackStrategy::Ss, 3).unwrap();
        let weights = StackWeights::zeros(3, 2);
        let d = rows(&[&[1.0, 2.0]]);
        assert!(stack_forward(&tape, &cfg, &weights, &d).is_err());
    }
}
