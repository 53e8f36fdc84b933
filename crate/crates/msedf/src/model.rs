//! The assembled captioning network.
//!
//! Per decoding step: embed the previous token, run it through the GRU stack,
//! aggregate the per-layer outputs with the configured stacking strategy,
//! concatenate the result with the image's fused L1 feature, and map through
//! L2 (GELU) and L3 into a softmax over the vocabulary plus the reserved pad
//! slot. The fused image feature enters at every timestep; hidden states
//! start at zero.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::START_ID;
use crate::error::{Error, Result};
use crate::layers::{Activation, EmbeddingLayer, GruCell, LinearLayer, Mode};
use crate::stacking::{stack_forward, StackConfig, StackStrategy, StackWeights};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub gru_hidden: usize,
    pub l1_out: usize,
    pub l2_out: usize,
    /// Vocabulary ids excluding pad; the output width is this plus one.
    pub vocab_size: usize,
    /// Width of the concatenated encoder features feeding L1.
    pub fused_input_dim: usize,
    pub stack: StackConfig,
    pub dropout_rate: f64,
}

impl ModelConfig {
    /// The published layer widths: embedding 256, GRU hidden 256, L1 256,
    /// L2 512, dropout 0.5.
    pub fn standard(vocab_size: usize, fused_input_dim: usize, stack: StackConfig) -> ModelConfig {
        ModelConfig {
            embed_dim: 256,
            gru_hidden: 256,
            l1_out: 256,
            l2_out: 512,
            vocab_size,
            fused_input_dim,
            stack,
            dropout_rate: 0.5,
        }
    }

    /// Softmax width: vocabulary size plus the reserved pad slot.
    pub fn output_dim(&self) -> usize {
        self.vocab_size + 1
    }

    pub fn stack_width(&self) -> usize {
        self.stack.output_width(self.gru_hidden)
    }

    pub fn l2_input_dim(&self) -> usize {
        self.l1_out + self.stack_width()
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 1 {
            return Err(Error::InvalidConfig("vocab_size must be at least 1".to_string()));
        }
        if self.embed_dim == 0 || self.gru_hidden == 0 || self.l1_out == 0 || self.l2_out == 0 {
            return Err(Error::InvalidConfig("layer widths must be positive".to_string()));
        }
        if self.fused_input_dim == 0 {
            return Err(Error::InvalidConfig(
                "fused_input_dim must be positive".to_string(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidConfig(format!(
                "dropout rate must be in [0,1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

/// Every trainable tensor of the network.
pub struct ModelParams {
    pub cfg: ModelConfig,
    pub embedding: EmbeddingLayer,
    pub gru_stack: Vec<GruCell>,
    pub stack_weights: StackWeights,
    pub l1: LinearLayer,
    pub l2: LinearLayer,
    pub l3: LinearLayer,
}

/// Deterministic initialization: matrices are Glorot-uniform draws from a
/// seeded stream, biases and stacking logits start at zero (uniform simplex
/// weights).
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng: ChaCha8Rng = rand::SeedableRng::seed_from_u64(seed);
    let embedding = EmbeddingLayer::new(cfg.vocab_size + 1, cfg.embed_dim, &mut rng);
    let mut gru_stack = Vec::with_capacity(cfg.stack.depth());
    for layer in 0..cfg.stack.depth() {
        let in_dim = if layer == 0 { cfg.embed_dim } else { cfg.gru_hidden };
        gru_stack.push(GruCell::new(in_dim, cfg.gru_hidden, &mut rng));
    }
    let stack_weights = StackWeights::zeros(cfg.stack.depth(), cfg.gru_hidden);
    let l1 = LinearLayer::new(cfg.fused_input_dim, cfg.l1_out, Activation::Gelu, &mut rng);
    let l2 = LinearLayer::new(cfg.l2_input_dim(), cfg.l2_out, Activation::Gelu, &mut rng);
    let l3 = LinearLayer::new(cfg.l2_out, cfg.output_dim(), Activation::None, &mut rng);
    Ok(ModelParams {
        cfg: cfg.clone(),
        embedding,
        gru_stack,
        stack_weights,
        l1,
        l2,
        l3,
    })
}

impl ModelParams {
    /// The trainable tensors in their canonical (checkpoint) order. The GWS
    /// and LWS logits are included only under their own strategy; the other
    /// strategies have no stacking parameters.
    pub fn trainable(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = Vec::new();
        out.push(("embedding.table".to_string(), self.embedding.table().clone()));
        for (i, cell) in self.gru_stack.iter().enumerate() {
            for (name, t) in cell.tensors() {
                out.push((format!("gru{i}.{name}"), t.clone()));
            }
        }
        match self.cfg.stack.strategy() {
            StackStrategy::Gws => {
                out.push(("stack.gws_logits".to_string(), self.stack_weights.gws_logits.clone()));
            }
            StackStrategy::Lws => {
                out.push(("stack.lws_logits".to_string(), self.stack_weights.lws_logits.clone()));
            }
            _ => {}
        }
        out.push(("l1.w".to_string(), self.l1.weights().clone()));
        out.push(("l1.b".to_string(), self.l1.bias().clone()));
        out.push(("l2.w".to_string(), self.l2.weights().clone()));
        out.push(("l2.b".to_string(), self.l2.bias().clone()));
        out.push(("l3.w".to_string(), self.l3.weights().clone()));
        out.push(("l3.b".to_string(), self.l3.bias().clone()));
        out
    }

    pub fn param_count(&self) -> usize {
        self.trainable().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zero_grads(&self) {
        for (_, t) in self.trainable() {
            t.zero_grad();
        }
    }

    pub fn deep_clone(&self) -> ModelParams {
        ModelParams {
            cfg: self.cfg.clone(),
            embedding: self.embedding.deep_clone(),
            gru_stack: self.gru_stack.iter().map(|c| c.deep_clone()).collect(),
            stack_weights: self.stack_weights.deep_clone(),
            l1: self.l1.deep_clone(),
            l2: self.l2.deep_clone(),
            l3: self.l3.deep_clone(),
        }
    }

    pub fn zero_hidden(&self) -> Vec<Tensor> {
        (0..self.cfg.stack.depth())
            .map(|_| Tensor::zeros(1, self.cfg.gru_hidden))
            .collect()
    }

    /// One decoding step. `fused` is the image's projected L1 feature,
    /// `hidden` holds one state per stack layer. Returns the token
    /// distribution and the new hidden states.
    pub fn forward_step(
        &self,
        tape: &Tape,
        fused: &Tensor,
        token_id: usize,
        hidden: &[Tensor],
        mode: Mode,
    ) -> Result<(Tensor, Vec<Tensor>)> {
        if hidden.len() != self.cfg.stack.depth() {
            return Err(Error::ShapeMismatch {
                op: "forward_step hidden",
                lhs: (self.cfg.stack.depth(), 0),
                rhs: (hidden.len(), 0),
            });
        }
        let embedded = self.embedding.lookup(tape, token_id)?;
        let mut x = crate::layers::apply_dropout(tape, mode, &embedded)?;
        let mut new_hidden = Vec::with_capacity(hidden.len());
        let mut outputs = Vec::with_capacity(hidden.len());
        for (layer, cell) in self.gru_stack.iter().enumerate() {
            let h = cell.step(tape, &x, &hidden[layer])?;
            outputs.push(h.clone());
            new_hidden.push(h.clone());
            if layer + 1 < self.gru_stack.len() {
                x = crate::layers::apply_dropout(tape, mode, &h)?;
            }
        }
        let stacked = stack_forward(tape, &self.cfg.stack, &self.stack_weights, &outputs)?;
        let merged = tape.concat(&[fused.clone(), stacked])?;
        let merged = crate::layers::apply_dropout(tape, mode, &merged)?;
        let h2 = self.l2.forward(tape, &merged)?;
        let logits = self.l3.forward(tape, &h2)?;
        let probs = tape.softmax(&logits)?;
        Ok((probs, new_hidden))
    }

    /// Teacher-forced pass: step `t` consumes `token_ids[t]` and predicts
    /// position `t + 1`. The sequence must begin with the start token; hidden
    /// states start at zero.
    pub fn forward_sequence(
        &self,
        tape: &Tape,
        fused: &Tensor,
        token_ids: &[usize],
        mode: Mode,
    ) -> Result<Vec<Tensor>> {
        if token_ids.is_empty() {
            return Err(Error::EmptyInput("forward_sequence token_ids"));
        }
        if token_ids[0] != START_ID {
            return Err(Error::InvalidConfig(format!(
                "teacher-forced input must begin with the start token, got id {}",
                token_ids[0]
            )));
        }
        let mut hidden = self.zero_hidden();
        let mut probs_seq = Vec::with_capacity(token_ids.len());
        for &token in token_ids {
            if token > self.cfg.vocab_size {
                return Err(Error::IndexOutOfRange {
                    what: "token id",
                    index: token,
                    len: self.cfg.vocab_size + 1,
                });
            }
            let (probs, new_hidden) = self.forward_step(tape, fused, token, &hidden, mode)?;
            hidden = new_hidden;
            probs_seq.push(probs);
        }
        Ok(probs_seq)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stacking::StackStrategy;
    use crate::tensor::finite_difference_check;

    fn tiny_cfg(strategy: StackStrategy, depth: usize) -> ModelConfig {
        ModelConfig {
            embed_dim: 4,
            gru_hidden: 4,
            l1_out: 4,
            l2_out: 5,
            vocab_size: 6,
            fused_input_dim: 3,
            stack: StackConfig::new(strategy, depth).unwrap(),
            dropout_rate: 0.5,
        }
    }

    fn eval_fused(params: &ModelParams, tape: &Tape, raw: &[f64]) -> Tensor {
        crate::fusion::fuse_raw(tape, raw, &params.l1, Mode::Eval, "img")
            .unwrap()
            .projected
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = tiny_cfg(StackStrategy::Lws, 2);
        let a = init_params(&cfg, 5).unwrap();
        let b = init_params(&cfg, 5).unwrap();
        for ((_, ta), (_, tb)) in a.trainable().iter().zip(b.trainable().iter()) {
            assert_eq!(ta.to_vec(), tb.to_vec());
        }
        let c = init_params(&cfg, 6).unwrap();
        let differs = a
            .trainable()
            .iter()
            .zip(c.trainable().iter())
            .any(|((_, ta), (_, tc))| ta.to_vec() != tc.to_vec());
        assert!(differs);
    }

    #[test]
    fn parameter_census_matches_closed_form() {
        // embedding (V+1)*e; per GRU layer 3*in*h + 3*h*h + 3*h;
        // stacking logits for the weighted strategies; L1, L2, L3 with biases
        let count = |cfg: &ModelConfig| {
            let v1 = cfg.vocab_size + 1;
            let e = cfg.embed_dim;
            let h = cfg.gru_hidden;
            let mut n = v1 * e;
            for layer in 0..cfg.stack.depth() {
                let in_dim = if layer == 0 { e } else { h };
                n += 3 * in_dim * h + 3 * h * h + 3 * h;
            }
            n += match cfg.stack.strategy() {
                StackStrategy::Gws => cfg.stack.depth(),
                StackStrategy::Lws => cfg.stack.depth() * h,
                _ => 0,
            };
            n += cfg.fused_input_dim * cfg.l1_out + cfg.l1_out;
            n += cfg.l2_input_dim() * cfg.l2_out + cfg.l2_out;
            n += cfg.l2_out * (cfg.vocab_size + 1) + cfg.vocab_size + 1;
            n
        };
        for (strategy, depth) in [
            (StackStrategy::Ns, 1),
            (StackStrategy::Ss, 2),
            (StackStrategy::Cs, 3),
            (StackStrategy::Gws, 2),
            (StackStrategy::Lws, 3),
        ] {
            let cfg = tiny_cfg(strategy, depth);
            let params = init_params(&cfg, 0).unwrap();
            assert_eq!(params.param_count(), count(&cfg), "{strategy} depth {depth}");
        }
    }

    #[test]
    fn every_tensor_registered_once() {
        let cfg = tiny_cfg(StackStrategy::Lws, 3);
        let params = init_params(&cfg, 1).unwrap();
        let trainable = params.trainable();
        for i in 0..trainable.len() {
            for j in i + 1..trainable.len() {
                assert!(
                    !Tensor::same_storage(&trainable[i].1, &trainable[j].1),
                    "{} and {} share storage",
                    trainable[i].0,
                    trainable[j].0
                );
            }
        }
    }

    #[test]
    fn probs_sum_to_one_for_all_strategies_and_depths() {
        for (strategy, depths) in [
            (StackStrategy::Ns, vec![1]),
            (StackStrategy::Ss, vec![2, 3, 4, 5]),
            (StackStrategy::Cs, vec![2, 3, 4, 5]),
            (StackStrategy::Gws, vec![2, 3, 4, 5]),
            (StackStrategy::Lws, vec![2, 3, 4, 5]),
        ] {
            for depth in depths {
                let cfg = tiny_cfg(strategy, depth);
                assert_eq!(
                    cfg.l2_input_dim(),
                    cfg.l1_out + if strategy == StackStrategy::Cs { depth * 4 } else { 4 }
                );
                let params = init_params(&cfg, 3).unwrap();
                let tape = Tape::new();
                let fused = eval_fused(&params, &tape, &[0.4, -0.2, 0.9]);
                let hidden = params.zero_hidden();
                let (probs, _) = params
                    .forward_step(&tape, &fused, START_ID, &hidden, Mode::Eval)
                    .unwrap();
                assert_eq!(probs.cols(), cfg.output_dim());
                let sum: f64 = probs.to_vec().iter().sum();
                assert!((sum - 1.0).abs() < 1e-9, "{strategy} depth {depth}: {sum}");
                assert!(probs.to_vec().iter().all(|&p| p >= 0.0));
            }
        }
    }

    #[test]
    fn zeroed_params_give_uniform_probs() {
        let cfg = tiny_cfg(StackStrategy::Ss, 2);
        let params = init_params(&cfg, 4).unwrap();
        for (_, t) in params.trainable() {
            t.set_values(&vec![0.0; t.len()]).unwrap();
        }
        let tape = Tape::new();
        let fused = eval_fused(&params, &tape, &[1.0, 2.0, 3.0]);
        let (probs, _) = params
            .forward_step(&tape, &fused, START_ID, &params.zero_hidden(), Mode::Eval)
            .unwrap();
        let expected = 1.0 / cfg.output_dim() as f64;
        for p in probs.to_vec() {
            assert!((p - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn ns_equals_gws_with_one_hot_first_layer() {
        // A depth-2 GWS stack whose alpha saturates on layer 1 reads only the
        // first layer's output, so with shared weights it must match the
        // depth-1 NS model exactly.
        let ns_cfg = tiny_cfg(StackStrategy::Ns, 1);
        let ns = init_params(&ns_cfg, 7).unwrap();

        let gws_cfg = tiny_cfg(StackStrategy::Gws, 2);
        let gws = init_params(&gws_cfg, 8).unwrap();

        // copy the shared tensors from the NS model
        gws.embedding
            .table()
            .set_values(&ns.embedding.table().to_vec())
            .unwrap();
        for (name, t) in gws.gru_stack[0].tensors() {
            let src = ns.gru_stack[0]
                .tensors()
                .iter()
                .find(|(n, _)| *n == name)
                .unwrap()
                .1
                .to_vec();
            t.set_values(&src).unwrap();
        }
        for (dst, src) in [
            (&gws.l1, &ns.l1),
            (&gws.l2, &ns.l2),
            (&gws.l3, &ns.l3),
        ] {
            dst.weights().set_values(&src.weights().to_vec()).unwrap();
            dst.bias().set_values(&src.bias().to_vec()).unwrap();
        }
        gws.stack_weights
            .gws_logits
            .set_values(&[0.0, -2000.0])
            .unwrap();

        let raw = [0.3, -0.8, 1.4];
        let tape = Tape::new();
        let fused_ns = eval_fused(&ns, &tape, &raw);
        let fused_gws = eval_fused(&gws, &tape, &raw);
        let (p_ns, _) = ns
            .forward_step(&tape, &fused_ns, START_ID, &ns.zero_hidden(), Mode::Eval)
            .unwrap();
        let (p_gws, _) = gws
            .forward_step(&tape, &fused_gws, START_ID, &gws.zero_hidden(), Mode::Eval)
            .unwrap();
        for (a, b) in p_ns.to_vec().iter().zip(p_gws.to_vec().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_sequence_contract() {
        let cfg = tiny_cfg(StackStrategy::Gws, 2);
        let params = init_params(&cfg, 9).unwrap();
        let tape = Tape::new();
        let fused = eval_fused(&params, &tape, &[0.1, 0.2, 0.3]);

        // must begin with start
        assert!(params
            .forward_sequence(&tape, &fused, &[4, 5], Mode::Eval)
            .is_err());
        assert!(params
            .forward_sequence(&tape, &fused, &[], Mode::Eval)
            .is_err());

        // length-1 input gives one probability vector
        let probs = params
            .forward_sequence(&tape, &fused, &[START_ID], Mode::Eval)
            .unwrap();
        assert_eq!(probs.len(), 1);

        // eval mode repeated is bitwise identical
        let seq = [START_ID, 4, 5, 6, END_ID_LOCAL];
        let a = params
            .forward_sequence(&tape, &fused, &seq, Mode::Eval)
            .unwrap();
        let b = params
            .forward_sequence(&tape, &fused, &seq, Mode::Eval)
            .unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.to_vec(), y.to_vec());
        }

        // token out of range
        assert!(params
            .forward_sequence(&tape, &fused, &[START_ID, 99], Mode::Eval)
            .is_err());
    }

    const END_ID_LOCAL: usize = crate::data::END_ID;

    #[test]
    fn sequence_loss_gradients_match_finite_differences() {
        // the full-model check across all strategies lives in the gradcheck
        // harness; this covers one small configuration end to end
        let cfg = tiny_cfg(StackStrategy::Lws, 2);
        let params = init_params(&cfg, 10).unwrap();
        let raw = [0.5, -0.5, 0.25];
        let tokens = [START_ID, 4, 5, crate::data::END_ID];
        let targets = [4usize, 5, crate::data::END_ID, crate::data::PAD_ID];
        let trainable = params.trainable();
        let err = finite_difference_check(&trainable, 1e-5, |tape| {
            let fused = crate::fusion::fuse_raw(tape, &raw, &params.l1, Mode::Eval, "img")?;
            let probs = params.forward_sequence(tape, &fused.projected, &tokens, Mode::Eval)?;
            crate::training::cross_entropy_loss(tape, &probs, &targets, crate::data::PAD_ID)
        })
        .unwrap();
        assert!(err < 1e-4, "sequence fd err {err}");
    }
}
