//! Network building blocks shared by the autoencoder, the estimators and the U-Net.
//!
//! Every block owns [`ParamId`]s into a caller-supplied [`ParamStore`] and
//! records its forward pass on a [`Graph`]. Leading axes are treated as batch
//! axes throughout, so permuting rows of the input permutes the output rows.

use std::f64::consts::PI;

use rand::Rng;

use crate::error::{contract, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

/// Dense layer `y = x·W + b` with `W` stored as `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self::with_gain(store, name, in_dim, out_dim, 1.0, rng)
    }

    /// Uniform fan-in initialization scaled by `gain`.
    pub fn with_gain<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let bound = gain / (in_dim as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::uniform(&[in_dim, out_dim], -bound, bound, rng),
        );
        let bias = store.add(
            format!("{name}.bias"),
            Tensor::uniform(&[out_dim], -bound, bound, rng),
        );
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros(&[in_dim, out_dim]));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w);
        g.add(y, b)
    }
}

/// Layer normalization over the last axis with a learned per-feature affine.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.weight"), Tensor::ones(&[dim]));
        let beta = store.add(format!("{name}.bias"), Tensor::zeros(&[dim]));
        Self { gamma, beta, dim }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let n = g.layer_norm(x);
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let y = g.mul(n, gamma);
        g.add(y, beta)
    }
}

/// Sinusoidal embedding of a low-dimensional conditioning vector with trainable frequencies.
///
/// Output entry `2k` is `sin(2π κ_k·c)` and `2k+1` is `cos(2π κ_k·c)`.
#[derive(Clone, Debug)]
pub struct FourierFeatureMap {
    pub kappa: ParamId,
    pub num_freqs: usize,
    pub input_dim: usize,
}

impl FourierFeatureMap {
    /// `κ` is drawn from a standard normal distribution.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        num_freqs: usize,
        input_dim: usize,
        rng: &mut R,
    ) -> Self {
        let kappa = store.add(
            format!("{name}.kappa"),
            Tensor::randn(&[num_freqs, input_dim], rng),
        );
        Self {
            kappa,
            num_freqs,
            input_dim,
        }
    }

    pub fn output_dim(&self) -> usize {
        2 * self.num_freqs
    }

    /// `c[..., input_dim] -> [..., 2K]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, c: Var) -> Var {
        let shape = g.shape(c).to_vec();
        assert_eq!(
            shape.last().copied(),
            Some(self.input_dim),
            "FFM expects conditioning of width {}, got {shape:?}",
            self.input_dim
        );
        let k = self.num_freqs;
        let kappa = g.param(store, self.kappa);
        let kt = g.permute(kappa, &[1, 0]);
        let proj = g.matmul(c, kt);
        let proj = g.scale(proj, 2.0 * PI);
        let mut split = shape.clone();
        *split.last_mut().unwrap() = k;
        split.push(1);
        let s = g.sin(proj);
        let s = g.reshape(s, &split);
        let co = g.cos(proj);
        let co = g.reshape(co, &split);
        let axis = split.len() - 1;
        let both = g.concat(&[s, co], axis);
        let mut out = shape;
        *out.last_mut().unwrap() = 2 * k;
        g.reshape(both, &out)
    }
}

/// Generator tail: FFM embedding → dense → layer norm → Mish → dense.
#[derive(Clone, Debug)]
pub struct WeightGenerator {
    pub fc_a: Linear,
    pub norm: LayerNorm,
    pub fc_b: Linear,
}

impl WeightGenerator {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, embedding: Var) -> Var {
        let h = self.fc_a.forward(g, store, embedding);
        let h = self.norm.forward(g, store, h);
        let h = g.mish(h);
        self.fc_b.forward(g, store, h)
    }
}

/// Linear layer whose weights and bias are generated per conditioning token.
#[derive(Clone, Debug)]
pub struct HyperLinear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub generator: WeightGenerator,
}

/// Per-token weights `[tokens, out, in]` and biases `[tokens, out]`.
#[derive(Clone, Copy, Debug)]
pub struct GeneratedWeights {
    pub weight: Var,
    pub bias: Var,
}

impl HyperLinear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        embed_dim: usize,
        hidden: usize,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let fc_a = Linear::new(store, &format!("{name}.gen.fc_a"), embed_dim, hidden, rng);
        let norm = LayerNorm::new(store, &format!("{name}.gen.norm"), hidden);
        // Generated weights inherit a fan-in scale of the target layer.
        let gain = 1.0 / (in_dim as f64).sqrt();
        let fc_b = Linear::with_gain(
            store,
            &format!("{name}.gen.fc_b"),
            hidden,
            Self::flat_len(in_dim, out_dim),
            gain,
            rng,
        );
        Self {
            in_dim,
            out_dim,
            generator: WeightGenerator { fc_a, norm, fc_b },
        }
    }

    pub fn flat_len(in_dim: usize, out_dim: usize) -> usize {
        out_dim * in_dim + out_dim
    }

    /// Generates `(W, b)` for every token of an embedding `[tokens, embed_dim]`.
    pub fn generate(&self, g: &mut Graph, store: &ParamStore, embedding: Var) -> GeneratedWeights {
        let tokens = g.shape(embedding)[0];
        let flat = self.generator.forward(g, store, embedding);
        let split = self.out_dim * self.in_dim;
        let w = g.slice(flat, 1, 0, split);
        let weight = g.reshape(w, &[tokens, self.out_dim, self.in_dim]);
        let bias = g.slice(flat, 1, split, split + self.out_dim);
        GeneratedWeights { weight, bias }
    }

    /// Applies generated weights to `x[tokens, batch, in]`, giving `[tokens, batch, out]`.
    pub fn apply(&self, g: &mut Graph, weights: GeneratedWeights, x: Var) -> Var {
        let shape = g.shape(x).to_vec();
        assert!(
            shape.len() == 3 && shape[2] == self.in_dim,
            "hyperlinear expects [tokens, batch, {}], got {shape:?}",
            self.in_dim
        );
        let y = g.bmm(x, weights.weight, true);
        let b = g.reshape(weights.bias, &[shape[0], 1, self.out_dim]);
        g.add(y, b)
    }
}

/// Dense → layer norm → ReLU → dropout.
#[derive(Clone, Debug)]
pub struct FcBlock {
    pub linear: Linear,
    pub norm: LayerNorm,
    pub dropout: f64,
}

impl FcBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            linear: Linear::new(store, &format!("{name}.fc"), in_dim, out_dim, rng),
            norm: LayerNorm::new(store, &format!("{name}.norm"), out_dim),
            dropout,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.linear.forward(g, store, x);
        let h = self.norm.forward(g, store, h);
        let h = g.relu(h);
        g.dropout(h, self.dropout)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    SelfAttention,
    CrossAttention,
}

/// Multi-head scaled dot-product attention with a residual connection.
#[derive(Clone, Debug)]
pub struct Attention {
    pub kind: AttentionKind,
    pub heads: usize,
    pub model_dim: usize,
    pub norm: Option<LayerNorm>,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub dropout: f64,
}

impl Attention {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        kind: AttentionKind,
        model_dim: usize,
        context_dim: usize,
        heads: usize,
        prenorm: bool,
        dropout: f64,
        rng: &mut R,
    ) -> Self {
        assert!(
            heads > 0 && model_dim % heads == 0,
            "model_dim {model_dim} must be divisible by heads {heads}"
        );
        let kv_in = match kind {
            AttentionKind::SelfAttention => model_dim,
            AttentionKind::CrossAttention => context_dim,
        };
        Self {
            kind,
            heads,
            model_dim,
            norm: prenorm.then(|| LayerNorm::new(store, &format!("{name}.norm"), model_dim)),
            query: Linear::new(store, &format!("{name}.q"), model_dim, model_dim, rng),
            key: Linear::new(store, &format!("{name}.k"), kv_in, model_dim, rng),
            value: Linear::new(store, &format!("{name}.v"), kv_in, model_dim, rng),
            output: Linear::new(store, &format!("{name}.o"), model_dim, model_dim, rng),
            dropout,
        }
    }

    /// `[bt, seq, dim] -> [bt, heads·... ]` split into `[bt·heads, seq, dim/heads]`.
    fn split_heads(&self, g: &mut Graph, x: Var) -> Var {
        let s = g.shape(x).to_vec();
        let dh = self.model_dim / self.heads;
        let x = g.reshape(x, &[s[0], s[1], self.heads, dh]);
        let x = g.permute(x, &[0, 2, 1, 3]);
        g.reshape(x, &[s[0] * self.heads, s[1], dh])
    }

    /// Attention probabilities `[bt·heads, seq, ctx]` together with the residual output.
    pub fn forward_with_weights(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tokens: Var,
        context: Option<Var>,
    ) -> Result<(Var, Var)> {
        let s = g.shape(tokens).to_vec();
        assert!(
            s.len() == 3 && s[2] == self.model_dim,
            "attention expects [bt, seq, {}]",
            self.model_dim
        );
        let normed = match &self.norm {
            Some(n) => n.forward(g, store, tokens),
            None => tokens,
        };
        let source = match self.kind {
            AttentionKind::SelfAttention => normed,
            AttentionKind::CrossAttention => {
                context.ok_or_else(|| contract("cross-attention requires a context"))?
            }
        };
        let q = self.query.forward(g, store, normed);
        let k = self.key.forward(g, store, source);
        let v = self.value.forward(g, store, source);
        let (q, k, v) = (
            self.split_heads(g, q),
            self.split_heads(g, k),
            self.split_heads(g, v),
        );
        let dh = self.model_dim / self.heads;
        let scores = g.bmm(q, k, true);
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let weights = g.softmax(scores);
        let attn = g.dropout(weights, self.dropout);
        let mixed = g.bmm(attn, v, false);
        let mixed = g.reshape(mixed, &[s[0], self.heads, s[1], dh]);
        let mixed = g.permute(mixed, &[0, 2, 1, 3]);
        let mixed = g.reshape(mixed, &[s[0], s[1], self.model_dim]);
        let out = self.output.forward(g, store, mixed);
        Ok((g.add(tokens, out), weights))
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tokens: Var,
        context: Option<Var>,
    ) -> Result<Var> {
        Ok(self.forward_with_weights(g, store, tokens, context)?.0)
    }
}

/// Adaptive layer normalization: `norm(x)·(1+γ) + β` with `(γ, β)` projected per token.
#[derive(Clone, Debug)]
pub struct AdaLn {
    pub channels: usize,
    pub modulation: Linear,
}

impl AdaLn {
    /// The modulation projection starts at zero, so the block begins as plain normalization.
    pub fn new(store: &mut ParamStore, name: &str, embed_dim: usize, channels: usize) -> Self {
        Self {
            channels,
            modulation: Linear::zeros(
                store,
                &format!("{name}.modulation"),
                embed_dim,
                2 * channels,
            ),
        }
    }

    /// `tokens[bt, seq, C]`, `embedding[bt, seq, E]` (or broadcastable) → `[bt, seq, C]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, tokens: Var, embedding: Var) -> Var {
        let c = self.channels;
        let mods = self.modulation.forward(g, store, embedding);
        let last = g.shape(mods).len() - 1;
        let gamma = g.slice(mods, last, 0, c);
        let beta = g.slice(mods, last, c, 2 * c);
        let n = g.layer_norm(tokens);
        let scale = g.add_scalar(gamma, 1.0);
        let y = g.mul(n, scale);
        g.add(y, beta)
    }
}

/// 1-D convolution over `[n, channels, length]` with weights `[out, in, kernel]`.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / ((in_channels * kernel) as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::uniform(&[out_channels, in_channels, kernel], -bound, bound, rng),
        );
        let bias = store.add(
            format!("{name}.bias"),
            Tensor::uniform(&[out_channels], -bound, bound, rng),
        );
        Self {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv1d(x, w, Some(b), self.stride, self.padding)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    #[test]
    fn ffm_at_origin_is_sin0_cos0() {
        let mut store = ParamStore::new();
        let ffm = FourierFeatureMap::new(&mut store, "ffm", 4, 3, &mut rng());
        let mut g = Graph::inference();
        let c = g.constant(Tensor::zeros(&[1, 3]));
        let e = ffm.forward(&mut g, &store, c);
        assert_eq!(g.value(e).data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn ffm_quarter_period() {
        let mut store = ParamStore::new();
        let ffm = FourierFeatureMap::new(&mut store, "ffm", 1, 1, &mut rng());
        *store.get_mut(ffm.kappa) = Tensor::new(&[1, 1], vec![1.0]).unwrap();
        let mut g = Graph::inference();
        let c = g.constant(Tensor::new(&[1, 1], vec![0.25]).unwrap());
        let e = ffm.forward(&mut g, &store, c);
        let v = g.value(e).data();
        assert!((v[0] - 1.0).abs() < 1e-12 && v[1].abs() < 1e-12);
    }

    #[test]
    fn ffm_output_width_for_estimators() {
        let mut store = ParamStore::new();
        let ffm = FourierFeatureMap::new(&mut store, "ffm", 16, 1, &mut rng());
        let mut g = Graph::inference();
        let c = g.constant(Tensor::zeros(&[5, 1]));
        let e = ffm.forward(&mut g, &store, c);
        assert_eq!(g.shape(e), &[5, 32]);
    }

    #[test]
    fn hyperlinear_flat_length() {
        assert_eq!(HyperLinear::flat_len(1, 32), 64);
    }

    #[test]
    fn zeroed_generator_tail_gives_zero_layer() {
        let mut store = ParamStore::new();
        let hl = HyperLinear::new(&mut store, "hl", 6, 8, 3, 2, &mut rng());
        *store.get_mut(hl.generator.fc_b.weight) = Tensor::zeros(&[8, 8]);
        *store.get_mut(hl.generator.fc_b.bias) = Tensor::zeros(&[8]);
        let mut g = Graph::inference();
        let e = g.constant(Tensor::randn(&[4, 6], &mut rng()));
        let w = hl.generate(&mut g, &store, e);
        let x = g.constant(Tensor::randn(&[4, 2, 3], &mut rng()));
        let y = hl.apply(&mut g, w, x);
        assert!(g.value(w.weight).data().iter().all(|&v| v == 0.0));
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_via_generator_bias() {
        let mut store = ParamStore::new();
        let hl = HyperLinear::new(&mut store, "hl", 6, 8, 2, 2, &mut rng());
        *store.get_mut(hl.generator.fc_b.weight) = Tensor::zeros(&[8, 6]);
        *store.get_mut(hl.generator.fc_b.bias) =
            Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let mut g = Graph::inference();
        let e = g.constant(Tensor::randn(&[3, 6], &mut rng()));
        let w = hl.generate(&mut g, &store, e);
        let xt = Tensor::randn(&[3, 1, 2], &mut rng());
        let x = g.constant(xt.clone());
        let y = hl.apply(&mut g, w, x);
        assert!(g.value(y).max_abs_diff(&xt) < 1e-15);

        // x = 0 leaves only the generated bias.
        *store.get_mut(hl.generator.fc_b.bias) =
            Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0, 0.5, -2.0]);
        let mut g = Graph::inference();
        let e = g.constant(Tensor::randn(&[3, 6], &mut rng()));
        let w = hl.generate(&mut g, &store, e);
        let x = g.constant(Tensor::zeros(&[3, 1, 2]));
        let y = hl.apply(&mut g, w, x);
        assert_eq!(g.value(y).row(1), &[0.5, -2.0]);
    }

    #[test]
    fn adaln_zero_init_is_plain_norm() {
        let mut store = ParamStore::new();
        let ada = AdaLn::new(&mut store, "ada", 5, 4);
        let mut g = Graph::inference();
        let x = g.constant(Tensor::randn(&[2, 3, 4], &mut rng()));
        let e = g.constant(Tensor::randn(&[2, 3, 5], &mut rng()));
        let y = ada.forward(&mut g, &store, x, e);
        let n = g.layer_norm(x);
        assert_eq!(g.value(y), g.value(n));
    }

    #[test]
    fn adaln_gamma_minus_one_zeroes_output() {
        let mut store = ParamStore::new();
        let ada = AdaLn::new(&mut store, "ada", 1, 3);
        *store.get_mut(ada.modulation.bias) =
            Tensor::from_vec(vec![-1.0, -1.0, -1.0, 0.0, 0.0, 0.0]);
        let mut g = Graph::inference();
        let x = g.constant(Tensor::randn(&[1, 4, 3], &mut rng()));
        let e = g.constant(Tensor::zeros(&[1, 4, 1]));
        let y = ada.forward(&mut g, &store, x, e);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cross_attention_without_context_is_rejected() {
        let mut store = ParamStore::new();
        let att = Attention::new(
            &mut store,
            "x",
            AttentionKind::CrossAttention,
            8,
            4,
            8,
            false,
            0.0,
            &mut rng(),
        );
        let mut g = Graph::inference();
        let t = g.constant(Tensor::zeros(&[1, 2, 8]));
        assert!(matches!(
            att.forward(&mut g, &store, t, None),
            Err(crate::Error::Contract(_))
        ));
    }
}
