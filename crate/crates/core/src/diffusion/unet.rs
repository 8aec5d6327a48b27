//! Conditional 1-D U-Net noise predictor over `[N, D, L]` prototype sequences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::NUM_ANTHRO;
use crate::error::{Error, Result};
use crate::nn::{AdaLn, Attention, AttentionKind, Conv1d, FourierFeatureMap, Linear};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UnetConfig {
    /// Latent dimension `D`, the input and output channel count.
    pub channels: usize,
    /// Channel widths after the initial conv, the second down block and the middle block.
    pub widths: [usize; 3],
    /// Width of the combined timestep and frequency embedding.
    pub embed_dim: usize,
    /// Sinusoid pairs in the timestep encoding.
    pub time_freqs: usize,
    pub ffm_freqs: usize,
    pub num_anthro: usize,
    pub anthro_dim: usize,
    pub heads: usize,
    pub dropout: f64,
    pub init_seed: u64,
}

impl Default for UnetConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            widths: [64, 128, 256],
            embed_dim: 192,
            time_freqs: 32,
            ffm_freqs: 16,
            num_anthro: NUM_ANTHRO,
            anthro_dim: 32,
            heads: 8,
            dropout: 0.15,
            init_seed: 0,
        }
    }
}

/// Two {AdaLN, SiLU, conv} sub-blocks with a residual path.
#[derive(Clone, Debug)]
struct ResBlock {
    norm1: AdaLn,
    conv1: Conv1d,
    norm2: AdaLn,
    conv2: Conv1d,
    shortcut: Option<Conv1d>,
    dropout: f64,
}

impl ResBlock {
    fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        cfg: &UnetConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            norm1: AdaLn::new(store, &format!("{name}.norm1"), cfg.embed_dim, cin),
            conv1: Conv1d::new(store, &format!("{name}.conv1"), cin, cout, 3, 1, 1, rng),
            norm2: AdaLn::new(store, &format!("{name}.norm2"), cfg.embed_dim, cout),
            conv2: Conv1d::new(store, &format!("{name}.conv2"), cout, cout, 3, 1, 1, rng),
            shortcut: (cin != cout)
                .then(|| Conv1d::new(store, &format!("{name}.shortcut"), cin, cout, 1, 1, 0, rng)),
            dropout: cfg.dropout,
        }
    }

    /// `x[N, C, L]`, `emb[N, L, E]`.
    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, emb: Var) -> Var {
        let h = modulate(g, store, &self.norm1, x, emb);
        let h = self.conv1.forward(g, store, h);
        let h = modulate(g, store, &self.norm2, h, emb);
        let h = g.dropout(h, self.dropout);
        let h = self.conv2.forward(g, store, h);
        let skip = match &self.shortcut {
            Some(c) => c.forward(g, store, x),
            None => x,
        };
        g.add(h, skip)
    }
}

/// AdaLN over channels followed by SiLU, keeping the channel-major layout.
fn modulate(g: &mut Graph, store: &ParamStore, norm: &AdaLn, x: Var, emb: Var) -> Var {
    let t = g.permute(x, &[0, 2, 1]);
    let t = norm.forward(g, store, t, emb);
    let t = g.silu(t);
    g.permute(t, &[0, 2, 1])
}

/// Self-attention over tokens, then cross-attention to the anthropometry context.
#[derive(Clone, Debug)]
struct AttnBlock {
    own: Attention,
    cross: Attention,
}

impl AttnBlock {
    fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        cfg: &UnetConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let make = |store: &mut ParamStore, suffix: &str, kind, rng: &mut ChaCha8Rng| {
            Attention::new(
                store,
                &format!("{name}.{suffix}"),
                kind,
                width,
                cfg.anthro_dim,
                cfg.heads,
                true,
                cfg.dropout,
                rng,
            )
        };
        Self {
            own: make(store, "self", AttentionKind::SelfAttention, rng),
            cross: make(store, "cross", AttentionKind::CrossAttention, rng),
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, context: Var) -> Result<Var> {
        let t = g.permute(x, &[0, 2, 1]);
        let t = self.own.forward(g, store, t, None)?;
        let t = self.cross.forward(g, store, t, Some(context))?;
        Ok(g.permute(t, &[0, 2, 1]))
    }
}

#[derive(Clone, Debug)]
struct Level {
    res: ResBlock,
    attn: AttnBlock,
}

impl Level {
    fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        cfg: &UnetConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            res: ResBlock::new(store, &format!("{name}.res"), cin, cout, cfg, rng),
            attn: AttnBlock::new(store, &format!("{name}.attn"), cout, cfg, rng),
        }
    }

    fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        emb: Var,
        context: Var,
    ) -> Result<Var> {
        let h = self.res.forward(g, store, x, emb);
        self.attn.forward(g, store, h, context)
    }
}

/// Conditioning for one batch: which rows see their anthropometry and which see the null embedding.
#[derive(Clone, Copy, Debug)]
pub enum Guidance<'a> {
    Conditional,
    Unconditional,
    /// Per-row flag; `false` rows use the null embedding.
    Mixed(&'a [bool]),
}

/// Inputs of one U-Net evaluation.
#[derive(Clone, Copy, Debug)]
pub struct UnetInputs<'a> {
    /// Noisy sample `[N, D, L]`.
    pub noisy: Var,
    /// One timestep per row.
    pub timesteps: &'a [usize],
    /// `f / f_max` per token, shared by every row.
    pub frequencies_norm: &'a [f64],
    /// Normalized anthropometry `[N, J]`.
    pub anthro: Var,
    pub guidance: Guidance<'a>,
}

/// Timestep/frequency embeddings drive AdaLN per token; the anthropometry embedding
/// is the cross-attention context.
#[derive(Clone, Debug)]
pub struct PrototypeUnet {
    pub config: UnetConfig,
    pub store: ParamStore,
    time_proj: Linear,
    freq_ffm: FourierFeatureMap,
    freq_proj: Linear,
    anthro_proj: Linear,
    null_context: ParamId,
    init: Conv1d,
    down1: Level,
    downsample1: Conv1d,
    down2: Level,
    downsample2: Conv1d,
    middle: Level,
    up1_conv: Conv1d,
    up1: Level,
    up2_conv: Conv1d,
    up2: Level,
    output: Conv1d,
}

impl PrototypeUnet {
    pub fn new(config: UnetConfig) -> Result<Self> {
        let [w0, w1, w2] = config.widths;
        if config.channels == 0
            || config.widths.contains(&0)
            || config.embed_dim == 0
            || config.anthro_dim == 0
        {
            return Err(Error::Config("U-Net widths must be positive".into()));
        }
        if config.heads == 0 || config.widths.iter().any(|w| w % config.heads != 0) {
            return Err(Error::Config(format!(
                "every U-Net width must be divisible by {} heads",
                config.heads
            )));
        }
        if !(0.0..1.0).contains(&config.dropout) {
            return Err(Error::Config("U-Net dropout must lie in [0, 1)".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let s = &mut store;
        let r = &mut rng;
        let c = &config;
        let net = Self {
            time_proj: Linear::new(s, "time.proj", 2 * c.time_freqs, c.embed_dim, r),
            freq_ffm: FourierFeatureMap::new(s, "freq.ffm", c.ffm_freqs, 1, r),
            freq_proj: Linear::new(s, "freq.proj", 2 * c.ffm_freqs, c.embed_dim, r),
            anthro_proj: Linear::new(s, "anthro.proj", c.num_anthro, c.anthro_dim, r),
            null_context: s.add("anthro.null", Tensor::randn(&[c.anthro_dim], r)),
            init: Conv1d::new(s, "init", c.channels, w0, 3, 1, 1, r),
            down1: Level::new(s, "down1", w0, w0, c, r),
            downsample1: Conv1d::new(s, "down1.sample", w0, w0, 3, 2, 1, r),
            down2: Level::new(s, "down2", w0, w1, c, r),
            downsample2: Conv1d::new(s, "down2.sample", w1, w1, 3, 2, 1, r),
            middle: Level::new(s, "middle", w1, w2, c, r),
            up1_conv: Conv1d::new(s, "up1.reduce", w2, w1, 3, 1, 1, r),
            up1: Level::new(s, "up1", 2 * w1, w1, c, r),
            up2_conv: Conv1d::new(s, "up2.reduce", w1, w0, 3, 1, 1, r),
            up2: Level::new(s, "up2", 2 * w0, w0, c, r),
            output: Conv1d::new(s, "output", w0, c.channels, 3, 1, 1, r),
            config,
            store,
        };
        Ok(net)
    }

    pub fn parameter_count(&self) -> usize {
        self.store.num_scalars()
    }

    /// Predicted noise with the same shape as `inputs.noisy`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        inputs: UnetInputs<'_>,
    ) -> Result<Var> {
        self.forward_traced(g, store, inputs, &mut Vec::new())
    }

    /// Like [`forward`](Self::forward), also recording the token count after each stage.
    pub fn forward_traced(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        inputs: UnetInputs<'_>,
        trace: &mut Vec<usize>,
    ) -> Result<Var> {
        let shape = g.shape(inputs.noisy).to_vec();
        let (n, l) = self.check_inputs(g, &inputs, &shape)?;
        let emb0 = self.embedding(g, store, &inputs, n)?;
        let emb1 = pool_pairs(g, emb0);
        let emb2 = pool_pairs(g, emb1);
        let context = self.context(g, store, &inputs, n)?;
        trace.push(l);

        let h = self.init.forward(g, store, inputs.noisy);
        let h = self.down1.forward(g, store, h, emb0, context)?;
        let skip1 = h;
        let h = self.downsample1.forward(g, store, h);
        trace.push(g.shape(h)[2]);
        let h = self.down2.forward(g, store, h, emb1, context)?;
        let skip2 = h;
        let h = self.downsample2.forward(g, store, h);
        trace.push(g.shape(h)[2]);
        let h = self.middle.forward(g, store, h, emb2, context)?;

        let h = g.upsample_linear2(h);
        let h = self.up1_conv.forward(g, store, h);
        let h = g.concat(&[h, skip2], 1);
        let h = self.up1.forward(g, store, h, emb1, context)?;
        trace.push(g.shape(h)[2]);
        let h = g.upsample_linear2(h);
        let h = self.up2_conv.forward(g, store, h);
        let h = g.concat(&[h, skip1], 1);
        let h = self.up2.forward(g, store, h, emb0, context)?;
        trace.push(g.shape(h)[2]);

        let h = g.silu(h);
        Ok(self.output.forward(g, store, h))
    }

    fn check_inputs(
        &self,
        g: &Graph,
        inputs: &UnetInputs<'_>,
        shape: &[usize],
    ) -> Result<(usize, usize)> {
        let bad = |expected: Vec<usize>, actual: &[usize], what: &str| Error::Shape {
            context: format!("U-Net {what}"),
            expected,
            actual: actual.to_vec(),
        };
        if shape.len() != 3
            || shape[1] != self.config.channels
            || shape[2] % 4 != 0
            || shape[2] == 0
        {
            return Err(bad(
                vec![0, self.config.channels, 4],
                shape,
                "input (length must be a positive multiple of 4)",
            ));
        }
        let (n, l) = (shape[0], shape[2]);
        if inputs.timesteps.len() != n {
            return Err(bad(vec![n], &[inputs.timesteps.len()], "timesteps"));
        }
        if inputs.frequencies_norm.len() != l {
            return Err(bad(
                vec![l],
                &[inputs.frequencies_norm.len()],
                "frequencies",
            ));
        }
        let a = g.shape(inputs.anthro);
        if a != [n, self.config.num_anthro] {
            return Err(bad(vec![n, self.config.num_anthro], a, "anthropometry"));
        }
        if let Guidance::Mixed(keep) = inputs.guidance {
            if keep.len() != n {
                return Err(bad(vec![n], &[keep.len()], "guidance mask"));
            }
        }
        Ok((n, l))
    }

    /// `silu(time(t) + freq(f))` per token, `[N, L, E]`.
    fn embedding(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        inputs: &UnetInputs<'_>,
        n: usize,
    ) -> Result<Var> {
        let l = inputs.frequencies_norm.len();
        let enc = timestep_encoding(inputs.timesteps, self.config.time_freqs);
        let te = g.constant(enc);
        let te = self.time_proj.forward(g, store, te);
        let te = g.reshape(te, &[n, 1, self.config.embed_dim]);
        let f = g.constant(Tensor::new(&[1, l, 1], inputs.frequencies_norm.to_vec())?);
        let fe = self.freq_ffm.forward(g, store, f);
        let fe = self.freq_proj.forward(g, store, fe);
        let e = g.add(te, fe);
        Ok(g.silu(e))
    }

    /// Cross-attention context `[N, 1, anthro_dim]`.
    fn context(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        inputs: &UnetInputs<'_>,
        n: usize,
    ) -> Result<Var> {
        let d = self.config.anthro_dim;
        let null = g.param(store, self.null_context);
        let null = g.reshape(null, &[1, d]);
        let ctx = match inputs.guidance {
            Guidance::Unconditional => g.broadcast_to(null, &[n, d]),
            Guidance::Conditional | Guidance::Mixed(_) => {
                let a = self.anthro_proj.forward(g, store, inputs.anthro);
                let a = g.silu(a);
                match inputs.guidance {
                    Guidance::Mixed(keep) if keep.iter().any(|k| !k) => {
                        let m: Vec<f64> = keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
                        let inv: Vec<f64> = m.iter().map(|v| 1.0 - v).collect();
                        let m = g.constant(Tensor::new(&[n, 1], m)?);
                        let inv = g.constant(Tensor::new(&[n, 1], inv)?);
                        let a = g.mul(a, m);
                        let u = g.mul(null, inv);
                        g.add(a, u)
                    }
                    _ => a,
                }
            }
        };
        Ok(g.reshape(ctx, &[n, 1, d]))
    }
}

/// Averages adjacent token pairs of `[N, L, E]`.
fn pool_pairs(g: &mut Graph, x: Var) -> Var {
    let s = g.shape(x).to_vec();
    let y = g.reshape(x, &[s[0], s[1] / 2, 2, s[2]]);
    g.mean_axis(y, 2)
}

/// `[sin(t·ω_k), cos(t·ω_k)]` with `ω_k = 10000^(−k/K)`, one row per timestep.
pub fn timestep_encoding(timesteps: &[usize], pairs: usize) -> Tensor {
    let mut data = Vec::with_capacity(timesteps.len() * 2 * pairs);
    for &t in timesteps {
        let (sin, cos): (Vec<f64>, Vec<f64>) = (0..pairs)
            .map(|k| {
                let w = (-(10000f64.ln()) * k as f64 / pairs as f64).exp();
                let a = t as f64 * w;
                (a.sin(), a.cos())
            })
            .unzip();
        data.extend(sin);
        data.extend(cos);
    }
    Tensor::from_parts(vec![timesteps.len(), 2 * pairs], data)
}
