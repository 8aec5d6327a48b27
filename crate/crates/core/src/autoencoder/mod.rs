//! Position- and frequency-conditioned autoencoder with mean-pooled prototypes.
//!
//! Every (position, ear, frequency) token is encoded independently by hyperlinear
//! layers whose weights come from its conditioning vector. Averaging the latents
//! over positions gives a grid-independent prototype of shape `2L × D`, which the
//! decoder maps back to magnitudes on any requested grid.

mod archive;
mod lsd;
mod pretrain;

pub use archive::{ArchivedPrototype, PrototypeArchive, PROTOTYPE_MAGIC};
pub use lsd::{lsd, lsd_loss, lsd_terms, LSD_EPS};
pub use pretrain::{pretrain_autoencoder, reconstruction_lsd, PretrainConfig, PretrainOutcome};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Ear, HrtfDataset};
use crate::error::{contract, Error, Result};
use crate::nn::{FourierFeatureMap, HyperLinear, LayerNorm};
use crate::numerics::{Graph, ParamStore, Tensor, Var};

/// `[x/r (3), f/f_max, ear flag]`.
pub const CONDITIONING_DIM: usize = 5;

/// Upper bound on tokens per inference chunk.
const CHUNK_TOKENS: usize = 16384;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AutoencoderConfig {
    pub latent_dim: usize,
    pub hidden: usize,
    pub generator_hidden: usize,
    pub ffm_freqs: usize,
    pub init_seed: u64,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            latent_dim: 64,
            hidden: 32,
            generator_hidden: 64,
            ffm_freqs: 8,
            init_seed: 0,
        }
    }
}

/// Conditioning rows for every token of a grid, ordered `(position, ear, bin)`.
#[derive(Clone, Debug)]
pub struct TokenGrid {
    pub num_positions: usize,
    pub num_freq_bins: usize,
    /// `[B·2L, 5]`.
    pub conditioning: Tensor,
}

impl TokenGrid {
    pub fn new(
        unit_directions: &[[f64; 3]],
        frequencies_hz: &[f64],
        f_max_hz: f64,
    ) -> Result<Self> {
        if unit_directions.is_empty() || frequencies_hz.is_empty() {
            return Err(contract("token grid needs positions and frequencies"));
        }
        if let Some(f) = frequencies_hz
            .iter()
            .find(|&&f| !(0.0..=f_max_hz).contains(&f))
        {
            return Err(contract(format!(
                "frequency {f} Hz outside [0, {f_max_hz}]"
            )));
        }
        let l = frequencies_hz.len();
        let mut data = Vec::with_capacity(unit_directions.len() * 2 * l * CONDITIONING_DIM);
        for u in unit_directions {
            for ear in Ear::BOTH {
                for &f in frequencies_hz {
                    data.extend_from_slice(&[u[0], u[1], u[2], f / f_max_hz, ear.flag()]);
                }
            }
        }
        Ok(Self {
            num_positions: unit_directions.len(),
            num_freq_bins: l,
            conditioning: Tensor::new(&[unit_directions.len() * 2 * l, CONDITIONING_DIM], data)?,
        })
    }

    pub fn from_dataset(ds: &HrtfDataset) -> Result<Self> {
        Self::new(&ds.unit_directions(), &ds.frequencies_hz, ds.f_max_hz)
    }

    /// Positions divided by `r`.
    pub fn from_positions(
        positions: &[[f32; 3]],
        r: f64,
        frequencies_hz: &[f64],
        f_max_hz: f64,
    ) -> Result<Self> {
        let dirs: Vec<[f64; 3]> = positions
            .iter()
            .map(|p| [p[0] as f64 / r, p[1] as f64 / r, p[2] as f64 / r])
            .collect();
        Self::new(&dirs, frequencies_hz, f_max_hz)
    }

    pub fn num_tokens(&self) -> usize {
        self.num_positions * 2 * self.num_freq_bins
    }

    /// The grid restricted to the listed positions, in that order.
    pub fn positions(&self, index: &[usize]) -> TokenGrid {
        let row = 2 * self.num_freq_bins * CONDITIONING_DIM;
        let src = self.conditioning.data();
        let data: Vec<f64> = index
            .iter()
            .flat_map(|&b| src[b * row..(b + 1) * row].iter().copied())
            .collect();
        TokenGrid {
            num_positions: index.len(),
            num_freq_bins: self.num_freq_bins,
            conditioning: Tensor::new(
                &[index.len() * 2 * self.num_freq_bins, CONDITIONING_DIM],
                data,
            )
            .expect("consistent grid"),
        }
    }

    fn position_chunks(&self) -> Vec<Vec<usize>> {
        let per = (CHUNK_TOKENS / (2 * self.num_freq_bins)).max(1);
        (0..self.num_positions)
            .collect::<Vec<_>>()
            .chunks(per)
            .map(|c| c.to_vec())
            .collect()
    }
}

/// One coder stack: hyperlinear → layer norm → Mish → hyperlinear, sharing one FFM.
#[derive(Clone, Debug)]
struct Coder {
    ffm: FourierFeatureMap,
    first: HyperLinear,
    norm: LayerNorm,
    second: HyperLinear,
}

impl Coder {
    fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &AutoencoderConfig,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let ffm = FourierFeatureMap::new(
            store,
            &format!("{name}.ffm"),
            cfg.ffm_freqs,
            CONDITIONING_DIM,
            rng,
        );
        let e = ffm.output_dim();
        let first = HyperLinear::new(
            store,
            &format!("{name}.hl1"),
            e,
            cfg.generator_hidden,
            in_dim,
            cfg.hidden,
            rng,
        );
        let norm = LayerNorm::new(store, &format!("{name}.norm"), cfg.hidden);
        let second = HyperLinear::new(
            store,
            &format!("{name}.hl2"),
            e,
            cfg.generator_hidden,
            cfg.hidden,
            out_dim,
            rng,
        );
        Self {
            ffm,
            first,
            norm,
            second,
        }
    }

    /// `cond[N, 5]`, `x[N, S, in]` → `[N, S, out]`.
    fn forward(&self, g: &mut Graph, store: &ParamStore, cond: Var, x: Var) -> Var {
        let e = self.ffm.forward(g, store, cond);
        let w1 = self.first.generate(g, store, e);
        let h = self.first.apply(g, w1, x);
        let h = self.norm.forward(g, store, h);
        let h = g.mish(h);
        let w2 = self.second.generate(g, store, e);
        self.second.apply(g, w2, h)
    }
}

#[derive(Clone, Debug)]
pub struct ConditionedAutoencoder {
    pub config: AutoencoderConfig,
    pub store: ParamStore,
    encoder: Coder,
    decoder: Coder,
}

impl ConditionedAutoencoder {
    pub fn new(config: AutoencoderConfig) -> Result<Self> {
        if config.latent_dim == 0
            || config.hidden == 0
            || config.generator_hidden == 0
            || config.ffm_freqs == 0
        {
            return Err(Error::Config("autoencoder widths must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let encoder = Coder::new(
            &mut store,
            "encoder",
            &config,
            1,
            config.latent_dim,
            &mut rng,
        );
        let decoder = Coder::new(
            &mut store,
            "decoder",
            &config,
            config.latent_dim,
            1,
            &mut rng,
        );
        Ok(Self {
            config,
            store,
            encoder,
            decoder,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn freeze(&mut self) {
        self.store.freeze();
    }

    pub fn is_frozen(&self) -> bool {
        self.store.is_frozen()
    }

    pub fn parameter_count(&self) -> usize {
        self.store.num_scalars()
    }

    /// Scalars belonging to the decoder stack.
    pub fn decoder_parameter_count(&self) -> usize {
        self.store
            .entries()
            .iter()
            .filter(|e| e.name.starts_with("decoder."))
            .map(|e| e.value.len())
            .sum()
    }

    /// Hash of the decoder's parameters.
    pub fn decoder_fingerprint(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for e in self
            .store
            .entries()
            .iter()
            .filter(|e| e.name.starts_with("decoder."))
        {
            e.name.hash(&mut h);
            for v in e.value.data() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    /// Tape-level encoder: `x[N, S, 1]` → latents `[N, S, D]`.
    pub fn encode_tokens(&self, g: &mut Graph, cond: Var, x: Var) -> Var {
        self.encoder.forward(g, &self.store, cond, x)
    }

    /// Tape-level pooling of `[B·2L, S, D]` latents to prototypes `[2L, S, D]`.
    pub fn pool_tokens(&self, g: &mut Graph, z: Var, num_positions: usize) -> Var {
        let s = g.shape(z).to_vec();
        let per = s[0] / num_positions;
        let z = g.reshape(z, &[num_positions, per, s[1], s[2]]);
        g.mean_axis(z, 0)
    }

    /// Tape-level decoder: prototypes `[2L, S, D]` → normalized magnitudes `[B', 2L, S]`.
    pub fn decode_tokens(
        &self,
        g: &mut Graph,
        cond: Var,
        prototypes: Var,
        num_positions: usize,
    ) -> Var {
        let s = g.shape(prototypes).to_vec();
        let p = g.reshape(prototypes, &[1, s[0], s[1], s[2]]);
        let p = g.broadcast_to(p, &[num_positions, s[0], s[1], s[2]]);
        let p = g.reshape(p, &[num_positions * s[0], s[1], s[2]]);
        let y = self.decoder.forward(g, &self.store, cond, p);
        g.reshape(y, &[num_positions, s[0], s[1]])
    }

    fn check_magnitudes(&self, grid: &TokenGrid, len: usize) -> Result<()> {
        if len != grid.num_tokens() {
            return Err(Error::Shape {
                context: "normalized magnitudes".into(),
                expected: vec![grid.num_positions, 2 * grid.num_freq_bins],
                actual: vec![len],
            });
        }
        Ok(())
    }

    /// Latent field `[B, 2L, D]` of one subject's normalized magnitudes `B × 2L`.
    pub fn encode(&self, magnitudes_norm: &[f64], grid: &TokenGrid) -> Result<Tensor> {
        self.check_magnitudes(grid, magnitudes_norm.len())?;
        let d = self.latent_dim();
        let mut g = Graph::inference();
        let cond = g.constant(grid.conditioning.clone());
        let x = g.constant(Tensor::new(
            &[grid.num_tokens(), 1, 1],
            magnitudes_norm.to_vec(),
        )?);
        let z = self.encode_tokens(&mut g, cond, x);
        g.value(z)
            .clone()
            .reshape(&[grid.num_positions, 2 * grid.num_freq_bins, d])
    }

    /// Prototypes `[2L, D]` of several subjects sharing `grid`, computed chunk by chunk.
    pub fn prototypes(&self, magnitudes_norm: &[&[f64]], grid: &TokenGrid) -> Result<Vec<Tensor>> {
        for m in magnitudes_norm {
            self.check_magnitudes(grid, m.len())?;
        }
        let (s, d, rows) = (
            magnitudes_norm.len(),
            self.latent_dim(),
            2 * grid.num_freq_bins,
        );
        let mut sums = vec![0.0; rows * s * d];
        for chunk in grid.position_chunks() {
            let sub = grid.positions(&chunk);
            let mut x = Vec::with_capacity(sub.num_tokens() * s);
            for &b in &chunk {
                for t in 0..rows {
                    x.extend(magnitudes_norm.iter().map(|m| m[b * rows + t]));
                }
            }
            let mut g = Graph::inference();
            let cond = g.constant(sub.conditioning);
            let xv = g.constant(Tensor::new(&[chunk.len() * rows, s, 1], x)?);
            let z = self.encode_tokens(&mut g, cond, xv);
            let z = g.reshape(z, &[chunk.len(), rows, s, d]);
            let zs = g.sum_axis(z, 0);
            for (acc, v) in sums.iter_mut().zip(g.value(zs).data()) {
                *acc += v;
            }
        }
        let scale = 1.0 / grid.num_positions as f64;
        Ok((0..s)
            .map(|si| {
                let mut p = Vec::with_capacity(rows * d);
                for t in 0..rows {
                    let at = (t * s + si) * d;
                    p.extend(sums[at..at + d].iter().map(|v| v * scale));
                }
                Tensor::new(&[rows, d], p).expect("prototype shape")
            })
            .collect())
    }

    /// Normalized magnitudes `B' × 2L` for each prototype `[2L, D]` on `grid`.
    pub fn decode_many(&self, prototypes: &[&Tensor], grid: &TokenGrid) -> Result<Vec<Vec<f64>>> {
        let (d, rows, s) = (self.latent_dim(), 2 * grid.num_freq_bins, prototypes.len());
        for p in prototypes {
            if p.shape() != [rows, d] {
                return Err(Error::Shape {
                    context: "prototype".into(),
                    expected: vec![rows, d],
                    actual: p.shape().to_vec(),
                });
            }
        }
        let mut stacked = Vec::with_capacity(rows * s * d);
        for t in 0..rows {
            for p in prototypes {
                stacked.extend_from_slice(&p.data()[t * d..(t + 1) * d]);
            }
        }
        let stacked = Tensor::new(&[rows, s, d], stacked)?;
        let mut out = vec![Vec::with_capacity(grid.num_tokens()); s];
        for chunk in grid.position_chunks() {
            let sub = grid.positions(&chunk);
            let mut g = Graph::inference();
            let cond = g.constant(sub.conditioning);
            let pv = g.constant(stacked.clone());
            let y = self.decode_tokens(&mut g, cond, pv, chunk.len());
            let y = g.value(y).data();
            for vals in y.chunks_exact(s) {
                for (o, v) in out.iter_mut().zip(vals) {
                    o.push(*v);
                }
            }
        }
        Ok(out)
    }

    /// Normalized magnitudes `[B', 2L]` from one prototype `[2L, D]`.
    pub fn decode(&self, prototype: &Tensor, grid: &TokenGrid) -> Result<Tensor> {
        let y = self
            .decode_many(&[prototype], grid)?
            .pop()
            .expect("one output");
        Tensor::new(&[grid.num_positions, 2 * grid.num_freq_bins], y)
    }
}

/// Mean over the position axis of a latent field `[B, 2L, D]`.
pub fn pool_prototype(latents: &Tensor) -> Result<Tensor> {
    let s = latents.shape();
    if s.len() != 3 || s[0] == 0 {
        return Err(contract(format!(
            "latent field must be [B>0, 2L, D], got {s:?}"
        )));
    }
    let (b, per) = (s[0], s[1] * s[2]);
    let mut out = vec![0.0; per];
    for row in latents.data().chunks_exact(per) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= b as f64);
    Tensor::new(&[s[1], s[2]], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::fibonacci_sphere;

    fn small() -> ConditionedAutoencoder {
        ConditionedAutoencoder::new(AutoencoderConfig {
            latent_dim: 3,
            hidden: 4,
            generator_hidden: 6,
            ffm_freqs: 2,
            init_seed: 1,
        })
        .unwrap()
    }

    fn grid(b: usize, l: usize) -> TokenGrid {
        TokenGrid::from_positions(
            &fibonacci_sphere(b, 1.0),
            1.0,
            &crate::data::linear_frequency_grid(l, 20000.0),
            20000.0,
        )
        .unwrap()
    }

    #[test]
    fn latent_field_shape() {
        let ae = small();
        let z = ae.encode(&[0.1; 16], &grid(2, 4)).unwrap();
        assert_eq!(z.shape(), &[2, 8, 3]);
    }

    #[test]
    fn conditioning_rows() {
        let g = grid(1, 2);
        let c = g.conditioning.data();
        assert_eq!(c[3], 0.0);
        assert_eq!(c[4], 1.0);
        assert_eq!(c[5 + 3], 1.0);
        assert_eq!(c[2 * 5 + 4], -1.0);
    }

    #[test]
    fn rejects_frequency_above_fmax() {
        assert!(TokenGrid::new(&[[1.0, 0.0, 0.0]], &[30000.0], 20000.0).is_err());
    }

    #[test]
    fn pooling_examples() {
        let z = Tensor::new(&[2, 1, 1], vec![1.0, 3.0]).unwrap();
        assert_eq!(pool_prototype(&z).unwrap().data(), &[2.0]);
        let z1 = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(pool_prototype(&z1).unwrap().data(), z1.data());
    }

    #[test]
    fn chunked_prototypes_match_direct_pooling() {
        let ae = small();
        let gr = grid(5, 4);
        let m: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let direct = pool_prototype(&ae.encode(&m, &gr).unwrap()).unwrap();
        let batched = ae.prototypes(&[&m, &m], &gr).unwrap();
        assert!(direct.max_abs_diff(&batched[1]) < 1e-12);
    }

    #[test]
    fn decode_on_other_grid() {
        let ae = small();
        let p = Tensor::full(&[8, 3], 0.2);
        let y = ae.decode(&p, &grid(7, 4)).unwrap();
        assert_eq!(y.shape(), &[7, 8]);
        assert!(y.is_finite());
        assert_eq!(y, ae.decode(&p, &grid(7, 4)).unwrap());
    }

    #[test]
    fn counts() {
        let ae = ConditionedAutoencoder::new(AutoencoderConfig::default()).unwrap();
        assert!(ae.decoder_parameter_count() < ae.parameter_count());
        assert_eq!(ae.parameter_count(), 283_857);
    }
}
