use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{count_parameters, fc_block_layout, linear_layout, FcStack, PrototypeTargets};
use crate::checkpoint::ParamLayout;
use crate::data::NUM_ANTHRO;
use crate::error::{contract, Error, Result};
use crate::nn::{FcBlock, FourierFeatureMap, Linear};
use crate::numerics::{Graph, ParamStore, Tensor, Var};
use crate::training::{fit, TrainConfig, TrainingHistory};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtoDnnConfig {
    pub num_anthro: usize,
    pub ffm_freqs: usize,
    pub hidden: usize,
    pub latent_dim: usize,
    pub dropout: f64,
    pub init_seed: u64,
}

impl Default for ProtoDnnConfig {
    fn default() -> Self {
        Self {
            num_anthro: NUM_ANTHRO,
            ffm_freqs: 16,
            hidden: 128,
            latent_dim: 64,
            dropout: 0.5,
            init_seed: 0,
        }
    }
}

impl ProtoDnnConfig {
    /// Anthropometry followed by the frequency embedding.
    pub fn input_dim(&self) -> usize {
        self.num_anthro + 2 * self.ffm_freqs
    }

    /// Parameter shapes in construction order.
    pub fn layout(&self) -> Vec<ParamLayout> {
        let mut v = vec![ParamLayout {
            name: "ffm.kappa".into(),
            shape: vec![self.ffm_freqs, 1],
        }];
        v.extend(fc_block_layout("block1", self.input_dim(), self.hidden));
        v.extend(fc_block_layout("block2", self.hidden, self.hidden));
        v.extend(linear_layout("output", self.hidden, self.latent_dim));
        v
    }

    pub fn parameter_count(&self) -> usize {
        count_parameters(&self.layout())
    }
}

/// Maps one ear's normalized anthropometry and a frequency to one row of its prototype.
#[derive(Clone, Debug)]
pub struct PrototypeDnn {
    pub config: ProtoDnnConfig,
    pub store: ParamStore,
    ffm: FourierFeatureMap,
    stack: FcStack,
}

impl PrototypeDnn {
    pub fn new(config: ProtoDnnConfig) -> Result<Self> {
        if config.hidden == 0
            || config.latent_dim == 0
            || config.ffm_freqs == 0
            || !(0.0..1.0).contains(&config.dropout)
        {
            return Err(Error::Config(
                "prototype DNN needs positive widths and dropout in [0, 1)".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let ffm = FourierFeatureMap::new(&mut store, "ffm", config.ffm_freqs, 1, &mut rng);
        let b1 = FcBlock::new(
            &mut store,
            "block1",
            config.input_dim(),
            config.hidden,
            config.dropout,
            &mut rng,
        );
        let b2 = FcBlock::new(
            &mut store,
            "block2",
            config.hidden,
            config.hidden,
            config.dropout,
            &mut rng,
        );
        let output = Linear::new(
            &mut store,
            "output",
            config.hidden,
            config.latent_dim,
            &mut rng,
        );
        Ok(Self {
            config,
            store,
            ffm,
            stack: FcStack {
                blocks: [b1, b2],
                output,
            },
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.store.num_scalars()
    }

    /// `anthro[N, J]`, `freq_norm[N, 1]` → prototype rows `[N, D]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, anthro: Var, freq_norm: Var) -> Var {
        let e = self.ffm.forward(g, store, freq_norm);
        let x = g.concat(&[anthro, e], 1);
        self.stack.forward(g, store, x)
    }

    /// Eval-mode `L × D` z-scored prototype for one ear.
    pub fn predict(&self, anthro_norm: &[f64], frequencies_norm: &[f64]) -> Result<Tensor> {
        if anthro_norm.len() != self.config.num_anthro {
            return Err(Error::Shape {
                context: "anthropometry".into(),
                expected: vec![self.config.num_anthro],
                actual: vec![anthro_norm.len()],
            });
        }
        if let Some(f) = frequencies_norm.iter().find(|f| !(0.0..=1.0).contains(*f)) {
            return Err(contract(format!("normalized frequency {f} outside [0, 1]")));
        }
        let l = frequencies_norm.len();
        let mut g = Graph::inference();
        let a: Vec<f64> = (0..l).flat_map(|_| anthro_norm.iter().copied()).collect();
        let a = g.constant(Tensor::new(&[l, self.config.num_anthro], a)?);
        let f = g.constant(Tensor::new(&[l, 1], frequencies_norm.to_vec())?);
        let y = self.forward(&mut g, &self.store, a, f);
        Ok(g.value(y).clone())
    }
}

/// Rows are `(example, bin)` pairs.
fn batch_inputs(data: &PrototypeTargets, rows: &[usize]) -> Result<(Tensor, Tensor, Tensor)> {
    let (l, d) = (data.num_freq_bins, data.latent_dim);
    let mut a = Vec::with_capacity(rows.len() * NUM_ANTHRO);
    let mut f = Vec::with_capacity(rows.len());
    let mut t = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        let (e, bin) = (r / l, r % l);
        let ex = &data.examples[e];
        a.extend_from_slice(&ex.anthro_norm);
        f.push(data.frequencies_norm[bin]);
        t.extend_from_slice(&ex.target[bin * d..(bin + 1) * d]);
    }
    let n = rows.len();
    Ok((
        Tensor::new(&[n, a.len() / n], a)?,
        Tensor::new(&[n, 1], f)?,
        Tensor::new(&[n, d], t)?,
    ))
}

fn mse(
    net: &PrototypeDnn,
    g: &mut Graph,
    store: &ParamStore,
    data: &PrototypeTargets,
    rows: &[usize],
) -> Result<Var> {
    let (a, f, t) = batch_inputs(data, rows)?;
    let (a, f, t) = (g.constant(a), g.constant(f), g.constant(t));
    let y = net.forward(g, store, a, f);
    let diff = g.sub(y, t);
    let sq = g.square(diff);
    Ok(g.mean(sq))
}

/// Eval-mode MSE over every row of `data`.
pub(crate) fn evaluate_mse(
    net: &PrototypeDnn,
    store: &ParamStore,
    data: &PrototypeTargets,
) -> Result<f64> {
    let rows: Vec<usize> = (0..data.len() * data.num_freq_bins).collect();
    let mut total = 0.0;
    for chunk in rows.chunks(4096) {
        let mut g = Graph::inference();
        let loss = mse(net, &mut g, store, data, chunk)?;
        total += g.value(loss).item() * chunk.len() as f64;
    }
    Ok(total / rows.len() as f64)
}

/// MSE training on `(subject, ear, bin)` rows; `validation` drives early stopping and the schedule.
pub fn train_prototype_dnn(
    net: &mut PrototypeDnn,
    train: &PrototypeTargets,
    validation: Option<&PrototypeTargets>,
    config: &TrainConfig,
) -> Result<TrainingHistory> {
    if train.latent_dim != net.config.latent_dim {
        return Err(contract(format!(
            "targets have latent dim {} but the network predicts {}",
            train.latent_dim, net.config.latent_dim
        )));
    }
    let shape = net.clone();
    let validation = validation.filter(|v| !v.is_empty());
    let rows = train.len() * train.num_freq_bins;
    let mut store = std::mem::take(&mut net.store);
    let history = fit(
        &mut store,
        rows,
        config,
        |g, s, batch, _| mse(&shape, g, s, train, batch),
        |s| validation.map(|v| evaluate_mse(&shape, s, v)).transpose(),
    );
    net.store = store;
    history
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_matches_constructed_network() {
        let net = PrototypeDnn::new(ProtoDnnConfig::default()).unwrap();
        let layout = net.config.layout();
        assert_eq!(layout.len(), net.store.len());
        for (p, e) in layout.iter().zip(net.store.entries()) {
            assert_eq!((&p.name, p.shape.as_slice()), (&e.name, e.value.shape()));
        }
        assert_eq!(net.parameter_count(), net.config.parameter_count());
    }

    #[test]
    fn input_width_is_anthro_plus_embedding() {
        assert_eq!(ProtoDnnConfig::default().input_dim(), 55);
    }

    #[test]
    fn predicts_latent_rows_deterministically() {
        let net = PrototypeDnn::new(ProtoDnnConfig::default()).unwrap();
        let a = vec![0.3; 23];
        let f = [0.0, 0.5, 1.0];
        let y = net.predict(&a, &f).unwrap();
        assert_eq!(y.shape(), &[3, 64]);
        assert_eq!(y, net.predict(&a, &f).unwrap());
        assert!(net.predict(&a, &[1.2]).is_err());
    }
}
