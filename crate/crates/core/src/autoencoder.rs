//! Fully connected tactile autoencoders.
//!
//! Encoder: `input → hidden… (tanh) → latent (sigmoid)`; the decoder mirrors
//! the encoder widths and ends in a sigmoid so reconstructions stay in the
//! normalized `(0, 1)` range.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{
    activation_forward, affine_forward, Activation, Checkpoint, Dense, Matrix, OptimizerConfig, OptimizerState,
    ParamStore, Tape,
};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AeConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub latent_dim: usize,
}

impl AeConfig {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, latent_dim: usize) -> Self {
        Self { input_dim, hidden_dims, latent_dim }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.latent_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::Config("autoencoder widths must be positive".into()));
        }
        if self.latent_dim > self.input_dim {
            return Err(Error::Config(format!(
                "latent_dim {} exceeds input_dim {}",
                self.latent_dim, self.input_dim
            )));
        }
        Ok(())
    }

    /// Layer widths from input to latent.
    pub fn encoder_widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(&self.hidden_dims);
        w.push(self.latent_dim);
        w
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for AeTrainConfig {
    fn default() -> Self {
        Self { epochs: 3000, batch_size: 256, optimizer: OptimizerConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Autoencoder {
    pub config: AeConfig,
    pub params: ParamStore,
    encoder: Vec<Dense>,
    decoder: Vec<Dense>,
}

fn layer_names(config: &AeConfig) -> (Vec<String>, Vec<String>) {
    let n = config.hidden_dims.len() + 1;
    ((0..n).map(|i| format!("enc{i}")).collect(), (0..n).map(|i| format!("dec{i}")).collect())
}

fn activations(n: usize) -> impl Iterator<Item = Activation> {
    (0..n).map(move |i| if i + 1 == n { Activation::Sigmoid } else { Activation::Tanh })
}

impl Autoencoder {
    pub fn new(config: AeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let widths = config.encoder_widths();
        let (enc_names, dec_names) = layer_names(&config);
        let n = widths.len() - 1;
        let encoder = activations(n)
            .enumerate()
            .map(|(i, act)| Dense::new(&mut params, &enc_names[i], widths[i], widths[i + 1], act, &mut rng))
            .collect();
        let decoder = activations(n)
            .enumerate()
            .map(|(i, act)| Dense::new(&mut params, &dec_names[i], widths[n - i], widths[n - i - 1], act, &mut rng))
            .collect();
        Ok(Self { config, params, encoder, decoder })
    }

    fn forward(&self, layers: &[Dense], x: &Matrix) -> Result<Matrix> {
        if x.cols() != layers[0].input_dim {
            return Err(Error::shape("autoencoder input", x.shape(), (1, layers[0].input_dim)));
        }
        let mut h = x.clone();
        for l in layers {
            let z = affine_forward(&h, self.params.value(l.weight), self.params.value(l.bias))?;
            h = activation_forward(&z, l.activation);
        }
        Ok(h)
    }

    /// Latents of a batch of normalized frames (one per row).
    pub fn encode(&self, x: &Matrix) -> Result<Matrix> {
        self.forward(&self.encoder, x)
    }

    pub fn decode(&self, z: &Matrix) -> Result<Matrix> {
        self.forward(&self.decoder, z)
    }

    pub fn reconstruct(&self, x: &Matrix) -> Result<Matrix> {
        self.decode(&self.encode(x)?)
    }

    /// Mean squared reconstruction error over all entries.
    pub fn mse(&self, x: &Matrix) -> Result<f64> {
        let r = self.reconstruct(x)?;
        Ok(r.sub(x)?.as_slice().iter().map(|d| d * d).sum::<f64>() / x.len().max(1) as f64)
    }

    /// Records `mean((decode(encode(x)) − x)²)` on `tape`.
    pub fn loss_on_tape<'a>(&self, tape: &mut Tape<'a>, bound: &crate::math::Bound, x: &Matrix) -> Result<crate::math::NodeId> {
        let mut h = tape.input(x.clone());
        for l in self.encoder.iter().chain(&self.decoder) {
            h = l.forward(tape, bound, h)?;
        }
        let w = Matrix::filled(x.rows(), x.cols(), 1.0 / x.len().max(1) as f64);
        tape.weighted_sq_err(h, x.clone(), w)
    }

    pub fn to_checkpoint(&self, kind: &str, config_hash: &str) -> Checkpoint {
        Checkpoint {
            kind: kind.to_string(),
            config_hash: config_hash.to_string(),
            meta_json: serde_json::to_string(&self.config).expect("config serializes"),
            params: self.params.clone(),
            optimizer: None,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: AeConfig =
            serde_json::from_str(&ck.meta_json).map_err(|e| Error::format("autoencoder checkpoint meta", e.to_string()))?;
        config.validate()?;
        let (enc_names, dec_names) = layer_names(&config);
        let n = enc_names.len();
        let widths = config.encoder_widths();
        let lookup = |names: &[String], reversed: bool| -> Result<Vec<Dense>> {
            names
                .iter()
                .zip(activations(n))
                .enumerate()
                .map(|(i, (name, act))| {
                    let l = Dense::lookup(&ck.params, name, act)
                        .ok_or_else(|| Error::format("autoencoder checkpoint", format!("missing layer {name}")))?;
                    let (a, b) = if reversed { (widths[n - i], widths[n - i - 1]) } else { (widths[i], widths[i + 1]) };
                    if (l.input_dim, l.output_dim) != (a, b) {
                        return Err(Error::format("autoencoder checkpoint", format!("layer {name} has wrong shape")));
                    }
                    Ok(l)
                })
                .collect()
        };
        let encoder = lookup(&enc_names, false)?;
        let decoder = lookup(&dec_names, true)?;
        if ck.params.len() != 4 * n {
            return Err(Error::format("autoencoder checkpoint", "unexpected parameter groups"));
        }
        Ok(Self { config, params: ck.params.clone(), encoder, decoder })
    }
}

/// Mean losses after one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train: f64,
    pub validation: f64,
}

/// CSV rendering of a loss curve: `epoch,train,validation`.
pub fn curve_csv(curve: &[EpochLoss]) -> String {
    let mut s = String::from("epoch,train,validation\n");
    for e in curve {
        s.push_str(&format!("{},{},{}\n", e.epoch, e.train, e.validation));
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainedAe {
    /// Parameters of the epoch with the lowest validation loss.
    pub model: Autoencoder,
    pub curve: Vec<EpochLoss>,
    pub best_epoch: usize,
}

/// Frame-wise minibatch training. Frames are rows of `train`/`validation`.
pub fn train_ae(
    train: &Matrix,
    validation: &Matrix,
    config: &AeConfig,
    train_config: &AeTrainConfig,
    seed: u64,
) -> Result<TrainedAe> {
    if train.is_empty() || validation.is_empty() {
        return Err(Error::Config("autoencoder training needs non-empty train and validation splits".into()));
    }
    if train_config.batch_size == 0 || train_config.epochs == 0 {
        return Err(Error::Config("batch_size and epochs must be positive".into()));
    }
    let mut model = Autoencoder::new(config.clone(), seed)?;
    let mut opt = OptimizerState::new(train_config.optimizer, &model.params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..train.rows()).collect();
    let mut best = model.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut curve = Vec::with_capacity(train_config.epochs);
    let cols = train.cols();

    for epoch in 1..=train_config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(train_config.batch_size) {
            let mut data = Vec::with_capacity(chunk.len() * cols);
            for &r in chunk {
                data.extend_from_slice(train.row(r));
            }
            let batch = Matrix::from_vec(chunk.len(), cols, data)?;
            let grads = {
                let mut tape = Tape::new();
                let bound = tape.bind(&model.params);
                let loss = model.loss_on_tape(&mut tape, &bound, &batch)?;
                total += tape.scalar(loss) * chunk.len() as f64;
                tape.backward(loss)?
            };
            model.params.accumulate(&grads.params)?;
            opt.step(&mut model.params)?;
        }
        let val = model.mse(validation)?;
        if !val.is_finite() {
            return Err(Error::Diverged { epoch, value: val });
        }
        curve.push(EpochLoss { epoch, train: total / train.rows() as f64, validation: val });
        if val < best_val {
            best_val = val;
            best_epoch = epoch;
            best.params.copy_values_from(&model.params)?;
        }
    }
    Ok(TrainedAe { model: best, curve, best_epoch })
}
