//! The CNN-BiLSTM classifier: frozen embeddings, spatial dropout, a
//! width-2 convolution, a bidirectional LSTM returning every timestep, a
//! per-timestep dense layer, global average pooling, dropout and one
//! softmax head per task.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    adam_step, dropout, dropout_backward, embedding_forward, global_avg_pool1d, global_avg_pool1d_backward, one_hot,
    softmax, softmax_cross_entropy, spatial_dropout1d, spatial_dropout1d_backward, Activation, AdamConfig, BiLstm,
    BiLstmCache, Conv1d, Conv1dCache, Dense, DenseCache, DropoutMask, Parameter, Scalar, Tensor,
};
use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
const CHECKPOINT_VERSION: u32 = 1;

/// Rows per forward pass during batched inference.
const PREDICT_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub seq_len: usize,
    pub embed_dim: usize,
    pub conv_filters: usize,
    pub conv_kernel: usize,
    pub conv_activation: Activation,
    pub lstm_units: usize,
    pub lstm_dropout: f64,
    pub lstm_recurrent_dropout: f64,
    pub dense_units: usize,
    pub dense_activation: Activation,
    /// Apply the dense layer at every timestep before pooling; when false,
    /// pool the BiLSTM output first and apply the dense layer once.
    pub dense_before_pool: bool,
    pub spatial_dropout_rate: f64,
    pub final_dropout_rate: f64,
    pub num_heads: usize,
    pub classes_per_head: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            seq_len: 100,
            embed_dim: 300,
            conv_filters: 64,
            conv_kernel: 2,
            conv_activation: Activation::Relu,
            lstm_units: 128,
            lstm_dropout: 0.1,
            lstm_recurrent_dropout: 0.1,
            dense_units: 128,
            dense_activation: Activation::Relu,
            dense_before_pool: true,
            spatial_dropout_rate: 0.2,
            final_dropout_rate: 0.1,
            num_heads: 1,
            classes_per_head: 2,
            seed: 42,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("seq_len", self.seq_len),
            ("embed_dim", self.embed_dim),
            ("conv_filters", self.conv_filters),
            ("conv_kernel", self.conv_kernel),
            ("lstm_units", self.lstm_units),
            ("dense_units", self.dense_units),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        let rates = [
            ("lstm_dropout", self.lstm_dropout),
            ("lstm_recurrent_dropout", self.lstm_recurrent_dropout),
            ("spatial_dropout_rate", self.spatial_dropout_rate),
            ("final_dropout_rate", self.final_dropout_rate),
        ];
        for (name, r) in rates {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {r}")));
            }
        }
        if self.seq_len < self.conv_kernel {
            return Err(Error::Config(format!(
                "seq_len {} is shorter than conv_kernel {}",
                self.seq_len, self.conv_kernel
            )));
        }
        if !(1..=2).contains(&self.num_heads) {
            return Err(Error::Config(format!(
                "num_heads must be 1 or 2, got {}",
                self.num_heads
            )));
        }
        if self.classes_per_head < 2 {
            return Err(Error::Config("classes_per_head must be at least 2".into()));
        }
        Ok(())
    }

    /// Timesteps left after the valid convolution.
    pub fn conv_len(&self) -> usize {
        self.seq_len - self.conv_kernel + 1
    }
}

/// Index of the largest entry; exact ties go to the higher class index.
pub fn argmax_tie_high<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v >= row[best] {
            best = i;
        }
    }
    best
}

/// Everything `backward` needs from one forward pass.
struct Trace<T> {
    batch: usize,
    spatial_mask: Option<DropoutMask<T>>,
    conv: Conv1dCache<T>,
    lstm: BiLstmCache<T>,
    dense: DenseCache<T>,
    final_mask: Option<DropoutMask<T>>,
    heads: Vec<DenseCache<T>>,
}

#[derive(Clone, Debug)]
pub struct StepOutput<T> {
    /// Unweighted mean of the per-head cross-entropies.
    pub loss: T,
    /// Per-head `B x C` probabilities from the same (possibly train-mode) pass.
    pub probabilities: Vec<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct Network<T> {
    config: ModelConfig,
    table: Arc<EmbeddingTable>,
    pub conv: Conv1d<T>,
    pub bilstm: BiLstm<T>,
    pub dense: Dense<T>,
    pub heads: Vec<Dense<T>>,
}

impl<T: Scalar> Network<T> {
    pub fn build<R: Rng + ?Sized>(config: ModelConfig, table: Arc<EmbeddingTable>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if table.dim() != config.embed_dim {
            return Err(Error::Config(format!(
                "embedding table has dimension {}, model expects {}",
                table.dim(),
                config.embed_dim
            )));
        }
        let c = &config;
        let conv = Conv1d::new(c.conv_kernel, c.embed_dim, c.conv_filters, c.conv_activation, rng);
        let bilstm = BiLstm::new(
            c.conv_filters,
            c.lstm_units,
            c.lstm_dropout,
            c.lstm_recurrent_dropout,
            rng,
        );
        let dense = Dense::new(2 * c.lstm_units, c.dense_units, c.dense_activation, rng);
        let heads = (0..c.num_heads)
            .map(|_| Dense::new(c.dense_units, c.classes_per_head, Activation::Linear, rng))
            .collect();
        Ok(Self {
            config,
            table,
            conv,
            bilstm,
            dense,
            heads,
        })
    }

    /// Builds with a generator seeded from `config.seed`.
    pub fn seeded(config: ModelConfig, table: Arc<EmbeddingTable>) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        Self::build(config, table, &mut rng)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn table(&self) -> &Arc<EmbeddingTable> {
        &self.table
    }

    fn batch_size(&self, indices: &[u32]) -> Result<usize> {
        let l = self.config.seq_len;
        if indices.is_empty() || !indices.len().is_multiple_of(l) {
            return Err(Error::Shape(format!(
                "expected a non-empty batch of length-{l} sequences, got {} indices",
                indices.len()
            )));
        }
        Ok(indices.len() / l)
    }

    fn run<R: Rng + ?Sized>(&self, indices: &[u32], train: bool, rng: &mut R) -> Result<(Vec<Tensor<T>>, Trace<T>)> {
        let c = &self.config;
        let b = self.batch_size(indices)?;
        let x = embedding_forward::<T>(indices, b, c.seq_len, &self.table)?;
        let (x, spatial_mask) = spatial_dropout1d(&x, c.spatial_dropout_rate, train, rng)?;
        let (x, conv) = self.conv.forward(&x)?;
        debug_assert_eq!(x.shape(), &[b, c.conv_len(), c.conv_filters]);
        let (x, lstm) = self.bilstm.forward(&x, train, rng)?;
        debug_assert_eq!(x.shape(), &[b, c.conv_len(), 2 * c.lstm_units]);
        let (pooled, dense) = if c.dense_before_pool {
            let (y, cache) = self.dense.forward(&x)?;
            (global_avg_pool1d(&y)?, cache)
        } else {
            self.dense.forward(&global_avg_pool1d(&x)?)?
        };
        debug_assert_eq!(pooled.shape(), &[b, c.dense_units]);
        let (features, final_mask) = dropout(&pooled, c.final_dropout_rate, train, rng);
        let mut logits = Vec::with_capacity(self.heads.len());
        let mut heads = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let (z, cache) = head.forward(&features)?;
            logits.push(z);
            heads.push(cache);
        }
        let trace = Trace {
            batch: b,
            spatial_mask,
            conv,
            lstm,
            dense,
            final_mask,
            heads,
        };
        Ok((logits, trace))
    }

    /// Per-head `B x C` probabilities for a flat `B * seq_len` index batch.
    pub fn forward<R: Rng + ?Sized>(&self, indices: &[u32], train: bool, rng: &mut R) -> Result<Vec<Tensor<T>>> {
        let (logits, _) = self.run(indices, train, rng)?;
        Ok(logits.iter().map(softmax).collect())
    }

    /// Forward and backward pass; adds parameter gradients without stepping.
    pub fn accumulate_gradients<R: Rng + ?Sized>(
        &mut self,
        indices: &[u32],
        labels: &[Vec<u8>],
        train: bool,
        rng: &mut R,
    ) -> Result<StepOutput<T>> {
        let (logits, trace) = self.run(indices, train, rng)?;
        if labels.len() != self.heads.len() {
            return Err(Error::Config(format!(
                "model has {} head(s) but labels were given for {}",
                self.heads.len(),
                labels.len()
            )));
        }
        let heads = T::lit(self.heads.len() as f64);
        let mut loss = T::zero();
        let mut probabilities = Vec::with_capacity(self.heads.len());
        let mut d_features: Option<Tensor<T>> = None;
        for (h, (z, y)) in logits.iter().zip(labels).enumerate() {
            if y.len() != trace.batch {
                return Err(Error::Shape(format!(
                    "head {h} has {} labels for a batch of {}",
                    y.len(),
                    trace.batch
                )));
            }
            let onehot = one_hot::<T>(y, self.config.classes_per_head)?;
            let (l, g) = softmax_cross_entropy(z, &onehot)?;
            loss += l / heads;
            probabilities.push(softmax(z));
            let g = g.map(|v| v / heads);
            let d = self.heads[h].backward(&trace.heads[h], &g)?;
            match &mut d_features {
                Some(acc) => acc.add_assign(&d),
                None => d_features = Some(d),
            }
        }
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {loss}")));
        }
        let d_pooled = dropout_backward(&d_features.expect("at least one head"), trace.final_mask.as_ref());
        let conv_len = self.config.conv_len();
        let d_lstm = if self.config.dense_before_pool {
            let d_dense = global_avg_pool1d_backward(&d_pooled, conv_len);
            self.dense.backward(&trace.dense, &d_dense)?
        } else {
            let d_pool = self.dense.backward(&trace.dense, &d_pooled)?;
            global_avg_pool1d_backward(&d_pool, conv_len)
        };
        let d_conv = self.bilstm.backward(&trace.lstm, &d_lstm)?;
        let d_embed = self.conv.backward(&trace.conv, &d_conv)?;
        // The embedding table is frozen; this only keeps the chain explicit.
        let _ = spatial_dropout1d_backward(&d_embed, trace.spatial_mask.as_ref());
        Ok(StepOutput { loss, probabilities })
    }

    /// One optimizer step on a batch. `labels[h]` holds head `h`'s labels.
    pub fn train_step<R: Rng + ?Sized>(
        &mut self,
        indices: &[u32],
        labels: &[Vec<u8>],
        adam: &AdamConfig,
        rng: &mut R,
    ) -> Result<StepOutput<T>> {
        self.zero_grad();
        let out = self.accumulate_gradients(indices, labels, true, rng)?;
        for p in self.parameters_mut() {
            if !p.grad.all_finite() {
                return Err(Error::Numeric("non-finite gradient".into()));
            }
            adam_step(p, adam);
        }
        Ok(out)
    }

    pub fn zero_grad(&mut self) {
        self.parameters_mut().into_iter().for_each(Parameter::zero_grad);
    }

    /// Eval-mode probabilities, computed in parallel chunks.
    pub fn predict_proba(&self, indices: &[u32]) -> Result<Vec<Tensor<T>>> {
        let l = self.config.seq_len;
        let n = self.batch_size(indices)?;
        let chunks: Vec<Vec<Tensor<T>>> = indices
            .par_chunks(PREDICT_CHUNK * l)
            .map(|chunk| self.forward(chunk, false, &mut ChaCha8Rng::seed_from_u64(0)))
            .collect::<Result<_>>()?;
        let classes = self.config.classes_per_head;
        (0..self.heads.len())
            .map(|h| {
                let data = chunks.iter().flat_map(|c| c[h].data().iter().copied()).collect();
                Tensor::new(vec![n, classes], data)
            })
            .collect()
    }

    /// Per-head labels by argmax, ties resolved to the higher class.
    pub fn predict(&self, indices: &[u32]) -> Result<Vec<Vec<u8>>> {
        Ok(self
            .predict_proba(indices)?
            .iter()
            .map(labels_from_probabilities)
            .collect())
    }

    /// Parameters in checkpoint order with stable names.
    pub fn named_parameters(&mut self) -> Vec<(String, &mut Parameter<T>)> {
        let mut out: Vec<(String, &mut Parameter<T>)> = vec![
            ("conv.kernel".into(), &mut self.conv.kernel),
            ("conv.bias".into(), &mut self.conv.bias),
        ];
        for (dir, p) in [("fwd", &mut self.bilstm.forward), ("bwd", &mut self.bilstm.backward)] {
            out.push((format!("bilstm.{dir}.w"), &mut p.w));
            out.push((format!("bilstm.{dir}.u"), &mut p.u));
            out.push((format!("bilstm.{dir}.b"), &mut p.b));
        }
        out.push(("dense.weight".into(), &mut self.dense.weight));
        out.push(("dense.bias".into(), &mut self.dense.bias));
        for (h, head) in self.heads.iter_mut().enumerate() {
            out.push((format!("head{h}.weight"), &mut head.weight));
            out.push((format!("head{h}.bias"), &mut head.bias));
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        self.named_parameters().into_iter().map(|(_, p)| p).collect()
    }

    pub fn parameter_count(&mut self) -> usize {
        self.parameters_mut().iter().map(|p| p.value.len()).sum()
    }

    pub fn layer_order(&self) -> Vec<String> {
        let mut layers: Vec<String> = ["embedding", "spatial_dropout1d", "conv1d", "bilstm"]
            .map(String::from)
            .to_vec();
        if self.config.dense_before_pool {
            layers.extend(["dense", "global_avg_pool1d"].map(String::from));
        } else {
            layers.extend(["global_avg_pool1d", "dense"].map(String::from));
        }
        layers.push("dropout".into());
        layers.extend((0..self.heads.len()).map(|h| format!("head{h}")));
        layers
    }

    /// Writes `manifest.json` and `weights.bin` (little-endian `f32`).
    pub fn save_checkpoint(&mut self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let layers = self.layer_order();
        let embedding = EmbeddingShape {
            rows: self.table.rows(),
            dim: self.table.dim(),
        };
        let config = self.config.clone();
        let mut parameters = Vec::new();
        let mut bytes = Vec::new();
        let mut offset = 0;
        for (name, p) in self.named_parameters() {
            parameters.push(ParameterEntry {
                name,
                shape: p.shape().to_vec(),
                offset,
            });
            offset += p.value.len();
            for v in p.value.data() {
                let f = v
                    .to_f32()
                    .ok_or_else(|| Error::Numeric("parameter not representable as f32".into()))?;
                bytes.extend_from_slice(&f.to_le_bytes());
            }
        }
        let manifest = Manifest {
            version: CHECKPOINT_VERSION,
            config,
            layers,
            embedding,
            total_values: offset,
            parameters,
        };
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
        let path = dir.join(WEIGHTS_FILE);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
    }

    /// Restores a checkpoint against `table`. When `expected_seq_len` is
    /// given it must match the stored configuration.
    pub fn load_checkpoint(dir: &Path, table: Arc<EmbeddingTable>, expected_seq_len: Option<usize>) -> Result<Self> {
        let manifest = read_manifest(dir)?;
        if manifest.version != CHECKPOINT_VERSION {
            return Err(Error::Corrupt(format!(
                "unsupported checkpoint version {}",
                manifest.version
            )));
        }
        if let Some(l) = expected_seq_len {
            if l != manifest.config.seq_len {
                return Err(Error::Config(format!(
                    "checkpoint was trained with seq_len {}, caller expects {l}",
                    manifest.config.seq_len
                )));
            }
        }
        if table.rows() != manifest.embedding.rows || table.dim() != manifest.embedding.dim {
            return Err(Error::Config(format!(
                "embedding table is {}x{}, checkpoint expects {}x{}",
                table.rows(),
                table.dim(),
                manifest.embedding.rows,
                manifest.embedding.dim
            )));
        }
        let path = dir.join(WEIGHTS_FILE);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() != manifest.total_values * 4 {
            return Err(Error::Corrupt(format!(
                "{}: expected {} bytes, found {}",
                path.display(),
                manifest.total_values * 4,
                bytes.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(manifest.config.seed);
        let mut net = Self::build(manifest.config.clone(), table, &mut rng)?;
        let params = net.named_parameters();
        if params.len() != manifest.parameters.len() {
            return Err(Error::Corrupt(format!(
                "manifest lists {} parameters, model has {}",
                manifest.parameters.len(),
                params.len()
            )));
        }
        for ((name, p), entry) in params.into_iter().zip(&manifest.parameters) {
            if name != entry.name || p.shape() != entry.shape.as_slice() {
                return Err(Error::Corrupt(format!(
                    "parameter {} {:?} does not match model parameter {name} {:?}",
                    entry.name,
                    entry.shape,
                    p.shape()
                )));
            }
            let end = entry.offset + p.value.len();
            if end > manifest.total_values {
                return Err(Error::Corrupt(format!("parameter {name} extends past the weight file")));
            }
            for (v, raw) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(bytes[entry.offset * 4..end * 4].chunks_exact(4))
            {
                *v = T::widen_f32(f32::from_le_bytes(raw.try_into().expect("4-byte chunk")));
            }
        }
        Ok(net)
    }
}

pub fn labels_from_probabilities<T: Scalar>(probs: &Tensor<T>) -> Vec<u8> {
    let classes = probs.shape()[1];
    probs
        .data()
        .chunks_exact(classes)
        .map(|row| argmax_tie_high(row) as u8)
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingShape {
    pub rows: usize,
    pub dim: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParameterEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Position of the first value, counted in `f32` values.
    pub offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub config: ModelConfig,
    pub layers: Vec<String>,
    pub embedding: EmbeddingShape,
    pub total_values: usize,
    pub parameters: Vec<ParameterEntry>,
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Corrupt(format!("{}: {e}", path.display())))
}
