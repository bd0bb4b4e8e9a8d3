//! Text encoder, style-token reference encoder and the pitch-only prosody encoder.

use candle_core::{DType, Tensor};

use super::layers::{length_mask, softmax_last, Conv1d, GruCell, Linear, LstmCell};
use super::params::{Init, ParamBuilder};
use crate::error::{Error, Result};

/// Symbol embedding, masked convolutions and a bidirectional LSTM.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    embedding: Tensor,
    convs: Vec<Conv1d>,
    forward_rnn: LstmCell,
    backward_rnn: LstmCell,
    n_symbols: usize,
}

impl TextEncoder {
    pub fn new(
        pb: &ParamBuilder,
        n_symbols: usize,
        symbol_dim: usize,
        conv_layers: usize,
        kernel: usize,
        output_dim: usize,
    ) -> Result<Self> {
        let embedding = pb.get(&[n_symbols, symbol_dim], "embedding", Init::Uniform(0.3))?;
        let convs = (0..conv_layers)
            .map(|i| Conv1d::new(&pb.pp(&format!("conv{i}")), symbol_dim, symbol_dim, kernel, 1))
            .collect::<Result<Vec<_>>>()?;
        let half = output_dim / 2;
        Ok(Self {
            embedding,
            convs,
            forward_rnn: LstmCell::new(&pb.pp("rnn_fwd"), symbol_dim, half)?,
            backward_rnn: LstmCell::new(&pb.pp("rnn_bwd"), symbol_dim, half)?,
            n_symbols,
        })
    }

    /// `ids` is `(batch, len)` u32; returns `(batch, len, output_dim)` with padded positions zeroed.
    pub fn forward(&self, ids: &Tensor, lengths: &[usize]) -> Result<Tensor> {
        let (b, n) = ids.dims2()?;
        let flat = ids.flatten_all()?;
        if let Some(&bad) = flat.to_vec1::<u32>()?.iter().find(|&&id| id as usize >= self.n_symbols) {
            return Err(Error::OutOfVocabulary { id: bad, size: self.n_symbols });
        }
        let mask = length_mask(lengths, n, self.embedding.dtype(), self.embedding.device())?;
        let mask3 = mask.unsqueeze(1)?;
        let mut x = self.embedding.index_select(&flat, 0)?.reshape((b, n, ()))?.transpose(1, 2)?;
        x = x.broadcast_mul(&mask3)?;
        for conv in &self.convs {
            x = conv.forward(&x)?.relu()?.broadcast_mul(&mask3)?;
        }
        let x = x.transpose(1, 2)?.contiguous()?;
        let fwd = self.forward_rnn.run(&x)?;
        let reversal = reverse_within_lengths(lengths, n, x.device())?;
        let bwd = reorder(&self.backward_rnn.run(&reorder(&x, &reversal)?)?, &reversal)?;
        Ok(Tensor::cat(&[fwd, bwd], 2)?.broadcast_mul(&mask.unsqueeze(2)?)?)
    }
}

/// Flat gather indices that reverse each row's first `length` positions and keep the rest.
fn reverse_within_lengths(lengths: &[usize], n: usize, device: &candle_core::Device) -> Result<Tensor> {
    let idx: Vec<u32> = lengths
        .iter()
        .enumerate()
        .flat_map(|(b, &l)| (0..n).map(move |t| (b * n + if t < l { l - 1 - t } else { t }) as u32))
        .collect();
    Ok(Tensor::from_vec(idx, lengths.len() * n, device)?)
}

fn reorder(x: &Tensor, flat_index: &Tensor) -> Result<Tensor> {
    let (b, n, d) = x.dims3()?;
    Ok(x.reshape((b * n, d))?.index_select(flat_index, 0)?.reshape((b, n, d))?)
}

/// Strided convolutions over a reference mel followed by a GRU summary.
#[derive(Debug, Clone)]
pub struct ReferenceEncoder {
    convs: Vec<Conv1d>,
    rnn: GruCell,
    mel_mean: f64,
    mel_std: f64,
}

impl ReferenceEncoder {
    pub fn new(pb: &ParamBuilder, mel_channels: usize, channels: usize, rnn_dim: usize) -> Result<Self> {
        Ok(Self {
            convs: vec![
                Conv1d::new(&pb.pp("conv0"), mel_channels, channels, 3, 2)?,
                Conv1d::new(&pb.pp("conv1"), channels, channels, 3, 2)?,
            ],
            rnn: GruCell::new(&pb.pp("rnn"), channels, rnn_dim)?,
            mel_mean: 0.0,
            mel_std: 1.0,
        })
    }

    pub fn with_normalization(mut self, mean: f64, std: f64) -> Self {
        self.mel_mean = mean;
        self.mel_std = std;
        self
    }

    /// `mel` is `(batch, frames, channels)`; returns `(batch, rnn_dim)`.
    pub fn forward(&self, mel: &Tensor, lengths: &[usize]) -> Result<Tensor> {
        let in_mask = length_mask(lengths, mel.dim(1)?, mel.dtype(), mel.device())?;
        let normalized = mel.affine(1.0 / self.mel_std, -self.mel_mean / self.mel_std)?.broadcast_mul(&in_mask.unsqueeze(2)?)?;
        let mut x = normalized.transpose(1, 2)?.contiguous()?;
        let mut lens = lengths.to_vec();
        for conv in &self.convs {
            lens = lens.iter().map(|&l| conv.output_len(l)).collect();
            let out = conv.forward(&x)?.relu()?;
            let mask = length_mask(&lens, out.dim(2)?, out.dtype(), out.device())?;
            x = out.broadcast_mul(&mask.unsqueeze(1)?)?;
        }
        let t = x.dim(2)?;
        let mask = length_mask(&lens, t, x.dtype(), x.device())?;
        self.rnn.final_state(&x.transpose(1, 2)?.contiguous()?, &mask)
    }
}

/// Multi-head attention from a reference summary onto a bank of learned style tokens.
#[derive(Debug, Clone)]
pub struct StyleTokenLayer {
    tokens: Tensor,
    query: Linear,
    key: Linear,
    value: Linear,
    heads: usize,
    dim: usize,
}

impl StyleTokenLayer {
    pub fn new(pb: &ParamBuilder, query_dim: usize, n_tokens: usize, heads: usize, dim: usize) -> Result<Self> {
        let token_dim = dim / heads;
        Ok(Self {
            tokens: pb.get(&[n_tokens, token_dim], "tokens", Init::Uniform(0.5))?,
            query: Linear::no_bias(&pb.pp("query"), query_dim, dim)?,
            key: Linear::no_bias(&pb.pp("key"), token_dim, dim)?,
            value: Linear::no_bias(&pb.pp("value"), token_dim, dim)?,
            heads,
            dim,
        })
    }

    /// Value projections of the tokens, `(n_tokens, dim)`; head `h` owns columns
    /// `h * dim / heads .. (h + 1) * dim / heads`.
    pub fn token_values(&self) -> Result<Tensor> {
        self.value.forward(&self.tokens.tanh()?)
    }

    /// Returns the style embedding `(batch, dim)` and token weights `(batch, heads, n_tokens)`.
    pub fn forward(&self, summary: &Tensor) -> Result<(Tensor, Tensor)> {
        let b = summary.dim(0)?;
        let n_tokens = self.tokens.dim(0)?;
        let hd = self.dim / self.heads;
        let keys_in = self.tokens.tanh()?;
        let q = self.query.forward(summary)?.reshape((b, self.heads, 1, hd))?;
        let k = self.key.forward(&keys_in)?.reshape((n_tokens, self.heads, hd))?.transpose(0, 1)?.contiguous()?;
        let v = self.value.forward(&keys_in)?.reshape((n_tokens, self.heads, hd))?.transpose(0, 1)?.contiguous()?;
        let scores = q.broadcast_matmul(&k.t()?.unsqueeze(0)?)?.affine(1.0 / (hd as f64).sqrt(), 0.0)?;
        let weights = softmax_last(&scores)?;
        let out = weights.broadcast_matmul(&v.unsqueeze(0)?)?.reshape((b, self.dim))?;
        Ok((out, weights.squeeze(2)?))
    }
}

/// Convolutional encoder from `(normalized f0, voiced flag)` frames to per-frame prosody vectors.
#[derive(Debug, Clone)]
pub struct PitchEncoder {
    convs: Vec<Conv1d>,
    output: Linear,
}

impl PitchEncoder {
    pub fn new(pb: &ParamBuilder, channels: usize, kernel: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            convs: vec![
                Conv1d::new(&pb.pp("conv0"), 2, channels, kernel, 1)?,
                Conv1d::new(&pb.pp("conv1"), channels, channels, kernel, 1)?,
            ],
            output: Linear::new(&pb.pp("output"), channels, dim)?,
        })
    }

    /// `features` is `(batch, frames, 2)`; returns `(batch, frames, dim)` with padding zeroed.
    pub fn forward(&self, features: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let mask3 = mask.unsqueeze(1)?;
        let mut x = features.transpose(1, 2)?.contiguous()?.broadcast_mul(&mask3)?;
        for conv in &self.convs {
            x = conv.forward(&x)?.relu()?.broadcast_mul(&mask3)?;
        }
        let y = self.output.forward(&x.transpose(1, 2)?)?.tanh()?;
        Ok(y.broadcast_mul(&mask.unsqueeze(2)?)?)
    }
}

/// Host-side helper: `(ln(f0 / reference_hz), 1)` on voiced frames, `(0, 0)` otherwise.
pub fn f0_features(f0: &[f64], voiced: &[bool], reference_hz: f64) -> Vec<[f32; 2]> {
    f0.iter()
        .zip(voiced)
        .map(|(&f, &v)| if v { [(f / reference_hz).ln() as f32, 1.0] } else { [0.0, 0.0] })
        .collect()
}

pub(crate) fn features_tensor(rows: &[Vec<[f32; 2]>], max_len: usize, dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
    let mut data = vec![0f32; rows.len() * max_len * 2];
    for (b, row) in rows.iter().enumerate() {
        for (t, v) in row.iter().enumerate() {
            data[(b * max_len + t) * 2] = v[0];
            data[(b * max_len + t) * 2 + 1] = v[1];
        }
    }
    Ok(Tensor::from_vec(data, (rows.len(), max_len, 2), device)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn text_encoding_ignores_padding() {
        let pb = ParamBuilder::seeded(1, DType::F32, &Device::Cpu);
        let enc = TextEncoder::new(&pb, 6, 8, 2, 5, 8).unwrap();
        let single = Tensor::new(&[[2u32, 3, 4]], &Device::Cpu).unwrap();
        let padded = Tensor::new(&[[2u32, 3, 4, 0, 0], [5, 4, 3, 2, 1]], &Device::Cpu).unwrap();
        let a = enc.forward(&single, &[3]).unwrap().squeeze(0).unwrap().to_vec2::<f32>().unwrap();
        let b = enc.forward(&padded, &[3, 5]).unwrap().get(0).unwrap().to_vec2::<f32>().unwrap();
        for t in 0..3 {
            for (x, y) in a[t].iter().zip(&b[t]) {
                assert!((x - y).abs() < 1e-5);
            }
        }
        assert!(b[3].iter().chain(&b[4]).all(|&v| v == 0.0));
    }

    #[test]
    fn out_of_vocabulary_is_rejected() {
        let pb = ParamBuilder::seeded(1, DType::F32, &Device::Cpu);
        let enc = TextEncoder::new(&pb, 4, 8, 1, 3, 8).unwrap();
        let ids = Tensor::new(&[[1u32, 9]], &Device::Cpu).unwrap();
        assert!(matches!(enc.forward(&ids, &[2]), Err(Error::OutOfVocabulary { id: 9, size: 4 })));
    }

    #[test]
    fn token_weights_are_distributions() {
        let pb = ParamBuilder::seeded(2, DType::F32, &Device::Cpu);
        let stl = StyleTokenLayer::new(&pb, 6, 10, 2, 8).unwrap();
        let q = Tensor::randn(0f32, 1.0, (3, 6), &Device::Cpu).unwrap();
        let (out, w) = stl.forward(&q).unwrap();
        assert_eq!(out.dims(), &[3, 8]);
        assert_eq!(w.dims(), &[3, 2, 10]);
        for item in w.to_vec3::<f32>().unwrap() {
            for head in item {
                assert!(head.iter().all(|&x| x >= 0.0));
                assert!((head.iter().sum::<f32>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn pitch_encoder_keeps_length() {
        let pb = ParamBuilder::seeded(2, DType::F32, &Device::Cpu);
        let enc = PitchEncoder::new(&pb, 4, 5, 6).unwrap();
        let rows = vec![f0_features(&[0.0; 10], &[false; 10], 200.0)];
        let x = features_tensor(&rows, 10, DType::F32, &Device::Cpu).unwrap();
        let mask = length_mask(&[10], 10, DType::F32, &Device::Cpu).unwrap();
        let y = enc.forward(&x, &mask).unwrap();
        assert_eq!(y.dims(), &[1, 10, 6]);
        assert!(y.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().all(|v| v.is_finite()));
    }
}
