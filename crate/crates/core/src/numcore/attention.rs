//! Anti-causal self-attention encoder.
//!
//! Each token may only attend to itself and to later tokens. The encoder is
//! evaluated on *windows*: the window for position `t` holds tokens
//! `t..=t+k` (clipped at the sequence end), and the embedding of `t` is the
//! output at the first slot of that window. Slot offsets inside the window
//! carry a learned positional embedding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Dense, Matrix, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    /// Longest window the positional table covers.
    pub max_positions: usize,
}

#[derive(Clone, Debug)]
struct AttentionLayer {
    query: ParamId,
    key: ParamId,
    value: ParamId,
    output: ParamId,
}

#[derive(Clone, Debug)]
pub struct AnticausalEncoder {
    config: EncoderConfig,
    embed: Dense,
    positions: ParamId,
    layers: Vec<AttentionLayer>,
}

/// A batch of equally padded token windows.
#[derive(Clone, Debug)]
pub struct WindowBatch {
    width: usize,
    tokens: Matrix,
    lengths: Vec<usize>,
}

impl WindowBatch {
    pub fn new(width: usize, token_dim: usize, capacity: usize) -> Self {
        assert!(width > 0);
        WindowBatch { width, tokens: Matrix::zeros(0, token_dim), lengths: Vec::with_capacity(capacity) }
    }

    /// Appends one window made of `rows` (at most `width` of them).
    pub fn push<'a>(&mut self, rows: impl IntoIterator<Item = &'a [f64]>) {
        let dim = self.tokens.cols();
        let mut data = std::mem::take(&mut self.tokens).into_vec();
        let mut len = 0;
        for row in rows {
            assert!(len < self.width, "window longer than batch width");
            assert_eq!(row.len(), dim, "token width mismatch");
            data.extend_from_slice(row);
            len += 1;
        }
        assert!(len > 0, "empty window");
        data.resize(data.len() + (self.width - len) * dim, 0.0);
        self.lengths.push(len);
        self.tokens = Matrix::from_vec(self.lengths.len() * self.width, dim, data);
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }
}

impl AnticausalEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, config: EncoderConfig, rng: &mut R) -> Self {
        assert!(config.num_layers >= 1 && config.max_positions >= 1);
        let d = config.embed_dim;
        let embed = Dense::new(store, &format!("{name}.embed"), config.input_dim, d, rng);
        let positions = store.add_fan_in(format!("{name}.positions"), config.max_positions, d, rng);
        let layers = (0..config.num_layers)
            .map(|i| AttentionLayer {
                query: store.add_fan_in(format!("{name}.attn{i}.query"), d, d, rng),
                key: store.add_fan_in(format!("{name}.attn{i}.key"), d, d, rng),
                value: store.add_fan_in(format!("{name}.attn{i}.value"), d, d, rng),
                output: store.add_fan_in(format!("{name}.attn{i}.output"), d, d, rng),
            })
            .collect();
        AnticausalEncoder { config, embed, positions, layers }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Embeds the first slot of every window: `B × embed_dim`.
    pub fn encode_windows(&self, tape: &mut Tape, store: &ParamStore, batch: &WindowBatch) -> Var {
        let width = batch.width;
        assert!(width <= self.config.max_positions, "window wider than positional table");
        let n = batch.len();
        let total = n * width;
        let scale = 1.0 / (self.config.embed_dim as f64).sqrt();

        let x = tape.constant(batch.tokens.clone());
        let e = self.embed.forward(tape, store, x);
        let pos_table = tape.param(store, self.positions);
        let pos = tape.gather_rows(pos_table, (0..total).map(|i| i % width).collect());
        let mut h = tape.add(e, pos);

        let valid = |i: usize| i % width < batch.lengths[i / width];
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate() {
            let wq = tape.param(store, layer.query);
            let wk = tape.param(store, layer.key);
            let wv = tape.param(store, layer.value);
            let wo = tape.param(store, layer.output);
            let keys = tape.matmul(h, wk);
            let values = tape.matmul(h, wv);
            if li < last {
                // full anti-causal mask inside each window
                let q = tape.matmul(h, wq);
                let scores = tape.matmul_nt(q, keys);
                let scores = tape.scale(scores, scale);
                let mut mask = vec![false; total * total];
                for i in 0..total {
                    if !valid(i) {
                        continue;
                    }
                    let w = i / width;
                    for j in i..(w + 1) * width {
                        mask[i * total + j] = valid(j);
                    }
                }
                let attn = tape.masked_softmax(scores, mask);
                let mixed = tape.matmul(attn, values);
                let out = tape.matmul(mixed, wo);
                h = tape.add(h, out);
            } else {
                let firsts: Vec<usize> = (0..n).map(|w| w * width).collect();
                let h0 = tape.gather_rows(h, firsts);
                let q = tape.matmul(h0, wq);
                let scores = tape.matmul_nt(q, keys);
                let scores = tape.scale(scores, scale);
                let mut mask = vec![false; n * total];
                for w in 0..n {
                    for j in w * width..w * width + batch.lengths[w] {
                        mask[w * total + j] = true;
                    }
                }
                let attn = tape.masked_softmax(scores, mask);
                let mixed = tape.matmul(attn, values);
                let out = tape.matmul(mixed, wo);
                h = tape.add(h0, out);
            }
        }
        h
    }

    /// Per-position embeddings of a whole token sequence. With `window_k`
    /// set, position `t` sees tokens `t..=t+k`; otherwise every later token.
    pub fn encode_sequence(&self, store: &ParamStore, tokens: &Matrix, window_k: Option<usize>) -> Result<Matrix> {
        let len = tokens.rows();
        if len == 0 {
            return Err(Error::InvalidDimension("cannot encode an empty sequence".into()));
        }
        if tokens.cols() != self.config.input_dim {
            return Err(Error::ShapeMismatch {
                op: "anticausal_encode",
                detail: format!("token width {} but encoder expects {}", tokens.cols(), self.config.input_dim),
            });
        }
        let reach = window_k.map_or(len - 1, |k| k.min(len - 1));
        let width = reach + 1;
        if width > self.config.max_positions {
            return Err(Error::InvalidDimension(format!(
                "window of {width} tokens exceeds the encoder's {} positions",
                self.config.max_positions
            )));
        }
        let mut batch = WindowBatch::new(width, tokens.cols(), len);
        for t in 0..len {
            let end = (t + reach).min(len - 1);
            batch.push((t..=end).map(|j| tokens.row(j)));
        }
        let mut tape = Tape::new();
        let out = self.encode_windows(&mut tape, store, &batch);
        Ok(tape.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn encoder(layers: usize, seed: u64) -> (ParamStore, AnticausalEncoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cfg = EncoderConfig { input_dim: 4, embed_dim: 6, num_layers: layers, max_positions: 8 };
        let enc = AnticausalEncoder::new(&mut store, "enc", cfg, &mut rng);
        (store, enc)
    }

    fn random_tokens(rng: &mut ChaCha8Rng, len: usize) -> Matrix {
        Matrix::from_vec(len, 4, (0..len * 4).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn past_tokens_do_not_change_later_embeddings() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for layers in [1, 2] {
            let (store, enc) = encoder(layers, 11);
            let tokens = random_tokens(&mut rng, 6);
            let base = enc.encode_sequence(&store, &tokens, None).unwrap();
            for t in 1..6 {
                let mut perturbed = tokens.clone();
                perturbed.row_mut(t - 1)[2] += 0.75;
                let out = enc.encode_sequence(&store, &perturbed, None).unwrap();
                for s in t..6 {
                    assert_eq!(base.row(s), out.row(s), "layers={layers} t={t} s={s}");
                }
                assert_ne!(base.row(t - 1), out.row(t - 1));
            }
        }
    }

    #[test]
    fn windowed_embedding_ignores_tokens_beyond_the_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (store, enc) = encoder(1, 2);
        let tokens = random_tokens(&mut rng, 6);
        let base = enc.encode_sequence(&store, &tokens, Some(1)).unwrap();
        let mut perturbed = tokens.clone();
        perturbed.row_mut(3)[0] -= 1.3;
        let out = enc.encode_sequence(&store, &perturbed, Some(1)).unwrap();
        assert_eq!(base.row(1), out.row(1));
        assert_ne!(base.row(2), out.row(2));
    }

    #[test]
    fn single_token_attends_only_to_itself() {
        let (store, enc) = encoder(1, 9);
        let token = Matrix::from_rows(&[vec![0.2, -0.4, 1.0, 0.0]]);
        let out = enc.encode_sequence(&store, &token, None).unwrap();
        // softmax over one key is weight 1, so the output is h + (h·Wv)·Wo
        let h = {
            let e = token.matmul(store.value(enc.embed.weight));
            let pos = store.value(enc.positions).row(0).to_vec();
            let data: Vec<f64> = e.data().iter().zip(&pos).map(|(a, b)| a + b).collect();
            Matrix::row_vector(data)
        };
        let layer = &enc.layers[0];
        let attended = h.matmul(store.value(layer.value)).matmul(store.value(layer.output));
        for j in 0..6 {
            assert!((out.get(0, j) - (h.get(0, j) + attended.get(0, j))).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_sequence_is_rejected() {
        let (store, enc) = encoder(1, 1);
        assert!(enc.encode_sequence(&store, &Matrix::zeros(0, 4), None).is_err());
    }
}
