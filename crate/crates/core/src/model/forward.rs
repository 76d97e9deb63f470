use super::params::slot;
use super::{Model, ModelError, Result};
use crate::ingest::{TokenSequence, MASK_ID, PAD_ID};
use protgo_tensor::{Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const LN_EPS: f64 = 1e-12;

/// Inverted dropout driven by its own generator.
pub struct Dropout {
    pub rate: f64,
    pub rng: ChaCha8Rng,
}

impl Dropout {
    fn mask(&mut self, n: usize) -> Vec<f64> {
        let keep = 1.0 / (1.0 - self.rate);
        (0..n)
            .map(|_| {
                if self.rng.random::<f64>() < self.rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect()
    }
}

/// One forward pass of a [`Model`] on its own tape. Parameters are bound
/// lazily, so heads that a pass never touches never appear on the tape and
/// never receive gradients.
pub struct Graph<'m> {
    pub tape: Tape,
    model: &'m Model,
    vars: Vec<Option<Var>>,
    track_grads: bool,
    dropout: Option<Dropout>,
}

impl<'m> Graph<'m> {
    /// Inference: no gradients, no dropout.
    pub fn eval(model: &'m Model) -> Self {
        Self::build(model, false, None)
    }

    /// Training pass: unfrozen parameters receive gradients. Dropout is
    /// applied when given and the model's rate is positive.
    pub fn train(model: &'m Model, dropout: Option<Dropout>) -> Self {
        let dropout = dropout.filter(|d| d.rate > 0.0);
        Self::build(model, true, dropout)
    }

    fn build(model: &'m Model, track_grads: bool, dropout: Option<Dropout>) -> Self {
        Self {
            tape: Tape::new(),
            model,
            vars: vec![None; model.params.len()],
            track_grads,
            dropout,
        }
    }

    fn p(&mut self, index: usize) -> Var {
        if let Some(v) = self.vars[index] {
            return v;
        }
        let param = &self.model.params[index];
        let t = Tensor::new(param.shape.clone(), param.data.clone())
            .expect("parameter shapes are checked at construction");
        let v = if self.track_grads && self.model.is_trainable(index) {
            self.tape.leaf(t.with_requires_grad(true))
        } else {
            self.tape.constant(t)
        };
        self.vars[index] = Some(v);
        v
    }

    /// Gradient of every parameter touched by the pass, by parameter index.
    pub fn gradients(&self) -> Vec<Option<&[f64]>> {
        self.vars
            .iter()
            .map(|v| v.and_then(|v| self.tape.grad(v)))
            .collect()
    }

    fn dropout(&mut self, x: Var) -> Result<Var> {
        match &mut self.dropout {
            Some(d) => {
                let mask = d.mask(self.tape.value(x).len());
                Ok(self.tape.mul_const(x, mask)?)
            }
            None => Ok(x),
        }
    }

    /// Sum of token, positional and segment embeddings, `L×d`. Every
    /// position uses segment row 0.
    pub fn embed(&mut self, ids: &[u32]) -> Result<Var> {
        let cfg = &self.model.config;
        if ids.is_empty() {
            return Err(ModelError::EmptyInput);
        }
        if ids.len() > cfg.max_tokens() {
            return Err(ModelError::PositionOutOfRange {
                length: ids.len(),
                max: cfg.max_tokens(),
            });
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
            return Err(ModelError::InvalidToken {
                id: bad,
                vocab_size: cfg.vocab_size,
            });
        }
        let l = ids.len();
        let token_ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let positions: Vec<usize> = (0..l).collect();
        let tok_table = self.p(slot::TOKEN);
        let pos_table = self.p(slot::POSITION);
        let seg_table = self.p(slot::SEGMENT);
        let tok = self.tape.embedding(tok_table, &token_ids)?;
        let pos = self.tape.embedding(pos_table, &positions)?;
        let seg = self.tape.embedding(seg_table, &vec![0; l])?;
        let x = self.tape.add(tok, pos)?;
        Ok(self.tape.add(x, seg)?)
    }

    fn affine(&mut self, x: Var, w: usize, b: usize) -> Result<Var> {
        let (w, b) = (self.p(w), self.p(b));
        let y = self.tape.matmul(x, w)?;
        Ok(self.tape.add_bias(y, b)?)
    }

    /// Post-norm block: attention sublayer then feed-forward sublayer, each
    /// wrapped in a residual connection followed by layer normalisation.
    /// Keys whose `keep` flag is false are hidden from every query.
    pub fn encoder_layer(&mut self, layer: usize, x: Var, keep: &[bool]) -> Result<Var> {
        let s = |off| self.model.layer_slot(layer, off);
        let (qw, qb, kw, kb, vw, vb) = (
            s(slot::Q_W),
            s(slot::Q_B),
            s(slot::K_W),
            s(slot::K_B),
            s(slot::V_W),
            s(slot::V_B),
        );
        let (ow, ob, g1, b1) = (s(slot::O_W), s(slot::O_B), s(slot::LN1_G), s(slot::LN1_B));
        let (f1w, f1b, f2w, f2b) = (
            s(slot::FF1_W),
            s(slot::FF1_B),
            s(slot::FF2_W),
            s(slot::FF2_B),
        );
        let (g2, b2) = (s(slot::LN2_G), s(slot::LN2_B));

        let q = self.affine(x, qw, qb)?;
        let k = self.affine(x, kw, kb)?;
        let v = self.affine(x, vw, vb)?;
        let heads = self.model.config.num_heads;
        let ctx = self.tape.attention(q, k, v, heads, keep)?;
        let attn = self.affine(ctx, ow, ob)?;
        let attn = self.dropout(attn)?;
        let h = self.tape.add(x, attn)?;
        let (g1, b1) = (self.p(g1), self.p(b1));
        let h = self.tape.layer_norm(h, g1, b1, LN_EPS)?;

        let inner = self.affine(h, f1w, f1b)?;
        let inner = self.tape.gelu(inner);
        let ff = self.affine(inner, f2w, f2b)?;
        let ff = self.dropout(ff)?;
        let out = self.tape.add(h, ff)?;
        let (g2, b2) = (self.p(g2), self.p(b2));
        Ok(self.tape.layer_norm(out, g2, b2, LN_EPS)?)
    }

    /// Final hidden states `L×d` and the non-PAD mask.
    pub fn encode(&mut self, ids: &[u32]) -> Result<(Var, Vec<bool>)> {
        let keep: Vec<bool> = ids.iter().map(|&id| id != PAD_ID).collect();
        if !keep.iter().any(|&k| k) {
            return Err(ModelError::EmptyInput);
        }
        let mut x = self.embed(ids)?;
        for layer in 0..self.model.config.num_layers {
            x = self.encoder_layer(layer, x, &keep)?;
        }
        Ok((x, keep))
    }

    /// Label logits, one per vocabulary term.
    pub fn classify(&mut self, ids: &[u32]) -> Result<Var> {
        let (x, keep) = self.encode(ids)?;
        let pooled = self.tape.mean_pool(x, &keep)?;
        let d = self.model.config.d_model;
        let row = self.tape.reshape(pooled, &[1, d])?;
        let (w, b) = self.model.classifier_slots();
        let logits = self.affine(row, w, b)?;
        Ok(self.tape.reshape(logits, &[self.model.config.num_labels])?)
    }

    /// Vocabulary logits at every position, `L×V`.
    pub fn mlm(&mut self, ids: &[u32]) -> Result<Var> {
        let (x, _) = self.encode(ids)?;
        let (w, b) = self.model.mlm_slots();
        self.affine(x, w, b)
    }
}

impl Model {
    /// Label logits for one sequence, inference mode.
    pub fn forward_classify(&self, tokens: &TokenSequence) -> Result<Vec<f64>> {
        let mut g = Graph::eval(self);
        let logits = g.classify(&tokens.ids)?;
        Ok(g.tape.value(logits).data().to_vec())
    }

    /// Per-position vocabulary logits `L×V`, inference mode. The sequence
    /// must contain at least one MASK token.
    pub fn forward_mlm(&self, tokens: &TokenSequence) -> Result<Tensor> {
        if !tokens.ids.contains(&MASK_ID) {
            return Err(ModelError::NoMaskedPosition);
        }
        let mut g = Graph::eval(self);
        let logits = g.mlm(&tokens.ids)?;
        Ok(g.tape.value(logits).clone())
    }

    /// Embedding sum for `tokens`, `L×d`.
    pub fn embed(&self, tokens: &TokenSequence) -> Result<Tensor> {
        let mut g = Graph::eval(self);
        let x = g.embed(&tokens.ids)?;
        Ok(g.tape.value(x).clone())
    }
}
