use crate::autodiff::{log_sum_exp, matmul_into};
use crate::error::{Error, Result};
use crate::lm::model::PolicyCheckpoint;
use crate::lm::vocab::TokenSequence;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4;
const PER_LAYER: usize = 12;

/// Key/value-cached forward pass for generation. Row by row it performs the
/// same floating-point operations as the taped forward, so its
/// distributions match teacher forcing bit for bit.
#[derive(Clone)]
pub struct Decoder<'m> {
    model: &'m PolicyCheckpoint,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
    prompt_len: usize,
    last: Vec<f64>,
}

impl<'m> Decoder<'m> {
    /// Runs the prompt; `next_logprobs` then holds the first response distribution.
    pub fn start(model: &'m PolicyCheckpoint, x: &TokenSequence) -> Result<Self> {
        if x.is_empty() {
            return Err(Error::Sequence("empty prompt".into()));
        }
        let vocab = &model.arch.vocab;
        if let Some(&t) = x.ids.iter().find(|&&t| !vocab.contains(t)) {
            return Err(Error::Sequence(format!("token {t} outside vocabulary")));
        }
        let mut dec = Decoder {
            model,
            keys: vec![Vec::new(); model.arch.layers],
            values: vec![Vec::new(); model.arch.layers],
            len: 0,
            prompt_len: x.len(),
            last: Vec::new(),
        };
        dec.check(0)?;
        for (i, &t) in x.ids.iter().enumerate() {
            dec.feed(t as usize, i);
        }
        Ok(dec)
    }

    pub fn next_logprobs(&self) -> &[f64] {
        &self.last
    }

    /// Appends the response token just chosen and computes the next distribution.
    pub fn push(&mut self, token: u32) -> Result<()> {
        if !self.model.arch.vocab.contains(token) {
            return Err(Error::Sequence(format!("token {token} outside vocabulary")));
        }
        let i = self.len - self.prompt_len;
        self.check(i + 1)?;
        self.feed(token as usize, self.model.arch.response_offset + i);
        Ok(())
    }

    fn check(&self, prefix: usize) -> Result<()> {
        let a = &self.model.arch;
        let len = self.prompt_len + prefix + 1;
        if len > a.context || a.response_offset + prefix + 1 > a.context {
            return Err(Error::ContextOverflow {
                len,
                context: a.context,
            });
        }
        Ok(())
    }

    fn feed(&mut self, token: usize, position: usize) {
        let m = self.model;
        let a = &m.arch;
        let (d, hid, v) = (a.embed_dim, a.mlp_hidden, a.vocab.size());
        let p = |k: usize| m.params[k].value.data();
        let mut h: Vec<f64> = p(0)[token * d..(token + 1) * d]
            .iter()
            .zip(&p(1)[position * d..(position + 1) * d])
            .map(|(x, y)| x + y)
            .collect();
        let t = self.len + 1;
        for l in 0..a.layers {
            let base = 2 + l * PER_LAYER;
            let n1 = layer_norm(&h, p(base), p(base + 1));
            let mut qkv = vec![0.0; 3 * d];
            matmul_into(&n1, p(base + 2), &mut qkv, 1, d, 3 * d);
            add_in(&mut qkv, p(base + 3));
            self.keys[l].extend_from_slice(&qkv[d..2 * d]);
            self.values[l].extend_from_slice(&qkv[2 * d..]);
            let att = attend(&qkv[..d], &self.keys[l], &self.values[l], t, d, a.heads);
            let mut o = vec![0.0; d];
            matmul_into(&att, p(base + 4), &mut o, 1, d, d);
            add_in(&mut o, p(base + 5));
            add_in(&mut h, &o);
            let n2 = layer_norm(&h, p(base + 6), p(base + 7));
            let mut f = vec![0.0; hid];
            matmul_into(&n2, p(base + 8), &mut f, 1, d, hid);
            add_in(&mut f, p(base + 9));
            for x in f.iter_mut() {
                let y = *x;
                *x = 0.5 * y * (1.0 + (GELU_C * (y + 0.044715 * y * y * y)).tanh());
            }
            let mut g = vec![0.0; d];
            matmul_into(&f, p(base + 10), &mut g, 1, hid, d);
            add_in(&mut g, p(base + 11));
            add_in(&mut h, &g);
        }
        let tail = m.params.len() - 4;
        let hf = layer_norm(&h, p(tail), p(tail + 1));
        let mut logits = vec![0.0; v];
        matmul_into(&hf, p(tail + 2), &mut logits, 1, d, v);
        add_in(&mut logits, p(tail + 3));
        let lse = log_sum_exp(&logits);
        for x in logits.iter_mut() {
            *x -= lse;
        }
        self.last = logits;
        self.len = t;
    }
}

fn add_in(y: &mut [f64], x: &[f64]) {
    for (a, b) in y.iter_mut().zip(x) {
        *a += b;
    }
}

fn layer_norm(row: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let c = row.len();
    let mean = row.iter().sum::<f64>() / c as f64;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
    let rs = 1.0 / (var + LN_EPS).sqrt();
    (0..c).map(|j| (row[j] - mean) * rs * g[j] + b[j]).collect()
}

fn attend(q: &[f64], keys: &[f64], values: &[f64], t: usize, d: usize, heads: usize) -> Vec<f64> {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; d];
    let mut scores = vec![0.0; t];
    for h in 0..heads {
        let qh = &q[h * dh..(h + 1) * dh];
        let mut max = f64::NEG_INFINITY;
        for j in 0..t {
            let k = &keys[j * d + h * dh..j * d + (h + 1) * dh];
            let s = qh.iter().zip(k).map(|(x, y)| x * y).sum::<f64>() * scale;
            scores[j] = s;
            max = max.max(s);
        }
        let mut z = 0.0;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            z += *s;
        }
        let o = &mut out[h * dh..(h + 1) * dh];
        for j in 0..t {
            let p = scores[j] / z;
            let vv = &values[j * d + h * dh..j * d + (h + 1) * dh];
            for (ov, &x) in o.iter_mut().zip(vv) {
                *ov += p * x;
            }
        }
    }
    out
}
