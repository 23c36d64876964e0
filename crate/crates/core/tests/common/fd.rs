//! Central finite differences of the preference losses over every model
//! parameter.
//!
//! The losses are evaluated by a separate plain forward pass that packs all
//! pairs into one row set (a pair's two responses share its prompt rows) and
//! caches the residual stream at every half layer, so a perturbation only
//! recomputes what lies downstream of the touched parameter.

use mpo_core::autodiff::{log_sigmoid, log_sum_exp, matmul_into};
use mpo_core::lm::PolicyCheckpoint;
use mpo_core::objectives::{loss_and_grad, Batch, CeSource, Objective, PreferencePair, RefLogProbs};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4;

struct Row {
    token: usize,
    pos: usize,
    /// Rows this row attends to, itself last.
    visible: Vec<usize>,
}

/// `(row, target)` terms of one response.
type Terms = Vec<(usize, usize)>;

pub struct FdProblem {
    d: usize,
    hidden: usize,
    vocab: usize,
    heads: usize,
    layers: usize,
    rows: Vec<Row>,
    all: Vec<usize>,
    scored: Vec<usize>,
    pairs: Vec<(Terms, Terms)>,
    refs: Vec<RefLogProbs>,
    beta: f64,
    lambda: f64,
}

struct LayerCache {
    h_in: Vec<f64>,
    xhat1: Vec<f64>,
    n1: Vec<f64>,
    qkv: Vec<f64>,
    att: Vec<f64>,
    o: Vec<f64>,
    h_mid: Vec<f64>,
    xhat2: Vec<f64>,
    n2: Vec<f64>,
    f_pre: Vec<f64>,
    f_post: Vec<f64>,
    g: Vec<f64>,
}

pub struct Cache {
    layers: Vec<LayerCache>,
    h_final: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Losses {
    pub ce: f64,
    pub dpo: f64,
    pub mpo: f64,
}

impl Losses {
    pub fn get(&self, k: usize) -> f64 {
        [self.ce, self.dpo, self.mpo][k]
    }
}

impl FdProblem {
    pub fn new(model: &PolicyCheckpoint, pairs: &[PreferencePair], refs: &[RefLogProbs], beta: f64, lambda: f64) -> Self {
        let a = &model.arch;
        let mut rows: Vec<Row> = Vec::new();
        let mut terms = Vec::new();
        for p in pairs {
            let x0 = rows.len();
            for (i, &t) in p.x.ids.iter().enumerate() {
                rows.push(Row {
                    token: t as usize,
                    pos: i,
                    visible: (x0..=x0 + i).collect(),
                });
            }
            let last_x = rows.len() - 1;
            let mut side = |y: &[u32]| {
                let mut t: Terms = vec![(last_x, y[0] as usize)];
                let mut vis: Vec<usize> = (x0..=last_x).collect();
                for j in 0..y.len() - 1 {
                    vis.push(rows.len());
                    t.push((rows.len(), y[j + 1] as usize));
                    rows.push(Row {
                        token: y[j] as usize,
                        pos: a.response_offset + j,
                        visible: vis.clone(),
                    });
                }
                t
            };
            let w = side(&p.y_w.ids);
            let l = side(&p.y_l.ids);
            terms.push((w, l));
        }
        let mut scored: Vec<usize> = terms
            .iter()
            .flat_map(|(w, l)| w.iter().chain(l).map(|&(r, _)| r))
            .collect();
        scored.sort_unstable();
        scored.dedup();
        FdProblem {
            d: a.embed_dim,
            hidden: a.mlp_hidden,
            vocab: a.vocab.size(),
            heads: a.heads,
            layers: a.layers,
            all: (0..rows.len()).collect(),
            rows,
            scored,
            pairs: terms,
            refs: refs.to_vec(),
            beta,
            lambda,
        }
    }

    fn rows_for(&self, l: usize) -> &[usize] {
        if l + 1 == self.layers {
            &self.scored
        } else {
            &self.all
        }
    }

    /// Embedding entries the forward pass reads: `(param, flat index)`.
    pub fn used_embedding_entries(&self) -> Vec<(usize, usize)> {
        let mut tok: Vec<usize> = self.rows.iter().map(|r| r.token).collect();
        let mut pos: Vec<usize> = self.rows.iter().map(|r| r.pos).collect();
        tok.sort_unstable();
        tok.dedup();
        pos.sort_unstable();
        pos.dedup();
        let d = self.d;
        let mut out = Vec::new();
        for t in tok {
            out.extend((t * d..(t + 1) * d).map(|i| (0, i)));
        }
        for p in pos {
            out.extend((p * d..(p + 1) * d).map(|i| (1, i)));
        }
        out
    }

    pub fn embed(&self, p: &[Vec<f64>]) -> Vec<f64> {
        let d = self.d;
        let mut h = Vec::with_capacity(self.rows.len() * d);
        for r in &self.rows {
            let t = &p[0][r.token * d..(r.token + 1) * d];
            let q = &p[1][r.pos * d..(r.pos + 1) * d];
            h.extend(t.iter().zip(q).map(|(a, b)| a + b));
        }
        h
    }

    /// Every intermediate of every layer, all rows.
    pub fn cache(&self, p: &[Vec<f64>]) -> Cache {
        let d = self.d;
        let hid = self.hidden;
        let all = &self.all;
        let mut h = self.embed(p);
        let mut layers = Vec::new();
        for l in 0..self.layers {
            let b = 2 + 12 * l;
            let xhat1 = normalize(&h, all, d);
            let n1 = affine(&xhat1, all, &p[b], &p[b + 1]);
            let qkv = linear(&n1, all, d, &p[b + 2], &p[b + 3]);
            let att = self.attention(&qkv, all);
            let o = linear(&att, all, d, &p[b + 4], &p[b + 5]);
            let h_mid = add(&h, &o, all, d);
            let xhat2 = normalize(&h_mid, all, d);
            let n2 = affine(&xhat2, all, &p[b + 6], &p[b + 7]);
            let f_pre = linear(&n2, all, d, &p[b + 8], &p[b + 9]);
            let f_post = gelu(&f_pre, all, hid);
            let g = linear(&f_post, all, hid, &p[b + 10], &p[b + 11]);
            let h_out = add(&h_mid, &g, all, d);
            layers.push(LayerCache {
                h_in: h,
                xhat1,
                n1,
                qkv,
                att,
                o,
                h_mid,
                xhat2,
                n2,
                f_pre,
                f_post,
                g,
            });
            h = h_out;
        }
        Cache { layers, h_final: h }
    }

    /// Losses with every parameter at `p`, from scratch.
    pub fn losses(&self, p: &[Vec<f64>]) -> Losses {
        self.run_from(p, 0, self.embed(p))
    }

    fn run_from(&self, p: &[Vec<f64>], from: usize, mut h: Vec<f64>) -> Losses {
        let d = self.d;
        for l in from..self.layers {
            let b = 2 + 12 * l;
            let xhat1 = normalize(&h, &self.all, d);
            let n1 = affine(&xhat1, &self.all, &p[b], &p[b + 1]);
            let qkv = linear(&n1, &self.all, d, &p[b + 2], &p[b + 3]);
            h = self.after_qkv(p, l, &h, &qkv);
        }
        self.head(p, &h)
    }

    fn after_qkv(&self, p: &[Vec<f64>], l: usize, h_in: &[f64], qkv: &[f64]) -> Vec<f64> {
        let (d, rs, b) = (self.d, self.rows_for(l), 2 + 12 * l);
        let att = self.attention(qkv, rs);
        let o = linear(&att, rs, d, &p[b + 4], &p[b + 5]);
        let h_mid = add(h_in, &o, rs, d);
        self.after_mid(p, l, &h_mid)
    }

    fn after_mid(&self, p: &[Vec<f64>], l: usize, h_mid: &[f64]) -> Vec<f64> {
        let (d, rs, b) = (self.d, self.rows_for(l), 2 + 12 * l);
        let xhat2 = normalize(h_mid, rs, d);
        let n2 = affine(&xhat2, rs, &p[b + 6], &p[b + 7]);
        let f_pre = linear(&n2, rs, d, &p[b + 8], &p[b + 9]);
        self.after_pre(p, l, h_mid, &f_pre)
    }

    fn after_pre(&self, p: &[Vec<f64>], l: usize, h_mid: &[f64], f_pre: &[f64]) -> Vec<f64> {
        let (rs, b) = (self.rows_for(l), 2 + 12 * l);
        let f_post = gelu(f_pre, rs, self.hidden);
        let g = linear(&f_post, rs, self.hidden, &p[b + 10], &p[b + 11]);
        add(h_mid, &g, rs, self.d)
    }

    /// Losses after adding `delta` to entry `i` of layer parameter `k`,
    /// reusing everything upstream of it. `p` holds the unperturbed values.
    fn perturbed_layer(&self, p: &[Vec<f64>], c: &Cache, k: usize, i: usize, delta: f64) -> Losses {
        let (d, hid) = (self.d, self.hidden);
        let l = (k - 2) / 12;
        let b = 2 + 12 * l;
        let lc = &c.layers[l];
        let rs = self.rows_for(l);
        let h_out = match (k - 2) % 12 {
            sub @ (0 | 1) => {
                let mut qkv = lc.qkv.clone();
                let w = &p[b + 2][i * 3 * d..(i + 1) * 3 * d];
                for &r in &self.all {
                    let dn = if sub == 0 { delta * lc.xhat1[r * d + i] } else { delta };
                    axpy(&mut qkv[r * 3 * d..(r + 1) * 3 * d], dn, w);
                }
                self.after_qkv(p, l, &lc.h_in, &qkv)
            }
            sub @ (2 | 3) => {
                let mut qkv = lc.qkv.clone();
                let (row, col) = (i / (3 * d), i % (3 * d));
                for &r in &self.all {
                    qkv[r * 3 * d + col] += if sub == 2 { delta * lc.n1[r * d + row] } else { delta };
                }
                self.after_qkv(p, l, &lc.h_in, &qkv)
            }
            sub @ (4 | 5) => {
                let mut o = lc.o.clone();
                let (row, col) = (i / d, i % d);
                for &r in rs {
                    o[r * d + col] += if sub == 4 { delta * lc.att[r * d + row] } else { delta };
                }
                let h_mid = add(&lc.h_in, &o, rs, d);
                self.after_mid(p, l, &h_mid)
            }
            sub @ (6 | 7) => {
                let mut f_pre = lc.f_pre.clone();
                let w = &p[b + 8][i * hid..(i + 1) * hid];
                for &r in rs {
                    let dn = if sub == 6 { delta * lc.xhat2[r * d + i] } else { delta };
                    axpy(&mut f_pre[r * hid..(r + 1) * hid], dn, w);
                }
                self.after_pre(p, l, &lc.h_mid, &f_pre)
            }
            sub @ (8 | 9) => {
                let mut g = lc.g.clone();
                let (row, col) = (i / hid, i % hid);
                let col = if sub == 8 { col } else { i };
                let w = &p[b + 10][col * d..(col + 1) * d];
                for &r in rs {
                    let dn = if sub == 8 { delta * lc.n2[r * d + row] } else { delta };
                    let y = lc.f_pre[r * hid + col] + dn;
                    let change = gelu1(y) - lc.f_post[r * hid + col];
                    axpy(&mut g[r * d..(r + 1) * d], change, w);
                }
                add(&lc.h_mid, &g, rs, d)
            }
            sub => {
                let mut g = lc.g.clone();
                let (row, col) = (i / d, i % d);
                for &r in rs {
                    g[r * d + col] += if sub == 10 { delta * lc.f_post[r * hid + row] } else { delta };
                }
                add(&lc.h_mid, &g, rs, d)
            }
        };
        self.run_from(p, l + 1, h_out)
    }

    fn attention(&self, qkv: &[f64], rs: &[usize]) -> Vec<f64> {
        let d = self.d;
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0.0; self.rows.len() * d];
        let mut w = Vec::new();
        for &r in rs {
            let row = &self.rows[r];
            let q = &qkv[r * 3 * d..r * 3 * d + d];
            for hh in 0..self.heads {
                let qh = &q[hh * dh..(hh + 1) * dh];
                w.clear();
                w.extend(row.visible.iter().map(|&j| {
                    let k = &qkv[j * 3 * d + d + hh * dh..j * 3 * d + d + (hh + 1) * dh];
                    qh.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale
                }));
                let m = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for s in w.iter_mut() {
                    *s = (*s - m).exp();
                    z += *s;
                }
                let o = &mut out[r * d + hh * dh..r * d + (hh + 1) * dh];
                for (&j, &s) in row.visible.iter().zip(&w) {
                    let v = &qkv[j * 3 * d + 2 * d + hh * dh..j * 3 * d + 2 * d + (hh + 1) * dh];
                    for (a, b) in o.iter_mut().zip(v) {
                        *a += s / z * b;
                    }
                }
            }
        }
        out
    }

    fn head(&self, p: &[Vec<f64>], h: &[f64]) -> Losses {
        let (d, v) = (self.d, self.vocab);
        let t = p.len() - 4;
        let mut logp = vec![Vec::new(); self.rows.len()];
        let mut logits = vec![0.0; v];
        for &r in &self.scored {
            let row = &h[r * d..(r + 1) * d];
            let n = affine(&normalize(row, &[0], d), &[0], &p[t], &p[t + 1]);
            logits.copy_from_slice(&p[t + 3]);
            let mut z = vec![0.0; v];
            matmul_into(&n, &p[t + 2], &mut z, 1, d, v);
            logits.iter_mut().zip(&z).for_each(|(a, b)| *a = b + *a);
            let lse = log_sum_exp(&logits);
            logp[r] = logits.iter().map(|x| x - lse).collect();
        }
        let total = |terms: &Terms| terms.iter().map(|&(r, y)| logp[r][y]).sum::<f64>();
        let n = self.pairs.len() as f64;
        let (mut ce, mut dpo) = (0.0, 0.0);
        for ((w, l), r) in self.pairs.iter().zip(&self.refs) {
            let (lw, ll) = (total(w), total(l));
            ce += -lw / w.len() as f64;
            dpo += -log_sigmoid(self.beta * ((lw - r.w) - (ll - r.l)));
        }
        let (ce, dpo) = (ce / n, dpo / n);
        Losses {
            ce,
            dpo,
            mpo: self.lambda * dpo + ce,
        }
    }
}

fn normalize(x: &[f64], rs: &[usize], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for &r in rs {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let s = 1.0 / (var + LN_EPS).sqrt();
        for (o, v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
            *o = (v - mean) * s;
        }
    }
    out
}

fn affine(xhat: &[f64], rs: &[usize], g: &[f64], b: &[f64]) -> Vec<f64> {
    let d = g.len();
    let mut out = vec![0.0; xhat.len()];
    for &r in rs {
        for j in 0..d {
            out[r * d + j] = xhat[r * d + j] * g[j] + b[j];
        }
    }
    out
}

/// `x·w + b` on rows `rs` of a row-major `x` with `k` columns.
fn linear(x: &[f64], rs: &[usize], k: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut out = vec![0.0; x.len() / k * n];
    for &r in rs {
        let o = &mut out[r * n..(r + 1) * n];
        matmul_into(&x[r * k..(r + 1) * k], w, o, 1, k, n);
        o.iter_mut().zip(b).for_each(|(a, c)| *a += c);
    }
    out
}

fn add(x: &[f64], y: &[f64], rs: &[usize], d: usize) -> Vec<f64> {
    let mut out = x.to_vec();
    for &r in rs {
        for j in r * d..(r + 1) * d {
            out[j] += y[j];
        }
    }
    out
}

fn gelu1(y: f64) -> f64 {
    0.5 * y * (1.0 + (GELU_C * (y + 0.044715 * y * y * y)).tanh())
}

fn gelu(x: &[f64], rs: &[usize], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for &r in rs {
        for j in r * k..(r + 1) * k {
            out[j] = gelu1(x[j]);
        }
    }
    out
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    y.iter_mut().zip(x).for_each(|(u, v)| *u += a * v);
}

/// Outcome of checking one loss.
#[derive(Clone, Debug, Default)]
pub struct FdReport {
    pub checked: usize,
    pub mismatches: usize,
    /// Over coordinates where either gradient exceeds the absolute floor.
    pub max_rel: f64,
    /// First few mismatches: `(param, index, analytic, numeric)`.
    pub worst: Vec<(usize, usize, f64, f64)>,
}

/// `|a − n| ≤ rel·max(|a|, |n|) + abs`.
pub fn close(a: f64, n: f64, rel: f64, abs: f64) -> bool {
    (a - n).abs() <= rel * a.abs().max(n.abs()) + abs
}

/// Checks the three analytic gradients (ce, dpo, mpo) against central
/// differences with step `eps` at the `(param, index)` coordinates in
/// `entries`.
pub fn check(
    prob: &FdProblem,
    params: &[Vec<f64>],
    analytic: [&[Vec<f64>]; 3],
    entries: &[(usize, usize)],
    eps: f64,
    rel: f64,
    abs: f64,
) -> [FdReport; 3] {
    let mut p: Vec<Vec<f64>> = params.to_vec();
    let cache = prob.cache(&p);
    let tail = p.len() - 4;
    let mut reports: [FdReport; 3] = Default::default();
    let mut record = |k: usize, i: usize, plus: Losses, minus: Losses| {
        for (j, rep) in reports.iter_mut().enumerate() {
            let n = (plus.get(j) - minus.get(j)) / (2.0 * eps);
            let a = analytic[j][k][i];
            rep.checked += 1;
            let denom = a.abs().max(n.abs());
            if denom > abs {
                rep.max_rel = rep.max_rel.max((a - n).abs() / denom);
            }
            if !close(a, n, rel, abs) {
                rep.mismatches += 1;
                if rep.worst.len() < 8 {
                    rep.worst.push((k, i, a, n));
                }
            }
        }
    };
    let mut eval = |k: usize, i: usize, delta: f64| -> Losses {
        if k >= 2 && k < tail {
            return prob.perturbed_layer(&p, &cache, k, i, delta);
        }
        let orig = p[k][i];
        p[k][i] = orig + delta;
        let out = if k < 2 {
            prob.losses(&p)
        } else {
            prob.head(&p, &cache.h_final)
        };
        p[k][i] = orig;
        out
    };
    for &(k, i) in entries {
        let plus = eval(k, i, eps);
        let minus = eval(k, i, -eps);
        record(k, i, plus, minus);
    }
    reports
}

/// Result of [`check_model`].
#[derive(Clone, Debug)]
pub struct FullCheck {
    pub reports: [FdReport; 3],
    /// Embedding coordinates the batch never reads.
    pub unread: usize,
    /// How many of those have a non-zero analytic gradient (should be none).
    pub unread_nonzero: usize,
}

impl FullCheck {
    pub fn ok(&self) -> bool {
        self.unread_nonzero == 0 && self.reports.iter().all(|r| r.mismatches == 0)
    }
}

/// Every parameter coordinate of `model`: central differences for all
/// coordinates the batch can influence, an exact-zero check for the
/// embedding rows it never reads.
/// The ce loss is taken on each pair's `(x, y_w)`, whatever `batch.ce_examples` holds.
pub fn check_model(model: &PolicyCheckpoint, batch: &Batch, beta: f64, lambda: f64, eps: f64, rel: f64, abs: f64) -> FullCheck {
    let batch = &Batch {
        ce_examples: batch.pairs.iter().map(|p| (p.x.clone(), p.y_w.clone())).collect(),
        ..batch.clone()
    };
    let grads = |objective| {
        loss_and_grad(model, batch, objective, CeSource::PreferredResponses, true)
            .unwrap()
            .1
            .unwrap()
    };
    let an = [
        grads(Objective::Sft),
        grads(Objective::DpoOnly { beta }),
        grads(Objective::Mpo { beta, lambda }),
    ];
    let prob = FdProblem::new(model, &batch.pairs, &batch.ref_logprobs, beta, lambda);
    let p: Vec<Vec<f64>> = model.params.iter().map(|q| q.value.data().to_vec()).collect();
    let used = prob.used_embedding_entries();
    let mut entries = used.clone();
    for (k, v) in p.iter().enumerate().skip(2) {
        entries.extend((0..v.len()).map(|i| (k, i)));
    }
    let mut unread = 0;
    let mut unread_nonzero = 0;
    for k in 0..2 {
        for i in 0..p[k].len() {
            if used.binary_search(&(k, i)).is_err() {
                unread += 1;
                unread_nonzero += an.iter().filter(|g| g[k][i] != 0.0).count().min(1);
            }
        }
    }
    FullCheck {
        reports: check(&prob, &p, [&an[0], &an[1], &an[2]], &entries, eps, rel, abs),
        unread,
        unread_nonzero,
    }
}
