//! Straight-line re-implementation of the model forward pass over plain
//! nested vectors, reading weights by parameter name. Shares no code with the
//! library's tape, layers or encoders; used as an oracle.

#![allow(dead_code)]

use cafe::model::CafeModel;
use cafe::numerics::ParamStore;

type Mat = Vec<Vec<f64>>;

fn weights(store: &ParamStore, name: &str) -> Mat {
    let id = store.find(name).unwrap_or_else(|| panic!("no parameter {name}"));
    let t = store.get(id);
    let cols = *t.shape().last().unwrap();
    t.data().chunks(cols).map(<[f64]>::to_vec).collect()
}

fn vector(store: &ParamStore, name: &str) -> Vec<f64> {
    store.get(store.find(name).unwrap()).data().to_vec()
}

fn vec_mat(x: &[f64], w: &Mat) -> Vec<f64> {
    let mut out = vec![0.0; w[0].len()];
    for (xi, row) in x.iter().zip(w) {
        for (o, wij) in out.iter_mut().zip(row) {
            *o += xi * wij;
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn norm(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(k, v)| (v - mu) / (var + eps).sqrt() * gain[k] + bias[k])
        .collect()
}

struct Ctx<'a> {
    store: &'a ParamStore,
    eps: f64,
    heads: usize,
    local: bool,
    n: usize,
}

impl Ctx<'_> {
    fn ln(&self, prefix: &str, x: &[f64]) -> Vec<f64> {
        norm(
            x,
            &vector(self.store, &format!("{prefix}.gain")),
            &vector(self.store, &format!("{prefix}.bias")),
            self.eps,
        )
    }

    /// One sequence `[n][d]` through multi-head attention.
    fn attention(&self, prefix: &str, stack: &str, h: &Mat, pad: &[bool]) -> Mat {
        let n = h.len();
        let d = h[0].len();
        let dh = d / self.heads;
        let mut concat = vec![Vec::with_capacity(d); n];
        for m in 0..self.heads {
            let wq = weights(self.store, &format!("{prefix}.head{m}.w_q"));
            let wk = weights(self.store, &format!("{prefix}.head{m}.w_k"));
            let wv = weights(self.store, &format!("{prefix}.head{m}.w_v"));
            let q: Mat = h.iter().map(|r| vec_mat(r, &wq)).collect();
            let k: Mat = h.iter().map(|r| vec_mat(r, &wk)).collect();
            let v: Mat = h.iter().map(|r| vec_mat(r, &wv)).collect();
            for i in 0..n {
                let mut logits = vec![f64::NEG_INFINITY; n];
                for j in 0..=i {
                    if pad[j] {
                        continue;
                    }
                    let mut w = dot(&q[i], &k[j]) / (dh as f64).sqrt();
                    if self.local {
                        let wl: Vec<f64> = weights(self.store, &format!("{prefix}.head{m}.w_l"))
                            .iter()
                            .map(|r| r[0])
                            .collect();
                        let bl = vector(self.store, &format!("{prefix}.head{m}.b_l"))[0];
                        let table = weights(self.store, &format!("{stack}.distance"));
                        let row = &table[self.n + i - j];
                        let dist = if row.len() == dh { row.clone() } else { row[m * dh..(m + 1) * dh].to_vec() };
                        let s: Vec<f64> = (0..dh).map(|c| q[i][c] + k[j][c] + dist[c]).collect();
                        w += dot(&s, &wl) + bl;
                    }
                    logits[j] = w;
                }
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut out = vec![0.0; dh];
                if max.is_finite() {
                    let e: Vec<f64> = logits.iter().map(|&l| if l.is_finite() { (l - max).exp() } else { 0.0 }).collect();
                    let z: f64 = e.iter().sum();
                    for j in 0..n {
                        for c in 0..dh {
                            out[c] += e[j] / z * v[j][c];
                        }
                    }
                }
                concat[i].extend(out);
            }
        }
        let wo = weights(self.store, &format!("{prefix}.w_o"));
        concat.iter().map(|r| vec_mat(r, &wo)).collect()
    }

    fn ffn(&self, prefix: &str, x: &[f64]) -> Vec<f64> {
        let w1 = weights(self.store, &format!("{prefix}.w1"));
        let b1 = vector(self.store, &format!("{prefix}.b1"));
        let w2 = weights(self.store, &format!("{prefix}.w2"));
        let b2 = vector(self.store, &format!("{prefix}.b2"));
        let a: Vec<f64> = add(&vec_mat(x, &w1), &b1).into_iter().map(|v| v.max(0.0)).collect();
        add(&vec_mat(&a, &w2), &b2)
    }

    fn encode(&self, stack: &str, layers: usize, input: Mat, pad: &[bool]) -> Mat {
        let mut h = input;
        for l in 0..layers {
            let p = format!("{stack}.block{l}");
            let x: Mat = h.iter().map(|r| self.ln(&format!("{p}.attn_norm"), r)).collect();
            let att = self.attention(&format!("{p}.attn"), stack, &x, pad);
            h = h.iter().zip(&att).map(|(a, b)| add(a, b)).collect();
            let f: Mat = h.iter().map(|r| self.ffn(&format!("{p}.ffn"), &self.ln(&format!("{p}.ffn_norm"), r))).collect();
            h = h.iter().zip(&f).map(|(a, b)| add(a, b)).collect();
        }
        h.iter().map(|r| self.ln(&format!("{stack}.final_norm"), r)).collect()
    }
}

/// Reference outputs for one padded sequence.
pub struct RefOutput {
    pub item: Mat,
    pub intent: Option<Mat>,
    pub fused: Mat,
}

/// Forward pass of one left-padded sequence (`items[t] == 0` is padding).
pub fn forward(model: &CafeModel, items: &[usize], intents: &[usize]) -> RefOutput {
    let cfg = &model.config;
    let store = &model.params;
    let n = cfg.max_len;
    assert_eq!(items.len(), n);
    let pad: Vec<bool> = items.iter().map(|&i| i == 0).collect();
    let ev = weights(store, "item_embedding");
    let pv = weights(store, "item_position");
    let mut item_in: Mat = (0..n).map(|t| add(&ev[items[t]], &pv[t])).collect();
    if cfg.switches.fuse_intent_embedding {
        let ec = weights(store, "intent_embedding");
        for t in 0..n {
            item_in[t] = add(&item_in[t], &ec[intents[t]]);
        }
    }
    let item_ctx = Ctx {
        store,
        eps: cfg.layer_norm_eps,
        heads: cfg.heads,
        local: cfg.switches.local_mask,
        n,
    };
    let item = item_ctx.encode("item_encoder", cfg.layers, item_in, &pad);
    let intent = cfg.switches.intent_stream.then(|| {
        let ec = weights(store, "intent_embedding");
        let pc = weights(store, "intent_position");
        let input: Mat = (0..n).map(|t| add(&ec[intents[t]], &pc[t])).collect();
        let ctx = Ctx { local: false, ..item_ctx };
        ctx.encode("intent_encoder", cfg.layers, input, &pad)
    });
    let fused = match &intent {
        Some(c) => item.iter().zip(c).map(|(a, b)| add(a, b)).collect(),
        None => item.clone(),
    };
    RefOutput { item, intent, fused }
}
