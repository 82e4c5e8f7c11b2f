//! Message-passing policy/value network with a hand-written backward pass.
//!
//! Layout: an input projection (2 -> H), `K` propagation rounds where each
//! node's embedding becomes `relu(W2 relu(W1 a + b1) + b2)` with `a` the sum
//! of its neighbours' embeddings (self included), sum pooling into a graph
//! embedding, an actor MLP over `[node ‖ graph]` and a critic MLP over the
//! graph embedding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::TaskGraph;

/// Dense layer stored output-major: `w[o * fan_in + i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub fan_in: usize,
    pub fan_out: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Linear {
    fn new<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Linear {
            fan_in,
            fan_out,
            w: (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect(),
            b: (0..fan_out).map(|_| rng.random_range(-bound..bound)).collect(),
        }
    }

    fn zeros_like(&self) -> Self {
        Linear {
            fan_in: self.fan_in,
            fan_out: self.fan_out,
            w: vec![0.0; self.w.len()],
            b: vec![0.0; self.b.len()],
        }
    }

    #[inline]
    fn forward(&self, x: &[f64], y: &mut [f64]) {
        for (o, yo) in y.iter_mut().enumerate() {
            let row = &self.w[o * self.fan_in..(o + 1) * self.fan_in];
            *yo = self.b[o] + dot(row, x);
        }
    }

    /// Accumulates parameter gradients into `grad` and input gradients into `dx`.
    #[inline]
    fn backward(&self, x: &[f64], dy: &[f64], grad: &mut Linear, dx: Option<&mut [f64]>) {
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.b[o] += g;
            axpy(g, x, &mut grad.w[o * self.fan_in..(o + 1) * self.fan_in]);
        }
        if let Some(dx) = dx {
            for (o, &g) in dy.iter().enumerate() {
                if g != 0.0 {
                    axpy(g, &self.w[o * self.fan_in..(o + 1) * self.fan_in], dx);
                }
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
fn relu_inplace(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

#[inline]
fn relu_mask(pre: &[f64], grad: &mut [f64]) {
    for (g, &p) in grad.iter_mut().zip(pre) {
        if p <= 0.0 {
            *g = 0.0;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Propagation {
    pub hidden: Linear,
    pub out: Linear,
}

/// All network weights. The same type holds gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub input: Linear,
    pub layers: Vec<Propagation>,
    pub actor_hidden: Linear,
    pub actor_out: Linear,
    pub critic_hidden: Linear,
    pub critic_out: Linear,
}

pub const NODE_FEATURES: usize = 2;

impl PolicyParams {
    /// Fan-in scaled uniform initialization.
    pub fn new<R: Rng + ?Sized>(layers: usize, hidden: usize, rng: &mut R) -> Self {
        let h = hidden;
        PolicyParams {
            input: Linear::new(NODE_FEATURES, h, rng),
            layers: (0..layers)
                .map(|_| Propagation {
                    hidden: Linear::new(h, h, rng),
                    out: Linear::new(h, h, rng),
                })
                .collect(),
            actor_hidden: Linear::new(2 * h, h, rng),
            actor_out: Linear::new(h, 1, rng),
            critic_hidden: Linear::new(h, h, rng),
            critic_out: Linear::new(h, 1, rng),
        }
    }

    pub fn hidden(&self) -> usize {
        self.input.fan_out
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn zeros_like(&self) -> Self {
        PolicyParams {
            input: self.input.zeros_like(),
            layers: self
                .layers
                .iter()
                .map(|l| Propagation {
                    hidden: l.hidden.zeros_like(),
                    out: l.out.zeros_like(),
                })
                .collect(),
            actor_hidden: self.actor_hidden.zeros_like(),
            actor_out: self.actor_out.zeros_like(),
            critic_hidden: self.critic_hidden.zeros_like(),
            critic_out: self.critic_out.zeros_like(),
        }
    }

    fn linears(&self) -> Vec<(String, &Linear)> {
        let mut v = vec![("input".to_string(), &self.input)];
        for (i, l) in self.layers.iter().enumerate() {
            v.push((format!("layer{i}.hidden"), &l.hidden));
            v.push((format!("layer{i}.out"), &l.out));
        }
        v.push(("actor.hidden".into(), &self.actor_hidden));
        v.push(("actor.out".into(), &self.actor_out));
        v.push(("critic.hidden".into(), &self.critic_hidden));
        v.push(("critic.out".into(), &self.critic_out));
        v
    }

    /// Named tensors with shapes, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        self.linears()
            .into_iter()
            .flat_map(|(name, l)| {
                [
                    (format!("{name}.weight"), vec![l.fan_out, l.fan_in], l.w.as_slice()),
                    (format!("{name}.bias"), vec![l.fan_out], l.b.as_slice()),
                ]
            })
            .collect()
    }

    /// Mutable flat tensors in the same order as [`named_tensors`](Self::named_tensors).
    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut v: Vec<&mut Vec<f64>> = vec![&mut self.input.w, &mut self.input.b];
        for l in &mut self.layers {
            v.push(&mut l.hidden.w);
            v.push(&mut l.hidden.b);
            v.push(&mut l.out.w);
            v.push(&mut l.out.b);
        }
        v.push(&mut self.actor_hidden.w);
        v.push(&mut self.actor_hidden.b);
        v.push(&mut self.actor_out.w);
        v.push(&mut self.actor_out.b);
        v.push(&mut self.critic_hidden.w);
        v.push(&mut self.critic_hidden.b);
        v.push(&mut self.critic_out.w);
        v.push(&mut self.critic_out.b);
        v
    }

    pub fn n_params(&self) -> usize {
        self.named_tensors().iter().map(|t| t.2.len()).sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.named_tensors().into_iter().flat_map(|t| t.2.iter().copied()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|t| t.2.iter().all(|x| x.is_finite()))
    }
}

/// Activations of one forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// `h[0]` is the input projection, `h[l + 1]` the output of round `l`; each `n_nodes * H`.
    pub h: Vec<Vec<f64>>,
    agg: Vec<Vec<f64>>,
    pre_hidden: Vec<Vec<f64>>,
    post_hidden: Vec<Vec<f64>>,
    pre_out: Vec<Vec<f64>>,
    pub graph: Vec<f64>,
    actor_in: Vec<Vec<f64>>,
    actor_pre: Vec<Vec<f64>>,
    critic_pre: Vec<f64>,
    /// One logit per candidate, in candidate order.
    pub logits: Vec<f64>,
    pub value: f64,
}

impl Forward {
    pub fn node_embeddings(&self) -> &[f64] {
        self.h.last().expect("at least the input projection")
    }
}

pub fn forward(params: &PolicyParams, graph: &TaskGraph) -> Forward {
    let h_dim = params.hidden();
    let n = graph.n_nodes();
    let mut h0 = vec![0.0; n * h_dim];
    for v in 0..n {
        params.input.forward(&graph.features[v].as_array(), &mut h0[v * h_dim..(v + 1) * h_dim]);
    }
    let mut hs = vec![h0];
    let mut aggs = Vec::with_capacity(params.depth());
    let mut pre_hidden = Vec::with_capacity(params.depth());
    let mut post_hidden = Vec::with_capacity(params.depth());
    let mut pre_out = Vec::with_capacity(params.depth());
    for layer in &params.layers {
        let prev = hs.last().unwrap();
        let mut agg = vec![0.0; n * h_dim];
        for v in 0..n {
            let dst = &mut agg[v * h_dim..(v + 1) * h_dim];
            for &u in graph.neighbors(v) {
                axpy(1.0, &prev[u * h_dim..(u + 1) * h_dim], dst);
            }
        }
        let mut z1 = vec![0.0; n * h_dim];
        for v in 0..n {
            layer.hidden.forward(&agg[v * h_dim..(v + 1) * h_dim], &mut z1[v * h_dim..(v + 1) * h_dim]);
        }
        let mut a1 = z1.clone();
        relu_inplace(&mut a1);
        let mut z2 = vec![0.0; n * h_dim];
        for v in 0..n {
            layer.out.forward(&a1[v * h_dim..(v + 1) * h_dim], &mut z2[v * h_dim..(v + 1) * h_dim]);
        }
        let mut out = z2.clone();
        relu_inplace(&mut out);
        aggs.push(agg);
        pre_hidden.push(z1);
        post_hidden.push(a1);
        pre_out.push(z2);
        hs.push(out);
    }

    let last = hs.last().unwrap();
    let mut g = vec![0.0; h_dim];
    for v in 0..n {
        axpy(1.0, &last[v * h_dim..(v + 1) * h_dim], &mut g);
    }

    let mut actor_in = Vec::with_capacity(graph.candidates.len());
    let mut actor_pre = Vec::with_capacity(graph.candidates.len());
    let mut logits = Vec::with_capacity(graph.candidates.len());
    let mut hidden = vec![0.0; h_dim];
    for c in &graph.candidates {
        let mut x = Vec::with_capacity(2 * h_dim);
        x.extend_from_slice(&last[c.node * h_dim..(c.node + 1) * h_dim]);
        x.extend_from_slice(&g);
        params.actor_hidden.forward(&x, &mut hidden);
        let pre = hidden.clone();
        relu_inplace(&mut hidden);
        let mut logit = [0.0];
        params.actor_out.forward(&hidden, &mut logit);
        logits.push(logit[0]);
        actor_in.push(x);
        actor_pre.push(pre);
    }

    let mut critic_pre = vec![0.0; h_dim];
    params.critic_hidden.forward(&g, &mut critic_pre);
    let mut critic_post = critic_pre.clone();
    relu_inplace(&mut critic_post);
    let mut value = [0.0];
    params.critic_out.forward(&critic_post, &mut value);

    Forward {
        h: hs,
        agg: aggs,
        pre_hidden,
        post_hidden,
        pre_out,
        graph: g,
        actor_in,
        actor_pre,
        critic_pre,
        logits,
        value: value[0],
    }
}

/// Accumulates into `grad` the gradient of a scalar loss whose partial
/// derivatives w.r.t. the candidate logits and the value are `dlogits`/`dvalue`.
pub fn backward(
    params: &PolicyParams,
    graph: &TaskGraph,
    fwd: &Forward,
    dlogits: &[f64],
    dvalue: f64,
    grad: &mut PolicyParams,
) {
    let h_dim = params.hidden();
    let n = graph.n_nodes();
    let k = params.depth();
    let mut dh = vec![0.0; n * h_dim];
    let mut dg = vec![0.0; h_dim];

    let mut dhidden = vec![0.0; h_dim];
    let mut din = vec![0.0; 2 * h_dim];
    for (ci, c) in graph.candidates.iter().enumerate() {
        let dl = dlogits[ci];
        if dl == 0.0 {
            continue;
        }
        let mut post = fwd.actor_pre[ci].clone();
        relu_inplace(&mut post);
        dhidden.iter_mut().for_each(|x| *x = 0.0);
        params.actor_out.backward(&post, &[dl], &mut grad.actor_out, Some(&mut dhidden));
        relu_mask(&fwd.actor_pre[ci], &mut dhidden);
        din.iter_mut().for_each(|x| *x = 0.0);
        params.actor_hidden.backward(&fwd.actor_in[ci], &dhidden, &mut grad.actor_hidden, Some(&mut din));
        axpy(1.0, &din[..h_dim], &mut dh[c.node * h_dim..(c.node + 1) * h_dim]);
        axpy(1.0, &din[h_dim..], &mut dg);
    }

    if dvalue != 0.0 {
        let mut post = fwd.critic_pre.clone();
        relu_inplace(&mut post);
        dhidden.iter_mut().for_each(|x| *x = 0.0);
        params.critic_out.backward(&post, &[dvalue], &mut grad.critic_out, Some(&mut dhidden));
        relu_mask(&fwd.critic_pre, &mut dhidden);
        params.critic_hidden.backward(&fwd.graph, &dhidden, &mut grad.critic_hidden, Some(&mut dg));
    }

    for v in 0..n {
        axpy(1.0, &dg, &mut dh[v * h_dim..(v + 1) * h_dim]);
    }

    let mut da1 = vec![0.0; h_dim];
    for l in (0..k).rev() {
        let layer = &params.layers[l];
        let glayer = &mut grad.layers[l];
        // dh holds d loss / d h[l + 1]
        relu_mask(&fwd.pre_out[l], &mut dh);
        let mut dagg = vec![0.0; n * h_dim];
        for v in 0..n {
            let rows = v * h_dim..(v + 1) * h_dim;
            da1.iter_mut().for_each(|x| *x = 0.0);
            layer.out.backward(&fwd.post_hidden[l][rows.clone()], &dh[rows.clone()], &mut glayer.out, Some(&mut da1));
            relu_mask(&fwd.pre_hidden[l][rows.clone()], &mut da1);
            layer.hidden.backward(&fwd.agg[l][rows.clone()], &da1, &mut glayer.hidden, Some(&mut dagg[rows]));
        }
        let mut dprev = vec![0.0; n * h_dim];
        for v in 0..n {
            for &u in graph.neighbors(v) {
                let (src, dst) = (v * h_dim..(v + 1) * h_dim, u * h_dim..(u + 1) * h_dim);
                axpy(1.0, &dagg[src], &mut dprev[dst]);
            }
        }
        dh = dprev;
    }

    for v in 0..n {
        params.input.backward(&graph.features[v].as_array(), &dh[v * h_dim..(v + 1) * h_dim], &mut grad.input, None);
    }
}
