//! Loop-level reference implementations shared by the integration tests.
//! Nothing here calls into the tape; everything is plain index arithmetic.

#![allow(dead_code)]

use ragcn::graph::GraphDef;
use ragcn::stgcn::StgcnNetwork;
use ragcn::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;

/// Dense `[B, C, T, V]` array.
#[derive(Clone, Debug)]
pub struct Arr {
    pub b: usize,
    pub c: usize,
    pub t: usize,
    pub v: usize,
    pub d: Vec<f64>,
}

impl Arr {
    pub fn zeros(b: usize, c: usize, t: usize, v: usize) -> Self {
        Arr { b, c, t, v, d: vec![0.0; b * c * t * v] }
    }
    pub fn at(&self, b: usize, c: usize, t: usize, v: usize) -> f64 {
        self.d[((b * self.c + c) * self.t + t) * self.v + v]
    }
    pub fn at_mut(&mut self, b: usize, c: usize, t: usize, v: usize) -> &mut f64 {
        let (cc, tt, vv) = (self.c, self.t, self.v);
        &mut self.d[((b * cc + c) * tt + t) * vv + v]
    }
}

/// Hop distances by breadth-first search over the edge list.
pub fn bfs_hops(graph: &GraphDef) -> Vec<Vec<usize>> {
    let v = graph.num_joints;
    let mut adj = vec![Vec::new(); v];
    for e in &graph.edges {
        adj[e[0]].push(e[1]);
        adj[e[1]].push(e[0]);
    }
    (0..v)
        .map(|src| {
            let mut dist = vec![usize::MAX; v];
            dist[src] = 0;
            let mut queue = std::collections::VecDeque::from([src]);
            while let Some(u) = queue.pop_front() {
                for &w in &adj[u] {
                    if dist[w] == usize::MAX {
                        dist[w] = dist[u] + 1;
                        queue.push_back(w);
                    }
                }
            }
            dist
        })
        .collect()
}

/// Normalized partition matrices `Λ^{-1/2} A_d Λ^{-1/2}`, row-major `V × V`.
pub fn normalized_partitions(graph: &GraphDef, dmax: usize, alpha: f64) -> Vec<Vec<f64>> {
    let v = graph.num_joints;
    let hops = bfs_hops(graph);
    (0..=dmax)
        .map(|d| {
            let a: Vec<f64> = (0..v * v).map(|k| if hops[k / v][k % v] == d { 1.0 } else { 0.0 }).collect();
            let deg: Vec<f64> = (0..v).map(|i| a[i * v..(i + 1) * v].iter().sum::<f64>() + alpha).collect();
            (0..v * v).map(|k| a[k] / (deg[k / v].sqrt() * deg[k % v].sqrt())).collect()
        })
        .collect()
}

/// `out[b, o, t, j] = Σ_d Σ_c Σ_i W_d[o, c] · x[b, c, t, i] · Â_d[i, j] · M_d[i, j]`.
pub fn spatial_conv(x: &Arr, adj: &[Vec<f64>], weights: &[Vec<f64>], importance: &[Vec<f64>], c_out: usize) -> Arr {
    let mut out = Arr::zeros(x.b, c_out, x.t, x.v);
    for d in 0..adj.len() {
        for b in 0..x.b {
            for o in 0..c_out {
                for t in 0..x.t {
                    for j in 0..x.v {
                        let mut acc = 0.0;
                        for c in 0..x.c {
                            for i in 0..x.v {
                                let k = i * x.v + j;
                                acc += weights[d][o * x.c + c] * x.at(b, c, t, i) * adj[d][k] * importance[d][k];
                            }
                        }
                        *out.at_mut(b, o, t, j) += acc;
                    }
                }
            }
        }
    }
    out
}

/// Zero-padded strided convolution along frames, kernel `[C', C, L]`.
pub fn temporal_conv(x: &Arr, w: &[f64], c_out: usize, l: usize, stride: usize) -> Arr {
    let pad = (l - 1) / 2;
    let t_out = (x.t + 2 * pad - l) / stride + 1;
    let mut out = Arr::zeros(x.b, c_out, t_out, x.v);
    for b in 0..x.b {
        for o in 0..c_out {
            for t in 0..t_out {
                for j in 0..x.v {
                    let mut acc = 0.0;
                    for c in 0..x.c {
                        for k in 0..l {
                            let src = (t * stride + k) as isize - pad as isize;
                            if src >= 0 && (src as usize) < x.t {
                                acc += w[(o * x.c + c) * l + k] * x.at(b, c, src as usize, j);
                            }
                        }
                    }
                    *out.at_mut(b, o, t, j) = acc;
                }
            }
        }
    }
    out
}

/// Batch normalization with either batch statistics (biased variance) or
/// the given running estimates.
pub fn batch_norm(x: &Arr, gamma: &[f64], beta: &[f64], stats: Option<(&[f64], &[f64])>) -> Arr {
    let mut out = x.clone();
    for c in 0..x.c {
        let (mean, var) = match stats {
            Some((m, v)) => (m[c], v[c]),
            None => {
                let vals: Vec<f64> =
                    (0..x.b).flat_map(|b| (0..x.t).flat_map(move |t| (0..x.v).map(move |j| (b, t, j)))).map(|(b, t, j)| x.at(b, c, t, j)).collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
                (mean, var)
            }
        };
        for b in 0..x.b {
            for t in 0..x.t {
                for j in 0..x.v {
                    *out.at_mut(b, c, t, j) = gamma[c] * (x.at(b, c, t, j) - mean) / (var + BN_EPS).sqrt() + beta[c];
                }
            }
        }
    }
    out
}

pub fn relu(mut x: Arr) -> Arr {
    x.d.iter_mut().for_each(|v| *v = v.max(0.0));
    x
}

pub fn add(mut a: Arr, b: &Arr) -> Arr {
    a.d.iter_mut().zip(&b.d).for_each(|(x, y)| *x += y);
    a
}

/// `[N, C, T, V, M]` to `[N·M, C, T, V]`, body `m` of sample `n` at row `n·M + m`.
pub fn fold(x: &Tensor) -> Arr {
    let s = x.shape();
    let (n, c, t, v, m) = (s[0], s[1], s[2], s[3], s[4]);
    let mut out = Arr::zeros(n * m, c, t, v);
    for i in 0..n {
        for ch in 0..c {
            for f in 0..t {
                for j in 0..v {
                    for b in 0..m {
                        *out.at_mut(i * m + b, ch, f, j) = x.get(&[i, ch, f, j, b]);
                    }
                }
            }
        }
    }
    out
}

/// Forward pass of a network read parameter by parameter. Without dropout
/// the only difference between modes is the normalization statistics.
/// Returns `(pooled [N][C], feature map, logits [N][K])`.
pub fn network_forward(net: &StgcnNetwork, x_prime: &Tensor, train: bool) -> (Vec<Vec<f64>>, Arr, Vec<Vec<f64>>) {
    let cfg = net.config();
    let p = |name: &str| net.params.get(net.params.find(name).unwrap_or_else(|| panic!("missing {name}"))).data().to_vec();
    let norm = |x: &Arr, prefix: &str| {
        let (g, b) = (p(&format!("{prefix}.gamma")), p(&format!("{prefix}.beta")));
        if train {
            batch_norm(x, &g, &b, None)
        } else {
            let (m, v) = (p(&format!("{prefix}.running_mean")), p(&format!("{prefix}.running_var")));
            batch_norm(x, &g, &b, Some((&m, &v)))
        }
    };
    let bodies = x_prime.shape()[4];
    let adj = normalized_partitions(net.graph().def(), cfg.max_distance, cfg.alpha);
    let mut h = fold(x_prime);
    if cfg.input_norm {
        h = norm(&h, "input_norm");
    }
    for (i, layer) in cfg.layers.iter().enumerate() {
        let pre = format!("layers.{i}");
        let w: Vec<Vec<f64>> = (0..adj.len()).map(|d| p(&format!("{pre}.gcn.weight.{d}"))).collect();
        let imp: Vec<Vec<f64>> = (0..adj.len()).map(|d| p(&format!("{pre}.gcn.importance.{d}"))).collect();
        let s = spatial_conv(&h, &adj, &w, &imp, layer.out_channels);
        let s = relu(norm(&s, &format!("{pre}.gcn_norm")));
        let tc = temporal_conv(&s, &p(&format!("{pre}.tcn.weight")), layer.out_channels, cfg.window, layer.stride);
        let tc = norm(&tc, &format!("{pre}.tcn_norm"));
        let shortcut = if layer.in_channels != layer.out_channels || layer.stride != 1 {
            let r = temporal_conv(&h, &p(&format!("{pre}.residual.weight")), layer.out_channels, 1, layer.stride);
            norm(&r, &format!("{pre}.residual_norm"))
        } else {
            h.clone()
        };
        h = relu(add(tc, &shortcut));
    }
    let n = h.b / bodies;
    let pooled: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..h.c)
                .map(|c| {
                    let mut acc = 0.0;
                    for b in 0..bodies {
                        for t in 0..h.t {
                            for j in 0..h.v {
                                acc += h.at(i * bodies + b, c, t, j);
                            }
                        }
                    }
                    acc / (bodies * h.t * h.v) as f64
                })
                .collect()
        })
        .collect();
    let (w, bias) = (p("head.weight"), p("head.bias"));
    let logits = linear(&pooled, &w, &bias);
    (pooled, h, logits)
}

pub fn linear(x: &[Vec<f64>], w: &[f64], b: &[f64]) -> Vec<Vec<f64>> {
    let f = x.first().map_or(0, |r| r.len());
    x.iter().map(|row| (0..b.len()).map(|k| b[k] + (0..f).map(|i| row[i] * w[k * f + i]).sum::<f64>()).collect()).collect()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|z| (z - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Mask chain over `[N, M, T, V]` CAMs: stream 1 all ones, then
/// `mask_{s+1} = (mask_1 ⊙ … ⊙ mask_s) ⊙ (1 - softmax_{T×V}(cam_s))`.
pub fn mask_chain(cams: &[Tensor]) -> Vec<Vec<f64>> {
    let s = cams[0].shape();
    let plane = s[2] * s[3];
    let mut masks = vec![vec![1.0; cams[0].len()]];
    for cam in &cams[..cams.len() - 1] {
        let mut next: Vec<f64> = (0..cam.len()).map(|i| masks.iter().map(|m| m[i]).product()).collect();
        for (block, out) in cam.data().chunks(plane).zip(next.chunks_mut(plane)) {
            out.iter_mut().zip(softmax(block)).for_each(|(o, p)| *o *= 1.0 - p);
        }
        masks.push(next);
    }
    masks
}

/// CAM `[N, M, T', V]` from a folded feature map and head weights.
pub fn cam(feature_map: &Arr, bodies: usize, head: &[f64], classes: &[usize]) -> Tensor {
    let (c, t, v) = (feature_map.c, feature_map.t, feature_map.v);
    let n = classes.len();
    let mut out = Tensor::zeros(&[n, bodies, t, v]);
    for i in 0..n {
        for b in 0..bodies {
            for f in 0..t {
                for j in 0..v {
                    let val: f64 = (0..c).map(|k| head[classes[i] * c + k] * feature_map.at(i * bodies + b, k, f, j)).sum();
                    out.set(&[i, b, f, j], val);
                }
            }
        }
    }
    out
}

/// Nearest-neighbour frame repetition: target frame `t` reads `t / r`.
pub fn upsample(cam: &Tensor, frames: usize, r: usize) -> Tensor {
    let s = cam.shape();
    let mut out = Tensor::zeros(&[s[0], s[1], frames, s[3]]);
    for i in 0..s[0] {
        for b in 0..s[1] {
            for t in 0..frames {
                for j in 0..s[3] {
                    out.set(&[i, b, t, j], cam.get(&[i, b, t / r, j]));
                }
            }
        }
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
