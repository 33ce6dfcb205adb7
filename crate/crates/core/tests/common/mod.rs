//! Shared fixtures and an independent plain-loop implementation of support
//! processing and classification for the Imprint variant on dense
//! backbones.

#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use xtar::networks::{BackboneConfig, MetricMode, Networks};
use xtar::numerics::{ParamStore, RealArray};

/// Replaces every zero-initialized layer of the meta modules with small
/// random values so that all of them influence the output.
pub fn randomize_meta(params: &mut ParamStore, seed: u64, std: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = params
        .names()
        .filter(|n| n.starts_with("metacnn.") || n.starts_with("mergenet.") || n.starts_with("tconnet."))
        .cloned()
        .collect();
    for name in names {
        let p = params.get_mut(&name).unwrap();
        if p.data().iter().all(|v| *v == 0.0) {
            let shape = p.shape().to_vec();
            *p = RealArray::randn(&shape, std, &mut rng);
        }
    }
}

struct Layer {
    w: Vec<f64>,
    b: Vec<f64>,
    fan_in: usize,
    fan_out: usize,
}

fn layer(params: &ParamStore, prefix: &str) -> Layer {
    let w = params.get(&format!("{prefix}.w")).unwrap();
    let b = params.get(&format!("{prefix}.b")).unwrap();
    Layer {
        w: w.data().to_vec(),
        b: b.data().to_vec(),
        fan_in: w.shape()[0],
        fan_out: w.shape()[1],
    }
}

fn apply(l: &Layer, x: &[f64]) -> Vec<f64> {
    assert_eq!(x.len(), l.fan_in);
    (0..l.fan_out)
        .map(|j| l.b[j] + (0..l.fan_in).map(|i| x[i] * l.w[i * l.fan_out + j]).sum::<f64>())
        .collect()
}

fn relu(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x.max(0.0)).collect()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn mean(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; rows[0].len()];
    for r in rows {
        for (o, v) in out.iter_mut().zip(r) {
            *o += v;
        }
    }
    out.iter().map(|v| v / rows.len() as f64).collect()
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// `(f, g)` of one flat input.
fn features(net: &Networks, params: &ParamStore, x: &[f64], metacnn: bool) -> (Vec<f64>, Vec<f64>) {
    let (blocks, tap_after) = match &net.config.backbone {
        BackboneConfig::Dense { widths, tap_after } => (widths.len(), *tap_after),
        BackboneConfig::Conv { .. } => panic!("oracle covers dense backbones only"),
    };
    let mut h = x.to_vec();
    let mut tap = Vec::new();
    for i in 0..blocks {
        h = apply(&layer(params, &format!("backbone.{i}")), &h);
        if i + 1 < blocks {
            h = relu(h);
        }
        if i + 1 == tap_after {
            tap = h.clone();
        }
    }
    let g = if metacnn {
        let hidden = relu(apply(&layer(params, "metacnn.0"), &tap));
        apply(&layer(params, "metacnn.1"), &hidden)
    } else {
        vec![0.0; h.len()]
    };
    (h, g)
}

fn mix_weights(params: &ParamStore, c: &[f64], stack: &str) -> Vec<f64> {
    let mut h = c.to_vec();
    for l in 0..4 {
        h = apply(&layer(params, &format!("mergenet.{stack}.{l}")), &h);
        if l < 3 {
            h = relu(h);
        }
    }
    h.iter().map(|u| 2.0 / (1.0 + (-u).exp())).collect()
}

fn scale_shift(params: &ParamStore, c_star: &[f64], stack: &str) -> Vec<f64> {
    let mut h = c_star.to_vec();
    for l in 0..2 {
        let r = relu(apply(&layer(params, &format!("tconnet.{stack}.{l}")), &h));
        h = add(&h, &r);
    }
    apply(&layer(params, &format!("tconnet.{stack}.2")), &h)
}

fn bias_logits(params: &ParamStore, sigma: &[f64]) -> Vec<f64> {
    let h1 = relu(apply(&layer(params, "tconnet.lambda.0"), sigma));
    let h2 = add(&h1, &relu(apply(&layer(params, "tconnet.lambda.1"), &h1)));
    add(&h2, &apply(&layer(params, "tconnet.lambda.2"), &h2))
}

/// Solves `a x = b` for square `a` (n x n) and several right-hand sides
/// `b` (n x m) by Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let n = a.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for r in 0..n {
            if r != col {
                let f = a[r][col] / a[col][col];
                for c in 0..n {
                    a[r][c] -= f * a[col][c];
                }
                for c in 0..b[r].len() {
                    b[r][c] -= f * b[col][c];
                }
            }
        }
    }
    (0..n).map(|r| b[r].iter().map(|v| v / a[r][r]).collect()).collect()
}

/// Everything the oracle derives for one episode.
pub struct OracleOutput {
    pub prototypes: Vec<Vec<f64>>,
    /// Base rows then novel rows.
    pub classifier: Vec<Vec<f64>>,
    /// Posteriors over all base then novel classes, one row per query.
    pub posteriors: Vec<Vec<f64>>,
}

/// Support processing and classification with all modules enabled.
/// `support` pairs each input with its novel class index `0..n_way`.
pub fn oracle(net: &Networks, params: &ParamStore, support: &[(&[f64], usize)], queries: &[&[f64]]) -> OracleOutput {
    let n_way = net.config.n_way;
    let d = net.d();
    let fg: Vec<(Vec<f64>, Vec<f64>)> = support.iter().map(|(x, _)| features(net, params, x, true)).collect();
    let c = mean(&fg.iter().map(|(f, g)| [f.clone(), g.clone()].concat()).collect::<Vec<_>>());
    let w_pre = mix_weights(params, &c, "pre");
    let w_meta = mix_weights(params, &c, "meta");
    let mix = |f: &[f64], g: &[f64]| (0..d).map(|i| w_pre[i] * f[i] + w_meta[i] * g[i]).collect::<Vec<f64>>();
    let prototypes: Vec<Vec<f64>> = (0..n_way)
        .map(|k| {
            let rows: Vec<Vec<f64>> = support
                .iter()
                .zip(&fg)
                .filter(|((_, l), _)| *l == k)
                .map(|(_, (f, g))| mix(f, g))
                .collect();
            mean(&rows)
        })
        .collect();
    let c_star = mean(&prototypes);
    let gamma = scale_shift(params, &c_star, "gamma");
    let beta = scale_shift(params, &c_star, "beta");
    let base = params.get("classifier.base").unwrap();
    let base_rows: Vec<Vec<f64>> = (0..base.rows())
        .map(|i| (0..d).map(|j| (1.0 + gamma[j]) * base.row_slice(i)[j] + beta[j]).collect())
        .collect();
    let novel_rows: Vec<Vec<f64>> = prototypes
        .iter()
        .map(|p| {
            let sigma: Vec<f64> = base_rows.iter().map(|w| dot(p, w)).collect();
            let att = softmax(&bias_logits(params, &sigma));
            (0..d)
                .map(|j| p[j] - att.iter().zip(&base_rows).map(|(a, w)| a * w[j]).sum::<f64>())
                .collect()
        })
        .collect();
    let classifier: Vec<Vec<f64>> = base_rows.iter().chain(&novel_rows).cloned().collect();

    let score: Box<dyn Fn(&[f64], &[f64]) -> f64> = match net.config.metric {
        MetricMode::Cosine => {
            let tau = params.get("classifier.tau").unwrap().item();
            Box::new(move |z: &[f64], w: &[f64]| tau * dot(z, w) / (norm(z) * norm(w)))
        }
        MetricMode::EuclideanProjected => {
            // distances in the orthogonal complement of the row space of
            // the normalized errors: (z - w)^T (I - E^T (E E^T)^-1 E) (z - w)
            let e: Vec<Vec<f64>> = novel_rows
                .iter()
                .zip(&prototypes)
                .map(|(w, p)| {
                    let (nw, np) = (norm(w), norm(p));
                    w.iter().zip(p).map(|(a, b)| a / nw - b / np).collect()
                })
                .collect();
            let gram: Vec<Vec<f64>> = e.iter().map(|a| e.iter().map(|b| dot(a, b)).collect()).collect();
            let x = solve(gram, e.clone());
            Box::new(move |z: &[f64], w: &[f64]| {
                let v: Vec<f64> = z.iter().zip(w).map(|(a, b)| a - b).collect();
                let coeffs: Vec<f64> = e.iter().map(|row| dot(row, &v)).collect();
                let along: f64 = (0..v.len())
                    .map(|j| v[j] * x.iter().zip(&coeffs).map(|(xr, c)| xr[j] * c).sum::<f64>())
                    .sum();
                -(dot(&v, &v) - along)
            })
        }
    };
    let posteriors = queries
        .iter()
        .map(|x| {
            let (f, g) = features(net, params, x, true);
            let z = mix(&f, &g);
            softmax(&classifier.iter().map(|w| score(&z, w)).collect::<Vec<_>>())
        })
        .collect();
    OracleOutput {
        prototypes,
        classifier,
        posteriors,
    }
}

/// Largest element-wise difference between two row lists.
pub fn max_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

pub fn rows_of(a: &RealArray) -> Vec<Vec<f64>> {
    (0..a.rows()).map(|i| a.row_slice(i).to_vec()).collect()
}
