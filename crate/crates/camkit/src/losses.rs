//! Metric-learning losses: ProxyNCA++ over trainable class proxies, the
//! NT-Xent contrastive loss over two augmented views, and their convex
//! combination.
//!
//! Both losses normalize their inputs, so they are invariant to uniform
//! embedding scale, and both go through a max-subtracted log-sum-exp; the
//! naive softmax overflows at the low temperatures this loss family uses.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Param, Scalar, Tensor, Var};

/// Trainable class proxies: one row per training class.
pub struct ProxyBank<T> {
    pub proxies: Param<T>,
    pub classes: Vec<String>,
    pub temperature: f64,
}

impl<T: Scalar> ProxyBank<T> {
    /// Rows drawn from N(0, 1/d), trained jointly with the model.
    pub fn new(classes: Vec<String>, dim: usize, temperature: f64, rng: &mut impl Rng) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::contract("proxy bank needs >= 1 class"));
        }
        if !(0.05..=1.0).contains(&temperature) {
            return Err(Error::config(format!(
                "proxy temperature {temperature} outside [0.05, 1]"
            )));
        }
        let normal = Normal::new(0.0, (1.0 / dim as f64).sqrt()).expect("std");
        Ok(ProxyBank {
            proxies: Param::new(
                "proxies",
                Tensor::from_fn(&[classes.len(), dim], |_| T::from_f64(normal.sample(rng))),
            ),
            classes,
            temperature,
        })
    }

    pub fn class_index(&self, label: &str) -> Result<usize> {
        self.classes
            .iter()
            .position(|c| c == label)
            .ok_or_else(|| Error::Index(format!("label {label} not in proxy bank")))
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

/// Loss mixing configuration: alpha * SSL + (1 - alpha) * ProxyNCA++.
#[derive(Clone, Copy, Debug)]
pub struct LossConfig {
    pub alpha: f64,
    pub proxy_temperature: f64,
    pub ssl_temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.0,
            proxy_temperature: 0.2,
            ssl_temperature: 0.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(format!("loss.alpha {} outside [0,1]", self.alpha)));
        }
        if self.proxy_temperature <= 0.0 || self.ssl_temperature <= 0.0 {
            return Err(Error::config("loss temperatures must be > 0"));
        }
        Ok(())
    }
}

/// ProxyNCA++: mean over samples of
/// -log( exp(-d(x̂_i, p̂_{y_i})/T) / Σ_a exp(-d(x̂_i, p̂_a)/T) )
/// with rows and proxies L2-normalized and d the squared Euclidean distance.
pub fn proxynca_loss<T: Scalar>(
    g: &mut Graph<T>,
    embeddings: Var,
    labels: &[usize],
    proxies: Var,
    temperature: f64,
) -> Result<Var> {
    let es = g.shape(embeddings).to_vec();
    let ps = g.shape(proxies).to_vec();
    if es.len() != 2 || ps.len() != 2 || es[1] != ps[1] {
        return Err(Error::Dimension {
            op: "proxynca_loss",
            lhs: es,
            rhs: ps,
        });
    }
    if labels.len() != es[0] || es[0] == 0 {
        return Err(Error::Dimension {
            op: "proxynca_loss labels",
            lhs: vec![labels.len()],
            rhs: vec![es[0]],
        });
    }
    for (i, &l) in labels.iter().enumerate() {
        if l >= ps[0] {
            return Err(Error::Index(format!(
                "proxynca_loss: label {l} out of range 0..{} at row {i}",
                ps[0]
            )));
        }
    }
    let x_hat = g.row_normalize(embeddings)?;
    let p_hat = g.row_normalize(proxies)?;
    let dist = g.pairwise_sqdist(x_hat, p_hat)?;
    let logits = g.scale(dist, T::from_f64(-1.0 / temperature))?;
    g.softmax_xent_rows(logits, labels, false)
}

/// NT-Xent over two views. Views are stacked [A; B]; row i's positive is
/// row i+N (resp. i-N); the denominator runs over all 2N-1 other rows
/// (self-similarity excluded); the mean is over all 2N anchors.
pub fn ntxent_loss<T: Scalar>(
    g: &mut Graph<T>,
    view_a: Var,
    view_b: Var,
    temperature: f64,
) -> Result<Var> {
    let sa = g.shape(view_a).to_vec();
    let sb = g.shape(view_b).to_vec();
    if sa.len() != 2 || sa != sb {
        return Err(Error::Dimension {
            op: "ntxent_loss",
            lhs: sa,
            rhs: sb,
        });
    }
    let n = sa[0];
    if n == 0 {
        return Err(Error::contract("ntxent_loss: empty batch"));
    }
    let stacked = stack_two(g, view_a, view_b)?;
    let z = g.row_normalize(stacked)?;
    let sim = g.matmul_nt(z, z)?;
    let logits = g.scale(sim, T::from_f64(1.0 / temperature))?;
    let targets: Vec<usize> = (0..2 * n).map(|i| if i < n { i + n } else { i - n }).collect();
    g.softmax_xent_rows(logits, &targets, true)
}

/// Concatenate two [N,d] matrices along axis 0 on the graph, preserving
/// gradients to both inputs.
fn stack_two<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let sa = g.shape(a).to_vec();
    let (n, d) = (sa[0], sa[1]);
    // concat of rank-4 views [1,N,d,1] along axis 1 lays the rows of `a`
    // out before the rows of `b`, which is exactly row stacking
    let a4 = g.reshape(a, vec![1, n, d, 1])?;
    let b4 = g.reshape(b, vec![1, n, d, 1])?;
    let cat = g.concat_axis1(&[a4, b4])?;
    g.reshape(cat, vec![2 * n, d])
}

/// Exact convex combination alpha * ssl + (1 - alpha) * proxy.
pub fn combined_loss<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &LossConfig,
    proxy_term: Var,
    ssl_term: Var,
) -> Result<Var> {
    if !g.value(proxy_term).is_scalar() || !g.value(ssl_term).is_scalar() {
        return Err(Error::contract("combined_loss expects scalar terms"));
    }
    let a = g.scale(ssl_term, T::from_f64(cfg.alpha))?;
    let b = g.scale(proxy_term, T::from_f64(1.0 - cfg.alpha))?;
    g.add(a, b)
}

/// Convenience wrappers that evaluate a loss on plain tensors, for scoring
/// and tests that do not need gradients.

pub fn proxynca_value<T: Scalar>(
    embeddings: &Tensor<T>,
    labels: &[usize],
    proxies: &Tensor<T>,
    temperature: f64,
) -> Result<T> {
    let mut g = Graph::new();
    let e = g.input(embeddings.clone())?;
    let p = g.input(proxies.clone())?;
    let loss = proxynca_loss(&mut g, e, labels, p, temperature)?;
    Ok(g.value(loss).item())
}

pub fn ntxent_value<T: Scalar>(view_a: &Tensor<T>, view_b: &Tensor<T>, temperature: f64) -> Result<T> {
    let mut g = Graph::new();
    let a = g.input(view_a.clone())?;
    let b = g.input(view_b.clone())?;
    let loss = ntxent_loss(&mut g, a, b, temperature)?;
    Ok(g.value(loss).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_grad, grad_rel_err, ParamId};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seeded(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Straight transcription of the ProxyNCA++ formula in plain f64 loops.
    fn proxynca_oracle(emb: &Tensor<f64>, labels: &[usize], prox: &Tensor<f64>, t: f64) -> f64 {
        let (n, d) = (emb.shape()[0], emb.shape()[1]);
        let k = prox.shape()[0];
        let normalize = |m: &Tensor<f64>, rows: usize| -> Vec<f64> {
            let mut out = m.data().to_vec();
            for r in 0..rows {
                let norm: f64 = out[r * d..(r + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt();
                for v in &mut out[r * d..(r + 1) * d] {
                    *v /= norm;
                }
            }
            out
        };
        let x = normalize(emb, n);
        let p = normalize(prox, k);
        let mut total = 0.0;
        for i in 0..n {
            let dist = |a: usize| -> f64 {
                (0..d).map(|j| (x[i * d + j] - p[a * d + j]).powi(2)).sum()
            };
            let num = (-dist(labels[i]) / t).exp();
            let den: f64 = (0..k).map(|a| (-dist(a) / t).exp()).sum();
            total += -(num / den).ln();
        }
        total / n as f64
    }

    /// Straight transcription of the NT-Xent formula.
    fn ntxent_oracle(a: &Tensor<f64>, b: &Tensor<f64>, t: f64) -> f64 {
        let (n, d) = (a.shape()[0], a.shape()[1]);
        let mut z: Vec<Vec<f64>> = Vec::new();
        for m in [a, b] {
            for i in 0..n {
                let row: Vec<f64> = m.data()[i * d..(i + 1) * d].to_vec();
                let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                z.push(row.iter().map(|v| v / norm).collect());
            }
        }
        let sim = |i: usize, j: usize| -> f64 { z[i].iter().zip(&z[j]).map(|(x, y)| x * y).sum() };
        let mut total = 0.0;
        for i in 0..2 * n {
            let pos = if i < n { i + n } else { i - n };
            let num = (sim(i, pos) / t).exp();
            let den: f64 = (0..2 * n).filter(|&k| k != i).map(|k| (sim(i, k) / t).exp()).sum();
            total += -(num / den).ln();
        }
        total / (2 * n) as f64
    }

    #[test]
    fn single_proxy_loss_is_exactly_zero() {
        let emb = seeded(&[4, 3], 1);
        let prox = seeded(&[1, 3], 2);
        let v = proxynca_value(&emb, &[0, 0, 0, 0], &prox, 0.2).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn two_equidistant_proxies_give_ln2() {
        // x on the bisecting axis of two mirrored proxies
        let emb = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
        let prox = Tensor::new(vec![2, 2], vec![1.0, 0.0, -1.0, 0.0]).unwrap();
        let v = proxynca_value(&emb, &[0], &prox, 0.2).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-9, "{v}");
    }

    #[test]
    fn proxynca_matches_direct_formula_and_fd() {
        let emb = seeded(&[8, 4], 3);
        let prox = seeded(&[3, 4], 4);
        let labels = [0usize, 1, 2, 0, 1, 2, 0, 1];
        let got = proxynca_value(&emb, &labels, &prox, 0.2).unwrap();
        let want = proxynca_oracle(&emb, &labels, &prox, 0.2);
        assert!((got - want).abs() <= 1e-10 * want.abs().max(1.0), "{got} vs {want}");

        // gradient of both embeddings and proxies
        for (which, shape, seed) in [(0, [8usize, 4usize], 3), (1, [3, 4], 4)] {
            let id = ParamId(u64::MAX - 7 - which as u64);
            let base = if which == 0 { emb.clone() } else { prox.clone() };
            let mut eval = |t: &Tensor<f64>| -> crate::Result<f64> {
                let mut g = Graph::new();
                let (e, p) = if which == 0 {
                    (g.leaf_with_grad(id, t.clone())?, g.input(prox.clone())?)
                } else {
                    (g.input(emb.clone())?, g.leaf_with_grad(id, t.clone())?)
                };
                let loss = proxynca_loss(&mut g, e, &labels, p, 0.2)?;
                Ok(g.value(loss).item())
            };
            let fd = finite_diff_grad(&mut eval, &base, 1e-6).unwrap();
            let mut g = Graph::new();
            let (e, p) = if which == 0 {
                (g.leaf_with_grad(id, base.clone()).unwrap(), g.input(prox.clone()).unwrap())
            } else {
                (g.input(emb.clone()).unwrap(), g.leaf_with_grad(id, base.clone()).unwrap())
            };
            let loss = proxynca_loss(&mut g, e, &labels, p, 0.2).unwrap();
            let grads = g.backward(loss).unwrap();
            let rel = grad_rel_err(&grads[&id], &fd);
            assert!(rel <= 1e-4, "which={which} rel={rel} shape={shape:?} seed={seed}");
        }
    }

    #[test]
    fn ntxent_single_pair_is_exactly_zero() {
        let a = seeded(&[1, 5], 5);
        let b = seeded(&[1, 5], 6);
        let v = ntxent_value(&a, &b, 0.5).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn ntxent_uniform_simplex_gives_ln3() {
        // regular tetrahedron: four unit vectors with pairwise cosine -1/3
        let r = (8.0f64).sqrt() / 3.0;
        let rows = [
            [0.0, 0.0, 1.0],
            [r, 0.0, -1.0 / 3.0],
            [-r / 2.0, (2.0f64 / 3.0).sqrt(), -1.0 / 3.0],
            [-r / 2.0, -(2.0f64 / 3.0).sqrt(), -1.0 / 3.0],
        ];
        let a = Tensor::new(vec![2, 3], rows[0].iter().chain(rows[1].iter()).copied().collect()).unwrap();
        let b = Tensor::new(vec![2, 3], rows[2].iter().chain(rows[3].iter()).copied().collect()).unwrap();
        let v = ntxent_value(&a, &b, 0.5).unwrap();
        assert!((v - 3.0f64.ln()).abs() < 1e-9, "{v}");
    }

    #[test]
    fn ntxent_matches_direct_formula_and_fd() {
        let a = seeded(&[6, 5], 7);
        let b = seeded(&[6, 5], 8);
        let got = ntxent_value(&a, &b, 0.5).unwrap();
        let want = ntxent_oracle(&a, &b, 0.5);
        assert!((got - want).abs() <= 1e-10 * want.abs().max(1.0), "{got} vs {want}");

        let id = ParamId(u64::MAX - 17);
        let mut eval = |t: &Tensor<f64>| -> crate::Result<f64> {
            let mut g = Graph::new();
            let av = g.leaf_with_grad(id, t.clone())?;
            let bv = g.input(b.clone())?;
            let loss = ntxent_loss(&mut g, av, bv, 0.5)?;
            Ok(g.value(loss).item())
        };
        let fd = finite_diff_grad(&mut eval, &a, 1e-6).unwrap();
        let mut g = Graph::new();
        let av = g.leaf_with_grad(id, a.clone()).unwrap();
        let bv = g.input(b.clone()).unwrap();
        let loss = ntxent_loss(&mut g, av, bv, 0.5).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grad_rel_err(&grads[&id], &fd) <= 1e-4);
    }

    #[test]
    fn combined_loss_is_the_exact_convex_combination() {
        let mut g: Graph<f64> = Graph::new();
        let proxy = g.input(Tensor::scalar(1.0)).unwrap();
        let ssl = g.input(Tensor::scalar(2.0)).unwrap();
        let cfg = LossConfig {
            alpha: 0.2,
            ..LossConfig::default()
        };
        let c = combined_loss(&mut g, &cfg, proxy, ssl).unwrap();
        assert!((g.value(c).item() - 1.2).abs() < 1e-15);

        let mut g: Graph<f64> = Graph::new();
        let proxy = g.input(Tensor::scalar(3.5)).unwrap();
        let ssl = g.input(Tensor::scalar(-1.0)).unwrap();
        for (alpha, want) in [(0.0, 3.5), (1.0, -1.0)] {
            let cfg = LossConfig { alpha, ..LossConfig::default() };
            // fresh graph per combination to keep the tape clean
            let mut g2: Graph<f64> = Graph::new();
            let p2 = g2.input(g.value(proxy).clone()).unwrap();
            let s2 = g2.input(g.value(ssl).clone()).unwrap();
            let c = combined_loss(&mut g2, &cfg, p2, s2).unwrap();
            assert_eq!(g2.value(c).item(), want);
        }
    }

    #[test]
    fn losses_are_scale_invariant_and_permutation_invariant() {
        let emb = seeded(&[6, 4], 9);
        let prox = seeded(&[3, 4], 10);
        let labels = [0usize, 1, 2, 0, 1, 2];
        let base = proxynca_value(&emb, &labels, &prox, 0.2).unwrap();
        let scaled = emb.map(|v| v * 37.5);
        let v = proxynca_value(&scaled, &labels, &prox, 0.2).unwrap();
        assert!((v - base).abs() <= 1e-10);

        // permute batch order
        let perm = [3usize, 1, 5, 0, 2, 4];
        let emb_p = Tensor::from_fn(&[6, 4], |i| emb.data()[perm[i / 4] * 4 + i % 4]);
        let labels_p: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let vp = proxynca_value(&emb_p, &labels_p, &prox, 0.2).unwrap();
        assert!((vp - base).abs() <= 1e-12);

        let a = seeded(&[5, 4], 11);
        let b = seeded(&[5, 4], 12);
        let base = ntxent_value(&a, &b, 0.5).unwrap();
        let v = ntxent_value(&a.map(|v| v * 0.03), &b.map(|v| v * 0.03), 0.5).unwrap();
        assert!((v - base).abs() <= 1e-10);
        let perm = [4usize, 2, 0, 3, 1];
        let ap = Tensor::from_fn(&[5, 4], |i| a.data()[perm[i / 4] * 4 + i % 4]);
        let bp = Tensor::from_fn(&[5, 4], |i| b.data()[perm[i / 4] * 4 + i % 4]);
        let vp = ntxent_value(&ap, &bp, 0.5).unwrap();
        assert!((vp - base).abs() <= 1e-12);
    }

    #[test]
    fn temperature_sharpens_toward_zero_or_blowup() {
        // embedding nearest its true proxy: loss -> 0 as T -> 0
        let emb = Tensor::new(vec![1, 2], vec![0.9, 0.1]).unwrap();
        let prox = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let low = proxynca_value(&emb, &[0], &prox, 0.05).unwrap();
        let high = proxynca_value(&emb, &[0], &prox, 1.0).unwrap();
        assert!(low < high);
        assert!(low < 1e-6);
        // nearest proxy is the wrong class: loss grows as T decreases
        let low_bad = proxynca_value(&emb, &[1], &prox, 0.05).unwrap();
        let high_bad = proxynca_value(&emb, &[1], &prox, 1.0).unwrap();
        assert!(low_bad > high_bad);
        assert!(low_bad > 10.0);
    }

    #[test]
    fn zero_norm_rows_are_rejected() {
        let emb = Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap();
        let prox = seeded(&[2, 3], 13);
        assert!(matches!(
            proxynca_value(&emb, &[0, 1], &prox, 0.2),
            Err(Error::ZeroNorm { .. })
        ));
        let a = seeded(&[2, 3], 14);
        let z = Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert!(matches!(
            ntxent_value(&a, &z, 0.5),
            Err(Error::ZeroNorm { .. })
        ));
    }

    #[test]
    fn out_of_range_label_is_an_index_error() {
        let emb = seeded(&[2, 3], 15);
        let prox = seeded(&[2, 3], 16);
        assert!(matches!(
            proxynca_value(&emb, &[0, 5], &prox, 0.2),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn proxy_bank_enforces_temperature_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(ProxyBank::<f64>::new(vec!["a".into()], 4, 0.2, &mut rng).is_ok());
        assert!(ProxyBank::<f64>::new(vec!["a".into()], 4, 0.01, &mut rng).is_err());
        assert!(ProxyBank::<f64>::new(vec![], 4, 0.2, &mut rng).is_err());
    }
}
