//! Reference implementations shared by the integration tests. Each one is a
//! direct loop over the defining sums and shares no code with the library.

#![allow(dead_code)]

use msac::Tensor;

/// The double sum evaluated with 1-based indices exactly as written:
/// `c_ij = Σ_{k=1..n} Σ_{l=1..m} x[i - ceil(n/2) + k, j - ceil(m/2) + l] · h_kl`,
/// out-of-range reads are zero.
pub fn oracle_conv2d(x: &Tensor<f64>, h: &Tensor<f64>) -> Tensor<f64> {
    let (big_n, big_m, d) = (x.shape()[0] as i64, x.shape()[1] as i64, x.shape()[2]);
    let (n, m) = (h.shape()[0] as i64, h.shape()[1] as i64);
    let (cn, cm) = ((n + 1) / 2, (m + 1) / 2);
    Tensor::from_fn(&[big_n as usize, big_m as usize], |ij| {
        let (i, j) = (ij[0] as i64 + 1, ij[1] as i64 + 1);
        let mut acc = 0.0;
        for k in 1..=n {
            for l in 1..=m {
                let (a, b) = (i - cn + k, j - cm + l);
                if a < 1 || a > big_n || b < 1 || b > big_m {
                    continue;
                }
                for c in 0..d {
                    acc += x.get(&[(a - 1) as usize, (b - 1) as usize, c])
                        * h.get(&[(k - 1) as usize, (l - 1) as usize, c]);
                }
            }
        }
        acc
    })
    .unwrap()
}

/// Five nested loops over (i, j, f, k, l) plus the channel sum.
pub fn oracle_conv_bank(x: &Tensor<f64>, h: &Tensor<f64>) -> Tensor<f64> {
    let f = h.shape()[0];
    let (n, m, d) = (h.shape()[1], h.shape()[2], h.shape()[3]);
    let mut out = Tensor::zeros(&[x.shape()[0], x.shape()[1], f]).unwrap();
    for fi in 0..f {
        let hf = Tensor::from_fn(&[n, m, d], |i| h.get(&[fi, i[0], i[1], i[2]])).unwrap();
        let c = oracle_conv2d(x, &hf);
        for i in 0..x.shape()[0] {
            for j in 0..x.shape()[1] {
                out.set(&[i, j, fi], c.get(&[i, j]));
            }
        }
    }
    out
}

pub fn dense_matmul(w: &Tensor<f64>, x: &Tensor<f64>) -> Tensor<f64> {
    let (a, b, c) = (w.shape()[0], w.shape()[1], x.shape()[1]);
    Tensor::from_fn(&[a, c], |ix| {
        let mut acc = 0.0;
        for k in 0..b {
            acc += w.get(&[ix[0], k]) * x.get(&[k, ix[1]]);
        }
        acc
    })
    .unwrap()
}

/// One attention head, loop by loop: projections, scores `q(i,j)·k(r,t)`,
/// scaling, the bias `b[|i-r|, |j-t|]`, softmax over (r, t), weighted sum.
pub fn oracle_head(
    x: &Tensor<f64>,
    hq: &Tensor<f64>,
    hk: &Tensor<f64>,
    hv: &Tensor<f64>,
    bias: Option<&Tensor<f64>>,
) -> Tensor<f64> {
    let (q, k, v) = (
        oracle_conv_bank(x, hq),
        oracle_conv_bank(x, hk),
        oracle_conv_bank(x, hv),
    );
    let (n, m, d_a, d_o) = (x.shape()[0], x.shape()[1], hq.shape()[0], hv.shape()[0]);
    let mut y = Tensor::zeros(&[n, m, d_o]).unwrap();
    for i in 0..n {
        for j in 0..m {
            let mut logits = vec![0.0; n * m];
            for r in 0..n {
                for t in 0..m {
                    let mut s = 0.0;
                    for a in 0..d_a {
                        s += q.get(&[i, j, a]) * k.get(&[r, t, a]);
                    }
                    s /= (d_a as f64).sqrt();
                    if let Some(b) = bias {
                        s += b.get(&[i.abs_diff(r), j.abs_diff(t)]);
                    }
                    logits[r * m + t] = s;
                }
            }
            let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
            let z: f64 = w.iter().sum();
            for c in 0..d_o {
                let mut acc = 0.0;
                for r in 0..n {
                    for t in 0..m {
                        acc += w[r * m + t] / z * v.get(&[r, t, c]);
                    }
                }
                y.set(&[i, j, c], acc);
            }
        }
    }
    y
}

/// Channel concatenation followed by a 1×1 bank, as plain loops.
pub fn oracle_fuse(parts: &[Tensor<f64>], bank: &Tensor<f64>) -> Tensor<f64> {
    let (n, m) = (parts[0].shape()[0], parts[0].shape()[1]);
    let out = bank.shape()[0];
    Tensor::from_fn(&[n, m, out], |ix| {
        let mut acc = 0.0;
        let mut c = 0;
        for p in parts {
            for pc in 0..p.shape()[2] {
                acc += bank.get(&[ix[2], 0, 0, c]) * p.get(&[ix[0], ix[1], pc]);
                c += 1;
            }
        }
        acc
    })
    .unwrap()
}

pub fn oracle_multi_head(x: &Tensor<f64>, p: &msac::MultiHeadParams64) -> Tensor<f64> {
    let ys: Vec<_> = p
        .heads
        .iter()
        .map(|h| oracle_head(x, &h.hq, &h.hk, &h.hv, h.bias.as_ref()))
        .collect();
    oracle_fuse(&ys, &p.hy)
}

pub fn oracle_sac(x: &Tensor<f64>, p: &msac::SACParams64) -> Tensor<f64> {
    let y = oracle_multi_head(x, &p.mh);
    match &p.parallel {
        None => y,
        Some(pc) => oracle_fuse(&[y, oracle_conv_bank(x, &pc.hr)], &pc.hy_fuse),
    }
}

pub fn oracle_msac(x: &Tensor<f64>, p: &msac::MSACParams64) -> Tensor<f64> {
    let outs: Vec<_> = p.scales.iter().map(|s| oracle_sac(x, s)).collect();
    oracle_fuse(&outs, &p.hphi)
}

/// `Y = V Aᵀ` with `A_ij ∝ exp(q_i · k_j / √d_a)` normalized over `j`.
pub fn oracle_attention_1d(x: &Tensor<f64>, wq: &Tensor<f64>, wk: &Tensor<f64>, wv: &Tensor<f64>) -> Tensor<f64> {
    let (q, k, v) = (dense_matmul(wq, x), dense_matmul(wk, x), dense_matmul(wv, x));
    let (d_a, len) = (q.shape()[0], x.shape()[1]);
    let mut y = Tensor::zeros(&[v.shape()[0], len]).unwrap();
    for i in 0..len {
        let s: Vec<f64> = (0..len)
            .map(|j| (0..d_a).map(|a| q.get(&[a, i]) * k.get(&[a, j])).sum::<f64>() / (d_a as f64).sqrt())
            .collect();
        let top = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = s.iter().map(|l| (l - top).exp()).collect();
        let z: f64 = w.iter().sum();
        for c in 0..v.shape()[0] {
            y.set(&[c, i], (0..len).map(|j| w[j] / z * v.get(&[c, j])).sum());
        }
    }
    y
}

pub fn close(a: &Tensor<f64>, b: &Tensor<f64>, tol: f64) -> bool {
    a.shape() == b.shape() && a.max_rel_diff(b, 1e-300).unwrap() <= tol
}
