//! Plain nested-loop linear algebra used as a reference in unit tests.

use crate::tensor::Tensor;

pub type Mat = Vec<Vec<f64>>;

pub fn mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

pub fn mm(a: &[Vec<f64>], b: &[Vec<f64>]) -> Mat {
    a.iter()
        .map(|r| {
            (0..b[0].len())
                .map(|j| r.iter().zip(b).map(|(x, br)| x * br[j]).sum())
                .collect()
        })
        .collect()
}

pub fn add_rows(a: &[Vec<f64>], b: &[Vec<f64>]) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

pub fn relu_rows(a: &[Vec<f64>]) -> Mat {
    a.iter()
        .map(|r| r.iter().map(|x| x.max(0.0)).collect())
        .collect()
}

/// Row-wise layer norm with unit gain and zero shift.
pub fn ln_rows(x: &[Vec<f64>], eps: f64) -> Mat {
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            r.iter().map(|v| (v - mean) / (var + eps).sqrt()).collect()
        })
        .collect()
}

/// Multi-head attention; `heads[h] = [w_q, w_k, w_v]`.
pub fn ref_attention(
    q_src: &[Vec<f64>],
    kv_src: &[Vec<f64>],
    heads: &[[Mat; 3]],
    w_o: &[Vec<f64>],
    causal: bool,
) -> Mat {
    let mut concat: Mat = vec![Vec::new(); q_src.len()];
    for [wq, wk, wv] in heads {
        let q = mm(q_src, wq);
        let k = mm(kv_src, wk);
        let v = mm(kv_src, wv);
        let dk = q[0].len() as f64;
        for (i, qr) in q.iter().enumerate() {
            let visible = if causal { i + 1 } else { k.len() };
            let s: Vec<f64> = k[..visible]
                .iter()
                .map(|kr| qr.iter().zip(kr).map(|(a, b)| a * b).sum::<f64>() / dk.sqrt())
                .collect();
            let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.iter().map(|x| (x - m).exp()).sum();
            for c in 0..v[0].len() {
                concat[i].push(
                    s.iter()
                        .zip(&v)
                        .map(|(x, vr)| (x - m).exp() / z * vr[c])
                        .sum(),
                );
            }
        }
    }
    mm(&concat, w_o)
}
