use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;

/// Number of frequency buckets (quantiles of training frequency).
const BUCKETS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionRow {
    pub item: u32,
    pub frequency: u64,
    /// 0 for the rarest quarter of items up to 3 for the most frequent.
    pub bucket: usize,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub rows: Vec<ProjectionRow>,
    /// Share of total variance per principal direction, descending.
    pub explained: Vec<f64>,
}

/// Projects item embeddings `1..=N` onto their top two principal directions.
///
/// `frequencies[i]` is the training count of item `i` (slot 0 ignored).
pub fn emit_embedding_projection(model: &Model, frequencies: &[u64]) -> Result<Projection> {
    let table = model.item_table();
    let n = model.num_items();
    let d = table.ncols();
    if frequencies.len() != n + 1 {
        return Err(Error::VocabMismatch {
            model: n,
            dataset: frequencies.len().saturating_sub(1),
        });
    }
    if n < 2 || d < 2 {
        return Err(Error::Degenerate("need at least two items and two dimensions".into()));
    }
    let x = DMatrix::from_fn(n, d, |i, j| table[[i + 1, j]]);
    let mean = x.row_mean();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= &mean;
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0).max(1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let total: f64 = vals.iter().sum();
    if total <= 0.0 || vals[1] <= 1e-12 * total {
        return Err(Error::Degenerate("embedding covariance has rank < 2".into()));
    }
    let mut axes = Vec::with_capacity(2);
    for &i in &order[..2] {
        let mut v = eig.eigenvectors.column(i).into_owned();
        // sign convention: largest-magnitude component positive
        let big = v
            .iter()
            .copied()
            .fold(0.0f64, |m, c| if c.abs() > m.abs() { c } else { m });
        if big < 0.0 {
            v = -v;
        }
        axes.push(v);
    }

    let mut by_freq: Vec<usize> = (1..=n).collect();
    by_freq.sort_by_key(|&i| (frequencies[i], i));
    let mut bucket = vec![0usize; n + 1];
    for (rank, &i) in by_freq.iter().enumerate() {
        bucket[i] = rank * BUCKETS / n;
    }
    let rows = (0..n)
        .map(|i| {
            let r = centered.row(i);
            ProjectionRow {
                item: i as u32 + 1,
                frequency: frequencies[i + 1],
                bucket: bucket[i + 1],
                x: r.dot(&axes[0].transpose()),
                y: r.dot(&axes[1].transpose()),
            }
        })
        .collect();
    Ok(Projection {
        rows,
        explained: vals.iter().map(|v| v / total).collect(),
    })
}

pub fn write_projection(p: &Projection, path: &Path) -> Result<()> {
    let mut out = String::from("item\tfrequency\tbucket\tx\ty\n");
    for r in &p.rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            r.item, r.frequency, r.bucket, r.x, r.y
        ));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use rand_distr::{Distribution, StandardNormal};

    use super::*;
    use crate::config::ModelConfig;
    use crate::rng::{derive, Stream};

    fn model(n: usize, d: usize) -> Model {
        Model::new(ModelConfig {
            num_items: n,
            max_len: 4,
            hidden_dim: d,
            num_heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            ..Default::default()
        })
        .unwrap()
    }

    fn set_table(m: &mut Model, f: impl Fn(usize, usize) -> f64) {
        let id = m.ids.item_embedding;
        let t = m.params.value_mut(id);
        for i in 1..t.nrows() {
            for j in 0..t.ncols() {
                t[[i, j]] = f(i, j);
            }
        }
    }

    #[test]
    fn planar_embeddings_keep_distances() {
        let (n, d) = (12, 6);
        let mut m = model(n, d);
        let mut rng = derive(1, Stream::Verify, &[]);
        let coef: Vec<(f64, f64)> = (0..=n)
            .map(|_| (StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)))
            .collect();
        // orthonormal-ish basis of a plane: u = e0+e1, v = e2-e3+e4, scaled
        let u = [1.0, 1.0, 0.0, 0.0, 0.0, 0.0].map(|x: f64| x / 2f64.sqrt());
        let v = [0.0, 0.0, 1.0, -1.0, 1.0, 0.0].map(|x: f64| x / 3f64.sqrt());
        set_table(&mut m, |i, j| 0.3 + coef[i].0 * u[j] + coef[i].1 * v[j]);
        let p = emit_embedding_projection(&m, &vec![1; n + 1]).unwrap();
        assert_eq!(p.rows.len(), n);
        let t = m.item_table();
        for a in 0..n {
            for b in 0..n {
                let orig: f64 = (0..d)
                    .map(|j| (t[[a + 1, j]] - t[[b + 1, j]]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let proj = ((p.rows[a].x - p.rows[b].x).powi(2) + (p.rows[a].y - p.rows[b].y).powi(2)).sqrt();
                assert!((orig - proj).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn isotropic_spectrum_is_flat() {
        let (n, d) = (4000, 8);
        let mut m = model(n, d);
        let mut rng = derive(2, Stream::Verify, &[]);
        let vals: Vec<f64> = (0..(n + 1) * d).map(|_| StandardNormal.sample(&mut rng)).collect();
        set_table(&mut m, |i, j| vals[i * d + j]);
        let p = emit_embedding_projection(&m, &vec![0; n + 1]).unwrap();
        let top2 = p.explained[0] + p.explained[1];
        // sampling spread of the extreme eigenvalues is about 2*sqrt(d/n) relative
        assert!((top2 - 2.0 / d as f64).abs() < 0.05, "top-2 share {top2}");
        assert!((p.explained.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rank_one_rejected() {
        let mut m = model(6, 4);
        set_table(&mut m, |i, _| i as f64);
        assert!(matches!(
            emit_embedding_projection(&m, &[0; 7]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn buckets_follow_frequency() {
        let m = model(8, 4);
        let freq: Vec<u64> = (0..9).collect();
        let p = emit_embedding_projection(&m, &freq).unwrap();
        let b: Vec<usize> = p.rows.iter().map(|r| r.bucket).collect();
        assert_eq!(b, vec![0, 0, 1, 1, 2, 2, 3, 3]);
    }
}
