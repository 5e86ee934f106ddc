//! Frame-wise discrete pre-training targets via K-means over spectral
//! features: Lloyd's algorithm with k-means++ seeding, deterministic
//! under a fixed seed.

use rand::Rng;

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::rng::{stream_rng, Stream};

/// Fitted centroids plus the feature settings they were computed with.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    /// Row-major K x D centroid matrix.
    pub centroids: Vec<f64>,
    pub k: usize,
    pub dim: usize,
    /// (n_mels, frame_len, frame_hop) of the fit-time features.
    pub feature_config: (usize, usize, usize),
}

impl Codebook {
    pub fn centroid(&self, i: usize) -> &[f64] {
        &self.centroids[i * self.dim..(i + 1) * self.dim]
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Within-cluster sum of squares for a frame set against centroids.
pub fn wcss(frames: &[f64], dim: usize, centroids: &[f64], k: usize) -> f64 {
    frames
        .chunks(dim)
        .map(|f| {
            (0..k)
                .map(|c| dist2(f, &centroids[c * dim..(c + 1) * dim]))
                .fold(f64::INFINITY, f64::min)
        })
        .sum()
}

/// Lloyd's algorithm with k-means++ seeding. Frames are row-major
/// `n x dim`. Empty clusters are re-seeded to the point farthest from
/// its assigned centroid, so WCSS never increases between iterations.
pub fn kmeans_fit(
    frames: &[f64],
    dim: usize,
    k: usize,
    iters: usize,
    seed: u64,
    feature_config: (usize, usize, usize),
) -> Result<Codebook> {
    if dim == 0 || frames.len() % dim != 0 {
        return Err(Error::shape("kmeans_fit", format!("{} values, dim {dim}", frames.len())));
    }
    let n = frames.len() / dim;
    if k == 0 {
        return Err(Error::domain("kmeans_fit", "k must be positive"));
    }
    if n < k {
        return Err(Error::domain(
            "kmeans_fit",
            format!("{n} frames is fewer than k = {k}"),
        ));
    }
    let row = |i: usize| &frames[i * dim..(i + 1) * dim];
    let mut rng = stream_rng(seed, Stream::KmeansInit, &[k as u64]);

    // k-means++ seeding.
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(row(first));
    let mut min_d2: Vec<f64> = (0..n).map(|i| dist2(row(i), row(first))).collect();
    for _ in 1..k {
        let total: f64 = min_d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &d) in min_d2.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c0 = centroids.len();
        centroids.extend_from_slice(row(pick));
        for i in 0..n {
            let d = dist2(row(i), &centroids[c0..c0 + dim]);
            if d < min_d2[i] {
                min_d2[i] = d;
            }
        }
    }

    let mut assign = vec![0usize; n];
    for _ in 0..iters {
        // Assignment: nearest centroid, ties to the lowest index.
        let mut changed = false;
        for i in 0..n {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for c in 0..k {
                let d = dist2(row(i), &centroids[c * dim..(c + 1) * dim]);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        // Update: means of assigned points.
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let c = assign[i];
            counts[c] += 1;
            for (s, v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for (dst, s) in centroids[c * dim..(c + 1) * dim].iter_mut().zip(&sums[c * dim..]) {
                    *dst = s / counts[c] as f64;
                }
            } else {
                // Re-seed an empty cluster to the farthest point.
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = dist2(row(a), &centroids[assign[a] * dim..(assign[a] + 1) * dim]);
                        let db = dist2(row(b), &centroids[assign[b] * dim..(assign[b] + 1) * dim]);
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                centroids[c * dim..(c + 1) * dim].copy_from_slice(row(far));
                assign[far] = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    if centroids.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "kmeans_fit" });
    }
    Ok(Codebook {
        centroids,
        k,
        dim,
        feature_config,
    })
}

/// Map every frame to its nearest centroid (ties to the lowest index).
pub fn assign_labels(features: &FeatureMatrix, cb: &Codebook) -> Result<Vec<usize>> {
    if features.d != cb.dim {
        return Err(Error::shape(
            "assign_labels",
            format!("feature dim {} vs codebook dim {}", features.d, cb.dim),
        ));
    }
    Ok((0..features.t)
        .map(|i| {
            let f = features.row(i);
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for c in 0..cb.k {
                let d = dist2(f, cb.centroid(c));
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            best
        })
        .collect())
}

/// Nearest-center resampling of labels from the feature frame rate to
/// the encoder frame rate: encoder frame `i` takes the label whose
/// analysis center is closest, `labels[min(round(i*enc_hop/feat_hop), T-1)]`.
pub fn align_labels_to_encoder(
    labels: &[usize],
    feature_hop: usize,
    encoder_hop: usize,
    t_enc: usize,
) -> Result<Vec<usize>> {
    if feature_hop == 0 || encoder_hop == 0 {
        return Err(Error::domain("align_labels", "hops must be positive"));
    }
    if t_enc == 0 {
        return Err(Error::domain("align_labels", "t_enc must be positive"));
    }
    if labels.is_empty() {
        return Err(Error::domain("align_labels", "empty label sequence"));
    }
    Ok((0..t_enc)
        .map(|i| {
            let j = ((i * encoder_hop) as f64 / feature_hop as f64).round() as usize;
            labels[j.min(labels.len() - 1)]
        })
        .collect())
}

/// Persist a codebook in the repo checkpoint container under the
/// `codebook.centroids` entry.
pub fn save_codebook(cb: &Codebook, path: &std::path::Path) -> Result<()> {
    let mut ck = crate::checkpoint::Checkpoint::default();
    ck.insert("codebook.centroids", &[cb.k, cb.dim], cb.centroids.clone());
    let (n_mels, frame_len, frame_hop) = cb.feature_config;
    ck.config.insert("codebook.n_mels".into(), n_mels.to_string());
    ck.config.insert("codebook.frame_len".into(), frame_len.to_string());
    ck.config.insert("codebook.frame_hop".into(), frame_hop.to_string());
    ck.save(path)
}

pub fn load_codebook(path: &std::path::Path) -> Result<Codebook> {
    let ck = crate::checkpoint::Checkpoint::load(path)?;
    let (shape, data) = ck.get("codebook.centroids")?;
    let (k, dim) = match shape[..] {
        [k, d] => (k, d),
        _ => {
            return Err(Error::Checkpoint(format!(
                "{}: codebook.centroids must be rank 2",
                path.display()
            )))
        }
    };
    let get = |key: &str| -> Result<usize> {
        ck.config_str(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Checkpoint(format!("{}: missing {key}", path.display())))
    };
    Ok(Codebook {
        centroids: data.clone(),
        k,
        dim,
        feature_config: (
            get("codebook.n_mels")?,
            get("codebook.frame_len")?,
            get("codebook.frame_hop")?,
        ),
    })
}
