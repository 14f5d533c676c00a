use std::collections::BTreeMap;
use std::fmt::Debug;

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClusterScores {
    pub silhouette: f64,
    pub davies_bouldin: f64,
    pub calinski_harabasz: f64,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    sq_dist(a, b).sqrt()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn centroid(points: &[&[f64]]) -> Vec<f64> {
    let mut c = vec![0.0; points[0].len()];
    for p in points {
        c.iter_mut().zip(p.iter()).for_each(|(ci, x)| *ci += x);
    }
    c.iter_mut().for_each(|ci| *ci /= points.len() as f64);
    c
}

/// Silhouette (mean over points), Davies-Bouldin and Calinski-Harabasz under
/// Euclidean distance. Needs at least two clusters and no singleton cluster.
/// Points with `a = b = 0` score 0; zero within-cluster dispersion gives
/// Calinski-Harabasz 1; coincident centroids are ignored by Davies-Bouldin.
pub fn clustering_scores<L: Ord + Clone + Debug>(points: &[Vec<f64>], labels: &[L]) -> Result<ClusterScores> {
    if points.len() != labels.len() {
        return Err(Error::Shape(format!("{} points but {} labels", points.len(), labels.len())));
    }
    let mut groups: BTreeMap<&L, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    if groups.len() < 2 {
        return Err(Error::Metric(format!(
            "clustering scores need at least 2 clusters, got {}",
            groups.keys().map(|l| format!("{l:?}")).collect::<Vec<_>>().join(", ")
        )));
    }
    if let Some((l, _)) = groups.iter().find(|(_, m)| m.len() < 2) {
        return Err(Error::Metric(format!("cluster {l:?} has a single member")));
    }
    let d = points[0].len();
    if let Some(p) = points.iter().find(|p| p.len() != d) {
        return Err(Error::Shape(format!("point of length {} among length {d}", p.len())));
    }
    let members: Vec<&Vec<usize>> = groups.values().collect();
    let k = members.len();
    let n = points.len();
    let centroids: Vec<Vec<f64>> = members
        .iter()
        .map(|m| centroid(&m.iter().map(|&i| points[i].as_slice()).collect::<Vec<_>>()))
        .collect();

    let mut cluster_of = vec![0; n];
    for (c, m) in members.iter().enumerate() {
        for &i in m.iter() {
            cluster_of[i] = c;
        }
    }
    let mut sil = 0.0;
    for i in 0..n {
        let mut sums = vec![0.0; k];
        for j in 0..n {
            if j != i {
                sums[cluster_of[j]] += dist(&points[i], &points[j]);
            }
        }
        let own = cluster_of[i];
        let a = sums[own] / (members[own].len() - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own)
            .map(|c| sums[c] / members[c].len() as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        sil += if denom == 0.0 { 0.0 } else { (b - a) / denom };
    }
    let silhouette = sil / n as f64;

    let scatter: Vec<f64> = members
        .iter()
        .zip(&centroids)
        .map(|(m, c)| m.iter().map(|&i| dist(&points[i], c)).sum::<f64>() / m.len() as f64)
        .collect();
    let mut db = 0.0;
    for i in 0..k {
        let mut worst: f64 = 0.0;
        for j in 0..k {
            let dc = dist(&centroids[i], &centroids[j]);
            if j != i && dc > 0.0 {
                worst = worst.max((scatter[i] + scatter[j]) / dc);
            }
        }
        db += worst;
    }
    let davies_bouldin = db / k as f64;

    let overall = centroid(&points.iter().map(Vec::as_slice).collect::<Vec<_>>());
    let between: f64 = members
        .iter()
        .zip(&centroids)
        .map(|(m, c)| m.len() as f64 * sq_dist(c, &overall))
        .sum();
    let within: f64 = (0..n).map(|i| sq_dist(&points[i], &centroids[cluster_of[i]])).sum();
    let calinski_harabasz = if within == 0.0 {
        1.0
    } else {
        between * (n - k) as f64 / (within * (k - 1) as f64)
    };

    Ok(ClusterScores {
        silhouette,
        davies_bouldin,
        calinski_harabasz,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_silhouette(points: &[Vec<f64>], labels: &[u8]) -> f64 {
        let n = points.len();
        let mut total = 0.0;
        for i in 0..n {
            let mean_to = |l: u8| {
                let others: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == l).collect();
                others.iter().map(|&j| dist(&points[i], &points[j])).sum::<f64>() / others.len() as f64
            };
            let a = mean_to(labels[i]);
            let b = [0u8, 1, 2].iter().filter(|&&l| l != labels[i] && labels.contains(&l)).map(|&l| mean_to(l)).fold(f64::INFINITY, f64::min);
            total += (b - a) / a.max(b);
        }
        total / n as f64
    }

    fn eight() -> (Vec<Vec<f64>>, Vec<u8>) {
        let points = vec![
            vec![0.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![5.0, 5.0],
            vec![6.0, 5.0],
            vec![5.0, 7.0],
            vec![0.0, 9.0],
            vec![1.0, 8.0],
        ];
        (points, vec![0, 0, 0, 1, 1, 1, 2, 2])
    }

    #[test]
    fn eight_points_against_brute_force() {
        let (p, l) = eight();
        let s = clustering_scores(&p, &l).unwrap();
        assert!((s.silhouette - brute_silhouette(&p, &l)).abs() < 1e-12);

        // Calinski-Harabasz from the trace formulas.
        let cents: [[f64; 2]; 3] = [[1.0 / 3.0, 1.0 / 3.0], [16.0 / 3.0, 17.0 / 3.0], [0.5, 8.5]];
        let all: [f64; 2] = [18.0 / 8.0, 35.0 / 8.0];
        let sizes = [3.0, 3.0, 2.0];
        let b: f64 = (0..3).map(|c| sizes[c] * ((cents[c][0] - all[0]).powi(2) + (cents[c][1] - all[1]).powi(2))).sum();
        let w: f64 = p.iter().zip(&l).map(|(x, &c)| (x[0] - cents[c as usize][0]).powi(2) + (x[1] - cents[c as usize][1]).powi(2)).sum();
        assert!((s.calinski_harabasz - b * 5.0 / (w * 2.0)).abs() < 1e-9);

        let scat: Vec<f64> = (0..3)
            .map(|c| {
                let m: Vec<&Vec<f64>> = p.iter().zip(&l).filter(|(_, &x)| x as usize == c).map(|(x, _)| x).collect();
                m.iter().map(|x| ((x[0] - cents[c][0]).powi(2) + (x[1] - cents[c][1]).powi(2)).sqrt()).sum::<f64>() / m.len() as f64
            })
            .collect();
        let db: f64 = (0..3)
            .map(|i| {
                (0..3)
                    .filter(|&j| j != i)
                    .map(|j| (scat[i] + scat[j]) / ((cents[i][0] - cents[j][0]).powi(2) + (cents[i][1] - cents[j][1]).powi(2)).sqrt())
                    .fold(0.0, f64::max)
            })
            .sum::<f64>()
            / 3.0;
        assert!((s.davies_bouldin - db).abs() < 1e-12);
    }

    #[test]
    fn separated_clusters_beat_mixed_ones() {
        let (p, l) = eight();
        let good = clustering_scores(&p, &l).unwrap();
        let bad = clustering_scores(&p, &[0, 1, 2, 0, 1, 2, 0, 1]).unwrap();
        assert!(good.silhouette > bad.silhouette);
        assert!(good.davies_bouldin < bad.davies_bouldin);
        assert!(good.calinski_harabasz > bad.calinski_harabasz);
        assert!((-1.0..=1.0).contains(&good.silhouette) && good.davies_bouldin >= 0.0);
    }

    #[test]
    fn degenerate_inputs() {
        let p = vec![vec![0.0], vec![0.0], vec![1.0], vec![1.0]];
        let s = clustering_scores(&p, &["a", "a", "b", "b"]).unwrap();
        assert_eq!(s.silhouette, 1.0);
        assert_eq!(s.davies_bouldin, 0.0);
        assert_eq!(s.calinski_harabasz, 1.0);
        let same = clustering_scores(&vec![vec![1.0]; 4], &["a", "a", "b", "b"]).unwrap();
        assert_eq!(same.silhouette, 0.0);

        match clustering_scores(&p, &["a", "a", "a", "a"]) {
            Err(Error::Metric(m)) => assert!(m.contains("\"a\""), "{m}"),
            other => panic!("{other:?}"),
        }
        match clustering_scores(&p, &["a", "a", "a", "lonely"]) {
            Err(Error::Metric(m)) => assert!(m.contains("lonely"), "{m}"),
            other => panic!("{other:?}"),
        }
        assert!(clustering_scores(&p, &["a", "b"]).is_err());
    }
}
