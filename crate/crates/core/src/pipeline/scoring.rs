use crate::autograd::COSINE_EPS;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::model::Pyramid;

/// Per-pixel `1 - cos` between teacher and student channel vectors, each
/// stage upsampled (nearest) to `h x w`, averaged over stages. Two zero
/// vectors are at distance 0.
///
/// Returns `[n, h, w]`.
pub fn anomaly_maps<T: Scalar>(f_e: &Pyramid<Tensor<T>>, f_d: &Pyramid<Tensor<T>>, h: usize, w: usize) -> Result<Tensor<f64>> {
    let n = f_e[0].shape().first().copied().unwrap_or(0);
    let mut acc = vec![0.0f64; n * h * w];
    let eps = COSINE_EPS;
    for (e, d) in f_e.iter().zip(f_d) {
        e.expect_same_shape(d)?;
        let s = e.shape();
        if s.len() != 4 || s[0] != n {
            return Err(Error::Dimension(format!("stage features {s:?} do not match batch {n}")));
        }
        let (c, sh, sw) = (s[1], s[2], s[3]);
        if sh == 0 || sw == 0 || !h.is_multiple_of(sh) || !w.is_multiple_of(sw) || h / sh != w / sw {
            return Err(Error::Dimension(format!("stage {sh}x{sw} does not tile {h}x{w}")));
        }
        let factor = h / sh;
        let plane = sh * sw;
        let (ed, dd) = (e.data(), d.data());
        for img in 0..n {
            for site in 0..plane {
                let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
                for ch in 0..c {
                    let i = (img * c + ch) * plane + site;
                    let (x, y) = (ed[i].as_f64(), dd[i].as_f64());
                    dot += x * y;
                    na += x * x;
                    nb += y * y;
                }
                let dist = if na == 0.0 && nb == 0.0 {
                    0.0
                } else if na.sqrt() >= eps && nb.sqrt() >= eps {
                    // sqrt(na * nb) keeps identical vectors at exactly 1
                    1.0 - dot / (na * nb).sqrt()
                } else {
                    1.0 - dot / (na.sqrt().max(eps) * nb.sqrt().max(eps))
                };
                let (sy, sx) = (site / sw, site % sw);
                for y in sy * factor..(sy + 1) * factor {
                    let row = &mut acc[(img * h + y) * w..(img * h + y + 1) * w];
                    for v in &mut row[sx * factor..(sx + 1) * factor] {
                        *v += dist;
                    }
                }
            }
        }
    }
    let stages = f_e.len() as f64;
    Tensor::new(vec![n, h, w], acc.into_iter().map(|v| v / stages).collect())
}

/// Separable Gaussian blur of each `[h, w]` plane, truncated at 3 sigma,
/// with edge clamping.
pub fn gaussian_smooth(maps: &Tensor<f64>, sigma: f64) -> Result<Tensor<f64>> {
    let s = maps.shape();
    if s.len() != 3 {
        return Err(Error::Dimension(format!("smoothing expects [n, h, w], got {s:?}")));
    }
    let (n, h, w) = (s[0], s[1], s[2]);
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut out = maps.data().to_vec();
    let mut tmp = vec![0.0; h * w];
    for plane in out.chunks_mut(h * w).take(n) {
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, &g)| g * plane[y * w + clamp(x as isize + k as isize - radius, w)])
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                plane[y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, &g)| g * tmp[clamp(y as isize + k as isize - radius, h) * w + x])
                    .sum();
            }
        }
    }
    Tensor::new(s.to_vec(), out)
}

/// Pixel maps with their image- and sample-level maxima.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    /// `[p, v, h, w]`.
    pub pixel_maps: Tensor<f64>,
    /// `[p][v]`.
    pub image_scores: Vec<Vec<f64>>,
    /// `[p]`.
    pub sample_scores: Vec<f64>,
}

/// Image score is the spatial maximum; sample score the maximum over views.
pub fn aggregate_scores(pixel_maps: &Tensor<f64>, p: usize, v: usize) -> Result<ScoreSet> {
    let s = pixel_maps.shape();
    if s.len() != 3 || s[0] != p * v {
        return Err(Error::Dimension(format!("maps {s:?} are not {p} samples of {v} views")));
    }
    let plane = s[1] * s[2];
    if plane == 0 {
        return Err(Error::Dimension("empty anomaly maps".into()));
    }
    let image_scores: Vec<Vec<f64>> = (0..p)
        .map(|i| {
            (0..v)
                .map(|j| {
                    let m = &pixel_maps.data()[(i * v + j) * plane..(i * v + j + 1) * plane];
                    m.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                })
                .collect()
        })
        .collect();
    let sample_scores = image_scores
        .iter()
        .map(|views| views.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    Ok(ScoreSet {
        pixel_maps: pixel_maps.reshape(vec![p, v, s[1], s[2]])?,
        image_scores,
        sample_scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pyramid(f: impl Fn(usize, usize) -> f64) -> Pyramid<Tensor<f64>> {
        [(4, 4, 4), (8, 2, 2), (16, 1, 1)].map(|(c, h, w)| Tensor::from_fn(vec![1, c, h, w], |i| f(c, i)))
    }

    #[test]
    fn identical_features_give_zero_maps() {
        let e = pyramid(|_, i| (i as f64).sin() + 1.5);
        let m = anomaly_maps(&e, &e, 8, 8).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.0));
        let z = pyramid(|_, _| 0.0);
        assert!(anomaly_maps(&z, &z, 8, 8).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_orthogonal_stage_gives_a_third() {
        // stage 3 orthogonal everywhere, others identical
        let e = pyramid(|c, i| if c == 16 { (i == 0) as u8 as f64 } else { 1.0 });
        let d = pyramid(|c, i| if c == 16 { (i == 1) as u8 as f64 } else { 1.0 });
        let m = anomaly_maps(&e, &d, 8, 8).unwrap();
        assert!(m.data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn antiparallel_site_contributes_two() {
        let e = pyramid(|_, _| 1.0);
        let mut d = e.clone();
        // site (0, 0) of stage 1 flipped in every channel
        for ch in 0..4 {
            d[0].data_mut()[ch * 16] = -1.0;
        }
        let m = anomaly_maps(&e, &d, 8, 8).unwrap();
        let stage_factor = 2;
        for y in 0..8 {
            for x in 0..8 {
                let want = if y < stage_factor && x < stage_factor { 2.0 / 3.0 } else { 0.0 };
                assert!((m.data()[y * 8 + x] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn aggregation_examples() {
        let mut maps = Tensor::zeros(vec![5, 2, 2]);
        for (j, s) in [0.2, 0.9, 0.1, 0.3, 0.4].iter().enumerate() {
            maps.data_mut()[j * 4 + 3] = *s;
        }
        let s = aggregate_scores(&maps, 1, 5).unwrap();
        assert_eq!(s.sample_scores, vec![0.9]);
        assert_eq!(s.image_scores[0][1], 0.9);
        let z = aggregate_scores(&Tensor::zeros(vec![10, 3, 3]), 2, 5).unwrap();
        assert!(z.sample_scores.iter().chain(z.image_scores.iter().flatten()).all(|&v| v == 0.0));
        let mut one = Tensor::zeros(vec![10, 3, 3]);
        one.data_mut()[7 * 9 + 4] = 0.7;
        let s = aggregate_scores(&one, 2, 5).unwrap();
        assert_eq!(s.image_scores[1][2], 0.7);
        assert_eq!(s.sample_scores, vec![0.0, 0.7]);
        assert!(aggregate_scores(&one, 3, 5).is_err());
    }

    #[test]
    fn smoothing_preserves_constants_and_mass_centre() {
        let c = Tensor::full(vec![1, 6, 6], 0.5);
        let s = gaussian_smooth(&c, 1.0).unwrap();
        assert!(s.data().iter().all(|v| (v - 0.5).abs() < 1e-12));
        let mut spike = Tensor::zeros(vec![1, 9, 9]);
        spike.data_mut()[40] = 1.0;
        let s = gaussian_smooth(&spike, 1.0).unwrap();
        assert!((s.sum() - 1.0).abs() < 1e-12);
        assert!(s.data()[40] > s.data()[39] && s.data()[39] == s.data()[41]);
    }
}
