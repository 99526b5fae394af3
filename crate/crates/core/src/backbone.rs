//! Reference point-cloud encoder: farthest point sampling for centers,
//! k-nearest grouping, a shared MLP over center-relative coordinates,
//! max-pooling per group, and a per-center projection to `C3d` features.
//!
//! Anything that turns a cloud into `(centers, features)` can stand in for
//! this encoder; downstream modules only see [`EncodedCloud`].

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::ndcompute::{init_mlp, lit, mlp_forward, ParamSet, Real, Tape, Tensor, Var};

pub const PREFIX: &str = "encoder";

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    /// Widths of the shared per-point MLP after the 3 input coordinates.
    pub point_dims: Vec<usize>,
    pub centers: usize,
    pub k: usize,
    /// Output feature width `C3d`.
    pub channels: usize,
    pub start_index: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            point_dims: vec![64, 128],
            centers: 64,
            k: 16,
            channels: 256,
            start_index: 0,
        }
    }
}

impl EncoderConfig {
    pub fn desk() -> Self {
        Self {
            centers: 32,
            ..Self::default()
        }
    }

    fn point_mlp_dims(&self) -> Vec<usize> {
        std::iter::once(3).chain(self.point_dims.iter().copied()).collect()
    }

    fn center_mlp_dims(&self) -> Vec<usize> {
        vec![*self.point_dims.last().unwrap_or(&3), self.channels]
    }

    pub fn validate(&self) -> Result<()> {
        if self.point_dims.is_empty() || self.centers == 0 || self.k == 0 || self.channels == 0 {
            return Err(Error::config("encoder widths, centers and k must be positive"));
        }
        Ok(())
    }
}

/// Centers in the canonical frame and their features `[n × C3d]`.
#[derive(Clone, Debug)]
pub struct EncodedCloud {
    pub centers: Vec<Vec3>,
    pub center_indices: Vec<usize>,
    pub features: Var,
}

fn sq_dist(a: &Vec3, b: &Vec3) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Greedy max-min subset selection starting at `start`. Ties go to the
/// lowest index.
pub fn farthest_point_sample(points: &[Vec3], n: usize, start: usize) -> Result<Vec<usize>> {
    if n == 0 || n > points.len() {
        return Err(Error::contract(format!("cannot sample {n} of {} points", points.len())));
    }
    if start >= points.len() {
        return Err(Error::contract(format!("start index {start} out of range")));
    }
    let mut picked = Vec::with_capacity(n);
    let mut min_d = vec![f64::INFINITY; points.len()];
    let mut current = start;
    for _ in 0..n {
        picked.push(current);
        let c = points[current];
        let mut best = (f64::NEG_INFINITY, 0);
        for (i, p) in points.iter().enumerate() {
            let d = sq_dist(p, &c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best.0 {
                best = (min_d[i], i);
            }
        }
        current = best.1;
    }
    Ok(picked)
}

/// Indices of the `k` points nearest to `center`, nearest first; equal
/// distances keep index order.
pub fn k_nearest(points: &[Vec3], center: &Vec3, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > points.len() {
        return Err(Error::contract(format!("k = {k} with {} points", points.len())));
    }
    let mut order: Vec<(f64, usize)> = points.iter().enumerate().map(|(i, p)| (sq_dist(p, center), i)).collect();
    order.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    order.truncate(k);
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(order.into_iter().map(|(_, i)| i).collect())
}

pub fn init_params<T: Real>(params: &mut ParamSet<T>, cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Result<()> {
    cfg.validate()?;
    init_mlp(params, &format!("{PREFIX}.point_mlp"), &cfg.point_mlp_dims(), rng)?;
    init_mlp(params, &format!("{PREFIX}.center_mlp"), &cfg.center_mlp_dims(), rng)
}

/// Encodes a cloud into `n` centers with `C3d` features each.
pub fn encode<T: Real>(
    tape: &mut Tape<T>,
    params: &ParamSet<T>,
    cfg: &EncoderConfig,
    points: &[Vec3],
) -> Result<EncodedCloud> {
    cfg.validate()?;
    if cfg.k > points.len() {
        return Err(Error::contract(format!("k = {} exceeds {} points", cfg.k, points.len())));
    }
    let center_indices = farthest_point_sample(points, cfg.centers.min(points.len()), cfg.start_index)?;
    let centers: Vec<Vec3> = center_indices.iter().map(|&i| points[i]).collect();

    let mut rel = Vec::with_capacity(centers.len() * cfg.k * 3);
    for c in &centers {
        for j in k_nearest(points, c, cfg.k)? {
            let p = points[j];
            rel.extend([p[0] - c[0], p[1] - c[1], p[2] - c[2]].map(lit::<T>));
        }
    }
    let grouped = tape.leaf(Tensor::new(vec![centers.len() * cfg.k, 3], rel)?);
    let per_point = mlp_forward(tape, params, &format!("{PREFIX}.point_mlp"), &cfg.point_mlp_dims(), grouped)?;
    let per_point = tape.relu(per_point);
    let groups: Vec<Vec<usize>> = (0..centers.len()).map(|i| (i * cfg.k..(i + 1) * cfg.k).collect()).collect();
    let pooled = tape.group_max(per_point, &groups)?;
    let features = mlp_forward(tape, params, &format!("{PREFIX}.center_mlp"), &cfg.center_mlp_dims(), pooled)?;
    Ok(EncodedCloud {
        centers,
        center_indices,
        features,
    })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};

    use super::*;
    use crate::ndcompute::{grad_check, GradCheckConfig};

    /// Quadratic-time FPS written from the definition: each step scans all
    /// candidates and all picked points.
    fn fps_oracle(points: &[Vec3], n: usize, start: usize) -> Vec<usize> {
        let mut picked = vec![start];
        while picked.len() < n {
            let mut best: Option<(f64, usize)> = None;
            for (i, p) in points.iter().enumerate() {
                let d = picked.iter().map(|&j| sq_dist(p, &points[j])).fold(f64::INFINITY, f64::min);
                if best.map_or(true, |(bd, _)| d > bd) {
                    best = Some((d, i));
                }
            }
            picked.push(best.unwrap().1);
        }
        picked
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
        (0..n)
            .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect()
    }

    #[test]
    fn fps_basic_cases() {
        let sq = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0]];
        assert_eq!(farthest_point_sample(&sq, 2, 0).unwrap(), vec![0, 3]);
        let all = farthest_point_sample(&sq, 4, 0).unwrap();
        let mut sorted = all.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2, 3]);
        assert_eq!(all, farthest_point_sample(&sq, 4, 0).unwrap());
        assert!(matches!(farthest_point_sample(&sq, 5, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn fps_matches_oracle_up_to_128_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for n_pts in (1..=128).step_by(7) {
            let pts = random_points(&mut rng, n_pts);
            let n = rng.gen_range(1..=n_pts);
            let start = rng.gen_range(0..n_pts);
            assert_eq!(farthest_point_sample(&pts, n, start).unwrap(), fps_oracle(&pts, n, start));
        }
        // integer grid with many ties
        let grid: Vec<Vec3> = (0..64).map(|i| [(i % 4) as f64, ((i / 4) % 4) as f64, (i / 16) as f64]).collect();
        assert_eq!(farthest_point_sample(&grid, 20, 0).unwrap(), fps_oracle(&grid, 20, 0));
    }

    #[test]
    fn knn_orders_by_distance() {
        let pts = [[0.0, 0.0, 0.0], [3.0, 0.0, 0.0], [1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]];
        assert_eq!(k_nearest(&pts, &[0.0; 3], 3).unwrap(), vec![0, 2, 3]);
        assert!(k_nearest(&pts, &[0.0; 3], 5).is_err());
    }

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            point_dims: vec![8, 12],
            centers: 6,
            k: 4,
            channels: 10,
            start_index: 0,
        }
    }

    #[test]
    fn output_shape_and_k_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = small_cfg();
        let mut params = ParamSet::<f32>::new();
        init_params(&mut params, &cfg, &mut rng).unwrap();
        let pts = random_points(&mut rng, 40);
        let mut tape = Tape::new();
        let enc = encode(&mut tape, &params, &cfg, &pts).unwrap();
        assert_eq!(tape.shape(enc.features), &[6, 10]);
        assert!(tape.value(enc.features).all_finite());
        let mut tape = Tape::new();
        assert!(matches!(encode(&mut tape, &params, &cfg, &pts[..3]), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_final_layer_gives_zero_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = small_cfg();
        let mut params = ParamSet::<f64>::new();
        init_params(&mut params, &cfg, &mut rng).unwrap();
        let w = params.get_mut("encoder.center_mlp.0.weight").unwrap();
        w.data_mut().iter_mut().for_each(|v| *v = 0.0);
        let mut tape = Tape::new();
        let enc = encode(&mut tape, &params, &cfg, &random_points(&mut rng, 30)).unwrap();
        assert!(tape.value(enc.features).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn permutation_of_input_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = small_cfg();
        let mut params = ParamSet::<f64>::new();
        init_params(&mut params, &cfg, &mut rng).unwrap();
        let pts = random_points(&mut rng, 50);
        let mut perm: Vec<usize> = (0..50).collect();
        for i in (1..50).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let shuffled: Vec<Vec3> = perm.iter().map(|&i| pts[i]).collect();
        // same physical start point in both orders
        let start_new = perm.iter().position(|&i| i == 0).unwrap();

        let mut t1 = Tape::new();
        let e1 = encode(&mut t1, &params, &cfg, &pts).unwrap();
        let cfg2 = EncoderConfig {
            start_index: start_new,
            ..cfg.clone()
        };
        let mut t2 = Tape::new();
        let e2 = encode(&mut t2, &params, &cfg2, &shuffled).unwrap();

        // match centers canonically by coordinates
        for (i, c) in e1.centers.iter().enumerate() {
            let j = e2.centers.iter().position(|d| d == c).expect("same centers");
            for ch in 0..cfg.channels {
                let (a, b) = (t1.value(e1.features).get(&[i, ch]), t2.value(e2.features).get(&[j, ch]));
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn encoder_gradients_pass_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = small_cfg();
        let mut params = ParamSet::<f64>::new();
        init_params(&mut params, &cfg, &mut rng).unwrap();
        // zero biases put each group's own center exactly on the rectifier kink
        for (name, t) in params.iter_mut() {
            if name.ends_with(".bias") {
                t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.3..0.3));
            }
        }
        let pts = random_points(&mut rng, 30);
        let head: Tensor<f64> = crate::ndcompute::uniform_tensor(&[6, 10], 1.0, &mut rng);
        let f = |tape: &mut Tape<f64>, p: &ParamSet<f64>| {
            let enc = encode(tape, p, &cfg, &pts)?;
            let h = tape.leaf(head.clone());
            let prod = tape.mul(enc.features, h)?;
            Ok(tape.sum_all(prod))
        };
        let report = grad_check(f, &params, &GradCheckConfig::default()).unwrap();
        assert!(report.max_rel_err < 1e-5, "{report:?}");
    }
}
