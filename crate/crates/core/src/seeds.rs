//! Object seed selection: K confident pixels per image and their feature vectors.

use ndarray::Array2;
use rand::seq::{index, SliceRandom};
use rand::Rng;

use crate::engine::{Graph, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeedSelection {
    pub coords: Vec<(usize, usize)>,
    /// Set when no pixel cleared the threshold and every seed is the argmax.
    pub fallback: bool,
}

/// Seed feature vectors of one image, `vectors` is a `[K,D]` graph node.
#[derive(Debug, Clone)]
pub struct SeedVectors {
    pub coords: Vec<(usize, usize)>,
    pub vectors: Var,
    pub class_id: usize,
    pub image_id: usize,
    pub fallback: bool,
}

/// Picks `k` pixels with `normalized > delta`.
///
/// With at least `k` eligible pixels they are drawn without replacement.
/// With fewer, every eligible pixel is used once (in shuffled order) and the
/// remaining slots are drawn with replacement. With none, the row-major
/// first argmax is repeated `k` times and `fallback` is set.
pub fn select_seeds<R: Rng + ?Sized>(
    normalized: &Array2<f64>,
    delta: f64,
    k: usize,
    rng: &mut R,
) -> Result<SeedSelection> {
    if k == 0 {
        return Err(Error::config("number of seeds K must be at least 1"));
    }
    if normalized.is_empty() {
        return Err(Error::input("cannot select seeds from an empty map"));
    }
    let eligible: Vec<(usize, usize)> = normalized
        .indexed_iter()
        .filter(|(_, &v)| v > delta)
        .map(|(idx, _)| idx)
        .collect();

    if eligible.is_empty() {
        let mut best = (0, 0);
        for (idx, &v) in normalized.indexed_iter() {
            if v > normalized[best] {
                best = idx;
            }
        }
        return Ok(SeedSelection {
            coords: vec![best; k],
            fallback: true,
        });
    }

    let coords = if eligible.len() >= k {
        index::sample(rng, eligible.len(), k)
            .into_iter()
            .map(|i| eligible[i])
            .collect()
    } else {
        let mut all = eligible.clone();
        all.shuffle(rng);
        while all.len() < k {
            all.push(eligible[rng.gen_range(0..eligible.len())]);
        }
        all
    };
    Ok(SeedSelection {
        coords,
        fallback: false,
    })
}

/// Gathers the `[K,D]` seed vectors from a `[D,H,W]` feature node. Gradients
/// reach `features` only at the seed pixels; the coordinates are plain data.
pub fn extract_seed_vectors(g: &mut Graph, features: Var, coords: &[(usize, usize)]) -> Result<Var> {
    g.gather_spatial(features, coords)
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::engine::Tensor;

    #[test]
    fn distinct_when_enough_eligible() {
        let m = array![[0.9, 0.1], [0.8, 0.75]];
        let allowed: HashSet<_> = [(0, 0), (1, 0), (1, 1)].into_iter().collect();
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = select_seeds(&m, 0.7, 2, &mut rng).unwrap();
            assert_eq!(s.coords.len(), 2);
            assert!(s.coords.iter().all(|c| allowed.contains(c)));
            assert_ne!(s.coords[0], s.coords[1]);
            assert!(!s.fallback);
        }
    }

    #[test]
    fn fills_with_replacement() {
        let m = array![[0.9, 0.1], [0.8, 0.75]];
        let allowed: HashSet<_> = [(0, 0), (1, 0), (1, 1)].into_iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = select_seeds(&m, 0.7, 5, &mut rng).unwrap();
        assert_eq!(s.coords.len(), 5);
        assert!(s.coords.iter().all(|c| allowed.contains(c)));
        let distinct: HashSet<_> = s.coords.iter().collect();
        assert_eq!(distinct.len(), 3, "every eligible pixel is used");
        assert!(!s.fallback);
    }

    #[test]
    fn falls_back_to_argmax() {
        let m = array![[0.3, 0.6], [0.2, 0.1]];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = select_seeds(&m, 0.7, 5, &mut rng).unwrap();
        assert_eq!(s.coords, vec![(0, 1); 5]);
        assert!(s.fallback);
    }

    #[test]
    fn zero_k_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            select_seeds(&array![[1.0]], 0.5, 0, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn reproducible_with_same_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let m = Array2::from_shape_fn((16, 16), |_| rng.gen_range(0.0..1.0));
        let a = select_seeds(&m, 0.7, 10, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = select_seeds(&m, 0.7, 10, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        for &(r, c) in &a.coords {
            assert!(m[[r, c]] > 0.7);
        }
    }

    #[test]
    fn extraction_examples() {
        let (d, h, w) = (3, 4, 5);
        let data: Vec<f64> = (0..d * h * w)
            .map(|i| {
                let (r, c) = ((i / w) % h, i % w);
                (10 * r + c) as f64
            })
            .collect();
        let f = Tensor::new(&[d, h, w], data).unwrap().with_grad();
        let mut g = Graph::new();
        let fv = g.leaf(&f);
        let v = extract_seed_vectors(&mut g, fv, &[(1, 2)]).unwrap();
        assert_eq!(g.value(v).data(), &[12.0, 12.0, 12.0]);

        let v = extract_seed_vectors(&mut g, fv, &[(0, 0), (3, 4)]).unwrap();
        assert_eq!(g.value(v).data(), &[0.0, 0.0, 0.0, 34.0, 34.0, 34.0]);
        let s = g.sum(v).unwrap();
        g.backward(s).unwrap();
        let grad = g.grad(fv).unwrap();
        for ch in 0..d {
            for r in 0..h {
                for c in 0..w {
                    let want = if (r, c) == (0, 0) || (r, c) == (3, 4) { 1.0 } else { 0.0 };
                    assert_eq!(grad[(ch * h + r) * w + c], want);
                }
            }
        }
        assert!(matches!(
            extract_seed_vectors(&mut g, fv, &[(4, 0)]),
            Err(Error::Bounds { .. })
        ));
    }

    proptest::proptest! {
        #[test]
        fn always_k_coords_and_eligible_or_fallback(
            vals in proptest::collection::vec(0.0f64..1.0, 36),
            k in 1usize..40,
            seed in 0u64..1000,
        ) {
            let m = Array2::from_shape_vec((6, 6), vals).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = select_seeds(&m, 0.7, k, &mut rng).unwrap();
            proptest::prop_assert_eq!(s.coords.len(), k);
            if s.fallback {
                proptest::prop_assert!(m.iter().all(|&v| v <= 0.7));
            } else {
                proptest::prop_assert!(s.coords.iter().all(|&(r, c)| m[[r, c]] > 0.7));
            }
        }
    }
}
