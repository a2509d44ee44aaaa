use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::lexer::SyntaxType;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SampleMode {
    Random,
    SyntaxGuided,
}

/// Target positions revealed to the second decoding pass. Positions are
/// 0-based, sorted and distinct.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlanceSet {
    pub budget: usize,
    pub positions: Vec<usize>,
    /// Keyword, identifier and operator picks made under their quotas.
    pub keywords: usize,
    pub identifiers: usize,
    pub operators: usize,
    pub mode: SampleMode,
}

impl GlanceSet {
    pub fn empty(mode: SampleMode) -> Self {
        Self { budget: 0, positions: Vec::new(), keywords: 0, identifiers: 0, operators: 0, mode }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn contains(&self, pos: usize) -> bool {
        self.positions.binary_search(&pos).is_ok()
    }
}

pub fn hamming_distance(y: &[u32], y_hat: &[u32]) -> Result<usize, TrainError> {
    if y.len() != y_hat.len() {
        return Err(TrainError::LengthMismatch { gold: y.len(), predicted: y_hat.len() });
    }
    Ok(y.iter().zip(y_hat).filter(|(a, b)| a != b).count())
}

/// `N = floor(lambda * dis)`, never more than the target length. The small
/// epsilon keeps products such as `0.29 * 100` from flooring one short.
pub fn glance_budget(lambda: f64, dis: usize, len: usize) -> usize {
    ((lambda * dis as f64 + 1e-9).floor().max(0.0) as usize).min(len)
}

/// Hybrid syntax-guided glance sampling.
pub fn glancing_sample<R: Rng + ?Sized>(
    y: &[u32],
    y_hat: &[u32],
    types: &[SyntaxType],
    lambda: f64,
    p: f64,
    rng: &mut R,
) -> Result<GlanceSet, TrainError> {
    let dis = hamming_distance(y, y_hat)?;
    if types.len() != y.len() {
        return Err(TrainError::LengthMismatch { gold: y.len(), predicted: types.len() });
    }
    let guided = rng.random::<f64>() < p;
    let mode = if guided { SampleMode::SyntaxGuided } else { SampleMode::Random };
    let n = glance_budget(lambda, dis, y.len());
    if n == 0 {
        return Ok(GlanceSet::empty(mode));
    }
    if !guided {
        let mut positions = sample(rng, y.len(), n).into_vec();
        positions.sort_unstable();
        return Ok(GlanceSet { budget: n, positions, keywords: 0, identifiers: 0, operators: 0, mode });
    }

    let mut taken = vec![false; y.len()];
    let mut picks = [0usize; 3];
    let classes = [
        (SyntaxType::Keyword, n / 2),
        (SyntaxType::Identifier, n / 4),
        (SyntaxType::Operator, n / 4),
    ];
    for (k, &(class, bound)) in classes.iter().enumerate() {
        let quota = rng.random_range(0..=bound);
        let avail: Vec<usize> = (0..y.len()).filter(|&i| types[i] == class).collect();
        let count = quota.min(avail.len());
        for j in sample(rng, avail.len(), count) {
            taken[avail[j]] = true;
        }
        picks[k] = count;
    }
    let rest: Vec<usize> = (0..y.len()).filter(|&i| !taken[i]).collect();
    let fill = n - picks.iter().sum::<usize>();
    for j in sample(rng, rest.len(), fill.min(rest.len())) {
        taken[rest[j]] = true;
    }
    let positions = (0..y.len()).filter(|&i| taken[i]).collect();
    Ok(GlanceSet {
        budget: n,
        positions,
        keywords: picks[0],
        identifiers: picks[1],
        operators: picks[2],
        mode,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    use SyntaxType::*;

    #[test]
    fn hamming_cases() {
        assert_eq!(hamming_distance(&[1, 2, 3], &[1, 2, 3]).unwrap(), 0);
        assert_eq!(hamming_distance(&[1, 2, 3], &[7, 8, 9]).unwrap(), 3);
        assert_eq!(hamming_distance(&[1, 2, 3, 4], &[1, 8, 3, 9]).unwrap(), 2);
        assert!(matches!(hamming_distance(&[1], &[1, 2]), Err(TrainError::LengthMismatch { .. })));
    }

    #[test]
    fn budget_floor() {
        assert_eq!(glance_budget(0.3, 10, 10), 3);
        assert_eq!(glance_budget(0.3, 3, 10), 0);
        assert_eq!(glance_budget(0.29, 100, 100), 29);
        assert_eq!(glance_budget(2.0, 5, 6), 6);
    }

    #[test]
    fn perfect_first_pass_glances_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = [4, 5, 6, 7];
        let g = glancing_sample(&y, &y, &[Keyword; 4], 0.3, 1.0, &mut rng).unwrap();
        assert!(g.is_empty());
        assert_eq!(g.budget, 0);
    }

    #[test]
    fn ten_errors_glance_three() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y: Vec<u32> = (10..20).collect();
        let y_hat = vec![0u32; 10];
        for p in [0.0, 1.0] {
            let g = glancing_sample(&y, &y_hat, &[Identifier; 10], 0.3, p, &mut rng).unwrap();
            assert_eq!(g.budget, 3);
            assert_eq!(g.len(), 3);
        }
    }

    #[test]
    fn shortfall_is_filled_uniformly() {
        // One keyword available, never enough for identifiers/operators.
        let types = [Keyword, Separator, Separator, Literal, Literal, Separator, Other, Other];
        let y: Vec<u32> = (0..8).collect();
        let y_hat = vec![99u32; 8];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let g = glancing_sample(&y, &y_hat, &types, 0.5, 1.0, &mut rng).unwrap();
            assert_eq!(g.budget, 4);
            assert_eq!(g.len(), 4);
            assert!(g.keywords <= 1 && g.identifiers == 0 && g.operators == 0);
        }
    }

    #[test]
    fn uniform_at_p_zero_chi_square() {
        let types = [Keyword, Identifier, Operator, Identifier, Separator, Literal, Keyword, Other, Identifier, Operator];
        let y: Vec<u32> = (0..10).collect();
        let y_hat = vec![50u32; 10];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let draws = 100_000;
        let mut freq = [0u64; 10];
        for _ in 0..draws {
            for p in glancing_sample(&y, &y_hat, &types, 0.3, 0.0, &mut rng).unwrap().positions {
                freq[p] += 1;
            }
        }
        let expected = draws as f64 * 3.0 / 10.0;
        let stat: f64 = freq.iter().map(|&f| (f as f64 - expected).powi(2) / expected).sum();
        let critical = ChiSquared::new(9.0).unwrap().inverse_cdf(0.99);
        assert!(stat < critical, "chi-square {stat} >= {critical}");
    }

    fn stype() -> impl Strategy<Value = SyntaxType> {
        prop::sample::select(SyntaxType::ALL.to_vec())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(2000))]
        #[test]
        fn sampler_laws(
            rows in prop::collection::vec((0u32..6, 0u32..6, stype()), 1..33),
            lambda in 0.0f64..1.5,
            p in prop::sample::select(vec![0.0, 0.3, 1.0]),
            seed in any::<u64>(),
        ) {
            let y: Vec<u32> = rows.iter().map(|r| r.0).collect();
            let y_hat: Vec<u32> = rows.iter().map(|r| r.1).collect();
            let t: Vec<SyntaxType> = rows.iter().map(|r| r.2).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = glancing_sample(&y, &y_hat, &t, lambda, p, &mut rng).unwrap();
            let dis = hamming_distance(&y, &y_hat).unwrap();
            let n = glance_budget(lambda, dis, y.len());
            prop_assert_eq!(g.budget, n);
            prop_assert!(g.len() <= n);
            prop_assert!(g.positions.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(g.positions.iter().all(|&i| i < y.len()));
            prop_assert!(g.keywords <= n / 2 && g.identifiers <= n / 4 && g.operators <= n / 4);
            prop_assert!(g.keywords + g.identifiers + g.operators <= n);
            if g.mode == SampleMode::Random {
                prop_assert_eq!(g.keywords + g.identifiers + g.operators, 0);
            }
        }
    }
}
