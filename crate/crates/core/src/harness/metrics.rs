use serde::{Deserialize, Serialize};

use super::HarnessError;

/// Upper bound returned by [`si_sdr`] for (near) perfect estimates.
pub const SI_SDR_CAP: f64 = 60.0;

/// Scale-invariant SDR in dB: `10 log10(‖αs‖² / ‖αs − ŝ‖²)` with
/// `α = ⟨ŝ, s⟩ / ‖s‖²`, capped at [`SI_SDR_CAP`].
pub fn si_sdr(estimate: &[f64], reference: &[f64]) -> Result<f64, HarnessError> {
    if estimate.len() != reference.len() {
        return Err(HarnessError::Length { estimate: estimate.len(), reference: reference.len() });
    }
    let ss: f64 = reference.iter().map(|v| v * v).sum();
    if !(ss > 0.0) {
        return Err(HarnessError::ZeroReference);
    }
    let alpha = estimate.iter().zip(reference).map(|(e, s)| e * s).sum::<f64>() / ss;
    let target = alpha * alpha * ss;
    let err: f64 = estimate.iter().zip(reference).map(|(e, s)| (alpha * s - e).powi(2)).sum();
    if err <= target * 10f64.powf(-SI_SDR_CAP / 10.0) {
        return Ok(SI_SDR_CAP);
    }
    Ok((10.0 * (target / err).log10()).min(SI_SDR_CAP))
}

/// Assignment of references to estimates maximizing the summed score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    /// `permutation[k]` is the estimate assigned to reference `k`.
    pub permutation: Vec<usize>,
    pub scores: Vec<f64>,
    pub total: f64,
}

/// Hungarian assignment on `scores[k][j]` (reference `k`, estimate `j`),
/// maximizing the total. Needs at least as many estimates as references.
/// Among equal-total assignments the one found first scanning estimates in
/// index order wins.
pub fn assign_max(scores: &[Vec<f64>]) -> Result<Alignment, HarnessError> {
    let n = scores.len();
    let m = scores.first().map_or(0, Vec::len);
    if scores.iter().any(|r| r.len() != m) {
        return Err(HarnessError::Shape("ragged score matrix".into()));
    }
    if m < n {
        return Err(HarnessError::TooFewEstimates { estimates: m, references: n });
    }
    if scores.iter().flatten().any(|v| !v.is_finite()) {
        return Err(HarnessError::Shape("non-finite score".into()));
    }
    // Shortest augmenting path with potentials, 1-based with a virtual column 0.
    let cost = |i: usize, j: usize| -scores[i - 1][j - 1];
    let (mut u, mut v) = (vec![0.0; n + 1], vec![0.0; m + 1]);
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut permutation = vec![0; n];
    for j in 1..=m {
        if owner[j] != 0 {
            permutation[owner[j] - 1] = j - 1;
        }
    }
    let scores: Vec<f64> = permutation.iter().enumerate().map(|(k, &j)| scores[k][j]).collect();
    let total = scores.iter().sum();
    Ok(Alignment { permutation, scores, total })
}

/// Indices of the `k` estimates with the highest energy, in index order.
pub fn top_k_by_power(estimates: &[Vec<f64>], k: usize) -> Result<Vec<usize>, HarnessError> {
    if estimates.len() < k {
        return Err(HarnessError::TooFewEstimates { estimates: estimates.len(), references: k });
    }
    let energy = |x: &Vec<f64>| x.iter().map(|v| v * v).sum::<f64>();
    let mut idx: Vec<usize> = (0..estimates.len()).collect();
    idx.sort_by(|&a, &b| energy(&estimates[b]).total_cmp(&energy(&estimates[a])).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    Ok(idx)
}

/// Selects the `K = references.len()` most powerful estimates, then aligns
/// them to the references by SI-SDR. The permutation indexes `estimates`.
pub fn permute_align(estimates: &[Vec<f64>], references: &[Vec<f64>]) -> Result<Alignment, HarnessError> {
    let chosen = top_k_by_power(estimates, references.len())?;
    let scores = references
        .iter()
        .map(|r| chosen.iter().map(|&j| si_sdr(&estimates[j], r)).collect::<Result<Vec<_>, _>>())
        .collect::<Result<Vec<_>, _>>()?;
    let mut a = assign_max(&scores)?;
    a.permutation.iter_mut().for_each(|j| *j = chosen[*j]);
    Ok(a)
}

/// Scores of one separated scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneEval {
    pub id: String,
    /// Estimate index per reference.
    pub permutation: Vec<usize>,
    pub si_sdr: Vec<f64>,
    /// SI-SDR of the mixture reference channel against each reference.
    pub mixture_si_sdr: Vec<f64>,
    pub improvement: Vec<f64>,
}

pub fn evaluate_scene(
    id: &str,
    estimates: &[Vec<f64>],
    references: &[Vec<f64>],
    mixture: &[f64],
) -> Result<SceneEval, HarnessError> {
    let a = permute_align(estimates, references)?;
    let mixture_si_sdr = references.iter().map(|r| si_sdr(mixture, r)).collect::<Result<Vec<_>, _>>()?;
    let improvement = a.scores.iter().zip(&mixture_si_sdr).map(|(s, m)| s - m).collect();
    Ok(SceneEval { id: id.to_string(), permutation: a.permutation, si_sdr: a.scores, mixture_si_sdr, improvement })
}

/// Per-scene scores plus means over all sources of all scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenes: Vec<SceneEval>,
    pub mean_si_sdr: f64,
    pub mean_improvement: f64,
    pub mean_mixture_si_sdr: f64,
}

impl EvalReport {
    /// Sorts scenes by id and computes the means.
    pub fn new(mut scenes: Vec<SceneEval>) -> Self {
        scenes.sort_by(|a, b| a.id.cmp(&b.id));
        let mean = |get: fn(&SceneEval) -> &Vec<f64>| {
            let all: Vec<f64> = scenes.iter().flat_map(|s| get(s).iter().copied()).collect();
            if all.is_empty() {
                f64::NAN
            } else {
                all.iter().sum::<f64>() / all.len() as f64
            }
        };
        let mean_si_sdr = mean(|s| &s.si_sdr);
        let mean_improvement = mean(|s| &s.improvement);
        let mean_mixture_si_sdr = mean(|s| &s.mixture_si_sdr);
        Self { scenes, mean_si_sdr, mean_improvement, mean_mixture_si_sdr }
    }

    /// Tab-separated table, one row per (scene, source), then a `mean` row.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("scene\tsource\testimate\tsi_sdr_db\tmixture_si_sdr_db\tsi_sdr_improvement_db\n");
        for s in &self.scenes {
            for k in 0..s.si_sdr.len() {
                out.push_str(&format!(
                    "{}\t{}\t{}\t{:.4}\t{:.4}\t{:.4}\n",
                    s.id, k, s.permutation[k], s.si_sdr[k], s.mixture_si_sdr[k], s.improvement[k]
                ));
            }
        }
        out.push_str(&format!(
            "mean\t-\t-\t{:.4}\t{:.4}\t{:.4}\n",
            self.mean_si_sdr, self.mean_mixture_si_sdr, self.mean_improvement
        ));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn identical_and_scaled_estimates_hit_the_cap() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = noise(&mut rng, 500);
        assert_eq!(si_sdr(&s, &s).unwrap(), SI_SDR_CAP);
        let twice: Vec<f64> = s.iter().map(|v| 2.0 * v).collect();
        assert_eq!(si_sdr(&twice, &s).unwrap(), SI_SDR_CAP);
    }

    #[test]
    fn orthogonal_noise_at_ten_db() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = noise(&mut rng, 1000);
        let mut e = noise(&mut rng, 1000);
        // Gram-Schmidt against s, then scale to a tenth of its energy.
        let ss: f64 = s.iter().map(|v| v * v).sum();
        let p = e.iter().zip(&s).map(|(a, b)| a * b).sum::<f64>() / ss;
        e.iter_mut().zip(&s).for_each(|(a, b)| *a -= p * b);
        let ee: f64 = e.iter().map(|v| v * v).sum();
        let k = (0.1 * ss / ee).sqrt();
        let est: Vec<f64> = s.iter().zip(&e).map(|(a, b)| a + k * b).collect();
        assert!((si_sdr(&est, &s).unwrap() - 10.0).abs() < 0.01);
    }

    #[test]
    fn si_sdr_errors() {
        assert!(matches!(si_sdr(&[1.0, 2.0], &[0.0, 0.0]), Err(HarnessError::ZeroReference)));
        assert!(matches!(si_sdr(&[1.0], &[1.0, 2.0]), Err(HarnessError::Length { .. })));
    }

    fn brute_force(scores: &[Vec<f64>]) -> f64 {
        fn go(scores: &[Vec<f64>], k: usize, used: &mut Vec<bool>) -> f64 {
            if k == scores.len() {
                return 0.0;
            }
            let mut best = f64::NEG_INFINITY;
            for j in 0..used.len() {
                if !used[j] {
                    used[j] = true;
                    best = best.max(scores[k][j] + go(scores, k + 1, used));
                    used[j] = false;
                }
            }
            best
        }
        go(scores, 0, &mut vec![false; scores[0].len()])
    }

    #[test]
    fn swapped_pair_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let refs = vec![noise(&mut rng, 300), noise(&mut rng, 300)];
        let est = vec![refs[1].clone(), refs[0].clone()];
        assert_eq!(permute_align(&est, &refs).unwrap().permutation, vec![1, 0]);
        assert_eq!(permute_align(&refs, &refs).unwrap().permutation, vec![0, 1]);
    }

    #[test]
    fn three_by_three_matches_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let s: Vec<Vec<f64>> = (0..3).map(|_| noise(&mut rng, 3)).collect();
            let a = assign_max(&s).unwrap();
            assert!((a.total - brute_force(&s)).abs() < 1e-12);
        }
    }

    #[test]
    fn ties_prefer_lowest_index() {
        let a = assign_max(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(a.permutation, vec![0, 1]);
    }

    #[test]
    fn too_few_estimates() {
        let r = vec![vec![1.0; 4]; 3];
        assert!(matches!(permute_align(&r[..2], &r), Err(HarnessError::TooFewEstimates { .. })));
    }

    #[test]
    fn selection_keeps_the_loudest() {
        let est = vec![vec![0.1; 4], vec![3.0; 4], vec![0.01; 4], vec![2.0; 4]];
        assert_eq!(top_k_by_power(&est, 2).unwrap(), vec![1, 3]);
    }

    #[test]
    fn improvement_is_difference_to_mixture() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let refs = vec![noise(&mut rng, 400), noise(&mut rng, 400)];
        let mix: Vec<f64> = refs[0].iter().zip(&refs[1]).map(|(a, b)| a + b).collect();
        let e = evaluate_scene("x", &[refs[1].clone(), refs[0].clone(), vec![1e-3; 400]], &refs, &mix).unwrap();
        assert_eq!(e.permutation, vec![1, 0]);
        for k in 0..2 {
            assert_eq!(e.improvement[k], e.si_sdr[k] - e.mixture_si_sdr[k]);
            assert_eq!(e.mixture_si_sdr[k], si_sdr(&mix, &refs[k]).unwrap());
        }
    }

    #[test]
    fn report_sorts_and_averages() {
        let mk = |id: &str, v: f64| SceneEval {
            id: id.into(),
            permutation: vec![0],
            si_sdr: vec![v],
            mixture_si_sdr: vec![0.0],
            improvement: vec![v],
        };
        let r = EvalReport::new(vec![mk("b", 4.0), mk("a", 2.0)]);
        assert_eq!(r.scenes[0].id, "a");
        assert_eq!(r.mean_si_sdr, 3.0);
        assert!(r.to_tsv().ends_with("mean\t-\t-\t3.0000\t0.0000\t3.0000\n"));
    }

    proptest! {
        #[test]
        fn si_sdr_is_scale_invariant(seed in 0u64..1000, scale in 1e-3f64..1e3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = noise(&mut rng, 64);
            let e = noise(&mut rng, 64);
            let scaled: Vec<f64> = e.iter().map(|v| v * scale).collect();
            let (a, b) = (si_sdr(&e, &s).unwrap(), si_sdr(&scaled, &s).unwrap());
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn assignment_beats_every_permutation(seed in 0u64..1000, n in 1usize..=4, extra in 0usize..=2) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s: Vec<Vec<f64>> = (0..n).map(|_| noise(&mut rng, n + extra)).collect();
            let a = assign_max(&s).unwrap();
            let mut seen = a.permutation.clone();
            seen.sort_unstable();
            seen.dedup();
            prop_assert_eq!(seen.len(), n);
            prop_assert!((a.total - brute_force(&s)).abs() < 1e-12);
        }
    }
}
