use diffrate::autograd::{Tape, Tensor};
use diffrate::ddp::{alpha, candidates, hard_mask, token_probs, BoundRate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Dirichlet, Distribution};

fn pi_and_alpha(rho: &[f64]) -> (Vec<f64>, f64) {
    let mut tape = Tape::new();
    let r = tape.constant(Tensor::vector(rho.to_vec())).unwrap();
    let pi = token_probs(&mut tape, r).unwrap();
    let a = alpha(&mut tape, r).unwrap();
    (tape.value(pi).data().to_vec(), tape.item(a))
}

/// Ones followed only by zeros.
fn is_prefix(mask: &[f64]) -> bool {
    let kept = mask.iter().take_while(|&&m| m == 1.0).count();
    mask[kept..].iter().all(|&m| m == 0.0)
}

/// Checks `draws` random simplex points; panics on the first violation.
pub fn simplex_draws(draws: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for draw in 0..draws {
        let n = rng.gen_range(2..=48);
        // Mix flat and peaked draws so both small and large rates occur.
        let conc = if draw % 2 == 0 { 1.0 } else { 0.1 };
        let rho: Vec<f64> = Dirichlet::new(&vec![conc; n]).unwrap().sample(&mut rng);
        let (pi, a) = pi_and_alpha(&rho);
        assert_eq!(pi[0], 0.0, "draw {draw}");
        assert!(pi.windows(2).all(|w| w[0] <= w[1]), "draw {draw}: {pi:?}");
        assert!(pi[n - 1] <= 1.0 + 1e-12);
        // π_k is the mass of the k largest candidates.
        for k in 0..n {
            let tail: f64 = rho[n - k..].iter().sum();
            assert!((pi[k] - tail).abs() <= 1e-12);
        }
        let mask = hard_mask(&pi, a);
        assert!(is_prefix(&mask), "draw {draw}: {mask:?}");
        assert_eq!(mask[0], 1.0, "class token slot is always kept");
    }
}

/// Every one-hot rate for `N ≤ max_n` gives its exact rate and kept count.
pub fn one_hot(max_n: usize) {
    for n in 2..=max_n {
        let c = candidates(n);
        for j in 1..=n {
            let mut logits = vec![-1e4; n];
            logits[j - 1] = 0.0;
            let mut tape = Tape::new();
            let b = BoundRate::bind(&mut tape, &logits, false).unwrap();
            assert_eq!(tape.item(b.alpha), (j - 1) as f64 / n as f64);
            assert_eq!(c[j - 1], (j - 1) as f64 / n as f64);
            let mask = tape.value(b.mask).data().to_vec();
            assert!(is_prefix(&mask));
            assert_eq!(b.kept, n - j + 1, "N={n} j={j}");
        }
    }
}
