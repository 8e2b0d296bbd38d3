use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use slalom_core::datagen::{gen_slalom_dataset, gen_slalom_params, SlalomDatasetSpec};
use slalom_core::fitting::eff::minibatch_loss_grad;
use slalom_core::{
    eval, fit_eff, fit_fidel, fit_linear_surrogate, sample_pool_eff, sample_pool_fidel, EffHyper,
    FidelHyper, LabeledDataset, SlalomOracle, SlalomParams, TokenSeq,
};

fn random_params(m: usize, seed: u64) -> SlalomParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SlalomParams::new(
        (0..m).map(|_| rng.random_range(-2.0..2.0)).collect(),
        (0..m).map(|_| rng.random_range(-3.0..3.0)).collect(),
        0.0,
    )
    .unwrap()
}

fn random_seq(m: usize, len: usize, seed: u64) -> TokenSeq {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(0..m)).collect()
}

#[test]
fn eff_gradient_matches_central_differences() {
    let m = 6;
    let p = random_params(m, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let seqs: Vec<Vec<usize>> = (0..16)
        .map(|_| (0..3).map(|_| rng.random_range(0..m)).collect())
        .collect();
    let ys: Vec<f64> = (0..16).map(|_| rng.random_range(-2.0..2.0)).collect();
    let batch: Vec<(&[usize], f64)> = seqs.iter().map(|s| &s[..]).zip(ys).collect();
    let (_, gs, gv) = minibatch_loss_grad(&p, &batch);
    let eps = 1e-5;
    let loss = |q: &SlalomParams| minibatch_loss_grad(q, &batch).0;
    for j in 0..m {
        for (which, analytic) in [(0, gs[j]), (1, gv[j])] {
            let mut hi = p.clone();
            let mut lo = p.clone();
            let (h, l) = if which == 0 {
                (&mut hi.s[j], &mut lo.s[j])
            } else {
                (&mut hi.v[j], &mut lo.v[j])
            };
            *h += eps;
            *l -= eps;
            let numeric = (loss(&hi) - loss(&lo)) / (2.0 * eps);
            let rel = (numeric - analytic).abs() / analytic.abs().max(1e-8);
            assert!(rel < 1e-6, "param {which}/{j}: {numeric} vs {analytic}");
        }
    }
}

#[test]
fn eff_is_deterministic_per_seed() {
    let oracle = SlalomOracle(random_params(8, 3));
    let seq = random_seq(8, 20, 4);
    let h = EffHyper {
        steps: 500,
        pool_size: 500,
        ..EffHyper::default()
    };
    let pool = sample_pool_eff(&oracle, &seq, &h, 5).unwrap();
    let a = fit_eff(&pool, &h, 6).unwrap().model;
    let b = fit_eff(&pool, &h, 6).unwrap().model;
    assert_eq!(a, b);
    let c = fit_eff(&pool, &h, 7).unwrap().model;
    assert_ne!(a, c);
}

#[test]
fn fidel_objective_never_increases_and_fits_slalom_oracles() {
    let oracle = SlalomOracle(random_params(10, 8));
    let seq = random_seq(10, 30, 9);
    let h = FidelHyper {
        pool_size: 500,
        ..FidelHyper::default()
    };
    let pool = sample_pool_fidel(&oracle, &seq, &h, 10).unwrap();
    let rep = fit_fidel(&pool, &h).unwrap();
    for w in rep.objective_history.windows(2) {
        assert!(w[1] <= w[0] + 1e-9, "{:?}", rep.objective_history);
    }
    let held = sample_pool_fidel(&oracle, &seq, &h, 11).unwrap();
    assert!(rep.model.mse(&held).unwrap() < 1e-6);
    assert_eq!(
        fit_fidel(&pool, &h).unwrap().model,
        rep.model,
        "fit is deterministic"
    );
}

#[test]
fn fidel_values_are_shift_free_for_the_sequence_tokens() {
    // single-token copies pin every value down, with no shift freedom left
    let truth = random_params(4, 12);
    let oracle = SlalomOracle(truth.clone());
    let seq: TokenSeq = vec![0, 1, 2, 3, 0, 1].into_iter().collect();
    let h = FidelHyper {
        pool_size: 300,
        max_deletions: 5,
        ..FidelHyper::default()
    };
    let pool = sample_pool_fidel(&oracle, &seq, &h, 13).unwrap();
    let fit = fit_fidel(&pool, &h).unwrap().model;
    for t in 0..4 {
        assert!((fit.value(t).unwrap() - truth.v[t]).abs() < 1e-5);
    }
}

#[test]
fn linear_surrogate_is_exact_on_additive_oracles() {
    let w = [0.5, -1.0, 2.0, 0.25];
    let oracle = slalom_core::oracle::FnOracle(move |s: &[usize]| {
        Ok(0.3 + s.iter().map(|&t| w[t]).sum::<f64>())
    });
    let seq: TokenSeq = vec![0, 1, 2, 3, 3, 1, 0, 2].into_iter().collect();
    let pool = sample_pool_fidel::<f64, _>(&oracle, &seq, &FidelHyper::default(), 1).unwrap();
    let lin = fit_linear_surrogate(&pool).unwrap();
    for (t, wt) in w.iter().enumerate() {
        assert!((lin.weight(t).unwrap() - wt).abs() < 1e-9);
    }
    assert!((lin.offset - 0.3).abs() < 1e-9);
}

#[test]
fn f32_fits_run_end_to_end() {
    let p = random_params(5, 14);
    let oracle = SlalomOracle(p.cast::<f32>());
    let seq = random_seq(5, 12, 15);
    let h = FidelHyper {
        pool_size: 200,
        ..FidelHyper::default()
    };
    let pool = sample_pool_fidel::<f32, _>(&oracle, &seq, &h, 16).unwrap();
    let rep = fit_fidel(&pool, &h).unwrap();
    assert!(rep.model.mse(&pool).unwrap() < 1e-4);
}

#[test]
fn slalom_dataset_survives_ndjson_round_trip() {
    let p = gen_slalom_params(&SlalomDatasetSpec::new(12), 17).unwrap();
    let data = gen_slalom_dataset(&p, 200, 30, 18).unwrap();
    let mut buf = Vec::new();
    data.write_ndjson(&mut buf).unwrap();
    let back = LabeledDataset::read_ndjson(data.vocab.clone(), &buf[..]).unwrap();
    assert_eq!(back.records, data.records);
    for r in &back.records {
        assert_eq!(r.log_odds, Some(eval(&p, &r.ids).unwrap()));
    }
}
