//! Property tests over randomized environments, laws and seeds.

use brwre::environment::{format, DistributionSpec, EnvSpec, Environment};
use brwre::genealogy::OffspringLaw;
use brwre::kernel::{green_column, green_column_dense, ConstrainedOperator};
use brwre::rng::replicate_rng;
use brwre::snake::{sample_local_time_multi, KillRule};
use proptest::prelude::*;

fn arb_edge_dist() -> impl Strategy<Value = DistributionSpec> {
    prop_oneof![
        (0.1f64..5.0).prop_map(DistributionSpec::constant),
        (0.1f64..1.0, 1.0f64..4.0).prop_map(|(a, b)| DistributionSpec::uniform(a, a + b)),
        (0.05f64..0.5, 1.0f64..8.0).prop_map(|(a, b)| DistributionSpec::log_uniform(a, a + b)),
        (0.1f64..1.0, 1.0f64..4.0, 0.0f64..=1.0).prop_map(|(a, b, p)| DistributionSpec::two_point(a, b, p)),
    ]
}

fn arb_trap_dist() -> impl Strategy<Value = DistributionSpec> {
    prop_oneof![
        (0.0f64..0.9).prop_map(DistributionSpec::constant),
        (0.0f64..0.9).prop_map(|r| DistributionSpec::uniform(0.0, r)),
        (0.0f64..0.5, 0.5f64..0.95, 0.0f64..=1.0)
            .prop_map(|(a, b, p)| DistributionSpec::two_point(a, b, p)),
    ]
}

fn arb_spec() -> impl Strategy<Value = EnvSpec> {
    prop_oneof![
        arb_edge_dist().prop_map(EnvSpec::conductances),
        arb_trap_dist().prop_map(EnvSpec::traps),
        (arb_edge_dist(), arb_trap_dist()).prop_map(|(e, t)| EnvSpec::mixed(e, t)),
    ]
}

fn arb_env() -> impl Strategy<Value = Environment> {
    (arb_spec(), 1usize..=3, 1i64..=3, any::<u64>())
        .prop_map(|(spec, d, m, seed)| spec.sample(d, m, seed).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn file_roundtrip_is_bit_exact(env in arb_env(), explicit in any::<bool>()) {
        let path = std::env::temp_dir().join(format!(
            "brwre_prop_{}_{}.env", std::process::id(), rand::random::<u64>()
        ));
        format::save(&env, &path, explicit).unwrap();
        let loaded = format::load(&path).unwrap();
        std::fs::remove_file(&path).ok();
        prop_assert!(loaded.bitwise_eq(&env));
    }

    #[test]
    fn transitions_normalize_and_match_support(env in arb_env()) {
        let d = env.d();
        let interior = env.interior().clone();
        let mut checked = 0;
        interior.for_each_site(|idx, x| {
            if checked > 40 || idx % 3 != 0 {
                return;
            }
            checked += 1;
            let td = env.transition_distribution(x).unwrap();
            let total: f64 = td.iter().map(|(_, p)| p).sum();
            assert!((total - 1.0).abs() <= 1e-12);
            let has_self = td.iter().any(|(y, _)| y == x);
            let self_w = env.weight(x, x).unwrap();
            assert_eq!(has_self, self_w > 0.0);
            assert_eq!(td.len(), 2 * d + usize::from(self_w > 0.0));
        });
    }

    #[test]
    fn shift_composes_and_preserves_weights(env_seed in any::<u64>(), sx in -1i64..=1, sy in -1i64..=1) {
        let spec = EnvSpec::mixed(
            DistributionSpec::uniform(0.5, 2.0),
            DistributionSpec::uniform(0.0, 0.5),
        );
        let env = spec.sample(2, 3, env_seed).unwrap();
        let shifted = env.shift(&[sx, sy]).unwrap();
        let inner = shifted.interior().clone();
        inner.for_each_site(|_, y| {
            let orig = [y[0] + sx, y[1] + sy];
            assert_eq!(shifted.pi(y).unwrap().to_bits(), env.pi(&orig).unwrap().to_bits());
        });
    }

    #[test]
    fn random_critical_laws_have_consistent_derived_laws(
        q2 in 0.05f64..0.45,
        q3 in 0.0f64..0.15,
    ) {
        // Criticality pins q1 and q0 given (q2, q3); stay inside the simplex.
        prop_assume!(2.0 * q2 + 3.0 * q3 < 1.0);
        let q1 = 1.0 - 2.0 * q2 - 3.0 * q3;
        let q0 = 1.0 - q1 - q2 - q3;
        prop_assume!(q0 > 1e-9);
        let law = OffspringLaw::from_probs(&[q0, q1, q2, q3]).unwrap();
        let sb: f64 = (0..=3).map(|k| law.size_biased(k)).sum();
        let sh: f64 = (0..=3).map(|k| law.shifted(k)).sum();
        prop_assert!((sb - 1.0).abs() <= 1e-12);
        prop_assert!((sh - 1.0).abs() <= 1e-12);
        prop_assert!(law.sigma2() > 0.0);

        // Empirical mean of the sampler stays near 1 (loose: 6 SE at n=4000).
        let mut rng = replicate_rng(7, 0, (q2 * 1e6) as u64);
        let n = 4000u64;
        let mean = (0..n).map(|_| law.sample(&mut rng) as f64).sum::<f64>() / n as f64;
        let se = ((law.sigma2() + 1.0) / n as f64).sqrt();
        prop_assert!((mean - 1.0).abs() <= 6.0 * se, "mean {mean}");
    }

    #[test]
    fn cg_agrees_with_dense_on_random_environments(env in arb_env()) {
        let m = env.interior().radius();
        let op = ConstrainedOperator::new(&env, m).unwrap();
        let origin = vec![0i64; env.d()];
        let a = green_column(&op, &origin).unwrap();
        let b = green_column_dense(&op, &origin).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            prop_assert!((x - y).abs() <= 1e-9, "cg {x} vs dense {y}");
        }
    }

    #[test]
    fn coupled_kill_rules_are_pathwise_monotone(env in arb_env(), seed in any::<u64>()) {
        let m = env.interior().radius();
        prop_assume!(m >= 2);
        let law = OffspringLaw::geometric_half();
        let rules = [
            KillRule::BoxAndTraps { m: m - 1, threshold: 20.0 },
            KillRule::Box { m: m - 1 },
            KillRule::Box { m },
        ];
        let mut rng = replicate_rng(seed, 2, 0);
        let out = sample_local_time_multi(&env, &law, &rules, &mut rng, 200_000, false).unwrap();
        prop_assert!(out.samples[0].visits <= out.samples[1].visits);
        prop_assert!(out.samples[1].visits <= out.samples[2].visits);
    }
}
