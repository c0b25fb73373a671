//! Property tests for invariants that cut across modules.

use proptest::prelude::*;

use crate::accounting::sensitive_value;
use crate::data::INTERCEPT_LABEL;
use crate::model::SufficientStats;
use crate::range::{compose_alpha_star, tail_widened_ranges, truncation_mass};
use crate::stats::quantile;
use crate::weights::LoglikMatrix;
use crate::*;

fn dataset(outcomes: Vec<f64>, z: Vec<f64>) -> Dataset {
    let predictors = z.iter().flat_map(|&v| [1.0, v]).collect();
    Dataset::new(
        outcomes,
        predictors,
        2,
        true,
        "y",
        vec![INTERCEPT_LABEL.into(), "z".into()],
    )
    .unwrap()
}

fn records() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..30).prop_flat_map(|n| {
        (
            prop::collection::vec(-3.0f64..5.0, n).prop_map(|v| v.into_iter().map(f64::exp).collect()),
            prop::collection::vec(-2.0f64..2.0, n),
        )
    })
}

fn unit_weight() -> impl Strategy<Value = f64> {
    prop_oneof![Just(0.0), Just(1.0), 0.0f64..=1.0]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scaling_weights_scales_sufficient_statistics((x, z) in records(), c in 0.01f64..=1.0, seed in any::<u64>()) {
        let d = dataset(x, z);
        let mut rng = RngContract::new(seed).stream("w", 0);
        let w: Vec<f64> = (0..d.n()).map(|_| rand::Rng::random_range(&mut rng, 0.0..=1.0)).collect();
        let cw: Vec<f64> = w.iter().map(|v| c * v).collect();
        let s = SufficientStats::compute(&d, &w);
        let t = SufficientStats::compute(&d, &cw);
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-10 * (1.0 + a.abs());
        prop_assert!(close(t.weight_sum, c * s.weight_sum));
        prop_assert!(close(t.ytwy, c * s.ytwy));
        for (a, b) in t.xtwx.iter().zip(&s.xtwx) { prop_assert!(close(*a, c * b)); }
        for (a, b) in t.xtwy.iter().zip(&s.xtwy) { prop_assert!(close(*a, c * b)); }
    }

    #[test]
    fn lambda_shrinks_as_ranges_widen(
        (x, z) in records(),
        a in 0.3f64..0.95, b in 1.05f64..2.0, widen in 0.0f64..0.25, seed in any::<u64>(),
    ) {
        let d = dataset(x, z);
        let post = PosteriorDraws::point(ThetaDraw::new(vec![1.0, 0.5], 1.0).unwrap(), d.n());
        let inner = RangeSpec::uniform(d.n(), a, b).unwrap();
        let outer = RangeSpec::uniform(d.n(), a - widen * a, b + widen).unwrap();
        let li = estimate_lambda(&post, &d, &inner, 200, seed).unwrap();
        let lo = estimate_lambda(&post, &d, &outer, 200, seed).unwrap();
        for (o, i) in lo.lambda.iter().zip(&li.lambda) {
            prop_assert!(o <= i);
        }
        let unbounded = estimate_lambda(&post, &d, &RangeSpec::unbounded(d.n()), 10, seed).unwrap();
        prop_assert!(unbounded.lambda.iter().all(|&l| l == 0.0));
    }

    #[test]
    fn composed_weights_dominate_alpha(alpha in prop::collection::vec(0.001f64..=1.0, 1..40), seed in any::<u64>()) {
        let n = alpha.len();
        let mut rng = RngContract::new(seed).stream("l", 0);
        let lambda: Vec<f64> = (0..n).map(|_| rand::Rng::random_range(&mut rng, 0.0..=1.0)).collect();
        let w = RiskWeights { alpha: alpha.clone(), raw: alpha.clone(), scale_constant: 1.0, zero_loglik_count: 0 };
        let star = compose_alpha_star(&w, &KnowledgeProbs::from_lambda(lambda.clone(), 1).unwrap()).unwrap();
        for i in 0..n {
            prop_assert!(star.alpha_star[i] >= alpha[i]);
            prop_assert!(star.alpha_star[i] <= 1.0);
            if lambda[i] == 0.0 { prop_assert_eq!(star.alpha_star[i], alpha[i]); }
        }
        let zero = compose_alpha_star(&w, &KnowledgeProbs::zeros(n, 1)).unwrap();
        prop_assert_eq!(zero.alpha_star, alpha);
    }

    #[test]
    fn truncation_mass_is_monotone_in_nesting(
        x in 0.01f64..1e4, mu in -3.0f64..8.0, s2 in 0.01f64..9.0,
        a in 0.2f64..1.0, b in 1.0f64..3.0, widen in 0.0f64..0.5,
    ) {
        prop_assume!(a < b);
        let d = dataset(vec![x, x], vec![0.0, 0.0]);
        let theta = ThetaDraw::new(vec![mu, 0.0], s2).unwrap();
        let inner = RangeSpec::uniform(2, a, b).unwrap();
        let outer = RangeSpec::uniform(2, a * (1.0 - widen * 0.9), b + widen).unwrap();
        let mi = truncation_mass(&theta, &d, 0, &inner);
        let mo = truncation_mass(&theta, &d, 0, &outer);
        prop_assert!((0.0..=1.0).contains(&mi));
        prop_assert!(mo >= mi);
        prop_assert_eq!(truncation_mass(&theta, &d, 0, &RangeSpec::unbounded(2)), 1.0);
    }

    #[test]
    fn averaged_term_never_exceeds_weighted(f in -1e6f64..1e6, alpha in 0.0f64..=1.0, lambda in unit_weight()) {
        let avg = sensitive_value(StandardKind::RangeAveraged, f, alpha, lambda, 0.0);
        let w = sensitive_value(StandardKind::Weighted, f, alpha, 0.0, 0.0);
        prop_assert!(avg.abs() <= w.abs());
        prop_assert!(w.abs() <= f.abs());
    }

    #[test]
    fn ecdf_metrics_are_symmetric_and_bounded(
        a in prop::collection::vec(-10.0f64..10.0, 1..50),
        b in prop::collection::vec(-10.0f64..10.0, 1..50),
    ) {
        let ab = ecdf_metrics(&a, &b).unwrap();
        let ba = ecdf_metrics(&b, &a).unwrap();
        prop_assert_eq!(ab.max_ecdf, ba.max_ecdf);
        prop_assert!((ab.avg_ecdf - ba.avg_ecdf).abs() < 1e-15);
        prop_assert!((0.0..=1.0).contains(&ab.max_ecdf));
        prop_assert!(ab.avg_ecdf <= ab.max_ecdf * ab.max_ecdf + 1e-15);
        prop_assert_eq!(ecdf_metrics(&a, &a).unwrap().max_ecdf, 0.0);
    }

    #[test]
    fn csv_round_trip_is_exact((x, z) in records()) {
        let d = dataset(x, z);
        let mut buf = Vec::new();
        d.write_csv_to(&mut buf).unwrap();
        let schema = CsvSchema { predictors: vec![PredictorSpec::parse("z").unwrap()], ..Default::default() };
        let back = load_csv(write_temp(&buf).path(), &schema).unwrap();
        prop_assert_eq!(back, d);
    }

    #[test]
    fn risk_weights_are_normalised(rows in (1usize..6).prop_flat_map(|m| prop::collection::vec(prop::collection::vec(-50.0f64..0.0, m), 2..20))) {
        let (n, m) = (rows.len(), rows[0].len());
        let ll = LoglikMatrix::from_rows(rows.concat(), n, m, Stage::Unweighted).unwrap();
        let w = compute_alpha(&ll);
        prop_assert!(w.alpha.iter().all(|&a| a > 0.0 && a <= 1.0));
        prop_assert_eq!(w.alpha.iter().copied().fold(0.0, f64::max), 1.0);
        let maxima = ll.max_abs_by_record();
        for i in 0..n {
            for j in 0..n {
                if maxima[i] < maxima[j] { prop_assert!(w.alpha[i] >= w.alpha[j]); }
            }
        }
    }

    #[test]
    fn tail_widening_counts(outcomes in prop::collection::btree_set(1u32..100_000, 2..200), q in 0.0f64..0.5) {
        let x: Vec<f64> = outcomes.iter().map(|&v| v as f64).collect();
        let n = x.len();
        let d = dataset(x, vec![0.0; n]);
        let spec = tail_widened_ranges(&d, (0.4, 1.8), (0.2, 2.4), q).unwrap();
        let widened = spec.records().iter().filter(|r| **r == RecordRange::multiplicative(0.2, 2.4).unwrap()).count();
        prop_assert_eq!(widened, ((q * n as f64) - 1e-9).ceil().max(0.0) as usize);
    }

    #[test]
    fn quantiles_are_monotone(v in prop::collection::vec(-1e3f64..1e3, 1..60), p in 0.0f64..=1.0, r in 0.0f64..=1.0) {
        let (lo, hi) = if p <= r { (p, r) } else { (r, p) };
        prop_assert!(quantile(&v, lo) <= quantile(&v, hi));
    }
}

fn write_temp(bytes: &[u8]) -> tempfile::NamedTempFile {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    std::io::Write::write_all(&mut f, bytes).unwrap();
    f
}
