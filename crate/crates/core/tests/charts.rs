use metriccalc::mds::{self, PdMethod};
use metriccalc::modalg;
use metriccalc::space::{landmark_generators, make_space, SpaceKind};
use metriccalc::{
    Derivation, Error, LipCalculus, ScalarField, ScaleLadder, Scheme, SpaceRef, VariationRule,
};
use proptest::prelude::*;

fn square(side: usize) -> (SpaceRef, f64) {
    let s = make_space(&SpaceKind::Grid {
        dim: 2,
        side,
        extent: 1.0,
    })
    .unwrap()
    .into_ref();
    (s, 1.0 / (side - 1) as f64)
}

fn axes(s: &SpaceRef, h: f64) -> (Derivation, Derivation) {
    (
        Derivation::difference_quotient(s, &Scheme::Axis { dim: 0, step: h }).unwrap(),
        Derivation::difference_quotient(s, &Scheme::Axis { dim: 1, step: h }).unwrap(),
    )
}

fn smooth(s: &SpaceRef) -> ScalarField {
    ScalarField::from_fn(s, |i| {
        let c = s.coords(i).unwrap();
        (2.0 * c[0]).sin() * c[1].cos() + 0.5 * c[0] * c[1]
    })
    .unwrap()
}

/// Largest second derivative of `smooth` on the unit square, bounded by hand.
const SECOND_DIFF: f64 = 4.0 + 1.0 + 2.0 + 0.5;

#[test]
fn lsq_and_dual_partials_agree_on_smooth_fields() {
    let (s, h) = square(33);
    let (dx, dy) = axes(&s, h);
    let coords = vec![
        ScalarField::coordinate(&s, 0).unwrap(),
        ScalarField::coordinate(&s, 1).unwrap(),
    ];
    let atlas = mds::build_atlas(&s, coords, &[&dx, &dy], 1e-6, mds::DEFAULT_EPS_FLOOR).unwrap();
    let calc = LipCalculus::new(
        &s,
        ScaleLadder::new(vec![2.0 * h]).unwrap(),
        VariationRule::default(),
    );
    let f = smooth(&s);
    let r = 2.0 * h;
    let dual = mds::partial_derivatives(&calc, &atlas, 0, &f, Some(PdMethod::Dual)).unwrap();
    let lsq =
        mds::partial_derivatives(&calc, &atlas, 0, &f, Some(PdMethod::Lsq { radius: r })).unwrap();
    let bound = 10.0 * (h + r) * SECOND_DIFF;
    for (a, b) in dual.values.iter().zip(&lsq.values) {
        for (u, v) in a.iter().zip(b) {
            assert!((u - v).abs() <= bound, "{u} vs {v}, bound {bound}");
        }
    }
}

#[test]
fn differential_norm_matches_lip() {
    let (s, h) = square(33);
    let (dx, dy) = axes(&s, h);
    let coords = vec![
        ScalarField::coordinate(&s, 0).unwrap(),
        ScalarField::coordinate(&s, 1).unwrap(),
    ];
    let atlas = mds::build_atlas(&s, coords, &[&dx, &dy], 1e-6, mds::DEFAULT_EPS_FLOOR).unwrap();
    let floor = 2.0 * h;
    let calc = LipCalculus::new(
        &s,
        ScaleLadder::new(vec![floor]).unwrap(),
        VariationRule::default(),
    );
    let f = smooth(&s);
    let df =
        mds::differential(&calc, &atlas, 0, &f, Some(PdMethod::Lsq { radius: floor })).unwrap();
    let tol = 1e-3 + 2.0 * floor * SECOND_DIFF;
    for (&x, v) in df.domain.iter().zip(&df.coefficients) {
        let norm = mds::cot_norm(&calc, &atlas, 0, v, x).unwrap();
        let lip = calc.lip_at(&f, x).unwrap();
        assert!(
            (norm - lip).abs() <= tol * lip.max(1.0),
            "x={x}: {norm} vs {lip}"
        );
    }
}

#[test]
fn landmark_atlas_pipeline() {
    let (s, h) = square(17);
    let (dx, dy) = axes(&s, h);
    let corners = [0, 16, 16 * 17];
    let gens = landmark_generators(&s, &corners).unwrap();
    let atlas = mds::build_atlas(&s, gens, &[&dx, &dy], 1e-6, mds::DEFAULT_EPS_FLOOR).unwrap();
    assert!(atlas.is_complete());
    assert_eq!(atlas.dimension(), 2);
    assert!(atlas
        .charts()
        .iter()
        .all(|c| c.functions.iter().all(|&j| j < 3)));
    assert!(atlas.freeness_residual(&[&dx, &dy]) <= 1e-6);
    let calc = LipCalculus::with_default_ladder(&s).unwrap();
    let f = ScalarField::coordinate(&s, 0).unwrap();
    let n = mds::sobolev_norm(&calc, &atlas, &f, 2.0).unwrap();
    assert!(n.is_finite() && n > 1.0);
}

#[test]
fn cantor_line_has_one_dimensional_atlas() {
    let s = make_space(&SpaceKind::FatCantor {
        depth: 5,
        gap_ratio: 0.25,
    })
    .unwrap()
    .into_ref();
    let d = Derivation::difference_quotient(&s, &Scheme::Knn { k: 1, radius: 1.0 }).unwrap();
    let x = ScalarField::coordinate(&s, 0).unwrap();
    let atlas = mds::build_atlas(&s, vec![x], &[&d], 1e-6, mds::DEFAULT_EPS_FLOOR).unwrap();
    assert!(atlas.is_complete());
    assert_eq!(atlas.dimension(), 1);
    let st = modalg::stratify(&[&d], &[&atlas.registry()[0]], 1e-6).unwrap();
    assert_eq!(st.strata[1].len(), s.len());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    /// The atlas dimension never exceeds the number of derivations or generators.
    #[test]
    fn atlas_dimension_is_bounded(k in 1usize..4, landmarks in prop::collection::btree_set(0usize..49, 1..5)) {
        let (s, _) = square(7);
        let ds: Vec<Derivation> = (1..=k)
            .map(|j| Derivation::difference_quotient(&s, &Scheme::Knn { k: j, radius: 0.5 }).unwrap())
            .collect();
        let dr: Vec<&Derivation> = ds.iter().collect();
        let lm: Vec<usize> = landmarks.into_iter().collect();
        let gens = landmark_generators(&s, &lm).unwrap();
        let g = gens.len();
        // a rank-n point whose best minor is ill-conditioned is reported, not charted
        let atlas = match mds::build_atlas(&s, gens, &dr, modalg::DEFAULT_RANK_TAU, mds::DEFAULT_EPS_FLOOR) {
            Err(Error::MinorNotFound { size, .. }) => {
                prop_assert!(size <= k.min(g));
                return Ok(());
            }
            other => other.unwrap(),
        };
        prop_assert!(atlas.is_complete());
        prop_assert!(atlas.dimension() <= k.min(g));
        prop_assert!(atlas.freeness_residual(&dr) <= 1e-6);
    }
}
