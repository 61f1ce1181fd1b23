use proptest::prelude::*;

use capflow::curvature::robin_filled;
use capflow::diagnostics;
use capflow::expr::{evaluate, parse};
use capflow::flow::{build_f, HessianOperator};
use capflow::grid::{self, build_grid, ScalarField};
use capflow::orlicz::{check_barrier_condition, make_power};

fn expression() -> impl Strategy<Value = String> {
    let leaf = prop_oneof![
        (0u32..1000).prop_map(|v| format!("{}", v as f64 / 8.0)),
        prop_oneof![Just("x1"), Just("x2"), Just("s")].prop_map(String::from),
    ];
    leaf.prop_recursive(4, 24, 3, |inner| {
        prop_oneof![
            (
                inner.clone(),
                prop_oneof![Just("+"), Just("-"), Just("*"), Just("/"), Just("^")],
                inner.clone()
            )
                .prop_map(|(a, op, b)| format!("{a} {op} {b}")),
            inner.clone().prop_map(|a| format!("-{a}")),
            inner.clone().prop_map(|a| format!("({a})")),
            (
                prop_oneof![Just("sin"), Just("cos"), Just("exp"), Just("abs")],
                inner.clone()
            )
                .prop_map(|(f, a)| format!("{f}({a})")),
            (
                prop_oneof![Just("min"), Just("max"), Just("pow")],
                inner.clone(),
                inner
            )
                .prop_map(|(f, a, b)| format!("{f}({a}, {b})")),
        ]
    })
}

fn random_field(n: usize, seed: &[f64]) -> Vec<f64> {
    (0..n)
        .map(|i| 1.0 + 0.5 * seed[i % seed.len()] * ((i * 7 % 13) as f64 / 13.0))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn printed_expressions_reparse_to_the_same_tree(src in expression()) {
        let e = parse(&src).unwrap();
        let printed = e.to_string();
        let again = parse(&printed).unwrap();
        prop_assert_eq!(printed.clone(), again.to_string());
        let env = [("x1", 0.3), ("x2", -1.25), ("s", 2.5)];
        match (evaluate(&e, &env), evaluate(&again, &env)) {
            (Ok(a), Ok(b)) => prop_assert_eq!(a.to_bits(), b.to_bits(), "{} vs {}", src, printed),
            (Err(_), Err(_)) => {}
            (a, b) => prop_assert!(false, "{src}: {a:?} vs {b:?}"),
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn gradient_and_hessian_are_linear(
        theta in 0.2f64..1.5,
        dim in 1usize..=2,
        alpha in -3.0f64..3.0,
        beta in -3.0f64..3.0,
        seed in prop::collection::vec(-1.0f64..1.0, 5..20),
    ) {
        let g = build_grid(theta, dim, 12, if dim == 2 { 16 } else { 1 }).unwrap();
        let a = ScalarField::new(random_field(g.len(), &seed));
        let b = ScalarField::new(random_field(g.len(), &seed[1..]));
        let c = ScalarField::new(
            a.values().iter().zip(b.values()).map(|(x, y)| alpha * x + beta * y).collect(),
        );
        let (fa, fb, fc) = (robin_filled(&g, &a), robin_filled(&g, &b), robin_filled(&g, &c));
        let (ha, hb, hc) = (
            grid::covariant_hessian(&g, &fa).unwrap(),
            grid::covariant_hessian(&g, &fb).unwrap(),
            grid::covariant_hessian(&g, &fc).unwrap(),
        );
        let (ga, gb, gc) = (
            grid::gradient(&g, &fa).unwrap(),
            grid::gradient(&g, &fb).unwrap(),
            grid::gradient(&g, &fc).unwrap(),
        );
        for i in 0..g.len() {
            for q in 0..3 {
                let want = alpha * ha.get(i)[q] + beta * hb.get(i)[q];
                let scale = 1.0 + (alpha * ha.get(i)[q]).abs() + (beta * hb.get(i)[q]).abs();
                prop_assert!((hc.get(i)[q] - want).abs() <= 1e-12 * scale);
            }
            for q in 0..2 {
                let want = alpha * ga[i][q] + beta * gb[i][q];
                let scale = 1.0 + (alpha * ga[i][q]).abs() + (beta * gb[i][q]).abs();
                prop_assert!((gc[i][q] - want).abs() <= 1e-12 * scale);
            }
        }
    }

    #[test]
    fn assembled_hessian_matches_the_ghost_stencil(
        theta in 0.2f64..1.5,
        dim in 1usize..=2,
        n_rho in 8usize..20,
        seed in prop::collection::vec(-1.0f64..1.0, 5..20),
    ) {
        let g = build_grid(theta, dim, n_rho, if dim == 2 { 2 * n_rho } else { 1 }).unwrap();
        let h = ScalarField::new(random_field(g.len(), &seed));
        let op = HessianOperator::new(&g, theta.cos() / theta.sin());
        let a = op.apply(h.values());
        let b = grid::covariant_hessian(&g, &robin_filled(&g, &h)).unwrap();
        for i in 0..g.len() {
            for q in 0..3 {
                prop_assert!((a[i][q] - b.get(i)[q]).abs() <= 1e-12 * (1.0 + a[i][q].abs()));
            }
        }
    }

    #[test]
    fn volume_scales_with_degree_n_plus_one(
        theta in 0.2f64..1.5,
        dim in 1usize..=2,
        c in 0.1f64..10.0,
    ) {
        let g = build_grid(theta, dim, 16, if dim == 2 { 32 } else { 1 }).unwrap();
        let ell = grid::ell_field(&g);
        let v1 = diagnostics::volume(&g, &ell).unwrap();
        let vc = diagnostics::volume(&g, &ell.scaled(c)).unwrap();
        let want = c.powi(dim as i32 + 1) * v1;
        prop_assert!((vc - want).abs() <= 1e-10 * want.abs());
    }

    #[test]
    fn raising_f_shifts_the_barrier_margins_by_the_same_amount(
        p in prop_oneof![-2.0f64..0.5, 1.5f64..6.0],
        base in 0.5f64..2.0,
        delta in 0.01f64..1.0,
    ) {
        let g = build_grid(1.0, 2, 8, 8).unwrap();
        let phi = make_power(p).unwrap();
        let f0 = build_f(&format!("{base} + 0.2*x3"), &g).unwrap();
        let f1 = build_f(&format!("{} + 0.2*x3", base + delta), &g).unwrap();
        let r0 = check_barrier_condition(&phi, &g, &f0, 1e-3, 1e3, 8);
        let r1 = check_barrier_condition(&phi, &g, &f1, 1e-3, 1e3, 8);
        prop_assert!(r1.margin_low <= r0.margin_low);
        prop_assert!(r1.margin_high >= r0.margin_high);
        prop_assert!(((r0.margin_low - r1.margin_low) - delta).abs() <= 1e-9 * (1.0 + r0.margin_low.abs()));
        prop_assert!(((r1.margin_high - r0.margin_high) - delta).abs() <= 1e-9 * (1.0 + r0.margin_high.abs()));
    }
}
