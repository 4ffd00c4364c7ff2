mod common;

use std::collections::BTreeMap;

use common::{brute_force, small_program};
use gridmarket::agents::{self, saturation};
use gridmarket::congestion::{update_eta, CongestionLedger};
use gridmarket::convex::{self, SolveStatus, DEFAULT_TOL};
use gridmarket::matching::TradeState;
use gridmarket::scenario::{Scenario, Scheme};
use proptest::prelude::*;

fn bus() -> impl Strategy<Value = usize> {
    0usize..15
}

fn prosumer() -> impl Strategy<Value = usize> {
    1usize..15
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tree_path_matches_subtree_test(i in bus(), j in bus()) {
        let s = Scenario::ieee15();
        let path = s.tree_path(i, j).unwrap();
        let mut back = s.tree_path(j, i).unwrap();
        back.reverse();
        prop_assert_eq!(&path, &back);
        let mut sorted = path.clone();
        sorted.sort_unstable();
        let crossing: Vec<usize> = s
            .lines()
            .map(|l| l.id)
            .filter(|&l| s.in_subtree(l, i) != s.in_subtree(l, j))
            .collect();
        prop_assert_eq!(sorted, crossing);
    }

    #[test]
    fn scenario_round_trips(
        id in prosumer(),
        beta in 5.0f64..40.0,
        g_max in 0.0f64..1.0,
        s_max in 0.05f64..2.0,
        gamma in 0.01f64..2.0,
        dps in any::<bool>(),
    ) {
        let mut s = Scenario::ieee15();
        s.prosumer_mut(id).beta = beta;
        s.prosumer_mut(id).g_p_max = g_max;
        s.line_mut(id).unwrap().s_max = s_max;
        s.algo.gamma = gamma;
        s.grid.scheme = if dps { Scheme::Dps } else { Scheme::Ups };
        let back = Scenario::from_toml_str(&s.to_toml_string()).unwrap();
        prop_assert_eq!(back, s);
    }

    #[test]
    fn utility_is_concave_and_saturates(id in prosumer(), x in 0.0f64..1.0, y in 0.0f64..1.0) {
        let s = Scenario::ieee15();
        let p = s.prosumer(id);
        let u = |d: f64| agents::consumer_utility(d, p).unwrap();
        let mid = u(0.5 * (x + y));
        prop_assert!(mid >= 0.5 * (u(x) + u(y)) - 1e-12);
        let top = saturation(p);
        prop_assert!(u(top + x) <= u(top) + 1e-12);
        prop_assert!(u(x.min(y)) <= u(x.max(y)) + 1e-12);
    }

    #[test]
    fn ups_quotes_ignore_order(loads in prop::collection::vec(-0.5f64..0.5, 2..15), k in 0usize..100) {
        let mut grid = Scenario::ieee15().grid;
        grid.scheme = Scheme::Ups;
        let a = agents::grid_price_quote(&loads, &grid);
        let mut shuffled = loads.clone();
        shuffled.rotate_left(k % loads.len());
        let b = agents::grid_price_quote(&shuffled, &grid);
        prop_assert!((a[0].buy_price - b[0].buy_price).abs() < 1e-12);
        prop_assert!(a.iter().all(|q| q.buy_price == a[0].buy_price));
    }

    #[test]
    fn dps_quote_depends_on_own_load_only(
        loads in prop::collection::vec(0.0f64..0.5, 2..15),
        bump in 0.0f64..1.0,
    ) {
        let mut grid = Scenario::ieee15().grid;
        grid.scheme = Scheme::Dps;
        let a = agents::grid_price_quote(&loads, &grid);
        let mut other = loads.clone();
        other[1] += bump;
        let b = agents::grid_price_quote(&other, &grid);
        prop_assert_eq!(a[0], b[0]);
        let dps = agents::grid_payments(&loads, &grid, Scheme::Dps);
        let ups = agents::grid_payments(&loads, &grid, Scheme::Ups);
        prop_assert!(dps <= ups + 1e-12);
    }

    #[test]
    fn settled_trades_balance(
        raw in prop::collection::vec(-0.3f64..0.3, 15 * 15),
        d in prop::collection::vec(0.0f64..0.3, 15),
        g in prop::collection::vec(0.0f64..0.4, 15),
    ) {
        let mut t = TradeState::new(15, 1.0);
        for i in 1..15 {
            for j in 1..15 {
                if i != j {
                    t.p[i][j] = raw[15 * i + j];
                }
            }
            t.d[i] = d[i];
            t.g[i] = g[i];
        }
        for i in 1..15 {
            for j in 1..15 {
                prop_assert_eq!(t.settled(i, j), -t.settled(j, i));
            }
        }
        prop_assert!(t.dispatch().imbalance().abs() < 1e-12);
    }

    #[test]
    fn positive_overload_never_lowers_prices(
        start in prop::collection::vec(0.0f64..2.0, 4),
        kappa in 0.0f64..1.0,
        gamma in 0.0f64..2.0,
    ) {
        let pairs = vec![(1, 4), (2, 5), (12, 6), (8, 4)];
        let mut ledger = CongestionLedger::default();
        for (&(i, j), &eta) in pairs.iter().zip(&start) {
            ledger.eta.insert((4, i, j), eta);
        }
        let congested: BTreeMap<_, _> = [(4, (kappa, pairs.clone()))].into_iter().collect();
        let next = update_eta(&ledger, &congested, gamma);
        for &(i, j) in &pairs {
            prop_assert!(next.get(4, i, j) >= ledger.get(4, i, j));
        }
        let w = next.pair_weights(&Scenario::ieee15());
        for i in 0..15 {
            for j in 0..15 {
                prop_assert_eq!(w[i][j], w[j][i]);
            }
        }
    }

    #[test]
    fn kernel_agrees_with_grid_search(
        q0 in 0.2f64..3.0,
        q1 in 0.2f64..3.0,
        corr in -0.9f64..0.9,
        c0 in -3.0f64..3.0,
        c1 in -3.0f64..3.0,
        w0 in 0.0f64..1.0,
        w1 in 0.0f64..1.0,
        disc in prop::option::of(0.3f64..1.2),
    ) {
        let p = small_program([q0, q1, corr], [c0, c1], [w0, w1], disc, [-1.0, -1.0], [1.0, 1.0]);
        let sol = convex::solve(&p.prog, DEFAULT_TOL, None).unwrap();
        prop_assert_eq!(sol.status, SolveStatus::Optimal);
        prop_assert!(p.prog.max_violation(&sol.x) <= 1e-7);
        let (best, _) = brute_force(&p).unwrap();
        prop_assert!((sol.objective - best).abs() <= 1e-6, "kernel {} grid {}", sol.objective, best);
    }
}
