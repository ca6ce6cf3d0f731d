use std::collections::HashSet;

use num_complex::Complex64;
use proptest::prelude::*;
use qpnls::field::residual_full;
use qpnls::linop::{assemble_on, box_nodes};
use qpnls::newton::{p_step, q_update, PStepOptions, SolverPath};
use qpnls::resonance::{Block, Node};
use qpnls::{build_initial, FourierSeq, ModeIndex, SolverState, TailSpec, TruncBox};

fn support(b: usize, d: usize) -> impl Strategy<Value = Vec<Vec<i64>>> {
    prop::collection::vec(prop::collection::vec(-3i64..=3, d), b)
        .prop_filter("distinct nonzero", |j| {
            let set: HashSet<&Vec<i64>> = j.iter().collect();
            set.len() == j.len() && j.iter().all(|x| x.iter().any(|&v| v != 0))
        })
}

fn instance() -> impl Strategy<Value = (Vec<Vec<i64>>, Vec<f64>, f64, u32)> {
    (1usize..=2, 1usize..=2)
        .prop_flat_map(|(b, d)| (support(b, d), prop::collection::vec(0.1f64..1.0, b), 0.05f64..0.4, 1u32..=2))
}

/// Small perturbation off the tangential sites, keeping `v = conj u(-x)`.
fn perturbed(s: &SolverState, seed: u64) -> SolverState {
    let mut s = s.clone();
    let nodes = box_nodes(&TruncBox::new(1, 1), s.b(), s.d()).unwrap();
    let sites: HashSet<ModeIndex> = s.u_sites().into_iter().collect();
    let mut x = seed;
    for (m, blk) in nodes {
        if blk != Block::U || sites.contains(&m) {
            continue;
        }
        x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        if x >> 62 == 0 {
            let re = ((x >> 20) % 1000) as f64 * 1e-5;
            let im = ((x >> 40) % 1000) as f64 * 1e-5;
            s.u.set(m, Complex64::new(re, im));
        }
    }
    s.v = s.u.conj_reflect();
    s
}

fn direction(nodes: &[Node], inner: &TruncBox, k: u64) -> Vec<Complex64> {
    nodes
        .iter()
        .enumerate()
        .map(|(i, (m, _))| {
            if !inner.contains(m) {
                return Complex64::new(0.0, 0.0);
            }
            let t = (i as f64 + 1.0) * (k as f64 + 1.7);
            Complex64::new(t.sin(), (0.3 * t).cos())
        })
        .collect()
}

fn shifted(s: &SolverState, nodes: &[Node], w: &[Complex64], eps: f64) -> SolverState {
    let mut t = s.clone();
    for ((m, blk), c) in nodes.iter().zip(w) {
        if *c == Complex64::new(0.0, 0.0) {
            continue;
        }
        let seq: &mut FourierSeq = if *blk == Block::U { &mut t.u } else { &mut t.v };
        seq.add_at(m.clone(), c * eps);
    }
    t
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn newton_step_keeps_conjugacy_and_gauge((j, a, delta, p) in instance()) {
        let s0 = build_initial(&a, &j, delta, p).unwrap();
        let q = q_update(&s0, &TailSpec::none()).unwrap();
        let jmax = j.iter().flatten().map(|x| x.abs()).max().unwrap();
        let ps = p_step(&q.state, &TailSpec::none(), &TruncBox::new(3, 3 + jmax), &PStepOptions::default()).unwrap();
        let q2 = q_update(&ps.state, &TailSpec::none()).unwrap();
        for st in [&q.state, &ps.state, &q2.state] {
            prop_assert!(st.conjugacy_deviation() <= 1e-12);
            prop_assert!(st.gauge_deviation() <= 1e-12);
        }
        prop_assert!(q2.imag_defect <= 1e-10);
    }

    #[test]
    fn operator_matches_finite_differences((j, a, delta, p) in instance(), seed in any::<u64>()) {
        let s = perturbed(&build_initial(&a, &j, delta, p).unwrap(), seed);
        let tail = TailSpec::none();
        let b = s.b();
        let d = s.d();
        let inner = TruncBox::new(1, 1);
        // Rows outside `outer` are not compared, so it only has to contain `inner`.
        let outer = TruncBox::new(2, 3);
        let nodes = box_nodes(&outer, b, d).unwrap();
        let op = assemble_on(&s, &tail, nodes.clone(), 0.0).unwrap();
        let eps = 1e-3;
        // Central differences at eps and eps/2 with one Richardson step.
        let central = |w: &[Complex64], h: f64| {
            let (pu, pv) = residual_full(&shifted(&s, &nodes, w, h), &tail).unwrap();
            let (mu, mv) = residual_full(&shifted(&s, &nodes, w, -h), &tail).unwrap();
            nodes
                .iter()
                .map(|(m, blk)| {
                    let (fp, fm) = if *blk == Block::U { (&pu, &mu) } else { (&pv, &mv) };
                    (fp.get(m) - fm.get(m)) / (2.0 * h)
                })
                .collect::<Vec<Complex64>>()
        };
        for k in 0..5 {
            let w = direction(&nodes, &inner, k);
            let coarse = central(&w, eps);
            let fine = central(&w, eps / 2.0);
            let mv = op.matvec(&w);
            let mut err: f64 = 0.0;
            let mut scale: f64 = 0.0;
            for i in 0..nodes.len() {
                let fd = (4.0 * fine[i] - coarse[i]) / 3.0 - op.diag[i] * w[i];
                let an = mv[i] - op.diag[i] * w[i];
                err = err.max((fd - an).norm());
                scale = scale.max(an.norm());
            }
            prop_assert!(scale > 0.0);
            prop_assert!(err <= 1e-6 * scale, "direction {}: err {:e} scale {:e}", k, err, scale);
        }
    }

    #[test]
    fn dense_and_block_solvers_agree(a1 in 0.2f64..0.95, a2 in 0.2f64..0.95, log_delta in -3.0f64..-1.3) {
        let j = vec![vec![1, -1], vec![-4, 3]];
        let delta = 10f64.powf(log_delta);
        let s = q_update(&build_initial(&[a1, a2], &j, delta, 1).unwrap(), &TailSpec::none()).unwrap().state;
        let bx = TruncBox::new(6, 10);
        let dense = p_step(&s, &TailSpec::none(), &bx, &PStepOptions { path: SolverPath::Dense, ..PStepOptions::default() });
        let block = p_step(&s, &TailSpec::none(), &bx, &PStepOptions { path: SolverPath::Block, ..PStepOptions::default() });
        let (dense, block) = match (dense, block) {
            (Ok(x), Ok(y)) => (x, y),
            (x, y) => return Err(TestCaseError::fail(format!("{:?} / {:?}", x.err(), y.err()))),
        };
        prop_assert_eq!(dense.unknowns, block.unknowns);
        let diff = dense.delta_u.max_abs_diff(&block.delta_u);
        prop_assert!(diff <= 1e-10 * dense.du_flat.max(1e-300), "diff {:e} vs {:e}", diff, dense.du_flat);
    }
}
