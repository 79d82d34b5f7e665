use proptest::prelude::*;
use sparseconv_core::harness::{expected_counters, verify, Problem, ProblemSpec};
use sparseconv_core::oracle::max_relative_error;
use sparseconv_core::sparsity::gen_sparse;
use sparseconv_core::tensor::{pack, unpack};
use sparseconv_core::{
    plan, sparse_bww, sparse_fwd, CheckOn, Component, ConvShape, Error, Executor, KernelPlan, Layout, Mode,
    PlainTensor, VectorSpec,
};

fn shapes() -> Vec<ConvShape> {
    vec![
        ConvShape::same(3, 16, 32, 7, 9, 3, 1),
        ConvShape::same(5, 32, 16, 9, 8, 3, 2),
        ConvShape::same(2, 32, 16, 5, 5, 1, 1),
        ConvShape::same(2, 16, 16, 6, 6, 5, 1),
        ConvShape {
            pad_h: 0,
            pad_w: 0,
            ..ConvShape::same(4, 16, 16, 8, 7, 3, 1)
        },
        ConvShape {
            filter_h: 1,
            pad_h: 0,
            stride_h: 1,
            ..ConvShape::same(3, 16, 16, 6, 10, 3, 2)
        },
    ]
}

fn spec(shape: ConvShape, component: Component, sparsity: f64, lanes: usize, check_on: Option<CheckOn>) -> ProblemSpec {
    ProblemSpec {
        lanes,
        seed: 11,
        check_on,
        ..ProblemSpec::new(shape, component, sparsity)
    }
}

fn variants() -> Vec<(Component, Option<CheckOn>)> {
    vec![
        (Component::Fwd, None),
        (Component::Bwi, None),
        (Component::Bww, Some(CheckOn::Input)),
        (Component::Bww, Some(CheckOn::OutputGrad)),
    ]
}

/// Same plan with a different tile and pipelining choice.
fn reshape_plan(p: &KernelPlan, tile: usize, pipelined: bool, filter_w: usize) -> KernelPlan {
    let qv = tile / p.lanes;
    KernelPlan {
        tile,
        pipelined,
        skippable: filter_w * qv,
        ring_size: (filter_w + pipelined as usize) * qv,
        ..p.clone()
    }
}

#[test]
fn kernels_match_the_oracle_with_exact_counters() {
    let exec = Executor::new(1).unwrap();
    for shape in shapes() {
        for lanes in [4, 8, 16] {
            for (component, check_on) in variants() {
                for sparsity in [0.0, 0.5, 0.9, 1.0] {
                    let problem = Problem::build(&spec(shape, component, sparsity, lanes, check_on)).unwrap();
                    for mode in [Mode::Sparse, Mode::Dense] {
                        let r = verify(&problem, &exec, mode).unwrap();
                        assert!(
                            r.passed(),
                            "{shape:?} V={lanes} {component} {check_on:?} s={sparsity} {mode}: err {} counters {:?} expected {:?}",
                            r.max_rel_error,
                            r.counters,
                            expected_counters(&r.expected, mode)
                        );
                    }
                }
            }
        }
    }
}

#[test]
fn every_tile_and_pipelining_choice_is_correct() {
    let exec = Executor::new(1).unwrap();
    let shape = ConvShape::same(3, 32, 32, 6, 11, 3, 2);
    for (component, check_on) in variants() {
        let base = Problem::build(&spec(shape, component, 0.6, 8, check_on)).unwrap();
        for tile in [8, 16, 32] {
            let pipelining: &[bool] = if component == Component::Bww { &[false] } else { &[false, true] };
            for &pipelined in pipelining {
                for minibatch_tile in [1, 2, 3] {
                    let plan = KernelPlan {
                        minibatch_tile: if component == Component::Bww { 1 } else { minibatch_tile },
                        ..reshape_plan(&base.plan, tile, pipelined, shape.filter_w)
                    };
                    let problem = Problem::from_plain(shape, plan, base.plain.clone()).unwrap();
                    let r = verify(&problem, &exec, Mode::Sparse).unwrap();
                    assert!(r.passed(), "{component} tile {tile} pipelined {pipelined}: {r:?}");
                }
            }
        }
    }
}

#[test]
fn ragged_minibatch_in_the_minibatch_innermost_layout() {
    let exec = Executor::new(1).unwrap();
    for batch in [1, 3, 5, 9, 17] {
        let shape = ConvShape::same(batch, 16, 16, 5, 5, 3, 1);
        for check_on in [CheckOn::Input, CheckOn::OutputGrad] {
            for lanes in [4, 8, 16] {
                let problem = Problem::build(&spec(shape, Component::Bww, 0.5, lanes, Some(check_on))).unwrap();
                for mode in [Mode::Sparse, Mode::Dense] {
                    let r = verify(&problem, &exec, mode).unwrap();
                    assert!(r.passed(), "N={batch} {check_on:?} V={lanes} {mode}: {r:?}");
                }
            }
        }
    }
}

#[test]
fn results_do_not_depend_on_worker_count() {
    let shape = ConvShape::same(5, 32, 32, 9, 9, 3, 1);
    for (component, check_on) in variants() {
        let problem = Problem::build(&spec(shape, component, 0.7, 8, check_on)).unwrap();
        let (reference, counters) = problem.run(&Executor::new(1).unwrap(), Mode::Sparse).unwrap();
        for workers in [2, 4] {
            let exec = Executor::new(workers).unwrap();
            for _ in 0..3 {
                let (out, c) = problem.run(&exec, Mode::Sparse).unwrap();
                assert_eq!(out.data(), reference.data(), "{component} workers {workers}");
                assert_eq!(c, counters);
            }
        }
    }
}

#[test]
fn ring_never_exceeds_its_plan() {
    let exec = Executor::new(1).unwrap();
    for shape in shapes() {
        for (component, check_on) in variants() {
            let problem = Problem::build(&spec(shape, component, 0.3, 4, check_on)).unwrap();
            let (_, c) = problem.run(&exec, Mode::Sparse).unwrap();
            assert!(c.ring_peak as usize <= problem.plan.ring_size);
            assert!(c.ring_peak > 0);
        }
    }
}

#[test]
fn sparse_and_dense_modes_agree() {
    let exec = Executor::new(1).unwrap();
    let shape = ConvShape::same(4, 16, 32, 8, 8, 3, 1);
    for (component, check_on) in variants() {
        let problem = Problem::build(&spec(shape, component, 0.8, 16, check_on)).unwrap();
        let (sparse, cs) = problem.run(&exec, Mode::Sparse).unwrap();
        let (dense, cd) = problem.run(&exec, Mode::Dense).unwrap();
        assert!(max_relative_error(unpack(&sparse).data(), unpack(&dense).data()) < 1e-5);
        assert!(cs.executed_vector_fmas < cd.executed_vector_fmas);
        assert_eq!(cd.checked_vectors, 0);
        assert_eq!(
            (cs.output_vector_loads, cs.output_vector_stores),
            (cd.output_vector_loads, cd.output_vector_stores)
        );
    }
}

#[test]
fn single_nonzero_interior_pixel_costs_r_times_s_times_tile_vectors() {
    let shape = ConvShape::same(1, 16, 16, 8, 8, 3, 1);
    let spec16 = VectorSpec::new(16).unwrap();
    let p = plan(&shape, Component::Fwd, spec16, 30).unwrap();
    let mut d = PlainTensor::zeros(shape.input_dims());
    d.set([0, 5, 4, 3], 1.0);
    let g = gen_sparse(shape.filter_dims(), 0.0, 3);
    let (_, c) = sparse_fwd(
        &pack(&d, Layout::Nchwc, 16).unwrap(),
        &pack(&g, Layout::KcrsBlocked, 16).unwrap(),
        &shape,
        &p,
        Mode::Sparse,
    )
    .unwrap();
    // seen once per filter row
    assert_eq!(c.nonzero_lanes, 3);
    assert_eq!(c.executed_vector_fmas, (3 * 3 * p.tile_vectors()) as u64);
}

#[test]
fn one_by_one_bww_is_an_outer_product() {
    let shape = ConvShape::same(8, 16, 16, 1, 1, 1, 1);
    let spec8 = VectorSpec::new(8).unwrap();
    let d = gen_sparse(shape.input_dims(), 0.0, 1);
    let dy = gen_sparse(shape.output_dims(), 0.0, 2);
    for check_on in [CheckOn::Input, CheckOn::OutputGrad] {
        let p = sparseconv_core::plan_bww(&shape, check_on, spec8, 30).unwrap();
        let (dl, gl) = match check_on {
            CheckOn::Input => (Layout::Chwn, Layout::Nchwc),
            CheckOn::OutputGrad => (Layout::Nchwc, Layout::Chwn),
        };
        let (dg, c) = sparse_bww(&pack(&d, dl, 8).unwrap(), &pack(&dy, gl, 8).unwrap(), &shape, &p, Mode::Sparse).unwrap();
        let dg = unpack(&dg);
        for k in 0..16 {
            for ch in 0..16 {
                let expected: f64 = (0..8).map(|n| d.get([n, ch, 0, 0]) as f64 * dy.get([n, k, 0, 0]) as f64).sum();
                assert!((dg.get([k, ch, 0, 0]) as f64 - expected).abs() < 1e-5 * expected.abs().max(1.0));
            }
        }
        // one vector FMA per (image, checked channel, tile vector)
        assert_eq!(c.executed_vector_fmas, 8 * 16 * 2);
    }
}

#[test]
fn zero_checked_operand_skips_all_work() {
    let exec = Executor::new(2).unwrap();
    let shape = ConvShape::same(3, 16, 16, 6, 6, 3, 1);
    for (component, check_on) in variants() {
        let problem = Problem::build(&spec(shape, component, 1.0, 8, check_on)).unwrap();
        let (out, c) = problem.run(&exec, Mode::Sparse).unwrap();
        assert_eq!(c.executed_vector_fmas, 0);
        assert_eq!(c.nonzero_lanes, 0);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn layout_and_dimension_errors() {
    let exec = Executor::new(1).unwrap();
    let shape = ConvShape::same(2, 16, 16, 6, 6, 3, 1);
    for (component, check_on) in variants() {
        let mut problem = Problem::build(&spec(shape, component, 0.5, 8, check_on)).unwrap();
        problem.corrupt_second_layout();
        assert!(matches!(problem.run(&exec, Mode::Sparse), Err(Error::LayoutMismatch { .. })), "{component}");
    }
    let problem = Problem::build(&spec(shape, Component::Fwd, 0.5, 8, None)).unwrap();
    let other = ConvShape { height: 7, ..shape };
    assert!(matches!(
        exec.run(problem.inputs(), &other, &problem.plan, Mode::Sparse),
        Err(Error::DimMismatch { .. })
    ));
    let mut bad = problem.plan.clone();
    bad.ring_size += 1;
    assert!(matches!(exec.run(problem.inputs(), &shape, &bad, Mode::Sparse), Err(Error::PlanMismatch(_))));
    let bwi = Problem::build(&spec(shape, Component::Bwi, 0.5, 8, None)).unwrap();
    assert!(matches!(exec.run(problem.inputs(), &shape, &bwi.plan, Mode::Sparse), Err(Error::PlanMismatch(_))));
    assert!(matches!(Executor::new(0), Err(Error::PlanMismatch(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn random_shapes_verify(
        batch in 1usize..6,
        cb in 1usize..3,
        kb in 1usize..3,
        h in 1usize..9,
        w in 1usize..9,
        filter in prop::sample::select(vec![1usize, 2, 3, 5]),
        stride in 1usize..3,
        lanes in prop::sample::select(vec![4usize, 8]),
        sparsity in 0.0f64..1.0,
        which in 0usize..4,
        seed in any::<u64>(),
    ) {
        let shape = ConvShape::same(batch, cb * lanes, kb * lanes, h + filter, w + filter, filter, stride);
        let (component, check_on) = variants()[which];
        let problem = Problem::build(&ProblemSpec { seed, ..spec(shape, component, sparsity, lanes, check_on) }).unwrap();
        let exec = Executor::new(1).unwrap();
        for mode in [Mode::Sparse, Mode::Dense] {
            let r = verify(&problem, &exec, mode).unwrap();
            prop_assert!(r.passed(), "{:?} {} {:?}: {:?}", shape, component, mode, r.max_rel_error);
        }
    }

    /// Zeroing more elements of the checked operand never adds work.
    #[test]
    fn work_is_monotone_in_zeros(seed in any::<u64>(), low in 0.0f64..0.5, extra in 0.0f64..0.5, which in 0usize..4) {
        let shape = ConvShape::same(3, 16, 16, 6, 7, 3, 1);
        let (component, check_on) = variants()[which];
        let problem = Problem::build(&ProblemSpec { seed, ..spec(shape, component, low, 8, check_on) }).unwrap();
        let exec = Executor::new(1).unwrap();
        let (_, before) = problem.run(&exec, Mode::Sparse).unwrap();
        let mask = gen_sparse(problem.checked().dims(), extra, seed ^ 0x5a5a);
        let mut plain = problem.plain.clone();
        let target = match (component, problem.plan.check_on) {
            (Component::Bww, CheckOn::OutputGrad) => &mut plain.1,
            _ => &mut plain.0,
        };
        for (v, m) in target.data_mut().iter_mut().zip(mask.data()) {
            if *m == 0.0 {
                *v = 0.0;
            }
        }
        let sparser = Problem::from_plain(shape, problem.plan.clone(), plain).unwrap();
        let (_, after) = sparser.run(&exec, Mode::Sparse).unwrap();
        prop_assert!(after.executed_vector_fmas <= before.executed_vector_fmas);
        prop_assert!(after.nonzero_lanes <= before.nonzero_lanes);
        prop_assert_eq!(after.checked_vectors, before.checked_vectors);
    }
}
