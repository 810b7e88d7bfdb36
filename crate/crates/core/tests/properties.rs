use nowcast_core::convlstm::{cell_step, init_params, network_forward, CellActivation, CellState, ConvLstmCellParams, NetworkSpec};
use nowcast_core::tensor::{add, conv2d_same, relu, scale, sigmoid, tanh_act, ConvKernel, Grid3, SeqBatch};
use proptest::prelude::*;

fn grid(c: usize, h: usize, w: usize, range: f64) -> impl Strategy<Value = Grid3> {
    prop::collection::vec(-range..range, c * h * w).prop_map(move |v| Grid3::new(c, h, w, v).unwrap())
}

fn kernel(o: usize, i: usize, kh: usize, kw: usize) -> impl Strategy<Value = ConvKernel> {
    prop::collection::vec(-1.0..1.0f64, o * i * kh * kw).prop_map(move |v| ConvKernel::new(o, i, kh, kw, v).unwrap())
}

type ConvCase = (Grid3, Grid3, ConvKernel, Vec<f64>, f64, f64);

fn conv_case() -> impl Strategy<Value = ConvCase> {
    (1usize..4, 1usize..4, 1usize..5, 1usize..5, 1usize..5, 1usize..5).prop_flat_map(|(cin, cout, h, w, kh, kw)| {
        (
            grid(cin, h, w, 3.0),
            grid(cin, h, w, 3.0),
            kernel(cout, cin, kh, kw),
            prop::collection::vec(-1.0..1.0f64, cout),
            -2.0..2.0f64,
            -2.0..2.0f64,
        )
    })
}

fn cell_case(f: usize, cin: usize) -> impl Strategy<Value = (ConvLstmCellParams, Grid3, CellState)> {
    let k = || kernel(f, cin, 2, 2);
    let kh = || kernel(f, f, 2, 2);
    let b = || prop::collection::vec(-1.0..1.0f64, f);
    (
        (k(), k(), k(), k()),
        (kh(), kh(), kh(), kh()),
        (grid(f, 2, 2, 1.0), grid(f, 2, 2, 1.0), grid(f, 2, 2, 1.0)),
        (b(), b(), b(), b()),
        grid(cin, 2, 2, 2.0),
        grid(f, 2, 2, 2.0),
        grid(f, 2, 2, 2.0),
    )
        .prop_map(move |(wx, wh, peep, bias, x, h, c)| {
            let mut p = ConvLstmCellParams::zeros(f, cin, (2, 2), (2, 2));
            (p.w_xi, p.w_xf, p.w_xc, p.w_xo) = wx;
            (p.w_hi, p.w_hf, p.w_hc, p.w_ho) = wh;
            (p.w_ci, p.w_cf, p.w_co) = peep;
            (p.b_i, p.b_f, p.b_c, p.b_o) = bias;
            (p, x, CellState { h, c })
        })
}

proptest! {
    #[test]
    fn conv_preserves_spatial_shape((x, _, k, b, _, _) in conv_case()) {
        let out = conv2d_same(&x, &k, &b).unwrap();
        prop_assert_eq!(out.shape(), (k.out_channels(), x.height(), x.width()));
    }

    #[test]
    fn conv_is_linear((x, y, k, _, alpha, beta) in conv_case()) {
        let zero = vec![0.0; k.out_channels()];
        let mixed = add(&scale(&x, alpha), &scale(&y, beta)).unwrap();
        let lhs = conv2d_same(&mixed, &k, &zero).unwrap();
        let rhs = add(
            &scale(&conv2d_same(&x, &k, &zero).unwrap(), alpha),
            &scale(&conv2d_same(&y, &k, &zero).unwrap(), beta),
        )
        .unwrap();
        for (a, b) in lhs.data().iter().zip(rhs.data()) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn conv_is_deterministic((x, _, k, b, _, _) in conv_case()) {
        let a = conv2d_same(&x, &k, &b).unwrap();
        let c = conv2d_same(&x, &k, &b).unwrap();
        prop_assert!(a.data().iter().zip(c.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn activation_ranges(x in grid(3, 2, 2, 36.0), t in grid(3, 2, 2, 18.0)) {
        prop_assert!(sigmoid(&x).data().iter().all(|&v| v > 0.0 && v < 1.0));
        prop_assert!(tanh_act(&t).data().iter().all(|&v| v > -1.0 && v < 1.0));
        let r = relu(&x);
        prop_assert_eq!(relu(&r), r);
    }

    #[test]
    fn saturated_activations_stay_in_closed_range(x in grid(3, 2, 2, 1e6)) {
        prop_assert!(sigmoid(&x).data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert!(tanh_act(&x).data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }

    #[test]
    fn relu_cell_hidden_state_is_nonnegative((p, x, prev) in cell_case(3, 2)) {
        let s = cell_step(&p, &x, &prev, CellActivation::Relu).unwrap();
        prop_assert!(s.h.data().iter().all(|&v| v >= 0.0));
        prop_assert_eq!(s.h.shape(), prev.h.shape());
        prop_assert_eq!(s.c.shape(), prev.c.shape());
    }

    #[test]
    fn tanh_cell_without_recurrent_weights_is_bounded((mut p, x, prev) in cell_case(3, 2)) {
        for w in [&mut p.w_hi, &mut p.w_hf, &mut p.w_hc, &mut p.w_ho] {
            *w = ConvKernel::zeros(3, 3, 2, 2);
        }
        for w in [&mut p.w_ci, &mut p.w_cf, &mut p.w_co] {
            *w = Grid3::zeros(3, 2, 2);
        }
        let s = cell_step(&p, &x, &prev, CellActivation::Tanh).unwrap();
        prop_assert!(s.h.data().iter().all(|&v| v > -1.0 && v < 1.0));
    }

    #[test]
    fn network_forward_is_deterministic_and_order_independent(
        seed in 0u64..1000,
        data in prop::collection::vec(0.0..1.0f64, 3 * 3 * 44),
    ) {
        let spec = NetworkSpec { layer1_filters: 3, layer2_filters: 2, ..NetworkSpec::default() };
        let params = init_params(&spec, seed);
        let batch = SeqBatch::new(3, 3, 11, 2, 2, data.clone()).unwrap();
        let a = network_forward(&spec, &params, &batch).unwrap();
        let b = network_forward(&spec, &params, &batch).unwrap();
        prop_assert_eq!(&a, &b);

        let mut reversed = Vec::with_capacity(data.len());
        for i in (0..3).rev() {
            reversed.extend_from_slice(batch.item(i));
        }
        let r = network_forward(&spec, &params, &SeqBatch::new(3, 3, 11, 2, 2, reversed).unwrap()).unwrap();
        for i in 0..3 {
            prop_assert_eq!(&a[i], &r[2 - i]);
        }
    }
}
