//! Reverse-mode gradients against central finite differences.

mod common;

use common::gradients::{worst_over_seeds, CASES, SEEDS, TOL};

macro_rules! cases {
    ($($name:ident),* $(,)?) => {$(
        #[test]
        fn $name() {
            let (_, case) = CASES.iter().find(|(n, _)| *n == stringify!($name)).expect("registered case");
            let (err, seed) = worst_over_seeds(*case);
            assert!(err <= TOL, "{}: relative error {err:.3e} at seed {seed} of {SEEDS}", stringify!($name));
        }
    )*};
}

cases!(
    conv2d,
    conv2d_no_bias,
    relu,
    maxpool2x2,
    global_avg_pool,
    linear,
    dropout,
    log_softmax,
    mix_kernel,
    add_sum_sum_squares_weighted_sum,
    kd_loss,
    dictconv_basis_bias,
    dictconv_input_mixing,
    student_network,
);

#[test]
fn every_case_is_covered() {
    assert_eq!(CASES.len(), 14);
}
