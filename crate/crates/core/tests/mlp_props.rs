use melemad::dataset::Matrix;
use melemad::maml::mlp::{hessian_vector_product, loss_and_gradient, DropoutMask, MlpArchitecture, ModelParams};
use proptest::prelude::*;

mod common;
use common::{central_differences, relative_error};

const STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
struct Case {
    params: ModelParams,
    x: Matrix,
    labels: Vec<u8>,
    mask: Option<DropoutMask>,
    direction: Vec<f64>,
}

fn case_strategy() -> impl Strategy<Value = Case> {
    (1usize..5, prop::collection::vec(1usize..6, 1..4), 1usize..7, prop_oneof![Just(0.0), 0.1f64..0.5], any::<u64>())
        .prop_flat_map(|(input, hidden, rows, rate, mask_seed)| {
            let arch = MlpArchitecture::new(input, hidden, rate).unwrap();
            let n = arch.param_count();
            (
                Just(arch),
                prop::collection::vec(-1.0f64..1.0, n),
                prop::collection::vec(-2.0f64..2.0, rows * input),
                prop::collection::vec(0u8..=1, rows),
                prop::collection::vec(-1.0f64..1.0, n),
                Just(mask_seed),
            )
        })
        .prop_map(|(arch, values, x, labels, direction, mask_seed)| {
            let rows = labels.len();
            let mask = DropoutMask::sample(&arch, rows, mask_seed);
            Case {
                x: Matrix::new(rows, arch.input_dim, x).unwrap(),
                params: ModelParams::new(arch, values).unwrap(),
                labels,
                mask,
                direction,
            }
        })
}

fn loss_at(c: &Case, values: &[f64]) -> f64 {
    let p = ModelParams::new(c.params.architecture.clone(), values.to_vec()).unwrap();
    loss_and_gradient(&p, &c.x, &c.labels, c.mask.as_ref()).unwrap().loss
}

fn grad_at(c: &Case, values: &[f64]) -> Vec<f64> {
    let p = ModelParams::new(c.params.architecture.clone(), values.to_vec()).unwrap();
    loss_and_gradient(&p, &c.x, &c.labels, c.mask.as_ref()).unwrap().grad
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn gradient_matches_central_differences(c in case_strategy()) {
        let analytic = grad_at(&c, &c.params.values);
        let numeric = central_differences(|v| loss_at(&c, v), &c.params.values, STEP);
        let err = relative_error(&analytic, &numeric);
        prop_assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn hvp_matches_gradient_differences(c in case_strategy()) {
        let hv = hessian_vector_product(&c.params, &c.x, &c.labels, c.mask.as_ref(), &c.direction).unwrap();
        let shifted = |s: f64| -> Vec<f64> {
            c.params.values.iter().zip(&c.direction).map(|(p, d)| p + s * d).collect()
        };
        let up = grad_at(&c, &shifted(STEP));
        let down = grad_at(&c, &shifted(-STEP));
        let numeric: Vec<f64> = up.iter().zip(&down).map(|(a, b)| (a - b) / (2.0 * STEP)).collect();
        let err = relative_error(&hv, &numeric);
        prop_assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn loss_and_gradient_stay_finite(c in case_strategy(), blow_up in 1e2f64..1e6) {
        let values: Vec<f64> = c.params.values.iter().map(|v| v * blow_up).collect();
        let x = Matrix::new(c.x.rows(), c.x.cols(), c.x.as_slice().iter().map(|v| v * blow_up).collect()).unwrap();
        let p = ModelParams::new(c.params.architecture.clone(), values).unwrap();
        let out = loss_and_gradient(&p, &x, &c.labels, c.mask.as_ref()).unwrap();
        prop_assert!(out.loss.is_finite());
        prop_assert!(out.loss <= -(1e-7f64).ln() + 1e-9);
        prop_assert!(out.grad.iter().all(|g| g.is_finite()));
        prop_assert!(out.probs.iter().all(|&q| (1e-7..=1.0 - 1e-7).contains(&q)));
    }
}
