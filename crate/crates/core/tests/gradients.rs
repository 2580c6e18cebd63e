mod common;

use common::{gradient_case, small_blob, small_siren};
use nerfprior::inversion::LossWeights;
use nerfprior::operators::OperatorSpec;

fn operators() -> Vec<OperatorSpec> {
    vec![
        OperatorSpec::Identity,
        OperatorSpec::PixelMask { ratio: 0.5 },
        OperatorSpec::BoxMask { x0: 2, y0: 2, w: 3, h: 4 },
        OperatorSpec::GaussianCs { m: 30 },
        OperatorSpec::Downsample { factor: 2 },
    ]
}

#[test]
fn measurement_gradient_flows_through_every_operator() {
    for spec in [small_blob(), small_siren(3)] {
        for op in operators() {
            let err = gradient_case(&spec, &op, &LossWeights::data_only(), 11, 30).unwrap();
            assert!(err < 1e-4, "{:?} {op}: {err:e}", spec.kind);
        }
    }
}

#[test]
fn perceptual_slot_gradient_is_added() {
    let wts = LossWeights {
        measurement: 0.0,
        perceptual: 1.0,
        ..LossWeights::data_only()
    };
    let op = OperatorSpec::Downsample { factor: 2 };
    let err = gradient_case(&small_blob(), &op, &wts, 4, 24).unwrap();
    assert!(err < 1e-4, "{err:e}");
}
