//! Fixtures shared by the benchmarks.

use mulse_core::conformal::Calibration;
use mulse_core::experiment::calibrate_model;
use mulse_core::perceiver::{Model, PerceiverConfig};
use mulse_core::synth::{generate_task, Dataset, SyntheticTaskSpec};
use mulse_core::Combiner;

pub struct Fixture {
    pub data: Dataset,
    pub model: Model,
    pub calibration: Calibration,
}

/// Untrained model on the imbalanced two-modality task, calibrated so the
/// hybrid approach routes both ways. Timings do not depend on the weights.
pub fn fixture() -> Fixture {
    let mut spec = SyntheticTaskSpec::imbalanced(0);
    spec.n_train = 4;
    spec.n_cal = 100;
    spec.n_test = 32;
    let data = generate_task(&spec).expect("valid spec");
    let model =
        Model::new(PerceiverConfig::desk(), data.registry.clone(), 1).expect("valid config");
    let calibration = calibrate_model(&model, &data.cal, 0.1, 0.3, &[Combiner::default()])
        .expect("calibration succeeds");
    Fixture {
        data,
        model,
        calibration,
    }
}
