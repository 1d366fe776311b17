//! Fixtures shared by the benchmarks.

use shield_core::toymodel::{render, sample_scenes, Injectors, VulnerabilityInjector};
use shield_core::{Image, ModelConfig, ToyModel};

/// The vulnerability-injected model and one rendered three-object scene.
pub fn fixture() -> (ToyModel, Image) {
    let inj = Injectors {
        vulnerability: Some(VulnerabilityInjector { gain: 500.0 }),
        ..Injectors::default()
    };
    let model = ToyModel::new(ModelConfig::default(), inj).expect("default config is valid");
    let scene = sample_scenes(model.config(), 1, 3, 1).expect("scene sampling").remove(0);
    let image = render(&model, &scene, 1).expect("render");
    (model, image)
}
