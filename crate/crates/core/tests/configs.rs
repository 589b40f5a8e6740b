use std::path::PathBuf;

use tileseg::phantom::PresetFile;
use tileseg::transfer::{load_experiment_spec, CohortSource, ExperimentKind};
use tileseg::volio::CohortTag;

fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

#[test]
fn shipped_presets_match_builtin() {
    let text = std::fs::read_to_string(configs().join("phantom_presets.json")).unwrap();
    let file: PresetFile = serde_json::from_str(&text).unwrap();
    assert_eq!(file, PresetFile::builtin());
}

#[test]
fn experiment_specs_load() {
    let presets = PresetFile::builtin();
    for (name, kind) in [("pediatric", ExperimentKind::Pediatric), ("contrast", ExperimentKind::Contrast)] {
        let spec = load_experiment_spec(configs().join(format!("experiments/{name}.json"))).unwrap();
        assert_eq!(spec.kind, kind);
        assert_eq!(spec.transfer.epochs, 30);
        assert_eq!(spec.transfer.folds, 5);
        assert_eq!(spec.transfer.lr, 1e-4);
        let CohortSource::Generate(new) = &spec.new_cohort else { panic!("generated cohort expected") };
        let CohortSource::Generate(orig) = &spec.original_cohort else { panic!("generated cohort expected") };
        assert_eq!(orig.phantom, presets.adult.clone().with_seed(orig.phantom.seed));
        match kind {
            ExperimentKind::Pediatric => {
                assert_eq!(new.phantom, presets.pediatric.clone().with_seed(new.phantom.seed));
                assert_eq!(new.cohort, CohortTag::New);
            }
            ExperimentKind::Contrast => {
                assert_eq!(new.phantom, presets.contrast.clone().with_seed(new.phantom.seed));
                assert_eq!(new.cohort, CohortTag::ContrastPair);
            }
        }
    }
}
