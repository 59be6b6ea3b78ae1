use std::path::PathBuf;

use mflq::model::{classify_forcing, ForcingClass};
use mflq::scenario::parse_scenario;

fn dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

#[test]
fn every_shipped_scenario_parses() {
    let mut count = 0;
    for entry in std::fs::read_dir(dir()).unwrap() {
        let path = entry.unwrap().path();
        let s = parse_scenario(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        let stem = path.file_stem().unwrap().to_str().unwrap();
        assert_eq!(s.name(), stem);
        count += 1;
    }
    assert!(count >= 4);
}

#[test]
fn forcing_classes_of_shipped_scenarios() {
    let class = |name: &str| {
        let s = parse_scenario(dir().join(name)).unwrap();
        classify_forcing(s.model().signals()).unwrap()
    };
    assert_eq!(class("scalar_analytic.json"), ForcingClass::Homogeneous);
    assert_eq!(class("two_regime_homogeneous.json"), ForcingClass::Homogeneous);
    assert_eq!(class("integrable_forcing.json"), ForcingClass::Integrable);
    assert_eq!(class("sinusoidal_lic.json"), ForcingClass::LocalIntegrable);
    assert_eq!(class("constant_b_scalar.json"), ForcingClass::LocalIntegrable);
    assert_eq!(class("reference.jsonc"), ForcingClass::LocalIntegrable);
}
