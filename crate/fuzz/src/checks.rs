//! Target bodies, shared with the corpus replay test in `crates/core/tests`.
//! Each one must not panic, and whatever parses must survive a round trip.

use dfmt::experiment::{ExperimentSpec, VariantSpec};
use dfmt::planner::near::NeighborCache;
use dfmt::scenario::ScenarioSpec;
use dfmt::Variant;

pub fn scenario(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(spec) = ScenarioSpec::parse(text) else { return };
    let again = ScenarioSpec::parse(&serde_json::to_string(&spec).unwrap()).unwrap();
    assert_eq!(spec, again);
    if let Ok(p) = spec.build() {
        assert_eq!(ScenarioSpec::from_problem(&p).build().unwrap().x_init(), p.x_init());
    }
}

pub fn experiment(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(spec) = ExperimentSpec::parse(text) else { return };
    let again = ExperimentSpec::parse(&serde_json::to_string(&spec).unwrap()).unwrap();
    assert_eq!(spec, again);
}

pub fn neighbor_cache(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(cache) = NeighborCache::parse(text) else { return };
    let mut buf = Vec::new();
    cache.write_to(&mut buf).unwrap();
    assert_eq!(NeighborCache::parse(std::str::from_utf8(&buf).unwrap()).unwrap(), cache);
}

pub fn variant(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(v) = text.parse::<Variant>() {
        assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
    }
    if let Ok(v) = text.parse::<VariantSpec>() {
        assert_eq!(v.to_string().parse::<VariantSpec>().unwrap(), v);
    }
}
