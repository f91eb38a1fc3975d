use std::path::Path;

use reinvoke::pipeline::PipelineConfig;

#[test]
fn example_config_parses() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../reinvoke.example.toml");
    let config = PipelineConfig::load(&path).unwrap();
    config.validate().unwrap();
    assert_eq!(config.m, 10);
    assert_eq!(config.methods.len(), 4);
}
