use entropycache_core::harness::{self, parse_grid, RunSpec};
use entropycache_core::{DecodeConfig, ModelConfig, PolicySpec};

#[test]
fn decision_time_is_a_small_fraction_across_the_grid() {
    let spec = RunSpec {
        model: ModelConfig {
            num_layers: 2,
            num_heads: 4,
            head_dim: 16,
            max_seq_len: 256,
            ..ModelConfig::default()
        },
        decode: DecodeConfig {
            gen_length: 32,
            ..DecodeConfig::default()
        },
        policy: PolicySpec::entropy_cache(1.5, 64),
        prompt: (0..224).map(|i| (i * 7 % 250) as u32).collect(),
        grid: parse_grid("tau=0.5,1.0,1.5,2.0,2.5 k=16,32,64,128,256").unwrap(),
        ..RunSpec::default()
    };
    let report = harness::run(&spec).unwrap();
    assert_eq!(report.cells.len(), 25);
    for cell in &report.cells {
        let f = cell.summary.decision_time_fraction;
        assert!(f < 0.05, "{}: decision fraction {f}", cell.id);
    }
}
