use bsonet_model::bsformer::{BSformer, BSformerConfig, InitMode, DCR_LAYERS};
use bsonet_model::nn::Params;
use bsonet_model::ranet::{RANet, RANetConfig};
use bsonet_model::{BSoNet, ModelConfig, Precision};

fn conv(cin: usize, cout: usize, k: usize) -> usize {
    cin * cout * k * k + cout
}

fn ranet_count(c: usize, layers: usize, r: usize) -> usize {
    conv(1, c, 3) + layers * conv(c, c, 3) + conv(c, c / r, 1) + conv(c / r, c, 1) + conv(c, 1, 3)
}

fn dcr_count(c: usize, g: usize) -> usize {
    (0..DCR_LAYERS).map(|i| conv(c + i * g, g, 3)).sum::<usize>() + conv(c + DCR_LAYERS * g, c, 1)
}

fn fln_count(c: usize, cfg: &BSformerConfig) -> usize {
    let s = cfg.fln_subsets;
    2 * cfg.fln_dcr_blocks * dcr_count(c, cfg.dcr_growth)
        + (s - 1) * conv(c / s, c / s, 3)
        + conv(c, c, 1)
        + conv(3 * c, c, 1)
}

fn block_count(d: usize, heads: usize, cfg: &BSformerConfig) -> usize {
    let hidden = d * cfg.mlp_ratio;
    let span = 2 * cfg.window_size - 1;
    let norms = 2 * 2 * d;
    let attn = (d * 3 * d + 3 * d) + (d * d + d) + span * span * heads;
    let leff = (d * hidden + hidden) + (9 * hidden + hidden) + (hidden * d + d);
    norms + attn + leff
}

fn bsformer_count(cfg: &BSformerConfig) -> usize {
    let c = cfg.embed_dim;
    let levels = cfg.encoder_depths.len();
    let mut n = conv(1, c, 3) + fln_count(c, cfg) + conv(c, c, 1);
    for l in 0..levels {
        let cl = c << l;
        let stage = cfg.encoder_depths[l] * block_count(cl, cfg.heads[l], cfg);
        // encoder + down, then up + reduce + decoder
        n += stage + conv(cl, 2 * cl, 3);
        n += (2 * cl * cl * 4 + cl) + conv(2 * cl, cl, 1) + stage;
    }
    n += cfg.bottleneck_depth * block_count(c << levels, cfg.heads[levels], cfg);
    n += (0..=levels).map(|l| conv(c << l, c, 1)).sum::<usize>() + conv(c * (levels + 1), c, 3);
    n + fln_count(c, cfg) + conv(c, 1, 3)
}

#[test]
fn ranet_count_matches_closed_form() {
    let cfg = RANetConfig {
        channels: 8,
        num_layers: 2,
        ca_reduction: 4,
        ..RANetConfig::default()
    };
    let net = RANet::init(&cfg, Precision::F32).unwrap();
    assert_eq!(ranet_count(8, 2, 4), 1363);
    assert_eq!(net.param_count(), 1363);
}

#[test]
fn bsformer_counts_match_closed_form() {
    for cfg in [BSformerConfig::toy(), BSformerConfig::paper()] {
        let net = BSformer::init(&cfg, Precision::F32, InitMode::Standard).unwrap();
        assert_eq!(net.param_count(), bsformer_count(&cfg));
    }
}

#[test]
fn pipeline_count_is_sum_of_parts() {
    let mut cfg = ModelConfig::toy();
    let r = ranet_count(cfg.ranet.channels, cfg.ranet.num_layers, cfg.ranet.ca_reduction);
    let b = bsformer_count(&cfg.bsformer);
    let shared = BSoNet::init(&cfg, Precision::F32, InitMode::Standard).unwrap();
    assert_eq!(shared.param_count(), r + b);
    cfg.ranet.separate_stages = true;
    let separate = BSoNet::init(&cfg, Precision::F32, InitMode::Standard).unwrap();
    assert_eq!(separate.param_count(), 2 * r + b);
}

#[test]
fn enumeration_order_is_documented_order() {
    let model = BSoNet::init(&ModelConfig::toy(), Precision::F32, InitMode::Standard).unwrap();
    let names: Vec<String> = model.named_params().into_iter().map(|p| p.name).collect();
    let first_index = |prefix: &str| names.iter().position(|n| n.starts_with(prefix)).unwrap();
    let order = [
        "ranet_in.head",
        "ranet_in.body.0",
        "ranet_in.ca.fc1",
        "ranet_in.tail",
        "bsformer.embed",
        "bsformer.fln_head",
        "bsformer.proj_in",
        "bsformer.encoder.0",
        "bsformer.down.0",
        "bsformer.encoder.1",
        "bsformer.down.1",
        "bsformer.bottleneck",
        "bsformer.up.1",
        "bsformer.reduce.1",
        "bsformer.decoder.1",
        "bsformer.up.0",
        "bsformer.reduce.0",
        "bsformer.decoder.0",
        "bsformer.ffn",
        "bsformer.fln_tail",
        "bsformer.out",
    ];
    let positions: Vec<usize> = order.iter().map(|p| first_index(p)).collect();
    assert!(positions.windows(2).all(|w| w[0] < w[1]), "{positions:?}");
    let unique: std::collections::HashSet<&String> = names.iter().collect();
    assert_eq!(unique.len(), names.len());
}

#[test]
fn decay_flags_exempt_biases_and_norms() {
    let model = BSoNet::init(&ModelConfig::toy(), Precision::F32, InitMode::Standard).unwrap();
    for p in model.named_params() {
        let exempt = p.name.ends_with(".bias")
            || p.name.ends_with("_bias")
            || p.name.contains(".norm")
            || p.name.ends_with("rel_bias");
        assert_eq!(p.decay, !exempt, "{}", p.name);
    }
}
