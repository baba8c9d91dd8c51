//! Cost-model golden numbers for the published architectures.

use attnprune::arch::build_architecture;
use attnprune::cost::{compare, cost_report, count_flops, count_params};

fn within_pct(actual: u64, expected: f64, pct: f64) -> bool {
    (actual as f64 - expected).abs() / expected * 100.0 <= pct
}

#[test]
fn vgg16_golden_numbers() {
    let g = build_architecture("vgg16", (224, 224), 1000, None).unwrap();
    let params = count_params(&g);
    let flops = count_flops(&g, (224, 224), false).unwrap();
    assert!(within_pct(params, 138.34e6, 0.5), "params {params}");
    assert!(within_pct(flops, 30.94e9, 0.5), "flops {flops}");
}

#[test]
fn resnet18_golden_numbers() {
    let g = build_architecture("resnet18", (224, 224), 1000, None).unwrap();
    let params = count_params(&g);
    let flops = count_flops(&g, (224, 224), false).unwrap();
    assert!(within_pct(params, 11.68e6, 0.5), "params {params}");
    assert!(within_pct(flops, 3.63e9, 0.5), "flops {flops}");
}

#[test]
fn resnet50_golden_numbers() {
    let g = build_architecture("resnet50", (224, 224), 1000, None).unwrap();
    let params = count_params(&g);
    let flops = count_flops(&g, (224, 224), false).unwrap();
    assert!(within_pct(params, 25.56e6, 0.5), "params {params}");
    assert!(within_pct(flops, 7.72e9, 0.5), "flops {flops}");
}

#[test]
fn mobilenet_075_golden_numbers() {
    let g = build_architecture("mobilenet_075", (224, 224), 1000, None).unwrap();
    let params = count_params(&g);
    let flops = count_flops(&g, (224, 224), false).unwrap();
    assert!(within_pct(params, 2.59e6, 0.5), "params {params}");
    assert!(within_pct(flops, 650e6, 0.5), "flops {flops}");
}

#[test]
fn fma_mode_halves_flops_exactly() {
    for arch in ["vgg16", "resnet18", "resnet50", "mobilenet_075"] {
        let g = build_architecture(arch, (224, 224), 1000, None).unwrap();
        let full = count_flops(&g, (224, 224), false).unwrap();
        let fused = count_flops(&g, (224, 224), true).unwrap();
        assert_eq!(full, 2 * fused, "{arch}");
    }
}

#[test]
fn tiny_cnn_hand_count() {
    let g = build_architecture("tiny_cnn", (16, 16), 4, Some(1)).unwrap();
    // conv1 8*3*9, conv2 16*8*9, conv3 32*16*9; bn 2C each; fc 4*32+4
    let expected = 8 * 3 * 9 + 16 + 16 * 8 * 9 + 32 + 32 * 16 * 9 + 64 + 4 * 32 + 4;
    assert_eq!(count_params(&g), expected as u64);
}

#[test]
fn single_fc_param_count() {
    use attnprune::graph::GraphBuilder;
    let mut b = GraphBuilder::new("fc_only", 5, (1, 1), 10, Some(0));
    b.gap("gap").fc("fc", 10, true, false);
    let g = b.finish().unwrap();
    assert_eq!(count_params(&g), 60);
}

#[test]
fn one_by_one_conv_flops() {
    use attnprune::graph::GraphBuilder;
    let mut b = GraphBuilder::new("one_conv", 1, (1, 1), 1, None);
    b.conv("c", 1, 1, 1, 0, false, false).gap("g").fc("fc", 1, false, false);
    let g = b.finish().unwrap();
    let report = cost_report(&g, (1, 1), false).unwrap();
    assert_eq!(report.rows[0].flops, 2);
}

#[test]
fn vgg10_attachment_dimensions() {
    let g = build_architecture("vgg10", (32, 32), 10, Some(7)).unwrap();
    let prunable = g.prunable_ids(false);
    assert_eq!(prunable.len(), 9);
    let dims: Vec<usize> = prunable
        .iter()
        .map(|id| g.layer(id).unwrap().in_channels)
        .collect();
    assert_eq!(dims, vec![64, 64, 128, 128, 256, 256, 256, 512, 512]);
}

#[test]
fn compare_reports_reductions() {
    let g = build_architecture("vgg16", (224, 224), 1000, None).unwrap();
    let before = cost_report(&g, (224, 224), false).unwrap();
    let same = compare(&before, &before).unwrap();
    assert_eq!(same.flops_reduction_pct, 0.0);

    let mut half = before.clone();
    half.total_flops /= 2;
    let red = compare(&before, &half).unwrap();
    assert!((red.flops_reduction_pct - 50.0).abs() < 1e-9);

    // a pruned 8.59B-flop model against the 30.94B baseline
    let mut pruned = before.clone();
    pruned.total_flops = 8_590_000_000;
    let red = compare(&before, &pruned).unwrap();
    assert!((red.flops_reduction_pct - 72.2).abs() < 0.3, "{}", red.flops_reduction_pct);
}

#[test]
fn unknown_architecture_is_an_error() {
    assert!(build_architecture("lenet", (32, 32), 10, None).is_err());
}

#[test]
fn shape_only_and_parameterized_costs_agree() {
    let a = build_architecture("vgg10", (32, 32), 10, None).unwrap();
    let b = build_architecture("vgg10", (32, 32), 10, Some(3)).unwrap();
    assert_eq!(count_params(&a), count_params(&b));
    assert_eq!(
        count_flops(&a, (32, 32), false).unwrap(),
        count_flops(&b, (32, 32), false).unwrap()
    );
}
