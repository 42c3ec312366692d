use proptest::prelude::*;
use seistile::data::{
    merge_classes, preprocess_rescale, split_blocks, tile_count, tile_slice, MaskVolume, SplitConfig, TileConfig,
    Volume, VolumeMeta,
};
use seistile::eval::{confusion_matrix, iou_per_class};
use seistile::tensor::Tensor;
use seistile::topology::{
    count_operations, parse_topology, preset, LayerSpec, Model, OpMode, TopologySpec, PRESET_NAMES,
};

fn enumerate_tiles(h: usize, w: usize, th: usize, tw: usize, sh: usize, sw: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut r = 0;
    while r + th <= h {
        let mut c = 0;
        while c + tw <= w {
            out.push((r, c));
            c += sw;
        }
        r += sh;
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn tile_count_matches_enumeration(
        th in 1usize..12, tw in 1usize..12, dh in 0usize..30, dw in 0usize..30, halve in any::<bool>(),
    ) {
        let (th, tw) = if halve { (2 * th, 2 * tw) } else { (th, tw) };
        let (h, w) = (th + dh, tw + dw);
        let cfg = TileConfig::new(th, tw, if halve { 0.5 } else { 0.0 });
        let (sh, sw) = cfg.strides().unwrap();
        let expect = enumerate_tiles(h, w, th, tw, sh, sw);
        prop_assert_eq!(tile_count(h, w, &cfg).unwrap(), expect.len());

        let image: Vec<f32> = (0..h * w).map(|i| i as f32).collect();
        let mask: Vec<u8> = (0..h * w).map(|i| (i % 7) as u8).collect();
        let tiles = tile_slice(&image, &mask, h, w, 3, &cfg).unwrap();
        let origins: Vec<_> = tiles.iter().map(|t| (t.row, t.col)).collect();
        prop_assert_eq!(&origins, &expect);
        for t in &tiles {
            prop_assert!(t.row + th <= h && t.col + tw <= w);
            let first = t.row * w + t.col;
            prop_assert_eq!(t.image[0], first as f32);
            prop_assert_eq!(t.mask[tw * th - 1], mask[(t.row + th - 1) * w + t.col + tw - 1]);
        }
    }

    #[test]
    fn split_is_a_partition(
        slices in 2usize..120, n in 1usize..12, test_count in 0usize..10, seed in any::<u64>(),
    ) {
        let cfg = SplitConfig { n_blocks: n, test_count, ..Default::default() };
        prop_assume!(slices >= test_count + n);
        let s = split_blocks(slices, &cfg, seed).unwrap();
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).chain(&s.unused).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..slices).collect::<Vec<_>>());
    }

    #[test]
    fn slice_limit_gives_n_floor_x_over_n(
        per_block in 2usize..20, n in 1usize..8, x_frac in 0.0f64..1.0, seed in any::<u64>(),
    ) {
        let slices = per_block * n;
        let max_x = n * (0.7 * per_block as f64 + 1e-9).floor() as usize;
        let x = (x_frac * max_x as f64) as usize;
        let cfg = SplitConfig { n_blocks: n, test_count: 0, slice_limit: Some(x), ..Default::default() };
        let s = split_blocks(slices, &cfg, seed).unwrap();
        prop_assert_eq!(s.train.len(), n * (x / n));
        prop_assert_eq!(s.train.len() + s.val.len() + s.unused.len(), slices);
    }

    #[test]
    fn rescale_is_monotone_and_bounded(values in prop::collection::vec(-1e4f32..1e4, 2..200)) {
        let v = Volume::new([1, 1, values.len()], values.clone(), VolumeMeta::default()).unwrap();
        let out = preprocess_rescale(&v, 1.0, 99.0).unwrap();
        let mut order: Vec<usize> = (0..values.len()).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        for w in order.windows(2) {
            prop_assert!(out.data()[w[0]] <= out.data()[w[1]]);
        }
        prop_assert!(out.data().iter().all(|&p| (0.0..=255.0).contains(&p)));
    }

    #[test]
    fn merge_keeps_shape_and_refuses_reapplication(labels in prop::collection::vec(0u8..8, 1..100)) {
        let m = MaskVolume::new([1, 1, labels.len()], labels.clone(), 8).unwrap();
        let merged = merge_classes(&m).unwrap();
        prop_assert_eq!(merged.dims(), m.dims());
        prop_assert_eq!(merged.num_classes(), 7);
        prop_assert!(merge_classes(&merged).is_err());
    }

    #[test]
    fn iou_is_symmetric_and_confusion_rows_count_truth(
        pairs in prop::collection::vec((0u8..7, 0u8..7), 1..300),
    ) {
        let (a, b): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
        prop_assert_eq!(iou_per_class(&a, &b, 7).unwrap(), iou_per_class(&b, &a, 7).unwrap());
        let m = confusion_matrix(&a, &b, 7).unwrap();
        for (class, row) in m.iter().enumerate() {
            prop_assert_eq!(row.iter().sum::<u64>() as usize, b.iter().filter(|&&g| g as usize == class).count());
        }
        prop_assert!(iou_per_class(&a, &a, 7).unwrap().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn dsl_round_trips(layers in prop::collection::vec((0usize..4, 1usize..6, 1usize..3, 1usize..300), 0..6),
                       classes in 1usize..10) {
        let mut specs: Vec<LayerSpec> = layers.iter().map(|&(kind, k, s, ch)| match kind {
            0 => LayerSpec::conv(k, s, ch),
            1 => LayerSpec::tconv(k, s, ch),
            2 => LayerSpec::ru(s, ch),
            _ => LayerSpec::tru(s, ch),
        }).collect();
        let down: usize = specs.iter().filter(|l| l.kind.downsamples()).map(|l| l.stride).product();
        let up: usize = specs.iter().filter(|l| l.kind.upsamples()).map(|l| l.stride).product();
        prop_assume!(down == up);
        specs.push(LayerSpec::classifier(classes));
        let spec = TopologySpec::new("prop", specs).unwrap();
        prop_assert_eq!(parse_topology(&spec.render()).unwrap(), spec);
    }

    #[test]
    fn doubling_both_sides_quadruples_ops(h in 1usize..20, w in 1usize..20, which in 0usize..3) {
        let spec = preset(PRESET_NAMES[which]).unwrap();
        let (h, w) = (8 * h, 8 * w);
        for mode in [OpMode::Mac, OpMode::MulAdd] {
            prop_assert_eq!(
                4 * count_operations(&spec, h, w, mode),
                count_operations(&spec, 2 * h, 2 * w, mode)
            );
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn reduced_presets_keep_the_input_grid(h in 1usize..4, w in 1usize..4, which in 0usize..3) {
        let spec = preset(PRESET_NAMES[which]).unwrap().with_width_divisor(16, 2);
        let model = Model::<f32>::build(&spec, 0).unwrap();
        let x = Tensor::full(&[1, 8 * h, 8 * w, 1], 0.5);
        let y = model.predict(&x).unwrap();
        prop_assert_eq!(y.shape(), &[1, 8 * h, 8 * w, 7]);
        prop_assert_eq!(model.param_blob().len(), 4 * model.num_parameters());
    }
}
