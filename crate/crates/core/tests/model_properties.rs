use proptest::prelude::*;

use umc::model::{layer_plan, shape_check, STANDARD_FILTERS};
use umc::{build, count_params, Bindings, Connectivity, PathwaySpec, Rng, Task, Tensor, UmcConfig, UpsampleMode};

fn arb_config() -> impl Strategy<Value = UmcConfig> {
    (
        1usize..4,
        prop::collection::vec(1usize..6, 2..5),
        prop::sample::select(Connectivity::ALL.to_vec()),
        prop::sample::select(vec![UpsampleMode::Bilinear, UpsampleMode::Transposed2x2]),
        prop::collection::vec((1usize..5, any::<bool>()), 1..4),
    )
        .prop_map(|(in_channels, filters, connectivity, upsample_mode, heads)| UmcConfig {
            in_channels,
            filters,
            connectivity,
            upsample_mode,
            pathways: heads
                .into_iter()
                .enumerate()
                .map(|(i, (c, reg))| {
                    let task = if reg { Task::Regression } else { Task::Classification };
                    PathwaySpec::new(&format!("p{i}"), c, task)
                })
                .collect(),
        })
}

fn with_mode(cfg: &UmcConfig, connectivity: Connectivity) -> UmcConfig {
    UmcConfig {
        connectivity,
        ..cfg.clone()
    }
}

fn normal(shape: Vec<usize>, rng: &mut Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn count_matches_allocated_elements(cfg in arb_config()) {
        let model = build::<f32>(&cfg, 0).unwrap();
        let brute: usize = model.graph.params().map(|(_, t)| t.numel()).sum();
        prop_assert_eq!(brute, count_params(&cfg).unwrap());
        prop_assert_eq!(model.graph.params().count(), 2 * layer_plan(&cfg).unwrap().len());
    }

    #[test]
    fn causal_costs_the_same_as_shared(cfg in arb_config()) {
        prop_assert_eq!(
            count_params(&with_mode(&cfg, Connectivity::Causal)).unwrap(),
            count_params(&with_mode(&cfg, Connectivity::SharedEncoder)).unwrap()
        );
        prop_assert!(
            count_params(&with_mode(&cfg, Connectivity::Dense)).unwrap()
                >= count_params(&with_mode(&cfg, Connectivity::SharedEncoder)).unwrap()
        );
    }

    #[test]
    fn outputs_match_input_size(cfg in arb_config(), a in 1usize..4, b in 1usize..4, seed in any::<u64>()) {
        let m = cfg.spatial_multiple();
        let (h, w) = (a * m, b * m);
        let rows = shape_check(&cfg, &[1, cfg.in_channels, h, w]).unwrap();
        prop_assert!(!rows.is_empty());

        let mut model = build::<f64>(&cfg, seed).unwrap();
        let mut rng = Rng::new(seed);
        let mut bind: Bindings<f64> = Bindings::new();
        bind.insert("image".into(), normal(vec![1, cfg.in_channels, h, w], &mut rng));
        let outputs = model.graph.forward(&bind).unwrap();
        for p in &cfg.pathways {
            prop_assert_eq!(outputs[&p.name].shape(), &[1, p.out_channels, h, w][..]);
        }
    }

    #[test]
    fn indivisible_sizes_are_rejected(cfg in arb_config(), extra in 1usize..8) {
        let m = cfg.spatial_multiple();
        prop_assume!(extra % m != 0);
        prop_assert!(shape_check(&cfg, &[1, cfg.in_channels, m + extra, m]).is_err());
    }
}

/// Largest |gradient| of parameters named `<pathway>.` with the given loss
/// weights.
fn pathway_grads(connectivity: Connectivity, weights: &[f64], seed: u64) -> Vec<f64> {
    let names = ["a", "b", "c"];
    let pathways = weights
        .iter()
        .zip(names)
        .map(|(&w, n)| PathwaySpec {
            loss_weight: w,
            ..PathwaySpec::new(n, 2, Task::Classification)
        })
        .collect();
    let cfg = UmcConfig::umc(2, &[2, 3, 4], connectivity, pathways);
    let mut model = build::<f64>(&cfg, seed).unwrap();
    let mut rng = Rng::new(seed);
    let mut bind: Bindings<f64> = Bindings::new();
    bind.insert("image".into(), normal(vec![2, 2, 8, 8], &mut rng));
    for p in &model.pathways {
        let labels = (0..128).map(|_| rng.below(2) as f64).collect();
        bind.insert(p.target_input.clone(), Tensor::new(vec![2, 8, 8], labels).unwrap());
    }
    model.graph.run(&bind, &[model.loss]).unwrap();
    let grads = model.graph.backward(model.loss).unwrap();
    names[..weights.len()]
        .iter()
        .map(|n| {
            grads
                .iter()
                .filter(|(k, _)| k.starts_with(&format!("{n}.")))
                .flat_map(|(_, g)| g.data().iter().map(|v| v.abs()))
                .fold(0.0, f64::max)
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn shared_mode_isolates_a_silenced_pathway(seed in any::<u64>(), silenced in 0usize..3) {
        let mut weights = vec![1.0; 3];
        weights[silenced] = 0.0;
        let g = pathway_grads(Connectivity::SharedEncoder, &weights, seed);
        for (i, v) in g.iter().enumerate() {
            if i == silenced {
                prop_assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn connected_modes_feed_earlier_pathways(seed in any::<u64>(),
                                              mode in prop::sample::select(vec![Connectivity::Causal, Connectivity::Dense])) {
        let g = pathway_grads(mode, &[0.0, 1.0], seed);
        prop_assert!(g[0] > 0.0);
        prop_assert!(g[1] > 0.0);
    }
}

#[test]
fn transposed_single_pathway_is_the_unet() {
    let seg = PathwaySpec::new("seg", 19, Task::Classification);
    let unet = UmcConfig::unet(3, &STANDARD_FILTERS, seg.clone());
    for mode in Connectivity::ALL {
        let mut cfg = UmcConfig::umc(3, &STANDARD_FILTERS, mode, vec![seg.clone()]);
        cfg.upsample_mode = UpsampleMode::Transposed2x2;
        assert_eq!(layer_plan(&cfg).unwrap(), layer_plan(&unet).unwrap());
    }
}
