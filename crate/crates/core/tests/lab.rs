mod common;

use fmerge_core::lab::{
    evaluate, evaluate_network, finetune, gen_task, generalization_matrix, pretrain, Dataset, Lab,
    LabConfig, Network, TaskSpec, TrainConfig,
};
use fmerge_core::store::checkpoint_to_bytes;
use fmerge_core::{Checkpoint, Error};

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

fn spec(sigma: f64, n: usize, seed: u64) -> TaskSpec {
    let mut s = TaskSpec::polygon("a", 3, &[0.5, -0.5], 2.0, 0.3, sigma, seed);
    s.n_train = n;
    s.n_test = n;
    s
}

#[test]
fn noiseless_blobs_are_nearest_center_separable() {
    let s = spec(1e-6, 300, 1);
    let data = gen_task(&s).unwrap();
    let centers = s.rotated_centers();
    for i in 0..data.n_test() {
        let x = data.test_point(i);
        let nearest = (0..centers.len())
            .min_by(|&a, &b| {
                let da: f64 = centers[a]
                    .iter()
                    .zip(x)
                    .map(|(c, &v)| (c - f64::from(v)).powi(2))
                    .sum();
                let db: f64 = centers[b]
                    .iter()
                    .zip(x)
                    .map(|(c, &v)| (c - f64::from(v)).powi(2))
                    .sum();
                da.total_cmp(&db)
            })
            .unwrap();
        assert_eq!(nearest, data.test_y[i]);
    }
}

#[test]
fn class_priors_are_uniform() {
    let data = gen_task(&spec(0.5, 10_000, 2)).unwrap();
    for y in [&data.train_y, &data.test_y] {
        for c in 0..3 {
            let freq = y.iter().filter(|&&l| l == c).count() as f64 / y.len() as f64;
            assert!((freq - 1.0 / 3.0).abs() <= 0.02, "class {c}: {freq}");
        }
    }
}

#[test]
fn datasets_are_seeded() {
    assert_eq!(
        gen_task(&spec(0.5, 64, 3)).unwrap(),
        gen_task(&spec(0.5, 64, 3)).unwrap()
    );
    assert_ne!(
        gen_task(&spec(0.5, 64, 3)).unwrap(),
        gen_task(&spec(0.5, 64, 4)).unwrap()
    );
}

#[test]
fn pretraining_lowers_the_loss_and_is_seeded() {
    let cfg = LabConfig::default();
    let datasets: Vec<Dataset> = cfg
        .task_specs(0)
        .iter()
        .map(|s| gen_task(s).unwrap())
        .collect();
    let train = TrainConfig {
        seed: 1,
        ..cfg.pretrain
    };
    let a = pretrain(&datasets, &cfg.mlp_spec(9), &train).unwrap();
    let b = pretrain(&datasets, &cfg.mlp_spec(9), &train).unwrap();
    assert!(a.losses.last().unwrap() < &a.losses[0]);
    assert_eq!(
        checkpoint_to_bytes(&a.checkpoint),
        checkpoint_to_bytes(&b.checkpoint)
    );

    let zero = TrainConfig { epochs: 0, ..train };
    assert!(matches!(
        pretrain(&datasets, &cfg.mlp_spec(9), &zero),
        Err(Error::InvalidConfig(_))
    ));
}

#[test]
fn finetuning_is_seeded_and_zero_lr_is_identity() {
    let cfg = LabConfig::default();
    let datasets: Vec<Dataset> = cfg
        .task_specs(1)
        .iter()
        .map(|s| gen_task(s).unwrap())
        .collect();
    let pre = pretrain(
        &datasets,
        &cfg.mlp_spec(2),
        &TrainConfig {
            seed: 3,
            ..cfg.pretrain
        },
    )
    .unwrap()
    .checkpoint;
    let ft = TrainConfig {
        seed: 4,
        ..cfg.finetune
    };
    let a = finetune(&pre, &datasets[1], &ft).unwrap();
    let b = finetune(&pre, &datasets[1], &ft).unwrap();
    assert_eq!(a.checkpoint, b.checkpoint);
    let frozen = finetune(&pre, &datasets[1], &TrainConfig { lr: 0.0, ..ft }).unwrap();
    for ((_, x), (_, y)) in frozen.checkpoint.iter().zip(pre.iter()) {
        assert_eq!(x, y);
    }
}

#[test]
fn default_lab_fine_tunes_well_and_specializes() {
    let cfg = LabConfig::default();
    let mut own = Vec::new();
    let mut gaps = Vec::new();
    for seed in 0..10 {
        let lab = Lab::build(&cfg, seed).unwrap();
        own.extend(lab.finetuned_accuracy.iter().copied());
        let g = generalization_matrix(lab.pre(), &lab.task_vectors().unwrap(), &lab.datasets, 0.1)
            .unwrap();
        // Diagonal entry minus the mean of the rest of its row.
        for (i, row) in g.unfiltered.iter().enumerate() {
            let rest: f64 = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, v)| v)
                .sum();
            gaps.push(row[i] - rest / (row.len() - 1) as f64);
        }
    }
    assert!(median(own) >= 0.9);
    assert!(median(gaps) >= 0.0);
}

#[test]
fn lab_build_is_reproducible() {
    let cfg = LabConfig::default();
    let a = Lab::build(&cfg, 5).unwrap();
    let b = Lab::build(&cfg, 5).unwrap();
    assert_eq!(checkpoint_to_bytes(a.pre()), checkpoint_to_bytes(b.pre()));
    for (x, y) in a.fine().iter().zip(b.fine()) {
        assert_eq!(checkpoint_to_bytes(x), checkpoint_to_bytes(&y));
    }
    assert_eq!(a.datasets, b.datasets);
}

#[test]
fn zero_cutoff_matrices_coincide() {
    let lab = Lab::build(&LabConfig::default(), 6).unwrap();
    let g =
        generalization_matrix(lab.pre(), &lab.task_vectors().unwrap(), &lab.datasets, 0.0).unwrap();
    assert_eq!(g.filtered, g.unfiltered);
}

fn naive_accuracy(net: &Network, data: &Dataset) -> f64 {
    let mut hits = 0usize;
    for i in 0..data.n_test() {
        let logits = net.logits(data.test_point(i));
        let slice = &logits[data.label_offset..data.label_offset + data.n_classes];
        let mut best = 0;
        for c in 1..slice.len() {
            if slice[c] > slice[best] {
                best = c;
            }
        }
        hits += usize::from(best == data.test_y[i]);
    }
    hits as f64 / data.n_test() as f64
}

#[test]
fn evaluation_matches_naive_loop_and_ignores_order() {
    let lab = Lab::build(&LabConfig::default(), 7).unwrap();
    for model in [lab.pre().clone(), lab.fine()[0].clone()] {
        let net = Network::from_checkpoint(&model).unwrap();
        for d in &lab.datasets {
            let acc = evaluate_network(&net, d).unwrap();
            assert_eq!(acc, naive_accuracy(&net, d));
            assert!((0.0..=1.0).contains(&acc));

            let mut shuffled = d.clone();
            let n = d.n_test();
            let perm: Vec<usize> = (0..n).map(|i| (i * 7919 + 13) % n).collect();
            shuffled.test_y = perm.iter().map(|&i| d.test_y[i]).collect();
            shuffled.test_x = perm
                .iter()
                .flat_map(|&i| d.test_point(i).to_vec())
                .collect();
            assert_eq!(evaluate_network(&net, &shuffled).unwrap(), acc);
        }
    }
}

#[test]
fn constant_predictor_scores_chance() {
    let cfg = LabConfig::default();
    let lab_pre = pretrain(
        &cfg.task_specs(0)
            .iter()
            .map(|s| gen_task(s).unwrap())
            .collect::<Vec<_>>(),
        &cfg.mlp_spec(0),
        &TrainConfig {
            epochs: 1,
            ..cfg.pretrain
        },
    )
    .unwrap()
    .checkpoint;
    // All-zero weights: every logit is zero and the first class always wins.
    let zero: Checkpoint = lab_pre.zeros_like();
    // Large splits so the sampled classes are close to balanced.
    for s in cfg.task_specs(3) {
        let data = gen_task(&TaskSpec {
            n_test: 10_000,
            ..s
        })
        .unwrap();
        let acc = evaluate(&zero, &data).unwrap();
        assert!((acc - 1.0 / 3.0).abs() <= 0.05, "{acc}");
    }
}

#[test]
fn noiseless_task_is_learned_perfectly() {
    let cfg = LabConfig::default();
    let s = TaskSpec {
        label_offset: 0,
        ..spec(1e-6, 256, 8)
    };
    let data = gen_task(&s).unwrap();
    let model = pretrain(
        std::slice::from_ref(&data),
        &cfg.mlp_spec(1),
        &TrainConfig {
            lr: 0.05,
            epochs: 30,
            batch_size: 16,
            seed: 2,
            weight_decay: 0.0,
        },
    )
    .unwrap()
    .checkpoint;
    assert_eq!(evaluate(&model, &data).unwrap(), 1.0);
}
