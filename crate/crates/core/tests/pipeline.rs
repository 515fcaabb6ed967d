use std::sync::OnceLock;

use adaor_core::eval::{case_params, oracle_id, run_eval, EvalConfig};
use adaor_core::guidance::{GuidanceConfig, Scheduler, Variant};
use adaor_core::model::DenoiserNet;
use adaor_core::sampler::{relative_l2, sample_one, sweep, SweepConfig};
use adaor_core::train::{train, TrainConfig};
use adaor_core::{Instruction, TaskKind};

fn vec_net() -> &'static DenoiserNet {
    static NET: OnceLock<DenoiserNet> = OnceLock::new();
    NET.get_or_init(|| train(&TrainConfig::for_task(TaskKind::Vec)).unwrap().net)
}

#[test]
fn checkpoint_roundtrip_preserves_predictions() {
    let net = vec_net();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vec.ckpt");
    net.save(&path).unwrap();
    let back = DenoiserNet::load(&path).unwrap();
    assert_eq!(back.to_bytes(), net.to_bytes());
    let src = case_params(TaskKind::Vec, 3, 0).render();
    let cfg = SweepConfig::default();
    let a = sweep(net, &src, Instruction(1), &cfg).unwrap();
    let b = sweep(&back, &src, Instruction(1), &cfg).unwrap();
    assert_eq!(a.outputs, b.outputs);
}

#[test]
fn zero_strength_reconstructs_held_out_sources() {
    let net = vec_net();
    let g = GuidanceConfig::new(Variant::Adaor, 4.0, 0.0, Scheduler::Sqrt).unwrap();
    let mean = (0..32u64)
        .map(|i| {
            let src = case_params(TaskKind::Vec, 4242, i).render();
            let out = sample_one(net, &src, Instruction((i % 4) as usize), &g, i, 64).unwrap();
            relative_l2(&out, &src)
        })
        .sum::<f64>()
        / 32.0;
    assert!(mean < 0.1, "mean relative L2 {mean}");
}

#[test]
fn low_strength_cfg_drifts_further_than_adaor() {
    let net = vec_net();
    let mut drift = [0.0; 2];
    for i in 0..16u64 {
        let src = case_params(TaskKind::Vec, 77, i).render();
        for (k, v) in [Variant::Adaor, Variant::CfgSweep].into_iter().enumerate() {
            let cfg = SweepConfig {
                alphas: vec![0.0, 0.2],
                variant: v,
                seed: i,
                ..Default::default()
            };
            let s = sweep(net, &src, Instruction((i % 4) as usize), &cfg).unwrap();
            drift[k] += relative_l2(&s.outputs[0], &src);
        }
    }
    assert!(drift[1] > drift[0], "cfg {} vs adaor {}", drift[1], drift[0]);
}

#[test]
fn eval_report_is_deterministic_with_one_median_row_per_variant() {
    let net = vec_net();
    let cfg = EvalConfig {
        n_cases: 3,
        ..Default::default()
    };
    let render = || {
        let mut buf = Vec::new();
        run_eval(net, &cfg).unwrap().write_csv(&mut buf).unwrap();
        String::from_utf8(buf).unwrap()
    };
    let a = render();
    assert_eq!(a, render());
    assert!(a.starts_with('#'));
    assert_eq!(a.lines().filter(|l| l.starts_with("median,")).count(), cfg.variants.len());
    assert_eq!(a.lines().filter(|l| !l.starts_with('#') && !l.starts_with("median")).count(), 1 + 3 * 4 * 3);
}

#[test]
fn untrained_identity_oracle_still_reports() {
    let net = DenoiserNet::init(0, TaskKind::Vec);
    let r = oracle_id(&net, 8, &[0.5], 0).unwrap();
    assert!(r.median_cosine(0.5) < 0.95);
    assert!(r.max_law_error() < 1e-9);
}
