use patternrnn_autodiff::Graph;
use patternrnn_core::data::synth::{synth_generate, SynthSpec};
use patternrnn_core::data::{make_all_samples, DatasetConfig, Sample, SampleAgent};
use patternrnn_core::eval::{evaluate, score, EvalOptions, PredictionSet};
use patternrnn_core::model::{Ablation, LossOptions, ModelConfig, SceneTensors, SocialPatternModel};
use patternrnn_core::rng::{AgentNoise, StreamKey};
use rand::seq::SliceRandom;

fn samples(n: usize) -> Vec<Sample> {
    let spec = SynthSpec {
        scenes: n,
        length: 10,
        ..SynthSpec::default()
    };
    let scenes: Vec<_> = synth_generate(&spec, 7).unwrap().into_iter().map(|g| g.scene).collect();
    let cfg = DatasetConfig {
        history: 4,
        future: 6,
        pattern: 3,
        stride: 10,
        ..DatasetConfig::default()
    };
    make_all_samples(&scenes, &cfg).unwrap()
}

fn model(ablation: Ablation) -> SocialPatternModel {
    SocialPatternModel::new(ModelConfig {
        ablation,
        pattern: 3,
        d_h: 12,
        d_x: 6,
        d_z: 6,
        d_p: 8,
        d_s: 8,
        ..ModelConfig::default()
    })
    .unwrap()
}

fn opts(k: usize) -> EvalOptions {
    EvalOptions {
        k,
        seed: 3,
        ..EvalOptions::default()
    }
}

fn teacher_loss(m: &SocialPatternModel, store: &patternrnn_autodiff::ParameterStore, s: &Sample) -> f64 {
    let scene = SceneTensors::from_sample(s).unwrap();
    let mut g = Graph::new();
    let mut noise = AgentNoise::new(&StreamKey::new("loss", 0), &scene.agent_ids);
    m.teacher_forced_loss(&mut g, store, &scene, &mut noise, &LossOptions::default())
        .unwrap()
        .1
        .total
}

#[test]
fn agent_order_does_not_change_metrics_or_losses() {
    let data = samples(6);
    let mut rng = StreamKey::new("perm", 0).rng();
    for ablation in Ablation::ALL {
        let m = model(ablation);
        let store = m.init_params(1).unwrap();
        let (base, _) = evaluate(&m, &store, &data, &opts(5)).unwrap();
        let permuted: Vec<Sample> = data
            .iter()
            .map(|s| {
                let mut order: Vec<usize> = (0..s.agents.len()).collect();
                order.shuffle(&mut rng);
                s.permuted(&order)
            })
            .collect();
        let (perm, _) = evaluate(&m, &store, &permuted, &opts(5)).unwrap();
        assert!((base.min_ade - perm.min_ade).abs() < 1e-9, "{ablation}");
        assert!((base.min_fde - perm.min_fde).abs() < 1e-9, "{ablation}");
        for (a, b) in data.iter().zip(&permuted) {
            assert!((teacher_loss(&m, &store, a) - teacher_loss(&m, &store, b)).abs() < 1e-9);
        }
    }
}

#[test]
fn fully_masked_agents_change_nothing() {
    let m = model(Ablation::PatSocAtt);
    let store = m.init_params(2).unwrap();
    let s = &samples(1)[0];
    let mut padded = s.clone();
    let template = &s.agents[0];
    padded.agents.push(SampleAgent {
        agent_id: "ghost".into(),
        present: vec![false; template.present.len()],
        complete: false,
        ..template.clone()
    });
    assert!((teacher_loss(&m, &store, s) - teacher_loss(&m, &store, &padded)).abs() < 1e-12);
    let (a, _) = evaluate(&m, &store, std::slice::from_ref(s), &opts(3)).unwrap();
    let (b, _) = evaluate(&m, &store, &[padded], &opts(3)).unwrap();
    assert_eq!((a.min_ade, a.min_fde), (b.min_ade, b.min_fde));
}

#[test]
fn translating_a_scene_leaves_errors_unchanged() {
    let m = model(Ablation::PatSocAtt);
    let store = m.init_params(4).unwrap();
    let data = samples(3);
    let shifted: Vec<Sample> = data
        .iter()
        .map(|s| {
            let mut s = s.clone();
            for a in &mut s.agents {
                a.start_abs[0] += 25.0;
                a.start_abs[1] -= 40.0;
            }
            s
        })
        .collect();
    let (a, _) = evaluate(&m, &store, &data, &opts(4)).unwrap();
    let (b, _) = evaluate(&m, &store, &shifted, &opts(4)).unwrap();
    assert!((a.min_ade - b.min_ade).abs() < 1e-9);
    assert!((a.min_fde - b.min_fde).abs() < 1e-9);
}

#[test]
fn best_of_k_is_monotone_for_nested_streams() {
    let m = model(Ablation::PatSoc);
    let store = m.init_params(5).unwrap();
    let data = samples(4);
    let (_, sets) = evaluate(&m, &store, &data, &opts(20)).unwrap();
    let mut last = (f64::INFINITY, f64::INFINITY);
    for k in 1..=20 {
        let metrics = score(&first_k(&sets, k), false).unwrap();
        assert!(metrics.min_ade <= last.0 && metrics.min_fde <= last.1);
        last = (metrics.min_ade, metrics.min_fde);
    }
    let (k1, _) = evaluate(&m, &store, &data, &opts(1)).unwrap();
    assert_eq!(score(&first_k(&sets, 1), false).unwrap(), k1);
}

fn first_k(sets: &[PredictionSet], k: usize) -> Vec<PredictionSet> {
    sets.iter()
        .map(|s| {
            let mut s = s.clone();
            s.agents.iter_mut().for_each(|a| a.samples.truncate(k));
            s
        })
        .collect()
}

#[test]
fn zero_noise_collapses_every_sample() {
    let m = model(Ablation::PatSocAtt);
    let store = m.init_params(6).unwrap();
    let data = samples(2);
    let collapsed = EvalOptions {
        noise_scale: 0.0,
        ..opts(20)
    };
    let (_, sets) = evaluate(&m, &store, &data, &collapsed).unwrap();
    for a in sets.iter().flat_map(|s| &s.agents) {
        assert!(a.samples.iter().all(|s| s == &a.samples[0]));
    }
    let (_, noisy) = evaluate(&m, &store, &data, &opts(2)).unwrap();
    let a = &noisy[0].agents[0];
    assert_ne!(a.samples[0], a.samples[1]);
}

#[test]
fn evaluation_leaves_parameters_untouched() {
    let m = model(Ablation::PatSocAtt);
    let store = m.init_params(8).unwrap();
    let before: Vec<Vec<u64>> = store.iter().map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect()).collect();
    evaluate(&m, &store, &samples(2), &opts(3)).unwrap();
    let after: Vec<Vec<u64>> = store.iter().map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect()).collect();
    assert_eq!(before, after);
}
