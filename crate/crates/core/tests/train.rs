use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use samoe::model::container::ContainerError;
use samoe::model::sequence::sequence_loss;
use samoe::model::{ModalityTag, Model, ModelConfig, ModelError, ParamKind, SeqToken};
use samoe::num::{Float, Tensor};
use samoe::sim::dataset::encode_episode;
use samoe::sim::{Sim, TaskKind, TaskMix};
use samoe::train::config::Schedule;
use samoe::train::*;

fn tiny() -> ModelConfig {
    ModelConfig {
        n_layers: 1,
        d_model: 16,
        n_heads: 2,
        n_kv_heads: 1,
        d_head: 8,
        d_ff: 32,
        ..ModelConfig::small()
    }
}

fn cfg(stage: Stage, steps: u64) -> TrainConfig {
    let mut c = TrainConfig::new(stage);
    c.model = tiny();
    c.steps = steps;
    c.batch_size = 2;
    c.seed = 11;
    c
}

fn stage1() -> (Model, Model) {
    let mut t = Trainer::new(cfg(Stage::ExpertSpeech, 2), None, None).unwrap();
    t.run(&mut |_, _| Ok(())).unwrap();
    let speech = t.model;
    let mut t = Trainer::new(cfg(Stage::ExpertAction, 2), Some(&speech), None).unwrap();
    t.run(&mut |_, _| Ok(())).unwrap();
    (speech, t.model)
}

fn base_hash(m: &Model, keep: &dyn Fn(usize, ParamKind) -> bool) -> Vec<u64> {
    let mut out = Vec::new();
    m.walk(&mut |i, t| {
        if keep(i.expert, i.kind) {
            out.extend(t.data().iter().map(|v| v.to_bits() as u64));
        }
    });
    out
}

#[test]
fn adamw_zero_gradient_is_a_fixed_point() {
    let mut p = Tensor::vector(vec![1.0, -2.0, 3.5]);
    let before = p.clone();
    let g = Tensor::zeros(&[3]);
    let mut mo = Moments::zeros_like(&[&p]);
    let hp = AdamW { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.0 };
    for step in 1..=10 {
        adamw_step(&mut [&mut p], &[g.clone()], &mut mo, &[true], step, 0.1, &hp);
    }
    assert_eq!(p, before);
}

#[test]
fn warmup_first_step_magnitude() {
    let mut c = cfg(Stage::ExpertSpeech, 1000);
    c.warmup = 0.1;
    c.lr = 0.01;
    assert_eq!(c.warmup_steps(), 100);
    let lr1 = lr_at(&c, 1);
    assert!((lr1 - 0.01 / 100.0).abs() < 1e-15);
    assert!((lr_at(&c, 100) - 0.01).abs() < 1e-15);
    let mut p = Tensor::vector(vec![0.5]);
    let mut mo = Moments::zeros_like(&[&p]);
    let hp = AdamW { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.0 };
    adamw_step(&mut [&mut p], &[Tensor::vector(vec![0.3])], &mut mo, &[false], 1, lr1, &hp);
    let moved = 0.5 - p.data()[0];
    assert!((moved - 1e-4).abs() < 1e-9, "moved {moved}");
}

#[test]
fn adamw_solves_a_scalar_quadratic() {
    let mut c = cfg(Stage::ExpertSpeech, 5000);
    c.lr = 0.05;
    c.warmup = 0.0;
    c.schedule = Schedule::Cosine;
    c.min_lr = 0.0;
    let hp = AdamW { beta1: 0.9, beta2: 0.95, eps: 1e-12, weight_decay: 0.0 };
    let mut p = Tensor::vector(vec![-4.0]);
    let mut mo = Moments::zeros_like(&[&p]);
    for step in 1..=5000 {
        let g = Tensor::vector(vec![2.0 * (p.data()[0] - 3.0)]);
        adamw_step(&mut [&mut p], &[g], &mut mo, &[false], step, lr_at(&c, step), &hp);
    }
    assert!((p.data()[0] - 3.0).abs() <= 1e-6, "ended at {}", p.data()[0]);
}

#[test]
fn config_keys_and_validation() {
    let text = "stage=JOINT_SAMOE\nsteps=50\nbatch_size=4\nlr=0.001\nwarmup=0.05\nseed=3\ntask_mix.MANIP=2\ntask_mix.QA=1\nlora.rank=4\nlora.alpha=8\nmodel.d_model=32\n";
    let c = TrainConfig::from_text(text).unwrap();
    assert_eq!(c.stage, Stage::JointSamoe);
    assert_eq!(c.lora_rank, 4);
    assert_eq!(c.task_mix.tasks(), vec![TaskKind::Qa, TaskKind::Manip]);
    assert_eq!(TrainConfig::from_text(&c.to_text()).unwrap(), c);

    let bad = |t: &str| TrainConfig::from_text(t).unwrap_err();
    assert!(matches!(bad("stage=EXPERT_SPEECH\nwarmup=1.0\n"), TrainError::Config(_)));
    assert!(matches!(bad("stage=EXPERT_SPEECH\ntask_mix.MANIP=1\n"), TrainError::Config(_)));
    assert!(matches!(bad("stage=EXPERT_SPEECH\nfrobnicate=1\n"), TrainError::Config(_)));
    assert!(matches!(bad("stage=JOINT_SAMOE\ntask_mix.MANIP=1\ntask_mix.SILENCE_CONTROL=1\n"), TrainError::Config(_)));
    assert!(matches!(bad("steps=3\n"), TrainError::Config(_)));
}

#[test]
fn targets_cover_payloads_and_closing_boundaries() {
    let sim = Sim::for_model(&tiny()).unwrap();
    let ep = encode_episode(&sim, TaskKind::Manip, 4, 0).unwrap();
    let layout = tiny().layout();
    let t = targets_for(&ep, &|tag| matches!(tag, ModalityTag::TextOut | ModalityTag::ActionOut));
    let targeted: Vec<usize> = t.iter().flatten().copied().collect();
    let closes = targeted.iter().filter(|&&id| layout.boundary_kind(id).is_some()).count();
    let blocks = ep.tokens.iter().filter(|x| x.id == layout.close(samoe::model::Modality::Text)).count();
    assert_eq!(closes, 2 * blocks);
    assert_eq!(targeted.len(), ep.mask_bits() + closes);
    assert!(targeted.iter().all(|&id| layout.boundary_kind(id).is_none_or(|(_, open)| !open)));
}

#[test]
fn masked_positions_leave_the_partner_head_untouched() {
    let sim = Sim::for_model(&tiny()).unwrap();
    let model = Model::new_samoe(tiny(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let ep = encode_episode(&sim, TaskKind::SpeakWhileAct, 1, 0).unwrap();
    let t = targets_for(&ep, &|tag| tag == ModalityTag::TextOut);
    let sl = sequence_loss(&model, &ep.seq_tokens(), &t, Some(2), &|_| true).unwrap();
    let grads = sl.graph.backward(sl.loss).unwrap();
    for (info, &v) in sl.params.infos.iter().zip(&sl.params.vars) {
        let zero = grads.get(v).is_none_or(|g| g.data().iter().all(|&x| x == 0.0));
        if info.expert == 1 && (info.name.ends_with("unembed") || info.name.ends_with("final_norm")) {
            assert!(zero, "{} has gradient", info.name);
        }
        if info.expert == 0 && info.name.ends_with("unembed") {
            assert!(!zero);
        }
    }
}

#[test]
fn stage_two_freezes_base_weights() {
    let (speech, action) = stage1();
    let mut t = Trainer::new(cfg(Stage::JointSamoe, 3), Some(&speech), Some(&action)).unwrap();
    let base = |e: usize, k: ParamKind| k == ParamKind::Base && e < 2;
    let before = base_hash(&t.model, &base);
    let adapters = base_hash(&t.model, &|_, k| k != ParamKind::Base);
    t.run(&mut |_, _| Ok(())).unwrap();
    assert_eq!(base_hash(&t.model, &base), before);
    assert_ne!(base_hash(&t.model, &|_, k| k != ParamKind::Base), adapters);
    assert!(t.trainable_names().iter().all(|n| n.starts_with("lora.")));

    let mut t = Trainer::new(cfg(Stage::ExpertSpeech, 2), None, None).unwrap();
    let partner = base_hash(&t.model, &|e, _| e == 1);
    t.run(&mut |_, _| Ok(())).unwrap();
    assert_eq!(base_hash(&t.model, &|e, _| e == 1), partner);
}

#[test]
fn adapter_gradient_matches_finite_difference() {
    let sim = Sim::for_model(&tiny()).unwrap();
    let mut model = Model::new_samoe(tiny(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    model.attach_lora(2, 4.0, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(7);
    model.walk_mut(&mut |i, t| {
        if i.kind == ParamKind::LoraB {
            *t = Tensor::randn(t.shape(), 0.1, &mut r);
        }
    });
    let ep = encode_episode(&sim, TaskKind::ContextVqa, 2, 0).unwrap();
    let toks: Vec<SeqToken> = ep.seq_tokens();
    let tg = targets_for(&ep, &|tag| matches!(tag, ModalityTag::TextOut | ModalityTag::ActionOut));
    let lora_only = |i: &samoe::model::ParamInfo| i.kind != ParamKind::Base;
    let sl = sequence_loss(&model, &toks, &tg, Some(2), &lora_only).unwrap();
    let grads = sl.graph.backward(sl.loss).unwrap();
    for target in ["lora.action_expert.layer0.wv.A", "lora.speech_expert.layer0.w_up.B"] {
        let idx = sl.params.infos.iter().position(|i| i.name == target).unwrap();
        let analytic = grads.get(sl.params.vars[idx]).unwrap().data()[3];
        let eps: Float = 1e-5;
        let loss_at = |delta: Float| {
            let mut m = model.clone();
            let mut k = 0;
            m.walk_mut(&mut |_, t| {
                if k == idx {
                    t.data_mut()[3] += delta;
                }
                k += 1;
            });
            let s = sequence_loss(&m, &toks, &tg, Some(2), &lora_only).unwrap();
            s.graph.value(s.loss).item()
        };
        let numeric = (loss_at(eps) - loss_at(-eps)) / (2.0 * eps);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        assert!(rel <= 1e-4, "{target}: analytic {analytic} numeric {numeric}");
    }
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let mut t = Trainer::new(cfg(Stage::ExpertAction, 2), None, None).unwrap();
    t.run(&mut |_, _| Ok(())).unwrap();
    let bytes = save_checkpoint(&t.checkpoint());
    let back = load_checkpoint(&bytes).unwrap();
    assert_eq!(back.model, t.model);
    assert_eq!(back.moments, t.moments);
    assert_eq!(back.step, 2);
    assert_eq!(save_checkpoint(&back), bytes);

    let mut bad = bytes.clone();
    let mid = bad.len() / 2;
    bad[mid] ^= 0x40;
    assert!(matches!(load_checkpoint(&bad), Err(TrainError::Container(ContainerError::Integrity))));
    assert!(matches!(load_checkpoint(&bytes[..bytes.len() - 100]), Err(TrainError::Container(_))));
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(load_checkpoint(&magic), Err(TrainError::Container(ContainerError::BadMagic))));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let c = cfg(Stage::ExpertAction, 6);
    let mut full = Trainer::new(c.clone(), None, None).unwrap();
    let mut losses = Vec::new();
    full.run(&mut |s, _| {
        losses.push(s.loss);
        Ok(())
    })
    .unwrap();

    let mut first = Trainer::new(c, None, None).unwrap();
    for _ in 0..3 {
        first.train_step().unwrap();
    }
    let bytes = save_checkpoint(&first.checkpoint());
    let mut resumed = Trainer::from_checkpoint(load_checkpoint(&bytes).unwrap()).unwrap();
    let mut tail = Vec::new();
    resumed
        .run(&mut |s, _| {
            tail.push(s.loss);
            Ok(())
        })
        .unwrap();
    assert_eq!(tail, losses[3..]);
    assert_eq!(save_checkpoint(&resumed.checkpoint()), save_checkpoint(&full.checkpoint()));
}

#[test]
fn training_is_deterministic_across_job_counts() {
    let run = |jobs: usize| {
        let mut t = Trainer::new(cfg(Stage::DenseBaseline, 3).with_dense(DenseInit::Scratch), None, None).unwrap();
        t.jobs = jobs;
        let mut last = 0.0;
        t.run(&mut |s, _| {
            last = s.loss;
            Ok(())
        })
        .unwrap();
        (last, save_checkpoint(&t.checkpoint()))
    };
    let a = run(1);
    assert_eq!(a, run(1));
    assert_eq!(a, run(2));
}

#[test]
fn dense_init_copies_expert_rows() {
    let (speech, action) = stage1();
    let layout = tiny().layout();
    let c = cfg(Stage::DenseBaseline, 1);
    let d = initial_model(&c.clone().with_dense(DenseInit::FromSpeech), Some(&speech), None).unwrap();
    let e = &d.experts[0];
    let s = &speech.experts[0];
    let word = layout.payload(samoe::model::Modality::Speech).start + 4;
    assert_eq!(e.embed.row(e.input.local(word).unwrap()), s.embed.row(s.input.local(word).unwrap()));
    assert_eq!(e.layers, s.layers);
    let act = layout.payload(samoe::model::Modality::Action).start;
    let a = &action.experts[1];
    assert_ne!(e.embed.row(e.input.local(act).unwrap()), a.embed.row(a.input.local(act).unwrap()));

    let d = initial_model(&c.clone().with_dense(DenseInit::FromAction), None, Some(&action)).unwrap();
    let e = &d.experts[0];
    assert_eq!(e.embed.row(e.input.local(act).unwrap()), a.embed.row(a.input.local(act).unwrap()));
    assert_eq!(e.layers, a.layers);

    assert!(matches!(initial_model(&c.clone().with_dense(DenseInit::FromAction), None, None), Err(TrainError::Config(_))));
    assert!(matches!(Trainer::new(cfg(Stage::JointSamoe, 1), Some(&speech), None), Err(TrainError::Config(_))));
    let mut other = cfg(Stage::JointSamoe, 1);
    other.model.d_ff = 48;
    assert!(matches!(Trainer::new(other, Some(&speech), Some(&action)), Err(TrainError::Model(ModelError::Structural(_)))));
}

#[test]
fn hidden_state_export_writes_text_rows() {
    let sim = Sim::for_model(&tiny()).unwrap();
    let model = Model::new_samoe(tiny(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let ep = encode_episode(&sim, TaskKind::Qa, 3, 0).unwrap();
    let mut out = Vec::new();
    let n = export_text_hidden(&model, &ep.seq_tokens(), &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert_eq!(n, ep.tokens.iter().filter(|t| t.tag == ModalityTag::TextOut).count());
    assert_eq!(text.lines().count(), n);
    assert_eq!(text.lines().next().unwrap().split(',').count(), 2 + 16);
}

#[test]
fn zero_weight_mix_is_rejected() {
    let mut c = cfg(Stage::ExpertSpeech, 1);
    c.task_mix = TaskMix { weights: vec![(TaskKind::Echo, 0.0)] };
    assert!(matches!(c.validate(), Err(TrainError::Config(_))));
}
