//! Manual calibration harness (run with --ignored --nocapture).

use std::time::Instant;

use cue_core::context_encoder::ContextEncoderConfig;
use cue_core::corpus::*;
use cue_core::decoder::DecoderConfig;
use cue_core::ensemble::Ensemble;
use cue_core::evaluation::{evaluate_ppl, ContextMode};
use cue_core::nn::OptimizerConfig;
use cue_core::sentence_encoder::{SentenceEncoder, SentenceEncoderConfig, SentenceEncoderVariant};
use cue_core::training::*;

fn mini_model_cfgs(v: usize, d: usize) -> (SentenceEncoderConfig, ContextEncoderConfig, DecoderConfig) {
    (
        SentenceEncoderConfig {
            variant: SentenceEncoderVariant::Transformer,
            layers: 2,
            dim: d,
            heads: 4,
            ffn_mult: 2,
            max_len: 48,
            vocab_size: v,
            tied_head: false,
        },
        ContextEncoderConfig {
            text_layers: 2,
            text_dim: d,
            text_heads: 4,
            text_ffn_mult: 2,
            max_context_len: 20,
            ffn_hidden: 2 * d,
            ctx_layers: 2,
            ctx_heads: 4,
            ctx_ffn_mult: 2,
            out_dim: d,
            vocab_size: v,
        },
        DecoderConfig {
            layers: 2,
            dim: d,
            heads: 4,
            ffn_mult: 2,
            max_len: 48,
            vocab_size: v,
            state_dim: d,
            fusion: cue_core::decoder::FusionMode::CrossAttention,
        },
    )
}

#[test]
#[ignore]
fn calibrate_mini() {
    for (name, alpha, tb, pb, len, ctx_epochs) in [
        ("V5", 0.8, 3.0, 3.0, (4usize, 8usize), 14usize),
    ] {
        println!("==================== variant {name} ====================");
        run_variant(alpha, tb, pb, len, ctx_epochs);
    }
}

#[test]
#[ignore]
fn calibrate_midscale() {
    let t0 = Instant::now();
    let cfg = SyntheticCorpusConfig {
        vocab_size: 3000,
        num_topics: 8,
        num_authors: 16,
        num_documents: 12000,
        topic_concentration: 0.6,
        seed: 42,
        ..SyntheticCorpusConfig::default()
    };
    let (raw, gt) = generate_synthetic_corpus(&cfg).unwrap();
    println!("[{:6.1?}] corpus: {} docs, {} slots", t0.elapsed(), raw.len(), gt.token_count);
    println!(
        "oracle: exp(H_marg)={:.1} exp(H_noctx_prefix)={:.1} exp(H|ctx)={:.1}",
        gt.h_marginal.exp(), gt.h_nocontext.exp(), gt.h_given_context.exp()
    );
    let vocab = vocabulary_from_raw(&raw, 3400, 1).unwrap();
    let docs = tokenize_raw(&raw, &vocab, 48);
    let splits = {
        let mut m = std::collections::BTreeMap::new();
        m.insert(SplitRole::WordLm, 0.45);
        m.insert(SplitRole::ContextTrain, 0.27);
        m.insert(SplitRole::ContextAdapt, 0.12);
        m.insert(SplitRole::Validation, 0.04);
        m.insert(SplitRole::Test, 0.12);
        split_corpus(docs, &SplitSpec::Fractions(m), 5).unwrap()
    };
    let count_tokens = |docs: &[Document]| -> usize {
        docs.iter().flat_map(|d| d.sentences.iter()).map(|s| s.len() + 1).sum()
    };
    for role in SplitRole::ALL {
        println!("  {:?}: {} tokens", role, count_tokens(&splits[&role]));
    }
    let v = vocab.len();
    let se_cfg = SentenceEncoderConfig::toy(v);
    let ctx_cfg = ContextEncoderConfig::toy(v);
    let dec_cfg = DecoderConfig::toy(v);
    let word_lm = &splits[&SplitRole::WordLm];
    let valid = &splits[&SplitRole::Validation];
    let test = &splits[&SplitRole::Test];

    let mut base = Ensemble::new(vocab.clone(), SentenceEncoder::new(se_cfg, 1).unwrap());
    let mut pc = PhaseConfig::new(PhaseKind::PretrainLm, 11);
    pc.optimizer = OptimizerConfig {
        epochs: 2,
        batch_tokens: 4096,
        weight_decay: 0.0,
        ..OptimizerConfig::default()
    };
    let out = run_phase(&mut base, &pc, word_lm, valid).unwrap();
    for m in &out.metrics {
        println!("  pretrain {} {}: ppl {:.1}", m.epoch, m.split, m.ppl);
    }
    println!("[{:6.1?}] pretrain done", t0.elapsed());
    let none_ppl = evaluate_ppl(&base, test, "t", &ContextMode::None, None).unwrap().ppl;
    println!("[{:6.1?}] PPL(none) = {:.1} (ref {:.1})", t0.elapsed(), none_ppl, gt.h_nocontext.exp());

    let setup = TrainSetup {
        ctx_cfg,
        dec_cfg,
        optimizer: OptimizerConfig {
            epochs: 8,
            batch_tokens: 2048,
            peak_lr: 8e-3,
            warmup_frac: 0.15,
            weight_decay: 0.0,
            ..OptimizerConfig::default()
        },
        seed: 17,
        warm_start: true,
    };
    let (full, outc) = train_context_model(
        &base.sentence, &vocab, &setup, None, &splits[&SplitRole::ContextTrain], valid,
    ).unwrap();
    for m in &outc.metrics {
        println!("  ctx {} {}: ppl {:.1}", m.epoch, m.split, m.ppl);
    }
    println!("[{:6.1?}] context training done", t0.elapsed());
    let full_ppl = evaluate_ppl(&full, test, "t", &ContextMode::Full, None).unwrap().ppl;
    let oracle_gap = gt.h_nocontext.exp() - gt.h_given_context.exp();
    let gain = none_ppl - full_ppl;
    println!(
        "[{:6.1?}] PPL full {:.1} | ratio {:.3} | gain {:.1} / gap {:.1} -> coverage {:.2}",
        t0.elapsed(), full_ppl, full_ppl / none_ppl, gain, oracle_gap, gain / oracle_gap
    );
}

fn run_variant(alpha: f64, tb: f64, pb: f64, len: (usize, usize), ctx_epochs: usize) {
    let t0 = Instant::now();
    let cfg = SyntheticCorpusConfig {
        vocab_size: 1200,
        num_topics: 6,
        num_authors: 12,
        num_documents: 3500,
        topic_concentration: alpha,
        title_boost: tb,
        prev_boost: pb,
        sentence_len: len,
        seed: 42,
        ..SyntheticCorpusConfig::default()
    };
    let (raw, gt) = generate_synthetic_corpus(&cfg).unwrap();
    println!("[{:6.1?}] corpus: {} docs, {} slots", t0.elapsed(), raw.len(), gt.token_count);
    println!(
        "oracle: exp(H_marg)={:.1} exp(H_noctx_prefix)={:.1} exp(H_noctx_pos)={:.1} exp(H|topic)={:.1} exp(H|ctx)={:.1}",
        gt.h_marginal.exp(),
        gt.h_nocontext.exp(),
        gt.h_nocontext_positional.exp(),
        gt.h_marginal_given_topic.exp(),
        gt.h_given_context.exp()
    );
    println!("per-signal: {:?}", gt.per_signal);

    let vocab = vocabulary_from_raw(&raw, 1500, 1).unwrap();
    println!("vocab size {}", vocab.len());
    let docs = tokenize_raw(&raw, &vocab, 48);
    let splits = {
        let mut m = std::collections::BTreeMap::new();
        m.insert(SplitRole::WordLm, 0.38);
        m.insert(SplitRole::ContextTrain, 0.32);
        m.insert(SplitRole::ContextAdapt, 0.12);
        m.insert(SplitRole::Validation, 0.05);
        m.insert(SplitRole::Test, 0.13);
        split_corpus(docs, &SplitSpec::Fractions(m), 5).unwrap()
    };
    let count_tokens = |docs: &[Document]| -> usize {
        docs.iter()
            .flat_map(|d| d.sentences.iter())
            .map(|s| s.len() + 1)
            .sum()
    };
    for role in SplitRole::ALL {
        println!("  {:?}: {} docs {} tokens", role, splits[&role].len(), count_tokens(&splits[&role]));
    }

    let (se_cfg, mut ctx_cfg, dec_cfg) = mini_model_cfgs(vocab.len(), 64);
    ctx_cfg.text_layers = 1;
    let word_lm = &splits[&SplitRole::WordLm];
    let valid = &splits[&SplitRole::Validation];
    let test = &splits[&SplitRole::Test];

    let mut base = Ensemble::new(vocab.clone(), SentenceEncoder::new(se_cfg, 1).unwrap());
    let mut pc = PhaseConfig::new(PhaseKind::PretrainLm, 11);
    pc.optimizer = OptimizerConfig {
        epochs: 4,
        batch_tokens: 1024,
        weight_decay: 0.0,
        ..OptimizerConfig::default()
    };
    let out = run_phase(&mut base, &pc, word_lm, valid).unwrap();
    for m in &out.metrics {
        println!("  pretrain epoch {} {}: loss {:.4} ppl {:.1}", m.epoch, m.split, m.loss, m.ppl);
    }
    println!("[{:6.1?}] pretrain done", t0.elapsed());
    let none_ppl = evaluate_ppl(&base, test, "test", &ContextMode::None, None).unwrap().ppl;
    println!("PPL(none) = {:.1}  (oracle floor for no-context {:.1})", none_ppl, gt.h_nocontext.exp());

    let setup = TrainSetup {
        ctx_cfg,
        dec_cfg,
        optimizer: OptimizerConfig {
            epochs: ctx_epochs,
            batch_tokens: 1024,
            weight_decay: 0.0,
            ..OptimizerConfig::default()
        },
        seed: 17,
        warm_start: true,
    };
    let (full, outc) = train_context_model(
        &base.sentence,
        &vocab,
        &setup,
        None,
        &splits[&SplitRole::ContextTrain],
        valid,
    )
    .unwrap();
    for m in &outc.metrics {
        println!("  ctx epoch {} {}: loss {:.4} ppl {:.1}", m.epoch, m.split, m.loss, m.ppl);
    }
    println!("[{:6.1?}] context training done", t0.elapsed());

    let full_ppl = evaluate_ppl(&full, test, "test", &ContextMode::Full, None).unwrap().ppl;
    let meta_ppl = evaluate_ppl(&full, test, "test", &ContextMode::MetadataOnly, None).unwrap().ppl;
    let prev_ppl = evaluate_ppl(&full, test, "test", &ContextMode::PreviousSentenceOnly, None)
        .unwrap()
        .ppl;
    println!(
        "PPL: none {:.1} | meta {:.1} | prev {:.1} | full {:.1}  (oracle ctx floor {:.1})",
        none_ppl, meta_ppl, prev_ppl, full_ppl, gt.h_given_context.exp()
    );
    let oracle_gap = gt.h_nocontext.exp() - gt.h_given_context.exp();
    let gain = none_ppl - full_ppl;
    println!(
        "ratio full/none = {:.3}  gain {:.1} vs oracle gap {:.1} -> coverage {:.2}",
        full_ppl / none_ppl,
        gain,
        oracle_gap,
        gain / oracle_gap
    );
    println!("[{:6.1?}] total", t0.elapsed());
}
