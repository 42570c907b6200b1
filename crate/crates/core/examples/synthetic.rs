//! Trains a small model on the synthetic language through both stages and
//! reports held-out F1 on clean and stripped text.
//!
//! cargo run --release -p satseg --example synthetic -- [pretrain_steps] [sm_steps] [batch]

use std::collections::BTreeSet;
use std::time::Instant;

use satseg::corpus::{Document, PackedChunk};
use satseg::eval::{asr_corrupt_eval, evaluate, EvalItem, EvalOptions};
use satseg::infer::{segment, DecodeConfig};
use satseg::model::{ModelConfig, ModelParams};
use satseg::synthetic::{
    paragraph_documents, sentence_documents, sentences, Lexicon, SentenceStyle,
};
use satseg::tokenize::{punctuation_set, train_bpe, PunctuationSet, Tokenizer};
use satseg::train::{train_stage, TrainConfig, Warmup};

fn score(params: &ModelParams, tok: &Tokenizer, chunks: &[PackedChunk], alpha: f64) -> f64 {
    let dec = DecodeConfig {
        alpha,
        stride: 64,
        context: 128,
    };
    let items: Vec<EvalItem> = chunks
        .iter()
        .map(|c| {
            let r = segment(params, tok, &c.text, &dec).unwrap();
            EvalItem {
                text: c.text.clone(),
                pred: r.boundaries.into_iter().collect(),
                gold: c.boundaries.iter().copied().collect::<BTreeSet<_>>(),
                language: c.language.clone(),
            }
        })
        .collect();
    evaluate(&items, None, EvalOptions::default()).unwrap().f1
}

fn main() {
    let args: Vec<usize> = std::env::args()
        .skip(1)
        .map(|a| a.parse().unwrap())
        .collect();
    let pre_steps = args.first().copied().unwrap_or(300);
    let sm_steps = args.get(1).copied().unwrap_or(600);
    let batch = args.get(2).copied().unwrap_or(4);

    let lex = Lexicon::generate(200, 1);
    let style = SentenceStyle::default();
    let train_sents = sentences(&lex, &style, 5000, 2);
    let test_sents = sentences(&lex, &style, 400, 3);

    let stripped: Vec<String> = train_sents
        .iter()
        .map(|s| s.to_lowercase().replace(['.', ';'], ""))
        .collect();
    let mut tok_corpus = train_sents.clone();
    tok_corpus.extend(stripped);
    let tok = train_bpe(&tok_corpus, 2000).unwrap();
    let punct: PunctuationSet = punctuation_set(&tok, &[train_sents.join(" ")], 5).unwrap();
    println!("vocab {} punct {:?}", tok.vocab_size(), punct.chars);

    let cfg = ModelConfig::new(
        tok.vocab_size(),
        64,
        2,
        4,
        256,
        128,
        Some(8),
        punct.aux_vocab(),
    )
    .unwrap();
    let params = ModelParams::init(cfg, 7).unwrap();

    let paragraphs = paragraph_documents("syn", &train_sents, 3, 20, 4);
    let sent_docs = sentence_documents("syn", &train_sents, 20);
    let test_docs = sentence_documents("syn", &test_sents, 12);
    let clean: Vec<PackedChunk> = test_docs
        .iter()
        .map(|d| {
            PackedChunk::from_units(
                "syn",
                &d.units.iter().map(|u| u.text.clone()).collect::<Vec<_>>(),
            )
        })
        .collect();
    let (stripped_docs, _) = asr_corrupt_eval(&test_docs, &punct);
    let to_chunks = |docs: &[Document]| -> Vec<PackedChunk> {
        docs.iter()
            .map(|d| {
                PackedChunk::from_units(
                    "syn",
                    &d.units.iter().map(|u| u.text.clone()).collect::<Vec<_>>(),
                )
            })
            .collect()
    };
    let stripped_chunks = to_chunks(&stripped_docs);

    let t = Instant::now();
    let pre = TrainConfig {
        batch_size: batch,
        steps: pre_steps,
        lr_peak: 2e-3,
        warmup: Warmup::Steps(pre_steps / 10),
        context_tokens: 128,
        seed: 11,
        ..TrainConfig::pretrain()
    };
    let out = train_stage(&params, &paragraphs, &tok, &punct, &pre, None).unwrap();
    let l = out.losses();
    println!(
        "pretrain {:.1}s loss {:.3} -> {:.3}",
        t.elapsed().as_secs_f64(),
        l[0],
        l[l.len() - 1]
    );
    let sm = TrainConfig {
        batch_size: batch,
        steps: sm_steps,
        lr_peak: 2e-3,
        warmup: Warmup::Steps(sm_steps / 10),
        context_tokens: 128,
        seed: 12,
        ..TrainConfig::sm()
    };
    let out = train_stage(&out.params, &sent_docs, &tok, &punct, &sm, None).unwrap();
    let l = out.losses();
    println!(
        "sm {:.1}s loss {:.3} -> {:.3}",
        t.elapsed().as_secs_f64(),
        l[0],
        l[l.len() - 1]
    );
    for alpha in [0.1, 0.25, 0.5] {
        println!(
            "alpha {alpha}: clean F1 {:.3} stripped F1 {:.3}",
            score(&out.params, &tok, &clean, alpha),
            score(&out.params, &tok, &stripped_chunks, alpha)
        );
    }
    println!("total {:.1}s", t.elapsed().as_secs_f64());
}
