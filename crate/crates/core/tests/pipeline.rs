use satseg::checkpoint::{round_to_f32, Checkpoint};
use satseg::infer::{char_probs, segment, DecodeConfig};
use satseg::model::{ModelConfig, ModelParams};
use satseg::synthetic::{sentence_documents, sentences, Lexicon, SentenceStyle};
use satseg::tokenize::{punctuation_set, train_bpe, PunctuationSet, Tokenizer};
use satseg::train::{train_stage, TrainConfig, Warmup};

fn short_run(seed: u64) -> (ModelParams, Tokenizer, PunctuationSet) {
    let lex = Lexicon::generate(60, 4);
    let sents = sentences(&lex, &SentenceStyle::default(), 200, 5);
    let tok = train_bpe(&sents, 300).unwrap();
    let punct = punctuation_set(&tok, &[sents.join(" ")], 5).unwrap();
    let cfg = ModelConfig::new(
        tok.vocab_size(),
        16,
        2,
        2,
        32,
        64,
        Some(4),
        punct.aux_vocab(),
    )
    .unwrap();
    let init = ModelParams::init(cfg, seed).unwrap();
    let train = TrainConfig {
        batch_size: 2,
        steps: 6,
        lr_peak: 1e-3,
        warmup: Warmup::Steps(2),
        context_tokens: 64,
        seed,
        ..TrainConfig::sm()
    };
    let docs = sentence_documents("syn", &sents, 10);
    let out = train_stage(&init, &docs, &tok, &punct, &train, None).unwrap();
    assert_eq!(out.records.len(), 6);
    assert!(out.losses().iter().all(|l| l.is_finite()));
    (out.params, tok, punct)
}

#[test]
fn seeded_training_is_reproducible() {
    let (a, _, _) = short_run(3);
    let (b, _, _) = short_run(3);
    let (c, _, _) = short_run(4);
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn checkpoint_reload_gives_the_same_segmentation() {
    let (params, tok, punct) = short_run(7);
    let mut ckpt = Checkpoint::new(params.clone());
    ckpt.tokenizer = Some(tok.clone());
    ckpt.punctuation = Some(punct);
    ckpt.threshold = Some(0.3);
    let back = Checkpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap();
    assert_eq!(back.threshold, Some(0.3));
    assert_eq!(back.params, round_to_f32(&params));

    let text = "a run of words with no marks at all. and another one here";
    let tok2 = back.tokenizer.as_ref().unwrap();
    assert_eq!(tok2.encode(text).ids, tok.encode(text).ids);
    let dec = DecodeConfig {
        alpha: 0.3,
        stride: 16,
        context: 32,
    };
    let before = char_probs(&round_to_f32(&params), &tok, text, &dec).unwrap();
    let after = char_probs(&back.params, tok2, text, &dec).unwrap();
    assert_eq!(before, after);
    let seg = segment(&back.params, tok2, text, &dec).unwrap();
    assert_eq!(seg.sentences.concat(), text);
}
