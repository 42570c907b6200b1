//! Pretraining, supervised-mixture training, LoRA adaptation and threshold
//! tuning.

mod optim;

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    limit_unpunctuated, pack_chunks, Document, PackedChunk, PackingConfig, PackingMode,
};
use crate::corrupt::{corrupt, sample_scheme, CorruptedExample, CorruptionConfig, Scheme};
use crate::error::{Error, Result};
use crate::eval::{char_counts, Counts};
use crate::infer::{char_probs, DecodeConfig};
use crate::model::{attach_lora, loss_and_grad, LoraSpec, ModelParams, TrainExample};
use crate::rng;
use crate::tokenize::{PunctuationSet, Tokenizer};

pub use optim::{lr_at, lr_schedule, AdamW};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Sm,
    Lora,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Warmup {
    Steps(usize),
    Fraction(f64),
}

impl Warmup {
    pub fn steps(&self, total: usize) -> usize {
        match *self {
            Warmup::Steps(n) => n,
            Warmup::Fraction(f) => (f * total as f64).ceil() as usize,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub batch_size: usize,
    /// Optimizer steps for pretraining and the supervised mixture.
    pub steps: usize,
    /// Passes over the data for LoRA adaptation.
    pub epochs: usize,
    pub lr_peak: f64,
    pub warmup: Warmup,
    pub aux_loss_weight: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Training chunk length in tokens; capped at the model context.
    pub context_tokens: usize,
    pub corruption: CorruptionConfig,
    /// Schemes mixed uniformly during the supervised stage.
    pub schemes: Vec<Scheme>,
    pub geo_p: f64,
    /// Pretraining keeps at most this fraction of units without final
    /// punctuation.
    pub max_unpunctuated: f64,
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        TrainConfig {
            stage: Stage::Pretrain,
            batch_size: 512,
            steps: 200_000,
            epochs: 0,
            lr_peak: 1e-4,
            warmup: Warmup::Steps(5_000),
            aux_loss_weight: 1.0,
            weight_decay: 0.01,
            seed: 0,
            context_tokens: 256,
            corruption: CorruptionConfig::with_scheme(Scheme::Pretrain),
            schemes: Scheme::MIXTURE.to_vec(),
            geo_p: 0.5,
            max_unpunctuated: 0.1,
        }
    }

    pub fn sm() -> Self {
        TrainConfig {
            stage: Stage::Sm,
            batch_size: 128,
            steps: 20_000,
            lr_peak: 3e-5,
            warmup: Warmup::Steps(500),
            ..Self::pretrain()
        }
    }

    pub fn lora() -> Self {
        TrainConfig {
            stage: Stage::Lora,
            batch_size: 16,
            steps: 0,
            epochs: 30,
            lr_peak: 3e-4,
            warmup: Warmup::Fraction(0.1),
            ..Self::pretrain()
        }
    }

    pub fn for_stage(stage: Stage) -> Self {
        match stage {
            Stage::Pretrain => Self::pretrain(),
            Stage::Sm => Self::sm(),
            Stage::Lora => Self::lora(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.lr_peak.is_nan() || self.lr_peak <= 0.0 {
            return fail(format!("lr_peak must be positive, got {}", self.lr_peak));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        let total = match self.stage {
            Stage::Lora => self.epochs,
            _ => self.steps,
        };
        if total == 0 {
            return fail("training needs at least one step or epoch".into());
        }
        match self.warmup {
            Warmup::Steps(n) if self.stage != Stage::Lora && n > self.steps => {
                return fail(format!("warmup {n} exceeds {} steps", self.steps));
            }
            Warmup::Fraction(f) if !(0.0..=1.0).contains(&f) => {
                return fail(format!("warmup fraction {f} is outside [0, 1]"));
            }
            _ => {}
        }
        if self.stage == Stage::Sm && self.schemes.is_empty() {
            return fail("the supervised stage needs at least one scheme".into());
        }
        if self.schemes.contains(&Scheme::Pretrain) {
            return fail("the pretrain scheme cannot be mixed into the supervised stage".into());
        }
        self.corruption.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub language: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scheme: Option<Scheme>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub records: Vec<StepRecord>,
}

impl TrainOutcome {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }
}

/// Called after every optimizer step with the updated parameters.
pub type Observer<'a> = &'a mut dyn FnMut(&StepRecord, &ModelParams) -> Result<()>;

/// Token ids, per-token boundary labels and auxiliary targets for a
/// corrupted chunk, cut to `context` tokens. A token is positive when its
/// span contains a boundary character.
pub fn build_example(
    ex: &CorruptedExample,
    tok: &Tokenizer,
    punct: &PunctuationSet,
    context: usize,
) -> TrainExample {
    let seq = tok.encode(&ex.text);
    let n = seq.len().min(context);
    let mut labels = vec![0.0; n];
    for &b in &ex.boundaries {
        if let Some(t) = seq.token_at_char(b).filter(|&t| t < n) {
            labels[t] = 1.0;
        }
    }
    let mut aux = BTreeMap::new();
    for (&pos, &id) in &ex.aux_labels {
        let class = punct.aux_class(id);
        if let Some(t) = seq.token_at_char(pos).filter(|&t| t < n && class > 0) {
            aux.entry(t).or_insert(class);
        }
    }
    TrainExample {
        ids: seq.ids[..n].to_vec(),
        boundary_labels: labels,
        aux_targets: aux.into_iter().collect(),
    }
}

struct LanguagePool {
    language: String,
    fill: Vec<PackedChunk>,
    geometric: Vec<PackedChunk>,
}

fn pools(
    docs: &[Document],
    tok: &Tokenizer,
    cfg: &TrainConfig,
    context: usize,
) -> Result<Vec<LanguagePool>> {
    let mut by_lang: BTreeMap<&str, Vec<Document>> = BTreeMap::new();
    for d in docs {
        by_lang
            .entry(d.language.as_str())
            .or_default()
            .push(d.clone());
    }
    let mut out = Vec::new();
    for (li, (lang, docs)) in by_lang.into_iter().enumerate() {
        let docs = match cfg.stage {
            Stage::Pretrain => limit_unpunctuated(
                &docs,
                cfg.max_unpunctuated,
                rng::derive_tagged(cfg.seed, "filter", li as u64),
            ),
            _ => docs,
        };
        let pack = |mode| {
            let pc = PackingConfig {
                context_tokens: context,
                mode,
                geo_p: cfg.geo_p,
            };
            pack_chunks(
                &docs,
                &pc,
                tok,
                rng::derive_tagged(cfg.seed, "pack", li as u64),
            )
            .map(|p| p.chunks)
        };
        let fill = pack(PackingMode::Fill)?;
        let geometric = if cfg.stage == Stage::Sm && cfg.schemes.contains(&Scheme::SmUgc) {
            pack(PackingMode::Geometric)?
        } else {
            Vec::new()
        };
        if !fill.is_empty() {
            out.push(LanguagePool {
                language: lang.to_string(),
                fill,
                geometric,
            });
        }
    }
    if out.is_empty() {
        return Err(Error::Input("training data is empty".into()));
    }
    Ok(out)
}

fn check_aux(params: &ModelParams, punct: &PunctuationSet) -> Result<()> {
    if punct.aux_vocab() > params.config.aux_vocab {
        return Err(Error::Config(format!(
            "punctuation set needs {} auxiliary classes but the model has {}",
            punct.aux_vocab(),
            params.config.aux_vocab
        )));
    }
    Ok(())
}

fn scheme_for_step(cfg: &TrainConfig, step: usize) -> Scheme {
    let seed = rng::derive_tagged(cfg.seed, "step", step as u64);
    if cfg.schemes == Scheme::MIXTURE {
        sample_scheme(seed)
    } else {
        cfg.schemes[rng::rng(seed).random_range(0..cfg.schemes.len())]
    }
}

/// Runs the pretraining or supervised-mixture stage. Each step draws one
/// language uniformly, then a batch of chunks from it; the supervised stage
/// also draws one corruption scheme per batch.
pub fn train_stage(
    params: &ModelParams,
    docs: &[Document],
    tok: &Tokenizer,
    punct: &PunctuationSet,
    cfg: &TrainConfig,
    observer: Option<Observer<'_>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.stage == Stage::Lora {
        return Err(Error::Config("use adapt_lora for the LoRA stage".into()));
    }
    check_aux(params, punct)?;
    let context = cfg.context_tokens.min(params.config.max_context);
    let pools = pools(docs, tok, cfg, context)?;
    let warmup = cfg.warmup.steps(cfg.steps);
    let mut params = params.clone();
    let mut opt = AdamW::new(&params, cfg.weight_decay);
    let mut records = Vec::with_capacity(cfg.steps);
    let mut observer = observer;

    for step in 0..cfg.steps {
        let mut rng = rng::rng(rng::derive_tagged(cfg.seed, "batch", step as u64));
        let pool = &pools[rng.random_range(0..pools.len())];
        let (scheme, chunks) = match cfg.stage {
            Stage::Pretrain => (Scheme::Pretrain, &pool.fill),
            _ => {
                let s = scheme_for_step(cfg, step);
                let chunks = if s == Scheme::SmUgc && !pool.geometric.is_empty() {
                    &pool.geometric
                } else {
                    &pool.fill
                };
                (s, chunks)
            }
        };
        let ccfg = CorruptionConfig {
            scheme,
            ..cfg.corruption
        };
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for b in 0..cfg.batch_size {
            let chunk = &chunks[rng.random_range(0..chunks.len())];
            let seed = rng::derive(cfg.seed, (step * cfg.batch_size + b) as u64);
            let ex = corrupt(chunk, tok, punct, &ccfg, seed)?;
            batch.push(build_example(&ex, tok, punct, context));
        }

        let (loss, grads) = loss_and_grad(&params, &batch, cfg.aux_loss_weight)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        let lr = lr_at(step, cfg.steps, warmup, cfg.lr_peak);
        opt.step(&mut params, &grads, lr, &|_| true);
        let record = StepRecord {
            step,
            loss,
            lr,
            language: pool.language.clone(),
            scheme: (cfg.stage == Stage::Sm).then_some(scheme),
        };
        if let Some(obs) = observer.as_mut() {
            obs(&record, &params)?;
        }
        records.push(record);
    }
    Ok(TrainOutcome { params, records })
}

/// Largest number of sentences used for adaptation.
pub const MAX_ADAPT_SENTENCES: usize = 10_000;
/// Threshold tuning runs after adaptation when more sentences than this
/// are available.
pub const TUNE_MIN_SENTENCES: usize = 512;

#[derive(Debug, Clone)]
pub struct LoraOutcome {
    pub params: ModelParams,
    pub threshold: Option<f64>,
    pub records: Vec<StepRecord>,
}

/// Whether a tensor is trained during adaptation: adapter matrices and
/// the output heads.
pub fn lora_trainable(name: &str) -> bool {
    name.contains("lora_") || name.starts_with("head.")
}

/// Attaches adapters and trains them together with the heads on clean
/// domain sentences. Sentence order is reshuffled and repacked every epoch.
pub fn adapt_lora(
    params: &ModelParams,
    sentences: &[Document],
    tok: &Tokenizer,
    punct: &PunctuationSet,
    spec: &LoraSpec,
    cfg: &TrainConfig,
    observer: Option<Observer<'_>>,
) -> Result<LoraOutcome> {
    cfg.validate()?;
    check_aux(params, punct)?;
    let mut docs = Vec::new();
    let mut kept = 0;
    for d in sentences {
        let take = d.units.len().min(MAX_ADAPT_SENTENCES - kept);
        if take > 0 {
            docs.push(Document {
                language: d.language.clone(),
                units: d.units[..take].to_vec(),
            });
            kept += take;
        }
    }
    if kept == 0 {
        return Err(Error::Input(
            "adaptation needs at least one sentence".into(),
        ));
    }
    let context = cfg.context_tokens.min(params.config.max_context);
    let pack_cfg = PackingConfig {
        context_tokens: context,
        mode: PackingMode::Fill,
        geo_p: cfg.geo_p,
    };

    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = rng::rng(rng::derive_tagged(cfg.seed, "epoch", epoch as u64));
        let mut shuffled = docs.clone();
        for d in &mut shuffled {
            d.units.shuffle(&mut rng);
        }
        shuffled.shuffle(&mut rng);
        let mut chunks = pack_chunks(&shuffled, &pack_cfg, tok, cfg.seed)?.chunks;
        chunks.shuffle(&mut rng);
        epochs.push(chunks);
    }
    let total: usize = epochs
        .iter()
        .map(|c| c.len().div_ceil(cfg.batch_size))
        .sum();
    let warmup = cfg.warmup.steps(total).min(total);

    let mut params = attach_lora(params, spec, rng::derive_tagged(cfg.seed, "lora", 0))?;
    let mut opt = AdamW::new(&params, cfg.weight_decay);
    let mut records = Vec::with_capacity(total);
    let mut observer = observer;
    let mut step = 0;
    for chunks in &epochs {
        for group in chunks.chunks(cfg.batch_size) {
            let batch: Vec<TrainExample> = group
                .iter()
                .map(|c| build_example(&CorruptedExample::identity(c), tok, punct, context))
                .collect();
            let (loss, grads) = loss_and_grad(&params, &batch, cfg.aux_loss_weight)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { step, loss });
            }
            let lr = lr_at(step, total, warmup, cfg.lr_peak);
            opt.step(&mut params, &grads, lr, &lora_trainable);
            let record = StepRecord {
                step,
                loss,
                lr,
                language: group[0].language.clone(),
                scheme: None,
            };
            if let Some(obs) = observer.as_mut() {
                obs(&record, &params)?;
            }
            records.push(record);
            step += 1;
        }
    }

    let threshold = if kept > TUNE_MIN_SENTENCES {
        let chunks = pack_chunks(&docs, &pack_cfg, tok, cfg.seed)?.chunks;
        let dec = DecodeConfig {
            context,
            stride: (context / 2).max(1),
            ..DecodeConfig::default()
        };
        Some(tune_threshold(
            &params,
            tok,
            &chunks,
            &default_threshold_grid(),
            &dec,
        )?)
    } else {
        None
    };
    Ok(LoraOutcome {
        params,
        threshold,
        records,
    })
}

/// 40 log-spaced values from 0.001 to 0.9.
pub fn default_threshold_grid() -> Vec<f64> {
    let (lo, hi) = (1e-3f64.ln(), 0.9f64.ln());
    (0..40)
        .map(|k| (lo + (hi - lo) * k as f64 / 39.0).exp())
        .collect()
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() || grid.iter().any(|&a| !(a > 0.0 && a < 1.0)) {
        return Err(Error::Config(
            "threshold grid must be non-empty with values in (0, 1)".into(),
        ));
    }
    Ok(())
}

/// Grid value maximizing micro char-F1 over `(char_probs, gold)` pairs;
/// ties go to the smallest threshold. The final character is not scored.
pub fn tune_threshold_from_probs(
    data: &[(Vec<f64>, BTreeSet<usize>)],
    grid: &[f64],
) -> Result<f64> {
    check_grid(grid)?;
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut best = (f64::NEG_INFINITY, sorted[0]);
    for &alpha in &sorted {
        let mut counts = Counts::default();
        for (probs, gold) in data {
            let last = probs.len().checked_sub(1);
            let pred: BTreeSet<usize> = (0..probs.len())
                .filter(|&i| probs[i] > alpha && Some(i) != last)
                .collect();
            let gold: BTreeSet<usize> = gold.iter().copied().filter(|&i| Some(i) != last).collect();
            counts += char_counts(&pred, &gold);
        }
        let f1 = counts.scores().f1;
        if f1 > best.0 {
            best = (f1, alpha);
        }
    }
    Ok(best.1)
}

/// Runs the model over `chunks` and tunes the threshold on their gold
/// boundaries.
pub fn tune_threshold(
    params: &ModelParams,
    tok: &Tokenizer,
    chunks: &[PackedChunk],
    grid: &[f64],
    dec: &DecodeConfig,
) -> Result<f64> {
    check_grid(grid)?;
    let data = chunks
        .iter()
        .map(|c| {
            Ok((
                char_probs(params, tok, &c.text, dec)?,
                c.boundaries.iter().copied().collect(),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    tune_threshold_from_probs(&data, grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tokenize::{punctuation_set, train_bpe};

    fn setup() -> (Vec<Document>, Tokenizer, PunctuationSet, ModelParams) {
        let sents = ["Ab cd.", "Ef gh!", "Ij kl.", "Mn op?", "Qr st.", "Uv wx."];
        let docs = vec![Document::sentences("x", sents)];
        let text = sents.join(" ");
        let tok = train_bpe(&[text.as_str()], 40).unwrap();
        let punct = punctuation_set(&tok, &[text.as_str()], 5).unwrap();
        let cfg = ModelConfig::new(
            tok.vocab_size(),
            8,
            2,
            2,
            16,
            32,
            Some(2),
            punct.aux_vocab(),
        )
        .unwrap();
        (docs, tok, punct, ModelParams::init(cfg, 3).unwrap())
    }

    fn small(stage: Stage, steps: usize) -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            steps,
            epochs: steps,
            lr_peak: 1e-2,
            warmup: Warmup::Steps(0),
            context_tokens: 16,
            ..TrainConfig::for_stage(stage)
        }
    }

    #[test]
    fn single_step_at_zero_lr_changes_nothing() {
        let (docs, tok, punct, params) = setup();
        let cfg = TrainConfig {
            aux_loss_weight: 0.0,
            ..small(Stage::Pretrain, 1)
        };
        let out = train_stage(&params, &docs, &tok, &punct, &cfg, None).unwrap();
        assert_eq!(out.records[0].lr, 0.0);
        assert_eq!(out.params, params);
        assert!((out.records[0].loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn training_reduces_loss_and_is_reproducible() {
        let (docs, tok, punct, params) = setup();
        let cfg = small(Stage::Sm, 40);
        let a = train_stage(&params, &docs, &tok, &punct, &cfg, None).unwrap();
        let b = train_stage(&params, &docs, &tok, &punct, &cfg, None).unwrap();
        assert_eq!(a.losses(), b.losses());
        assert_eq!(a.params, b.params);
        let l = a.losses();
        let head: f64 = l[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = l[35..].iter().sum::<f64>() / 5.0;
        assert!(tail < head, "{head} -> {tail}");
    }

    #[test]
    fn observer_sees_every_step() {
        let (docs, tok, punct, params) = setup();
        let mut seen = Vec::new();
        let mut obs = |r: &StepRecord, _: &ModelParams| {
            seen.push(r.step);
            Ok(())
        };
        train_stage(
            &params,
            &docs,
            &tok,
            &punct,
            &small(Stage::Sm, 3),
            Some(&mut obs),
        )
        .unwrap();
        assert_eq!(seen, vec![0, 1, 2]);
    }

    #[test]
    fn labels_follow_boundaries() {
        let (_, tok, punct, _) = setup();
        let ex = CorruptedExample {
            text: "Ab cd Ef".into(),
            boundaries: vec![4, 7],
            aux_labels: [(4, tok.id(".").unwrap())].into(),
        };
        let t = build_example(&ex, &tok, &punct, 16);
        let seq = tok.encode(&ex.text);
        let pos = seq.token_at_char(4).unwrap();
        assert_eq!(t.boundary_labels[pos], 1.0);
        assert_eq!(*t.boundary_labels.last().unwrap(), 1.0);
        assert_eq!(t.boundary_labels.iter().sum::<f64>(), 2.0);
        assert_eq!(
            t.aux_targets,
            vec![(pos, punct.aux_class(tok.id(".").unwrap()))]
        );
        let cut = build_example(&ex, &tok, &punct, 1);
        assert_eq!(cut.ids.len(), 1);
    }

    #[test]
    fn lora_freezes_backbone() {
        let (docs, tok, punct, params) = setup();
        let out = adapt_lora(
            &params,
            &docs,
            &tok,
            &punct,
            &LoraSpec::new(2, 4.0),
            &small(Stage::Lora, 3),
            None,
        )
        .unwrap();
        assert!(out.threshold.is_none());
        let before = params.tensors();
        for (name, t) in out.params.tensors() {
            if let Some((_, b)) = before.iter().find(|(n, _)| *n == name) {
                if !name.starts_with("head.") {
                    assert_eq!(t, *b, "{name} changed");
                }
            }
        }
        assert!(adapt_lora(
            &params,
            &[],
            &tok,
            &punct,
            &LoraSpec::new(2, 4.0),
            &small(Stage::Lora, 3),
            None
        )
        .is_err());
    }

    #[test]
    fn threshold_examples() {
        let grid = default_threshold_grid();
        assert_eq!(grid.len(), 40);
        assert!((grid[0] - 1e-3).abs() < 1e-15 && (grid[39] - 0.9).abs() < 1e-12);

        let probs = vec![0.1, 0.9, 0.1, 0.9, 0.1, 0.9];
        let gold: BTreeSet<usize> = [1, 3, 5].into();
        let data = vec![(probs, gold)];
        assert_eq!(tune_threshold_from_probs(&data, &[0.5]).unwrap(), 0.5);
        assert_eq!(
            tune_threshold_from_probs(&data, &[0.95, 0.5, 0.05]).unwrap(),
            0.5
        );
        assert_eq!(tune_threshold_from_probs(&data, &[0.5, 0.6]).unwrap(), 0.5);
        assert!(tune_threshold_from_probs(&data, &[]).is_err());
        assert!(tune_threshold_from_probs(&data, &[1.0]).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::sm();
        assert!(cfg.validate().is_ok());
        cfg.lr_peak = 0.0;
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            warmup: Warmup::Steps(10),
            steps: 5,
            ..TrainConfig::sm()
        };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            schemes: vec![],
            ..TrainConfig::sm()
        };
        assert!(cfg.validate().is_err());
    }
}
