use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::Context;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use phrasal::align::{train_bidirectional, write_pharaoh, read_pharaoh, EmConfig, Heuristic};
use phrasal::corpus::{build_vocab, load_monolingual, load_parallel, LoadOptions, ParallelFormat, Sentence, SentencePair};
use phrasal::encoder::{load_checkpoint, save_checkpoint, EncoderConfig, EncoderParams, Lexicon, PhraseEncoder, CHECKPOINT_FILE};
use phrasal::extract::{apply_filters, extract_pairs, read_phrase_pairs, write_phrase_pairs, ExtractionConfig};
use phrasal::index::{Metric, PhraseIndex};
use phrasal::pipeline::{
    build_index, build_prompt, encode_occurrences, eval_acc_at_1, retrieve, GoldSet, MatchMode, Occurrence, PromptConfig, SpanSelection,
};
use phrasal::segmenter::{segment, write_segments, SegmentConfig};
use phrasal::synthetic::{generate, SyntheticConfig};
use phrasal::trainer::{make_batches, train, OptimizerState, TrainConfig};

use crate::config::{resolve, ConfigFile, Overrides, Resolved};
use crate::manifest::{write_atomic, RunManifest};
use crate::search::search_text;
use crate::serve::AppState;
use crate::{BitextArgs, BitextFormat, Cli, Command, MetricArg, ModeArg, Preset, SelectionArgs, Usage};

/// Records which checkpoint an index was built from.
pub const INDEX_MODEL_FILE: &str = "source_model.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignSettings {
    pub iterations: usize,
    pub epsilon: f64,
    pub use_null: bool,
    pub heuristic: Heuristic,
}

impl Default for AlignSettings {
    fn default() -> Self {
        let em = EmConfig::default();
        AlignSettings {
            iterations: em.iterations,
            epsilon: em.epsilon,
            use_null: em.use_null,
            heuristic: Heuristic::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct IndexSettings {
    pub metric: Metric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSettings {
    pub k: usize,
}

impl Default for SearchSettings {
    fn default() -> Self {
        SearchSettings { k: 32 }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexModel {
    model_sha256: String,
}

/// Exit-code-2 check that an input exists.
fn require(path: &Path, what: &str) -> anyhow::Result<()> {
    if !path.exists() {
        return Err(Usage(format!("{what} {} does not exist", path.display())).into());
    }
    Ok(())
}

/// Configuration errors from the library are usage errors.
fn usage_if_config(e: phrasal::Error) -> anyhow::Error {
    match e {
        phrasal::Error::Config(msg) => Usage(msg).into(),
        other => other.into(),
    }
}

fn checkpoint_file(model: &Path) -> PathBuf {
    if model.is_dir() {
        model.join(CHECKPOINT_FILE)
    } else {
        model.to_path_buf()
    }
}

fn file_sha256(path: &Path) -> anyhow::Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// Fails when `index` records a source checkpoint different from `model`.
pub fn check_index_model(index: &Path, model: &Path) -> anyhow::Result<()> {
    let sidecar = index.join(INDEX_MODEL_FILE);
    if !sidecar.exists() {
        return Ok(());
    }
    let recorded: IndexModel = serde_json::from_slice(&std::fs::read(&sidecar)?)?;
    let actual = file_sha256(&checkpoint_file(model))?;
    if recorded.model_sha256 != actual {
        anyhow::bail!(
            "index {} was built with a different model (checkpoint sha256 {} vs {})",
            index.display(),
            recorded.model_sha256,
            actual
        );
    }
    Ok(())
}

fn load_model(path: &Path) -> anyhow::Result<PhraseEncoder> {
    require(path, "model")?;
    load_checkpoint(path).with_context(|| format!("loading model {}", path.display()))
}

fn load_index(path: &Path) -> anyhow::Result<PhraseIndex> {
    require(path, "index")?;
    PhraseIndex::load(path).with_context(|| format!("loading index {}", path.display()))
}

fn load_bitext(args: &BitextArgs, manifest: &mut RunManifest) -> anyhow::Result<Vec<SentencePair>> {
    let format = match args.format {
        BitextFormat::Jsonl => {
            require(&args.bitext, "bitext")?;
            ParallelFormat::Jsonl
        }
        BitextFormat::TwoFile => ParallelFormat::TwoFile {
            src_lang: args.src_lang.clone().expect("required by clap"),
            tgt_lang: args.tgt_lang.clone().expect("required by clap"),
        },
    };
    manifest.input("bitext", &args.bitext);
    let corpus = manifest
        .time("load_bitext", || {
            load_parallel(&args.bitext, &format, LoadOptions { lowercase: args.lowercase })
        })
        .map_err(usage_if_config)?;
    if corpus.skipped() > 0 {
        log::warn!("skipped {} malformed bitext lines", corpus.skipped());
    }
    if corpus.pairs.is_empty() {
        return Err(Usage(format!("bitext {} has no sentence pairs", args.bitext.display())).into());
    }
    Ok(corpus.pairs)
}

fn segment_config(file: Option<&ConfigFile>, args: &SelectionArgs, for_query: bool) -> anyhow::Result<Resolved<SegmentConfig>> {
    let mut o = Overrides::new();
    o.set(if for_query { "query_threshold" } else { "index_threshold" }, args.threshold);
    let r = resolve(SegmentConfig::default(), file, "segment", &o)?;
    r.value.validate().map_err(usage_if_config)?;
    Ok(r)
}

fn selection(seg: &SegmentConfig, args: &SelectionArgs, for_query: bool) -> anyhow::Result<SpanSelection> {
    Ok(match args.ngram {
        Some(0) => return Err(Usage("--ngram must be >= 1".into()).into()),
        Some(n) => SpanSelection::Ngram(n),
        None => SpanSelection::Learned {
            threshold: if for_query { seg.query_threshold } else { seg.index_threshold },
            max_len: seg.max_span_len,
        },
    })
}

fn create_writer(path: &Path) -> anyhow::Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn ensure_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(())
}

fn sibling_manifest(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_os_string();
    name.push(".manifest.json");
    PathBuf::from(name)
}

fn read_lines(path: &Path) -> anyhow::Result<Vec<String>> {
    require(path, "input")?;
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(BufReader::new(file).lines().collect::<Result<_, _>>()?)
}

pub fn dispatch(cli: Cli) -> anyhow::Result<()> {
    let file = match &cli.config {
        Some(p) => Some(ConfigFile::load(p)?),
        None => None,
    };
    let file = file.as_ref();
    let seed = cli.seed;
    let name = subcommand_name(&cli.command);
    let mut manifest = RunManifest::new(name, seed.unwrap_or(0));
    if let Some(p) = &cli.config {
        manifest.input("config", p);
    }
    let default_manifest = run_command(cli.command, file, seed, &mut manifest)?;
    let path = cli.manifest.unwrap_or(default_manifest);
    manifest.write_atomic(&path)?;
    log::info!("manifest written to {}", path.display());
    Ok(())
}

fn subcommand_name(c: &Command) -> &'static str {
    match c {
        Command::Align { .. } => "align",
        Command::Extract { .. } => "extract",
        Command::Train { .. } => "train",
        Command::Segment { .. } => "segment",
        Command::BuildIndex { .. } => "build-index",
        Command::Search { .. } => "search",
        Command::Prompt { .. } => "prompt",
        Command::Eval { .. } => "eval",
        Command::Serve { .. } => "serve",
        Command::Synth { .. } => "synth",
    }
}

/// Runs one subcommand and returns the default manifest location.
fn run_command(command: Command, file: Option<&ConfigFile>, seed: Option<u64>, m: &mut RunManifest) -> anyhow::Result<PathBuf> {
    match command {
        Command::Align {
            bitext,
            iters,
            epsilon,
            no_null,
            heuristic,
            out,
            dump_table,
        } => {
            let heuristic: Option<Heuristic> = heuristic.map(|h| h.parse()).transpose().map_err(usage_if_config)?;
            let mut o = Overrides::new();
            o.set("iterations", iters)
                .set("epsilon", epsilon)
                .set("use_null", no_null.then_some(false))
                .set("heuristic", heuristic);
            let cfg = resolve(AlignSettings::default(), file, "align", &o)?;
            m.config("align", &cfg);
            let em = EmConfig {
                iterations: cfg.value.iterations,
                epsilon: cfg.value.epsilon,
                use_null: cfg.value.use_null,
            };
            em.validate().map_err(usage_if_config)?;
            let pairs = load_bitext(&bitext, m)?;
            let model = m.time("em", || train_bidirectional(&pairs, &em))?;
            for (dir, model1) in [("forward", &model.forward), ("reverse", &model.reverse)] {
                log::info!("{dir} log-likelihood per iteration: {:?}", model1.log_likelihoods);
            }
            let aligns = m.time("viterbi", || model.align_all(&pairs, cfg.value.heuristic));
            ensure_parent(&out)?;
            write_pharaoh(&out, &aligns)?;
            m.output("alignments", &out);
            if let Some(t) = dump_table {
                ensure_parent(&t)?;
                model.forward.table.dump_jsonl(&t)?;
                m.output("table", &t);
            }
            println!("aligned {} sentence pairs -> {}", pairs.len(), out.display());
            Ok(sibling_manifest(&out))
        }

        Command::Extract {
            bitext,
            alignments,
            out,
            max_len,
            freq_threshold,
            keep_numeric,
            strict,
        } => {
            let mut o = Overrides::new();
            o.set("max_phrase_len", max_len)
                .set("boundary_freq_threshold", freq_threshold)
                .set("drop_numeric_punct", keep_numeric.then_some(false))
                .set("strict_all_aligned", strict.then_some(true));
            let cfg = resolve(ExtractionConfig::default(), file, "extract", &o)?;
            cfg.value.validate().map_err(usage_if_config)?;
            m.config("extract", &cfg);
            let pairs = load_bitext(&bitext, m)?;
            require(&alignments, "alignments")?;
            m.input("alignments", &alignments);
            let aligns = read_pharaoh(&alignments, &pairs)?;
            let phrases = m.time("extract", || extract_pairs(&pairs, &aligns, &cfg.value))?;
            let vx = build_vocab(pairs.iter().map(|p| &p.x));
            let vy = build_vocab(pairs.iter().map(|p| &p.y));
            let total = phrases.len();
            let phrases = m.time("filter", || apply_filters(phrases, &pairs, &vx, &vy, &cfg.value));
            ensure_parent(&out)?;
            write_phrase_pairs(&out, &pairs, &phrases)?;
            m.output("phrases", &out);
            println!("extracted {} phrase pairs ({} before filtering) -> {}", phrases.len(), total, out.display());
            Ok(sibling_manifest(&out))
        }

        Command::Train {
            bitext,
            phrases,
            out,
            preset,
            steps,
            lr,
            batch_size,
            dropout,
            beta,
            temperature,
            literal_denominator,
            min_count,
        } => {
            let pairs = load_bitext(&bitext, m)?;
            require(&phrases, "phrases")?;
            m.input("phrases", &phrases);
            let phrase_pairs = read_phrase_pairs(&phrases, &pairs)?;
            let vx = build_vocab(pairs.iter().map(|p| &p.x));
            let vy = build_vocab(pairs.iter().map(|p| &p.y));
            let lexicon = Lexicon::from_vocab(&vx.merge(&vy), min_count);

            let (enc_default, train_default) = match preset {
                Preset::Desk => (EncoderConfig::desk(lexicon.len()), TrainConfig::desk()),
                Preset::Base => (EncoderConfig::base(lexicon.len()), TrainConfig::default()),
            };
            let mut o = Overrides::new();
            o.set("steps", steps)
                .set("learning_rate", lr)
                .set("batch_size", batch_size)
                .set("dropout", dropout)
                .set("beta", beta)
                .set("temperature", temperature)
                .set("literal_denominator", literal_denominator.then_some(true))
                .set("seed", seed);
            let tcfg = resolve(train_default, file, "train", &o)?;
            tcfg.value.validate().map_err(usage_if_config)?;
            let ecfg = resolve(enc_default, file, "encoder", &Overrides::new())?;
            let mut enc = ecfg.value.clone();
            enc.vocab_size = lexicon.len();
            enc.dropout = tcfg.value.dropout;
            enc.validate().map_err(usage_if_config)?;
            m.seed = tcfg.value.seed;
            m.config("train", &tcfg);
            m.config("encoder", &ecfg);
            m.config("vocab", &serde_json::json!({ "min_count": min_count, "size": lexicon.len(), "lowercase": bitext.lowercase }));

            let mut params = EncoderParams::init(&enc, &mut ChaCha8Rng::seed_from_u64(tcfg.value.seed))?;
            let mut opt = OptimizerState::new(&params);
            let batches = make_batches(&pairs, &phrase_pairs, &lexicon, enc.max_positions, &tcfg.value);
            if batches.eligible() == 0 {
                return Err(Usage("no sentence pair has an extracted phrase pair".into()).into());
            }
            log::info!(
                "training {} parameters on {} sentence pairs / {} phrase pairs",
                params.num_params(),
                batches.eligible(),
                phrase_pairs.len()
            );
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let metrics_path = out.join("metrics.jsonl");
            let mut metrics = create_writer(&metrics_path)?;
            let total = tcfg.value.steps;
            let history = m.time("train", || {
                train(&mut params, &mut opt, batches, &tcfg.value, |s| {
                    serde_json::to_writer(&mut metrics, s)?;
                    metrics.write_all(b"\n").map_err(|e| phrasal::Error::Config(e.to_string()))?;
                    if s.step % 100 == 0 || s.step as usize == total {
                        log::info!("step {} l_align {:.4} l_seg {:.4}", s.step, s.l_align, s.l_seg);
                    }
                    Ok(())
                })
            })?;
            metrics.flush()?;
            let encoder = PhraseEncoder::new(params, lexicon, bitext.lowercase)?;
            let ckpt = save_checkpoint(&out, &encoder)?;
            m.output("checkpoint", &ckpt);
            m.output("metrics", &metrics_path);
            if let Some(last) = history.last() {
                println!(
                    "trained {} steps: l_align={:.4} l_seg={:.4} -> {}",
                    last.step,
                    last.l_align,
                    last.l_seg,
                    ckpt.display()
                );
            }
            Ok(out.join("run_manifest.json"))
        }

        Command::Segment {
            model,
            input,
            lang,
            threshold,
            out,
        } => {
            let seg = segment_config(file, &SelectionArgs { threshold, ngram: None }, false)?;
            m.config("segment", &seg);
            let encoder = load_model(&model)?;
            m.input("model", &model);
            require(&input, "input")?;
            m.input("input", &input);
            let sentences = load_monolingual(&input, &lang, LoadOptions { lowercase: encoder.lowercase })?;
            let scored = m.time("segment", || {
                sentences
                    .par_iter()
                    .map(|s| Ok((s, segment(&encoder, s, seg.value.index_threshold, seg.value.max_span_len)?)))
                    .collect::<phrasal::Result<Vec<_>>>()
            })?;
            ensure_parent(&out)?;
            write_segments(&out, &scored)?;
            m.output("segments", &out);
            let n: usize = scored.iter().map(|(_, v)| v.len()).sum();
            println!("{n} spans from {} sentences -> {}", sentences.len(), out.display());
            Ok(sibling_manifest(&out))
        }

        Command::BuildIndex {
            model,
            input,
            lang,
            occurrences,
            selection: sel_args,
            metric,
            out,
        } => {
            let seg = segment_config(file, &sel_args, false)?;
            let mut o = Overrides::new();
            o.set(
                "metric",
                metric.map(|m| match m {
                    MetricArg::Ip => Metric::InnerProduct,
                    MetricArg::Cosine => Metric::Cosine,
                }),
            );
            let icfg = resolve(IndexSettings::default(), file, "index", &o)?;
            m.config("segment", &seg);
            m.config("index", &icfg);
            let encoder = load_model(&model)?;
            m.input("model", &model);
            let index = if let Some(occ_path) = occurrences {
                require(&occ_path, "occurrences")?;
                m.input("occurrences", &occ_path);
                let occ: Vec<Occurrence> = read_lines(&occ_path)?
                    .iter()
                    .enumerate()
                    .filter(|(_, l)| !l.trim().is_empty())
                    .map(|(n, l)| serde_json::from_str(l).with_context(|| format!("{}:{}", occ_path.display(), n + 1)))
                    .collect::<anyhow::Result<_>>()?;
                let items = m.time("encode", || encode_occurrences(&encoder, &occ, &lang))?;
                m.time("build", || PhraseIndex::build(encoder.out_dim(), icfg.value.metric, items))?
            } else {
                let input = input.expect("clap requires --input or --occurrences");
                require(&input, "input")?;
                m.input("input", &input);
                let sentences = load_monolingual(&input, &lang, LoadOptions { lowercase: encoder.lowercase })?;
                let sel = selection(&seg.value, &sel_args, false)?;
                m.time("encode", || build_index(&encoder, &sentences, sel, icfg.value.metric))?
            };
            index.save(&out)?;
            write_atomic(
                &out.join(INDEX_MODEL_FILE),
                &serde_json::to_vec_pretty(&IndexModel {
                    model_sha256: file_sha256(&checkpoint_file(&model))?,
                })?,
            )?;
            m.output("index", &out);
            println!("indexed {} phrases (dim {}) -> {}", index.len(), index.dim(), out.display());
            Ok(out.join("run_manifest.json"))
        }

        Command::Search {
            model,
            index,
            text,
            input,
            lang,
            k,
            selection: sel_args,
            out,
        } => {
            let seg = segment_config(file, &sel_args, true)?;
            let mut o = Overrides::new();
            o.set("k", k);
            let scfg = resolve(SearchSettings::default(), file, "search", &o)?;
            if scfg.value.k == 0 {
                return Err(Usage("k must be >= 1".into()).into());
            }
            m.config("segment", &seg);
            m.config("search", &scfg);
            let sel = selection(&seg.value, &sel_args, true)?;
            let encoder = load_model(&model)?;
            let idx = load_index(&index)?;
            check_index_model(&index, &model)?;
            m.input("model", &model);
            m.input("index", &index);
            let queries = match (text, &input) {
                (Some(t), _) => vec![t],
                (None, Some(p)) => {
                    m.input("input", p);
                    read_lines(p)?
                }
                (None, None) => unreachable!("clap requires --text or --input"),
            };
            let responses = m.time("search", || {
                queries
                    .iter()
                    .map(|q| search_text(&encoder, &idx, q, &lang, sel, scfg.value.k))
                    .collect::<phrasal::Result<Vec<_>>>()
            })?;
            let mut sink: Box<dyn Write> = match &out {
                Some(p) => {
                    m.output("results", p);
                    Box::new(create_writer(p)?)
                }
                None => Box::new(std::io::stdout().lock()),
            };
            for r in &responses {
                serde_json::to_writer(&mut sink, r)?;
                sink.write_all(b"\n")?;
            }
            sink.flush()?;
            Ok(out.as_deref().map(sibling_manifest).unwrap_or_else(|| PathBuf::from("phrasal-search.manifest.json")))
        }

        Command::Prompt {
            model,
            index,
            input,
            src_lang,
            tgt_lang,
            selection: sel_args,
            delimiter,
            mark_source,
            out,
        } => {
            let seg = segment_config(file, &sel_args, true)?;
            let mut o = Overrides::new();
            o.set("mark_source_inline", mark_source.then_some(true));
            let pcfg = resolve(PromptConfig::for_languages(&src_lang, &tgt_lang), file, "prompt", &o)?;
            m.config("segment", &seg);
            m.config("prompt", &pcfg);
            let sel = selection(&seg.value, &sel_args, true)?;
            let encoder = load_model(&model)?;
            let idx = load_index(&index)?;
            check_index_model(&index, &model)?;
            m.input("model", &model);
            m.input("index", &index);
            m.input("input", &input);
            let lines = read_lines(&input)?;
            let prompts = m.time("prompt", || {
                lines
                    .par_iter()
                    .enumerate()
                    .map(|(i, line)| {
                        let sentence = Sentence::from_text(i as u64, src_lang.as_str(), line, encoder.lowercase);
                        let results = retrieve(&encoder, &sentence, &idx, sel, 1)?;
                        Ok(build_prompt(&sentence, &results, &pcfg.value))
                    })
                    .collect::<phrasal::Result<Vec<String>>>()
            })?;
            let mut sink: Box<dyn Write> = match &out {
                Some(p) => {
                    m.output("prompts", p);
                    Box::new(create_writer(p)?)
                }
                None => Box::new(std::io::stdout().lock()),
            };
            for (i, p) in prompts.iter().enumerate() {
                if i > 0 {
                    writeln!(sink, "{delimiter}")?;
                }
                sink.write_all(p.as_bytes())?;
            }
            sink.flush()?;
            Ok(out.as_deref().map(sibling_manifest).unwrap_or_else(|| PathBuf::from("phrasal-prompt.manifest.json")))
        }

        Command::Eval {
            gold,
            index,
            model,
            mode,
            out,
        } => {
            require(&gold, "gold set")?;
            let gold_set = GoldSet::load(&gold)?;
            if gold_set.is_empty() {
                return Err(Usage(format!("gold set {} is empty", gold.display())).into());
            }
            let encoder = load_model(&model)?;
            let idx = load_index(&index)?;
            check_index_model(&index, &model)?;
            m.input("gold", &gold);
            m.input("model", &model);
            m.input("index", &index);
            let mode = match mode {
                ModeArg::Occurrence => MatchMode::Occurrence,
                ModeArg::String => MatchMode::String,
            };
            m.config("eval", &serde_json::json!({ "mode": mode }));
            let report = m.time("eval", || eval_acc_at_1(&gold_set, &encoder, &idx, mode))?;
            println!("acc@1={:.4}", report.accuracy);
            println!("correct={} total={} missing={}", report.correct, report.total, report.missing);
            if let Some(p) = &out {
                write_atomic(p, &serde_json::to_vec_pretty(&report)?)?;
                m.output("report", p);
            }
            Ok(out.as_deref().map(sibling_manifest).unwrap_or_else(|| PathBuf::from("phrasal-eval.manifest.json")))
        }

        Command::Serve {
            model,
            index,
            host,
            port,
            lang,
            selection: sel_args,
        } => {
            let seg = segment_config(file, &sel_args, true)?;
            m.config("segment", &seg);
            let sel = selection(&seg.value, &sel_args, true)?;
            require(&model, "model")?;
            require(&index, "index")?;
            m.input("model", &model);
            m.input("index", &index);
            let addr: SocketAddr = format!("{host}:{port}")
                .parse()
                .map_err(|e| Usage(format!("invalid listen address {host}:{port}: {e}")))?;
            let state = m.time("load", || AppState::load(&model, &index, sel, &lang))?;
            let runtime = tokio::runtime::Runtime::new()?;
            let manifest_path = PathBuf::from("phrasal-serve.manifest.json");
            runtime.block_on(async {
                let listener = crate::serve::bind(addr).await?;
                let local = listener.local_addr()?;
                println!("listening on http://{local}");
                std::io::stdout().flush()?;
                m.config("serve", &serde_json::json!({ "addr": local.to_string() }));
                crate::serve::run(listener, state, async {
                    let _ = tokio::signal::ctrl_c().await;
                })
                .await
            })?;
            Ok(manifest_path)
        }

        Command::Synth {
            out,
            train_pairs,
            gold_pairs,
            distractors,
        } => {
            let mut o = Overrides::new();
            o.set("seed", seed)
                .set("train_pairs", train_pairs)
                .set("gold_pairs", gold_pairs)
                .set("distractors", distractors);
            let cfg = resolve(SyntheticConfig::default(), file, "synth", &o)?;
            m.seed = cfg.value.seed;
            m.config("synth", &cfg);
            let data = m.time("generate", || generate(&cfg.value));
            std::fs::create_dir_all(&out)?;
            write_synthetic(&out, &data, cfg.value.distractors)?;
            m.output("dir", &out);
            println!(
                "wrote {} training pairs, {} gold items, {} distractors -> {}",
                data.train.len(),
                data.gold.len(),
                data.distractors.len(),
                out.display()
            );
            Ok(out.join("run_manifest.json"))
        }
    }
}

#[derive(Serialize)]
struct BitextLine<'a> {
    id: u64,
    src: String,
    tgt: String,
    src_lang: &'a str,
    tgt_lang: &'a str,
}

fn write_synthetic(dir: &Path, data: &phrasal::synthetic::SyntheticData, distractors: usize) -> anyhow::Result<()> {
    let bitext = |path: &Path, pairs: &[SentencePair]| -> anyhow::Result<()> {
        let mut w = create_writer(path)?;
        for p in pairs {
            let line = BitextLine {
                id: p.id,
                src: p.x.text(),
                tgt: p.y.text(),
                src_lang: &p.x.language,
                tgt_lang: &p.y.language,
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
        Ok(w.flush()?)
    };
    bitext(&dir.join("bitext.jsonl"), &data.train)?;
    bitext(&dir.join("heldout.jsonl"), &data.heldout)?;
    write_pharaoh(&dir.join("bitext.true.pharaoh"), &data.train_alignments)?;

    let mut w = create_writer(&dir.join("queries.txt"))?;
    for p in &data.heldout {
        writeln!(w, "{}", p.x.text())?;
    }
    w.flush()?;
    let mut w = create_writer(&dir.join("mono.txt"))?;
    for s in &data.mono {
        writeln!(w, "{}", s.text())?;
    }
    w.flush()?;

    let gold = data.gold_set();
    gold.save(&dir.join("gold.jsonl"))?;
    // Gold targets first, then distractors: the layout evaluated offline.
    let mut w = create_writer(&dir.join("occurrences.jsonl"))?;
    for occ in gold.items.iter().map(|i| &i.gold).chain(&data.distractor_occurrences(distractors)) {
        serde_json::to_writer(&mut w, occ)?;
        w.write_all(b"\n")?;
    }
    Ok(w.flush()?)
}
