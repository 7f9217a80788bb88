//! `bhasha` — command-line front end for the Hindi language-adaptation
//! toolkit: corpus preprocessing, near-duplicate removal, tokenizer
//! training and extension, embedding initialization, depth expansion,
//! stream mixing/packing, SFT preparation, and evaluation utilities.
//!
//! Every subcommand resolves its configuration from defaults < config file
//! < `BHASHA_*` environment variables < `--set` flags, and writes a run
//! manifest with SHA-256 digests of all inputs and outputs.

mod config;
mod manifest;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use bhasha::bpe::{self, TokenId, Tokenizer};
use bhasha::data::{self, ChatTemplate, TokenStream};
use bhasha::doc::{self, Document};
use bhasha::embed::{EmbedRole, EmbeddingMatrix, SimilaritySource};
use bhasha::eval::{self, ModelScorer, Norm};
use bhasha::model::{self, ExpandOptions};
use bhasha::pipeline::{self, PipelineConfig};
use bhasha::CheckpointF32;

use config::Config;
use manifest::RunManifest;

#[derive(Parser)]
#[command(name = "bhasha", version, about = "Hindi language-adaptation toolkit")]
struct Cli {
    /// Flat key=value config file (section-prefixed keys).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one config key (repeatable), e.g. --set pipeline.min_words=10
    #[arg(long = "set", global = true)]
    sets: Vec<String>,

    /// Where to write the run manifest (default: next to the main output).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,

    /// Worker-thread cap; 0 uses all cores. Overrides the `threads` key.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Detokenize, filter, clean, and deduplicate a JSONL corpus.
    Preprocess {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Audit-log JSONL of every rejection/edit decision.
        #[arg(long)]
        audit: Option<PathBuf>,
        /// Pipeline statistics JSON.
        #[arg(long)]
        stats: Option<PathBuf>,
    },
    /// Remove near-duplicate documents (MinHash/LSH) from a JSONL corpus.
    Dedup {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Duplicate-cluster report JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train a byte-level BPE tokenizer on a JSONL corpus.
    TokenizerTrain {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        merges: PathBuf,
    },
    /// Select extension tokens from a monolingual tokenizer and append
    /// them to the base vocabulary.
    TokenizerExtend {
        #[arg(long)]
        base_vocab: PathBuf,
        #[arg(long)]
        mono_vocab: PathBuf,
        #[arg(long)]
        mono_merges: PathBuf,
        /// Corpus used to rank candidate tokens by frequency.
        #[arg(long)]
        corpus: PathBuf,
        /// Extended vocabulary output.
        #[arg(long)]
        output: PathBuf,
    },
    /// Tokens-per-word report for a tokenizer over a JSONL corpus.
    Fertility {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        merges: PathBuf,
        /// Label recorded in the report.
        #[arg(long, default_value = "corpus")]
        tag: String,
        /// Earlier report to compute the relative reduction against.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Initialize embedding rows for extension tokens via external-space
    /// nearest neighbors.
    EmbedInit {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Extended vocabulary (base + extension tokens).
        #[arg(long)]
        vocab: PathBuf,
        /// External embedding file: header "dim count", then token<TAB>floats.
        #[arg(long)]
        external: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Per-token initialization audit JSONL.
        #[arg(long)]
        audit: Option<PathBuf>,
    },
    /// Insert identity-initialized blocks after every `expand.period`
    /// layers and emit the freeze mask.
    Expand {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        freeze_mask: PathBuf,
        /// Mark embedding/unembedding rows from this id on as trainable.
        #[arg(long)]
        new_vocab_rows_from: Option<usize>,
    },
    /// Check that an expanded checkpoint computes the same logits as its
    /// base over random probe sequences.
    VerifyIdentity {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        expanded: PathBuf,
    },
    /// Interleave two token streams at `mix.ratio_a:mix.ratio_b` by the
    /// prefix-balance rule.
    Mix {
        #[arg(long)]
        input_a: PathBuf,
        #[arg(long)]
        input_b: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Pack a token stream into fixed-length sequences with end-of-text
    /// demarcation.
    Pack {
        #[arg(long)]
        input: PathBuf,
        /// Binary shard of fixed-length id arrays.
        #[arg(long)]
        output: PathBuf,
        /// Sidecar index of document boundaries.
        #[arg(long)]
        index: PathBuf,
    },
    /// Render chat-template SFT data with loss masks and oversampling.
    SftPrepare {
        /// JSONL of {turns:[{role,text}], safety}.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        merges: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Score multiple-choice items by normalized log-likelihood under a
    /// reference-forward checkpoint.
    EvalMc {
        /// JSONL of {context, candidates[], gold}.
        #[arg(long)]
        items: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        merges: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Render pairwise judge prompts.
    JudgeRender {
        /// JSONL of {question, answer1, answer2}; omit to pass one triple
        /// via flags.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        question: Option<String>,
        #[arg(long)]
        answer1: Option<String>,
        #[arg(long)]
        answer2: Option<String>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Parse judge transcripts into verdicts and aggregate win/tie/loss.
    JudgeParse {
        /// JSONL of {question, answer1, answer2, raw_judgment}.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        /// Win/tie/loss CSV.
        #[arg(long)]
        summary: Option<PathBuf>,
        #[arg(long, default_value = "model_1")]
        model_a: String,
        #[arg(long, default_value = "model_2")]
        model_b: String,
    },
    /// Emit the continual-pretraining hyperparameter manifest.
    Recipe {
        #[arg(long)]
        output: PathBuf,
        /// Override a recipe key (repeatable), recording the deviation.
        #[arg(long = "override")]
        overrides: Vec<String>,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        let record = serde_json::json!({ "error": format!("{e:#}") });
        eprintln!("{record}");
        std::process::exit(1);
    }
}

fn open_reader(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| {
        format!("missing input file {}", path.display())
    })?))
}

fn create_writer(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| {
        format!("cannot create {}", path.display())
    })?))
}

fn read_docs(path: &Path) -> Result<Vec<Document>> {
    Ok(doc::read_jsonl(open_reader(path)?)?)
}

fn read_tokenizer(vocab: &Path, merges: &Path) -> Result<Tokenizer> {
    let v = bpe::read_vocab(open_reader(vocab)?)?;
    let m = bpe::read_merges(open_reader(merges)?)?;
    Ok(Tokenizer::new(v, m))
}

/// Token streams on disk: one JSON array of token ids per line, one line
/// per document.
fn read_token_stream(path: &Path) -> Result<TokenStream> {
    let mut docs: Vec<Vec<TokenId>> = Vec::new();
    for line in open_reader(path)?.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        docs.push(serde_json::from_str(&line)?);
    }
    Ok(TokenStream::from_documents(
        path.display().to_string(),
        docs,
    ))
}

fn write_token_stream(path: &Path, stream: &TokenStream) -> Result<()> {
    let mut w = create_writer(path)?;
    for doc in stream.documents() {
        writeln!(w, "{}", serde_json::to_string(doc)?)?;
    }
    Ok(())
}

fn read_checkpoint(path: &Path) -> Result<CheckpointF32> {
    Ok(CheckpointF32::read(open_reader(path)?)?)
}

fn pipeline_config(config: &Config) -> Result<PipelineConfig> {
    let mut pc = PipelineConfig::new();
    pc.thresholds.min_words = config.usize("pipeline.min_words")?;
    pc.thresholds.max_word_chars = config.usize("pipeline.max_word_chars")?;
    pc.thresholds.hindi_sentence_frac = config.f64("pipeline.hindi_sentence_frac")?;
    pc.thresholds.hindi_char_frac = config.f64("pipeline.hindi_char_frac")?;
    pc.thresholds.symbol_frac = config.f64("pipeline.symbol_frac")?;
    pc.thresholds.sentence_hindi_frac = config.f64("pipeline.sentence_hindi_frac")?;
    pc.clean.repeat_threshold = config.usize("pipeline.repeat_threshold")?;
    pc.clean.boilerplate_frac = config.f64("pipeline.boilerplate_frac")?;
    pc.clean.boilerplate_min_chars = config.usize("pipeline.boilerplate_min_chars")?;
    pc.build_boilerplate_index = config.bool("pipeline.boilerplate_index")?;
    pc.dedup = dedup_params(config)?;
    Ok(pc)
}

fn dedup_params(config: &Config) -> Result<bhasha::dedup::DedupParams> {
    Ok(bhasha::dedup::DedupParams {
        shingle_size: config.usize("dedup.shingle_size")?,
        num_perms: config.usize("dedup.num_perms")?,
        bands: config.usize("dedup.bands")?,
        rows_per_band: config.usize("dedup.rows_per_band")?,
        similarity_threshold: config.f64("dedup.similarity_threshold")?,
        seed: config.u64("dedup.seed")?,
    })
}

fn run(cli: Cli) -> Result<()> {
    let config = Config::resolve(cli.config.as_deref(), &cli.sets)?;
    let threads = match cli.threads {
        Some(n) => n,
        None => config.usize("threads")?,
    };
    if threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .context("configuring the worker pool")?;
    }

    match &cli.command {
        Command::Preprocess {
            input,
            output,
            audit,
            stats,
        } => {
            let mut run = RunManifest::new("preprocess", &config);
            run.record_input(input)?;
            // config echo so threshold provenance is visible in logs
            for (k, v) in config.entries() {
                if k.starts_with("pipeline.") || k.starts_with("dedup.") {
                    println!("{k}={v}");
                }
            }
            let docs = read_docs(input)?;
            let pc = pipeline_config(&config)?;
            let (kept, pipeline_stats, audit_entries) = pipeline::run_pipeline(docs, &pc)?;
            doc::write_jsonl(create_writer(output)?, &kept)?;
            run.record_output(output)?;
            if let Some(path) = audit {
                let mut w = create_writer(path)?;
                for entry in &audit_entries {
                    writeln!(w, "{}", serde_json::to_string(entry)?)?;
                }
                drop(w);
                run.record_output(path)?;
            }
            if let Some(path) = stats {
                std::fs::write(path, serde_json::to_string_pretty(&pipeline_stats)? + "\n")?;
                run.record_output(path)?;
            }
            println!(
                "kept {} of {} documents (retention {:.4})",
                pipeline_stats.kept_docs, pipeline_stats.input_docs, pipeline_stats.retention_ratio
            );
            run.write(cli.manifest.as_deref(), Some(output))?;
        }

        Command::Dedup {
            input,
            output,
            report,
        } => {
            let mut run = RunManifest::new("dedup", &config);
            run.record_input(input)?;
            let docs = read_docs(input)?;
            let params = dedup_params(&config)?;
            let before = docs.len();
            let (kept, dedup_report) = bhasha::dedup::dedup_corpus(docs, &params)?;
            doc::write_jsonl(create_writer(output)?, &kept)?;
            run.record_output(output)?;
            if let Some(path) = report {
                std::fs::write(path, serde_json::to_string_pretty(&dedup_report)? + "\n")?;
                run.record_output(path)?;
            }
            println!("kept {} of {before} documents", kept.len());
            run.write(cli.manifest.as_deref(), Some(output))?;
        }

        Command::TokenizerTrain {
            input,
            vocab,
            merges,
        } => {
            let mut run = RunManifest::new("tokenizer-train", &config);
            run.record_input(input)?;
            let docs = read_docs(input)?;
            let target = config.usize("tokenizer.target_vocab")?;
            let outcome = bpe::train_bpe(docs.iter().map(|d| d.text.as_str()), target);
            if !outcome.reached_target {
                eprintln!(
                    "warning: corpus exhausted at vocabulary size {} (target {target})",
                    outcome.vocab.len()
                );
            }
            bpe::write_vocab(create_writer(vocab)?, &outcome.vocab)?;
            bpe::write_merges(create_writer(merges)?, &outcome.merges)?;
            run.record_output(vocab)?;
            run.record_output(merges)?;
            println!("vocabulary size {}", outcome.vocab.len());
            run.write(cli.manifest.as_deref(), Some(vocab))?;
        }

        Command::TokenizerExtend {
            base_vocab,
            mono_vocab,
            mono_merges,
            corpus,
            output,
        } => {
            let mut run = RunManifest::new("tokenizer-extend", &config);
            for p in [base_vocab, mono_vocab, mono_merges, corpus] {
                run.record_input(p)?;
            }
            let base = bpe::read_vocab(open_reader(base_vocab)?)?;
            let mono = read_tokenizer(mono_vocab, mono_merges)?;
            let docs = read_docs(corpus)?;
            let count = config.usize("tokenizer.extension_count")?;
            let selection = bpe::select_extension_tokens(
                &mono,
                docs.iter().map(|d| d.text.as_str()),
                &base,
                count,
            );
            if !selection.fulfilled {
                eprintln!(
                    "warning: only {} novel tokens available (requested {count})",
                    selection.tokens.len()
                );
            }
            let extended = bpe::extend_vocabulary(&base, &selection.tokens)?;
            bpe::write_vocab(create_writer(output)?, &extended)?;
            run.record_output(output)?;
            println!(
                "extended vocabulary: {} base + {} extension tokens",
                extended.base_len(),
                extended.extension_len()
            );
            run.write(cli.manifest.as_deref(), Some(output))?;
        }

        Command::Fertility {
            corpus,
            vocab,
            merges,
            tag,
            baseline,
            output,
        } => {
            let mut run = RunManifest::new("fertility", &config);
            run.record_input(corpus)?;
            run.record_input(vocab)?;
            run.record_input(merges)?;
            let tok = read_tokenizer(vocab, merges)?;
            let docs = read_docs(corpus)?;
            let report = bpe::fertility(&tok, &docs, tag)?;
            let mut body = serde_json::to_value(&report)?;
            if let Some(path) = baseline {
                run.record_input(path)?;
                let base: bpe::FertilityReport =
                    serde_json::from_str(&std::fs::read_to_string(path)?)?;
                body["baseline_fertility"] = serde_json::json!(base.fertility);
                body["reduction_percent"] = serde_json::json!(bpe::fertility_reduction(
                    base.fertility,
                    report.fertility
                ));
            }
            let rendered = serde_json::to_string_pretty(&body)? + "\n";
            match output {
                Some(path) => {
                    std::fs::write(path, &rendered)?;
                    run.record_output(path)?;
                }
                None => print!("{rendered}"),
            }
            println!("fertility={:.4}", report.fertility);
            run.write(cli.manifest.as_deref(), output.as_deref())?;
        }

        Command::EmbedInit {
            checkpoint,
            vocab,
            external,
            output,
            audit,
        } => {
            let mut run = RunManifest::new("embed-init", &config);
            for p in [checkpoint, vocab, external] {
                run.record_input(p)?;
            }
            let ckpt = read_checkpoint(checkpoint)?;
            let voc = bpe::read_vocab(open_reader(vocab)?)?;
            let sim: SimilaritySource<f32> =
                SimilaritySource::read(open_reader(external)?, external.display().to_string())?;

            let base_len = voc.base_len();
            if ckpt.config.vocab_size != base_len {
                bail!(
                    "checkpoint vocab size {} does not match base vocabulary size {base_len}",
                    ckpt.config.vocab_size
                );
            }
            let base_tokens: Vec<String> = (0..base_len as TokenId)
                .map(|id| bpe::escape_token(voc.token(id).unwrap()))
                .collect();
            let new_tokens: Vec<String> = voc
                .extension_tokens()
                .iter()
                .map(|t| bpe::escape_token(t))
                .collect();

            let base_e = EmbeddingMatrix::new(EmbedRole::Embedding, ckpt.get("embed")?.clone());
            let base_u = EmbeddingMatrix::new(EmbedRole::Unembedding, ckpt.get("unembed")?.clone());
            let k = config.usize("embed.top_k")?;
            let noise_seed = config.u64("embed.noise_seed")?;
            let (new_e, new_u, audits) = bhasha::embed::extend_embeddings(
                &base_e,
                &base_u,
                &base_tokens,
                &new_tokens,
                &sim,
                k,
                noise_seed,
            )?;

            let mut out = ckpt.clone();
            out.config.vocab_size = voc.len();
            out.provenance = format!(
                "{}; embeddings extended by {} tokens",
                out.provenance,
                new_tokens.len()
            );
            out.insert("embed", new_e.rows);
            out.insert("unembed", new_u.rows);
            out.write(create_writer(output)?)?;
            run.record_output(output)?;
            if let Some(path) = audit {
                let mut w = create_writer(path)?;
                for entry in &audits {
                    writeln!(w, "{}", serde_json::to_string(entry)?)?;
                }
                drop(w);
                run.record_output(path)?;
            }
            println!("initialized {} new embedding rows", new_tokens.len());
            run.write(cli.manifest.as_deref(), Some(output))?;
        }

        Command::Expand {
            checkpoint,
            output,
            freeze_mask,
            new_vocab_rows_from,
        } => {
            let mut run = RunManifest::new("expand", &config);
            run.record_input(checkpoint)?;
            let ckpt = read_checkpoint(checkpoint)?;
            let period = config.usize("expand.period")?;
            let plan = model::plan_interleave(ckpt.config.n_layers, period)?;
            let options = ExpandOptions {
                new_vocab_rows_from: *new_vocab_rows_from,
            };
            let (expanded, mask) = model::expand_checkpoint(&ckpt, &plan, options)?;
            expanded.write(create_writer(output)?)?;
            mask.write(create_writer(freeze_mask)?)?;
            run.record_output(output)?;
            run.record_output(freeze_mask)?;
            println!(
                "expanded {} -> {} layers; new blocks at {:?}",
                ckpt.config.n_layers, expanded.config.n_layers, plan.new_targets
            );
            run.write(cli.manifest.as_deref(), Some(output))?;
        }

        Command::VerifyIdentity { base, expanded } => {
            let mut run = RunManifest::new("verify-identity", &config);
            run.record_input(base)?;
            run.record_input(expanded)?;
            let base_ckpt = read_checkpoint(base)?;
            let exp_ckpt = read_checkpoint(expanded)?;
            let probes = config.usize("verify.probes")?;
            let probe_len = config
                .usize("verify.probe_len")?
                .min(base_ckpt.config.context_length);
            let tolerance = config.f64("verify.tolerance")?;
            let seed = config.u64("seed")?;
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let vocab = base_ckpt.config.vocab_size as u32;
            let probe_seqs: Vec<Vec<u32>> = (0..probes)
                .map(|_| (0..probe_len).map(|_| rng.gen_range(0..vocab)).collect())
                .collect();
            let diff = model::verify_identity(&base_ckpt, &exp_ckpt, &probe_seqs)?;
            let pass = diff <= tolerance;
            println!(
                "max_logit_diff={diff:e} tolerance={tolerance:e} status={}",
                if pass { "pass" } else { "fail" }
            );
            run.write(cli.manifest.as_deref(), None)?;
            if !pass {
                bail!("identity check failed: max logit difference {diff:e} > {tolerance:e}");
            }
        }

        Command::Mix {
            input_a,
            input_b,
            output,
        } => {
            let mut run = RunManifest::new("mix", &config);
            run.record_input(input_a)?;
            run.record_input(input_b)?;
            let a = read_token_stream(input_a)?;
            let b = read_token_stream(input_b)?;
            let ratio = (config.u64("mix.ratio_a")?, config.u64("mix.ratio_b")?);
            let seed = config.u64("seed")?;
            let outcome = data::mix_streams(&a, &b, ratio, seed);
            write_token_stream(output, &outcome.stream)?;
            run.record_output(output)?;
            println!(
                "mixed {} + {} tokens (ratio {}:{}, final deviation {})",
                outcome.tokens_a, outcome.tokens_b, ratio.0, ratio.1, outcome.final_deviation
            );
            run.write(cli.manifest.as_deref(), Some(output))?;
        }

        Command::Pack {
            input,
            output,
            index,
        } => {
            let mut run = RunManifest::new("pack", &config);
            run.record_input(input)?;
            let stream = read_token_stream(input)?;
            let context = config.usize("pack.context_length")?;
            let eot_id = config.u32("pack.eot_id")?;
            let packed = data::pack_sequences(&stream, context, eot_id);
            data::write_packed(&packed, context, create_writer(output)?, create_writer(index)?)?;
            run.record_output(output)?;
            run.record_output(index)?;
            println!("packed {} sequences of {context} tokens", packed.len());
            run.write(cli.manifest.as_deref(), Some(output))?;
        }

        Command::SftPrepare {
            input,
            vocab,
            merges,
            output,
        } => {
            let mut run = RunManifest::new("sft-prepare", &config);
            for p in [input, vocab, merges] {
                run.record_input(p)?;
            }
            let tok = read_tokenizer(vocab, merges)?;
            let records = data::read_sft_jsonl(open_reader(input)?)?;
            let base_id = match config.u32("sft.control_base_id")? {
                0 => tok.vocab.len() as TokenId,
                id => id,
            };
            let template = ChatTemplate::instruct_default(base_id);
            let rendered: Vec<(data::RenderedExample, bool)> = records
                .iter()
                .map(|r| data::render_chat(r, &template, &tok).map(|e| (e.clone(), e.safety)))
                .collect::<bhasha::Result<_>>()?;
            let factor = config.usize("sft.oversample_factor")?;
            let seed = config.u64("seed")?;
            let out_examples = data::oversample(&rendered, factor, seed);
            let mut w = create_writer(output)?;
            for ex in &out_examples {
                let line = serde_json::json!({
                    "tokens": ex.tokens,
                    "mask": ex.mask,
                    "safety": ex.safety,
                });
                writeln!(w, "{line}")?;
            }
            drop(w);
            run.record_output(output)?;
            println!(
                "rendered {} records into {} examples (factor {factor})",
                records.len(),
                out_examples.len()
            );
            run.write(cli.manifest.as_deref(), Some(output))?;
        }

        Command::EvalMc {
            items,
            checkpoint,
            vocab,
            merges,
            output,
        } => {
            let mut run = RunManifest::new("eval-mc", &config);
            for p in [items, checkpoint, vocab, merges] {
                run.record_input(p)?;
            }
            let mc_items = eval::read_mc_jsonl(open_reader(items)?)?;
            let ckpt = read_checkpoint(checkpoint)?;
            let tok = read_tokenizer(vocab, merges)?;
            let scorer = ModelScorer {
                checkpoint: &ckpt,
                tokenizer: &tok,
            };
            let norm: Norm = config.str("eval.norm").parse()?;
            let mut scored = Vec::with_capacity(mc_items.len());
            let mut golds = Vec::with_capacity(mc_items.len());
            let mut lines = Vec::with_capacity(mc_items.len());
            for item in &mc_items {
                match eval::score_candidates(item, &scorer, norm) {
                    Ok(choice) => {
                        lines.push(serde_json::json!({
                            "chosen": choice.chosen,
                            "gold": item.gold,
                            "candidates": choice.candidates,
                        }));
                        scored.push(choice);
                        golds.push(item.gold);
                    }
                    Err(e) => {
                        lines.push(serde_json::json!({
                            "unscored": true,
                            "gold": item.gold,
                            "error": e.to_string(),
                        }));
                    }
                }
            }
            if let Some(path) = output {
                let mut w = create_writer(path)?;
                for line in &lines {
                    writeln!(w, "{line}")?;
                }
                drop(w);
                run.record_output(path)?;
            }
            let acc = eval::accuracy(&scored, &golds)?;
            println!(
                "accuracy={acc:.4} scored={} unscored={}",
                scored.len(),
                mc_items.len() - scored.len()
            );
            run.write(cli.manifest.as_deref(), output.as_deref())?;
        }

        Command::JudgeRender {
            input,
            question,
            answer1,
            answer2,
            output,
        } => {
            let mut run = RunManifest::new("judge-render", &config);
            let prompts: Vec<String> = match (input, question, answer1, answer2) {
                (Some(path), None, None, None) => {
                    run.record_input(path)?;
                    let transcripts: Vec<serde_json::Value> = open_reader(path)?
                        .lines()
                        .filter_map(|l| l.ok().filter(|l| !l.trim().is_empty()))
                        .map(|l| serde_json::from_str(&l))
                        .collect::<std::result::Result<_, _>>()?;
                    transcripts
                        .iter()
                        .map(|t| {
                            let get = |k: &str| {
                                t.get(k)
                                    .and_then(|v| v.as_str())
                                    .with_context(|| format!("record missing field {k:?}"))
                            };
                            Ok(eval::render_judge_prompt(
                                get("question")?,
                                get("answer1")?,
                                get("answer2")?,
                            ))
                        })
                        .collect::<Result<_>>()?
                }
                (None, Some(q), Some(a1), Some(a2)) => {
                    vec![eval::render_judge_prompt(q, a1, a2)]
                }
                _ => bail!(
                    "pass either --input, or all of --question/--answer1/--answer2"
                ),
            };
            match output {
                Some(path) => {
                    let mut w = create_writer(path)?;
                    for p in &prompts {
                        writeln!(w, "{}", serde_json::json!({ "prompt": p }))?;
                    }
                    drop(w);
                    run.record_output(path)?;
                }
                None => {
                    for p in &prompts {
                        println!("{p}");
                    }
                }
            }
            run.write(cli.manifest.as_deref(), output.as_deref())?;
        }

        Command::JudgeParse {
            input,
            output,
            summary,
            model_a,
            model_b,
        } => {
            let mut run = RunManifest::new("judge-parse", &config);
            run.record_input(input)?;
            let transcripts = eval::read_judge_jsonl(open_reader(input)?)?;
            let verdicts: Vec<eval::JudgeVerdict> = transcripts
                .iter()
                .map(|t| eval::parse_judge(&t.raw_judgment))
                .collect();
            if let Some(path) = output {
                let mut w = create_writer(path)?;
                for v in &verdicts {
                    writeln!(w, "{}", serde_json::to_string(v)?)?;
                }
                drop(w);
                run.record_output(path)?;
            }
            let agg = eval::aggregate_pairwise(&verdicts)?;
            let csv = agg.to_csv(model_a, model_b);
            if let Some(path) = summary {
                std::fs::write(path, &csv)?;
                run.record_output(path)?;
            }
            print!("{csv}");
            println!(
                "parsed={} failed={} mean1={:.2} mean2={:.2}",
                agg.parsed, agg.failed, agg.mean1, agg.mean2
            );
            run.write(cli.manifest.as_deref(), output.as_deref())?;
        }

        Command::Recipe { output, overrides } => {
            let mut run = RunManifest::new("recipe", &config);
            let mut recipe = data::RecipeManifest::defaults();
            for entry in overrides {
                let (k, v) = entry
                    .split_once('=')
                    .with_context(|| format!("--override {entry:?}: expected key=value"))?;
                recipe.set(k.trim(), v.trim())?;
            }
            recipe.write(create_writer(output)?)?;
            run.record_output(output)?;
            println!("recipe written to {}", output.display());
            run.write(cli.manifest.as_deref(), Some(output))?;
        }
    }
    Ok(())
}
