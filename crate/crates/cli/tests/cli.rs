//! End-to-end tests of the `bhasha` binary: each subcommand is exercised
//! against small fixtures through real files, checking outputs, manifests,
//! and exit codes.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use bhasha::model::{random_checkpoint, ModelConfig};
use bhasha::CheckpointF32;

fn bhasha(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bhasha"))
        .args(args)
        .env_remove("BHASHA_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn write_corpus(path: &Path, docs: &[(&str, &str)]) {
    let mut body = String::new();
    for (id, text) in docs {
        body.push_str(&serde_json::json!({"id": id, "text": text, "source": "test"}).to_string());
        body.push('\n');
    }
    fs::write(path, body).unwrap();
}

const HINDI_LONG: &str = "भारत एक विशाल देश है और यहाँ अनेक भाषाएँ बोली जाती हैं। \
हिंदी उनमें सबसे अधिक बोली जाने वाली भाषा है। यह देवनागरी लिपि में लिखी जाती है। \
साहित्य, सिनेमा और संगीत में हिंदी का बड़ा योगदान है। विद्यालयों में बच्चे हिंदी पढ़ते हैं।";

#[test]
fn preprocess_echoes_thresholds_and_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.jsonl");
    let output = dir.path().join("out.jsonl");
    write_corpus(&input, &[("keep", HINDI_LONG), ("short", "बहुत छोटा")]);

    // the boilerplate index treats any line shared by half the corpus as
    // boilerplate, which on a 2-document fixture is every line
    let out = bhasha(&[
        "--set",
        "pipeline.boilerplate_index=false",
        "preprocess",
        "--input",
        input.to_str().unwrap(),
        "--output",
        output.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{out:?}");
    let text = stdout(&out);
    assert!(text.contains("pipeline.min_words=20"));
    assert!(text.contains("pipeline.max_word_chars=100"));
    assert!(text.contains("pipeline.hindi_sentence_frac=0.5"));
    assert!(text.contains("pipeline.hindi_char_frac=0.7"));
    assert!(text.contains("pipeline.symbol_frac=0.2"));

    let kept = fs::read_to_string(&output).unwrap();
    assert!(kept.contains("keep"));
    assert!(!kept.contains("short"));

    let manifest = fs::read_to_string(dir.path().join("out.jsonl.manifest.json")).unwrap();
    let manifest: serde_json::Value = serde_json::from_str(&manifest).unwrap();
    assert_eq!(manifest["subcommand"], "preprocess");
    assert!(manifest["inputs"][input.to_str().unwrap()].is_string());
    assert_eq!(manifest["config"]["pipeline.min_words"], "20");
}

#[test]
fn config_file_env_and_flags_override_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.jsonl");
    let output = dir.path().join("out.jsonl");
    write_corpus(&input, &[("doc", HINDI_LONG)]);
    let cfg = dir.path().join("bhasha.conf");
    fs::write(&cfg, "pipeline.min_words=7\n").unwrap();

    // file value visible
    let out = bhasha(&[
        "--config",
        cfg.to_str().unwrap(),
        "preprocess",
        "--input",
        input.to_str().unwrap(),
        "--output",
        output.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    assert!(stdout(&out).contains("pipeline.min_words=7"));

    // env overrides file
    let out = Command::new(env!("CARGO_BIN_EXE_bhasha"))
        .args([
            "--config",
            cfg.to_str().unwrap(),
            "preprocess",
            "--input",
            input.to_str().unwrap(),
            "--output",
            output.to_str().unwrap(),
        ])
        .env("BHASHA_PIPELINE_MIN_WORDS", "9")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(stdout(&out).contains("pipeline.min_words=9"));

    // flag overrides both
    let out = Command::new(env!("CARGO_BIN_EXE_bhasha"))
        .args([
            "--config",
            cfg.to_str().unwrap(),
            "--set",
            "pipeline.min_words=11",
            "preprocess",
            "--input",
            input.to_str().unwrap(),
            "--output",
            output.to_str().unwrap(),
        ])
        .env("BHASHA_PIPELINE_MIN_WORDS", "9")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(stdout(&out).contains("pipeline.min_words=11"));
}

#[test]
fn unknown_config_key_is_machine_readable_error() {
    let out = bhasha(&["--set", "pipeline.no_such=1", "recipe", "--output", "/dev/null"]);
    assert!(!out.status.success());
    let err: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).unwrap();
    let msg = err["error"].as_str().unwrap();
    assert!(msg.contains("unknown config key"));
    assert!(msg.contains("pipeline.min_words"), "lists valid keys");
}

#[test]
fn missing_input_file_is_an_error_naming_the_path() {
    let out = bhasha(&[
        "dedup",
        "--input",
        "/nonexistent/corpus.jsonl",
        "--output",
        "/dev/null",
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("/nonexistent/corpus.jsonl"));
}

#[test]
fn recipe_defaults_and_override() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("recipe.txt");
    let out = bhasha(&["recipe", "--output", path.to_str().unwrap()]);
    assert!(out.status.success());
    let text = fs::read_to_string(&path).unwrap();
    for needle in [
        "peak_lr=1.5e-4",
        "batch_tokens=4194304",
        "warmup_fraction=0.01",
        "lr_decay=cosine",
        "lr_decay_factor=10",
        "adam_beta1=0.9",
        "adam_beta2=0.95",
        "adam_eps=1e-5",
        "weight_decay=0.1",
        "grad_clip=1.0",
        "context_length=8192",
    ] {
        assert!(text.contains(needle), "missing {needle} in:\n{text}");
    }

    let out = bhasha(&[
        "recipe",
        "--output",
        path.to_str().unwrap(),
        "--override",
        "context_length=1024",
    ]);
    assert!(out.status.success());
    let text = fs::read_to_string(&path).unwrap();
    assert!(text.contains("context_length=1024"));
    assert!(text.contains("# deviation: context_length=1024 (default 8192)"));
}

/// Full tokenizer workflow: train base on mixed text, train monolingual on
/// Hindi, extend, and check that fertility strictly drops on Hindi text.
#[test]
fn tokenizer_workflow_reduces_fertility() {
    let dir = tempfile::tempdir().unwrap();
    let hindi = dir.path().join("hindi.jsonl");
    let mixed = dir.path().join("mixed.jsonl");
    write_corpus(&hindi, &[("h1", HINDI_LONG), ("h2", HINDI_LONG)]);
    write_corpus(
        &mixed,
        &[("e1", "the quick brown fox jumps over the lazy dog again and again")],
    );

    let base_vocab = dir.path().join("base.vocab");
    let base_merges = dir.path().join("base.merges");
    let out = bhasha(&[
        "--set",
        "tokenizer.target_vocab=300",
        "tokenizer-train",
        "--input",
        mixed.to_str().unwrap(),
        "--vocab",
        base_vocab.to_str().unwrap(),
        "--merges",
        base_merges.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{out:?}");

    let mono_vocab = dir.path().join("mono.vocab");
    let mono_merges = dir.path().join("mono.merges");
    let out = bhasha(&[
        "--set",
        "tokenizer.target_vocab=400",
        "tokenizer-train",
        "--input",
        hindi.to_str().unwrap(),
        "--vocab",
        mono_vocab.to_str().unwrap(),
        "--merges",
        mono_merges.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{out:?}");

    let ext_vocab = dir.path().join("ext.vocab");
    let out = bhasha(&[
        "--set",
        "tokenizer.extension_count=50",
        "tokenizer-extend",
        "--base-vocab",
        base_vocab.to_str().unwrap(),
        "--mono-vocab",
        mono_vocab.to_str().unwrap(),
        "--mono-merges",
        mono_merges.to_str().unwrap(),
        "--corpus",
        hindi.to_str().unwrap(),
        "--output",
        ext_vocab.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{out:?}");

    let base_report = dir.path().join("base-fertility.json");
    let out = bhasha(&[
        "fertility",
        "--corpus",
        hindi.to_str().unwrap(),
        "--vocab",
        base_vocab.to_str().unwrap(),
        "--merges",
        base_merges.to_str().unwrap(),
        "--output",
        base_report.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{out:?}");
    let base: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&base_report).unwrap()).unwrap();

    let ext_report = dir.path().join("ext-fertility.json");
    let out = bhasha(&[
        "fertility",
        "--corpus",
        hindi.to_str().unwrap(),
        "--vocab",
        ext_vocab.to_str().unwrap(),
        "--merges",
        base_merges.to_str().unwrap(),
        "--baseline",
        base_report.to_str().unwrap(),
        "--output",
        ext_report.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{out:?}");
    let ext: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&ext_report).unwrap()).unwrap();

    let f_base = base["fertility"].as_f64().unwrap();
    let f_ext = ext["fertility"].as_f64().unwrap();
    assert!(
        f_ext < f_base,
        "extension must reduce fertility: {f_ext} !< {f_base}"
    );
    assert!(ext["reduction_percent"].as_f64().unwrap() > 0.0);
}

fn toy_checkpoint(path: &Path, n_layers: usize, vocab_size: usize) {
    let config = ModelConfig {
        n_layers,
        n_heads: 2,
        n_kv_heads: 1,
        d_model: 16,
        d_ff: 32,
        vocab_size,
        rope_theta: 10_000.0,
        context_length: 64,
        norm_eps: 1e-5,
    };
    let ckpt: CheckpointF32 = random_checkpoint(&config, 13).unwrap();
    let mut buf = Vec::new();
    ckpt.write(&mut buf).unwrap();
    fs::write(path, buf).unwrap();
}

#[test]
fn expand_then_verify_identity_passes() {
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path().join("base.ckpt");
    toy_checkpoint(&base, 4, 32);
    let expanded = dir.path().join("expanded.ckpt");
    let mask = dir.path().join("freeze.tsv");

    let out = bhasha(&[
        "--set",
        "expand.period=2",
        "expand",
        "--checkpoint",
        base.to_str().unwrap(),
        "--output",
        expanded.to_str().unwrap(),
        "--freeze-mask",
        mask.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{out:?}");
    assert!(stdout(&out).contains("4 -> 6 layers"));
    let mask_text = fs::read_to_string(&mask).unwrap();
    assert!(mask_text.contains("layers.2.attn.q\ttrue"));
    assert!(mask_text.contains("layers.0.attn.q\tfalse"));

    let out = bhasha(&[
        "verify-identity",
        "--base",
        base.to_str().unwrap(),
        "--expanded",
        expanded.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{out:?}");
    assert!(stdout(&out).contains("status=pass"));

    // a perturbed expansion must fail with nonzero exit
    let mut ckpt = CheckpointF32::read(&fs::read(&expanded).unwrap()[..]).unwrap();
    ckpt.get_mut("layers.2.mlp.down").unwrap().data[0] += 0.5;
    let mut buf = Vec::new();
    ckpt.write(&mut buf).unwrap();
    let tampered = dir.path().join("tampered.ckpt");
    fs::write(&tampered, buf).unwrap();
    let out = bhasha(&[
        "verify-identity",
        "--base",
        base.to_str().unwrap(),
        "--expanded",
        tampered.to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(stdout(&out).contains("status=fail"));
}

#[test]
fn mix_and_pack_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.tokens");
    let b = dir.path().join("b.tokens");
    fs::write(&a, "[1,2,3]\n[4,5]\n").unwrap();
    fs::write(&b, "[10,11]\n[12,13,14]\n").unwrap();
    let mixed = dir.path().join("mixed.tokens");
    let out = bhasha(&[
        "mix",
        "--input-a",
        a.to_str().unwrap(),
        "--input-b",
        b.to_str().unwrap(),
        "--output",
        mixed.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{out:?}");
    let mixed_text = fs::read_to_string(&mixed).unwrap();
    assert_eq!(mixed_text.lines().count(), 4);

    let shard = dir.path().join("shard.bin");
    let index = dir.path().join("shard.idx");
    let out = bhasha(&[
        "--set",
        "pack.context_length=8",
        "--set",
        "pack.eot_id=99",
        "pack",
        "--input",
        mixed.to_str().unwrap(),
        "--output",
        shard.to_str().unwrap(),
        "--index",
        index.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{out:?}");

    let packed = bhasha::data::read_packed(
        &fs::read(&shard).unwrap()[..],
        &fs::read(&index).unwrap()[..],
    )
    .unwrap();
    for seq in &packed {
        assert_eq!(seq.tokens.len(), 8);
    }
    let docs = bhasha::data::unpack_sequences(&packed);
    let mut original: Vec<Vec<u32>> = Vec::new();
    for line in mixed_text.lines() {
        original.push(serde_json::from_str(line).unwrap());
    }
    assert_eq!(docs, original);
}

#[test]
fn sft_prepare_applies_mask_and_oversampling() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.jsonl");
    write_corpus(&corpus, &[("c", "some training text for the tokenizer")]);
    let vocab = dir.path().join("sft.vocab");
    let merges = dir.path().join("sft.merges");
    let out = bhasha(&[
        "--set",
        "tokenizer.target_vocab=280",
        "tokenizer-train",
        "--input",
        corpus.to_str().unwrap(),
        "--vocab",
        vocab.to_str().unwrap(),
        "--merges",
        merges.to_str().unwrap(),
    ]);
    assert!(out.status.success());

    let sft = dir.path().join("sft.jsonl");
    let mut body = String::new();
    for i in 0..4 {
        body.push_str(
            &serde_json::json!({
                "turns": [
                    {"role": "user", "text": format!("question {i}")},
                    {"role": "assistant", "text": format!("answer {i}")}
                ],
                "safety": i == 0
            })
            .to_string(),
        );
        body.push('\n');
    }
    fs::write(&sft, body).unwrap();

    let output = dir.path().join("rendered.jsonl");
    let out = bhasha(&[
        "sft-prepare",
        "--input",
        sft.to_str().unwrap(),
        "--vocab",
        vocab.to_str().unwrap(),
        "--merges",
        merges.to_str().unwrap(),
        "--output",
        output.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{out:?}");
    let lines: Vec<serde_json::Value> = fs::read_to_string(&output)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    // 3 non-safety x3 + 1 safety
    assert_eq!(lines.len(), 10);
    for line in &lines {
        let tokens = line["tokens"].as_array().unwrap();
        let mask = line["mask"].as_array().unwrap();
        assert_eq!(tokens.len(), mask.len());
        assert!(mask.iter().any(|m| m == 1), "every example has a response");
    }
    let safety_count = lines.iter().filter(|l| l["safety"] == true).count();
    assert_eq!(safety_count, 1);
}

#[test]
fn eval_mc_scores_and_reports_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.jsonl");
    write_corpus(&corpus, &[("c", "alpha beta gamma delta words here")]);
    let vocab = dir.path().join("mc.vocab");
    let merges = dir.path().join("mc.merges");
    assert!(bhasha(&[
        "--set",
        "tokenizer.target_vocab=280",
        "tokenizer-train",
        "--input",
        corpus.to_str().unwrap(),
        "--vocab",
        vocab.to_str().unwrap(),
        "--merges",
        merges.to_str().unwrap(),
    ])
    .status
    .success());

    let ckpt = dir.path().join("toy.ckpt");
    toy_checkpoint(&ckpt, 2, 300);

    let items = dir.path().join("items.jsonl");
    fs::write(
        &items,
        concat!(
            r#"{"context":"alpha ","candidates":["beta","gamma"],"gold":0}"#,
            "\n",
            r#"{"context":"beta ","candidates":["alpha","delta"],"gold":1}"#,
            "\n",
        ),
    )
    .unwrap();
    let scored = dir.path().join("scored.jsonl");
    let out = bhasha(&[
        "eval-mc",
        "--items",
        items.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--vocab",
        vocab.to_str().unwrap(),
        "--merges",
        merges.to_str().unwrap(),
        "--output",
        scored.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{out:?}");
    assert!(stdout(&out).contains("accuracy="));
    assert_eq!(fs::read_to_string(&scored).unwrap().lines().count(), 2);
}

#[test]
fn judge_render_and_parse_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let out = bhasha(&[
        "judge-render",
        "--question",
        "किताब क्या है?",
        "--answer1",
        "एक उत्तर",
        "--answer2",
        "दूसरा उत्तर",
    ]);
    assert!(out.status.success());
    let prompt = stdout(&out);
    assert!(prompt.contains("<score1>"));
    assert!(prompt.contains("किताब क्या है?"));

    let transcripts = dir.path().join("judged.jsonl");
    let mut body = String::new();
    for (s1, s2) in [(7, 5), (4, 4), (2, 9), (10, 0)] {
        body.push_str(
            &serde_json::json!({
                "question": "q", "answer1": "a", "answer2": "b",
                "raw_judgment": format!("reasoning <score1>{s1}</score1> <score2>{s2}</score2>")
            })
            .to_string(),
        );
        body.push('\n');
    }
    fs::write(&transcripts, body).unwrap();
    let verdicts = dir.path().join("verdicts.jsonl");
    let summary = dir.path().join("summary.csv");
    let out = bhasha(&[
        "judge-parse",
        "--input",
        transcripts.to_str().unwrap(),
        "--output",
        verdicts.to_str().unwrap(),
        "--summary",
        summary.to_str().unwrap(),
        "--model-a",
        "ours",
        "--model-b",
        "baseline",
    ]);
    assert!(out.status.success(), "{out:?}");
    let csv = fs::read_to_string(&summary).unwrap();
    assert_eq!(
        csv,
        "model_a,model_b,wins,ties,losses,mean_a,mean_b\nours,baseline,2,1,1,5.75,4.5\n"
    );
}

#[test]
fn embed_init_extends_checkpoint_rows() {
    let dir = tempfile::tempdir().unwrap();
    // base vocabulary: byte alphabet only (256 tokens), two extension tokens
    let corpus = dir.path().join("corpus.jsonl");
    write_corpus(&corpus, &[("c", "नमस्ते नमस्ते दुनिया दुनिया")]);
    let mono_vocab = dir.path().join("mono.vocab");
    let mono_merges = dir.path().join("mono.merges");
    assert!(bhasha(&[
        "--set",
        "tokenizer.target_vocab=290",
        "tokenizer-train",
        "--input",
        corpus.to_str().unwrap(),
        "--vocab",
        mono_vocab.to_str().unwrap(),
        "--merges",
        mono_merges.to_str().unwrap(),
    ])
    .status
    .success());

    // base tokenizer: bytes only
    let empty = dir.path().join("empty.jsonl");
    write_corpus(&empty, &[("e", "x")]);
    let base_vocab = dir.path().join("base.vocab");
    let base_merges = dir.path().join("base.merges");
    assert!(bhasha(&[
        "--set",
        "tokenizer.target_vocab=256",
        "tokenizer-train",
        "--input",
        empty.to_str().unwrap(),
        "--vocab",
        base_vocab.to_str().unwrap(),
        "--merges",
        base_merges.to_str().unwrap(),
    ])
    .status
    .success());

    let ext_vocab = dir.path().join("ext.vocab");
    let out = bhasha(&[
        "--set",
        "tokenizer.extension_count=2",
        "tokenizer-extend",
        "--base-vocab",
        base_vocab.to_str().unwrap(),
        "--mono-vocab",
        mono_vocab.to_str().unwrap(),
        "--mono-merges",
        mono_merges.to_str().unwrap(),
        "--corpus",
        corpus.to_str().unwrap(),
        "--output",
        ext_vocab.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{out:?}");

    let ckpt_path = dir.path().join("base.ckpt");
    toy_checkpoint(&ckpt_path, 2, 256);

    // external vectors for a few single-byte tokens; extension tokens have
    // no entries, so they fall back to mean + noise
    let external = dir.path().join("external.tsv");
    fs::write(&external, "4 3\na\t1.0 0.0 0.0 0.0\nb\t0.0 1.0 0.0 0.0\nc\t0.0 0.0 1.0 0.0\n")
        .unwrap();

    let out_ckpt = dir.path().join("extended.ckpt");
    let audit = dir.path().join("audit.jsonl");
    let out = bhasha(&[
        "embed-init",
        "--checkpoint",
        ckpt_path.to_str().unwrap(),
        "--vocab",
        ext_vocab.to_str().unwrap(),
        "--external",
        external.to_str().unwrap(),
        "--output",
        out_ckpt.to_str().unwrap(),
        "--audit",
        audit.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{out:?}");
    let extended = CheckpointF32::read(&fs::read(&out_ckpt).unwrap()[..]).unwrap();
    assert_eq!(extended.config.vocab_size, 258);
    assert_eq!(extended.get("embed").unwrap().shape[0], 258);
    assert_eq!(extended.get("unembed").unwrap().shape[0], 258);
    let audit_text = fs::read_to_string(&audit).unwrap();
    assert_eq!(audit_text.lines().count(), 2);
    assert!(audit_text.contains("mean_plus_noise"));
}
