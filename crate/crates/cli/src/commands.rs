use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use omni_core::audio::{self, ClipSummary};
use omni_core::bench::{speed_bench, BenchOptions, MonotonicClock};
use omni_core::corpus::{self, CodeRepoGraph, LshConfig};
use omni_core::lm::{self, LmInput};
use omni_core::model::{open_checkpoint, OmniModel};
use omni_core::sequencer::{self, assemble, chat_template, pack_training, read_manifest, Role, Segment, TokenBudget};
use omni_core::tokenizer::{self, default_specials, TokenizerModel};
use omni_core::train::{builtin_stages, find_stage};
use omni_core::vision::{self, plan_slices, Image, SlicePlan, VisionConfig};
use omni_core::websearch::{
    run_pipeline, HttpSearchClient, LlmBackend, MockSearchClient, RuleBackend, ScriptedBackend, SearchClient,
    ToyLmBackend,
};
use serde::Serialize;

use crate::output::{emit, write_json, write_tensor};
use crate::*;

pub fn run(cli: &Cli) -> Result<()> {
    let json = cli.json;
    match &cli.command {
        Command::Tokenize(TokenizeCmd::Train { corpus, vocab, out }) => tokenize_train(json, corpus, *vocab, out),
        Command::Tokenize(TokenizeCmd::Rate(a)) | Command::Rate(a) => rate(json, a),
        Command::Dedup(c) => dedup(json, c),
        Command::Code(CodeCmd::Toposort { graph }) => toposort(json, graph),
        Command::Vision(c) => vision_cmd(json, c),
        Command::Audio(AudioCmd::Tokens { wav, ckpt, dump }) => audio_tokens(json, wav, ckpt.as_deref(), dump.as_deref()),
        Command::Pack(a) => pack(json, a),
        Command::Infer(a) => infer(json, a),
        Command::InferOmni(a) => infer_omni(json, a),
        Command::Init(a) => init(json, a),
        Command::Stages(c) => stages(json, c),
        Command::Bench(a) => bench(json, a),
        Command::SearchChat(a) => search_chat(json, a),
    }
}

/// Regular files of a directory, sorted by name.
fn dir_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading directory {}", dir.display()))? {
        let p = entry?.path();
        if p.is_file() {
            files.push(p);
        }
    }
    files.sort();
    if files.is_empty() {
        bail!("{} contains no files", dir.display());
    }
    Ok(files)
}

fn load_tokenizer(spec: &str) -> Result<TokenizerModel> {
    if spec == "byte-level" {
        return Ok(TokenizerModel::byte_level(default_specials()));
    }
    TokenizerModel::load(spec).with_context(|| format!("loading tokenizer {spec}"))
}

fn open(spec: &str) -> Result<OmniModel> {
    open_checkpoint(spec).with_context(|| format!("opening checkpoint {spec}"))
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    out: &'a Path,
    documents: usize,
    vocab_size: usize,
    merges: usize,
}

fn tokenize_train(json: bool, corpus: &Path, vocab: usize, out: &Path) -> Result<()> {
    let docs: Vec<Vec<u8>> = dir_files(corpus)?.iter().map(fs::read).collect::<std::io::Result<_>>()?;
    let model = tokenizer::train_bpe(&docs, vocab, default_specials())?;
    model.save(out)?;
    let s = TrainSummary {
        out,
        documents: docs.len(),
        vocab_size: model.vocab_size(),
        merges: model.merges().len(),
    };
    emit(json, "tokenize train", &s, || {
        format!(
            "trained {} merges on {} documents; vocabulary {} written to {}\n",
            s.merges,
            s.documents,
            s.vocab_size,
            out.display()
        )
    })
}

fn rate(json: bool, a: &RateArgs) -> Result<()> {
    let model = load_tokenizer(&a.model)?;
    let mut corpora = Vec::new();
    for p in dir_files(&a.corpora)? {
        let name = p.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
        corpora.push((name, fs::read(&p)?));
    }
    let report = tokenizer::compression_rate(&model, &corpora);
    emit(json, "rate", &report, || report.render_table())
}

fn read_corpus(path: &Path) -> Result<Vec<corpus::Document>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(corpus::read_jsonl(&text)?)
}

fn dedup(json: bool, c: &DedupCmd) -> Result<()> {
    match c {
        DedupCmd::Exact(io) => {
            let docs = read_corpus(&io.input)?;
            let (kept, report) = corpus::exact_dedup(&docs);
            fs::write(&io.out, corpus::write_jsonl(&kept))?;
            if let Some(p) = &io.report {
                write_json(p, "dedup exact", &report)?;
            }
            emit(json, "dedup exact", &report, || {
                format!("kept {} of {} documents ({} duplicate groups)\n", kept.len(), docs.len(), report.groups.len())
            })
        }
        DedupCmd::Fuzzy {
            io,
            k,
            bands,
            rows,
            jaccard,
            shingle,
            seed,
        } => {
            let cfg = LshConfig {
                k: *k,
                bands: *bands,
                rows: *rows,
                jaccard_threshold: *jaccard,
                shingle_width: *shingle,
                seed: *seed,
            };
            let docs = read_corpus(&io.input)?;
            let (kept, report) = corpus::lsh_dedup(&docs, &cfg)?;
            fs::write(&io.out, corpus::write_jsonl(&kept))?;
            if let Some(p) = &io.report {
                write_json(p, "dedup fuzzy", &report)?;
            }
            emit(json, "dedup fuzzy", &report, || {
                let merged = report.candidates.iter().filter(|c| c.merged).count();
                format!(
                    "kept {} of {} documents ({} candidate pairs, {merged} merged)\n",
                    report.kept,
                    report.input,
                    report.candidates.len()
                )
            })
        }
    }
}

fn toposort(json: bool, graph: &Path) -> Result<()> {
    let g: CodeRepoGraph = serde_json::from_str(&fs::read_to_string(graph)?)
        .with_context(|| format!("parsing repository graph {}", graph.display()))?;
    let order = corpus::topo_sort_repo(&g)?;
    emit(json, "code toposort", &order, || {
        let mut s = String::new();
        for f in &order.order {
            let _ = writeln!(s, "{f}");
        }
        for c in &order.cycles {
            let _ = writeln!(s, "cycle: {}", c.join(", "));
        }
        s
    })
}

#[derive(Serialize)]
struct PlanSummary {
    plan: SlicePlan,
    views: usize,
    tokens: usize,
}

fn render_plan(p: &SlicePlan) -> String {
    let mut s = format!(
        "image {}x{}: {} rows x {} cols, {} slices{}\n",
        p.image_width,
        p.image_height,
        p.rows,
        p.cols,
        p.slices.len(),
        if p.include_global { " + global view" } else { "" }
    );
    for (i, r) in p.slices.iter().enumerate() {
        let _ = writeln!(s, "  slice {i}: x={} y={} {}x{}", r.x, r.y, r.width, r.height);
    }
    let _ = writeln!(s, "views {}, tokens {}", p.num_views(), p.token_count());
    s
}

fn vision_cmd(json: bool, c: &VisionCmd) -> Result<()> {
    match c {
        VisionCmd::Plan { image, size } => {
            let (w, h) = match (image, size) {
                (_, Some(s)) => *s,
                (Some(p), None) => Image::dimensions(p)?,
                (None, None) => bail!("pass --image or --size"),
            };
            let cfg = VisionConfig::default();
            let plan = plan_slices(w, h, cfg.max_slices, cfg.image_size)?;
            let s = PlanSummary {
                views: plan.num_views(),
                tokens: plan.token_count(),
                plan,
            };
            emit(json, "vision plan", &s, || render_plan(&s.plan))
        }
        VisionCmd::Encode { image, ckpt, out } => {
            let model = open(ckpt)?;
            let img = Image::open(image)?;
            let tokens = vision::encode_image(&model.vision_model(), &img)?;
            let m = tokens.to_mat();
            write_tensor(out, "vision_tokens", &m)?;
            let s = PlanSummary {
                views: tokens.plan.num_views(),
                tokens: m.rows(),
                plan: tokens.plan.clone(),
            };
            emit(json, "vision encode", &s, || {
                format!("{}wrote {}x{} tensor to {}\n", render_plan(&s.plan), m.rows(), m.cols(), out.display())
            })
        }
    }
}

#[derive(Serialize)]
struct AudioSummary {
    sample_rate: u32,
    duration_s: f64,
    clips: Vec<ClipSummary>,
    tokens: usize,
    embedding_width: Option<usize>,
}

fn audio_tokens(json: bool, wav: &Path, ckpt: Option<&str>, dump: Option<&Path>) -> Result<()> {
    let (samples, rate) = audio::load_wav(wav)?;
    let duration_s = samples.len() as f64 / rate as f64;
    let summary = match ckpt {
        Some(spec) => {
            let model = open(spec)?;
            let enc = audio::encode_audio(&model.audio_model(), &samples, rate)?;
            if let Some(p) = dump {
                write_tensor(p, "audio_tokens", &enc.embeddings)?;
            }
            AudioSummary {
                sample_rate: rate,
                duration_s,
                tokens: enc.embeddings.rows(),
                embedding_width: Some(enc.embeddings.cols()),
                clips: enc.clips,
            }
        }
        None => {
            let mut start = 0.0;
            let clips: Vec<ClipSummary> = audio::segment_clips(&samples, rate)?
                .iter()
                .map(|c| {
                    let s = ClipSummary {
                        start_s: start,
                        duration_s: c.duration_s(),
                        frames: c.num_frames(),
                        tokens: audio::clip_tokens(c.samples.len()),
                    };
                    start += c.duration_s();
                    s
                })
                .collect();
            AudioSummary {
                sample_rate: rate,
                duration_s,
                tokens: clips.iter().map(|c| c.tokens).sum(),
                clips,
                embedding_width: None,
            }
        }
    };
    emit(json, "audio tokens", &summary, || {
        let mut s = format!("{:.3} s at {} Hz\n", summary.duration_s, summary.sample_rate);
        for (i, c) in summary.clips.iter().enumerate() {
            let _ = writeln!(
                s,
                "  clip {i}: start {:.3} s, {:.3} s, {} frames, {} tokens",
                c.start_s, c.duration_s, c.frames, c.tokens
            );
        }
        let _ = writeln!(s, "tokens {}", summary.tokens);
        s
    })
}

fn manifest_dir(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Segments of a manifest sample; a sample with a role becomes a chat
/// turn, optionally followed by the assistant marker to prompt a reply.
fn sample_segments(
    s: &sequencer::ManifestSample,
    tok: &TokenizerModel,
    base: &Path,
    prompt_reply: bool,
) -> Result<Vec<Segment>> {
    let segs = s.to_segments(tok, base)?;
    let Some(role) = s.role else { return Ok(segs) };
    let mut out = chat_template(&[(role, segs)], tok)?;
    if prompt_reply {
        let id = tok
            .special_id(Role::Assistant.marker())
            .context("tokenizer has no assistant marker")?;
        out.push(Segment::Text(vec![id]));
    }
    Ok(out)
}

#[derive(Serialize)]
struct PackSummary {
    #[serde(flatten)]
    report: sequencer::PackReport,
    digest: String,
}

fn pack(json: bool, a: &PackArgs) -> Result<()> {
    let model = open(&a.ckpt)?;
    let base = manifest_dir(&a.manifest);
    let media = model.media();
    let mut seqs = Vec::new();
    for (i, s) in read_manifest(&a.manifest)?.iter().enumerate() {
        let segs = sample_segments(s, &model.tokenizer, &base, false)?;
        let seq = assemble(&segs, &model.tokenizer, &model.config.lm, &model.lm, &media)
            .with_context(|| format!("sample {}", s.doc_id))?;
        seqs.push(seq.with_doc_id(i as u32));
    }
    let batch = pack_training(&seqs, a.max_len, a.seed)?;
    let summary = PackSummary {
        digest: batch.digest(),
        report: batch.report,
    };
    if let Some(p) = &a.report {
        write_json(p, "pack", &summary)?;
    }
    emit(json, "pack", &summary, || {
        let r = &summary.report;
        let mut s = format!(
            "{} samples, {} tokens -> {} rows of at most {} ({} tokens kept)\n",
            r.samples, r.input_tokens, r.rows, r.max_len, r.packed_tokens
        );
        for (i, len) in r.row_lengths.iter().enumerate() {
            let _ = writeln!(s, "  row {i}: {len}");
        }
        for t in &r.truncations {
            let _ = writeln!(s, "  truncated sample {}: {} -> {}", t.sample, t.original, t.kept);
        }
        let _ = writeln!(s, "digest {}", summary.digest);
        s
    })
}

#[derive(Serialize)]
struct InferResult {
    prompt_tokens: usize,
    tokens: Vec<u32>,
    text: String,
}

fn infer(json: bool, a: &InferArgs) -> Result<()> {
    let model = open(&a.ckpt)?;
    let tok = &model.tokenizer;
    let ids = tok.encode(&a.prompt);
    let eos = tok.special_id(tokenizer::EOS);
    let tokens = lm::generate(&model.config.lm, &model.lm, LmInput::Ids(&ids), a.max_new, eos)?;
    let r = InferResult {
        prompt_tokens: ids.len(),
        text: tok.render(&tokens),
        tokens,
    };
    emit(json, "infer", &r, || format!("{}\n", r.text))
}

#[derive(Serialize)]
struct OmniResult {
    doc_id: String,
    budget: TokenBudget,
    prompt_positions: usize,
    tokens: Vec<u32>,
    text: String,
}

fn infer_omni(json: bool, a: &InferOmniArgs) -> Result<()> {
    let model = open(&a.ckpt)?;
    let tok = &model.tokenizer;
    let base = manifest_dir(&a.manifest);
    let media = model.media();
    let eos = tok.special_id(tokenizer::EOS);
    let mut results = Vec::new();
    for s in read_manifest(&a.manifest)? {
        let segs = sample_segments(&s, tok, &base, true)?;
        let seq = assemble(&segs, tok, &model.config.lm, &model.lm, &media)
            .with_context(|| format!("sample {}", s.doc_id))?;
        let budget = sequencer::token_budget_with(&segs, &model.config.vision, &model.config.audio)?;
        let tokens = lm::generate(&model.config.lm, &model.lm, LmInput::Embeddings(&seq.embeddings), a.max_new, eos)?;
        results.push(OmniResult {
            doc_id: s.doc_id.clone(),
            budget,
            prompt_positions: seq.len(),
            text: tok.render(&tokens),
            tokens,
        });
    }
    emit(json, "infer-omni", &results, || {
        let mut s = String::new();
        for r in &results {
            let ids: Vec<String> = r.tokens.iter().map(u32::to_string).collect();
            let _ = writeln!(
                s,
                "{}: {} positions (text {}, vision {}, audio {}, markers {}) -> [{}] {:?}",
                r.doc_id,
                r.prompt_positions,
                r.budget.text,
                r.budget.vision,
                r.budget.audio,
                r.budget.markers,
                ids.join(" "),
                r.text
            );
        }
        s
    })
}

#[derive(Serialize)]
struct InitSummary<'a> {
    out: &'a Path,
    seed: u64,
    params: usize,
}

fn init(json: bool, a: &InitArgs) -> Result<()> {
    let model = match a.size {
        ModelSize::Toy => OmniModel::toy(a.seed),
        ModelSize::Tiny => OmniModel::tiny(a.seed),
    };
    model.save(&a.out)?;
    let s = InitSummary {
        out: &a.out,
        seed: a.seed,
        params: model.num_params(),
    };
    emit(json, "init", &s, || {
        format!("wrote {} parameters to {}\n", s.params, s.out.display())
    })
}

#[derive(Serialize)]
struct LrPoint {
    step: usize,
    lr: f64,
}

fn stages(json: bool, c: &StagesCmd) -> Result<()> {
    match c {
        StagesCmd::List => {
            let stages = builtin_stages();
            emit(json, "stages list", &stages, || {
                let mut s = format!(
                    "{:<18} {:<64} {:<24} {:>7}\n",
                    "stage", "trainable", "lr init -> peak -> final", "context"
                );
                for p in &stages {
                    let tags: Vec<&str> = p.trainable.iter().map(|t| t.as_str()).collect();
                    let sc = &p.schedule;
                    let lr = format!("{:e} -> {:e} -> {:e}", sc.lr_init, sc.lr_peak, sc.lr_final);
                    let _ = writeln!(s, "{:<18} {:<64} {:<24} {:>7}", p.name, tags.join(","), lr, p.context_len);
                }
                s
            })
        }
        StagesCmd::Lr { stage, total, plot } => {
            let plan = find_stage(stage)?;
            let points = (0..=*total)
                .map(|step| Ok(LrPoint { step, lr: plan.schedule.lr_at(step, *total)? }))
                .collect::<Result<Vec<_>>>()?;
            if let Some(p) = plot {
                let mut csv = String::from("step,lr\n");
                for pt in &points {
                    let _ = writeln!(csv, "{},{:e}", pt.step, pt.lr);
                }
                fs::write(p, csv).with_context(|| format!("writing {}", p.display()))?;
            }
            emit(json, "stages lr", &points, || {
                let mut s = format!("{} over {} steps\n", plan.name, total);
                let marks = [0, total / 4, total / 2, 3 * total / 4, *total];
                for m in marks {
                    let _ = writeln!(s, "  step {:>8}: {:e}", m, points[m].lr);
                }
                s
            })
        }
    }
}

fn bench(json: bool, a: &BenchArgs) -> Result<()> {
    let model = open(&a.ckpt)?;
    let opts = BenchOptions {
        input_tokens: a.input_tokens,
        output_tokens: a.output_tokens,
        batch: a.batch,
        warmup: a.warmup,
        iters: a.iters,
        seed: a.seed,
    };
    let report = speed_bench(&model.config.lm, &model.lm, &opts, &MonotonicClock::new())?;
    emit(json, "bench", &report, || report.render())
}

fn search_chat(json: bool, a: &SearchChatArgs) -> Result<()> {
    let model;
    let mut backend: Box<dyn LlmBackend + '_> = match a.backend {
        BackendKind::Scripted => {
            let path = a.script.as_ref().context("--script is required for the scripted backend")?;
            let replies: Vec<String> = serde_json::from_str(&fs::read_to_string(path)?)
                .with_context(|| format!("{} must hold a JSON array of strings", path.display()))?;
            Box::new(ScriptedBackend::new(replies))
        }
        BackendKind::Rule => Box::new(RuleBackend),
        BackendKind::Toy => {
            model = open(&a.ckpt)?;
            Box::new(ToyLmBackend {
                model: &model,
                max_new: a.max_new,
            })
        }
    };
    let client: Box<dyn SearchClient> = match a.client {
        ClientKind::Mock => Box::new(MockSearchClient::new()),
        ClientKind::Http => {
            let endpoint = a.endpoint.as_deref().context("--endpoint is required for the http client")?;
            Box::new(HttpSearchClient::new(endpoint)?)
        }
    };
    let (answer, transcript) = run_pipeline(&a.query, backend.as_mut(), client.as_ref(), a.k)?;
    if let Some(p) = &a.transcript {
        fs::write(p, transcript.to_json()).with_context(|| format!("writing {}", p.display()))?;
    }
    if json {
        print!("{}", transcript.to_json());
    } else {
        let kinds: Vec<String> = transcript.kinds().iter().map(|k| format!("{k:?}")).collect();
        println!("{answer}");
        eprintln!("states: {}{}", kinds.join(" "), if transcript.degraded { " (degraded)" } else { "" });
    }
    Ok(())
}
