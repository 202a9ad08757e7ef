//! `loram` — prune, align, quantize, fine-tune, recover, merge, evaluate.
//!
//! Every command reads/writes LMCK1 containers, prints a single
//! machine-parseable `key=value` summary line on success, and exits with a
//! class-specific code on failure: 2 bad config, 3 missing artifact,
//! 4 shape/consistency failure, 5 numerical failure, 1 anything else.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use loram_core::config::{RunConfig, SEED_ENV};
use loram_core::container::{
    adapters_container, adapters_from_container, masks_container, masks_from_container,
    model_container, model_from_container, quantized_container, quantized_from_container,
    Container,
};
use loram_core::corpus;
use loram_core::error::{Error, ErrorClass, Result};
use loram_core::eval::{
    ablation_report, accounting, accounting_csv, head_norms, mlp_layer_norms, norms_csv,
    perplexity_spec, series_csv,
};
use loram_core::loram::{
    align_pretrain, draw_calibration_windows, merge, recover, run_pipeline, train_lora, BaseModel,
    StageFlags,
};
use loram_core::model::{
    init_adapters, init_model, num_params, ForwardSpec, ModelConfig, TransformerWeights,
};
use loram_core::prune::{
    apply_mask_set, compact, gen_mask_set_semi, gen_mask_set_unstructured,
    gen_plan_structured_gradient, gen_plan_structured_random, MaskSet, PruneStrategy,
    StructuredPlan,
};
use loram_core::quant::{quantize_model, Codebook};

#[derive(Parser)]
#[command(
    name = "loram",
    version,
    about = "Train low-rank adapters on a pruned model, then recover and merge them into the original"
)]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (overrides LORAM_SEED and the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate or import training corpora.
    Corpus {
        #[command(subcommand)]
        cmd: CorpusCmd,
    },
    /// Initialize a fresh base model container.
    Init(InitArgs),
    /// Prune a model: structured plans compact it, semi/unstructured masks zero it.
    Prune(PruneArgs),
    /// Continue pretraining a pruned model on the general corpus.
    Align(AlignArgs),
    /// Quantize a model to packed 4-bit blocks.
    Quantize(QuantizeArgs),
    /// Train LoRA adapters against a frozen (plain or quantized) base.
    Finetune(FinetuneArgs),
    /// Scatter adapters trained on a compact model back to full geometry.
    Recover(RecoverArgs),
    /// Merge adapters into a model's weights.
    Merge(MergeArgs),
    /// Perplexity of a model (optionally with adapters) on a corpus.
    Eval(EvalArgs),
    /// Export per-head / per-layer adapter delta norms as CSV.
    Norms(NormsArgs),
    /// Parameter-reduction and HBM accounting.
    Account(AccountArgs),
    /// Four-arm recovery/alignment ablation, reported as CSV.
    Ablate(AblateArgs),
    /// Run the configured stages end to end.
    Run(RunArgs),
}

#[derive(Subcommand)]
enum CorpusCmd {
    /// Deterministic synthetic general + task corpora.
    MakeSynthetic {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 65536)]
        general_bytes: usize,
        #[arg(long, default_value_t = 4096)]
        task_lines: usize,
    },
    /// Copy an arbitrary file in byte-exactly.
    Import {
        #[arg(long)]
        file: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct InitArgs {
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PruneArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// rand | stru | semi | unst (defaults to the config).
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    ratio: Option<f64>,
    /// Mask container output; required for semi/unst.
    #[arg(long)]
    masks_out: Option<PathBuf>,
    /// General corpus for gradient calibration; required for stru.
    #[arg(long)]
    general: Option<PathBuf>,
}

#[derive(Args)]
struct AlignArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Prune masks to respect (semi/unst models).
    #[arg(long)]
    masks: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Loss trace CSV output.
    #[arg(long)]
    trace_out: Option<PathBuf>,
}

#[derive(Args)]
struct QuantizeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    block_size: Option<usize>,
    /// nf4 | int4_sym (defaults to the config).
    #[arg(long)]
    codebook: Option<String>,
}

#[derive(Args)]
struct FinetuneArgs {
    /// Frozen base: a model or quantized-model container.
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Prune masks to pin adapter deltas against (semi/unst bases).
    #[arg(long)]
    masks: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    trace_out: Option<PathBuf>,
}

#[derive(Args)]
struct RecoverArgs {
    #[arg(long)]
    adapters: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MergeArgs {
    /// The model to merge into (usually the original full model).
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    adapters: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Model or quantized-model container.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    adapters: Option<PathBuf>,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    seq_len: Option<usize>,
}

#[derive(Args)]
struct NormsArgs {
    #[arg(long)]
    adapters: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AccountArgs {
    /// Original model container (or pass --orig-params).
    #[arg(long)]
    model: Option<PathBuf>,
    /// Pruned model container, plain or quantized (or pass --pruned-params).
    #[arg(long)]
    pruned: Option<PathBuf>,
    #[arg(long)]
    orig_params: Option<u64>,
    #[arg(long)]
    pruned_params: Option<u64>,
    /// 16 or 4; inferred as 4 from a quantized container.
    #[arg(long)]
    bits: Option<u32>,
    #[arg(long)]
    csv_out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    general: PathBuf,
    #[arg(long)]
    task: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Existing base model; a fresh one is initialized when omitted.
    #[arg(long)]
    base: Option<PathBuf>,
    #[arg(long)]
    general: PathBuf,
    #[arg(long)]
    task: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Config => 2,
                ErrorClass::MissingArtifact => 3,
                ErrorClass::Consistency => 4,
                ErrorClass::Numerical => 5,
                ErrorClass::Other => 1,
            })
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let rc = load_config(cli.config.as_deref(), cli.seed)?;
    match cli.cmd {
        Cmd::Corpus { cmd } => cmd_corpus(&rc, cmd),
        Cmd::Init(a) => cmd_init(&rc, a),
        Cmd::Prune(a) => cmd_prune(&rc, a),
        Cmd::Align(a) => cmd_align(&rc, a),
        Cmd::Quantize(a) => cmd_quantize(&rc, a),
        Cmd::Finetune(a) => cmd_finetune(&rc, a),
        Cmd::Recover(a) => cmd_recover(&rc, a),
        Cmd::Merge(a) => cmd_merge(&rc, a),
        Cmd::Eval(a) => cmd_eval(&rc, a),
        Cmd::Norms(a) => cmd_norms(&rc, a),
        Cmd::Account(a) => cmd_account(&rc, a),
        Cmd::Ablate(a) => cmd_ablate(&rc, a),
        Cmd::Run(a) => cmd_run(&rc, a),
    }
}

fn load_config(path: Option<&Path>, flag_seed: Option<u64>) -> Result<RunConfig> {
    let base = match path {
        Some(p) => RunConfig::from_toml(&std::fs::read_to_string(p)?)?,
        None => RunConfig::default(),
    };
    let env_seed = std::env::var(SEED_ENV).ok();
    let rc = base.resolve_seed(env_seed.as_deref(), flag_seed)?;
    rc.validate()?;
    Ok(rc)
}

/// Stamp provenance into a container before writing it.
fn finish(mut c: Container, rc: &RunConfig, path: &Path) -> Result<()> {
    c.meta.run_config = Some(rc.to_toml());
    c.meta.seeds.insert("master".to_string(), rc.seed);
    c.write_to(path)
}

/// Load a base for adapter training or evaluation: either a plain model or
/// a quantized one (materialized f32 for geometry-dependent setup).
enum LoadedBase {
    Plain(ModelConfig, TransformerWeights<f32>),
    Quantized(ModelConfig, loram_core::quant::QuantizedModel),
}

fn load_base(path: &Path) -> Result<LoadedBase> {
    let c = Container::read_from(path)?;
    match c.meta.kind.as_str() {
        "model" => {
            let (cfg, w) = model_from_container(&c)?;
            Ok(LoadedBase::Plain(cfg, w))
        }
        "quantized-model" => {
            let (cfg, qm) = quantized_from_container(&c)?;
            Ok(LoadedBase::Quantized(cfg, qm))
        }
        other => Err(Error::Consistency(format!(
            "expected a model or quantized-model container, found '{other}'"
        ))),
    }
}

// ─── commands ────────────────────────────────────────────────────────────

fn cmd_corpus(rc: &RunConfig, cmd: CorpusCmd) -> Result<()> {
    match cmd {
        CorpusCmd::MakeSynthetic { out_dir, general_bytes, task_lines } => {
            std::fs::create_dir_all(&out_dir)?;
            let general = corpus::synth_general(rc.seed, general_bytes);
            let task = corpus::synth_task(rc.seed, task_lines);
            let gpath = out_dir.join("general.txt");
            let tpath = out_dir.join("task.txt");
            std::fs::write(&gpath, &general)?;
            std::fs::write(&tpath, &task)?;
            println!(
                "command=corpus kind=make-synthetic seed={} general={} general_bytes={} task={} task_bytes={}",
                rc.seed,
                gpath.display(),
                general.len(),
                tpath.display(),
                task.len()
            );
        }
        CorpusCmd::Import { file, out } => {
            let bytes = std::fs::read(&file)?;
            std::fs::write(&out, &bytes)?;
            println!(
                "command=corpus kind=import file={} out={} bytes={}",
                file.display(),
                out.display(),
                bytes.len()
            );
        }
    }
    Ok(())
}

fn cmd_init(rc: &RunConfig, a: InitArgs) -> Result<()> {
    let w = init_model(&rc.model)?;
    let params = num_params(&w, true);
    finish(model_container(&rc.model, &w), rc, &a.out)?;
    println!(
        "command=init out={} params={} layers={} d_model={} seed={}",
        a.out.display(),
        params,
        rc.model.n_layers,
        rc.model.d_model,
        rc.seed
    );
    Ok(())
}

fn cmd_prune(rc: &RunConfig, a: PruneArgs) -> Result<()> {
    let (cfg, w) = model_from_container(&Container::read_from(&a.model)?)?;
    let mut pcfg = rc.prune.clone();
    if let Some(s) = &a.strategy {
        pcfg.strategy = PruneStrategy::parse(s)?;
    }
    if let Some(r) = a.ratio {
        pcfg.ratio = r;
    }
    let orig = num_params(&w, true);

    let (out_weights, plan, masks): (TransformerWeights<f32>, Option<StructuredPlan>, Option<MaskSet>) =
        match pcfg.strategy {
            PruneStrategy::Rand => {
                let plan = gen_plan_structured_random(
                    &cfg,
                    pcfg.ratio,
                    pcfg.protected_first,
                    pcfg.protected_last,
                    pcfg.seed,
                )?;
                (compact(&cfg, &w, &plan)?, Some(plan), None)
            }
            PruneStrategy::Stru => {
                let general_path = a.general.as_ref().ok_or_else(|| {
                    Error::Config("--general corpus is required for the stru strategy".to_string())
                })?;
                let general = std::fs::read(general_path)?;
                let calib = draw_calibration_windows(
                    &general,
                    rc.align.seq_len.min(cfg.max_seq),
                    pcfg.calib_windows,
                    pcfg.seed,
                )?;
                let plan = gen_plan_structured_gradient(
                    &cfg,
                    &w,
                    &calib,
                    pcfg.ratio,
                    pcfg.protected_first,
                    pcfg.protected_last,
                )?;
                (compact(&cfg, &w, &plan)?, Some(plan), None)
            }
            PruneStrategy::Semi => {
                let set = gen_mask_set_semi(&w, pcfg.semi_n, pcfg.semi_m)?;
                (apply_mask_set(&w, &set)?, None, Some(set))
            }
            PruneStrategy::Unst => {
                let set = gen_mask_set_unstructured(&w, pcfg.ratio)?;
                (apply_mask_set(&w, &set)?, None, Some(set))
            }
        };

    let pruned = match (&plan, &masks) {
        (Some(p), _) => p.retained_param_count(&cfg, true),
        (_, Some(set)) => set.retained_params(true),
        _ => unreachable!("every strategy yields a plan or masks"),
    };

    if let Some(set) = &masks {
        let masks_out = a.masks_out.as_ref().ok_or_else(|| {
            Error::Config(format!(
                "--masks-out is required for the {} strategy (later stages must respect the holes)",
                pcfg.strategy.token()
            ))
        })?;
        finish(masks_container(&cfg, set), rc, masks_out)?;
    }
    let mut c = model_container(&cfg, &out_weights);
    c.meta.plan = plan;
    finish(c, rc, &a.out)?;
    println!(
        "command=prune strategy={} ratio={} orig_params={} pruned_params={} out={}",
        pcfg.strategy.token(),
        pcfg.ratio,
        orig,
        pruned,
        a.out.display()
    );
    Ok(())
}

fn cmd_align(rc: &RunConfig, a: AlignArgs) -> Result<()> {
    let c = Container::read_from(&a.model)?;
    let (cfg, mut w) = model_from_container(&c)?;
    let masks = match &a.masks {
        Some(p) => Some(masks_from_container(&Container::read_from(p)?)?),
        None => None,
    };
    let corpus_bytes = std::fs::read(&a.corpus)?;
    let mut tc = rc.align;
    if let Some(s) = a.steps {
        tc.steps = s;
    }
    if let Some(lr) = a.lr {
        tc.lr = lr;
    }
    let trace = align_pretrain(&cfg, &mut w, masks.as_ref(), &corpus_bytes, &tc)?;
    if let Some(p) = &a.trace_out {
        std::fs::write(p, series_csv("loss", &trace))?;
    }
    let mut out = model_container(&cfg, &w);
    out.meta.plan = c.meta.plan.clone(); // keep the pruning plan with the model
    finish(out, rc, &a.out)?;
    println!(
        "command=align steps={} first_loss={} final_loss={} out={}",
        tc.steps,
        trace.first().copied().unwrap_or(f64::NAN),
        trace.last().copied().unwrap_or(f64::NAN),
        a.out.display()
    );
    Ok(())
}

fn cmd_quantize(rc: &RunConfig, a: QuantizeArgs) -> Result<()> {
    let c = Container::read_from(&a.model)?;
    let (cfg, w) = model_from_container(&c)?;
    let block = a.block_size.unwrap_or(rc.quant.block_size);
    let codebook = match &a.codebook {
        Some(s) => Codebook::parse(s)?,
        None => rc.quant.codebook,
    };
    let qm = quantize_model(&w, block, codebook)?;
    let mut out = quantized_container(&cfg, &qm);
    out.meta.plan = c.meta.plan.clone();
    finish(out, rc, &a.out)?;
    println!(
        "command=quantize block_size={} codebook={} params={} bits=4 out={}",
        block,
        codebook.token(),
        num_params(&w, true),
        a.out.display()
    );
    Ok(())
}

/// A base container pins the model geometry, but adapter shape is a per-run
/// training choice: the resolved config wins for rank, alpha, and targets.
fn overlay_adapter_knobs(cfg: &mut ModelConfig, rc: &RunConfig) {
    cfg.lora_rank = rc.model.lora_rank;
    cfg.lora_alpha = rc.model.lora_alpha;
    cfg.lora_targets = rc.model.lora_targets.clone();
}

fn cmd_finetune(rc: &RunConfig, a: FinetuneArgs) -> Result<()> {
    let base_container = Container::read_from(&a.base)?;
    let plan = base_container.meta.plan.clone();
    let masks = match &a.masks {
        Some(p) => Some(masks_from_container(&Container::read_from(p)?)?),
        None => None,
    };
    let corpus_bytes = std::fs::read(&a.corpus)?;
    let mut tc = rc.sft;
    if let Some(s) = a.steps {
        tc.steps = s;
    }
    if let Some(lr) = a.lr {
        tc.lr = lr;
    }

    let (cfg, adapters, trace) = match load_base(&a.base)? {
        LoadedBase::Plain(mut cfg, w) => {
            overlay_adapter_knobs(&mut cfg, rc);
            let mut adapters = init_adapters(&cfg, &w)?;
            let trace =
                train_lora(&cfg, &BaseModel::Plain(&w), &mut adapters, masks.as_ref(), &corpus_bytes, &tc)?;
            (cfg, adapters, trace)
        }
        LoadedBase::Quantized(mut cfg, qm) => {
            overlay_adapter_knobs(&mut cfg, rc);
            let w = loram_core::quant::dequantize_model(&qm)?;
            let mut adapters = init_adapters(&cfg, &w)?;
            let trace = train_lora(
                &cfg,
                &BaseModel::Quantized(&qm),
                &mut adapters,
                masks.as_ref(),
                &corpus_bytes,
                &tc,
            )?;
            (cfg, adapters, trace)
        }
    };

    if let Some(p) = &a.trace_out {
        std::fs::write(p, series_csv("loss", &trace))?;
    }
    finish(
        adapters_container(&cfg, &adapters, tc.delta_mask_mode, plan.as_ref(), masks.as_ref()),
        rc,
        &a.out,
    )?;
    println!(
        "command=finetune steps={} targets={} first_loss={} final_loss={} out={}",
        tc.steps,
        adapters.map.len(),
        trace.first().copied().unwrap_or(f64::NAN),
        trace.last().copied().unwrap_or(f64::NAN),
        a.out.display()
    );
    Ok(())
}

fn cmd_recover(rc: &RunConfig, a: RecoverArgs) -> Result<()> {
    let art = adapters_from_container(&Container::read_from(&a.adapters)?)?;
    let recovered = recover(&art.cfg, &art.adapters, art.plan.as_ref())?;
    // The plan is consumed by recovery; masks and mode still matter to merge.
    finish(
        adapters_container(&art.cfg, &recovered, art.mode, None, art.masks.as_ref()),
        rc,
        &a.out,
    )?;
    println!(
        "command=recover targets={} structured={} out={}",
        recovered.map.len(),
        art.plan.is_some(),
        a.out.display()
    );
    Ok(())
}

fn cmd_merge(rc: &RunConfig, a: MergeArgs) -> Result<()> {
    let (cfg, base) = model_from_container(&Container::read_from(&a.base)?)?;
    let art = adapters_from_container(&Container::read_from(&a.adapters)?)?;
    if art.plan.is_some() {
        return Err(Error::Consistency(
            "adapters still carry a pruning plan; run recover before merge".to_string(),
        ));
    }
    let merged = merge(&base, &art.adapters, art.masks.as_ref(), art.mode)?;
    finish(model_container(&cfg, &merged), rc, &a.out)?;
    println!(
        "command=merge targets={} scaling={} out={}",
        art.adapters.map.len(),
        art.adapters.scaling(),
        a.out.display()
    );
    Ok(())
}

fn cmd_eval(rc: &RunConfig, a: EvalArgs) -> Result<()> {
    let corpus_bytes = std::fs::read(&a.corpus)?;
    let seq_len = a.seq_len.unwrap_or(rc.eval_seq_len);
    let art = match &a.adapters {
        Some(p) => Some(adapters_from_container(&Container::read_from(p)?)?),
        None => None,
    };
    let (cfg, w) = match load_base(&a.model)? {
        LoadedBase::Plain(cfg, w) => (cfg, w),
        LoadedBase::Quantized(cfg, qm) => {
            let w = loram_core::quant::dequantize_model(&qm)?;
            (cfg, w)
        }
    };
    let mask_map: Option<BTreeMap<String, _>> =
        art.as_ref().and_then(|x| x.masks.as_ref()).map(|set| set.cast::<f32>());
    let mut spec = ForwardSpec::inference(&cfg, &w);
    if let Some(x) = &art {
        spec = spec.with_adapters(&x.adapters);
        if let Some(m) = &mask_map {
            spec = spec.with_masks(m, x.mode);
        }
    }
    let ppl = perplexity_spec(&spec, &corpus_bytes, seq_len)?;
    println!(
        "command=eval ppl={ppl} seq_len={seq_len} bytes={} adapters={}",
        corpus_bytes.len(),
        art.is_some()
    );
    Ok(())
}

fn cmd_norms(_rc: &RunConfig, a: NormsArgs) -> Result<()> {
    let art = adapters_from_container(&Container::read_from(&a.adapters)?)?;
    let heads = head_norms(&art.cfg, &art.adapters)?;
    let mlps = mlp_layer_norms(&art.adapters)?;
    std::fs::write(&a.out, norms_csv(&heads, &mlps))?;
    println!(
        "command=norms head_rows={} mlp_rows={} out={}",
        heads.len(),
        mlps.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_account(_rc: &RunConfig, a: AccountArgs) -> Result<()> {
    let orig = match (&a.model, a.orig_params) {
        (_, Some(n)) => n,
        (Some(p), None) => match load_base(p)? {
            LoadedBase::Plain(_, w) => num_params(&w, true),
            LoadedBase::Quantized(_, qm) => num_params(&loram_core::quant::dequantize_model(&qm)?, true),
        },
        (None, None) => {
            return Err(Error::Config("pass --model or --orig-params".to_string()));
        }
    };
    let (pruned, bits_from_container) = match (&a.pruned, a.pruned_params) {
        (_, Some(n)) => (n, None),
        (Some(p), None) => match load_base(p)? {
            LoadedBase::Plain(_, w) => (num_params(&w, true), Some(16)),
            LoadedBase::Quantized(_, qm) => {
                (num_params(&loram_core::quant::dequantize_model(&qm)?, true), Some(4))
            }
        },
        (None, None) => {
            return Err(Error::Config("pass --pruned or --pruned-params".to_string()));
        }
    };
    let bits = a.bits.or(bits_from_container).unwrap_or(16);
    let row = accounting(orig, pruned, bits)?;
    if let Some(p) = &a.csv_out {
        std::fs::write(p, accounting_csv(&[row]))?;
    }
    println!(
        "command=account orig_params={} pruned_params={} bits={} effective_params={} reduction={:.2} hbm_gib={:.2}",
        row.orig_params,
        row.pruned_params,
        row.bits_per_param,
        row.effective_params,
        row.reduction_ratio,
        row.hbm_gib
    );
    Ok(())
}

fn cmd_ablate(rc: &RunConfig, a: AblateArgs) -> Result<()> {
    let (cfg, base) = model_from_container(&Container::read_from(&a.base)?)?;
    let general = std::fs::read(&a.general)?;
    let task = std::fs::read(&a.task)?;
    let mut pc = rc.pipeline_config();
    pc.model = cfg.clone();
    pc.stages.quant = false; // the recovery/alignment ablation runs unquantized

    let arm = |stages: StageFlags| -> Result<f64> {
        let mut pc = pc.clone();
        pc.stages = stages;
        let art = run_pipeline(&pc, &base, &general, &task)?;
        let ppl = match &art.merged {
            Some(m) => perplexity_spec(&ForwardSpec::inference(&cfg, m), &task, rc.eval_seq_len)?,
            None => perplexity_spec(
                &ForwardSpec::inference(&cfg, &art.training_base).with_adapters(&art.adapters),
                &task,
                rc.eval_seq_len,
            )?,
        };
        Ok(ppl)
    };

    let runs = vec![
        ("loram".to_string(), vec![arm(StageFlags { prune: true, align: true, quant: false, recover: true })?]),
        ("wo_recovery".to_string(), vec![arm(StageFlags { prune: true, align: true, quant: false, recover: false })?]),
        ("wo_alignment".to_string(), vec![arm(StageFlags { prune: true, align: false, quant: false, recover: true })?]),
        ("plain_lora".to_string(), vec![arm(StageFlags { prune: false, align: false, quant: false, recover: false })?]),
    ];
    std::fs::write(&a.out, ablation_report(&runs)?)?;
    println!(
        "command=ablate ppl_loram={} ppl_wo_recovery={} ppl_wo_alignment={} ppl_plain_lora={} out={}",
        runs[0].1[0],
        runs[1].1[0],
        runs[2].1[0],
        runs[3].1[0],
        a.out.display()
    );
    Ok(())
}

fn cmd_run(rc: &RunConfig, a: RunArgs) -> Result<()> {
    std::fs::create_dir_all(&a.out_dir)?;
    let (mut cfg, base) = match &a.base {
        Some(p) => model_from_container(&Container::read_from(p)?)?,
        None => {
            let w = init_model(&rc.model)?;
            finish(model_container(&rc.model, &w), rc, &a.out_dir.join("base.lmck"))?;
            (rc.model.clone(), w)
        }
    };
    overlay_adapter_knobs(&mut cfg, rc);
    let general = std::fs::read(&a.general)?;
    let task = std::fs::read(&a.task)?;
    let mut pc = rc.pipeline_config();
    pc.model = cfg.clone();
    let art = run_pipeline(&pc, &base, &general, &task)?;

    let mut c = model_container(&cfg, &art.training_base);
    c.meta.plan = art.plan.clone();
    finish(c, rc, &a.out_dir.join("training_base.lmck"))?;
    if let Some(set) = &art.masks {
        finish(masks_container(&cfg, set), rc, &a.out_dir.join("masks.lmck"))?;
    }
    if let Some(qm) = &art.quantized {
        finish(quantized_container(&cfg, qm), rc, &a.out_dir.join("quantized.lmck"))?;
    }
    finish(
        adapters_container(&cfg, &art.adapters, pc.sft.delta_mask_mode, art.plan.as_ref(), art.masks.as_ref()),
        rc,
        &a.out_dir.join("adapters.lmck"),
    )?;
    finish(
        adapters_container(&cfg, &art.recovered, pc.sft.delta_mask_mode, None, art.masks.as_ref()),
        rc,
        &a.out_dir.join("recovered.lmck"),
    )?;
    if pc.stages.align {
        std::fs::write(a.out_dir.join("align_trace.csv"), series_csv("loss", &art.align_trace))?;
    }
    std::fs::write(a.out_dir.join("sft_trace.csv"), series_csv("loss", &art.sft_trace))?;

    let ppl = match &art.merged {
        Some(m) => {
            finish(model_container(&cfg, m), rc, &a.out_dir.join("merged.lmck"))?;
            perplexity_spec(&ForwardSpec::inference(&cfg, m), &task, rc.eval_seq_len)?
        }
        None => perplexity_spec(
            &ForwardSpec::inference(&cfg, &art.training_base).with_adapters(&art.adapters),
            &task,
            rc.eval_seq_len,
        )?,
    };
    let stages = format!(
        "{}{}{}{}",
        if pc.stages.prune { "P" } else { "-" },
        if pc.stages.align { "A" } else { "-" },
        if pc.stages.quant { "Q" } else { "-" },
        if pc.stages.recover { "R" } else { "-" }
    );
    println!(
        "command=run stages={stages} task_ppl={ppl} merged={} out_dir={}",
        art.merged.is_some(),
        a.out_dir.display()
    );
    Ok(())
}
