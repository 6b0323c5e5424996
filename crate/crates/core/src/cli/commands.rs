use std::path::{Path, PathBuf};

use super::manifest::OutputDir;
use super::svg::{heatmap, line_chart, HeatmapSpec, Series};
use super::{
    CkaArgs, Command, ExperimentArgs, HstatsArgs, ReportArgs, RunConfig, TrainArgs, DEFAULT_PROMPTS,
};
use crate::error::{Error, Result};
use crate::interventions::{
    asymmetry_csv, build_str_pairs, clean_runs, patch_csv, patch_heatmap, rescue_asymmetry,
    rescue_matrix, ExperimentMode, ExperimentSpec, PromptPair,
};
use crate::model::{checkpoint, Model};
use crate::numerics::derive_seed;
use crate::routing::routing_stats;
use crate::similarity::{sample_streams, CkaReport};
use crate::training::corpus::{default_templates, BYTE_VOCAB};
use crate::training::{loss_csv, synthetic_corpus, train, Corpus, Split};

pub(super) fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Train(a) => cmd_train(&a),
        Command::Cka(a) => cmd_cka(&a),
        Command::Patch(a) => cmd_patch(&a),
        Command::Rescue(a) => cmd_rescue(&a),
        Command::Hstats(a) => cmd_hstats(&a),
        Command::Report(a) => cmd_report(&a),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

/// The corpus file (or the synthetic corpus) split as during training.
fn load_corpus(
    cfg: &RunConfig,
    override_path: Option<&PathBuf>,
    seed: u64,
) -> Result<(Corpus, String)> {
    let path = override_path.or(cfg.corpus.as_ref());
    let (text, source) = match path {
        Some(p) => (
            std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            p.display().to_string(),
        ),
        None => (
            synthetic_corpus(cfg.synthetic_bytes, derive_seed(seed, "corpus")),
            format!("synthetic:{}", cfg.synthetic_bytes),
        ),
    };
    let corpus = Corpus::from_text(
        &text,
        cfg.train.heldout_fraction,
        derive_seed(seed, "split"),
    )?;
    Ok((corpus, source))
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg = load_config(args.config.as_deref())?;
    let seed = args.common.seed.unwrap_or(cfg.seed);
    let mut model_cfg = cfg.model.clone();
    model_cfg.seed = derive_seed(seed, "init");
    if model_cfg.vocab < BYTE_VOCAB {
        return Err(Error::Input(format!(
            "model.vocab: must be >= {BYTE_VOCAB} for the byte tokenizer, got {}",
            model_cfg.vocab
        )));
    }
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = seed;
    let (corpus, source) = load_corpus(&cfg, args.corpus.as_ref(), seed)?;

    let mut out = OutputDir::create(&args.common.out, "train", seed)?;
    out.manifest.model = Some(model_cfg.clone());
    out.manifest.train = Some(train_cfg.clone());
    out.manifest.settings.insert("corpus".into(), source);
    out.manifest
        .settings
        .insert("corpus_tokens".into(), corpus.len().to_string());
    out.save_manifest()?;

    let mut model = Model::new(model_cfg)?;
    let records = train(&mut model, &corpus, &train_cfg, |r| {
        eprintln!(
            "step {:>6} {:<7} loss {:.4}",
            r.step,
            r.split.name(),
            r.loss
        );
    })?;
    out.write("model.mhck", &checkpoint::to_bytes(&model)?)?;
    out.write("loss.csv", loss_csv(&records).as_bytes())?;
    let series = [Split::Train, Split::Heldout]
        .map(|s| Series {
            name: s.name().into(),
            points: records
                .iter()
                .filter(|r| r.split == s)
                .map(|r| (r.step as f64, r.loss))
                .collect(),
        })
        .to_vec();
    out.write(
        "loss.svg",
        line_chart("Training loss", "step", "loss (nats)", &series).as_bytes(),
    )?;
    Ok(())
}

fn labels(prefix: &str, items: impl IntoIterator<Item = usize>) -> Vec<String> {
    items.into_iter().map(|i| format!("{prefix}{i}")).collect()
}

fn some(rows: &[Vec<f64>]) -> Vec<Vec<Option<f64>>> {
    rows.iter()
        .map(|r| r.iter().map(|&v| Some(v)).collect())
        .collect()
}

fn write_cka(
    out: &mut OutputDir,
    model: &Model,
    corpus: &Corpus,
    positions: usize,
    seed: u64,
) -> Result<()> {
    let samples = sample_streams(model, corpus, positions, derive_seed(seed, "sample"))?;
    for w in &samples.warnings {
        eprintln!("warning: {w}");
    }
    out.manifest
        .settings
        .insert("cka_positions".into(), samples.positions.to_string());
    let report = CkaReport::compute(&samples, seed)?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))?;
    out.write("cka.json", json.as_bytes())?;
    out.write("cka_within.csv", report.within_csv().as_bytes())?;
    out.write("cka_inter.csv", report.inter_csv().as_bytes())?;
    let n = model.config().streams;
    for (l, m) in report.within_layer.iter().enumerate() {
        let spec = HeatmapSpec {
            title: format!("Stream CKA, layer {l}"),
            row_labels: labels("stream ", 0..n),
            col_labels: labels("s", 0..n),
            values: some(m),
            min: 0.0,
            max: 1.0,
        };
        out.write(&format!("cka_layer_{l}.svg"), heatmap(&spec).as_bytes())?;
    }
    let layers = report.inter_layer.len();
    let spec = HeatmapSpec {
        title: "Inter-layer CKA (streams concatenated)".into(),
        row_labels: labels("layer ", 0..layers),
        col_labels: labels("L", 0..layers),
        values: some(&report.inter_layer),
        min: 0.0,
        max: 1.0,
    };
    out.write("cka_inter.svg", heatmap(&spec).as_bytes())
}

fn cmd_cka(args: &CkaArgs) -> Result<()> {
    let cfg = load_config(args.config.as_deref())?;
    let seed = args.common.seed.unwrap_or(cfg.seed);
    let model = checkpoint::load(&args.checkpoint)?;
    let (corpus, source) = load_corpus(&cfg, args.corpus.as_ref(), seed)?;
    let mut out = OutputDir::create(&args.common.out, "cka", seed)?;
    out.manifest.model = Some(model.config().clone());
    out.manifest
        .settings
        .insert("checkpoint".into(), args.checkpoint.display().to_string());
    out.manifest.settings.insert("corpus".into(), source);
    out.manifest
        .settings
        .insert("cka_requested".into(), args.samples.to_string());
    out.save_manifest()?;
    write_cka(&mut out, &model, &corpus, args.samples, seed)
}

fn load_spec(
    path: Option<&Path>,
    default: ExperimentSpec,
    model: &Model,
) -> Result<ExperimentSpec> {
    let spec = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Input(format!("spec {}: {e}", p.display())))?
        }
        None => default,
    };
    spec.validate(model.config().layers, model.config().streams)?;
    Ok(spec)
}

fn default_spec(mode: ExperimentMode, prompts: usize, seed: u64) -> ExperimentSpec {
    ExperimentSpec {
        layers: None,
        stream_pairs: None,
        prompt_count: prompts,
        seed,
        mode,
    }
}

fn prompt_pairs(spec: &ExperimentSpec) -> Result<Vec<PromptPair>> {
    let t = default_templates();
    build_str_pairs(
        &t.templates,
        &t.word_lists,
        spec.prompt_count,
        derive_seed(spec.seed, "prompts"),
    )
}

fn write_patch(out: &mut OutputDir, model: &Model, spec: &ExperimentSpec) -> Result<()> {
    let mut pairs = prompt_pairs(spec)?;
    match spec.mode {
        ExperimentMode::Patch => {}
        ExperimentMode::SelfPatch => {
            for p in &mut pairs {
                p.source = p.target.clone();
            }
        }
        other => {
            return Err(Error::Input(format!(
                "spec.mode: {other:?} is not a patching mode"
            )));
        }
    }
    out.manifest
        .experiments
        .insert("patch".into(), spec.clone());
    out.save_manifest()?;
    let layers = spec.layer_list(model.config().layers);
    let streams: Vec<usize> = (0..model.config().streams).collect();
    let map = patch_heatmap(model, &pairs, &layers, &streams)?;
    out.write(
        "patch_heatmap.csv",
        patch_csv(&layers, &streams, &map).as_bytes(),
    )?;
    let spec = HeatmapSpec::auto_scale(
        "Patch effect: mean KL(clean || patched)",
        labels("layer ", layers.iter().copied()),
        labels("stream ", streams),
        some(&map),
    );
    out.write("patch_heatmap.svg", heatmap(&spec).as_bytes())
}

fn cmd_patch(args: &ExperimentArgs) -> Result<()> {
    let model = checkpoint::load(&args.checkpoint)?;
    let seed = args.common.seed.unwrap_or(0);
    let spec = load_spec(
        args.spec.as_deref(),
        default_spec(ExperimentMode::Patch, DEFAULT_PROMPTS, seed),
        &model,
    )?;
    let mut out = OutputDir::create(&args.common.out, "patch", seed)?;
    out.manifest.model = Some(model.config().clone());
    out.manifest
        .settings
        .insert("checkpoint".into(), args.checkpoint.display().to_string());
    out.save_manifest()?;
    write_patch(&mut out, &model, &spec)
}

fn write_rescue(out: &mut OutputDir, model: &Model, spec: &ExperimentSpec) -> Result<()> {
    let rescue_both = match spec.mode {
        ExperimentMode::Ablate => false,
        ExperimentMode::FullRescue => true,
        other => {
            return Err(Error::Input(format!(
                "spec.mode: {other:?} is not an ablation mode"
            )));
        }
    };
    let n = model.config().streams;
    if n < 2 {
        return Err(Error::Input(
            "rescue experiments need a model with at least 2 streams".into(),
        ));
    }
    out.manifest
        .experiments
        .insert("rescue".into(), spec.clone());
    out.save_manifest()?;
    let prompts: Vec<Vec<usize>> = prompt_pairs(spec)?.into_iter().map(|p| p.target).collect();
    let runs = clean_runs(model, &prompts)?;
    let layers = spec.layer_list(model.config().layers);
    let pairs = spec.pair_list(n);
    let report = rescue_matrix(model, &runs, &layers, &pairs, rescue_both)?;
    let series = pairs
        .iter()
        .map(|&[a, b]| rescue_asymmetry(&report, a, b))
        .collect::<Result<Vec<_>>>()?;

    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))?;
    out.write("rescue_matrix.json", json.as_bytes())?;
    out.write("rescue_layers.csv", report.layers_csv().as_bytes())?;
    out.write("rescue_asymmetry.csv", asymmetry_csv(&series).as_bytes())?;

    let pct = |m: Vec<Vec<Option<f64>>>| -> Vec<Vec<Option<f64>>> {
        m.into_iter()
            .map(|r| r.into_iter().map(|v| v.map(|x| 100.0 * x)).collect())
            .collect()
    };
    let mean = HeatmapSpec::auto_scale(
        "Mean rescue recovery (%), rows ablated, columns rescued",
        labels("ablated ", 0..n),
        labels("rescued ", 0..n),
        pct(report.mean_matrix()),
    );
    out.write("rescue_mean.svg", heatmap(&mean).as_bytes())?;

    let ordered: Vec<(usize, usize)> = report.mean.iter().map(|e| (e.ablated, e.rescued)).collect();
    let rows: Vec<Vec<Option<f64>>> = report
        .layers
        .iter()
        .map(|l| l.entries.iter().map(|e| e.recovery_pct).collect())
        .collect();
    let by_layer = HeatmapSpec::auto_scale(
        "Rescue recovery (%) by layer",
        labels("layer ", layers.iter().copied()),
        ordered.iter().map(|(j, i)| format!("-{j} +{i}")).collect(),
        rows,
    );
    out.write("rescue_layers.svg", heatmap(&by_layer).as_bytes())?;

    let lines: Vec<Series> = series
        .iter()
        .map(|s| Series {
            name: format!("({}, {})", s.a, s.b),
            points: s
                .per_layer
                .iter()
                .map(|&(l, v)| (l as f64, 100.0 * v))
                .collect(),
        })
        .collect();
    let chart = line_chart(
        "Rescue asymmetry: recovery(+b,-a) - recovery(+a,-b)",
        "layer",
        "points",
        &lines,
    );
    out.write("rescue_asymmetry.svg", chart.as_bytes())
}

fn cmd_rescue(args: &ExperimentArgs) -> Result<()> {
    let model = checkpoint::load(&args.checkpoint)?;
    let seed = args.common.seed.unwrap_or(0);
    let spec = load_spec(
        args.spec.as_deref(),
        default_spec(ExperimentMode::Ablate, DEFAULT_PROMPTS, seed),
        &model,
    )?;
    let mut out = OutputDir::create(&args.common.out, "rescue", seed)?;
    out.manifest.model = Some(model.config().clone());
    out.manifest
        .settings
        .insert("checkpoint".into(), args.checkpoint.display().to_string());
    out.save_manifest()?;
    write_rescue(&mut out, &model, &spec)
}

fn write_hstats(out: &mut OutputDir, model: &Model) -> Result<()> {
    let stats = routing_stats(&model.realized_routing()?);
    let mut csv = String::from("layer,frob_pre,frob_res,frob_post,var_pre,var_res,var_post\n");
    for s in &stats {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            s.layer, s.frob_pre, s.frob_res, s.frob_post, s.var_pre, s.var_res, s.var_post
        ));
    }
    out.write("routing_stats.csv", csv.as_bytes())?;
    let series = |name: &str, f: fn(&crate::routing::RoutingStats) -> f64| Series {
        name: name.into(),
        points: stats.iter().map(|s| (s.layer as f64, f(s))).collect(),
    };
    let norms = [
        series("H_pre", |s| s.frob_pre),
        series("H_res", |s| s.frob_res),
        series("H_post", |s| s.frob_post),
    ];
    out.write(
        "routing_norms.svg",
        line_chart(
            "Routing Frobenius norm across depth",
            "layer",
            "norm",
            &norms,
        )
        .as_bytes(),
    )?;
    let vars = [
        series("H_pre", |s| s.var_pre),
        series("H_res", |s| s.var_res),
        series("H_post", |s| s.var_post),
    ];
    out.write(
        "routing_variance.svg",
        line_chart(
            "Routing entry variance across depth",
            "layer",
            "variance",
            &vars,
        )
        .as_bytes(),
    )
}

fn cmd_hstats(args: &HstatsArgs) -> Result<()> {
    let model = checkpoint::load(&args.checkpoint)?;
    let seed = args.common.seed.unwrap_or(0);
    let mut out = OutputDir::create(&args.common.out, "hstats", seed)?;
    out.manifest.model = Some(model.config().clone());
    out.manifest
        .settings
        .insert("checkpoint".into(), args.checkpoint.display().to_string());
    out.save_manifest()?;
    write_hstats(&mut out, &model)
}

fn cmd_report(args: &ReportArgs) -> Result<()> {
    let cfg = load_config(args.config.as_deref())?;
    let seed = args.common.seed.unwrap_or(cfg.seed);
    let model = checkpoint::load(&args.checkpoint)?;
    let (corpus, source) = load_corpus(&cfg, args.corpus.as_ref(), seed)?;
    let patch = default_spec(ExperimentMode::Patch, args.prompts, seed);
    let rescue = default_spec(ExperimentMode::Ablate, args.prompts, seed);
    patch.validate(model.config().layers, model.config().streams)?;

    let mut out = OutputDir::create(&args.common.out, "report", seed)?;
    out.manifest.model = Some(model.config().clone());
    out.manifest
        .settings
        .insert("checkpoint".into(), args.checkpoint.display().to_string());
    out.manifest.settings.insert("corpus".into(), source);
    out.manifest
        .settings
        .insert("cka_requested".into(), args.samples.to_string());
    out.save_manifest()?;
    write_hstats(&mut out, &model)?;
    write_cka(&mut out, &model, &corpus, args.samples, seed)?;
    write_patch(&mut out, &model, &patch)?;
    write_rescue(&mut out, &model, &rescue)
}
