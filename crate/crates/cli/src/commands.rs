use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use salient::attribution::{decompx, AttributionError, AttributionMethod, ReductionMode, Target, Unit};
use salient::compression::{
    frugalize, score_units, CompressionError, CompressionResult, FrugalOptions, LoadError,
    ScoringModel, ScoringOptions,
};
use salient::encoder::{forward, EncoderBundle};
use salient::harness::{
    estimate_cost, load_dataset, run_eval, CostTable, EndpointConfig, EvalOptions, HttpTransport, ReplayTransport,
    RetryPolicy, Transport, TransportKind,
};
use salient::selfcheck::{corrupt_ln_gamma, selfcheck_pair};
use salient::tokenizer::tokenize;

use crate::args::{AttributeArgs, CompressArgs, CostArgs, EvaluateArgs, Fault, ModelArgs, ScoringArgs, SelfcheckArgs};
use crate::error::CliError;

fn load_model(args: &ModelArgs) -> Result<ScoringModel, CliError> {
    let vocab = args.vocab_path();
    ScoringModel::load(&args.model, &vocab).map_err(|e| match e {
        LoadError::Model(e) => CliError::Data(format!("{}: {e}", args.model.display())),
        LoadError::Vocab(e) => CliError::Data(format!("{}: {e}", vocab.display())),
        other => CliError::data(other),
    })
}

fn scoring_options(args: &ScoringArgs) -> ScoringOptions {
    ScoringOptions {
        unit: args.unit.into(),
        mode: args.mode.into(),
        aggregation: args.aggregation.into(),
        target: args.target,
        sign: args.sign.into(),
    }
}

/// Maps a scoring failure onto the exit-code classes.
fn scoring_error(e: CompressionError) -> CliError {
    match e {
        CompressionError::Attribution(AttributionError::ReconstructionDrift { .. }) => {
            CliError::Consistency(e.to_string())
        }
        CompressionError::Attribution(AttributionError::TargetOutOfRange { .. }) => CliError::Usage(e.to_string()),
        other => CliError::data(other),
    }
}

fn open_output(path: Option<&Path>) -> Result<Box<dyn Write>, CliError> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?,
        )),
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    })
}

fn io_error(e: std::io::Error) -> CliError {
    CliError::Data(format!("write failed: {e}"))
}

#[derive(Debug, Serialize)]
struct AttributionDump {
    model: String,
    method: AttributionMethod,
    unit: Unit,
    mode: ReductionMode,
    /// Requested target: "predicted" or the class index.
    target: String,
    /// Class actually explained, when the text fits one encoder window.
    target_class: Option<usize>,
    tokens: Vec<String>,
    scores: Vec<f64>,
}

pub fn attribute(args: AttributeArgs) -> Result<(), CliError> {
    let model = load_model(&args.model)?;
    let text = match (&args.text, &args.input) {
        (Some(t), _) => t.clone(),
        (None, Some(path)) => {
            std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?
        }
        (None, None) => return Err(CliError::Usage("one of --text or --input is required".into())),
    };
    let options = scoring_options(&args.scoring);
    let input = tokenize(&text, &model.vocab).map_err(CliError::data)?;
    let saliency = score_units(&model, &input, args.method, &options).map_err(scoring_error)?;

    let target_class = if args.method == AttributionMethod::DecompX && input.len() <= model.bundle.config.max_positions
    {
        let trace = forward(&model.bundle, &input.token_ids).map_err(CliError::data)?;
        let d = decompx(&trace, &model.bundle, options.target).map_err(|e| scoring_error(e.into()))?;
        Some(d.target)
    } else {
        None
    };
    let tokens = match options.unit {
        Unit::Word => input.words().map(str::to_string).collect(),
        Unit::Subword => input
            .token_strings
            .iter()
            .zip(&input.special_mask)
            .filter(|(_, &special)| !special)
            .map(|(t, _)| t.clone())
            .collect(),
    };
    let dump = AttributionDump {
        model: model.bundle.fingerprint(),
        method: args.method,
        unit: options.unit,
        mode: options.mode,
        target: match options.target {
            Target::Predicted => "predicted".to_string(),
            Target::Class(c) => c.to_string(),
        },
        target_class,
        tokens,
        scores: saliency.scores,
    };
    let mut out = open_output(args.output.as_deref())?;
    serde_json::to_writer_pretty(&mut out, &dump).map_err(CliError::data)?;
    writeln!(out).and_then(|_| out.flush()).map_err(io_error)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CompressInput {
    id: serde_json::Value,
    text: String,
}

#[derive(Debug, Serialize)]
struct CompressOutput {
    id: serde_json::Value,
    #[serde(flatten)]
    result: CompressionResult,
}

pub fn compress(args: CompressArgs) -> Result<(), CliError> {
    let model = load_model(&args.model)?;
    let file = File::open(&args.input).map_err(|e| CliError::Data(format!("{}: {e}", args.input.display())))?;
    let mut records = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line_no = n + 1;
        let line = line.map_err(|e| CliError::Data(format!("{}:{line_no}: {e}", args.input.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CompressInput = serde_json::from_str(&line)
            .map_err(|e| CliError::Data(format!("{}:{line_no}: {e}", args.input.display())))?;
        records.push((line_no, rec));
    }

    let options = FrugalOptions {
        method: args.method,
        k: args.k,
        scoring: scoring_options(&args.scoring),
        seed: args.seed,
        count: None,
    };
    let mut out = open_output(args.output.as_deref())?;
    let mut retention = 0.0;
    for (line_no, rec) in &records {
        let result = frugalize(&rec.text, &model, &options).map_err(|e| match scoring_error(e) {
            CliError::Data(m) => CliError::Data(format!("{}:{line_no}: {m}", args.input.display())),
            other => other,
        })?;
        retention += result.retention();
        let record = CompressOutput {
            id: rec.id.clone(),
            result,
        };
        serde_json::to_writer(&mut out, &record).map_err(CliError::data)?;
        writeln!(out).map_err(io_error)?;
    }
    out.flush().map_err(io_error)?;
    let mean = if records.is_empty() { 0.0 } else { retention / records.len() as f64 };
    eprintln!("compressed {} records; mean retention {mean:.4}", records.len());
    Ok(())
}

/// Relative paths inside a config file resolve against the file's directory.
fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.parent().unwrap_or(Path::new(".")).join(path)
    }
}

pub fn evaluate(args: EvaluateArgs) -> Result<(), CliError> {
    let endpoint = args
        .endpoint_config
        .as_ref()
        .map(|p| EndpointConfig::load(p).map(|c| (p.clone(), c)))
        .transpose()
        .map_err(CliError::data)?;

    // Transport first so a missing API key fails before any work.
    let transport: Box<dyn Transport> = match (&args.replay, &endpoint) {
        (Some(replay), _) => Box::new(ReplayTransport::load(replay).map_err(CliError::data)?),
        (None, Some((path, cfg))) => match cfg.transport {
            TransportKind::Http => Box::new(HttpTransport::new(cfg).map_err(CliError::data)?),
            TransportKind::Replay => {
                let replay = cfg.replay.as_ref().expect("validated replay config has a file");
                Box::new(ReplayTransport::load(resolve(path, replay)).map_err(CliError::data)?)
            }
        },
        (None, None) => return Err(CliError::Usage("one of --endpoint-config or --replay is required".into())),
    };
    let model_name = endpoint.as_ref().map(|(_, c)| c.model_name.clone()).unwrap_or_else(|| "replay".into());

    let dataset = load_dataset(&args.dataset, args.task)
        .map_err(|e| CliError::Data(format!("{}: {e}", args.dataset.display())))?;
    let model = load_model(&args.model)?;
    let table = match &args.cost_table {
        Some(p) => CostTable::load(p).map_err(CliError::data)?,
        None => CostTable::default(),
    };
    let cost = match (&args.cost_model, &endpoint) {
        (Some(name), _) => table.get(name).map_err(CliError::data)?.clone(),
        (None, Some((_, cfg))) => match table.get(&cfg.model_name) {
            Ok(e) => e.clone(),
            Err(_) => {
                let first = table.entries.first().ok_or_else(|| CliError::Data("cost table is empty".into()))?;
                eprintln!(
                    "warning: no price for {}; charging at {} rates (use --cost-model)",
                    cfg.model_name, first.model_name
                );
                first.clone()
            }
        },
        (None, None) => table
            .entries
            .first()
            .cloned()
            .ok_or_else(|| CliError::Data("cost table is empty".into()))?,
    };

    let parallelism = args
        .parallelism
        .map(|p| p as usize)
        .or(endpoint.as_ref().map(|(_, c)| c.parallelism))
        .unwrap_or(4);
    let retry = endpoint.as_ref().map(|(_, c)| c.retry_policy()).unwrap_or_else(RetryPolicy::default);
    let options = EvalOptions {
        methods: args.methods.clone(),
        ks: args.ks.clone(),
        scoring: scoring_options(&args.scoring),
        seed: args.seed,
        parallelism,
        retry,
    };
    let report = run_eval(&dataset, &model, &options, transport.as_ref(), &model_name, &cost, &std::thread::sleep)
        .map_err(|e| CliError::Usage(e.to_string()))?;

    print!("{}", report.render_table());
    println!("summary hash {}", report.summary_hash);
    if let Some(path) = &args.report {
        let file = File::create(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer_pretty(&mut w, &report).map_err(CliError::data)?;
        writeln!(w).and_then(|_| w.flush()).map_err(io_error)?;
    }
    let errors: usize = report.rows.iter().map(|r| r.errors).sum();
    if errors > 0 {
        eprintln!("{errors} requests failed; see the report records for details");
    }
    if report.scored() == 0 {
        return Err(CliError::Data("no sample could be scored".into()));
    }
    Ok(())
}

pub fn cost(args: CostArgs) -> Result<(), CliError> {
    let table = match &args.table {
        Some(p) => CostTable::load(p).map_err(CliError::data)?,
        None => CostTable::default(),
    };
    let entries = match &args.model {
        Some(m) => vec![table.get(m).map_err(CliError::data)?.clone()],
        None => table.entries.clone(),
    };
    for e in &entries {
        let usd = estimate_cost(args.input_tokens, args.output_tokens, e);
        println!("{}\t${usd:.2}\t{usd}", e.model_name);
    }
    Ok(())
}

pub fn selfcheck(args: SelfcheckArgs) -> Result<(), CliError> {
    let bundle =
        EncoderBundle::load(&args.model).map_err(|e| CliError::Data(format!("{}: {e}", args.model.display())))?;
    let attributed = match args.inject_fault {
        Some(Fault::LnGamma) => corrupt_ln_gamma(&bundle),
        None => bundle.clone(),
    };
    let report = selfcheck_pair(&bundle, &attributed, args.trials as usize, args.seed);
    println!("trials {}", report.trials);
    println!("worst reconstruction error {:e}", report.worst_reconstruction_error);
    println!("worst row-sum error {:e}", report.worst_row_sum_error);
    for f in report.failures.iter().take(10) {
        println!("failure: {f}");
    }
    if report.passed() {
        println!("selfcheck passed");
        Ok(())
    } else {
        Err(CliError::Consistency(format!("selfcheck failed in {} checks", report.failures.len())))
    }
}
