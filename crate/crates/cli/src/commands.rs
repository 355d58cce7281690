use std::fs;
use std::io::Write;
use std::ops::RangeInclusive;
use std::path::Path;

use leopard_core::learner::{fine_tune, select_lambda, HyperParams, ToySetup, TrainStats, LAMBDA_GRID};
use leopard_core::simulator::{
    ideal_pruning_rate, simulate_baseline, simulate_tile, sweep_bit_granularity, sweep_nqk, synthetic_trace,
    ScoreDistribution, SyntheticSpec, TileConfig, WorkloadTrace, EnergyTable, TRACE_FORMAT, TRACE_VERSION,
};
use leopard_core::HyperParamsF64;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{overlay, read_bytes, read_table, read_text, sha256_hex, table_value, FileConfig, Provenance};
use crate::{CliError, Distribution, GenArgs, SimArgs, SweepArgs, SweepKind, SyntheticPreset, TileArgs, TrainArgs, ValidateArgs};

const LOSS_SLACK: f64 = 1.05;

fn to_json<T: Serialize>(v: &T) -> Result<String, CliError> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| CliError::Internal(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::Internal(format!("cannot create {}: {e}", dir.display())))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::Internal(format!("cannot write {}: {e}", path.display())))
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(p) => write_file(p, text.as_bytes()),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| CliError::Internal(e.to_string())),
    }
}

fn load_trace(path: &Path) -> Result<(WorkloadTrace, Vec<u8>), CliError> {
    let bytes = read_bytes(path)?;
    let trace = WorkloadTrace::read_from(&bytes[..]).map_err(|e| CliError::User(format!("{}: {e}", path.display())))?;
    Ok((trace, bytes))
}

pub fn gen_synthetic(a: GenArgs) -> Result<(), CliError> {
    let file = FileConfig::load(a.config.as_deref())?;
    let base = match a.preset {
        SyntheticPreset::Default => SyntheticSpec::default(),
        SyntheticPreset::Memn2n => SyntheticSpec::memn2n(),
        SyntheticPreset::LowPruning => SyntheticSpec::low_pruning(),
    };
    let mut spec = overlay(&base, &table_value(&file.synthetic), "synthetic")?;
    if let Some(s) = a.seed.or(file.seed) {
        spec.seed = s;
    }
    let sizes = [
        (a.layers, &mut spec.layers),
        (a.heads, &mut spec.heads),
        (a.seq_len, &mut spec.seq_len),
        (a.d, &mut spec.d),
        (a.d_v, &mut spec.d_v),
    ];
    for (flag, slot) in sizes {
        if let Some(v) = flag {
            *slot = v;
        }
    }
    if a.valid_len.is_some() {
        spec.valid_len = a.valid_len;
    }
    if let Some(t) = a.target_pruning {
        spec.target_pruning = t;
    }
    let signal = match spec.distribution {
        ScoreDistribution::Clustered { signal } => signal,
        ScoreDistribution::Gaussian => 1.0,
    };
    match (a.distribution, a.signal) {
        (Some(Distribution::Gaussian), Some(_)) => {
            return Err(CliError::User("--signal only applies to the clustered distribution".into()))
        }
        (Some(Distribution::Gaussian), None) => spec.distribution = ScoreDistribution::Gaussian,
        (Some(Distribution::Clustered), s) => {
            spec.distribution = ScoreDistribution::Clustered { signal: s.unwrap_or(signal) }
        }
        (None, Some(s)) => match spec.distribution {
            ScoreDistribution::Clustered { .. } => spec.distribution = ScoreDistribution::Clustered { signal: s },
            ScoreDistribution::Gaussian => {
                return Err(CliError::User("--signal needs --distribution clustered".into()))
            }
        },
        (None, None) => {}
    }
    let trace = synthetic_trace(&spec)?;
    let mut bytes = Vec::new();
    trace.write_to(&mut bytes)?;
    write_file(&a.out, &bytes)?;

    let mut prov = Provenance::new("gen-synthetic", Some(spec.seed), &spec);
    if let Some(p) = &a.config {
        prov.input(p, &read_bytes(p)?);
    }
    let summary = json!({
        "provenance": prov,
        "spec": spec,
        "trace_sha256": sha256_hex(&bytes),
        "valid_scores": trace.valid_score_count(),
        "thresholds": trace.layers.iter().map(|l| l.threshold).collect::<Vec<_>>(),
        "ideal_pruning_rate": ideal_pruning_rate(&trace),
    });
    emit(None, &to_json(&summary)?)
}

/// Tile, energy table and thresholds after presets, config file and flags.
struct TileSetup {
    tile: TileConfig,
    energy: EnergyTable,
    energy_source: String,
    thresholds: Option<Vec<f64>>,
    inputs: Vec<(std::path::PathBuf, Vec<u8>)>,
}

fn parse_thresholds(path: &Path) -> Result<Vec<f64>, CliError> {
    let v: Value = serde_json::from_str(&read_text(path)?).map_err(|e| CliError::User(format!("{}: {e}", path.display())))?;
    let list = match &v {
        Value::Array(_) => &v,
        Value::Object(m) => m
            .get("thresholds")
            .ok_or_else(|| CliError::User(format!("{}: no `thresholds` field", path.display())))?,
        _ => return Err(CliError::User(format!("{}: expected a list of thresholds", path.display()))),
    };
    serde_json::from_value(list.clone()).map_err(|e| CliError::User(format!("{}: thresholds: {e}", path.display())))
}

fn tile_setup(a: &TileArgs) -> Result<TileSetup, CliError> {
    let file = FileConfig::load(a.config.as_deref())?;
    let mut inputs = Vec::new();
    if let Some(p) = &a.config {
        inputs.push((p.clone(), read_bytes(p)?));
    }
    let preset = a.preset.clone().or(file.preset.clone()).unwrap_or_else(|| "ae".into());
    let mut tile = overlay(&TileConfig::preset(&preset)?, &table_value(&file.tile), "tile")?;
    if let Some(n) = a.n_qk {
        tile.n_qk = n;
    }
    if let Some(b) = a.bits_per_cycle {
        tile.bits_per_cycle = b;
    }
    if let Some(d) = a.fifo_depth {
        tile.score_fifo_depth = d;
        tile.idx_fifo_depth = d;
    }
    if a.no_pruning {
        tile.pruning = false;
    }
    tile.validate()?;

    let mut patches = table_value(&file.energy);
    let mut energy_source = if patches.is_empty() { "default".to_string() } else { "config".to_string() };
    if let Some(p) = &a.energy_table {
        patches.push(read_table(p)?);
        let bytes = read_bytes(p)?;
        let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        energy_source = format!("file:{name} sha256:{}", sha256_hex(&bytes));
        inputs.push((p.clone(), bytes));
    }
    let energy = overlay(&EnergyTable::default(), &patches, "energy table")?;
    energy.validate()?;

    let thresholds = match &a.thresholds {
        Some(p) => {
            inputs.push((p.clone(), read_bytes(p)?));
            Some(parse_thresholds(p)?)
        }
        None => None,
    };
    Ok(TileSetup {
        tile,
        energy,
        energy_source,
        thresholds,
        inputs,
    })
}

/// Loads the trace, applies threshold overrides and checks it fits the tile.
fn prepare(trace_path: &Path, setup: &TileSetup, prov: &mut Provenance) -> Result<WorkloadTrace, CliError> {
    let (mut trace, bytes) = load_trace(trace_path)?;
    prov.input(trace_path, &bytes);
    for (p, b) in &setup.inputs {
        prov.input(p, b);
    }
    prov.energy_table = Some(setup.energy_source.clone());
    if let Some(th) = &setup.thresholds {
        trace.set_thresholds(th)?;
        trace.validate()?;
    }
    setup.tile.check_trace(&trace)?;
    Ok(trace)
}

pub fn simulate(a: SimArgs) -> Result<(), CliError> {
    let setup = tile_setup(&a.tile)?;
    let effective = json!({ "tile": setup.tile, "energy_table": setup.energy, "thresholds": setup.thresholds });
    let mut prov = Provenance::new("simulate", None, &effective);
    let trace = prepare(&a.trace, &setup, &mut prov)?;
    let report = simulate_tile(&trace, &setup.tile, &setup.energy)?;
    let baseline = simulate_baseline(&trace, &setup.tile, &setup.energy)?;
    let out = json!({
        "provenance": prov,
        "tile": setup.tile,
        "energy_table": setup.energy,
        "thresholds": trace.layers.iter().map(|l| l.threshold).collect::<Vec<_>>(),
        "speedup": report.speedup,
        "report": report,
        "baseline": baseline,
    });
    emit(a.out.as_deref(), &to_json(&out)?)
}

fn parse_range(s: &str) -> Result<RangeInclusive<usize>, CliError> {
    let bad = || CliError::User(format!("--range `{s}`: expected `lo..hi` with 1 <= lo <= hi"));
    let (lo, hi) = s.split_once("..").ok_or_else(bad)?;
    let hi = hi.strip_prefix('=').unwrap_or(hi);
    let lo: usize = lo.trim().parse().map_err(|_| bad())?;
    let hi: usize = hi.trim().parse().map_err(|_| bad())?;
    if lo == 0 || lo > hi {
        return Err(bad());
    }
    Ok(lo..=hi)
}

fn csv_text<T: Serialize>(prov: &Provenance, rows: &[T]) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Internal(e.to_string()))?;
    }
    let body = w.into_inner().map_err(|e| CliError::Internal(e.to_string()))?;
    let head = serde_json::to_string(prov).map_err(|e| CliError::Internal(e.to_string()))?;
    Ok(format!("# provenance: {head}\n{}", String::from_utf8_lossy(&body)))
}

pub fn sweep(a: SweepArgs) -> Result<(), CliError> {
    let setup = tile_setup(&a.tile)?;
    let text = match a.kind {
        SweepKind::Nqk => {
            let range = parse_range(&a.range)?;
            let effective = json!({
                "tile": setup.tile, "energy_table": setup.energy, "thresholds": setup.thresholds,
                "range": [range.start(), range.end()],
            });
            let mut prov = Provenance::new("sweep nqk", None, &effective);
            let trace = prepare(&a.trace, &setup, &mut prov)?;
            csv_text(&prov, &sweep_nqk(&trace, &setup.tile, range, &setup.energy)?)?
        }
        SweepKind::Bits => {
            if a.bits.is_empty() || a.bits.contains(&0) {
                return Err(CliError::User("--bits must list positive granularities".into()));
            }
            let effective = json!({
                "tile": setup.tile, "energy_table": setup.energy, "thresholds": setup.thresholds, "bits": a.bits,
            });
            let mut prov = Provenance::new("sweep bits", None, &effective);
            let trace = prepare(&a.trace, &setup, &mut prov)?;
            csv_text(&prov, &sweep_bit_granularity(&trace, &setup.tile, &a.bits, &setup.energy)?)?
        }
    };
    emit(a.out.as_deref(), &text)
}

pub fn validate_trace(a: ValidateArgs) -> Result<(), CliError> {
    let (trace, bytes) = load_trace(&a.trace)?;
    let heads: Vec<Value> = trace
        .heads()
        .map(|(l, h, head)| {
            json!({
                "layer": l, "head": h, "seq_len": head.seq_len(), "valid_len": head.valid_len,
                "d": head.head_dim(), "d_v": head.value_dim(),
            })
        })
        .collect();
    let out = json!({
        "valid": true,
        "format": TRACE_FORMAT,
        "version": TRACE_VERSION,
        "sha256": sha256_hex(&bytes),
        "metadata": trace.metadata,
        "q_bits": trace.q_spec.total_bits,
        "k_bits": trace.k_spec.total_bits,
        "v_bits": trace.v_spec.total_bits,
        "scaled_scores": trace.scaled_scores,
        "layers": trace.layers.len(),
        "thresholds": trace.layers.iter().map(|l| l.threshold).collect::<Vec<_>>(),
        "valid_scores": trace.valid_score_count(),
        "heads": heads,
    });
    emit(None, &to_json(&out)?)
}

fn summary(s: &TrainStats) -> Value {
    let last = s.last();
    json!({
        "lambda": s.lambda, "sparsity": last.sparsity, "task_loss": last.task_loss,
        "pruned_task_loss": last.pruned_task_loss, "thresholds": last.thresholds,
    })
}

pub fn train(a: TrainArgs) -> Result<(), CliError> {
    let file = FileConfig::load(a.config.as_deref())?;
    let mut setup = overlay(&ToySetup::default(), &table_value(&file.setup), "setup")?;
    let mut hp: HyperParamsF64 = overlay(&HyperParams::default(), &table_value(&file.hp), "hp")?;
    let seed = a.seed.or(file.seed);
    if let Some(s) = seed {
        setup.data_seed = s;
        setup.model_seed = s.wrapping_add(1);
        setup.pretrain.seed = s.wrapping_add(2);
        setup.fine_tune.seed = s.wrapping_add(3);
    }
    if let Some(e) = a.epochs {
        setup.fine_tune.epochs = e;
    }
    if let Some(n) = a.samples {
        setup.task.samples = n;
    }
    if let Some(l) = a.lambda {
        hp.lambda = l;
    }
    hp.validate()?;
    setup.task.validate()?;

    let effective = json!({ "setup": setup, "hp": hp, "select_lambda": a.select_lambda });
    let mut prov = Provenance::new("train", Some(setup.data_seed), &effective);
    if let Some(p) = &a.config {
        prov.input(p, &read_bytes(p)?);
    }

    let (data, mut model) = setup.prepare::<f64>()?;
    let (stats, search) = if a.select_lambda {
        let search = select_lambda(&model, &data, &hp, &LAMBDA_GRID, &setup.fine_tune, LOSS_SLACK)?;
        let chosen = search
            .chosen
            .and_then(|l| search.runs.iter().find(|r| r.lambda == l))
            .unwrap_or(&search.baseline)
            .clone();
        let report = json!({
            "chosen": search.chosen,
            "loss_slack": LOSS_SLACK,
            "baseline": summary(&search.baseline),
            "runs": search.runs.iter().map(summary).collect::<Vec<_>>(),
        });
        (chosen, Some(report))
    } else {
        (fine_tune(&mut model, &data, &hp, &setup.fine_tune)?, None)
    };

    let mut log = serde_json::to_string(&json!({ "provenance": prov })).map_err(|e| CliError::Internal(e.to_string()))?;
    log.push('\n');
    for r in &stats.records {
        log.push_str(&serde_json::to_string(r).map_err(|e| CliError::Internal(e.to_string()))?);
        log.push('\n');
    }
    write_file(&a.out_dir.join("train.jsonl"), log.as_bytes())?;

    let mut result = json!({
        "provenance": prov,
        "lambda": stats.lambda,
        "thresholds": stats.last().thresholds,
        "sparsity": stats.last().sparsity,
        "task_loss": stats.last().task_loss,
        "pruned_task_loss": stats.last().pruned_task_loss,
    });
    if let Some(s) = search {
        result["lambda_search"] = s;
    }
    let text = to_json(&result)?;
    write_file(&a.out_dir.join("thresholds.json"), text.as_bytes())?;
    emit(None, &text)
}
