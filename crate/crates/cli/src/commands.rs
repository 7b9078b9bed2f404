use std::fs;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};
use ucan_core::analysis::{
    bench_attention, bench_csv, check_scaling, erf_csv, macs_csv, mean_rank, measure_erf,
    model_macs, rank_csv, rank_sweep, BenchConfig, BenchEngine, MacRecord, RankKind, RankReport,
    RankSetup, ERF_TABLE,
};
use ucan_core::attention::TileConfig;
use ucan_core::io;
use ucan_core::large_kernel::LkdConfig;
use ucan_core::network::{ucan_forward, ModelConfig, UcanWeights};

use crate::manifest::{ensure_dir, io_err, sidecar, CmdResult, Failure, RunManifest};
use crate::plot::{line_plot, Series};
use crate::{BenchArgs, ErfArgs, ForwardArgs, InitArgs, MacsArgs, RankArgs};

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn to_json<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("report serializes");
    s.push('\n');
    s.into_bytes()
}

fn load_config(path: Option<&Path>) -> Result<ModelConfig, Failure> {
    match path {
        None => Ok(ModelConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            ModelConfig::parse(&text).map_err(|e| usage(format!("{}: {e}", p.display())))
        }
    }
}

#[derive(Serialize)]
struct RankJson<'a> {
    kind: &'a str,
    n: usize,
    d: usize,
    pairs: usize,
    tol: f64,
    mean_rank: f64,
    reports: &'a [RankReport],
}

pub fn rank(a: RankArgs) -> CmdResult {
    if a.n == 0 || a.d == 0 || a.m == 0 || a.seeds == 0 {
        return Err(usage("--n, --d, --m and --seeds must be >= 1"));
    }
    if !(a.tol > 0.0 && a.tol < 1.0) {
        return Err(usage("--tol must lie in (0, 1)"));
    }
    let Some(kind) = RankKind::parse(&a.map) else {
        return Err(usage(format!(
            "unknown --map {:?}; expected relu, elu1, symrelu, hedgehog, identity or softmax",
            a.map
        )));
    };
    let dir = ensure_dir(&a.out)?;
    let setup = RankSetup {
        n: a.n,
        d: a.d,
        pairs: a.m,
        tol: a.tol,
    };
    let seeds: Vec<u64> = (a.seed..a.seed + a.seeds as u64).collect();
    let reports = rank_sweep(kind, setup, &seeds)?;
    let mean = mean_rank(&reports);
    let mut m = RunManifest::new("rank", a.seed);
    m.set("n", a.n).set("d", a.d).set("map", kind.name()).set("m", a.m);
    m.set("seeds", a.seeds).set("tol", a.tol);
    m.write_output(&dir.join("rank_report.csv"), rank_csv(&reports).as_bytes())?;
    let json = RankJson {
        kind: kind.name(),
        n: a.n,
        d: a.d,
        pairs: a.m,
        tol: a.tol,
        mean_rank: mean,
        reports: &reports,
    };
    m.write_output(&dir.join("rank_report.json"), &to_json(&json))?;
    if a.svg {
        let series = Series {
            label: kind.name().to_string(),
            points: reports.iter().map(|r| (r.seed as f64, r.rank as f64)).collect(),
        };
        let svg = line_plot("numerical rank per seed", "seed", "rank", &[series]);
        m.write_output(&dir.join("rank.svg"), svg.as_bytes())?;
    }
    m.save(&dir.join("manifest.json"))?;
    println!("{} n={} d={} seeds={} mean_rank={mean:.3}", kind.name(), a.n, a.d, a.seeds);
    Ok(())
}

pub fn erf(a: ErfArgs) -> CmdResult {
    let configs: Vec<LkdConfig> = if a.table {
        ERF_TABLE.iter().map(|&(k, d, e, _)| LkdConfig::new(k, d, e, 16)).collect()
    } else {
        let k = a.k_core.ok_or_else(|| usage("--k-core is required"))?;
        vec![LkdConfig::new(k, a.dilation, a.k_extra, 16)]
    };
    let dir = ensure_dir(&a.out)?;
    let reports = configs.iter().map(measure_erf).collect::<Result<Vec<_>, _>>()?;
    let mut m = RunManifest::new("erf", 0);
    if a.table {
        m.set("table", true);
    } else {
        m.set("k_core", a.k_core.unwrap_or_default()).set("dilation", a.dilation);
        m.set("k_extra", a.k_extra.map_or("none".into(), |k| k.to_string()));
    }
    m.write_output(&dir.join("erf_report.csv"), erf_csv(&reports).as_bytes())?;
    m.write_output(&dir.join("erf_report.json"), &to_json(&reports))?;
    m.save(&dir.join("manifest.json"))?;
    for r in &reports {
        println!(
            "k_core={} dilation={} k_extra={} predicted={} measured={}x{}",
            r.k_core,
            r.dilation,
            r.k_extra.map_or("-".into(), |k| k.to_string()),
            r.predicted,
            r.measured_h,
            r.measured_w
        );
    }
    if let Some(bad) = reports.iter().find(|r| !r.matches()) {
        return Err(Failure::Numeric(format!("measured receptive field disagrees with prediction: {bad:?}")));
    }
    Ok(())
}

#[derive(Serialize)]
struct MacsJson<'a> {
    record: &'a MacRecord,
    scopes: &'a std::collections::BTreeMap<String, u64>,
}

pub fn macs(a: MacsArgs) -> CmdResult {
    if a.height == 0 || a.width == 0 {
        return Err(usage("--height and --width must be >= 1"));
    }
    let cfg = load_config(a.config.as_deref())?;
    let dir = ensure_dir(&a.out)?;
    let weights = UcanWeights::init(&cfg)?;
    let rep = model_macs(&weights, a.height, a.width)?;
    let rec = MacRecord {
        height: a.height,
        width: a.width,
        matmul_macs: rep.matmul_macs,
        conv_macs: rep.conv_macs,
        total_macs: rep.total_macs(),
        elementwise_ops: rep.elementwise_ops,
        peak_temp_elements: rep.peak_temp_elements,
    };
    let mut m = RunManifest::new("macs", cfg.seed);
    m.set_config_text("model.", &cfg.to_text());
    m.set("height", a.height).set("width", a.width);
    m.write_output(&dir.join("macs_report.csv"), macs_csv(std::slice::from_ref(&rec)).as_bytes())?;
    m.write_output(&dir.join("macs_report.json"), &to_json(&MacsJson { record: &rec, scopes: &rep.scopes }))?;
    m.save(&dir.join("manifest.json"))?;
    println!("{}x{} total_macs={}", a.height, a.width, rec.total_macs);
    Ok(())
}

pub fn bench(a: BenchArgs) -> CmdResult {
    let engines = a
        .engines
        .iter()
        .map(|e| BenchEngine::parse(e.trim()).ok_or_else(|| usage(format!("unknown engine {e:?}"))))
        .collect::<Result<Vec<_>, _>>()?;
    if a.n_list.is_empty() || a.n_list.contains(&0) || a.d == 0 {
        return Err(usage("--n-list entries and --d must be >= 1"));
    }
    if a.tile_rows == 0 || a.tile_cols == 0 {
        return Err(usage("tile sizes must be >= 1"));
    }
    let cfg = BenchConfig {
        n_list: a.n_list.clone(),
        d: a.d,
        engines,
        warmup: a.warmup,
        runs: a.runs,
        tiles: TileConfig::new(a.tile_rows, a.tile_cols),
        seed: a.seed,
    };
    let dir = ensure_dir(&a.out)?;
    let records = bench_attention(&cfg)?;
    let mut m = RunManifest::new("bench", a.seed);
    let ns: Vec<String> = a.n_list.iter().map(ToString::to_string).collect();
    m.set("n_list", ns.join(",")).set("engines", a.engines.join(",")).set("d", a.d);
    m.set("warmup", a.warmup).set("runs", a.runs);
    m.set("tile_rows", a.tile_rows).set("tile_cols", a.tile_cols);
    m.write_output(&dir.join("bench.csv"), bench_csv(&records).as_bytes())?;
    m.write_output(&dir.join("bench.json"), &to_json(&records))?;
    if a.svg {
        let series: Vec<Series> = cfg
            .engines
            .iter()
            .map(|&e| Series {
                label: e.name().to_string(),
                points: records.iter().filter(|r| r.engine == e).map(|r| (r.n as f64, r.median_ms)).collect(),
            })
            .collect();
        let svg = line_plot("attention engines", "N", "median ms", &series);
        m.write_output(&dir.join("bench.svg"), svg.as_bytes())?;
    }
    m.save(&dir.join("manifest.json"))?;
    for r in &records {
        println!(
            "N={} {} median_ms={:.3} peak_temp={} rel_error={:.2e}",
            r.n,
            r.engine.name(),
            r.median_ms,
            r.peak_temp_elements,
            r.rel_error
        );
    }
    let violations = check_scaling(&records);
    if !violations.is_empty() {
        return Err(Failure::Numeric(violations.join("; ")));
    }
    Ok(())
}

pub fn forward(a: ForwardArgs) -> CmdResult {
    let wbytes = fs::read(&a.weights).map_err(|e| io_err(&a.weights, e))?;
    let weights = io::decode_weights(&wbytes).map_err(|e| io_err(&a.weights, e))?;
    if let Some(s) = a.scale {
        if s != weights.config.scale {
            return Err(usage(format!(
                "--scale {s} does not match the weights, which were built for scale {}",
                weights.config.scale
            )));
        }
    }
    let ibytes = fs::read(&a.input).map_err(|e| io_err(&a.input, e))?;
    let img = io::decode_ppm(&ibytes).map_err(|e| io_err(&a.input, e))?;
    let out = ucan_forward(&img, &weights)?;
    let mut m = RunManifest::new("forward", weights.config.seed);
    m.set_config_text("model.", &weights.config.to_text());
    m.set("weights_sha256", hex::encode(Sha256::digest(&wbytes)));
    m.set("input_sha256", hex::encode(Sha256::digest(&ibytes)));
    m.write_output(&a.output, &io::encode_ppm(&out)?)?;
    m.save(&sidecar(&a.output))?;
    let [_, _, h, w] = out.shape();
    println!("wrote {}x{} image to {}", w, h, a.output.display());
    Ok(())
}

pub fn init(a: InitArgs) -> CmdResult {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let weights = UcanWeights::init(&cfg)?;
    let bytes = io::encode_weights(&weights)?;
    let mut m = RunManifest::new("init", cfg.seed);
    m.set_config_text("model.", &cfg.to_text());
    m.write_output(&a.weights_out, &bytes)?;
    m.save(&sidecar(&a.weights_out))?;
    println!("wrote {} parameters to {}", ucan_core::network::Params::param_count(&weights), a.weights_out.display());
    Ok(())
}
