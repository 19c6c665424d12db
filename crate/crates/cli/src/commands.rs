//! Subcommand implementations. Each writes its outputs plus one manifest to `--out`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use fedsim_core::analysis::{
    frequency_component, heterogeneity, ratios, similarity_matrix, spectral_profile,
    CollabGraphView,
};
use fedsim_core::basis::{
    client_signatures, BasisSet, SignatureBundle, DEFAULT_COMPONENTS, DEFAULT_ORDER,
};
use fedsim_core::csbm::{generate_csbm, CsbmParams};
use fedsim_core::fedrun::{final_report, FedConfig, Federation};
use fedsim_core::graph::{
    adjusted_homophily, edge_homophily, estimate_train_homophily, node_homophily, Graph,
};
use fedsim_core::model::ModelCheckpoint;
use fedsim_core::partition::{client_graphs, partition, PartitionMode, PartitionPlan};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use toml::Value;

use crate::config::{Layered, Override};
use crate::error::{CliError, Result};
use crate::manifest::ManifestBuilder;

pub const GRAPH_FILE: &str = "graph.json";
pub const PARTITION_FILE: &str = "partition.json";
pub const ROUNDS_FILE: &str = "rounds.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const MODELS_FILE: &str = "models.json";
pub const BASES_FILE: &str = "bases.json";
pub const COLLAB_FILE: &str = "collab.jsonl";

fn create_out_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(format!("creating {}", dir.display()), e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(format!("writing {}", path.display()), e))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path)
        .map_err(|e| CliError::io(format!("reading {}", path.display()), e))
}

fn to_json_pretty<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("output serializes")
}

fn load_graph(path: &Path) -> Result<Graph> {
    Graph::from_json(&read_text(path)?).map_err(|e| annotate(path, e))
}

fn annotate(path: &Path, e: fedsim_core::Error) -> CliError {
    use fedsim_core::Error as E;
    let at = |m: String| format!("{}: {m}", path.display());
    CliError::Core(match e {
        E::Parse(m) => E::Parse(at(m)),
        E::Validation { field, message } => E::Validation {
            field,
            message: at(message),
        },
        other => other,
    })
}

fn seed_value(seed: u64) -> Result<Value> {
    i64::try_from(seed)
        .map(Value::Integer)
        .map_err(|_| CliError::Usage(format!("seed {seed} exceeds the config integer range")))
}

pub struct GenArgs<'a> {
    pub config: Option<&'a Path>,
    pub overrides: &'a [Override],
    pub seed: Option<u64>,
    pub out: &'a Path,
}

pub fn cmd_gen(args: GenArgs) -> Result<PathBuf> {
    let mut layered = Layered::load(args.config, args.overrides)?;
    if let Some(seed) = args.seed {
        layered.set(&["csbm", "seed"], seed_value(seed)?)?;
    }
    layered.expect_sections(&["csbm"])?;
    let params: CsbmParams = layered.section("csbm")?;
    let g = generate_csbm(&params)?;
    log::info!(
        "generated {} nodes, {} edges, h_adj {:.4}",
        g.num_nodes(),
        g.num_edges(),
        adjusted_homophily(&g).unwrap_or(f64::NAN)
    );

    create_out_dir(args.out)?;
    let mut manifest = ManifestBuilder::start("gen", params.seed, layered.to_json());
    if let Some(c) = args.config {
        manifest.input(c);
    }
    let path = args.out.join(GRAPH_FILE);
    write_text(&path, &g.to_json())?;
    manifest.output(&path);
    manifest.finish(args.out)?;
    Ok(path)
}

pub struct PartitionArgs<'a> {
    pub graph: &'a Path,
    pub mode: &'a str,
    pub clients: usize,
    pub seed: u64,
    pub out: &'a Path,
    pub write_clients: bool,
}

pub fn cmd_partition(args: PartitionArgs) -> Result<PathBuf> {
    if args.clients == 0 {
        return Err(CliError::Usage("--clients must be at least 1".into()));
    }
    let mode: PartitionMode = args.mode.parse()?;
    let g = load_graph(args.graph)?;
    let plan = partition(&g, mode, args.clients, args.seed)?;
    log::info!(
        "{} client sets from {} nodes",
        plan.sets.len(),
        g.num_nodes()
    );

    create_out_dir(args.out)?;
    let config = serde_json::json!({
        "graph": args.graph.display().to_string(),
        "mode": mode,
        "M": args.clients,
        "seed": args.seed,
    });
    let mut manifest = ManifestBuilder::start("partition", args.seed, config);
    manifest.input(args.graph);
    let path = args.out.join(PARTITION_FILE);
    write_text(&path, &plan.to_json())?;
    manifest.output(&path);
    if args.write_clients {
        for (i, sub) in client_graphs(&g, &plan)?.iter().enumerate() {
            let p = args.out.join(format!("client_{i}.json"));
            write_text(&p, &sub.to_json())?;
            manifest.output(&p);
        }
    }
    manifest.finish(args.out)?;
    Ok(path)
}

/// `[data]`: either one graph plus a partition, or a list of generated clients.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub graph: Option<PathBuf>,
    pub partition: Option<PathBuf>,
    pub partition_mode: Option<PartitionMode>,
    pub clients: Option<Vec<CsbmParams>>,
}

/// Client graphs described by `[data]`, plus the files they were read from.
fn load_clients(
    layered: &Layered,
    data: &DataSection,
    cfg_clients: usize,
    seed: u64,
) -> Result<(Vec<Graph>, Vec<PathBuf>)> {
    match (&data.graph, &data.clients) {
        (Some(_), Some(_)) => Err(CliError::Config(
            "[data] takes either `graph` or `clients`, not both".into(),
        )),
        (None, None) => Err(CliError::Config("[data] needs `graph` or `clients`".into())),
        (None, Some(list)) => {
            if data.partition.is_some() || data.partition_mode.is_some() {
                return Err(CliError::Config(
                    "[data] partition settings only apply with `graph`".into(),
                ));
            }
            let graphs = list
                .iter()
                .map(generate_csbm)
                .collect::<fedsim_core::Result<Vec<_>>>()?;
            Ok((graphs, Vec::new()))
        }
        (Some(graph_path), None) => {
            let graph_path = layered.resolve(graph_path);
            let g = load_graph(&graph_path)?;
            let mut inputs = vec![graph_path];
            let plan =
                match (&data.partition, data.partition_mode) {
                    (Some(p), None) => {
                        let p = layered.resolve(p);
                        let plan = PartitionPlan::from_json(&read_text(&p)?, &g)
                            .map_err(|e| annotate(&p, e))?;
                        inputs.push(p);
                        plan
                    }
                    (None, Some(mode)) => partition(&g, mode, cfg_clients, seed)?,
                    _ => return Err(CliError::Config(
                        "[data] with `graph` needs exactly one of `partition` or `partition_mode`"
                            .into(),
                    )),
                };
            Ok((client_graphs(&g, &plan)?, inputs))
        }
    }
}

pub struct TrainArgs<'a> {
    pub config: &'a Path,
    pub overrides: &'a [Override],
    pub seed: Option<u64>,
    pub out: &'a Path,
    pub dump_bases: bool,
    pub dump_collab: bool,
}

#[derive(Serialize)]
struct BasisDump<'a> {
    client: usize,
    theta: f64,
    hhat: f64,
    clamp_flags: &'a [bool],
    signatures: &'a SignatureBundle,
}

#[derive(Serialize)]
struct CollabDump<'a> {
    round: usize,
    collab: &'a fedsim_core::collab::CollabSet,
}

fn line_writer(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::io(format!("creating {}", path.display()), e))
}

fn write_line<T: Serialize>(w: &mut BufWriter<File>, path: &Path, value: &T) -> Result<()> {
    let line = serde_json::to_string(value).expect("record serializes");
    writeln!(w, "{line}").map_err(|e| CliError::io(format!("writing {}", path.display()), e))
}

pub fn cmd_train(args: TrainArgs) -> Result<fedsim_core::fedrun::FinalReport> {
    let mut layered = Layered::load(Some(args.config), args.overrides)?;
    if let Some(seed) = args.seed {
        layered.set(&["federation", "seed"], seed_value(seed)?)?;
    }
    layered.expect_sections(&["federation", "data"])?;
    let cfg: FedConfig = layered.section("federation")?;
    cfg.validate()?;
    let data: DataSection = layered.section("data")?;
    let (graphs, inputs) = load_clients(&layered, &data, cfg.clients, cfg.seed)?;
    log::info!(
        "training {} clients for {} rounds ({:?})",
        graphs.len(),
        cfg.rounds,
        cfg.mode
    );

    create_out_dir(args.out)?;
    let mut manifest = ManifestBuilder::start("train", cfg.seed, layered.to_json());
    manifest.input(args.config);
    inputs.iter().for_each(|p| manifest.input(p));

    let mut fed = Federation::new(cfg.clone(), graphs)?;
    if args.dump_bases {
        let path = args.out.join(BASES_FILE);
        let signatures = fed.signatures();
        let dump: Vec<BasisDump> = fed
            .bases()
            .iter()
            .zip(&signatures)
            .enumerate()
            .map(|(client, (b, s))| BasisDump {
                client,
                theta: b.theta,
                hhat: b.hhat,
                clamp_flags: &b.clamp_flags,
                signatures: s,
            })
            .collect();
        write_text(&path, &to_json_pretty(&dump))?;
        manifest.output(&path);
    }

    let rounds_path = args.out.join(ROUNDS_FILE);
    let collab_path = args.out.join(COLLAB_FILE);
    let mut rounds_out = line_writer(&rounds_path)?;
    let mut collab_out = if args.dump_collab {
        Some(line_writer(&collab_path)?)
    } else {
        None
    };
    let mut records = Vec::with_capacity(cfg.rounds);
    for _ in 0..cfg.rounds {
        let record = fed.run_round()?;
        write_line(&mut rounds_out, &rounds_path, &record)?;
        if let (Some(w), Some(collab)) = (collab_out.as_mut(), fed.last_collab()) {
            if record.round > 1 {
                write_line(
                    w,
                    &collab_path,
                    &CollabDump {
                        round: record.round,
                        collab,
                    },
                )?;
            }
        }
        records.push(record);
    }
    rounds_out
        .flush()
        .map_err(|e| CliError::io(format!("writing {}", rounds_path.display()), e))?;
    manifest.output(&rounds_path);
    if let Some(mut w) = collab_out {
        w.flush()
            .map_err(|e| CliError::io(format!("writing {}", collab_path.display()), e))?;
        manifest.output(&collab_path);
    }

    let report = final_report(&cfg, &records)?;
    log::info!(
        "best round {}, mean test {:.4}",
        report.best_round,
        report.mean_test
    );
    let report_path = args.out.join(REPORT_FILE);
    write_text(&report_path, &to_json_pretty(&report))?;
    manifest.output(&report_path);

    let checkpoints: Vec<ModelCheckpoint> = fed
        .models()
        .iter()
        .map(ModelCheckpoint::from_model)
        .collect();
    let models_path = args.out.join(MODELS_FILE);
    write_text(&models_path, &to_json_pretty(&checkpoints))?;
    manifest.output(&models_path);

    manifest.finish(args.out)?;
    Ok(report)
}

/// A closed pipe (`| head`) ends output quietly.
fn print_stdout(text: &str) -> Result<()> {
    let mut stdout = std::io::stdout().lock();
    let mut written = stdout.write_all(text.as_bytes());
    if written.is_ok() && !text.ends_with('\n') {
        written = stdout.write_all(b"\n");
    }
    match written.and_then(|()| stdout.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => {
            Err(CliError::io("writing stdout", e))
        }
        _ => Ok(()),
    }
}

/// Writes `text` to `out/name` with a manifest, or to stdout when no directory is given.
fn emit(
    out: Option<&Path>,
    name: &str,
    text: &str,
    command: &str,
    config: serde_json::Value,
    inputs: &[&Path],
) -> Result<()> {
    let Some(dir) = out else {
        return print_stdout(text);
    };
    create_out_dir(dir)?;
    let mut manifest = ManifestBuilder::start(command, 0, config);
    inputs.iter().for_each(|p| manifest.input(p));
    let path = dir.join(name);
    write_text(&path, text)?;
    manifest.output(&path);
    manifest.finish(dir)?;
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct HomophilyReport {
    pub edge: f64,
    pub node: f64,
    pub adjusted: f64,
    pub train_estimate: f64,
}

pub fn homophily_report(g: &Graph) -> Result<HomophilyReport> {
    Ok(HomophilyReport {
        edge: edge_homophily(g)?,
        node: node_homophily(g)?,
        adjusted: adjusted_homophily(g)?,
        train_estimate: estimate_train_homophily(g),
    })
}

pub fn cmd_analyze_homophily(graph: &Path, out: Option<&Path>) -> Result<()> {
    let g = load_graph(graph)?;
    let report = homophily_report(&g)?;
    let config = serde_json::json!({ "graph": graph.display().to_string() });
    emit(
        out,
        "homophily.json",
        &to_json_pretty(&report),
        "analyze homophily",
        config,
        &[graph],
    )
}

/// The `[federation]` keys the ratio analysis reads; others are ignored.
#[derive(Debug, Deserialize)]
struct SignatureSettings {
    #[serde(default = "default_order")]
    order: usize,
    #[serde(default = "default_components")]
    components: usize,
    #[serde(default)]
    clients: usize,
    #[serde(default)]
    seed: u64,
}

impl Default for SignatureSettings {
    fn default() -> Self {
        SignatureSettings {
            order: DEFAULT_ORDER,
            components: DEFAULT_COMPONENTS,
            clients: 0,
            seed: 0,
        }
    }
}

fn default_order() -> usize {
    DEFAULT_ORDER
}

fn default_components() -> usize {
    DEFAULT_COMPONENTS
}

pub fn cmd_analyze_ratios(config: &Path, overrides: &[Override], out: Option<&Path>) -> Result<()> {
    let layered = Layered::load(Some(config), overrides)?;
    layered.expect_sections(&["federation", "data"])?;
    let settings: SignatureSettings = layered.optional_section("federation")?.unwrap_or_default();
    let data: DataSection = layered.section("data")?;
    let (graphs, inputs) = load_clients(&layered, &data, settings.clients, settings.seed)?;
    let bundles = graphs
        .iter()
        .map(|g| {
            let b = BasisSet::build(g, settings.order)?;
            client_signatures(&b, settings.components)
        })
        .collect::<fedsim_core::Result<Vec<_>>>()?;
    let report = ratios(&similarity_matrix(&bundles), None)?;
    let mut all_inputs: Vec<&Path> = vec![config];
    all_inputs.extend(inputs.iter().map(PathBuf::as_path));
    emit(
        out,
        "ratios.json",
        &to_json_pretty(&report),
        "analyze ratios",
        layered.to_json(),
        &all_inputs,
    )
}

fn load_checkpoints(path: &Path) -> Result<Vec<ModelCheckpoint>> {
    serde_json::from_str(&read_text(path)?).map_err(|e| {
        CliError::Core(fedsim_core::Error::Parse(format!(
            "{}: {e}",
            path.display()
        )))
    })
}

pub fn cmd_analyze_profile(
    graph: &Path,
    models: &Path,
    client: usize,
    out: Option<&Path>,
) -> Result<()> {
    let g = load_graph(graph)?;
    if g.num_nodes() == 0 {
        return Err(CliError::Core(fedsim_core::Error::Validation {
            field: "graph".into(),
            message: format!(
                "{}: spectral profile needs at least one node",
                graph.display()
            ),
        }));
    }
    let checkpoints = load_checkpoints(models)?;
    let checkpoint = checkpoints.get(client).cloned().ok_or_else(|| {
        CliError::Usage(format!(
            "--client {client} but {} holds {} models",
            models.display(),
            checkpoints.len()
        ))
    })?;
    let model = checkpoint.into_model(g.num_features())?;
    let bases = BasisSet::build(&g, model.order())?;
    let profile = spectral_profile(&model, &bases, &g)?;
    let config = serde_json::json!({
        "graph": graph.display().to_string(),
        "models": models.display().to_string(),
        "client": client,
    });
    emit(
        out,
        "profile.csv",
        &profile.to_csv(),
        "analyze profile",
        config,
        &[graph, models],
    )
}

#[derive(Debug, Serialize)]
pub struct HeterogeneityReport {
    pub frequency_component: f64,
    pub heterogeneity: f64,
    pub clients: usize,
}

pub fn cmd_analyze_heterogeneity(
    models: &Path,
    weights: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let checkpoints = load_checkpoints(models)?;
    let m = checkpoints.len();
    if m == 0 {
        return Err(CliError::Core(fedsim_core::Error::Validation {
            field: "models".into(),
            message: format!("{} holds no models", models.display()),
        }));
    }
    let thetas: Vec<Vec<f64>> = checkpoints
        .iter()
        .map(|c| c.coeffs.iter().chain(&c.w_mlp).copied().collect())
        .collect();
    let dim = thetas[0].len();
    if thetas.iter().any(|t| t.len() != dim) {
        return Err(CliError::Core(fedsim_core::Error::Dimension(
            "models have different parameter counts".into(),
        )));
    }
    let w = match weights {
        Some(p) => {
            let rows: Vec<Vec<f64>> = serde_json::from_str(&read_text(p)?).map_err(|e| {
                CliError::Core(fedsim_core::Error::Parse(format!("{}: {e}", p.display())))
            })?;
            if rows.len() != m || rows.iter().any(|r| r.len() != m) {
                return Err(CliError::Core(fedsim_core::Error::Dimension(format!(
                    "{} must hold a {m} x {m} matrix",
                    p.display()
                ))));
            }
            DMatrix::from_fn(m, m, |i, j| rows[i][j])
        }
        None => DMatrix::from_element(m, m, 1.0 / m as f64),
    };
    let view = CollabGraphView::new(DMatrix::from_fn(m, dim, |i, j| thetas[i][j]), w)?;
    let report = HeterogeneityReport {
        frequency_component: frequency_component(&view),
        heterogeneity: heterogeneity(&view),
        clients: m,
    };
    let mut inputs = vec![models];
    inputs.extend(weights);
    let config = serde_json::json!({
        "models": models.display().to_string(),
        "weights": weights.map(|p| p.display().to_string()),
    });
    emit(
        out,
        "heterogeneity.json",
        &to_json_pretty(&report),
        "analyze heterogeneity",
        config,
        &inputs,
    )
}
