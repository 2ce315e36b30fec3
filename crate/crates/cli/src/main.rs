use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Arg, ArgMatches, Command};
use serde_json::{json, Map, Value};

use ordcap::corpus::{synth_corpus, Split, SynthSpec};
use ordcap::decoder::{DecoderMode, GenerateOptions, SweepRow};
use ordcap::pipeline::{ablation, Pipeline, PipelineConfig, Profile, Stage};
use ordcap::topics::DEFAULT_BETA;
use ordcap::Error;

fn main() -> ExitCode {
    match run(std::env::args_os()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) => 1,
        Error::Numeric { .. } => 3,
        _ => 2,
    }
}

fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

fn show(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// `--config`, `--profile`, `--threads`, and one flag per config key.
fn config_args() -> Vec<Arg> {
    let paper = serde_json::to_value(PipelineConfig::profile(Profile::Paper)).expect("serializes");
    let desk = serde_json::to_value(PipelineConfig::profile(Profile::Desk)).expect("serializes");
    let mut args = vec![
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .help("Flat JSON config; flags override its values [default: none]"),
        Arg::new("profile")
            .long("profile")
            .value_name("NAME")
            .default_value("paper")
            .value_parser(["paper", "desk"])
            .help("Base values before --config and flags"),
        Arg::new("threads")
            .long("threads")
            .value_name("N")
            .value_parser(clap::value_parser!(usize))
            .help("Worker threads for feature loading and generation [default: all cores]"),
    ];
    for key in PipelineConfig::keys() {
        let (p, d) = (show(&paper[&key]), show(&desk[&key]));
        let help = if p == d {
            format!("Config key `{key}` [default: {p}]")
        } else {
            format!("Config key `{key}` [default: {p}; desk: {d}]")
        };
        args.push(
            Arg::new(key.clone())
                .long(flag_name(&key))
                .value_name("VALUE")
                .help(help),
        );
    }
    args
}

fn split_arg(default: &'static str) -> Arg {
    Arg::new("split")
        .long("split")
        .value_name("SPLIT")
        .default_value(default)
        .value_parser(["train", "val", "test"])
        .help("Corpus split to evaluate")
}

fn stage_cmd(name: &'static str, about: &'static str) -> Command {
    Command::new(name).about(about).args(config_args())
}

fn cli() -> Command {
    let synth_defaults = SynthSpec::default();
    let num = |name: &'static str, default: String, help: &'static str| {
        Arg::new(name)
            .long(name)
            .value_name("N")
            .default_value(default)
            .help(help)
    };
    Command::new("ordcap")
        .about("Topic- and order-embedding-guided image captioning")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(
            Command::new("synth")
                .about("Write a synthetic corpus with planted topics")
                .arg(num("images", synth_defaults.n_images.to_string(), "Number of images"))
                .arg(num("topics", synth_defaults.n_topics.to_string(), "Planted topics"))
                .arg(num("seed", synth_defaults.seed.to_string(), "Generator seed"))
                .arg(num(
                    "vocab-size",
                    synth_defaults.vocab_size.to_string(),
                    "Content words across all topics",
                ))
                .arg(num("grid-n", synth_defaults.grid_n.to_string(), "Spatial grid cells"))
                .arg(num("d-fc", synth_defaults.d_fc.to_string(), "Global feature width"))
                .arg(num(
                    "d-loc",
                    synth_defaults.d_loc.to_string(),
                    "Grid cell feature width",
                ))
                .arg(num(
                    "captions",
                    synth_defaults.captions_per_image.to_string(),
                    "Captions per image",
                ))
                .arg(num(
                    "objects-per-topic",
                    synth_defaults.objects_per_topic.to_string(),
                    "Objects drawn per planted topic",
                ))
                .arg(num(
                    "fc-noise",
                    synth_defaults.fc_noise.to_string(),
                    "Std of global feature noise",
                ))
                .arg(num(
                    "grid-noise",
                    synth_defaults.grid_noise.to_string(),
                    "Std of grid feature noise",
                ))
                .arg(
                    Arg::new("out")
                        .long("out")
                        .value_name("DIR")
                        .required(true)
                        .help("Output directory [default: none, required]"),
                ),
        )
        .subcommand(stage_cmd("lda-train", "Fit LDA on training captions"))
        .subcommand(stage_cmd("topic-train", "Train the multi-label topic classifier"))
        .subcommand(
            stage_cmd("topic-eval", "Precision, recall and F-beta of topic predictions")
                .arg(split_arg("val"))
                .arg(
                    Arg::new("beta")
                        .long("beta")
                        .value_name("B")
                        .default_value(DEFAULT_BETA.to_string())
                        .help("F-score beta"),
                ),
        )
        .subcommand(stage_cmd("embed-train", "Train the order-embedding network"))
        .subcommand(
            stage_cmd("embed-eval", "Caption-retrieval recall at k")
                .arg(split_arg("test"))
                .arg(
                    Arg::new("k")
                        .long("k")
                        .value_name("LIST")
                        .default_value("1,5,10")
                        .help("Comma-separated cutoffs"),
                ),
        )
        .subcommand(stage_cmd("caption-train", "Train the caption decoder"))
        .subcommand(
            stage_cmd(
                "caption-sample",
                "Greedy captions for a split, one JSON object per line",
            )
            .arg(split_arg("test"))
            .arg(
                Arg::new("mu")
                    .long("mu")
                    .value_name("MU")
                    .help("Override the learned spatial/temporal mix [default: learned]"),
            )
            .arg(
                Arg::new("attention-dir")
                    .long("attention-dir")
                    .value_name("DIR")
                    .help("Write one attention CSV per image here [default: none]"),
            ),
        )
        .subcommand(stage_cmd("caption-eval", "Caption the test split and score it"))
        .subcommand(
            stage_cmd("ablate", "Train and score one decoder per mode")
                .arg(
                    Arg::new("modes")
                        .long("modes")
                        .value_name("LIST")
                        .default_value("topic,t-oe,t-oe-att")
                        .help("Comma-separated decoder modes"),
                )
                .arg(
                    Arg::new("out")
                        .long("out")
                        .value_name("DIR")
                        .help("Where ablation.csv/json go [default: the work dir]"),
                ),
        )
        .subcommand(
            stage_cmd("mu-sweep", "Score captions under fixed spatial/temporal mixes")
                .arg(split_arg("test"))
                .arg(
                    Arg::new("mu")
                        .long("mu")
                        .value_name("LIST")
                        .default_value("0,0.25,0.5,0.75,1")
                        .help("Comma-separated mu values"),
                )
                .arg(
                    Arg::new("out")
                        .long("out")
                        .value_name("FILE")
                        .help("Also write the CSV here [default: stdout only]"),
                ),
        )
}

fn parse<T: std::str::FromStr>(m: &ArgMatches, name: &str) -> ordcap::Result<T> {
    let raw = m.get_one::<String>(name).expect("has a default");
    raw.parse()
        .map_err(|_| Error::Usage(format!("--{name}: cannot parse `{raw}`")))
}

fn parse_list<T: std::str::FromStr>(raw: &str, what: &str) -> ordcap::Result<Vec<T>> {
    raw.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Usage(format!("--{what}: cannot parse `{s}`")))
        })
        .collect()
}

fn load_config(m: &ArgMatches) -> ordcap::Result<PipelineConfig> {
    let profile: Profile = m.get_one::<String>("profile").expect("has a default").parse()?;
    let overrides: Vec<(String, String)> = PipelineConfig::keys()
        .into_iter()
        .filter_map(|k| m.get_one::<String>(&k).map(|v| (k.clone(), v.clone())))
        .collect();
    // a bad flag is a usage error even without a config file
    PipelineConfig::layered(profile, None, &overrides).map_err(|e| match e {
        Error::Validation(msg) => Error::Usage(msg),
        other => other,
    })?;
    let file = match m.get_one::<String>("config") {
        Some(path) => Some(fs::read(path).map_err(|e| Error::io(path, e))?),
        None => None,
    };
    PipelineConfig::layered(profile, file.as_deref(), &overrides)
}

fn set_threads(m: &ArgMatches) -> ordcap::Result<()> {
    if let Some(&n) = m.get_one::<usize>("threads") {
        if n == 0 {
            return Err(Error::Usage("--threads must be ≥ 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Usage(format!("--threads: {e}")))?;
    }
    Ok(())
}

/// Writes to stdout; a closed pipe ends output quietly.
fn emit(text: &str) -> ordcap::Result<()> {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::io("<stdout>", e)),
        _ => Ok(()),
    }
}

fn log_line(line: String) {
    eprintln!("{line}");
}

fn write_file(path: &Path, text: &str) -> ordcap::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn run(argv: impl IntoIterator<Item = OsString>) -> ordcap::Result<()> {
    let matches = match cli().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            let benign = matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            if benign {
                emit(&e.to_string())?;
                return Ok(());
            }
            eprint!("{}", e.render());
            return Err(Error::Usage("invalid command line".into()));
        }
    };
    let (name, m) = matches.subcommand().expect("subcommand is required");
    if name == "synth" {
        return synth(m);
    }

    // flags first; nothing below touches disk until all of them parse
    let split: Option<Split> = match m.try_get_one::<String>("split") {
        Ok(Some(s)) => Some(s.parse()?),
        _ => None,
    };
    let cfg = load_config(m)?;
    set_threads(m)?;
    match name {
        "lda-train" | "topic-train" | "embed-train" | "caption-train" | "caption-eval" => {
            let stage = match name {
                "lda-train" => Stage::Lda,
                "topic-train" => Stage::TopicClf,
                "embed-train" => Stage::OrderNet,
                "caption-train" => Stage::Decoder,
                _ => Stage::Eval,
            };
            let p = Pipeline::open(&cfg)?;
            let dir = p.run_stage(stage, &mut log_line)?;
            if stage == Stage::Eval {
                emit(&format!("{}\n", p.load_report()?.to_json()))?;
            } else {
                emit(&format!("{}\n", dir.display()))?;
            }
        }
        "topic-eval" => {
            let beta: f64 = parse(m, "beta")?;
            if !(beta.is_finite() && beta > 0.0) {
                return Err(Error::Usage("--beta must be positive".into()));
            }
            let prf = Pipeline::open(&cfg)?.topic_eval(split.expect("has a default"), beta)?;
            let out = json!({ "precision": prf.precision, "recall": prf.recall, "f_beta": prf.f_beta, "beta": beta });
            emit(&format!("{out}\n"))?;
        }
        "embed-eval" => {
            let ks: Vec<usize> = parse_list(m.get_one::<String>("k").expect("has a default"), "k")?;
            if ks.contains(&0) {
                return Err(Error::Usage("--k values must be ≥ 1".into()));
            }
            let recalls = Pipeline::open(&cfg)?.embed_eval(split.expect("has a default"), &ks)?;
            let out: Map<String, Value> = recalls.into_iter().map(|(k, r)| (format!("r@{k}"), json!(r))).collect();
            emit(&format!("{}\n", Value::Object(out)))?;
        }
        "caption-sample" => {
            let mu = match m.get_one::<String>("mu") {
                Some(raw) => Some(
                    raw.parse::<f64>()
                        .map_err(|_| Error::Usage(format!("--mu: cannot parse `{raw}`")))?,
                ),
                None => None,
            };
            if mu.is_some_and(|v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::Usage("--mu must lie in [0, 1]".into()));
            }
            let opts = GenerateOptions {
                max_len: cfg.max_len,
                mu,
            };
            let rows = Pipeline::open(&cfg)?.sample(split.expect("has a default"), &opts)?;
            let att_dir = m.get_one::<String>("attention-dir").map(PathBuf::from);
            for (id, caption, trace) in &rows {
                emit(&format!("{}\n", json!({ "image_id": id, "caption": caption })))?;
                if let Some(dir) = &att_dir {
                    write_file(&dir.join(format!("{id}.csv")), &trace.to_csv())?;
                }
            }
        }
        "ablate" => {
            let modes: Vec<DecoderMode> = m
                .get_one::<String>("modes")
                .expect("has a default")
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| s.trim().parse())
                .collect::<ordcap::Result<_>>()?;
            let out = m
                .get_one::<String>("out")
                .map(PathBuf::from)
                .unwrap_or_else(|| cfg.work_dir.clone());
            let report = ablation(&cfg, &modes, &mut log_line)?;
            report.write(&out)?;
            emit(&report.to_csv())?;
        }
        "mu-sweep" => {
            let mus: Vec<f64> = parse_list(m.get_one::<String>("mu").expect("has a default"), "mu")?;
            if mus.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Usage("--mu values must lie in [0, 1]".into()));
            }
            let rows = Pipeline::open(&cfg)?.mu_sweep(split.expect("has a default"), &mus)?;
            let mut csv = format!("{}\n", SweepRow::CSV_HEADER);
            for r in &rows {
                csv.push_str(&r.to_csv_line());
                csv.push('\n');
            }
            if let Some(path) = m.get_one::<String>("out") {
                write_file(Path::new(path), &csv)?;
            }
            emit(&csv)?;
        }
        other => unreachable!("unhandled subcommand {other}"),
    }
    Ok(())
}

fn synth(m: &ArgMatches) -> ordcap::Result<()> {
    let spec = SynthSpec {
        n_images: parse(m, "images")?,
        n_topics: parse(m, "topics")?,
        seed: parse(m, "seed")?,
        vocab_size: parse(m, "vocab-size")?,
        grid_n: parse(m, "grid-n")?,
        d_fc: parse(m, "d-fc")?,
        d_loc: parse(m, "d-loc")?,
        captions_per_image: parse(m, "captions")?,
        objects_per_topic: parse(m, "objects-per-topic")?,
        fc_noise: parse(m, "fc-noise")?,
        grid_noise: parse(m, "grid-noise")?,
    };
    let sizes = [
        ("images", spec.n_images),
        ("topics", spec.n_topics),
        ("vocab-size", spec.vocab_size),
        ("grid-n", spec.grid_n),
        ("d-fc", spec.d_fc),
        ("d-loc", spec.d_loc),
        ("captions", spec.captions_per_image),
        ("objects-per-topic", spec.objects_per_topic),
    ];
    if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
        return Err(Error::Usage(format!("--{name} must be ≥ 1")));
    }
    if !(spec.fc_noise >= 0.0 && spec.grid_noise >= 0.0) {
        return Err(Error::Usage("noise levels must be ≥ 0".into()));
    }
    let out = PathBuf::from(m.get_one::<String>("out").expect("required"));
    let corpus = synth_corpus(&spec)?;
    corpus.write_to(&out)?;
    emit(&format!("{}\n", out.join("manifest.json").display()))?;
    Ok(())
}
