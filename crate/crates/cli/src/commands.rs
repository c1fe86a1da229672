use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use toolflow::align::{induced_vectors, GapPolicy};
use toolflow::bc::{
    self, build_report, eval_episode_seed, eval_seeds, evaluate, provenance_path, read_records, BcDataset,
    ExpertPolicy, LossKind, NetPolicy, Policy, PolicyKind, Provenance, Record, SeedRun, TrainConfig, TrainOutput,
};
use toolflow::diagnostics::{degenerate_backward, gradcheck_suite, GradcheckOptions};
use toolflow::envs::{EnvKind, EpisodeConfig};
use toolflow::error::{Error, Result};
use toolflow::geom::RotationKind;
use toolflow::net::Checkpoint;

use crate::config::Settings;
use crate::ply::flow_ply;

const EPISODE_KEYS: [&str; 5] = ["env", "horizon", "points_per_body", "distance_lo", "distance_hi"];

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(io(path))
}

fn config_path(out: &Path) -> PathBuf {
    out.with_extension("cfg")
}

fn episode_defaults() -> Vec<(&'static str, String)> {
    let d = EpisodeConfig::default();
    vec![
        ("env", "sphere-reach".into()),
        ("horizon", d.horizon.to_string()),
        ("points_per_body", d.points_per_body.to_string()),
        ("distance_lo", d.distance_range.0.to_string()),
        ("distance_hi", d.distance_range.1.to_string()),
    ]
}

fn settings(command: &'static str, defaults: Vec<(&'static str, String)>) -> Settings {
    let pairs: Vec<(&str, &str)> = defaults.iter().map(|(k, v)| (*k, v.as_str())).collect();
    Settings::new(command, &pairs)
}

fn episode_config(s: &Settings, noise_sigma: f64) -> Result<(EnvKind, EpisodeConfig)> {
    let env = s.get::<String>("env")?.parse()?;
    let cfg = EpisodeConfig {
        horizon: s.get("horizon")?,
        noise_sigma,
        points_per_body: s.get("points_per_body")?,
        distance_range: (s.get("distance_lo")?, s.get("distance_hi")?),
    };
    cfg.validate()?;
    Ok((env, cfg))
}

pub fn gen_demos_defaults() -> Settings {
    let mut d = episode_defaults();
    d.extend([
        ("seed", "0".into()),
        ("episodes", "100".into()),
        ("noise_sigma", "0".into()),
        ("out", "demos.jsonl".into()),
    ]);
    settings("gen-demos", d)
}

pub fn gen_demos(s: &Settings) -> Result<()> {
    let (env, cfg) = episode_config(s, s.get("noise_sigma")?)?;
    let out = PathBuf::from(s.raw("out"));
    let data = bc::generate_demos(env, &cfg, s.get("episodes")?, s.get("seed")?)?;
    data.save(&out)?;
    s.write(&config_path(&out))?;
    let p = &data.provenance;
    println!(
        "{}: kept {} of {} episodes ({} records), demonstrator success {:.3}",
        out.display(),
        p.kept,
        p.attempted,
        data.records.len(),
        p.demo_success_rate
    );
    Ok(())
}

pub fn train_defaults() -> Settings {
    let d = TrainConfig::default();
    let widths = |w: &[usize]| w.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
    settings(
        "train",
        vec![
            ("seed", d.seed.to_string()),
            ("data", "demos.jsonl".into()),
            ("out_dir", "run".into()),
            ("epochs", d.epochs.to_string()),
            ("eval_every", d.eval_every.to_string()),
            ("eval_configs", d.eval_configs.to_string()),
            ("seeds", d.seeds.to_string()),
            ("batch_size", d.batch_size.to_string()),
            ("lr", d.lr.to_string()),
            ("loss", d.loss.to_string()),
            ("lambda", d.lambda.to_string()),
            ("beta1", d.beta1.to_string()),
            ("beta2", d.beta2.to_string()),
            ("scale_s", d.scale_s.to_string()),
            ("rot_scale", d.rot_scale.to_string()),
            ("use_skip", d.use_skip.to_string()),
            ("policy", "dense-flow".into()),
            ("repr", RotationKind::AxisAngle3.to_string()),
            ("input_scale", d.input_scale.to_string()),
            ("encoder", widths(&d.encoder)),
            ("global", d.global.to_string()),
            ("decoder", widths(&d.decoder)),
            ("clamp_svd", d.clamp_svd.to_string()),
            ("parallel_seeds", "1".into()),
        ],
    )
}

fn train_config(s: &Settings) -> Result<TrainConfig> {
    let policy = match s.raw("policy") {
        "dense-flow" => PolicyKind::DenseFlow,
        "direct-vector" => PolicyKind::DirectVector(s.raw("repr").parse()?),
        other => return Err(Error::BadConfig(format!("unknown policy `{other}`"))),
    };
    let cfg = TrainConfig {
        epochs: s.get("epochs")?,
        eval_every: s.get("eval_every")?,
        eval_configs: s.get("eval_configs")?,
        seeds: s.get("seeds")?,
        batch_size: s.get("batch_size")?,
        lr: s.get("lr")?,
        loss: s.raw("loss").parse::<LossKind>()?,
        lambda: s.get("lambda")?,
        beta1: s.get("beta1")?,
        beta2: s.get("beta2")?,
        scale_s: s.get("scale_s")?,
        rot_scale: s.get("rot_scale")?,
        use_skip: s.flag("use_skip")?,
        policy,
        input_scale: s.get("input_scale")?,
        encoder: s.widths("encoder")?,
        global: s.get("global")?,
        decoder: s.widths("decoder")?,
        seed: s.get("seed")?,
        clamp_svd: s.flag("clamp_svd")?,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Trains the seeds in groups of `parallel`; results keep seed order.
fn train_runs(cfg: &TrainConfig, data: &BcDataset, parallel: usize) -> Result<Vec<SeedRun>> {
    let indices: Vec<usize> = (0..cfg.seeds).collect();
    let mut runs = Vec::with_capacity(cfg.seeds);
    for group in indices.chunks(parallel.max(1)) {
        let results: Vec<Result<SeedRun>> = std::thread::scope(|scope| {
            let handles: Vec<_> = group
                .iter()
                .map(|&k| scope.spawn(move || bc::train_seed(cfg, data, k)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("training thread panicked")).collect()
        });
        for r in results {
            runs.push(r?);
        }
    }
    Ok(runs)
}

fn episode_meta(env: EnvKind, ep: &EpisodeConfig) -> [(&'static str, String); 5] {
    [
        ("env", env.name().to_string()),
        ("horizon", ep.horizon.to_string()),
        ("points_per_body", ep.points_per_body.to_string()),
        ("distance_lo", ep.distance_range.0.to_string()),
        ("distance_hi", ep.distance_range.1.to_string()),
    ]
}

pub fn train(s: &Settings) -> Result<()> {
    let cfg = train_config(s)?;
    let parallel: usize = s.get("parallel_seeds")?;
    if parallel == 0 {
        return Err(Error::BadConfig("parallel_seeds must be at least 1".into()));
    }
    let data = BcDataset::load(Path::new(s.raw("data")))?;
    let out_dir = PathBuf::from(s.raw("out_dir"));
    std::fs::create_dir_all(&out_dir).map_err(io(&out_dir))?;

    let runs = train_runs(&cfg, &data, parallel)?;
    let report = build_report(&cfg, &data, &runs)?;
    let output = TrainOutput { runs, report };

    s.write(&out_dir.join("config.cfg"))?;
    write(&out_dir.join("train_log.csv"), &output.csv())?;
    write(&out_dir.join("report.json"), &output.report.to_json())?;
    let prov = &data.provenance;
    for run in &output.runs {
        let mut ck = run.policy.to_checkpoint();
        ck.meta.insert("epoch".into(), cfg.epochs.to_string());
        for (k, v) in episode_meta(prov.env, &prov.episode) {
            ck.meta.insert(k.into(), v);
        }
        ck.save(&out_dir.join(format!("seed_{}.ckpt", run.seed)))?;
        for msg in &run.numeric_errors {
            eprintln!("skipped batch: {msg}");
        }
    }
    let r = &output.report;
    println!(
        "{}: max-epoch {:.3} ± {:.3} (epoch {}), avg-epoch {:.3} ± {:.3}",
        out_dir.display(),
        r.max_epoch.mean,
        r.max_epoch.stderr,
        r.max_epoch.epoch.unwrap_or(0),
        r.avg_epoch.mean,
        r.avg_epoch.stderr
    );
    Ok(())
}

fn blank_episode_defaults() -> Vec<(&'static str, String)> {
    EPISODE_KEYS.iter().map(|k| (*k, String::new())).collect()
}

/// Fills empty episode keys from checkpoint metadata, then from built-in
/// defaults. An explicit `env` that disagrees with a checkpoint is a
/// mismatch.
fn inherit_episode(s: &mut Settings, meta: Option<&BTreeMap<String, String>>) -> Result<()> {
    let defaults: BTreeMap<&str, String> = episode_defaults().into_iter().collect();
    for key in EPISODE_KEYS {
        let inherited = meta.and_then(|m| m.get(key)).cloned();
        match (s.optional(key).map(str::to_string), inherited) {
            (Some(explicit), Some(stored)) if key == "env" && explicit != stored => {
                return Err(Error::CheckpointMismatch(format!(
                    "checkpoint was trained on `{stored}`, not `{explicit}`"
                )));
            }
            (Some(_), _) => {}
            (None, Some(stored)) => s.set(key, stored)?,
            (None, None) => s.set(key, defaults[key].clone())?,
        }
    }
    Ok(())
}

fn load_policies(paths: &[&str]) -> Result<Vec<(NetPolicy, Checkpoint)>> {
    paths
        .iter()
        .map(|p| {
            let ck = Checkpoint::load(Path::new(p))?;
            Ok((NetPolicy::from_checkpoint(ck.clone())?, ck))
        })
        .collect()
}

fn same_meta<'a>(cks: &'a [(NetPolicy, Checkpoint)], key: &str) -> Result<Option<&'a String>> {
    let first = cks.first().and_then(|(_, ck)| ck.meta.get(key));
    if cks.iter().any(|(_, ck)| ck.meta.get(key) != first) {
        return Err(Error::CheckpointMismatch(format!("checkpoints disagree on `{key}`")));
    }
    Ok(first)
}

pub fn eval_defaults() -> Settings {
    let mut d = blank_episode_defaults();
    d.extend([
        ("seed", "0".into()),
        ("checkpoint", String::new()),
        ("expert", "false".into()),
        ("data", String::new()),
        ("eval_configs", TrainConfig::default().eval_configs.to_string()),
        ("out", "report.json".into()),
    ]);
    settings("eval", d)
}

pub fn eval(mut s: Settings) -> Result<()> {
    let expert = s.flag("expert")?;
    let paths: Vec<&str> = s.optional("checkpoint").map(|c| c.split(',').collect()).unwrap_or_default();
    if expert == !paths.is_empty() {
        return Err(Error::BadConfig("give either --checkpoint or --expert".into()));
    }
    let policies = load_policies(&paths)?;
    for key in ["env", "horizon", "points_per_body", "distance_lo", "distance_hi"] {
        same_meta(&policies, key)?;
    }
    let meta = policies.first().map(|(_, ck)| &ck.meta);
    inherit_episode(&mut s, meta)?;
    let (env, episode) = episode_config(&s, 0.0)?;
    let seed: u64 = s.get("seed")?;
    let starts = eval_seeds(seed, s.get("eval_configs")?);

    let demo_rate = match s.optional("data") {
        Some(data) => {
            let path = provenance_path(Path::new(data));
            let text = std::fs::read_to_string(&path).map_err(io(&path))?;
            let prov: Provenance = serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
            prov.demo_success_rate
        }
        // Without a dataset the expert's own success on these starts is the
        // reference.
        None => evaluate(&ExpertPolicy, env, &episode, &starts)?.success_rate(),
    };
    if demo_rate == 0.0 {
        return Err(Error::NoSuccessfulDemos { attempted: starts.len() });
    }

    let (name, seeds, epoch, raw) = if expert {
        let rate = evaluate(&ExpertPolicy, env, &episode, &starts)?.success_rate();
        ("expert".to_string(), vec![seed], 0, vec![vec![rate]])
    } else {
        let epoch = same_meta(&policies, "epoch")?.map_or(Ok(0), |e| {
            e.parse()
                .map_err(|_| Error::CheckpointMismatch(format!("bad epoch `{e}`")))
        })?;
        let mut raw = Vec::new();
        for (policy, _) in &policies {
            raw.push(vec![evaluate(policy, env, &episode, &starts)?.success_rate()]);
        }
        let name = match policies[0].0.kind {
            PolicyKind::DenseFlow => "dense-flow".to_string(),
            PolicyKind::DirectVector(k) => format!("direct-vector/{k}"),
        };
        (name, policies.iter().map(|(p, _)| p.net.seed()).collect(), epoch, raw)
    };
    let n = seeds.len();
    let report = bc::EvalReport::new(env.name(), &name, demo_rate, seeds, vec![epoch], raw, vec![0; n])?;
    let out = PathBuf::from(s.raw("out"));
    write(&out, &report.to_json())?;
    s.write(&config_path(&out))?;
    println!(
        "{}: normalized success {:.3} ± {:.3} over {} start configurations",
        out.display(),
        report.max_epoch.mean,
        report.max_epoch.stderr,
        starts.len()
    );
    Ok(())
}

pub fn rollout_defaults() -> Settings {
    let mut d = blank_episode_defaults();
    d.extend([
        ("seed", "0".into()),
        ("checkpoint", String::new()),
        ("expert", "false".into()),
        ("episode", "0".into()),
        ("out", "rollout.jsonl".into()),
    ]);
    settings("rollout", d)
}

pub fn rollout(mut s: Settings) -> Result<()> {
    let expert = s.flag("expert")?;
    let checkpoint = s.optional("checkpoint").map(str::to_string);
    let policy: Box<dyn Policy> = match (expert, &checkpoint) {
        (true, None) => {
            inherit_episode(&mut s, None)?;
            Box::new(ExpertPolicy)
        }
        (false, Some(path)) => {
            let (policy, ck) = load_policies(&[path.as_str()])?.remove(0);
            inherit_episode(&mut s, Some(&ck.meta))?;
            Box::new(policy)
        }
        _ => return Err(Error::BadConfig("give either --checkpoint or --expert".into())),
    };
    let (env, episode) = episode_config(&s, 0.0)?;
    let seed = eval_episode_seed(s.get("seed")?, s.get("episode")?);
    let (steps, ep) = bc::rollout(policy.as_ref(), env, &episode, seed)?;
    let records: Vec<Record> = steps
        .into_iter()
        .enumerate()
        .map(|(t, (cloud, action))| Record {
            episode_id: 0,
            t,
            cloud,
            action,
            success: ep.success(),
        })
        .collect();
    let out = PathBuf::from(s.raw("out"));
    bc::write_records(&out, &records)?;
    s.write(&config_path(&out))?;
    println!(
        "{}: {} steps, success {}, final distance {:.4}, rotation error {:.2} deg",
        out.display(),
        records.len(),
        ep.success(),
        ep.distance(),
        ep.rotation_error().to_degrees()
    );
    Ok(())
}

pub fn export_flow_defaults() -> Settings {
    settings(
        "export-flow",
        vec![
            ("checkpoint", String::new()),
            ("observation", String::new()),
            ("index", "0".into()),
            ("stride", "1".into()),
            ("out", "flow.ply".into()),
        ],
    )
}

pub fn export_flow(s: &Settings) -> Result<()> {
    let (Some(checkpoint), Some(observation)) = (s.optional("checkpoint"), s.optional("observation")) else {
        return Err(Error::BadConfig("--checkpoint and --observation are required".into()));
    };
    let stride: usize = s.get("stride")?;
    if stride == 0 {
        return Err(Error::BadConfig("stride must be at least 1".into()));
    }
    let (policy, _) = load_policies(&[checkpoint])?.remove(0);
    let records = read_records(Path::new(observation))?;
    let index: usize = s.get("index")?;
    let record = records
        .get(index)
        .ok_or_else(|| Error::Format(format!("{observation} has {} observations, no index {index}", records.len())))?;
    let cloud = &record.cloud;
    let flow = match policy.kind {
        PolicyKind::DenseFlow => policy.tool_flow(cloud)?,
        // A direct policy's flow is the one its action induces.
        PolicyKind::DirectVector(_) => induced_vectors(&cloud.tool_positions(), &policy.action(cloud)?)?,
    };
    let out = PathBuf::from(s.raw("out"));
    write(&out, &flow_ply(cloud, &flow, stride))?;
    s.write(&config_path(&out))?;
    println!("{}: {} segments", out.display(), flow.len().div_ceil(stride));
    Ok(())
}

pub fn gradcheck_defaults() -> Settings {
    let d = GradcheckOptions::default();
    settings(
        "gradcheck",
        vec![
            ("seed", d.seed.to_string()),
            ("cases", d.cases.to_string()),
            ("h", d.h.to_string()),
            ("clamp_svd", "false".into()),
            ("degenerate", "false".into()),
            ("out", String::new()),
        ],
    )
}

/// Exit status when every check ran but some exceeded the tolerance.
pub const NUMERIC_FAILURE: u8 = 4;

/// Returns the exit status.
pub fn gradcheck(s: &Settings) -> Result<u8> {
    let opts = GradcheckOptions {
        cases: s.get("cases")?,
        seed: s.get("seed")?,
        h: s.get("h")?,
        gap: if s.flag("clamp_svd")? { GapPolicy::Clamp } else { GapPolicy::Error },
    };
    if opts.cases == 0 || !(opts.h.is_finite() && opts.h > 0.0) {
        return Err(Error::BadConfig("cases must be positive and h > 0".into()));
    }
    let mut report = String::from("component,cases,checked,kinks,max_rel_error,status\n");
    let mut failed = Vec::new();
    for c in gradcheck_suite(&opts)? {
        let status = if c.passed() { "PASS" } else { "FAIL" };
        if !c.passed() {
            failed.push(c.name.clone());
        }
        report.push_str(&format!(
            "{},{},{},{},{:e},{status}\n",
            c.name, c.cases, c.checked, c.kinks, c.max_rel_error
        ));
    }
    let degenerate = if s.flag("degenerate")? {
        let result = degenerate_backward(opts.gap);
        let line = match &result {
            Ok(_) => "degenerate_cube,1,0,0,,CLAMPED\n".to_string(),
            Err(e) => format!("degenerate_cube,1,0,0,,ERROR {e}\n"),
        };
        report.push_str(&line);
        result.err()
    } else {
        None
    };
    print!("{report}");
    if let Some(out) = s.optional("out") {
        let out = Path::new(out);
        write(out, &report)?;
        s.write(&config_path(out))?;
    }
    if let Some(e) = degenerate {
        return Err(e);
    }
    if !failed.is_empty() {
        eprintln!("gradient check failed for {}", failed.join(", "));
        return Ok(NUMERIC_FAILURE);
    }
    Ok(0)
}
