use std::fmt::Write as _;
use std::path::PathBuf;

use meanflow::energy::energy_distance;
use meanflow::mixture::{GaussianMixture, MixtureSpec};
use meanflow::sampler::{generate, FieldSource, NetworkFields, OracleAverage, Order, TimeGrid};
use meanflow::scaling::{pipeline_scaling, time_scaling, PipelineConfig, ScalingOp, ScalingReport};
use meanflow::train::{Checkpoint, LossRecord, TrainConfig, Trainer};
use meanflow::validate::{run_all, ValidateConfig};
use meanflow::vit::{ApproxAttnConfig, Kernel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::artifacts::{now_unix, Store, SCHEMA_VERSION};
use crate::config::{hash_of, FieldChoice, RunConfig};
use crate::CliError;

/// Offset applied to the run seed for reference data draws, so they are
/// independent of the sampling noise.
const REFERENCE_SEED_OFFSET: u64 = 0x5eed_da7a;

const LOSS_HEADER: &str = "step,loss,velocity_term,acceleration_term\n";

fn rows_to_csv(rows: &[Vec<f64>]) -> String {
    let mut out = String::new();
    if let Some(first) = rows.first() {
        let header: Vec<String> = (0..first.len()).map(|j| format!("x{j}")).collect();
        out.push_str(&header.join(","));
        out.push('\n');
    }
    for row in rows {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

fn draw_data(mix: &GaussianMixture, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| mix.sample_data(&mut rng)).collect()
}

fn run_id(hash: &str, started: f64) -> String {
    format!("{}-{}", &hash[..12], started as u64)
}

/// The mixture file named by the config, or an error pointing at `gen-data`.
fn load_mixture(cfg: &RunConfig) -> Result<(MixtureSpec, GaussianMixture), CliError> {
    let path = cfg.mixture_path();
    let text = std::fs::read_to_string(&path).map_err(|e| {
        CliError::Config(format!("cannot read mixture {} ({e}); run gen-data first", path.display()))
    })?;
    let spec = MixtureSpec::from_json(&text)?;
    let mix = GaussianMixture::from_spec(&spec)?;
    Ok((spec, mix))
}

pub fn gen_data(cfg: &RunConfig, force: bool) -> Result<(), CliError> {
    let spec = cfg.mixture_spec();
    let mix = GaussianMixture::from_spec(&spec)?;
    let n = cfg.data_section().samples;
    if n == 0 {
        return Err(CliError::Config("data.samples must be positive".into()));
    }
    let hash = hash_of(&(&spec, n));
    let names = ["mixture.json".to_string(), "data.csv".to_string()];
    let mut store = Store::open(&cfg.output_dir, "gen-data", &hash, &names, force)?;
    let rows = draw_data(&mix, n, cfg.seed);
    let mut text = spec.to_json()?;
    text.push('\n');
    store.write("mixture.json", text.as_bytes())?;
    let path = store.write("data.csv", rows_to_csv(&rows).as_bytes())?;
    println!("wrote {n} samples to {}", path.display());
    Ok(())
}

/// Training settings that must agree between a checkpoint and a resumed run.
fn resumable_part(c: &TrainConfig) -> TrainConfig {
    TrainConfig { steps: 0, ..c.clone() }
}

fn loss_line(r: &LossRecord) -> String {
    format!(
        "{},{:.17e},{:.17e},{:.17e}\n",
        r.step, r.loss, r.velocity_term, r.acceleration_term
    )
}

/// Keeps the rows of an earlier loss series up to and including `step`.
fn truncate_losses(text: &str, step: u64) -> Result<(String, Vec<f64>), CliError> {
    let mut out = String::from(LOSS_HEADER);
    let mut losses = Vec::new();
    for line in text.lines().skip(1) {
        let mut cells = line.split(',');
        let parse = |c: Option<&str>| c.and_then(|v| v.parse::<f64>().ok());
        let (Some(s), Some(l)) = (parse(cells.next()), parse(cells.next())) else {
            return Err(CliError::Config(format!("malformed loss row `{line}`")));
        };
        if s as u64 <= step {
            out.push_str(line);
            out.push('\n');
            losses.push(l);
        }
    }
    Ok((out, losses))
}

#[derive(Serialize)]
struct TrainSummary {
    schema_version: u32,
    run_id: String,
    config_hash: String,
    objective: meanflow::train::Objective,
    schedule: String,
    resumed_from_step: Option<u64>,
    steps: u64,
    initial_loss: Option<f64>,
    final_loss: Option<f64>,
    started_at_unix: f64,
    finished_at_unix: f64,
}

pub fn train(cfg: &RunConfig, resume: bool, force: bool) -> Result<(), CliError> {
    let started = now_unix();
    let (spec, mix) = load_mixture(cfg)?;
    let tc = cfg.train_config(mix.dim());
    tc.validate(mix.dim())?;
    let every = cfg.train.as_ref().map_or(0, |t| t.checkpoint_every);
    // Steps are left out so a finished run can be extended with --resume.
    let hash = hash_of(&(resumable_part(&tc), &spec));
    let names = [
        "checkpoint.json".to_string(),
        "train_loss.csv".to_string(),
        "train_summary.json".to_string(),
    ];
    let mut store = Store::open(&cfg.output_dir, "train", &hash, &names, force)?;

    let (mut trainer, mut csv, mut losses, resumed_from) = if resume {
        let path = store.path("checkpoint.json");
        let text = std::fs::read_to_string(&path)
            .map_err(|e| CliError::Config(format!("cannot resume from {}: {e}", path.display())))?;
        let mut ck = Checkpoint::from_json(&text)?;
        if resumable_part(&ck.config) != resumable_part(&tc) {
            return Err(CliError::Config("checkpoint was trained with different settings".into()));
        }
        if tc.steps < ck.step {
            return Err(CliError::Config(format!(
                "checkpoint is at step {}, beyond the requested {} steps",
                ck.step, tc.steps
            )));
        }
        let from = ck.step;
        ck.config.steps = tc.steps;
        let old = std::fs::read_to_string(store.path("train_loss.csv")).unwrap_or_else(|_| LOSS_HEADER.into());
        let (csv, losses) = truncate_losses(&old, from)?;
        (Trainer::resume(ck, mix)?, csv, losses, Some(from))
    } else {
        (Trainer::new(tc.clone(), mix)?, String::from(LOSS_HEADER), Vec::new(), None)
    };

    let save = |store: &mut Store, trainer: &Trainer, csv: &str| -> Result<(), CliError> {
        store.write("checkpoint.json", trainer.checkpoint().to_json()?.as_bytes())?;
        store.write("train_loss.csv", csv.as_bytes())?;
        Ok(())
    };
    while trainer.step() < tc.steps {
        let rep = match trainer.train_step() {
            Ok(rep) => rep,
            Err(e) => {
                store.write("train_loss.csv", csv.as_bytes())?;
                return Err(e.into());
            }
        };
        let rec = LossRecord {
            step: trainer.step(),
            loss: rep.loss,
            velocity_term: rep.velocity_term,
            acceleration_term: rep.acceleration_term,
        };
        csv.push_str(&loss_line(&rec));
        losses.push(rec.loss);
        if every > 0 && rec.step % every == 0 && rec.step < tc.steps {
            save(&mut store, &trainer, &csv)?;
        }
    }
    save(&mut store, &trainer, &csv)?;
    let summary = TrainSummary {
        schema_version: SCHEMA_VERSION,
        run_id: run_id(&hash, started),
        config_hash: hash.clone(),
        objective: tc.objective,
        schedule: tc.schedule.to_string(),
        resumed_from_step: resumed_from,
        steps: trainer.step(),
        initial_loss: losses.first().copied(),
        final_loss: losses.last().copied(),
        started_at_unix: started,
        finished_at_unix: now_unix(),
    };
    store.write_json("train_summary.json", &summary)?;
    if let (Some(a), Some(b)) = (summary.initial_loss, summary.final_loss) {
        println!("trained to step {}: loss {a:.4e} -> {b:.4e}", summary.steps);
    }
    Ok(())
}

pub fn sample(cfg: &RunConfig, force: bool) -> Result<(), CliError> {
    let started = now_unix();
    let sc = cfg.sample.clone().unwrap_or_default();
    if sc.batch < 2 || sc.reference_samples < 2 {
        return Err(CliError::Config("sample.batch and sample.reference_samples must be at least 2".into()));
    }
    let (spec, mix) = load_mixture(cfg)?;
    let grid = TimeGrid::uniform(sc.steps)?;

    let mut checkpoint = None;
    let mut checkpoint_path: Option<PathBuf> = None;
    let mut source_hash = String::from("oracle");
    if sc.source == FieldChoice::Checkpoint {
        let path = sc.checkpoint.clone().unwrap_or_else(|| cfg.output_dir.join("checkpoint.json"));
        let text = std::fs::read_to_string(&path)
            .map_err(|e| CliError::Config(format!("cannot read checkpoint {}: {e}", path.display())))?;
        let ck = Checkpoint::from_json(&text)?;
        if ck.config.schedule != cfg.schedule {
            return Err(CliError::Config(format!(
                "checkpoint was trained on the {} schedule but sampling asks for {}",
                ck.config.schedule, cfg.schedule
            )));
        }
        if ck.dim() != mix.dim() {
            return Err(CliError::Config(format!(
                "checkpoint has dimension {} but the mixture has {}",
                ck.dim(),
                mix.dim()
            )));
        }
        if sc.order == Order::Second && ck.acceleration.is_none() {
            return Err(CliError::Config("second-order sampling needs a checkpoint with an acceleration network".into()));
        }
        source_hash = hash_of(&text);
        checkpoint = Some(ck);
        checkpoint_path = Some(path);
    }
    let oracle = OracleAverage::new(&mix, cfg.schedule);
    let nets;
    let field: &dyn FieldSource = match &checkpoint {
        Some(ck) => {
            nets = NetworkFields {
                velocity: &ck.velocity,
                acceleration: ck.acceleration.as_ref(),
            };
            &nets
        }
        None => &oracle,
    };

    let hash = hash_of(&(&sc, &source_hash, cfg.schedule, cfg.seed, &spec));
    let source = match sc.source {
        FieldChoice::Checkpoint => "checkpoint",
        FieldChoice::Oracle => "oracle",
    };
    let order = match sc.order {
        Order::First => 1,
        Order::Second => 2,
    };
    let stem = format!("{source}_T{}_o{order}", sc.steps);
    let samples_name = format!("samples_{stem}.csv");
    let summary_name = format!("sample_summary_{stem}.json");
    let mut store = Store::open(
        &cfg.output_dir,
        "sample",
        &hash,
        &[samples_name.clone(), summary_name.clone()],
        force,
    )?;

    let batch = generate(field, mix.noise(), sc.batch, cfg.seed, &grid, sc.order)?;
    let reference = draw_data(&mix, sc.reference_samples, cfg.seed.wrapping_add(REFERENCE_SEED_OFFSET));
    let score = energy_distance(&batch.states, &reference)?;
    let noise = meanflow::sampler::draw_noise(mix.noise(), mix.dim(), sc.batch, cfg.seed);
    let noise_score = energy_distance(&noise, &reference)?;

    store.write(&samples_name, batch.to_csv().as_bytes())?;
    store.write_json(
        &summary_name,
        &json!({
            "schema_version": SCHEMA_VERSION,
            "run_id": run_id(&hash, started),
            "config_hash": hash,
            "source": source,
            "checkpoint": checkpoint_path,
            "checkpoint_step": checkpoint.as_ref().map(|c| c.step),
            "schedule": cfg.schedule.to_string(),
            "steps": sc.steps,
            "order": order,
            "batch": sc.batch,
            "seed": cfg.seed,
            "energy_distance": score,
            "noise_energy_distance": noise_score,
            "started_at_unix": started,
            "finished_at_unix": now_unix(),
        }),
    )?;
    println!("energy distance {score:.6e} (noise baseline {noise_score:.6e})");
    Ok(())
}

pub fn validate(cfg: &RunConfig, force: bool) -> Result<(), CliError> {
    let started = now_unix();
    let v = cfg.validate.clone().unwrap_or_default();
    // An explicitly named mixture must exist; otherwise fall back to the
    // config's data section.
    let spec = if cfg.mixture.is_some() || cfg.mixture_path().exists() {
        load_mixture(cfg)?.0
    } else {
        cfg.mixture_spec()
    };
    let mix = GaussianMixture::from_spec(&spec)?;
    let vcfg = ValidateConfig {
        points: v.points,
        seed: cfg.seed,
        fault: v.fault,
        orders: v.orders,
    };
    let hash = hash_of(&(&vcfg, &spec));
    let mut store = Store::open(&cfg.output_dir, "validate", &hash, &["validation_report.json".to_string()], force)?;
    let report = run_all(&mix, &vcfg)?;
    store.write_json(
        "validation_report.json",
        &json!({
            "schema_version": SCHEMA_VERSION,
            "run_id": run_id(&hash, started),
            "config_hash": hash,
            "report": report,
            "started_at_unix": started,
            "finished_at_unix": now_unix(),
        }),
    )?;
    let failures: Vec<String> = report
        .failures()
        .iter()
        .map(|c| {
            let show = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3e}"));
            format!(
                "{}: value {}, allowed [{}, {}]",
                c.name,
                show(c.value),
                show(c.lower),
                show(c.upper)
            )
        })
        .collect();
    if !failures.is_empty() {
        return Err(CliError::Validation(failures));
    }
    println!("all {} checks passed", report.checks.len());
    Ok(())
}

#[derive(Serialize)]
struct BenchEntry<'a> {
    report: &'a ScalingReport,
    expected: [f64; 2],
    within: bool,
}

pub fn bench(cfg: &RunConfig, force: bool) -> Result<(), CliError> {
    let started = now_unix();
    let b = cfg.bench.clone().unwrap_or_default();
    let hash = hash_of(&(&b, cfg.seed));
    let files = [
        "bench_attention_exact.csv",
        "bench_attention_approx.csv",
        "bench_pipeline_exact.csv",
        "bench_pipeline_approx.csv",
    ];
    let mut names: Vec<String> = files.iter().map(|s| s.to_string()).collect();
    names.push("bench_summary.json".into());
    let mut store = Store::open(&cfg.output_dir, "bench", &hash, &names, force)?;

    let approx = ApproxAttnConfig::new(b.degree, 1.0);
    let pipe = |kernel| PipelineConfig {
        kernel,
        blocks: b.blocks,
        steps: b.pipeline_steps,
        seed: cfg.seed,
    };
    let runs = [
        (
            time_scaling(ScalingOp::ExactAttention { width: b.width }, &b.attention_sizes, b.repeats, cfg.seed)?,
            [1.8, 2.2],
        ),
        (
            time_scaling(
                ScalingOp::ApproxAttention {
                    width: b.width,
                    config: approx,
                },
                &b.attention_sizes,
                b.repeats,
                cfg.seed,
            )?,
            [0.9, 1.3],
        ),
        (pipeline_scaling(&pipe(Kernel::Exact), &b.pipeline_sizes, b.repeats)?, [3.3, 4.5]),
        (
            pipeline_scaling(
                &pipe(Kernel::Approx(ApproxAttnConfig::new(b.pipeline_degree, 1.0))),
                &b.pipeline_sizes,
                b.repeats,
            )?,
            [1.6, 2.6],
        ),
    ];
    let mut lines = String::new();
    let mut entries = Vec::new();
    for ((rep, expected), file) in runs.iter().zip(files) {
        store.write(file, rep.to_csv().as_bytes())?;
        let within = rep.exponent >= expected[0] && rep.exponent <= expected[1];
        let _ = writeln!(
            lines,
            "{:<28} exponent {:.3} (r² {:.3}), expected [{}, {}]",
            rep.label, rep.exponent, rep.r_squared, expected[0], expected[1]
        );
        entries.push(BenchEntry {
            report: rep,
            expected: *expected,
            within,
        });
    }
    store.write_json(
        "bench_summary.json",
        &json!({
            "schema_version": SCHEMA_VERSION,
            "run_id": run_id(&hash, started),
            "config_hash": hash,
            "results": entries,
            "started_at_unix": started,
            "finished_at_unix": now_unix(),
        }),
    )?;
    print!("{lines}");
    Ok(())
}
