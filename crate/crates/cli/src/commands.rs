use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};

use rram_tc::crossbar::{
    accuracy_vs_temperature, chip_seed, dequantized_mlp, infer, map_network, quantize_weights, summarize_sweep,
    write_sweep_csv, GRange, ParametricTalpha, TalphaSource,
};
use rram_tc::data::{load_idx, synthetic_digits, Dataset};
use rram_tc::dynamics::{ispp_batch, perturb_ensemble, programmed_cells, write_perturb_csv};
use rram_tc::mlp::{train_mlp, Mlp};
use rram_tc::seed::{derive_seed, tag};
use rram_tc::tcoeff::{
    bin_talpha_stats, calibrate_model, default_ranges, run_ensemble, write_ensemble_csv, ThermalStats,
};

use crate::config::{self, DataSettings, ExperimentConfig};
use crate::{Cli, Command, DataArgs, SetArgs};

pub fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Ensemble(_) => "ensemble",
        Command::SetSim(_) => "set-sim",
        Command::Perturb(_) => "perturb",
        Command::Calibrate(_) => "calibrate",
        Command::Train(_) => "train",
        Command::Map(_) => "map",
        Command::Infer(_) => "infer",
        Command::Sweep(_) => "sweep",
    }
}

fn set_opt<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn apply_set(cfg: &mut ExperimentConfig, a: &SetArgs) {
    set_opt(&mut cfg.set.runs, a.runs);
    set_opt(&mut cfg.set.initial_cv, a.cv);
    set_opt(&mut cfg.set.params.target_g, a.target_us.map(|g| g * 1e-6));
    set_opt(&mut cfg.set.params.vacancies_per_pulse, a.vacancies_per_pulse);
    set_opt(&mut cfg.set.params.redistribution_hops_per_pulse, a.hops);
    set_opt(&mut cfg.set.params.power_weighting_exponent, a.exponent);
    set_opt(&mut cfg.set.params.max_pulses, a.max_pulses);
}

fn apply_data(cfg: &mut ExperimentConfig, a: &DataArgs) {
    let d = &mut cfg.data;
    set_opt(&mut d.noise, a.noise);
    set_opt(&mut d.train_per_class, a.train_per_class);
    set_opt(&mut d.test_per_class, a.test_per_class);
    for (slot, v) in [
        (&mut d.train_images, &a.train_images),
        (&mut d.train_labels, &a.train_labels),
        (&mut d.test_images, &a.test_images),
        (&mut d.test_labels, &a.test_labels),
    ] {
        if v.is_some() {
            *slot = v.clone();
        }
    }
    set_opt(&mut cfg.train.hidden, a.hidden);
    set_opt(&mut cfg.train.epochs, a.epochs);
    set_opt(&mut cfg.train.learning_rate, a.lr);
}

/// Flag overrides, then every stage seed derived from the master seed.
fn resolve(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = config::load(cli.config.as_deref())?;
    set_opt(&mut cfg.master_seed, cli.seed);
    set_opt(&mut cfg.output_dir, cli.out.clone());
    match &cli.command {
        Command::Ensemble(a) => {
            set_opt(&mut cfg.ensemble.concentrations, a.cv.clone());
            set_opt(&mut cfg.ensemble.trials, a.trials);
        }
        Command::SetSim(a) => apply_set(&mut cfg, a),
        Command::Perturb(a) => {
            apply_set(&mut cfg, &a.set);
            set_opt(&mut cfg.perturb.cells, a.set.runs);
            set_opt(&mut cfg.perturb.params.steps, a.steps);
            set_opt(&mut cfg.perturb.params.p_far, a.p_far);
            set_opt(&mut cfg.perturb.params.r_far, a.r_far);
        }
        Command::Calibrate(a) => {
            set_opt(&mut cfg.calibration.target_mean, a.target);
            set_opt(&mut cfg.calibration.config.n_trials, a.trials);
        }
        Command::Train(a) => apply_data(&mut cfg, a),
        Command::Map(a) => {
            apply_data(&mut cfg, &a.data);
            if a.weights.is_some() {
                cfg.crossbar.weights = a.weights.clone();
            }
            set_opt(&mut cfg.crossbar.range, a.range.clone());
            set_opt(&mut cfg.crossbar.levels, a.levels);
        }
        Command::Infer(a) => {
            apply_data(&mut cfg, &a.map.data);
            if a.map.weights.is_some() {
                cfg.crossbar.weights = a.map.weights.clone();
            }
            set_opt(&mut cfg.crossbar.range, a.map.range.clone());
            set_opt(&mut cfg.crossbar.levels, a.map.levels);
            if a.stats.is_some() {
                cfg.crossbar.stats = a.stats.clone();
            }
            cfg.crossbar.parametric |= a.parametric;
            set_opt(&mut cfg.crossbar.temperature, a.temp);
            set_opt(&mut cfg.crossbar.chip, a.chip);
            cfg.crossbar.compensation.enabled |= a.compensate;
        }
        Command::Sweep(a) => {
            apply_data(&mut cfg, &a.data);
            if a.weights.is_some() {
                cfg.crossbar.weights = a.weights.clone();
            }
            if a.stats.is_some() {
                cfg.crossbar.stats = a.stats.clone();
            }
            cfg.crossbar.parametric |= a.parametric;
            set_opt(&mut cfg.crossbar.levels, a.levels);
            set_opt(&mut cfg.crossbar.sweep.temps, a.temps.clone());
            set_opt(&mut cfg.crossbar.sweep.n_chips, a.chips);
            set_opt(&mut cfg.crossbar.sweep.ranges, a.range.clone());
            cfg.crossbar.sweep.both_modes = a.compensate;
            cfg.crossbar.sweep.compensation.enabled = a.compensate;
        }
    }
    let m = cfg.master_seed;
    cfg.perturb.params.seed = derive_seed(m, tag::PERTURB, 0);
    cfg.calibration.config.master_seed = m;
    cfg.train.seed = derive_seed(m, tag::TRAIN, 0);
    cfg.crossbar.sweep.master_seed = m;
    cfg.crossbar.sweep.t0 = cfg.model.t0;
    Ok(cfg)
}

struct Out {
    dir: PathBuf,
    written: Vec<String>,
}

impl Out {
    fn file(&mut self, name: &str) -> anyhow::Result<BufWriter<File>> {
        let path = self.dir.join(name);
        self.written.push(name.to_string());
        Ok(BufWriter::new(
            File::create(&path).with_context(|| format!("creating {}", path.display()))?,
        ))
    }

    fn json(&mut self, name: &str, value: &impl serde::Serialize) -> anyhow::Result<()> {
        let mut f = self.file(name)?;
        serde_json::to_writer_pretty(&mut f, value)?;
        writeln!(f)?;
        f.flush()?;
        Ok(())
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = resolve(&cli)?;
    let name = command_name(&cli.command);
    std::fs::create_dir_all(&cfg.output_dir)
        .with_context(|| format!("creating output directory {}", cfg.output_dir.display()))?;
    let mut out = Out {
        dir: cfg.output_dir.clone(),
        written: Vec::new(),
    };
    out.json("config.json", &cfg)?;

    let start = Instant::now();
    let pool = match cli.workers {
        Some(0) => bail!("--workers must be at least 1"),
        Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n).build()?,
        None => rayon::ThreadPoolBuilder::new().build()?,
    };
    let result = pool.install(|| execute(&cli.command, &cfg, &mut out));
    let manifest = serde_json::json!({
        "command": name,
        "status": if result.is_ok() { "ok" } else { "error" },
        "master_seed": cfg.master_seed,
        "version": env!("CARGO_PKG_VERSION"),
        "workers": pool.current_num_threads(),
        "wall_time_s": start.elapsed().as_secs_f64(),
        "outputs": out.written.clone(),
    });
    if let Err(e) = &result {
        let body = serde_json::json!({
            "command": name,
            "error": e.to_string(),
            "causes": e.chain().skip(1).map(|c| c.to_string()).collect::<Vec<_>>(),
        });
        out.json("error.json", &body)?;
    }
    out.json("manifest.json", &manifest)?;
    result
}

fn execute(cmd: &Command, cfg: &ExperimentConfig, out: &mut Out) -> anyhow::Result<()> {
    match cmd {
        Command::Ensemble(_) => ensemble(cfg, out),
        Command::SetSim(_) => set_sim(cfg, out),
        Command::Perturb(_) => perturb(cfg, out),
        Command::Calibrate(_) => calibrate(cfg, out),
        Command::Train(_) => train(cfg, out),
        Command::Map(_) => map(cfg, out),
        Command::Infer(_) => infer_one(cfg, out),
        Command::Sweep(_) => sweep(cfg, out),
    }
}

fn ensemble_stats(cfg: &ExperimentConfig, out: &mut Out, model: &rram_tc::network::ConductanceModel) -> anyhow::Result<ThermalStats> {
    let e = &cfg.ensemble;
    let run = run_ensemble(&e.concentrations, e.trials, &e.sweep, cfg.master_seed, model)?;
    let records = run.records();
    let mut f = out.file("ensemble.csv")?;
    write_ensemble_csv(&records, &mut f)?;
    f.flush()?;
    if !run.failures.is_empty() {
        let failures: Vec<_> = run
            .failures
            .iter()
            .map(|t| serde_json::json!({"trial_id": t.trial_id, "c_v": e.concentrations[t.conc_index], "error": t.error.to_string()}))
            .collect();
        out.json("failures.json", &failures)?;
    }
    let stats = bin_talpha_stats(&records, &default_ranges())?;
    out.json("thermal_stats.json", &stats.to_json())?;
    Ok(stats)
}

fn ensemble(cfg: &ExperimentConfig, out: &mut Out) -> anyhow::Result<()> {
    ensemble_stats(cfg, out, &cfg.model).map(|_| ())
}

fn set_sim(cfg: &ExperimentConfig, out: &mut Out) -> anyhow::Result<()> {
    let s = &cfg.set;
    let runs = ispp_batch(s.runs, s.initial_cv, &cfg.model, &s.params, &cfg.ensemble.sweep, cfg.master_seed)?;
    let mut f = out.file("set_summary.csv")?;
    writeln!(
        f,
        "run_id,pulses_to_target,completed,final_conductance_S,r0_ohm,t_alpha_per_K,fluctuation_std_S,order_param"
    )?;
    for (i, r) in runs.iter().enumerate() {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{}",
            i,
            r.trace.pulses_to_target,
            r.trace.completed as u8,
            r.read.conductance(),
            r.fit.r0,
            r.fit.t_alpha,
            r.trace.fluctuation_std,
            rram_tc::lattice::order_parameter(&r.grid)?
        )?;
    }
    f.flush()?;
    let mut f = out.file("set_traces.csv")?;
    writeln!(f, "run_id,pulse_index,conductance_S")?;
    for (i, r) in runs.iter().enumerate() {
        for (k, g) in r.trace.pulse_conductances.iter().enumerate() {
            writeln!(f, "{i},{k},{g}")?;
        }
    }
    f.flush()?;
    if let Some(r) = runs.get(s.density_run) {
        let mut f = out.file("current_density.csv")?;
        r.read.write_csv(&mut f)?;
        f.flush()?;
    }
    Ok(())
}

fn perturb(cfg: &ExperimentConfig, out: &mut Out) -> anyhow::Result<()> {
    let s = &cfg.set;
    let runs = ispp_batch(cfg.perturb.cells, s.initial_cv, &cfg.model, &s.params, &cfg.ensemble.sweep, cfg.master_seed)?;
    let cells = programmed_cells(&runs)?;
    let pairs = perturb_ensemble(&cells, &cfg.perturb.params, &cfg.ensemble.sweep, &cfg.model)?;
    let mut f = out.file("perturb.csv")?;
    write_perturb_csv(&pairs, &mut f)?;
    f.flush()?;
    Ok(())
}

fn calibrate(cfg: &ExperimentConfig, out: &mut Out) -> anyhow::Result<()> {
    let c = &cfg.calibration;
    match calibrate_model(&cfg.model, c.target_mean, &c.config, &c.search) {
        Ok(cal) => {
            out.json("calibrated_model.json", &cal)?;
            ensemble_stats(cfg, out, &cal.model)?;
            Ok(())
        }
        Err(rram_tc::Error::Calibration {
            best_error,
            tolerance,
            best,
        }) => {
            out.json(
                "calibration_failure.json",
                &serde_json::json!({"target_mean": c.target_mean, "best_error": best_error, "tolerance": tolerance, "best_model": best}),
            )?;
            bail!("calibration failed: best error {best_error:e} 1/K, tolerance {tolerance:e}")
        }
        Err(e) => Err(e.into()),
    }
}

fn load_split(images: &Option<PathBuf>, labels: &Option<PathBuf>, limit: Option<usize>) -> anyhow::Result<Option<Dataset>> {
    match (images, labels) {
        (Some(i), Some(l)) => {
            let d = load_idx(i, l)?;
            Ok(Some(match limit {
                Some(n) => d.take(n),
                None => d,
            }))
        }
        (None, None) => Ok(None),
        _ => bail!("IDX images and labels must be given together"),
    }
}

fn datasets(d: &DataSettings, master: u64) -> anyhow::Result<(Dataset, Dataset)> {
    let train = match load_split(&d.train_images, &d.train_labels, d.train_limit)? {
        Some(t) => t,
        None => synthetic_digits(d.train_per_class, d.noise, derive_seed(master, tag::DATA, 1))?,
    };
    let test = match load_split(&d.test_images, &d.test_labels, d.test_limit)? {
        Some(t) => t,
        None => synthetic_digits(d.test_per_class, d.noise, derive_seed(master, tag::DATA, 2))?,
    };
    Ok((train, test))
}

fn read_weights(path: &Path) -> anyhow::Result<Mlp> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading weights {}", path.display()))?;
    Ok(Mlp::from_json(&serde_json::from_str(&text)?)?)
}

fn network(cfg: &ExperimentConfig) -> anyhow::Result<Mlp> {
    match &cfg.crossbar.weights {
        Some(p) => read_weights(p),
        None => Ok(train_mlp(&datasets(&cfg.data, cfg.master_seed)?.0, &cfg.train)?),
    }
}

fn train(cfg: &ExperimentConfig, out: &mut Out) -> anyhow::Result<()> {
    let (train, test) = datasets(&cfg.data, cfg.master_seed)?;
    let mlp = train_mlp(&train, &cfg.train)?;
    let q = quantize_weights(&mlp, cfg.crossbar.levels)?;
    out.json("mlp.json", &mlp.to_json())?;
    out.json(
        "train_report.json",
        &serde_json::json!({
            "shape": [mlp.inputs, mlp.hidden, mlp.outputs],
            "train_size": train.len(),
            "test_size": test.len(),
            "float_accuracy": mlp.accuracy(&test),
            "quantized_accuracy": dequantized_mlp(&mlp, &q).accuracy(&test),
            "levels": cfg.crossbar.levels,
        }),
    )
}

fn map(cfg: &ExperimentConfig, out: &mut Out) -> anyhow::Result<()> {
    let mlp = network(cfg)?;
    let q = quantize_weights(&mlp, cfg.crossbar.levels)?;
    let net = map_network(&mlp, &q, &GRange::named(&cfg.crossbar.range)?, cfg.model.t0)?;
    let mut f = out.file("conductances.csv")?;
    writeln!(f, "layer,row,col,level,g_plus_S,g_minus_S")?;
    for (l, (layer, ql)) in net.layers.iter().zip(&q).enumerate() {
        for k in 0..layer.g_plus.len() {
            writeln!(
                f,
                "{},{},{},{},{},{}",
                l,
                k / layer.cols,
                k % layer.cols,
                ql.level_index[k],
                layer.g_plus[k],
                layer.g_minus[k]
            )?;
        }
    }
    f.flush()?;
    out.json("crossbar.json", &net)
}

fn talpha_source(cfg: &ExperimentConfig, out: &mut Out) -> anyhow::Result<TalphaSource> {
    if cfg.crossbar.parametric {
        return Ok(TalphaSource::Parametric(ParametricTalpha::default()));
    }
    let stats = match &cfg.crossbar.stats {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading stats {}", p.display()))?;
            ThermalStats::from_json(&serde_json::from_str(&text)?)?
        }
        None => ensemble_stats(cfg, out, &cfg.model)?,
    };
    Ok(TalphaSource::Stats(stats))
}

fn infer_one(cfg: &ExperimentConfig, out: &mut Out) -> anyhow::Result<()> {
    let test = datasets(&cfg.data, cfg.master_seed)?.1;
    let mlp = network(cfg)?;
    let q = quantize_weights(&mlp, cfg.crossbar.levels)?;
    let source = talpha_source(cfg, out)?;
    let cb = &cfg.crossbar;
    let net = map_network(&mlp, &q, &GRange::named(&cb.range)?, cfg.model.t0)?
        .assign_talpha(&source, chip_seed(cfg.master_seed, cb.chip))?;
    let acc = infer(&net, &test, cb.temperature, &cb.compensation)?;
    out.json(
        "infer.json",
        &serde_json::json!({
            "temperature_K": cb.temperature,
            "range_name": cb.range,
            "chip_id": cb.chip,
            "compensated": cb.compensation.enabled,
            "accuracy": acc,
            "quantized_accuracy": dequantized_mlp(&mlp, &q).accuracy(&test),
            "test_size": test.len(),
        }),
    )
}

fn sweep(cfg: &ExperimentConfig, out: &mut Out) -> anyhow::Result<()> {
    let test = datasets(&cfg.data, cfg.master_seed)?.1;
    let mlp = network(cfg)?;
    let q = quantize_weights(&mlp, cfg.crossbar.levels)?;
    let source = talpha_source(cfg, out)?;
    let rows = accuracy_vs_temperature(&mlp, &q, &source, &test, &cfg.crossbar.sweep)?;
    let mut f = out.file("sweep.csv")?;
    write_sweep_csv(&rows, &mut f)?;
    f.flush()?;
    let mut f = out.file("sweep_summary.csv")?;
    writeln!(f, "temperature_K,range_name,compensated_flag,mean,min,p5")?;
    for s in summarize_sweep(&rows) {
        writeln!(
            f,
            "{},{},{},{},{},{}",
            s.temperature, s.range_name, s.compensated as u8, s.mean, s.min, s.p5
        )?;
    }
    f.flush()?;
    out.json(
        "baseline.json",
        &serde_json::json!({
            "float_accuracy": mlp.accuracy(&test),
            "quantized_accuracy": dequantized_mlp(&mlp, &q).accuracy(&test),
            "test_size": test.len(),
        }),
    )
}
