//! The `run`, `synth`, `compare` and `verify` commands and the files they write.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::engine::{run_seed, PolicyKind, RunResult};
use crate::error::{config, Result};
use crate::pool::PatchRecord;
use crate::pool_io::{read_pool, write_pool, PoolHeader};
use crate::stats::{mean, sample_std, welch_t_test};
use crate::synth::{generate_records, SynthConfig};
use crate::verify::{self, SuiteReport};

/// Window of the smoothed curves in the plot files.
pub const SMOOTH_WINDOW: usize = 30;

/// Soft time limit of `verify`; exceeding it only prints a warning.
pub const VERIFY_SOFT_LIMIT_SECS: f64 = 120.0;

pub const SIGNIFICANCE: f64 = 0.05;

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn fmt6(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v:.6}")
    }
}

/// Fails with a config error if any of `paths` exists and `force` is off.
pub fn check_overwrite(paths: &[PathBuf], force: bool) -> Result<()> {
    if force {
        return Ok(());
    }
    match paths.iter().find(|p| p.exists()) {
        Some(p) => Err(config(format!(
            "refusing to overwrite {} (pass --force)",
            p.display()
        ))),
        None => Ok(()),
    }
}

fn create(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(csv::Writer::from_writer(BufWriter::new(File::create(
        path,
    )?)))
}

fn csv_err(e: csv::Error) -> crate::Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => io.into(),
        other => crate::Error::Invariant(format!("csv write failed: {other:?}")),
    }
}

pub fn load_pool(path: &Path) -> Result<(PoolHeader, Vec<PatchRecord>)> {
    let file = File::open(path).map_err(|e| {
        std::io::Error::new(
            e.kind(),
            format!("cannot open pool {}: {e}", path.display()),
        )
    })?;
    Ok(read_pool(BufReader::new(file))?)
}

/// Trailing mean over the last `window` events, skipping missing values.
pub fn smooth(values: &[Option<f64>], window: usize) -> Vec<Option<f64>> {
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            let present: Vec<f64> = values[lo..=i].iter().flatten().copied().collect();
            (!present.is_empty()).then(|| mean(&present))
        })
        .collect()
}

pub const RUN_LOG_HEADER: [&str; 9] = [
    "event",
    "epsilon",
    "cumulative_reward",
    "labelled_count",
    "histogram_entropy",
    "dqn_loss",
    "simulated_mean_iou",
    "wall_ms",
    "target_patches",
];

/// Per-event log at full float precision.
pub fn write_run_log(path: &Path, result: &RunResult) -> Result<()> {
    let mut w = create(path)?;
    w.write_record(RUN_LOG_HEADER).map_err(csv_err)?;
    for r in &result.events {
        w.write_record([
            r.event.to_string(),
            fmt_opt(r.epsilon),
            r.cumulative_reward.to_string(),
            r.labelled_count.to_string(),
            r.histogram_entropy.to_string(),
            fmt_opt(r.dqn_loss),
            fmt_opt(r.simulated_mean_iou),
            fmt_opt(r.wall_ms),
            r.target_patches.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn write_smoothed(path: &Path, result: &RunResult) -> Result<()> {
    let entropy: Vec<Option<f64>> = result
        .events
        .iter()
        .map(|r| Some(r.histogram_entropy))
        .collect();
    let loss: Vec<Option<f64>> = result.events.iter().map(|r| r.dqn_loss).collect();
    let (es, ls) = (
        smooth(&entropy, SMOOTH_WINDOW),
        smooth(&loss, SMOOTH_WINDOW),
    );
    let mut w = create(path)?;
    w.write_record([
        "event",
        "cumulative_reward",
        "target_patches",
        "histogram_entropy",
        "histogram_entropy_smoothed",
        "dqn_loss",
        "dqn_loss_smoothed",
    ])
    .map_err(csv_err)?;
    for (i, r) in result.events.iter().enumerate() {
        w.write_record([
            r.event.to_string(),
            r.cumulative_reward.to_string(),
            r.target_patches.to_string(),
            r.histogram_entropy.to_string(),
            fmt_opt(es[i]),
            fmt_opt(r.dqn_loss),
            fmt_opt(ls[i]),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn write_pretrain(path: &Path, result: &RunResult) -> Result<()> {
    let mut w = create(path)?;
    w.write_record([
        "epoch",
        "event",
        "epsilon",
        "acquired",
        "target_patches",
        "cumulative_reward",
        "dqn_loss",
    ])
    .map_err(csv_err)?;
    for r in &result.pretrain {
        w.write_record([
            r.epoch.to_string(),
            r.event.to_string(),
            r.epsilon.to_string(),
            r.acquired.to_string(),
            r.target_patches.to_string(),
            r.cumulative_reward.to_string(),
            fmt_opt(r.dqn_loss),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Final metrics of one seed, as written to the summary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinalMetrics {
    pub cumulative_reward: f64,
    pub target_patches: f64,
    pub labelled_count: f64,
    pub histogram_entropy: f64,
    /// NaN when IoU simulation is off.
    pub simulated_mean_iou: f64,
}

impl FinalMetrics {
    pub fn of(result: &RunResult) -> Self {
        match result.final_row() {
            Some(r) => Self {
                cumulative_reward: r.cumulative_reward,
                target_patches: r.target_patches as f64,
                labelled_count: r.labelled_count as f64,
                histogram_entropy: r.histogram_entropy,
                simulated_mean_iou: r.simulated_mean_iou.unwrap_or(f64::NAN),
            },
            None => Self {
                cumulative_reward: 0.0,
                target_patches: 0.0,
                labelled_count: result.initial_size as f64,
                histogram_entropy: 0.0,
                simulated_mean_iou: f64::NAN,
            },
        }
    }

    fn values(&self) -> [f64; 5] {
        [
            self.cumulative_reward,
            self.target_patches,
            self.labelled_count,
            self.histogram_entropy,
            self.simulated_mean_iou,
        ]
    }
}

fn write_summary(path: &Path, finals: &[(u64, FinalMetrics)]) -> Result<()> {
    let mut w = create(path)?;
    w.write_record([
        "seed",
        "cumulative_reward",
        "target_patches",
        "labelled_count",
        "histogram_entropy",
        "simulated_mean_iou",
    ])
    .map_err(csv_err)?;
    for (seed, m) in finals {
        let mut row = vec![seed.to_string()];
        row.extend(m.values().map(fmt6));
        w.write_record(&row).map_err(csv_err)?;
    }
    for (label, f) in [("mean", mean as fn(&[f64]) -> f64), ("std", sample_std)] {
        let mut row = vec![label.to_string()];
        for col in 0..5 {
            let xs: Vec<f64> = finals.iter().map(|(_, m)| m.values()[col]).collect();
            row.push(fmt6(f(&xs)));
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn required<'a>(p: &'a Option<PathBuf>, name: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| config(format!("{name} is not set")))
}

/// Output files of `run` for the configured seeds.
pub fn run_outputs(out: &Path, seeds: &[u64]) -> Vec<PathBuf> {
    let mut files = vec![out.join("summary.csv")];
    for s in seeds {
        files.push(out.join(format!("seed_{s}.csv")));
        files.push(out.join("plots").join(format!("seed_{s}_smoothed.csv")));
        files.push(out.join("plots").join(format!("seed_{s}_pretrain.csv")));
    }
    files
}

/// Runs the configured policy over every seed and writes the logs; returns a
/// printable summary.
pub fn cmd_run(cfg: &RunConfig, force: bool) -> Result<String> {
    let pool_path = required(&cfg.run.pool, "run.pool (--pool)")?;
    let out = required(&cfg.run.out, "run.out (--out)")?;
    check_overwrite(&run_outputs(out, &cfg.run.seeds), force)?;
    let (header, records) = load_pool(pool_path)?;
    let engine = cfg.engine(cfg.run.policy, header.n_classes as usize);
    let mut finals = Vec::new();
    let mut report = String::new();
    for &seed in &cfg.run.seeds {
        let result = run_seed(&header, records.clone(), &engine, seed)?;
        write_run_log(&out.join(format!("seed_{seed}.csv")), &result)?;
        let plots = out.join("plots");
        write_smoothed(&plots.join(format!("seed_{seed}_smoothed.csv")), &result)?;
        write_pretrain(&plots.join(format!("seed_{seed}_pretrain.csv")), &result)?;
        let m = FinalMetrics::of(&result);
        writeln!(
            report,
            "seed {seed}: {} target patches, reward {:.3}, {} labelled, entropy {:.4}",
            m.target_patches, m.cumulative_reward, m.labelled_count, m.histogram_entropy
        )
        .expect("string write");
        finals.push((seed, m));
    }
    write_summary(&out.join("summary.csv"), &finals)?;
    writeln!(report, "wrote {}", out.display()).expect("string write");
    Ok(report)
}

/// Generates a synthetic pool and returns a printable summary.
pub fn cmd_synth(cfg: &SynthConfig, out: &Path, force: bool) -> Result<String> {
    cfg.validate()?;
    check_overwrite(&[out.to_path_buf()], force)?;
    let records = generate_records(cfg)?;
    let header = cfg.header();
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut sink = BufWriter::new(File::create(out)?);
    write_pool(&header, &records, &mut sink)?;
    std::io::Write::flush(&mut sink)?;
    let mut report = format!(
        "{} patches, {} classes, capacity {}, entropy column {}\nclass  prevalence  present\n",
        records.len(),
        cfg.n_classes,
        cfg.patch_capacity,
        if cfg.with_entropy { "yes" } else { "no" }
    );
    let n = records.len().max(1) as f64;
    for (c, p) in cfg.prevalences().iter().enumerate() {
        let present = records.iter().filter(|r| r.contains(c)).count() as f64 / n;
        writeln!(report, "{c:>5}  {p:>10.4}  {present:>7.4}").expect("string write");
    }
    writeln!(report, "wrote {}", out.display()).expect("string write");
    Ok(report)
}

/// One row of the comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub policy: PolicyKind,
    pub yields: Vec<f64>,
    pub ious: Vec<f64>,
    /// Welch p-value of the yield against the best policy; `None` for the best.
    pub p_value: Option<f64>,
}

impl CompareRow {
    pub fn significant(&self) -> bool {
        self.p_value.is_some_and(|p| p < SIGNIFICANCE)
    }
}

/// Fills in p-values of each row's yields against the best mean yield.
pub fn welch_against_best(rows: &mut [CompareRow]) -> Result<()> {
    let best = (0..rows.len())
        .max_by(|&a, &b| {
            mean(&rows[a].yields)
                .total_cmp(&mean(&rows[b].yields))
                .then(b.cmp(&a))
        })
        .ok_or_else(|| config("no policies to compare"))?;
    let best_yields = rows[best].yields.clone();
    for (i, row) in rows.iter_mut().enumerate() {
        row.p_value = if i == best {
            None
        } else if best_yields.len() < 2 {
            Some(f64::NAN)
        } else {
            Some(welch_t_test(&best_yields, &row.yields)?.p_value)
        };
    }
    Ok(())
}

fn pm(xs: &[f64]) -> (String, String) {
    if xs.iter().any(|x| x.is_nan()) {
        (String::new(), String::new())
    } else {
        (fmt6(mean(xs)), fmt6(sample_std(xs)))
    }
}

/// Runs each listed policy over the shared seeds; writes `compare.csv` and
/// per-policy curves, and returns the rows plus a printable table.
pub fn cmd_compare(cfg: &RunConfig, force: bool) -> Result<(Vec<CompareRow>, String)> {
    let policies = &cfg.run.policies;
    if policies.len() < 2 {
        return Err(config("compare needs at least two policies (run.policies)"));
    }
    let pool_path = required(&cfg.run.pool, "run.pool (--pool)")?;
    let out = required(&cfg.run.out, "run.out (--out)")?;
    let curve = |i: usize, p: PolicyKind, s: u64| {
        out.join("curves")
            .join(format!("{i}_{p}"))
            .join(format!("seed_{s}.csv"))
    };
    let mut files = vec![out.join("compare.csv")];
    for (i, &p) in policies.iter().enumerate() {
        files.extend(cfg.run.seeds.iter().map(|&s| curve(i, p, s)));
    }
    check_overwrite(&files, force)?;
    let (header, records) = load_pool(pool_path)?;
    let mut rows = Vec::new();
    for (i, &policy) in policies.iter().enumerate() {
        let engine = cfg.engine(policy, header.n_classes as usize);
        let mut row = CompareRow {
            policy,
            yields: Vec::new(),
            ious: Vec::new(),
            p_value: None,
        };
        for &seed in &cfg.run.seeds {
            let result = run_seed(&header, records.clone(), &engine, seed)?;
            write_run_log(&curve(i, policy, seed), &result)?;
            let m = FinalMetrics::of(&result);
            row.yields.push(m.target_patches);
            row.ious.push(m.simulated_mean_iou);
        }
        rows.push(row);
    }
    welch_against_best(&mut rows)?;

    let mut w = create(&out.join("compare.csv"))?;
    w.write_record([
        "policy",
        "yield_mean",
        "yield_std",
        "iou_mean",
        "iou_std",
        "p_value",
        "significant",
    ])
    .map_err(csv_err)?;
    let mut table = format!(
        "{:<10} {:>22} {:>22} {:>10}\n",
        "policy", "target patches", "simulated IoU", "p"
    );
    for row in &rows {
        let (ym, ys) = pm(&row.yields);
        let (im, is) = pm(&row.ious);
        let p = row.p_value.map(fmt6).unwrap_or_default();
        let flag = if row.significant() { "*" } else { "" };
        w.write_record([row.policy.name(), &ym, &ys, &im, &is, &p, flag])
            .map_err(csv_err)?;
        let iou = if im.is_empty() {
            "-".to_string()
        } else {
            format!("{:.4} ± {:.4}", mean(&row.ious), sample_std(&row.ious))
        };
        writeln!(
            table,
            "{:<10} {:>22} {:>22} {:>10}{flag}",
            row.policy.name(),
            format!("{:.1} ± {:.1}", mean(&row.yields), sample_std(&row.yields)),
            iou,
            row.p_value
                .map(|p| format!("{p:.4}"))
                .unwrap_or_else(|| "best".into()),
        )
        .expect("string write");
    }
    w.flush()?;
    Ok((rows, table))
}

/// Runs the self-check suites against a pool fixture.
pub fn cmd_verify(fixture: Option<&Path>) -> Result<(Vec<SuiteReport>, String)> {
    let bytes = match fixture {
        Some(p) => fs::read(p)?,
        None => verify::EMBEDDED_FIXTURE.to_vec(),
    };
    let reports = verify::run_all(&bytes);
    let mut text = String::new();
    let mut total = 0.0;
    for r in &reports {
        total += r.elapsed.as_secs_f64();
        writeln!(
            text,
            "{} {:<16} {} ({:.2} s)",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.detail,
            r.elapsed.as_secs_f64()
        )
        .expect("string write");
    }
    if total > VERIFY_SOFT_LIMIT_SECS {
        writeln!(
            text,
            "warning: suites took {total:.1} s (soft limit {VERIFY_SOFT_LIMIT_SECS} s)"
        )
        .expect("string write");
    }
    Ok((reports, text))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trailing_window() {
        let v = [Some(1.0), None, Some(3.0), Some(5.0)];
        assert_eq!(
            smooth(&v, 2),
            vec![Some(1.0), Some(1.0), Some(3.0), Some(4.0)]
        );
        assert_eq!(smooth(&[None, None], 30), vec![None, None]);
    }

    #[test]
    fn best_row_has_no_p_value() {
        let mut rows = vec![
            CompareRow {
                policy: PolicyKind::Random,
                yields: vec![1.0, 2.0, 3.0],
                ious: vec![],
                p_value: None,
            },
            CompareRow {
                policy: PolicyKind::Misical,
                yields: vec![10.0, 11.0, 12.0],
                ious: vec![],
                p_value: None,
            },
        ];
        welch_against_best(&mut rows).unwrap();
        assert!(rows[1].p_value.is_none());
        assert!(rows[0].significant());
    }
}
