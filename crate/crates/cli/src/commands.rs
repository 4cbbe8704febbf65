//! Subcommand implementations. Each writes its files under the output
//! directory and a short summary to `log`.

use std::io::Write;
use std::path::{Path, PathBuf};

use lqbss_core::likelihood::GradientVariant;
use lqbss_core::model::{Interval, JacobianSignClass};
use lqbss_core::optimizer::{
    reconstruct_batch, score_against_truth, train, TrainReport, TrainStatus,
};
use lqbss_core::oracle::campaign::{
    run_gradient_campaign, run_partials_campaign, run_pointwise_campaign, worst_error,
    GradientCampaignConfig, PointwiseCampaignConfig,
};
use lqbss_core::oracle::{fd_djdw, fd_dsdw, fd_gradient, DerivativeReport, FdConfig};
use lqbss_core::recurrent::stability_at;
use lqbss_core::scores::FlatDensity;
use lqbss_core::{MixingParams, SamplePair, SignalBatch};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ExperimentConfig, ScoreChoice, SourceDistribution};
use crate::error::{CliError, CliResult};
use crate::signal_io::{format_value, read_signal_file, write_signal_file};

/// Share of eligible gradient cases where the legacy form must be clearly worse.
pub const REQUIRED_SEPARATION_SHARE: f64 = 0.95;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::io(path, e)
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    std::fs::write(path, text).map_err(io_err(path))
}

fn say(log: &mut dyn Write, line: String) -> CliResult<()> {
    writeln!(log, "{line}").map_err(|e| CliError::io("<stdout>", e))
}

fn sign_class_name(c: JacobianSignClass) -> &'static str {
    match c {
        JacobianSignClass::AlwaysPositive => "AlwaysPositive",
        JacobianSignClass::AlwaysNegative => "AlwaysNegative",
        JacobianSignClass::MixedSign => "MixedSign",
    }
}

fn variant_name(v: GradientVariant) -> &'static str {
    match v {
        GradientVariant::Corrected => "corrected",
        GradientVariant::Legacy => "legacy",
    }
}

fn join4(w: &MixingParams) -> String {
    w.to_array().map(format_value).join(",")
}

/// Draws `n` samples, channel 1 then channel 2 for each row.
pub fn draw_sources(
    dists: &[SourceDistribution; 2],
    n: usize,
    rng: &mut ChaCha8Rng,
) -> lqbss_core::Result<SignalBatch> {
    let samples = (0..n)
        .map(|_| {
            let a = dists[0].sample(rng);
            let b = dists[1].sample(rng);
            SamplePair::new(a, b)
        })
        .collect();
    SignalBatch::new(samples)
}

pub fn generate_sources(cfg: &ExperimentConfig) -> CliResult<SignalBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok(draw_sources(&cfg.sources, cfg.samples, &mut rng)?)
}

pub fn cmd_generate(cfg: &ExperimentConfig, log: &mut dyn Write) -> CliResult<PathBuf> {
    let batch = generate_sources(cfg)?;
    let path = cfg.output_dir.join("sources.csv");
    write_signal_file(&path, &batch)?;
    say(
        log,
        format!("wrote {} samples to {}", batch.len(), path.display()),
    )?;
    Ok(path)
}

pub fn cmd_mix(
    cfg: &ExperimentConfig,
    input: &Path,
    log: &mut dyn Write,
    warn: &mut dyn Write,
) -> CliResult<JacobianSignClass> {
    let sources = read_signal_file(input)?;
    let mixed = sources.mixed(&cfg.mixing)?;
    let (r1, r2) = sources.bounding_box();
    let class = cfg.mixing.classify_jacobian_sign(r1, r2);
    let path = cfg.output_dir.join("mixtures.csv");
    write_signal_file(&path, &mixed)?;
    say(log, format!("sign_class = {}", sign_class_name(class)))?;
    say(
        log,
        format!("wrote {} samples to {}", mixed.len(), path.display()),
    )?;
    if class == JacobianSignClass::MixedSign {
        writeln!(
            warn,
            "warning: the Jacobian changes sign over the source range; direct separation is ambiguous"
        )
        .map_err(|e| CliError::io("<stderr>", e))?;
    }
    Ok(class)
}

pub fn format_train_report(cfg: &ExperimentConfig, r: &TrainReport) -> String {
    let mut out = String::new();
    let mut kv = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
    kv(
        "status",
        match r.status {
            TrainStatus::Converged => "converged",
            TrainStatus::MaxEpochs => "max_epochs",
            TrainStatus::Diverged => "diverged",
        }
        .into(),
    );
    kv("epochs_run", r.epochs_run.to_string());
    kv("final_params", join4(&r.final_params));
    kv("initial_params", join4(&cfg.optimizer.initial_params));
    kv(
        "gradient_variant",
        variant_name(cfg.optimizer.gradient_variant).into(),
    );
    kv(
        "scores",
        match cfg.optimizer.scores {
            ScoreChoice::Analytic => "analytic",
            ScoreChoice::Kernel => "kernel",
        }
        .into(),
    );
    kv(
        "bandwidth",
        cfg.optimizer
            .bandwidth
            .map_or("auto".into(), |h| h.to_string()),
    );
    kv("learning_rate", cfg.optimizer.learning_rate.to_string());
    kv("seed", r.seed.to_string());
    kv("excluded_samples", r.excluded_samples.to_string());
    kv("fallback_samples", r.fallback_samples.to_string());
    kv("dropped_samples", r.dropped_samples.to_string());
    if let Some(m) = &r.metrics {
        kv(
            "sir_db",
            format!(
                "{},{}",
                format_value(m.sir_db[0]),
                format_value(m.sir_db[1])
            ),
        );
        kv("min_sir_db", format_value(m.min_sir()));
        kv("swapped", m.swapped.to_string());
        kv(
            "scale",
            format!("{},{}", format_value(m.scale[0]), format_value(m.scale[1])),
        );
        kv(
            "offset",
            format!(
                "{},{}",
                format_value(m.offset[0]),
                format_value(m.offset[1])
            ),
        );
    }
    out.push_str("\n[trajectory]\nepoch,likelihood,gradient_norm,l1,l2,q1,q2\n");
    for i in 0..r.epochs_run {
        out.push_str(&format!(
            "{i},{},{},{}\n",
            format_value(r.likelihood_trajectory[i]),
            format_value(r.gradient_norm_trajectory[i]),
            join4(&r.param_trajectory[i])
        ));
    }
    out
}

pub fn cmd_separate(
    cfg: &ExperimentConfig,
    input: &Path,
    truth: Option<&Path>,
    log: &mut dyn Write,
) -> CliResult<TrainReport> {
    let x = read_signal_file(input)?;
    let truth = truth.map(read_signal_file).transpose()?;
    if let Some(t) = &truth {
        if t.len() != x.len() {
            return Err(lqbss_core::Error::LengthMismatch {
                left: x.len(),
                right: t.len(),
            }
            .into());
        }
    }
    let opt = cfg.optimizer_config()?;
    let mut report = train(&x, &opt)?;

    let report_path = cfg.output_dir.join("report.txt");
    if report.status == TrainStatus::Diverged {
        write_text(&report_path, &format_train_report(cfg, &report))?;
        return Err(CliError::Numerical(format!(
            "training diverged after {} epochs; report in {}",
            report.epochs_run,
            report_path.display()
        )));
    }

    let rec = reconstruct_batch(&report.final_params, &x, &opt.recurrence)?;
    if let Some(t) = &truth {
        report.metrics = Some(score_against_truth(
            &report.final_params,
            &x,
            t,
            &opt.recurrence,
        )?);
    }
    let out_path = cfg.output_dir.join("separated.csv");
    write_signal_file(&out_path, &rec.outputs)?;
    write_text(&report_path, &format_train_report(cfg, &report))?;

    say(
        log,
        format!(
            "status = {:?} after {} epochs",
            report.status, report.epochs_run
        ),
    )?;
    say(
        log,
        format!("final_params = {}", join4(&report.final_params)),
    )?;
    if let Some(m) = &report.metrics {
        say(log, format!("min_sir_db = {:.2}", m.min_sir()))?;
    }
    if rec.dropped > 0 {
        say(
            log,
            format!(
                "dropped {} samples that could not be reconstructed",
                rec.dropped
            ),
        )?;
    }
    say(
        log,
        format!("wrote {} and {}", out_path.display(), report_path.display()),
    )?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOutcome {
    pub corrected_ok: bool,
    pub legacy_ok: bool,
    pub report: String,
}

impl GradcheckOutcome {
    pub fn pass(&self) -> bool {
        self.corrected_ok && self.legacy_ok
    }
}

fn describe(r: &DerivativeReport) -> String {
    format!(
        "{} max_rel={:.3e} max_abs_near_zero={:.3e}",
        if r.pass { "pass" } else { "fail" },
        r.max_relative_error,
        r.max_absolute_error_near_zero
    )
}

pub fn run_gradcheck(cfg: &ExperimentConfig) -> CliResult<GradcheckOutcome> {
    let g = &cfg.gradcheck;
    let grad_fd = FdConfig::new(g.step, g.tolerance)?;
    let point_fd = FdConfig::new(g.step, g.pointwise_tolerance)?;
    let mut out = String::new();
    let mut kv = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));

    kv("step", g.step.to_string());
    kv("gradient_tolerance", g.tolerance.to_string());
    kv("pointwise_tolerance", g.pointwise_tolerance.to_string());
    kv("seed", cfg.seed.to_string());
    kv("linear_only", g.linear_only.to_string());

    // Worked example at the reference parameters.
    let w = crate::config::REFERENCE_MIXING;
    let s = SamplePair::new(0.5, 0.5);
    let x = w.mix(s);
    let hint = SamplePair::new(0.4, 0.4);
    let ex_dsdw = fd_dsdw(&w, x, hint, &point_fd)?;
    let ex_djdw = fd_djdw(&w, x, hint, &point_fd)?;
    let single = SignalBatch::new(vec![s])?;
    let ex_grad = fd_gradient(
        &w,
        &single.mixed(&w)?,
        &single,
        &FlatDensity,
        &FlatDensity,
        &grad_fd,
    )?;
    kv("example.dsdw", describe(&ex_dsdw));
    kv("example.djdw_total", describe(&ex_djdw.total));
    kv("example.djdw_explicit", describe(&ex_djdw.explicit));
    kv("example.gradient_corrected", describe(&ex_grad.corrected));
    kv("example.gradient_legacy", describe(&ex_grad.legacy));

    let gradient = run_gradient_campaign(&GradientCampaignConfig {
        cases: g.cases,
        samples_per_case: g.samples,
        seed: cfg.seed,
        fd: grad_fd,
        linear_only: g.linear_only,
    })?;
    let pointwise = run_pointwise_campaign(&PointwiseCampaignConfig {
        cases: g.pointwise_cases,
        seed: cfg.seed.wrapping_add(1),
        fd: point_fd,
        linear_only: g.linear_only,
    })?;
    let partials = run_partials_campaign(g.pointwise_cases, cfg.seed.wrapping_add(2), &point_fd)?;
    let partial_passes = partials.iter().filter(|c| c.all_pass()).count();

    let eligible = gradient.separation_eligible();
    let separated = gradient.separated_where_expected();
    kv("gradient.cases", gradient.cases.len().to_string());
    kv(
        "gradient.corrected_passes",
        gradient.corrected_passes().to_string(),
    );
    kv(
        "gradient.max_corrected_error",
        format!("{:.3e}", gradient.max_corrected_error()),
    );
    kv("gradient.separation_eligible", eligible.to_string());
    kv("gradient.legacy_separated", separated.to_string());
    kv("pointwise.cases", pointwise.cases.len().to_string());
    kv("pointwise.dsdw_passes", pointwise.dsdw_passes().to_string());
    kv(
        "pointwise.djdw_total_passes",
        pointwise.djdw_total_passes().to_string(),
    );
    kv(
        "pointwise.explicit_expected_failures",
        pointwise.explicit_expected_failures().to_string(),
    );
    kv(
        "pointwise.explicit_failed_where_expected",
        pointwise.explicit_failed_where_expected().to_string(),
    );
    kv("partials.cases", partials.len().to_string());
    kv("partials.passes", partial_passes.to_string());

    let corrected_ok = ex_dsdw.pass
        && ex_djdw.total.pass
        && ex_grad.corrected.pass
        && gradient.corrected_passes() == gradient.cases.len()
        && pointwise.dsdw_passes() == pointwise.cases.len()
        && pointwise.djdw_total_passes() == pointwise.cases.len()
        && partial_passes == partials.len();
    let legacy_ok = g.linear_only
        || (!ex_djdw.explicit.pass
            && !ex_grad.legacy.pass
            && separated as f64 >= REQUIRED_SEPARATION_SHARE * eligible as f64
            && pointwise.explicit_failed_where_expected()
                == pointwise.explicit_expected_failures());
    kv(
        "verdict.corrected",
        if corrected_ok { "pass" } else { "fail" }.into(),
    );
    kv(
        "verdict.legacy_fails_where_expected",
        if g.linear_only {
            "waived".into()
        } else if legacy_ok {
            "yes".into()
        } else {
            "no".to_string()
        },
    );
    kv(
        "verdict",
        if corrected_ok && legacy_ok {
            "pass"
        } else {
            "fail"
        }
        .into(),
    );

    out.push_str("\n[gradient_cases]\ncase,l1,l2,q1,q2,corrected_error,legacy_error,corrected_pass,separation_expected,separated\n");
    for (i, c) in gradient.cases.iter().enumerate() {
        let (ce, le) = match &c.outcome {
            Ok(chk) => (
                format!("{:.3e}", worst_error(&chk.corrected)),
                format!("{:.3e}", worst_error(&chk.legacy)),
            ),
            Err(e) => (format!("error: {e}"), String::new()),
        };
        out.push_str(&format!(
            "{i},{},{ce},{le},{},{},{}\n",
            join4(&c.params),
            c.corrected_pass(),
            c.separation_expected,
            c.separated()
        ));
    }
    Ok(GradcheckOutcome {
        corrected_ok,
        legacy_ok,
        report: out,
    })
}

pub fn cmd_gradcheck(cfg: &ExperimentConfig, log: &mut dyn Write) -> CliResult<GradcheckOutcome> {
    let outcome = run_gradcheck(cfg)?;
    let path = cfg.output_dir.join("gradcheck.txt");
    write_text(&path, &outcome.report)?;
    say(
        log,
        format!(
            "corrected derivatives: {}; legacy failure where expected: {}",
            if outcome.corrected_ok { "pass" } else { "FAIL" },
            if cfg.gradcheck.linear_only {
                "waived"
            } else if outcome.legacy_ok {
                "yes"
            } else {
                "NO"
            }
        ),
    )?;
    say(log, format!("wrote {}", path.display()))?;
    if !outcome.pass() {
        return Err(CliError::Numerical(format!(
            "gradient check failed; see {}",
            path.display()
        )));
    }
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FigureSummary {
    pub narrow_sign_class: JacobianSignClass,
    pub wide_sign_class: JacobianSignClass,
    /// Largest deviation of structure-2 outputs from the sources on the narrow scenario.
    pub narrow_structure2_error: f64,
    /// For each structure on the wide scenario: rows nearest the true sources
    /// and rows nearest the permuted solution.
    pub wide_branch_counts: [(usize, usize); 2],
    pub locus_points: usize,
    pub locus_max_abs_jacobian: f64,
    pub files: Vec<PathBuf>,
}

struct Scenario {
    sources: SignalBatch,
    mixtures: SignalBatch,
    structure1: SignalBatch,
    structure2: SignalBatch,
}

fn build_scenario(
    w: &MixingParams,
    half_width: f64,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> CliResult<Scenario> {
    let d = SourceDistribution::Uniform {
        lo: -half_width,
        hi: half_width,
    };
    let sources = draw_sources(&[d, d], n, rng)?;
    let mixtures = sources.mixed(w)?;
    let mut plus = Vec::with_capacity(n);
    let mut minus = Vec::with_capacity(n);
    for xi in &mixtures {
        let c = w.direct_inverse(*xi)?;
        plus.push(c.root_plus);
        minus.push(c.root_minus);
    }
    Ok(Scenario {
        sources,
        mixtures,
        structure1: SignalBatch::new(plus)?,
        structure2: SignalBatch::new(minus)?,
    })
}

/// Points of the `J = 0` line inside the square `[-r, r]²`.
pub fn jacobian_zero_locus(w: &MixingParams, r: f64, points: usize) -> Vec<SamplePair> {
    let a1 = w.jacobian_slope_s1();
    let a2 = w.jacobian_slope_s2();
    let k = 1.0 - w.l1 * w.l2;
    // a1*s1 + a2*s2 = k; parametrize by the coordinate with the smaller slope.
    let (free_is_first, a_free, a_dep) = if a2.abs() >= a1.abs() {
        (true, a1, a2)
    } else {
        (false, a2, a1)
    };
    if a_dep == 0.0 {
        return Vec::new();
    }
    let dep = |t: f64| (k - a_free * t) / a_dep;
    // Range of the free coordinate keeping the dependent one inside [-r, r].
    let (e1, e2) = if a_free == 0.0 {
        if dep(0.0).abs() > r {
            return Vec::new();
        }
        (-r, r)
    } else {
        let t1 = (k - a_dep * r) / a_free;
        let t2 = (k + a_dep * r) / a_free;
        (t1.min(t2), t1.max(t2))
    };
    let lo = e1.max(-r);
    let hi = e2.min(r);
    if !(lo < hi) {
        return Vec::new();
    }
    (0..points)
        .map(|i| {
            let t = lo + (hi - lo) * i as f64 / (points - 1) as f64;
            if free_is_first {
                SamplePair::new(t, dep(t))
            } else {
                SamplePair::new(dep(t), t)
            }
        })
        .collect()
}

pub fn run_figures(cfg: &ExperimentConfig) -> CliResult<FigureSummary> {
    let w = cfg.mixing;
    let dir = cfg.output_dir.join("figures");
    let mut files = Vec::new();
    let mut emit = |name: &str, batch: &SignalBatch| -> CliResult<()> {
        let path = dir.join(name);
        write_signal_file(&path, batch)?;
        files.push(path);
        Ok(())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(0);
    let narrow = build_scenario(&w, 0.5, cfg.figure_samples, &mut rng)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let wide = build_scenario(&w, 2.0, cfg.figure_samples, &mut rng)?;

    for (prefix, sc) in [("narrow", &narrow), ("wide", &wide)] {
        emit(&format!("{prefix}_sources.csv"), &sc.sources)?;
        emit(&format!("{prefix}_mixtures.csv"), &sc.mixtures)?;
        emit(&format!("{prefix}_structure1.csv"), &sc.structure1)?;
        emit(&format!("{prefix}_structure2.csv"), &sc.structure2)?;
    }

    let locus = jacobian_zero_locus(&w, 2.0, cfg.locus_points);
    let locus_max_abs_jacobian = locus
        .iter()
        .map(|s| w.jacobian(*s).abs())
        .fold(0.0, f64::max);
    if !locus.is_empty() {
        let src = SignalBatch::new(locus.clone())?;
        emit("wide_locus_sources.csv", &src)?;
        emit("wide_locus_mixtures.csv", &src.mixed(&w)?)?;
    }

    let narrow_structure2_error = narrow
        .structure2
        .iter()
        .zip(&narrow.sources)
        .map(|(y, s)| y.max_abs_diff(*s))
        .fold(0.0, f64::max);

    let count = |outputs: &SignalBatch| -> (usize, usize) {
        let mut id = 0;
        let mut perm = 0;
        for (y, s) in outputs.iter().zip(&wide.sources) {
            match w.permuted_solution(*s) {
                Ok(p) if y.distance(p) < y.distance(*s) => perm += 1,
                _ => id += 1,
            }
        }
        (id, perm)
    };
    let square = |r: f64| Interval::new(-r, r);

    Ok(FigureSummary {
        narrow_sign_class: w.classify_jacobian_sign(square(0.5)?, square(0.5)?),
        wide_sign_class: w.classify_jacobian_sign(square(2.0)?, square(2.0)?),
        narrow_structure2_error,
        wide_branch_counts: [count(&wide.structure1), count(&wide.structure2)],
        locus_points: locus.len(),
        locus_max_abs_jacobian,
        files,
    })
}

pub fn cmd_figures(cfg: &ExperimentConfig, log: &mut dyn Write) -> CliResult<FigureSummary> {
    let s = run_figures(cfg)?;
    say(
        log,
        format!(
            "narrow.sign_class = {}",
            sign_class_name(s.narrow_sign_class)
        ),
    )?;
    say(
        log,
        format!(
            "narrow.structure2_max_error = {:.3e}",
            s.narrow_structure2_error
        ),
    )?;
    say(
        log,
        format!("wide.sign_class = {}", sign_class_name(s.wide_sign_class)),
    )?;
    for (i, (id, perm)) in s.wide_branch_counts.iter().enumerate() {
        say(
            log,
            format!(
                "wide.structure{}.branches = identity:{id} permuted:{perm}",
                i + 1
            ),
        )?;
    }
    say(
        log,
        format!(
            "wide.locus_points = {} (max |J| = {:.3e})",
            s.locus_points, s.locus_max_abs_jacobian
        ),
    )?;
    say(log, format!("wrote {} files", s.files.len()))?;
    Ok(s)
}

pub fn cmd_stability(cfg: &ExperimentConfig, log: &mut dyn Write) -> CliResult<PathBuf> {
    let n = cfg.stability_grid;
    let r = cfg.stability_range;
    let path = cfg.output_dir.join("stability.csv");
    let mut text = String::from("s1,s2,lambda_min,lambda_max,stable\n");
    let mut stable = 0;
    for i in 0..n {
        for j in 0..n {
            let s1 = -r + 2.0 * r * i as f64 / (n - 1) as f64;
            let s2 = -r + 2.0 * r * j as f64 / (n - 1) as f64;
            let rep = stability_at(&cfg.mixing, SamplePair::new(s1, s2));
            if rep.locally_stable {
                stable += 1;
            }
            let [lo, hi] = rep.eigenvalue_magnitudes;
            text.push_str(&format!(
                "{},{},{},{},{}\n",
                format_value(s1),
                format_value(s2),
                format_value(lo),
                format_value(hi),
                rep.locally_stable
            ));
        }
    }
    write_text(&path, &text)?;
    say(log, format!("stable points = {stable}/{}", n * n))?;
    say(log, format!("wrote {}", path.display()))?;
    Ok(path)
}
