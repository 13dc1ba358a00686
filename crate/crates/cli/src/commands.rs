//! Subcommand implementations. Each builds a [`Report`]; `main` writes it
//! and maps the outcome to an exit code.

use std::path::Path;

use anyhow::{Context, Result};
use clap::ValueEnum;
use nalgebra::DMatrix;
use rand_chacha::rand_core::RngCore;
use serde_json::{json, Value};
use ymorse::benchlib::{sphere_z2, torus_product_example};
use ymorse::flow::{decay_fit, integrate, DecayWindow, Trajectory};
use ymorse::morse_bott::{cascade_homology_with, survey_critical, HomologyReport, ManifoldView, Survey};
use ymorse::objective::{gradient_audit, metric_norm, spectrum, Objective};
use ymorse::perturbation::is_admissible;
use ymorse::ym::{apply_gauge, GaugeTransform};
use ymorse::{Connection, EnergyBackend, Group, Lattice, OrientedCellComplex, PerturbationBank, YangMills};

use crate::config::{Builder, RunConfig};
use crate::report::{write_json, Check, Report};
use crate::seeds::{substream, Stream};

/// Why a command stopped before producing its checks.
#[derive(Debug)]
pub enum Stop {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
    Refused(String),
}

pub type Outcome = std::result::Result<Report, Box<(Report, Stop)>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Example {
    S2,
    T2,
    U1Torus,
    Su2Genus1,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StartSpec {
    Identity,
    Random,
    File(std::path::PathBuf),
}

impl std::str::FromStr for StartSpec {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(match s {
            "identity" => StartSpec::Identity,
            "random" => StartSpec::Random,
            path => StartSpec::File(path.into()),
        })
    }
}

/// Gradient norm accepted at a refined critical representative.
const CRITICAL_GRADIENT_TOL: f64 = 1e-8;
const FD_STEP: f64 = 1e-5;
const FD_GRADIENT_TOL: f64 = 1e-6;
const FD_HESSIAN_TOL: f64 = 1e-5;
const GAUGE_DRIFT_TOL: f64 = 1e-12;
const EQUIVARIANCE_TOL: f64 = 1e-9;
const DECAY_TOL: f64 = 0.1;
const DECAY_CORRELATION: f64 = 0.99;

fn stop(report: Report, s: Stop) -> Outcome {
    Err(Box::new((report, s)))
}

fn load_bank(cfg: &RunConfig, lattice: &Lattice) -> std::result::Result<Option<PerturbationBank>, Stop> {
    let Some(path) = &cfg.lattice.perturbation_bank else { return Ok(None) };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading bank {}", path.display())).map_err(Stop::Config)?;
    let bank = PerturbationBank::from_json(&text, lattice).with_context(|| format!("parsing bank {}", path.display())).map_err(Stop::Config)?;
    Ok(Some(bank))
}

fn objective(cfg: &RunConfig) -> std::result::Result<YangMills, Stop> {
    let lattice = cfg.lattice().map_err(Stop::Config)?;
    let bank = load_bank(cfg, &lattice)?;
    let obj = YangMills::new(lattice, cfg.lattice.backend);
    Ok(match bank {
        Some(b) => obj.with_bank(b),
        None => obj,
    })
}

fn survey_json<O: Objective>(obj: &O, s: &Survey<O::Point>) -> (Value, Vec<Check>) {
    let metric = obj.metric();
    let mut checks = Vec::new();
    let manifolds: Vec<Value> = s
        .manifolds
        .iter()
        .map(|m| {
            let grad = m
                .representatives
                .iter()
                .map(|p| obj.gradient(p).map_or(f64::INFINITY, |g| metric_norm(&metric, &g)))
                .fold(0.0, f64::max);
            checks.push(Check::at_most(format!("manifold {} gradient norm", m.id), grad, CRITICAL_GRADIENT_TOL));
            json!({
                "id": m.id,
                "energy": m.energy,
                "fingerprint": m.fingerprint,
                "dimension": m.dimension,
                "kernel_dim": m.kernel_dim,
                "index": m.index,
                "orbit_dim": m.orbit_dim,
                "stabilizer_dim": m.stabilizer_dim,
                "normal_spectrum": m.normal_spectrum,
                "morse_bott": m.morse_bott,
                "representatives": m.representatives,
            })
        })
        .collect();
    (json!({ "starts": s.starts, "outliers": s.outliers.len(), "manifolds": manifolds }), checks)
}

pub fn survey(cfg: &RunConfig) -> Outcome {
    let mut report = Report::new("survey", cfg.echo());
    let obj = match objective(cfg) {
        Ok(o) => o,
        Err(s) => return stop(report, s),
    };
    let opts = cfg.homology_options();
    let s = survey_critical(&obj, &opts.survey, &opts.cascade.controller, &mut substream(cfg.seeds.root, Stream::Survey));
    let (results, checks) = survey_json(&obj, &s);
    report.extend(checks);
    report.results = results;
    Ok(report)
}

fn flow_checks<O: Objective>(obj: &O, t: &Trajectory<O::Point>, cfg: &RunConfig, label: &str) -> (Vec<Check>, Value) {
    let ctl = cfg.flow_controller();
    let mut checks = vec![
        Check::at_most(format!("{label} energy increase"), t.max_energy_increase(), ctl.energy_slack),
        Check::at_most(format!("{label} final gradient norm"), t.final_gradient_norm(), ctl.tol_g),
    ];
    let decay = spectrum(obj, t.last()).ok().and_then(|sp| decay_fit(t, &sp.values, DecayWindow::default()).ok());
    if let Some(fit) = &decay {
        let rel = ((fit.rate - fit.spectral_gap) / fit.spectral_gap).abs();
        // near-kernel fits are reported without a verdict
        if !fit.near_kernel {
            checks.push(Check::at_most(format!("{label} decay rate deviation"), rel, DECAY_TOL));
            checks.push(Check { passed: fit.correlation >= DECAY_CORRELATION, ..Check::near(format!("{label} decay fit correlation"), fit.correlation, 1.0, 1.0 - DECAY_CORRELATION) });
        }
    }
    (checks, serde_json::to_value(&decay).expect("fit serializes"))
}

pub fn flow(cfg: &RunConfig, start: &StartSpec, count: usize) -> Outcome {
    let mut report = Report::new("flow", cfg.echo());
    let obj = match objective(cfg) {
        Ok(o) => o,
        Err(s) => return stop(report, s),
    };
    let starts: Vec<Connection> = match start {
        StartSpec::Identity => vec![obj.base_point(); count.max(1)],
        StartSpec::Random => {
            let mut rng = substream(cfg.seeds.root, Stream::Shooting);
            (0..count.max(1)).map(|_| obj.random_point(&mut rng)).collect()
        }
        StartSpec::File(path) => {
            let conn = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))
                .and_then(|s| Ok(Connection::from_json(&s, &obj.lattice.complex)?));
            match conn {
                Ok(c) => vec![c],
                Err(e) => return stop(report, Stop::Config(e)),
            }
        }
    };
    let ctl = cfg.flow_controller();
    let dir = cfg.output.dir.join("trajectories");
    let mut runs = Vec::new();
    for (i, s) in starts.iter().enumerate() {
        let label = format!("flow-{i:03}");
        let t = match integrate(&obj, s, &ctl) {
            Ok(t) => t,
            Err(e) => return stop(report, Stop::Runtime(anyhow::Error::new(e).context(label))),
        };
        let (checks, decay) = flow_checks(&obj, &t, cfg, &label);
        let mut sidecar = t.summary_json();
        sidecar["decay_fit"] = decay;
        sidecar["checks"] = serde_json::to_value(&checks).expect("checks serialize");
        if let Err(e) = write_trajectory(&dir, &label, &t, &sidecar) {
            return stop(report, Stop::Runtime(e));
        }
        runs.push(json!({ "label": label, "status": t.status, "samples": t.len(), "final_energy": t.final_energy() }));
        report.extend(checks);
    }
    report.results = json!({ "trajectories": runs });
    Ok(report)
}

fn write_trajectory<P: serde::Serialize>(dir: &Path, label: &str, t: &Trajectory<P>, sidecar: &Value) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    std::fs::write(dir.join(format!("{label}.csv")), t.to_csv())?;
    write_json(&dir.join(format!("{label}.json")), sidecar)
}

/// Refuses banks whose supports come within `admissibility_eps` of the
/// unperturbed critical set.
fn admissibility_gate(cfg: &RunConfig, obj: &YangMills, report: &mut Report) -> std::result::Result<(), Stop> {
    if obj.bank.is_empty() {
        return Ok(());
    }
    let plain = YangMills::new(obj.lattice.clone(), obj.backend);
    let opts = cfg.homology_options();
    let s = survey_critical(&plain, &opts.survey, &opts.cascade.controller, &mut substream(cfg.seeds.root, Stream::Survey));
    let mut rng = substream(cfg.seeds.root, Stream::Bank);
    let critical: Vec<Connection> = s
        .manifolds
        .iter()
        .flat_map(|m| ManifoldView::new(&plain, m.kernel_dim).sample_points(&m.representatives, &m.fingerprint, 150, &mut rng))
        .collect();
    let eps = cfg.lattice.admissibility_eps;
    let ok = is_admissible(&obj.lattice, &obj.bank, &critical, eps);
    let nearest = obj
        .bank
        .terms
        .iter()
        .map(|t| {
            let d = critical.iter().map(|x| t.perturbation.slice_distance(&obj.lattice, x)).fold(f64::INFINITY, f64::min);
            d - t.perturbation.support_radius()
        })
        .fold(f64::INFINITY, f64::min);
    report.push(Check { passed: ok, ..Check::at_most("bank clearance from critical set", -nearest, -eps) });
    report.results = json!({ "bank_norm": obj.bank.norm(), "critical_samples": critical.len(), "clearance": nearest });
    if ok {
        Ok(())
    } else {
        Err(Stop::Refused(format!(
            "perturbation bank is not admissible: a support comes within {nearest:.3e} of the critical set (required clearance {eps:.3e})"
        )))
    }
}

fn homology_json<O: Objective>(r: &HomologyReport<O::Point>) -> Value {
    let counts: Vec<Value> = r.counts.iter().map(|c| json!({ "from": c.from, "to": c.to, "parity": c.parity, "method": c.method })).collect();
    json!({
        "manifolds": r.survey.manifolds.iter().map(|m| json!({
            "id": m.id, "energy": m.energy, "kernel_dim": m.kernel_dim, "index": m.index, "morse_bott": m.morse_bott.passed,
        })).collect::<Vec<_>>(),
        "h_attempts": r.morse.iter().map(|m| m.attempts).collect::<Vec<_>>(),
        "generators": r.complex.generators,
        "counts": counts,
        "betti": r.betti,
        "partial": r.complex.partial,
        "excluded_manifolds": r.complex.excluded_manifolds,
    })
}

fn run_homology<O: Objective>(obj: &O, cfg: &RunConfig) -> Result<HomologyReport<O::Point>> {
    let opts = cfg.homology_options();
    let mut survey_rng = substream(cfg.seeds.root, Stream::Survey);
    let mut h_rng = substream(cfg.seeds.root, Stream::HChoice);
    Ok(cascade_homology_with(obj, &opts, &mut survey_rng, &mut h_rng)?)
}

/// Runs the pipeline, writes `complex.json` and adds the chain checks.
fn homology_into<O: Objective>(obj: &O, cfg: &RunConfig, report: &mut Report, reference: Option<&[usize]>) -> Result<Value> {
    let r = run_homology(obj, cfg)?;
    write_json(&cfg.output.dir.join("complex.json"), &r.complex.to_json())?;
    report.push(Check::flag(format!("{} boundary squares to zero", obj.name()), r.verified));
    if let Some(expected) = reference {
        report.push(Check::exact(format!("{} betti numbers", obj.name()), &r.betti, &Some(expected.to_vec())));
    }
    Ok(homology_json::<O>(&r))
}

pub fn homology(cfg: &RunConfig) -> Outcome {
    let mut report = Report::new("homology", cfg.echo());
    let obj = match objective(cfg) {
        Ok(o) => o,
        Err(s) => return stop(report, s),
    };
    if let Err(s) = admissibility_gate(cfg, &obj, &mut report) {
        return stop(report, s);
    }
    let gate = std::mem::take(&mut report.results);
    match homology_into(&obj, cfg, &mut report, None) {
        Ok(mut v) => {
            if !gate.is_null() {
                v["admissibility"] = gate;
            }
            report.results = v;
            Ok(report)
        }
        Err(e) => stop(report, Stop::Runtime(e)),
    }
}

/// Homology with known Z/2 answers for the lattices the engine certifies.
fn reference_betti(cfg: &RunConfig) -> Option<&'static [usize]> {
    let c = &cfg.complex;
    match (c.builder, c.n, c.m, cfg.lattice.group, cfg.lattice.perturbation_bank.is_none()) {
        // flat connections and the pi-level are both 2-tori; total H_*(T^3)
        (Builder::TorusGrid, 2, 1, Group::U1, true) => Some(&[1, 3, 3, 1]),
        _ => None,
    }
}

fn near_identity(obj: &YangMills, scale: f64, rng: &mut dyn RngCore) -> Connection {
    let l = &obj.lattice;
    let mut v = l.zero_field();
    for &e in l.free_edges() {
        v.values[e] = l.group.random_algebra(rng, scale);
    }
    l.retract(&Connection::identity(l.group, l.complex.num_edges()), &v)
}

/// Central differences of the energy and of the metric-weighted gradient
/// along coordinate directions; returns the worst relative errors.
fn derivative_suite(obj: &YangMills, rng: &mut dyn RngCore, samples: usize) -> (f64, f64) {
    let (mut worst_g, mut worst_h) = (0.0_f64, 0.0_f64);
    let w = obj.metric();
    let n = obj.ambient_dim();
    let mut tested = 0;
    while tested < samples {
        let p = match obj.backend {
            EnergyBackend::Wilson => obj.random_point(rng),
            EnergyBackend::LogNorm => near_identity(obj, 0.4, rng),
        };
        let (Ok(g), Ok(hess)) = (obj.gradient(&p), obj.hessian_matrix(&p)) else { continue };
        tested += 1;
        let mut fd_h = DMatrix::zeros(n, n);
        let mut ok = true;
        for j in 0..n {
            let mut v = nalgebra::DVector::zeros(n);
            v[j] = FD_STEP;
            let (pp, pm) = (obj.retract(&p, &v), obj.retract(&p, &-&v));
            let (Ok(ep), Ok(em), Ok(gp), Ok(gm)) = (obj.value(&pp), obj.value(&pm), obj.gradient(&pp), obj.gradient(&pm)) else {
                ok = false;
                break;
            };
            let fd = (ep - em) / (2.0 * FD_STEP);
            let an = g[j] * w[j];
            worst_g = worst_g.max((fd - an).abs() / an.abs().max(1.0));
            fd_h.set_column(j, &((gp.component_mul(&w) - gm.component_mul(&w)) / (2.0 * FD_STEP)));
        }
        if ok {
            let fd_h = (&fd_h + fd_h.transpose()) * 0.5;
            worst_h = worst_h.max((&fd_h - &hess).amax() / hess.amax().max(1.0));
        }
    }
    (worst_g, worst_h)
}

/// Energy drift under random gauge transformations and gradient
/// equivariance under constant conjugation.
fn gauge_suite(obj: &YangMills, rng: &mut dyn RngCore, samples: usize) -> (f64, f64) {
    let l = &obj.lattice;
    let (mut drift, mut equiv) = (0.0_f64, 0.0_f64);
    for _ in 0..samples {
        let c = obj.random_point(rng);
        let gauge = GaugeTransform { vertices: (0..l.complex.num_vertices).map(|_| l.group.haar(rng)).collect() };
        let moved = apply_gauge(&l.complex, &c, &gauge);
        if let (Ok(e0), Ok(e1)) = (obj.energy(&c), obj.energy(&moved)) {
            drift = drift.max((e0 - e1).abs() / (1.0 + e0.abs()));
        }
        let k = l.group.haar(rng);
        let conj = apply_gauge(&l.complex, &c, &GaugeTransform::constant(l.complex.num_vertices, k));
        if let (Ok(g0), Ok(g1)) = (obj.gradient_field(&c), obj.gradient_field(&conj)) {
            for e in 0..g0.values.len() {
                equiv = equiv.max(k.ad(&g0.values[e]).sub(&g1.values[e]).norm());
            }
        }
    }
    (drift, equiv)
}

pub fn verify(cfg: &RunConfig) -> Outcome {
    let mut report = Report::new("verify", cfg.echo());
    let obj = match objective(cfg) {
        Ok(o) => o,
        Err(s) => return stop(report, s),
    };
    let mut rng = substream(cfg.seeds.root, Stream::Shooting);

    let (g_err, h_err) = derivative_suite(&obj, &mut rng, 20);
    report.push(Check::at_most("gradient finite-difference relative error", g_err, FD_GRADIENT_TOL));
    report.push(Check::at_most("hessian finite-difference relative error", h_err, FD_HESSIAN_TOL));
    let audit = (0..5)
        .map(|_| {
            let p = obj.random_point(&mut rng);
            gradient_audit(&obj, &p, &mut rng, 4, FD_STEP).unwrap_or(f64::INFINITY)
        })
        .fold(0.0, f64::max);
    report.push(Check::at_most("random-direction gradient audit", audit, FD_GRADIENT_TOL));

    let (drift, equiv) = gauge_suite(&obj, &mut rng, 100);
    report.push(Check::at_most("gauge energy drift / (1+|E|)", drift, GAUGE_DRIFT_TOL));
    report.push(Check::at_most("gradient conjugation equivariance", equiv, EQUIVARIANCE_TOL));

    let ctl = cfg.flow_controller();
    let mut decay = Vec::new();
    for i in 0..5 {
        let start = obj.random_point(&mut rng);
        match integrate(&obj, &start, &ctl) {
            Ok(t) => {
                let (checks, fit) = flow_checks(&obj, &t, cfg, &format!("verify flow {i}"));
                report.extend(checks);
                decay.push(fit);
            }
            Err(e) => return stop(report, Stop::Runtime(anyhow::Error::new(e))),
        }
    }

    let lattice_homology = match homology_into(&obj, cfg, &mut report, reference_betti(cfg)) {
        Ok(v) => v,
        Err(e) => return stop(report, Stop::Runtime(e)),
    };

    let mut benchmarks = serde_json::Map::new();
    for (name, bench, expected) in [("s2", sphere_z2(), [1, 0, 1]), ("t2", torus_product_example(), [1, 2, 1])] {
        let r = match run_homology(&bench, cfg) {
            Ok(r) => r,
            Err(e) => return stop(report, Stop::Runtime(e.context(name))),
        };
        report.push(Check::flag(format!("{name} boundary squares to zero"), r.verified));
        report.push(Check::exact(format!("{name} betti numbers"), &r.betti, &Some(expected.to_vec())));
        benchmarks.insert(name.into(), json!({ "betti": r.betti }));
    }
    report.results = json!({ "decay_fits": decay, "homology": lattice_homology, "benchmarks": benchmarks });
    Ok(report)
}

pub fn example(cfg: &RunConfig, which: Example) -> Outcome {
    let name = which.to_possible_value().expect("named variant").get_name().to_string();
    let mut report = Report::new(format!("example {name}"), cfg.echo());
    let result = match which {
        Example::S2 => homology_into(&sphere_z2(), cfg, &mut report, Some(&[1, 0, 1])),
        Example::T2 => homology_into(&torus_product_example(), cfg, &mut report, Some(&[1, 2, 1])),
        Example::U1Torus => {
            let l = Lattice::new(OrientedCellComplex::torus_grid(2, 1).expect("valid grid"), Group::U1).expect("valid lattice");
            homology_into(&YangMills::new(l, EnergyBackend::Wilson), cfg, &mut report, Some(&[1, 3, 3, 1]))
        }
        Example::Su2Genus1 => {
            let l = Lattice::new(OrientedCellComplex::minimal_genus(1).expect("valid complex"), Group::Su2).expect("valid lattice");
            homology_into(&YangMills::new(l, EnergyBackend::Wilson), cfg, &mut report, None).inspect(|v| {
                let flagged = v["partial"] == json!(true) && v["excluded_manifolds"].as_array().is_some_and(|a| !a.is_empty());
                report.push(Check::flag("singular minimum flagged and excluded", flagged));
            })
        }
    };
    match result {
        Ok(v) => {
            report.results = v;
            Ok(report)
        }
        Err(e) => stop(report, Stop::Runtime(e)),
    }
}
