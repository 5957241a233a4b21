//! Executes the checks of a config against the built system and
//! produces one terminal entry per check.

use std::time::Instant;

use serde_json::{json, Value};

use feller_core::coupling::{
    chain_decomposition, coupling_bound_check, sigma_schedule, telescoping_decomposition,
};
use feller_core::criteria::{self, CriterionReport, Verdict};
use feller_core::error::CoreError;
use feller_core::geometry::Point;
use feller_core::measure::{prune, FiniteMeasure};
use feller_core::rng::SeedKey;
use feller_core::semigroup::{
    cesaro_tv_residual, chain_cesaro, composed_cesaro_vertex_gap, evolve_particles, PrunePolicy,
    RecordPolicy, Start,
};
use feller_core::system::{
    chain_stationary, check_avg_contraction, check_flow_expansion, check_moduli_pair,
    check_prob_lipschitz, check_spectral_gap_condition, DiscreteIFS, Dynamics, Modulus,
    ModulusPair,
};
use feller_core::transport::fm_distance;

use crate::config::{BuiltSystem, CheckConfig, ExperimentConfig, ModuliConfig, ProbeMode};

/// Errors that abort the whole run, with their exit codes.
#[derive(Debug)]
pub enum RunError {
    /// Exit 2: configuration or schema problem, with a location.
    Config(String),
    /// Exit 3: a resource cap was hit, naming the check.
    Resource(String),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::Resource(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            RunError::Config(m) | RunError::Resource(m) => m,
        }
    }
}

#[derive(Debug, serde::Serialize)]
pub struct CheckEntry {
    pub index: usize,
    pub name: String,
    /// Terminal status: ok | supported | refuted | inconclusive | failed.
    pub status: String,
    pub result: Value,
}

fn point(coords: &[f64]) -> Result<Point, CoreError> {
    Point::new(coords.to_vec())
}

fn points(rows: &[Vec<f64>]) -> Result<Vec<Point>, CoreError> {
    rows.iter().map(|r| point(r)).collect()
}

fn verdict_status(v: Verdict) -> String {
    match v {
        Verdict::Supported => "supported".into(),
        Verdict::Refuted => "refuted".into(),
        Verdict::Inconclusive => "inconclusive".into(),
    }
}

fn report_entry(index: usize, name: &str, rep: CriterionReport) -> CheckEntry {
    CheckEntry {
        index,
        name: name.into(),
        status: verdict_status(rep.verdict),
        result: serde_json::to_value(rep).unwrap_or(Value::Null),
    }
}

fn require_sampled<'a>(
    system: &'a BuiltSystem,
    index: usize,
    kind: &str,
) -> Result<&'a Dynamics, RunError> {
    match system {
        BuiltSystem::Sampled(d) => Ok(d),
        BuiltSystem::Chain(_) => Err(RunError::Config(format!(
            "check {index} ({kind}) needs an ifs or jumpflow system, got a chain"
        ))),
    }
}

fn require_chain<'a>(
    system: &'a BuiltSystem,
    index: usize,
    kind: &str,
) -> Result<&'a feller_core::system::ExactChain, RunError> {
    match system {
        BuiltSystem::Chain(c) => Ok(c),
        BuiltSystem::Sampled(_) => Err(RunError::Config(format!(
            "check {index} ({kind}) needs a chain system"
        ))),
    }
}

fn require_ifs<'a>(
    system: &'a BuiltSystem,
    index: usize,
    kind: &str,
) -> Result<&'a DiscreteIFS, RunError> {
    match system {
        BuiltSystem::Sampled(Dynamics::Ifs(ifs)) => Ok(ifs),
        _ => Err(RunError::Config(format!(
            "check {index} ({kind}) needs an exact ifs system"
        ))),
    }
}

/// Classify a core error: resource caps abort the run with exit 3,
/// everything else is a config-level problem (exit 2).
fn lift(index: usize, kind: &str, e: CoreError) -> RunError {
    match e {
        CoreError::Resource(msg) => {
            RunError::Resource(format!("check {index} ({kind}): resource cap: {msg}"))
        }
        other => RunError::Config(format!("check {index} ({kind}): {other}")),
    }
}

/// Weighted percentile of the euclidean norms of a measure's atoms.
fn norm_percentile(m: &FiniteMeasure, q: f64) -> f64 {
    let mut norms: Vec<(f64, f64)> = m
        .atoms()
        .iter()
        .map(|(p, w)| {
            let n = p.coords().iter().map(|c| c * c).sum::<f64>().sqrt();
            (n, *w)
        })
        .collect();
    norms.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut acc = 0.0;
    for (n, w) in &norms {
        acc += w;
        if acc >= q {
            return *n;
        }
    }
    norms.last().map(|(n, _)| *n).unwrap_or(0.0)
}

pub fn run_checks(
    cfg: &ExperimentConfig,
    family_filter: Option<&str>,
) -> Result<(Vec<CheckEntry>, Vec<u128>), RunError> {
    let system = cfg
        .system
        .build()
        .map_err(|e| RunError::Config(format!("system: {e}")))?;
    let seed = SeedKey(cfg.seed);

    let mut entries = Vec::new();
    let mut wall_ms = Vec::new();
    for (index, check) in cfg.checks.iter().enumerate() {
        if let Some(f) = family_filter {
            if check.family() != f {
                continue;
            }
        }
        let t0 = Instant::now();
        let entry = run_one(&system, seed, index, check)?;
        wall_ms.push(t0.elapsed().as_millis());
        entries.push(entry);
    }
    Ok((entries, wall_ms))
}

fn run_one(
    system: &BuiltSystem,
    seed: SeedKey,
    index: usize,
    check: &CheckConfig,
) -> Result<CheckEntry, RunError> {
    let kind = check.kind();
    let key = seed.derive(&format!("{kind}/{index}"));
    match check {
        CheckConfig::Simulate {
            start,
            steps,
            particles,
            record_every,
        } => {
            let sys = require_sampled(system, index, kind)?;
            let trace = evolve_particles(
                sys,
                &Start::Point(point(start).map_err(|e| lift(index, kind, e))?),
                *steps,
                *particles,
                key,
                RecordPolicy::Every(*record_every),
            )
            .map_err(|e| lift(index, kind, e))?;
            let dim = sys.dim();
            let rows: Vec<Value> = trace
                .steps
                .iter()
                .zip(&trace.measures)
                .map(|(s, m)| {
                    let mean: Vec<f64> = (0..dim).map(|i| m.coordinate_mean(i)).collect();
                    json!({
                        "step": s,
                        "mean": mean,
                        "norm_p50": norm_percentile(m, 0.50),
                        "norm_p90": norm_percentile(m, 0.90),
                        "norm_p99": norm_percentile(m, 0.99),
                        "norm_max": norm_percentile(m, 1.0),
                    })
                })
                .collect();
            Ok(CheckEntry {
                index,
                name: kind.into(),
                status: "ok".into(),
                result: json!({ "trajectory_summary": rows, "particles": particles }),
            })
        }

        CheckConfig::EstimateInvariant {
            start,
            steps,
            particles,
            merge_radius,
            reference,
        } => {
            let sys = require_sampled(system, index, kind)?;
            let trace = evolve_particles(
                sys,
                &Start::Point(point(start).map_err(|e| lift(index, kind, e))?),
                *steps,
                *particles,
                key,
                RecordPolicy::Last,
            )
            .map_err(|e| lift(index, kind, e))?;
            let mut estimate = trace.measures.last().unwrap().clone();
            if *merge_radius > 0.0 {
                let (pruned, _) = prune(&estimate, 0.0, *merge_radius, sys.metric())
                    .map_err(|e| lift(index, kind, e))?;
                estimate = pruned;
            }
            let dim = sys.dim();
            let mean: Vec<f64> = (0..dim).map(|i| estimate.coordinate_mean(i)).collect();
            let fm_to_reference = match reference {
                Some(r) => {
                    let target = r.build().map_err(|e| lift(index, kind, e))?;
                    Some(
                        fm_distance(&estimate, &target, sys.metric())
                            .map_err(|e| lift(index, kind, e))?
                            .value,
                    )
                }
                None => None,
            };
            Ok(CheckEntry {
                index,
                name: kind.into(),
                status: "ok".into(),
                result: json!({
                    "support": estimate.support_size(),
                    "mean": mean,
                    "fm_to_reference": fm_to_reference,
                }),
            })
        }

        CheckConfig::InvariantResidual { candidate } => {
            let ifs = require_ifs(system, index, kind)?;
            let m = candidate.build().map_err(|e| lift(index, kind, e))?;
            let residual =
                criteria::invariant_residual(ifs, &m).map_err(|e| lift(index, kind, e))?;
            Ok(CheckEntry {
                index,
                name: kind.into(),
                status: "ok".into(),
                result: json!({ "residual": residual, "support": m.support_size() }),
            })
        }

        CheckConfig::LowerBoundMass {
            z,
            eps,
            starts,
            horizon,
            window,
            particles,
        } => {
            let sys = require_sampled(system, index, kind)?;
            let rep = criteria::lower_bound_mass_estimate(
                sys,
                &point(z).map_err(|e| lift(index, kind, e))?,
                *eps,
                &points(starts).map_err(|e| lift(index, kind, e))?,
                *horizon,
                *window,
                *particles,
                key,
            )
            .map_err(|e| lift(index, kind, e))?;
            Ok(report_entry(index, kind, rep))
        }

        CheckConfig::LowerBoundMassChain {
            start,
            ball_states,
            horizon,
            window,
        } => {
            let chain = require_chain(system, index, kind)?;
            let rep =
                criteria::lower_bound_mass_chain(chain, *start, ball_states, *horizon, *window)
                    .map_err(|e| lift(index, kind, e))?;
            Ok(report_entry(index, kind, rep))
        }

        CheckConfig::StabilityLowerBound {
            z,
            eps,
            grid,
            horizon,
            window,
            particles,
        } => {
            let sys = require_sampled(system, index, kind)?;
            let rep = criteria::stability_lower_bound_estimate(
                sys,
                &point(z).map_err(|e| lift(index, kind, e))?,
                *eps,
                &points(grid).map_err(|e| lift(index, kind, e))?,
                *horizon,
                *window,
                *particles,
                key,
            )
            .map_err(|e| lift(index, kind, e))?;
            Ok(report_entry(index, kind, rep))
        }

        CheckConfig::StabilityLowerBoundChain {
            ball_states,
            horizon,
            window,
        } => {
            let chain = require_chain(system, index, kind)?;
            let rep = criteria::stability_lower_bound_chain(chain, ball_states, *horizon, *window)
                .map_err(|e| lift(index, kind, e))?;
            Ok(report_entry(index, kind, rep))
        }

        CheckConfig::EProperty {
            x,
            radii,
            horizon,
            mode,
            particles,
            dict_lo,
            dict_hi,
        } => {
            let x = point(x).map_err(|e| lift(index, kind, e))?;
            let dict = criteria::default_dictionary(x.dim(), *dict_lo, *dict_hi)
                .map_err(|e| lift(index, kind, e))?;
            let rep = match mode {
                ProbeMode::Exact => {
                    let ifs = require_ifs(system, index, kind)?;
                    criteria::e_property_probe_exact(
                        ifs,
                        &dict,
                        &x,
                        radii,
                        *horizon,
                        &PrunePolicy::default(),
                    )
                }
                ProbeMode::Sampled => {
                    let sys = require_sampled(system, index, kind)?;
                    criteria::e_property_probe_sampled(
                        sys, &dict, &x, radii, *horizon, *particles, key,
                    )
                }
            }
            .map_err(|e| lift(index, kind, e))?;
            Ok(report_entry(index, kind, rep))
        }

        CheckConfig::Cauchy {
            z,
            grid,
            dict_lo,
            dict_hi,
            merge_radius,
        } => match system {
            BuiltSystem::Chain(chain) => {
                let z_state = z
                    .first()
                    .map(|v| *v as usize)
                    .ok_or_else(|| RunError::Config(format!("check {index} ({kind}): empty z")))?;
                let dict: Vec<Vec<f64>> = chain_basis_dictionary(chain.n());
                let rep = criteria::cauchy_diagnostic_chain(chain, z_state, &dict, grid)
                    .map_err(|e| lift(index, kind, e))?;
                Ok(report_entry(index, kind, rep))
            }
            BuiltSystem::Sampled(_) => {
                let ifs = require_ifs(system, index, kind)?;
                let zp = point(z).map_err(|e| lift(index, kind, e))?;
                let dict = criteria::default_dictionary(zp.dim(), *dict_lo, *dict_hi)
                    .map_err(|e| lift(index, kind, e))?;
                let policy = PrunePolicy {
                    mass_floor: 1e-12,
                    merge_radius: *merge_radius,
                    budget: 1e-9,
                };
                let rep = criteria::cauchy_diagnostic_exact(ifs, &zp, &dict, grid, &policy)
                    .map_err(|e| lift(index, kind, e))?;
                Ok(report_entry(index, kind, rep))
            }
        },

        CheckConfig::UniformCompact {
            grid,
            mu_star,
            horizon,
            tol,
            dict_lo,
            dict_hi,
        } => {
            let ifs = require_ifs(system, index, kind)?;
            let target = mu_star.build().map_err(|e| lift(index, kind, e))?;
            let dict = criteria::default_dictionary(ifs.dim(), *dict_lo, *dict_hi)
                .map_err(|e| lift(index, kind, e))?;
            let rep = criteria::uniform_compact_convergence_exact(
                ifs,
                &dict,
                &points(grid).map_err(|e| lift(index, kind, e))?,
                &target,
                *horizon,
                *tol,
                &PrunePolicy::default(),
            )
            .map_err(|e| lift(index, kind, e))?;
            Ok(report_entry(index, kind, rep))
        }

        CheckConfig::Conditions { pairs, moduli } => {
            run_conditions(system, key, index, kind, *pairs, moduli.as_ref())
        }

        CheckConfig::CoupleVerify {
            mu1,
            mu2,
            alpha,
            epsilon,
            ball_states,
            times,
            dictionary,
        } => run_couple_verify(
            system, index, kind, mu1, mu2.as_deref(), *alpha, *epsilon, ball_states, times,
            dictionary,
        ),

        CheckConfig::OracleChain {
            z,
            n,
            times,
            t_final,
        } => {
            let chain = require_chain(system, index, kind)?;
            let stationary = match chain_stationary(chain) {
                Ok(pi) => Some(pi),
                Err(CoreError::Degenerate(msg)) => {
                    return Ok(CheckEntry {
                        index,
                        name: kind.into(),
                        status: "failed".into(),
                        result: json!({ "error": msg }),
                    });
                }
                Err(e) => return Err(lift(index, kind, e)),
            };
            let residual =
                cesaro_tv_residual(chain, *z, *n).map_err(|e| lift(index, kind, e))?;
            let bound = 2.0 / *n as f64;
            let composed_gap = if !times.is_empty() && *t_final > 0 {
                Some(
                    composed_cesaro_vertex_gap(chain, times, *t_final)
                        .map_err(|e| lift(index, kind, e))?,
                )
            } else {
                None
            };
            let mut delta = vec![0.0; chain.n()];
            delta[*z] = 1.0;
            let cesaro = chain_cesaro(chain, &delta, *n).map_err(|e| lift(index, kind, e))?;
            Ok(CheckEntry {
                index,
                name: kind.into(),
                status: "ok".into(),
                result: json!({
                    "stationary": stationary,
                    "cesaro": cesaro,
                    "cesaro_tv_residual": residual,
                    "residual_bound": bound,
                    "residual_within_bound": residual <= bound + 1e-15,
                    "composed_vertex_gap": composed_gap,
                }),
            })
        }
    }
}

/// Basis indicators e_i: sup norm 1, they separate chain distributions.
fn chain_basis_dictionary(n: usize) -> Vec<Vec<f64>> {
    let mut dict: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut v = vec![0.0; n];
            v[i] = 1.0;
            v
        })
        .collect();
    dict.push((0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect());
    dict
}

fn run_conditions(
    system: &BuiltSystem,
    key: SeedKey,
    index: usize,
    kind: &str,
    pairs: usize,
    moduli: Option<&ModuliConfig>,
) -> Result<CheckEntry, RunError> {
    let sys = require_sampled(system, index, kind)?;
    let mut rng = key.stream(0, 0);
    let (ifs, flow_part) = match sys {
        Dynamics::Ifs(ifs) => (ifs.clone(), None),
        Dynamics::JumpFlow(jf) => (
            DiscreteIFS::new(jf.maps.clone(), jf.probs.clone(), jf.metric.clone())
                .map_err(|e| lift(index, kind, e))?,
            Some((jf.flow.clone(), jf.gamma)),
        ),
    };
    let contraction =
        check_avg_contraction(&ifs, pairs, &mut rng).map_err(|e| lift(index, kind, e))?;
    let lipschitz =
        check_prob_lipschitz(&ifs, pairs, &mut rng).map_err(|e| lift(index, kind, e))?;

    let mut result = json!({
        "avg_contraction": contraction,
        "prob_lipschitz": lipschitz,
    });
    let mut all_pass = contraction.contractive;

    if let Some((flow, gamma)) = flow_part {
        let expansion = check_flow_expansion(&flow, pairs, &mut rng)
            .map_err(|e| lift(index, kind, e))?;
        let r = contraction.analytic_bound.unwrap_or(contraction.max_ratio);
        let gap = check_spectral_gap_condition(r, expansion.kappa_bound, gamma);
        all_pass = all_pass && gap.pass;
        result["flow_expansion"] = serde_json::to_value(&expansion).unwrap_or(Value::Null);
        result["spectral_gap"] = serde_json::to_value(&gap).unwrap_or(Value::Null);
    }

    if let Some(m) = moduli {
        let pair = ModulusPair::new(
            Modulus {
                coef: m.r_coef,
                exponent: m.r_exponent,
            },
            Modulus {
                coef: m.omega_coef,
                exponent: m.omega_exponent,
            },
        )
        .map_err(|e| lift(index, kind, e))?;
        let rep = check_moduli_pair(&pair, &m.grid, m.partial_len)
            .map_err(|e| lift(index, kind, e))?;
        all_pass = all_pass && rep.pass;
        result["moduli"] = serde_json::to_value(&rep).unwrap_or(Value::Null);
    }

    Ok(CheckEntry {
        index,
        name: kind.into(),
        status: if all_pass { "ok" } else { "failed" }.into(),
        result,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_couple_verify(
    system: &BuiltSystem,
    index: usize,
    kind: &str,
    mu1: &[f64],
    mu2: Option<&[f64]>,
    alpha: f64,
    epsilon: Option<f64>,
    ball_states: &[usize],
    times: &[usize],
    dictionary: &[Vec<f64>],
) -> Result<CheckEntry, RunError> {
    let chain = require_chain(system, index, kind)?;

    // Inadmissibility is a diagnostic finding, not a tool error: the
    // check terminates with refuted status and the run exits 0.
    let inadmissible = |e: CoreError| -> Result<CheckEntry, RunError> {
        match e {
            CoreError::InadmissibleSplit {
                step,
                ball_mass,
                sigma,
                deficit,
            } => Ok(CheckEntry {
                index,
                name: kind.into(),
                status: "refuted".into(),
                result: json!({
                    "inadmissible_step": step,
                    "ball_mass": ball_mass,
                    "sigma": sigma,
                    "deficit": deficit,
                }),
            }),
            other => Err(lift(index, kind, other)),
        }
    };

    match epsilon {
        Some(eps) => {
            let schedule = sigma_schedule(alpha, eps, times.len())
                .map_err(|e| lift(index, kind, e))?;
            match chain_decomposition(chain, mu1, ball_states, &schedule, times) {
                Ok(cert) => Ok(CheckEntry {
                    index,
                    name: kind.into(),
                    status: if cert.reconstruction_residual <= 1e-12 {
                        "ok"
                    } else {
                        "failed"
                    }
                    .into(),
                    result: json!({
                        "schedule": schedule,
                        "certificate": cert,
                    }),
                }),
                Err(e) => inadmissible(e),
            }
        }
        None => {
            let mu2 = mu2.ok_or_else(|| {
                RunError::Config(format!(
                    "check {index} ({kind}): telescoping mode needs mu2"
                ))
            })?;
            let certs = match telescoping_decomposition(
                chain,
                mu1,
                mu2,
                alpha,
                ball_states,
                times,
            ) {
                Ok(c) => c,
                Err(e) => return inadmissible(e),
            };
            let dict_owned;
            let dict: &[Vec<f64>] = if dictionary.is_empty() {
                dict_owned = chain_basis_dictionary(chain.n());
                &dict_owned
            } else {
                dictionary
            };
            let bound = coupling_bound_check(chain, mu1, mu2, alpha, ball_states, times, dict)
                .map_err(|e| lift(index, kind, e))?;
            let ok = bound.pass
                && certs.0.reconstruction_residual <= 1e-12
                && certs.1.reconstruction_residual <= 1e-12;
            Ok(CheckEntry {
                index,
                name: kind.into(),
                status: if ok { "ok" } else { "failed" }.into(),
                result: json!({
                    "certificate_mu1": certs.0,
                    "certificate_mu2": certs.1,
                    "bound_check": bound,
                }),
            })
        }
    }
}
