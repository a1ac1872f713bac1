//! One function per subcommand. Each returns its artifacts in writing
//! order plus any invariant violations.

use metriccalc::lipcalc::{glip, lip_norm};
use metriccalc::mds::{self, LambdaMode, ProbeVerdict};
use metriccalc::modalg;
use metriccalc::ComponentTable;
use serde_json::{json, Value};

use crate::config::{Context, LambdaSpec, RunConfig};
use crate::CliError;

pub struct Artifact {
    pub name: String,
    pub contents: String,
}

#[derive(Default)]
pub struct Outcome {
    pub artifacts: Vec<Artifact>,
    /// Non-empty when an invariant failed; written to `violations.json`.
    pub violations: Vec<Value>,
}

impl Outcome {
    fn push(&mut self, name: impl Into<String>, contents: String) {
        self.artifacts.push(Artifact {
            name: name.into(),
            contents,
        });
    }

    fn push_json(&mut self, name: impl Into<String>, value: &Value) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.push(name, text);
        Ok(())
    }
}

/// `<sub>.<ext>` for the first field, `<sub>.<k>.<ext>` for the rest.
fn per_field(sub: &str, k: usize, ext: &str) -> String {
    if k == 0 {
        format!("{sub}.{ext}")
    } else {
        format!("{sub}.{k}.{ext}")
    }
}

fn need(ok: bool, what: &str, sub: &str) -> Result<(), CliError> {
    if ok {
        Ok(())
    } else {
        Err(CliError::Usage(format!(
            "`{sub}` needs at least one entry in `{what}`"
        )))
    }
}

pub fn space(cfg: &RunConfig, ctx: &Context) -> Result<Outcome, CliError> {
    let s = &ctx.space;
    let doubling = s.doubling_profile(cfg.doubling_samples, cfg.seed)?;
    let isolated = (0..s.len()).filter(|&x| ctx.calc.is_isolated(x)).count();
    let mut out = Outcome::default();
    out.push_json(
        "space.json",
        &json!({
            "points": s.len(),
            "dim": s.dim(),
            "metric_exponent": s.metric_exponent(),
            "total_measure": s.total_measure(),
            "diameter": s.diameter(),
            "median_nearest_neighbor": s.median_nearest_neighbor_distance(),
            "doubling": doubling,
            "ladder": ctx.calc.ladder().radii(),
            "isolated_points": isolated,
        }),
    )?;
    Ok(out)
}

pub fn lip(_cfg: &RunConfig, ctx: &Context) -> Result<Outcome, CliError> {
    need(!ctx.fields.is_empty(), "fields", "lip")?;
    let mut out = Outcome::default();
    let mut summary = Vec::new();
    for (k, f) in ctx.fields.iter().enumerate() {
        let profile = ctx.calc.profile(f)?;
        let g = glip(f);
        for x in 0..ctx.space.len() {
            let (lo, up) = (profile.lower[x], profile.upper[x]);
            if lo > up || up > g {
                out.violations.push(json!({
                    "kind": "lip_order", "field": k, "point": x,
                    "lower": lo, "upper": up, "glip": g,
                }));
            }
        }
        summary.push(json!({
            "field": k,
            "glip": g,
            "lip_norm": lip_norm(f),
            "max_upper": profile.upper.iter().copied().fold(0.0, f64::max),
            "max_lower": profile.lower.iter().copied().fold(0.0, f64::max),
        }));
        out.push(per_field("lip", k, "csv"), profile.to_csv());
    }
    out.push_json("lip.json", &json!({ "fields": summary }))?;
    Ok(out)
}

pub fn derive(_cfg: &RunConfig, ctx: &Context) -> Result<Outcome, CliError> {
    need(!ctx.derivations.is_empty(), "derivations", "derive")?;
    need(!ctx.fields.is_empty(), "fields", "derive")?;
    let mut out = Outcome::default();
    let mut csv = String::from("derivation,field,point,value\n");
    let mut reports = Vec::new();
    let fields = ctx.field_refs();
    for (i, d) in ctx.derivations.iter().enumerate() {
        for (k, f) in fields.iter().enumerate() {
            for (x, v) in d.apply(f)?.values().iter().enumerate() {
                csv.push_str(&format!("{i},{k},{x},{v:?}\n"));
            }
        }
        let norm = d.operator_norm(Some(&ctx.calc), &fields)?;
        let mut leibniz = Vec::new();
        for a in 0..fields.len() {
            for b in a..fields.len() {
                let r = d.leibniz_residual(fields[a], fields[b])?;
                let gap = r
                    .residual
                    .values()
                    .iter()
                    .zip(r.direct.values())
                    .map(|(c, e)| (c - e).abs())
                    .fold(0.0, f64::max);
                for &x in &r.violations {
                    out.violations.push(json!({
                        "kind": "leibniz_bound", "derivation": i, "fields": [a, b], "point": x,
                        "residual": r.residual.value(x),
                    }));
                }
                leibniz.push(
                    json!({ "fields": [a, b], "bound_ok": r.bound_ok, "closed_form_gap": gap }),
                );
            }
        }
        reports.push(json!({
            "derivation": i,
            "reach": d.reach(),
            "flipped_points": d.flipped_points().len(),
            "operator_norm_bound": norm.exact_bound,
            "operator_norm_empirical": norm.empirical,
            "leibniz": leibniz,
        }));
    }
    out.push("derive.csv", csv);
    out.push_json("derive.json", &json!({ "derivations": reports }))?;
    Ok(out)
}

pub fn stratify(cfg: &RunConfig, ctx: &Context) -> Result<Outcome, CliError> {
    need(!ctx.derivations.is_empty(), "derivations", "stratify")?;
    need(!ctx.generators.is_empty(), "generators", "stratify")?;
    let table = ComponentTable::build(&ctx.derivation_refs(), &ctx.generator_refs())?;
    let st = modalg::stratify_table(&table, cfg.thresholds.tau)?;
    let mut out = Outcome::default();
    out.push_json("stratify.json", &st.to_json())?;
    Ok(out)
}

fn build_atlas(cfg: &RunConfig, ctx: &Context, sub: &str) -> Result<mds::Atlas, CliError> {
    need(!ctx.generators.is_empty(), "generators", sub)?;
    Ok(mds::build_atlas(
        &ctx.space,
        ctx.generators.clone(),
        &ctx.derivation_refs(),
        cfg.thresholds.tau,
        cfg.thresholds.eps_floor,
    )?)
}

pub fn atlas(cfg: &RunConfig, ctx: &Context) -> Result<Outcome, CliError> {
    let atlas = build_atlas(cfg, ctx, "atlas")?;
    let mut out = Outcome::default();
    let freeness = atlas.freeness_residual(&ctx.derivation_refs());
    if freeness > cfg.thresholds.freeness_tol {
        out.violations.push(json!({
            "kind": "freeness", "residual": freeness, "tol": cfg.thresholds.freeness_tol,
        }));
    }
    let dependent = atlas.dependent_points(&ctx.calc, cfg.thresholds.independence_tau)?;
    let mut gaps = Vec::new();
    for (k, f) in ctx.fields.iter().enumerate() {
        let mut rows = Vec::new();
        let mut gap = 0.0f64;
        for chart in 0..atlas.charts().len() {
            let t = mds::partial_derivatives(&ctx.calc, &atlas, chart, f, None)?;
            for ((&x, v), &res) in t.domain.iter().zip(&t.values).zip(&t.residual) {
                let norm = mds::cot_norm(&ctx.calc, &atlas, chart, v, x)?;
                let lip = ctx.calc.lip_at(f, x)?;
                let rel = (norm - lip).abs() / lip.max(1.0);
                gap = gap.max(rel);
                if let Some(tol) = cfg.thresholds.chart_tol {
                    if rel > tol {
                        out.violations.push(json!({
                            "kind": "cotangent_norm", "field": k, "chart": chart, "point": x,
                            "norm": norm, "lip": lip, "tol": tol,
                        }));
                    }
                }
                for (j, c) in v.iter().enumerate() {
                    rows.push((x, j, *c, res));
                }
            }
        }
        rows.sort_by_key(|r| (r.0, r.1));
        let mut csv = String::from("point,j,value,residual\n");
        for (x, j, c, res) in rows {
            csv.push_str(&format!("{x},{j},{c:?},{res:?}\n"));
        }
        out.push(per_field("atlas", k, "csv"), csv);
        gaps.push(gap);
    }
    let mut json = atlas.to_json();
    json["freeness_residual"] = json!(freeness);
    json["dependent_points"] = json!(dependent);
    json["cotangent_norm_gap"] = json!(gaps);
    out.push_json("atlas.json", &json)?;
    Ok(out)
}

pub fn check_ineq(cfg: &RunConfig, ctx: &Context) -> Result<Outcome, CliError> {
    need(!ctx.derivations.is_empty(), "derivations", "check-ineq")?;
    need(!ctx.fields.is_empty(), "fields", "check-ineq")?;
    let mode = match &cfg.lambda {
        None => LambdaMode::Fit,
        Some(LambdaSpec::Uniform(l)) => LambdaMode::Given(vec![*l; ctx.space.len()]),
        Some(LambdaSpec::PerPoint(l)) => LambdaMode::Given(l.clone()),
    };
    let report = mds::inequality_report(
        &ctx.calc,
        &ctx.derivation_refs(),
        &ctx.field_refs(),
        &mode,
        cfg.thresholds.tol,
    )?;
    let mut out = Outcome::default();
    for w in report
        .upper_violations
        .iter()
        .chain(&report.reverse_violations)
    {
        out.violations.push(serde_json::to_value(w)?);
    }
    out.push_json("check-ineq.json", &serde_json::to_value(&report)?)?;
    Ok(out)
}

pub fn sobolev(cfg: &RunConfig, ctx: &Context) -> Result<Outcome, CliError> {
    need(!ctx.fields.is_empty(), "fields", "sobolev")?;
    let atlas = build_atlas(cfg, ctx, "sobolev")?;
    let norms = ctx
        .fields
        .iter()
        .map(|f| mds::sobolev_norm(&ctx.calc, &atlas, f, cfg.p))
        .collect::<Result<Vec<_>, _>>()?;
    let mut out = Outcome::default();
    out.push_json(
        "sobolev.json",
        &json!({
            "p": cfg.p,
            "dimension": atlas.dimension(),
            "charts": atlas.charts().len(),
            "norms": norms,
        }),
    )?;
    Ok(out)
}

pub fn probe_dim(cfg: &RunConfig, ctx: &Context) -> Result<Outcome, CliError> {
    need(!ctx.fields.is_empty(), "fields", "probe-dim")?;
    let report = mds::dimension_probe(
        &ctx.calc,
        &ctx.derivation_refs(),
        &ctx.field_refs(),
        cfg.thresholds.independence_tau,
        cfg.points.as_deref(),
    )?;
    let mut out = Outcome::default();
    if report.verdict == Some(ProbeVerdict::Violated) {
        out.violations.push(json!({
            "kind": "dimension",
            "candidates": ctx.fields.len(),
            "derivations": ctx.derivations.len(),
            "points": report.points.len(),
        }));
    }
    out.push_json("probe-dim.json", &serde_json::to_value(&report)?)?;
    Ok(out)
}
