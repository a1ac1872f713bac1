//! Run configuration and its resolution into calculus objects.

use std::path::{Path, PathBuf};

use metriccalc::lipcalc::mcshane_extend;
use metriccalc::mds::DEFAULT_EPS_FLOOR;
use metriccalc::modalg::DEFAULT_RANK_TAU;
use metriccalc::space::io::read_field_csv;
use metriccalc::space::{landmark_generators, make_space, SpaceKind};
use metriccalc::{
    Derivation, LipCalculus, ScalarField, ScaleLadder, Scheme, SpaceRef, VariationRule,
};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub space: SpaceKind,
    /// `r0:ratio:floor`; the space's default ladder when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ladder: Option<String>,
    #[serde(default)]
    pub rule: VariationRule,
    #[serde(default)]
    pub derivations: Vec<DerivationSpec>,
    /// Generating set (chart-function candidates).
    #[serde(default)]
    pub generators: Vec<FieldSpec>,
    /// Fields under study: Lipschitz profiles, corpus, probe candidates.
    #[serde(default)]
    pub fields: Vec<FieldSpec>,
    #[serde(default)]
    pub thresholds: Thresholds,
    #[serde(default)]
    pub seed: u64,
    /// Where artifacts go. Not echoed into `run.json`, so that identical
    /// runs into different directories stay byte-identical.
    #[serde(default, skip_serializing)]
    pub out: Option<PathBuf>,
    /// Sobolev exponent.
    #[serde(default = "default_p")]
    pub p: f64,
    /// Reverse-inequality constant: fitted when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<LambdaSpec>,
    /// Points probed by `probe-dim` (all when absent).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<Vec<usize>>,
    #[serde(default = "default_samples")]
    pub doubling_samples: usize,
}

fn default_p() -> f64 {
    2.0
}

fn default_samples() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    /// Relative singular-value cutoff for pointwise rank.
    pub tau: f64,
    /// Absolute independence threshold; relative default when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub independence_tau: Option<f64>,
    pub eps_floor: f64,
    /// Allowed relative gap between `|df|` and `Lip f` on atlas charts;
    /// the gap is only reported when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chart_tol: Option<f64>,
    pub freeness_tol: f64,
    /// Below this, `Lip f(x)` counts as zero.
    pub tol: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            tau: DEFAULT_RANK_TAU,
            independence_tau: None,
            eps_floor: DEFAULT_EPS_FLOOR,
            chart_tol: None,
            freeness_tol: 1e-6,
            tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LambdaSpec {
    Uniform(f64),
    PerPoint(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DerivationSpec {
    /// Step defaults to the grid spacing.
    Axis {
        dim: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        step: Option<f64>,
    },
    Knn {
        k: usize,
        radius: f64,
    },
    /// Stencil JSON file.
    File {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub coef: f64,
    /// Exponent per coordinate; missing trailing exponents are zero.
    pub powers: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldSpec {
    Coordinate {
        axis: usize,
    },
    Constant {
        value: f64,
    },
    Distance {
        landmark: usize,
    },
    /// One distance field per landmark.
    Landmarks {
        points: Vec<usize>,
    },
    Polynomial {
        terms: Vec<Term>,
    },
    Clip {
        field: Box<FieldSpec>,
        lo: f64,
        hi: f64,
    },
    /// McShane extension of uniform random data on `anchors` random points.
    Random {
        anchors: usize,
        lipschitz: f64,
    },
    /// `point,value` CSV.
    Csv {
        path: PathBuf,
    },
}

/// Everything a subcommand needs, built from a config.
pub struct Context {
    pub space: SpaceRef,
    pub calc: LipCalculus,
    pub derivations: Vec<Derivation>,
    pub generators: Vec<ScalarField>,
    pub fields: Vec<ScalarField>,
}

impl Context {
    pub fn derivation_refs(&self) -> Vec<&Derivation> {
        self.derivations.iter().collect()
    }

    pub fn generator_refs(&self) -> Vec<&ScalarField> {
        self.generators.iter().collect()
    }

    pub fn field_refs(&self) -> Vec<&ScalarField> {
        self.fields.iter().collect()
    }
}

fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

fn resolve_space(kind: &SpaceKind, base: &Path) -> SpaceKind {
    match kind {
        SpaceKind::File { path } => SpaceKind::File {
            path: resolve(base, path),
        },
        SpaceKind::Snowflake { base: inner, alpha } => SpaceKind::Snowflake {
            base: Box::new(resolve_space(inner, base)),
            alpha: *alpha,
        },
        other => other.clone(),
    }
}

// salts keep random generators and random fields on separate streams
const GENERATOR_SALT: u64 = 0x5157_0000_0000_0001;
const FIELD_SALT: u64 = 0x5157_0000_0000_0002;

impl RunConfig {
    /// Builds the space, calculus, derivations and fields. Relative paths are
    /// taken from `base`, the directory of the config file.
    pub fn context(&self, base: &Path) -> Result<Context, CliError> {
        let space = make_space(&resolve_space(&self.space, base))?.into_ref();
        let ladder = match &self.ladder {
            Some(spec) => ScaleLadder::parse(spec)?,
            None => ScaleLadder::default_for(&space)?,
        };
        let calc = LipCalculus::new(&space, ladder, self.rule);
        let derivations = self
            .derivations
            .iter()
            .map(|d| self.derivation(&space, d, base))
            .collect::<Result<_, _>>()?;
        let generators = self.fields_of(&space, &self.generators, base, GENERATOR_SALT)?;
        let fields = self.fields_of(&space, &self.fields, base, FIELD_SALT)?;
        Ok(Context {
            space,
            calc,
            derivations,
            generators,
            fields,
        })
    }

    fn derivation(
        &self,
        space: &SpaceRef,
        spec: &DerivationSpec,
        base: &Path,
    ) -> Result<Derivation, CliError> {
        Ok(match spec {
            DerivationSpec::Axis { dim, step } => {
                let step = match (step, space.grid()) {
                    (Some(s), _) => *s,
                    (None, Some(g)) => g.spacing,
                    (None, None) => {
                        return Err(CliError::Usage(
                            "axis derivations off a grid need an explicit step".into(),
                        ))
                    }
                };
                Derivation::difference_quotient(space, &Scheme::Axis { dim: *dim, step })?
            }
            DerivationSpec::Knn { k, radius } => Derivation::difference_quotient(
                space,
                &Scheme::Knn {
                    k: *k,
                    radius: *radius,
                },
            )?,
            DerivationSpec::File { path } => Derivation::read_json(space, resolve(base, path))?,
        })
    }

    fn fields_of(
        &self,
        space: &SpaceRef,
        specs: &[FieldSpec],
        base: &Path,
        salt: u64,
    ) -> Result<Vec<ScalarField>, CliError> {
        let mut out = Vec::new();
        for (k, spec) in specs.iter().enumerate() {
            let seed = self.seed ^ salt.wrapping_mul(k as u64 + 1);
            out.extend(expand(space, spec, base, seed)?);
        }
        Ok(out)
    }
}

fn expand(
    space: &SpaceRef,
    spec: &FieldSpec,
    base: &Path,
    seed: u64,
) -> Result<Vec<ScalarField>, CliError> {
    let one =
        |f: metriccalc::Result<ScalarField>| -> Result<Vec<ScalarField>, CliError> { Ok(vec![f?]) };
    match spec {
        FieldSpec::Coordinate { axis } => one(ScalarField::coordinate(space, *axis)),
        FieldSpec::Constant { value } => one(ScalarField::constant(space, *value)),
        FieldSpec::Distance { landmark } => Ok(landmark_generators(space, &[*landmark])?),
        FieldSpec::Landmarks { points } => Ok(landmark_generators(space, points)?),
        FieldSpec::Polynomial { terms } => {
            let dim = space.dim().ok_or_else(|| {
                CliError::Usage("polynomial fields need point coordinates".into())
            })?;
            if let Some(t) = terms.iter().find(|t| t.powers.len() > dim) {
                return Err(CliError::Usage(format!(
                    "monomial powers {:?} exceed the space dimension {dim}",
                    t.powers
                )));
            }
            one(ScalarField::from_fn(space, |i| {
                let c = space.coords(i).unwrap();
                terms
                    .iter()
                    .map(|t| {
                        t.coef
                            * t.powers
                                .iter()
                                .zip(c)
                                .map(|(&p, x)| x.powi(p as i32))
                                .product::<f64>()
                    })
                    .sum()
            }))
        }
        FieldSpec::Clip { field, lo, hi } => {
            if lo.is_nan() || hi.is_nan() || lo > hi {
                return Err(CliError::Usage(format!("clip bounds {lo} > {hi}")));
            }
            let inner = expand(space, field, base, seed)?;
            inner
                .iter()
                .map(|f| Ok(f.map(|v| v.clamp(*lo, *hi))?))
                .collect()
        }
        FieldSpec::Random { anchors, lipschitz } => {
            if *anchors == 0 || *anchors > space.len() {
                return Err(CliError::Usage(format!(
                    "random field needs 1..={} anchors, got {anchors}",
                    space.len()
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut set = sample(&mut rng, space.len(), *anchors).into_vec();
            set.sort_unstable();
            let mut values: Vec<f64> = set.iter().map(|_| rng.gen_range(-1.0..1.0)).collect();
            // shrink the data until it is `lipschitz`-Lipschitz on the anchors
            let mut constant = 0.0f64;
            for (i, &a) in set.iter().enumerate() {
                for (j, &b) in set.iter().enumerate().skip(i + 1) {
                    constant = constant.max((values[i] - values[j]).abs() / space.dist(a, b));
                }
            }
            if constant > *lipschitz {
                let shrink = lipschitz / constant;
                values.iter_mut().for_each(|v| *v *= shrink);
            }
            one(mcshane_extend(space, &set, &values, *lipschitz))
        }
        FieldSpec::Csv { path } => one(read_field_csv(space, resolve(base, path))),
    }
}
