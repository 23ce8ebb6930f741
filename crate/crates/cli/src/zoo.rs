//! Built-in groups, maps, domains and fields, and the catalog printed by
//! `list-zoo`.

use std::sync::Arc;

use carnot::field::{Domain, FieldExpr, Monomial, ScalarField};
use carnot::group::{CoordBox, Group, Law, Point};
use carnot::linalg::Matrix;
use carnot::maps::{
    Compose, Constant, Dilation, Identity, LeftTranslation, LinearHomomorphism, RadialSquash, SharedMap,
};
use serde_json::{json, Value};

use crate::config::{invalid, ConfigError, DomainSpec, FieldSpec, MapSpec};

fn point(g: &Group<f64>, coords: &[f64], what: &str) -> Result<Point<f64>, ConfigError> {
    if coords.iter().any(|c| !c.is_finite()) {
        return Err(invalid(format!("{what}: coordinates must be finite")));
    }
    let p = Point::new(coords.iter().copied());
    g.check(&p).map_err(|e| invalid(format!("{what}: {e}")))?;
    Ok(p)
}

fn positive(x: f64, what: &str) -> Result<f64, ConfigError> {
    if x.is_finite() && x > 0.0 {
        Ok(x)
    } else {
        Err(invalid(format!("{what} must be a positive number, got {x}")))
    }
}

pub fn build_domain(g: &Group<f64>, spec: &DomainSpec) -> Result<Domain<f64>, ConfigError> {
    match spec {
        DomainSpec::Ball { center, radius } => {
            let c = match center {
                Some(c) => point(g, c, "domain.center")?,
                None => g.identity(),
            };
            Ok(Domain::ball(g, c, positive(*radius, "domain.radius")?))
        }
        DomainSpec::Box { lo, hi } => {
            point(g, lo, "domain.lo")?;
            point(g, hi, "domain.hi")?;
            if lo.iter().zip(hi).any(|(a, b)| a >= b) {
                return Err(invalid("domain: need lo < hi in every coordinate"));
            }
            Ok(Domain::coord_box(g, CoordBox::new(lo.clone(), hi.clone())))
        }
    }
}

pub fn build_map(g: &Group<f64>, spec: &MapSpec) -> Result<SharedMap<f64>, ConfigError> {
    let map_err = |e: carnot::maps::MapError| invalid(format!("map: {e}"));
    let m: SharedMap<f64> = match spec {
        MapSpec::Identity => Arc::new(Identity { group: g.clone() }),
        MapSpec::Translation { by } => Arc::new(LeftTranslation { group: g.clone(), by: point(g, by, "map.by")? }),
        MapSpec::Dilation { lambda } => {
            Arc::new(Dilation { group: g.clone(), lambda: positive(*lambda, "map.lambda")? })
        }
        MapSpec::Shear { a } => {
            if !matches!(g.law(), Law::Heisenberg { .. }) {
                return Err(invalid("map shear needs a Heisenberg group"));
            }
            if !a.is_finite() {
                return Err(invalid("map.a must be finite"));
            }
            Arc::new(LinearHomomorphism::shear(g, *a).map_err(map_err)?)
        }
        MapSpec::Projection => {
            if !matches!(g.law(), Law::Heisenberg { .. }) {
                return Err(invalid("map projection needs a Heisenberg group"));
            }
            Arc::new(LinearHomomorphism::projection(g).map_err(map_err)?)
        }
        MapSpec::Linear { matrix } => {
            let n = g.horizontal_dim();
            if matrix.len() != n || matrix.iter().any(|r| r.len() != n) {
                return Err(invalid(format!("map.matrix must be {n} x {n}")));
            }
            if matrix.iter().flatten().any(|v| !v.is_finite()) {
                return Err(invalid("map.matrix entries must be finite"));
            }
            Arc::new(LinearHomomorphism::from_horizontal("linear", g, g, Matrix::from_rows(matrix)).map_err(map_err)?)
        }
        MapSpec::RadialSquash { inner_radius } => {
            if g.law() != Law::Abelian {
                return Err(invalid("map radial-squash needs an abelian group"));
            }
            let a = positive(*inner_radius, "map.inner_radius")?;
            Arc::new(RadialSquash { group: g.clone(), inner_radius: a })
        }
        MapSpec::Constant { value } => {
            Arc::new(Constant { source: g.clone(), target: g.clone(), value: point(g, value, "map.value")? })
        }
        MapSpec::Compose { maps } => {
            let mut parts = maps.iter().map(|m| build_map(g, m));
            let first = parts.next().ok_or_else(|| invalid("map compose needs at least one map"))??;
            let mut acc = first;
            for next in parts {
                acc = Arc::new(Compose::new(acc, next?).map_err(map_err)?);
            }
            acc
        }
    };
    Ok(m)
}

/// The field of the `field-calculus` suite; by default a polynomial that
/// involves the top layer.
pub fn build_field(g: &Group<f64>, spec: Option<&FieldSpec>) -> Result<ScalarField<f64>, ConfigError> {
    let n = g.dim();
    let expr = match spec {
        None => {
            let mut a = vec![0; n];
            a[0] = 2;
            let mut b = vec![0; n];
            b[n - 1] = 1;
            if n > 1 {
                b[1] = 1;
            }
            FieldExpr::Polynomial(vec![
                Monomial { coefficient: 1.0, exponents: a },
                Monomial { coefficient: -0.5, exponents: b },
            ])
        }
        Some(FieldSpec::Coordinate { k }) => {
            if *k >= n {
                return Err(invalid(format!("field.k must be below {n}")));
            }
            FieldExpr::Coordinate(*k)
        }
        Some(FieldSpec::DistanceToPoint { center }) => FieldExpr::DistanceTo(point(g, center, "field.center")?),
        Some(FieldSpec::Bump { center, radius }) => FieldExpr::Bump {
            center: point(g, center, "field.center")?,
            radius: positive(*radius, "field.radius")?,
        },
        Some(FieldSpec::Polynomial { terms }) => {
            if terms.iter().any(|t| t.exponents.len() != n || !t.coefficient.is_finite()) {
                return Err(invalid(format!("field.terms need {n} exponents and finite coefficients")));
            }
            FieldExpr::Polynomial(
                terms.iter().map(|t| Monomial { coefficient: t.coefficient, exponents: t.exponents.clone() }).collect(),
            )
        }
    };
    Ok(ScalarField::new(g, expr))
}

/// Everything `run` accepts, with parameter schemas.
pub fn catalog() -> Value {
    json!({
        "groups": [
            { "name": "abelian-<n>", "examples": ["abelian-2", "abelian-3"],
              "description": "R^n with the Euclidean metric" },
            { "name": "heisenberg-<k>", "examples": ["heisenberg-1", "heisenberg-2"],
              "description": "Heisenberg group of dimension 2k+1, closed-form distance" },
            { "name": "engel", "description": "step-3 Engel group, layers [2, 1, 1]" },
            { "name": "descriptor",
              "params": { "name": "string", "layer_dims": "[usize], at most 3 layers",
                          "structure_constants": "[{i, j, k, value}] with [X_i, X_j] = value X_k",
                          "calibration": "optional precomputed calibration" },
              "description": "inline object or {\"descriptor\": \"path.json\"}" }
        ],
        "domains": [
            { "type": "ball", "params": { "center": "point, default identity", "radius": "number > 0" } },
            { "type": "box", "params": { "lo": "point", "hi": "point" } }
        ],
        "maps": [
            { "name": "identity", "params": {} },
            { "name": "translation", "params": { "by": "point" } },
            { "name": "dilation", "params": { "lambda": "number > 0" } },
            { "name": "shear", "params": { "a": "number" }, "groups": "heisenberg" },
            { "name": "projection", "params": {}, "groups": "heisenberg" },
            { "name": "linear", "params": { "matrix": "horizontal block, rows" } },
            { "name": "radial-squash", "params": { "inner_radius": "number > 0" }, "groups": "abelian" },
            { "name": "constant", "params": { "value": "point" } },
            { "name": "compose", "params": { "maps": "[map], applied first to last" } }
        ],
        "fields": [
            { "name": "coordinate", "params": { "k": "usize" } },
            { "name": "distance-to-point", "params": { "center": "point" } },
            { "name": "bump", "params": { "center": "point", "radius": "number > 0" } },
            { "name": "polynomial", "params": { "terms": "[{coefficient, exponents}]" } }
        ],
        "suites": crate::config::Suite::ALL.iter().map(|s| s.name()).collect::<Vec<_>>()
    })
}
