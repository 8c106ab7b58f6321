//! User-defined problem data: scalar expressions in `x`, `y` and `pi`.

use std::path::Path;
use std::sync::Arc;

use evalexpr::{build_operator_tree, ContextWithMutableVariables, DefaultNumericTypes, HashMapContext, Node, Value};
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::mesh::Point;
use crate::optimizer::ScalarField;

/// Compiles an expression such as `math::sin(pi * x) * y^2` into a field.
///
/// Integer literals follow integer arithmetic, so `1/2` is `0`; write `0.5`.
pub fn compile_field(source: &str) -> Result<ScalarField> {
    let node: Node<DefaultNumericTypes> =
        build_operator_tree(source).map_err(|e| Error::Parse(format!("expression {source:?}: {e}")))?;
    let eval = move |x: Point| -> std::result::Result<f64, String> {
        let mut ctx = HashMapContext::<DefaultNumericTypes>::new();
        for (name, v) in [("x", x[0]), ("y", x[1]), ("pi", std::f64::consts::PI)] {
            ctx.set_value(name.into(), Value::Float(v)).map_err(|e| e.to_string())?;
        }
        node.eval_number_with_context(&ctx).map_err(|e| e.to_string())
    };
    // Surface unknown names and type errors now rather than inside assembly.
    eval([0.25, 0.5]).map_err(|e| Error::Parse(format!("expression {source:?}: {e}")))?;
    Ok(Arc::new(move |x| eval(x).unwrap_or(f64::NAN)))
}

/// Contents of a custom problem file (TOML).
///
/// ```toml
/// source = "2 * pi^2 * math::sin(pi * x) * math::sin(pi * y)"
/// target = "0.0"
/// alpha = 0.1          # optional
/// bounds = [-1.0, 1.0] # optional
/// ```
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomProblem {
    pub source: String,
    pub target: String,
    pub alpha: Option<f64>,
    pub bounds: Option<[f64; 2]>,
}

impl CustomProblem {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn fields(&self) -> Result<(ScalarField, ScalarField)> {
        Ok((compile_field(&self.source)?, compile_field(&self.target)?))
    }
}
