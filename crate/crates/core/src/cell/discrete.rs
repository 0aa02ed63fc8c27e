use serde::{Deserialize, Serialize};

use super::symbolic::{Expr, Style};
use crate::ops::{BinaryOpId, UnaryOpId};

/// Format tag of activation documents.
pub const ACTIVATION_FORMAT: &str = "grafs-activation";
const ACTIVATION_VERSION: u32 = 1;

/// Where a discrete activation came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub epoch: usize,
    pub run_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
    pub tool_version: String,
}

impl Provenance {
    pub fn new(seed: u64, epoch: usize, run_id: impl Into<String>) -> Self {
        Self {
            seed,
            epoch,
            run_id: run_id.into(),
            config_digest: None,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

/// A fully discretized cell with frozen γ values.
///
/// Evaluation applies no output clamp: a discrete activation is a final
/// function, and the `exp`/`sinh` input guards alone keep it finite.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteActivation {
    unary: [(UnaryOpId, f64); 4],
    binary: [(BinaryOpId, f64); 2],
    provenance: Provenance,
}

impl DiscreteActivation {
    /// γ values of ops that do not take one are stored as 0.
    pub fn new(unary: [(UnaryOpId, f64); 4], binary: [(BinaryOpId, f64); 2], provenance: Provenance) -> Self {
        let unary = unary.map(|(op, g)| (op, if op.takes_gamma() { g } else { 0.0 }));
        let binary = binary.map(|(op, g)| (op, if op.takes_gamma() { g } else { 0.0 }));
        Self {
            unary,
            binary,
            provenance,
        }
    }

    pub fn unary(&self) -> &[(UnaryOpId, f64); 4] {
        &self.unary
    }

    pub fn binary(&self) -> &[(BinaryOpId, f64); 2] {
        &self.binary
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn provenance_mut(&mut self) -> &mut Provenance {
        &mut self.provenance
    }

    /// `(f(x), f'(x))`, optionally clamping every op output at `±clamp` as
    /// the relaxed cell does.
    pub fn eval_clamped(&self, x: f64, clamp: Option<f64>) -> (f64, f64) {
        let [u1, u2, u3, u4] = self.unary.map(|(op, g)| move |v: f64| op.eval_clamped(v, g, clamp));
        let [bb, bt] = self
            .binary
            .map(|(op, g)| move |a: f64, b: f64| op.eval_clamped(a, b, g, clamp));
        let (e1, e2, e4) = (u1(x), u2(x), u4(x));
        let bottom = bb(e1.value, e2.value);
        let e3 = u3(bottom.value);
        let top = bt(e3.value, e4.value);
        let d_bottom = bottom.dx1 * e1.dx + bottom.dx2 * e2.dx;
        (top.value, top.dx1 * e3.dx * d_bottom + top.dx2 * e4.dx)
    }

    pub fn eval_with_grad(&self, x: f64) -> (f64, f64) {
        self.eval_clamped(x, None)
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.eval_with_grad(x).0
    }

    /// The cell as an expression, with projections and identities elided.
    pub fn raw_expr(&self) -> Expr {
        Expr::from_cell(&self.unary, &self.binary)
    }

    pub fn expr(&self) -> Expr {
        self.raw_expr().simplify()
    }

    pub fn formula(&self) -> String {
        self.expr().render(Style::Display)
    }

    pub fn formula_exact(&self) -> String {
        self.expr().render(Style::Exact)
    }

    pub fn to_json(&self) -> String {
        let doc = Document {
            format: ACTIVATION_FORMAT.to_string(),
            version: ACTIVATION_VERSION,
            cell: CellDoc {
                u1: UnaryDoc::from(self.unary[0]),
                u2: UnaryDoc::from(self.unary[1]),
                u3: UnaryDoc::from(self.unary[2]),
                u4: UnaryDoc::from(self.unary[3]),
                b_bot: BinaryDoc::from(self.binary[0]),
                b_top: BinaryDoc::from(self.binary[1]),
            },
            provenance: self.provenance.clone(),
            formula: self.formula(),
            formula_exact: self.formula_exact(),
        };
        serde_json::to_string_pretty(&doc).expect("activation documents always serialize")
    }

    /// Parses a document written by [`to_json`](Self::to_json). The
    /// formula fields are derived data and are not consulted.
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        let doc: Document = serde_json::from_str(text)?;
        if doc.format != ACTIVATION_FORMAT || doc.version != ACTIVATION_VERSION {
            return Err(serde::de::Error::custom(format!(
                "unsupported activation document {} v{}",
                doc.format, doc.version
            )));
        }
        let c = doc.cell;
        Ok(Self::new(
            [c.u1.into(), c.u2.into(), c.u3.into(), c.u4.into()],
            [c.b_bot.into(), c.b_top.into()],
            doc.provenance,
        ))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Document {
    format: String,
    version: u32,
    cell: CellDoc,
    provenance: Provenance,
    formula: String,
    formula_exact: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CellDoc {
    u1: UnaryDoc,
    u2: UnaryDoc,
    u3: UnaryDoc,
    u4: UnaryDoc,
    b_bot: BinaryDoc,
    b_top: BinaryDoc,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct UnaryDoc {
    op: UnaryOpId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gamma: Option<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BinaryDoc {
    op: BinaryOpId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gamma: Option<f64>,
}

impl From<(UnaryOpId, f64)> for UnaryDoc {
    fn from((op, g): (UnaryOpId, f64)) -> Self {
        Self {
            op,
            gamma: op.takes_gamma().then_some(g),
        }
    }
}

impl From<UnaryDoc> for (UnaryOpId, f64) {
    fn from(d: UnaryDoc) -> Self {
        (d.op, d.gamma.unwrap_or_else(|| d.op.initial_gamma()))
    }
}

impl From<(BinaryOpId, f64)> for BinaryDoc {
    fn from((op, g): (BinaryOpId, f64)) -> Self {
        Self {
            op,
            gamma: op.takes_gamma().then_some(g),
        }
    }
}

impl From<BinaryDoc> for (BinaryOpId, f64) {
    fn from(d: BinaryDoc) -> Self {
        (d.op, d.gamma.unwrap_or_else(|| d.op.initial_gamma()))
    }
}
