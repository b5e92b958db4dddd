//! Kernel program model: loop nests, typed statements, arrays and affine
//! accesses, plus pragma configurations over them.

mod config;
mod parse;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

pub use config::{
    enumerate_configs, validate_config, ArrayPartition, LoopPragma, PartitionKind, PragmaConfig,
    Violation, DEFAULT_FACTORS,
};
pub use parse::parse_kernel;

/// Operation vocabulary of kernel statements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpType {
    Add,
    Sub,
    Mul,
    Div,
    FAdd,
    FSub,
    FMul,
    FDiv,
    ICmp,
    FCmp,
    Select,
    Load,
    Store,
    Phi,
    Br,
}

impl OpType {
    pub const ALL: [OpType; 15] = [
        OpType::Add,
        OpType::Sub,
        OpType::Mul,
        OpType::Div,
        OpType::FAdd,
        OpType::FSub,
        OpType::FMul,
        OpType::FDiv,
        OpType::ICmp,
        OpType::FCmp,
        OpType::Select,
        OpType::Load,
        OpType::Store,
        OpType::Phi,
        OpType::Br,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpType::Add => "add",
            OpType::Sub => "sub",
            OpType::Mul => "mul",
            OpType::Div => "div",
            OpType::FAdd => "fadd",
            OpType::FSub => "fsub",
            OpType::FMul => "fmul",
            OpType::FDiv => "fdiv",
            OpType::ICmp => "icmp",
            OpType::FCmp => "fcmp",
            OpType::Select => "select",
            OpType::Load => "load",
            OpType::Store => "store",
            OpType::Phi => "phi",
            OpType::Br => "br",
        }
    }

    pub fn from_name(s: &str) -> Option<OpType> {
        OpType::ALL.iter().copied().find(|op| op.name() == s)
    }

    pub fn is_memory(self) -> bool {
        matches!(self, OpType::Load | OpType::Store)
    }

    /// Arithmetic operations are the only ones carrying resource cost in
    /// the operation library.
    pub fn is_arithmetic(self) -> bool {
        matches!(
            self,
            OpType::Add
                | OpType::Sub
                | OpType::Mul
                | OpType::Div
                | OpType::FAdd
                | OpType::FSub
                | OpType::FMul
                | OpType::FDiv
        )
    }
}

impl fmt::Display for OpType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElementType {
    I32,
    F32,
}

impl fmt::Display for ElementType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ElementType::I32 => "i32",
            ElementType::F32 => "f32",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArraySpec {
    pub id: String,
    pub dims: Vec<u64>,
    pub element_type: ElementType,
    /// Physical ports per memory bank (dual-port by default).
    pub base_ports: u32,
}

pub const DEFAULT_BASE_PORTS: u32 = 2;

/// A declared loop-carried dependence between two statements.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DependenceSpec {
    pub src: String,
    pub dst: String,
    pub delay: u32,
    pub distance: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct AffineExpr {
    pub coeffs: BTreeMap<String, i64>,
    pub constant: i64,
}

impl AffineExpr {
    pub fn eval(&self, env: impl Fn(&str) -> i64) -> i64 {
        self.constant
            + self
                .coeffs
                .iter()
                .map(|(var, c)| c * env(var))
                .sum::<i64>()
    }
}

impl fmt::Display for AffineExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for (var, &c) in &self.coeffs {
            if c == 0 {
                continue;
            }
            let mag = c.unsigned_abs();
            if first {
                if c < 0 {
                    f.write_str("-")?;
                }
            } else {
                f.write_str(if c < 0 { " - " } else { " + " })?;
            }
            if mag == 1 {
                write!(f, "{var}")?;
            } else {
                write!(f, "{mag}*{var}")?;
            }
            first = false;
        }
        if first {
            write!(f, "{}", self.constant)
        } else if self.constant > 0 {
            write!(f, " + {}", self.constant)
        } else if self.constant < 0 {
            write!(f, " - {}", self.constant.unsigned_abs())
        } else {
            Ok(())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Index {
    Affine(AffineExpr),
    Dynamic,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AccessExpr {
    pub array: String,
    pub indices: Vec<Index>,
}

impl AccessExpr {
    pub fn is_dynamic(&self) -> bool {
        self.indices.iter().any(|i| matches!(i, Index::Dynamic))
    }

    /// Loop variables referenced by any affine index.
    pub fn loop_vars(&self) -> impl Iterator<Item = &str> {
        self.indices.iter().flat_map(|i| match i {
            Index::Affine(e) => e
                .coeffs
                .iter()
                .filter(|(_, c)| **c != 0)
                .map(|(v, _)| v.as_str())
                .collect::<Vec<_>>(),
            Index::Dynamic => Vec::new(),
        })
    }
}

impl fmt::Display for AccessExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.array)?;
        for idx in &self.indices {
            match idx {
                Index::Affine(e) => write!(f, "[{e}]")?,
                Index::Dynamic => f.write_str("[dyn]")?,
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Operand {
    /// A previously defined statement or an enclosing loop variable.
    Value(String),
    Access(AccessExpr),
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operand::Value(v) => f.write_str(v),
            Operand::Access(a) => a.fmt(f),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Statement {
    pub id: String,
    pub op: OpType,
    pub operands: Vec<Operand>,
}

impl Statement {
    /// The memory access of a load/store; `None` for every other op.
    pub fn access(&self) -> Option<&AccessExpr> {
        self.operands.iter().find_map(|o| match o {
            Operand::Access(a) => Some(a),
            Operand::Value(_) => None,
        })
    }

    pub fn value_operands(&self) -> impl Iterator<Item = &str> {
        self.operands.iter().filter_map(|o| match o {
            Operand::Value(v) => Some(v.as_str()),
            Operand::Access(_) => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BodyItem {
    Stmt(Statement),
    Loop(LoopSpec),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LoopSpec {
    pub id: String,
    pub tripcount: u64,
    pub body: Vec<BodyItem>,
}

impl LoopSpec {
    pub fn statements(&self) -> impl Iterator<Item = &Statement> {
        self.body.iter().filter_map(|b| match b {
            BodyItem::Stmt(s) => Some(s),
            BodyItem::Loop(_) => None,
        })
    }

    pub fn children(&self) -> impl Iterator<Item = &LoopSpec> {
        self.body.iter().filter_map(|b| match b {
            BodyItem::Loop(l) => Some(l),
            BodyItem::Stmt(_) => None,
        })
    }

    pub fn has_children(&self) -> bool {
        self.children().next().is_some()
    }

    /// A perfect nest level holds exactly one child loop and nothing else.
    pub fn is_perfect(&self) -> bool {
        matches!(self.body.as_slice(), [BodyItem::Loop(_)])
    }

    /// This loop and all loops below it, preorder.
    pub fn subtree(&self) -> Vec<&LoopSpec> {
        let mut out = vec![self];
        for c in self.children() {
            out.extend(c.subtree());
        }
        out
    }

    /// All statements in this loop and its descendants, program order.
    pub fn all_statements(&self) -> Vec<&Statement> {
        let mut out = Vec::new();
        for item in &self.body {
            match item {
                BodyItem::Stmt(s) => out.push(s),
                BodyItem::Loop(l) => out.extend(l.all_statements()),
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KernelSpec {
    pub name: String,
    pub arrays: Vec<ArraySpec>,
    pub deps: Vec<DependenceSpec>,
    pub root_loops: Vec<LoopSpec>,
}

impl KernelSpec {
    /// Every loop in preorder.
    pub fn loops(&self) -> Vec<&LoopSpec> {
        self.root_loops.iter().flat_map(|l| l.subtree()).collect()
    }

    pub fn find_loop(&self, id: &str) -> Option<&LoopSpec> {
        self.loops().into_iter().find(|l| l.id == id)
    }

    pub fn array(&self, id: &str) -> Option<&ArraySpec> {
        self.arrays.iter().find(|a| a.id == id)
    }

    /// Parent loop id of every loop (`None` for roots).
    pub fn parents(&self) -> BTreeMap<String, Option<String>> {
        fn walk(l: &LoopSpec, parent: Option<&str>, out: &mut BTreeMap<String, Option<String>>) {
            out.insert(l.id.clone(), parent.map(str::to_string));
            for c in l.children() {
                walk(c, Some(&l.id), out);
            }
        }
        let mut out = BTreeMap::new();
        for l in &self.root_loops {
            walk(l, None, &mut out);
        }
        out
    }

    /// Loop depth of the deepest nest (1 for a flat loop).
    pub fn max_depth(&self) -> usize {
        fn depth(l: &LoopSpec) -> usize {
            1 + l.children().map(depth).max().unwrap_or(0)
        }
        self.root_loops.iter().map(depth).max().unwrap_or(0)
    }
}

impl fmt::Display for KernelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn write_loop(f: &mut fmt::Formatter<'_>, l: &LoopSpec, indent: usize) -> fmt::Result {
            let pad = "  ".repeat(indent);
            writeln!(f, "{pad}loop {} in 0..{} {{", l.id, l.tripcount)?;
            for item in &l.body {
                match item {
                    BodyItem::Loop(c) => write_loop(f, c, indent + 1)?,
                    BodyItem::Stmt(s) => {
                        let ops = s
                            .operands
                            .iter()
                            .map(|o| o.to_string())
                            .collect::<Vec<_>>()
                            .join(", ");
                        writeln!(f, "{pad}  {} = {} {};", s.id, s.op, ops)?;
                    }
                }
            }
            writeln!(f, "{pad}}}")
        }

        writeln!(f, "kernel {} {{", self.name)?;
        for a in &self.arrays {
            write!(f, "  array {}", a.id)?;
            for d in &a.dims {
                write!(f, "[{d}]")?;
            }
            write!(f, ": {}", a.element_type)?;
            if a.base_ports != DEFAULT_BASE_PORTS {
                write!(f, " ports {}", a.base_ports)?;
            }
            writeln!(f, ";")?;
        }
        for d in &self.deps {
            writeln!(
                f,
                "  dep {} -> {} delay {} distance {};",
                d.src, d.dst, d.delay, d.distance
            )?;
        }
        for l in &self.root_loops {
            write_loop(f, l, 1)?;
        }
        writeln!(f, "}}")
    }
}
