//! Recursive-descent front end for the kernel DSL.
//!
//! ```text
//! kernel   := "kernel" IDENT "{" array* dep* loop+ "}"
//! array    := "array" IDENT ("[" INT "]")+ ":" ("i32"|"f32") ("ports" INT)? ";"
//! dep      := "dep" IDENT "->" IDENT "delay" INT "distance" INT ";"
//! loop     := "loop" IDENT "in" "0" ".." INT "{" (stmt|loop)+ "}"
//! stmt     := IDENT "=" OPTYPE operand ("," operand)* ";"
//! operand  := IDENT | IDENT ("[" index "]")+
//! index    := affine-expr | "dyn"
//! ```
//!
//! Line comments start with `//` or `#`.

use std::collections::{BTreeMap, HashMap, HashSet};

use super::{
    AccessExpr, AffineExpr, ArraySpec, BodyItem, DependenceSpec, ElementType, Index, KernelSpec,
    LoopSpec, OpType, Operand, Statement, DEFAULT_BASE_PORTS,
};
use crate::error::{Error, ParseErrorKind, Result};

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Int(u64),
    Sym(&'static str),
    Eof,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    line: usize,
    col: usize,
}

const SYMBOLS: [&str; 13] = [
    "->", "..", "{", "}", "[", "]", ":", ";", ",", "=", "+", "-", "*",
];

fn lex(src: &str) -> Result<Vec<Token>> {
    let mut out = Vec::new();
    let chars: Vec<char> = src.chars().collect();
    let (mut i, mut line, mut col) = (0, 1, 1);
    while i < chars.len() {
        let c = chars[i];
        if c == '\n' {
            i += 1;
            line += 1;
            col = 1;
            continue;
        }
        if c.is_whitespace() {
            i += 1;
            col += 1;
            continue;
        }
        if c == '#' || (c == '/' && chars.get(i + 1) == Some(&'/')) {
            while i < chars.len() && chars[i] != '\n' {
                i += 1;
            }
            continue;
        }
        let (start_line, start_col) = (line, col);
        if c.is_ascii_alphabetic() || c == '_' {
            let mut s = String::new();
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                s.push(chars[i]);
                i += 1;
                col += 1;
            }
            out.push(Token {
                tok: Tok::Ident(s),
                line: start_line,
                col: start_col,
            });
            continue;
        }
        if c.is_ascii_digit() {
            let mut v: u64 = 0;
            while i < chars.len() && chars[i].is_ascii_digit() {
                v = v
                    .checked_mul(10)
                    .and_then(|v| v.checked_add(chars[i] as u64 - '0' as u64))
                    .ok_or_else(|| err(line, col, ParseErrorKind::Syntax, "integer overflow"))?;
                i += 1;
                col += 1;
            }
            out.push(Token {
                tok: Tok::Int(v),
                line: start_line,
                col: start_col,
            });
            continue;
        }
        let rest: String = chars[i..chars.len().min(i + 2)].iter().collect();
        match SYMBOLS.iter().find(|s| rest.starts_with(**s)) {
            Some(sym) => {
                i += sym.len();
                col += sym.len();
                out.push(Token {
                    tok: Tok::Sym(sym),
                    line: start_line,
                    col: start_col,
                });
            }
            None => {
                return Err(err(
                    line,
                    col,
                    ParseErrorKind::Syntax,
                    format!("unexpected character `{c}`"),
                ))
            }
        }
    }
    out.push(Token {
        tok: Tok::Eof,
        line,
        col,
    });
    Ok(out)
}

fn err(line: usize, col: usize, kind: ParseErrorKind, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        col,
        kind,
        msg: msg.into(),
    }
}

struct Parser {
    toks: Vec<Token>,
    pos: usize,
    /// Every identifier declared so far (kernel-wide namespace).
    declared: HashSet<String>,
    arrays: HashMap<String, usize>,
    /// Statements defined so far, in program order.
    stmts: HashSet<String>,
    /// Enclosing loop variables while parsing a body.
    scope: Vec<String>,
}

impl Parser {
    fn peek(&self) -> &Token {
        &self.toks[self.pos]
    }

    fn next(&mut self) -> Token {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn fail<T>(&self, t: &Token, kind: ParseErrorKind, msg: impl Into<String>) -> Result<T> {
        Err(err(t.line, t.col, kind, msg))
    }

    fn describe(t: &Tok) -> String {
        match t {
            Tok::Ident(s) => format!("`{s}`"),
            Tok::Int(v) => format!("`{v}`"),
            Tok::Sym(s) => format!("`{s}`"),
            Tok::Eof => "end of input".into(),
        }
    }

    fn expect_sym(&mut self, sym: &'static str) -> Result<Token> {
        let t = self.next();
        if t.tok == Tok::Sym(sym) {
            Ok(t)
        } else {
            self.fail(
                &t,
                ParseErrorKind::Syntax,
                format!("expected `{sym}`, found {}", Self::describe(&t.tok)),
            )
        }
    }

    fn expect_keyword(&mut self, kw: &str) -> Result<Token> {
        let t = self.next();
        match &t.tok {
            Tok::Ident(s) if s == kw => Ok(t),
            other => self.fail(
                &t,
                ParseErrorKind::Syntax,
                format!("expected `{kw}`, found {}", Self::describe(other)),
            ),
        }
    }

    fn expect_ident(&mut self) -> Result<(String, Token)> {
        let t = self.next();
        match &t.tok {
            Tok::Ident(s) => Ok((s.clone(), t.clone())),
            other => self.fail(
                &t,
                ParseErrorKind::Syntax,
                format!("expected identifier, found {}", Self::describe(other)),
            ),
        }
    }

    fn expect_int(&mut self) -> Result<(u64, Token)> {
        let t = self.next();
        match t.tok {
            Tok::Int(v) => Ok((v, t)),
            ref other => self.fail(
                &t,
                ParseErrorKind::Syntax,
                format!("expected integer, found {}", Self::describe(other)),
            ),
        }
    }

    fn at_keyword(&self, kw: &str) -> bool {
        matches!(&self.peek().tok, Tok::Ident(s) if s == kw)
    }

    fn at_sym(&self, sym: &str) -> bool {
        matches!(&self.peek().tok, Tok::Sym(s) if *s == sym)
    }

    fn declare(&mut self, name: &str, at: &Token) -> Result<()> {
        if !self.declared.insert(name.to_string()) {
            return self.fail(
                at,
                ParseErrorKind::Duplicate,
                format!("duplicate identifier `{name}`"),
            );
        }
        Ok(())
    }

    fn kernel(&mut self) -> Result<KernelSpec> {
        self.expect_keyword("kernel")?;
        let (name, _) = self.expect_ident()?;
        self.expect_sym("{")?;

        let mut arrays = Vec::new();
        while self.at_keyword("array") {
            arrays.push(self.array()?);
        }
        let mut deps = Vec::new();
        while self.at_keyword("dep") {
            deps.push(self.dep()?);
        }
        let mut root_loops = Vec::new();
        while self.at_keyword("loop") {
            root_loops.push(self.looop()?);
        }
        if root_loops.is_empty() {
            let t = self.peek().clone();
            return self.fail(
                &t,
                ParseErrorKind::Syntax,
                format!("expected `loop`, found {}", Self::describe(&t.tok)),
            );
        }
        self.expect_sym("}")?;
        let t = self.next();
        if t.tok != Tok::Eof {
            return self.fail(
                &t,
                ParseErrorKind::Syntax,
                format!("trailing input {}", Self::describe(&t.tok)),
            );
        }

        for (d, at) in &deps {
            for end in [&d.src, &d.dst] {
                if !self.stmts.contains(end) {
                    return self.fail(
                        at,
                        ParseErrorKind::Undeclared,
                        format!("dependence references undeclared statement `{end}`"),
                    );
                }
            }
        }

        Ok(KernelSpec {
            name,
            arrays,
            deps: deps.into_iter().map(|(d, _)| d).collect(),
            root_loops,
        })
    }

    fn array(&mut self) -> Result<ArraySpec> {
        self.expect_keyword("array")?;
        let (id, at) = self.expect_ident()?;
        self.declare(&id, &at)?;
        let mut dims = Vec::new();
        while self.at_sym("[") {
            self.next();
            let (d, t) = self.expect_int()?;
            if d == 0 {
                return self.fail(&t, ParseErrorKind::Invalid, "array dimension must be >= 1");
            }
            dims.push(d);
            self.expect_sym("]")?;
        }
        if dims.is_empty() {
            let t = self.peek().clone();
            return self.fail(&t, ParseErrorKind::Syntax, "expected `[` after array name");
        }
        self.expect_sym(":")?;
        let (ty, t) = self.expect_ident()?;
        let element_type = match ty.as_str() {
            "i32" => ElementType::I32,
            "f32" => ElementType::F32,
            _ => {
                return self.fail(
                    &t,
                    ParseErrorKind::Syntax,
                    format!("unknown element type `{ty}`"),
                )
            }
        };
        let mut base_ports = DEFAULT_BASE_PORTS;
        if self.at_keyword("ports") {
            self.next();
            let (p, t) = self.expect_int()?;
            if p == 0 || p > u32::MAX as u64 {
                return self.fail(&t, ParseErrorKind::Invalid, "port count must be >= 1");
            }
            base_ports = p as u32;
        }
        self.expect_sym(";")?;
        self.arrays.insert(id.clone(), dims.len());
        Ok(ArraySpec {
            id,
            dims,
            element_type,
            base_ports,
        })
    }

    fn dep(&mut self) -> Result<(DependenceSpec, Token)> {
        let at = self.expect_keyword("dep")?;
        let (src, _) = self.expect_ident()?;
        self.expect_sym("->")?;
        let (dst, _) = self.expect_ident()?;
        self.expect_keyword("delay")?;
        let (delay, t) = self.expect_int()?;
        if delay == 0 || delay > u32::MAX as u64 {
            return self.fail(&t, ParseErrorKind::Invalid, "delay must be >= 1");
        }
        self.expect_keyword("distance")?;
        let (distance, t) = self.expect_int()?;
        if distance == 0 || distance > u32::MAX as u64 {
            return self.fail(&t, ParseErrorKind::Invalid, "distance must be >= 1");
        }
        self.expect_sym(";")?;
        Ok((
            DependenceSpec {
                src,
                dst,
                delay: delay as u32,
                distance: distance as u32,
            },
            at,
        ))
    }

    fn looop(&mut self) -> Result<LoopSpec> {
        self.expect_keyword("loop")?;
        let (id, at) = self.expect_ident()?;
        self.declare(&id, &at)?;
        self.expect_keyword("in")?;
        let (lo, t) = self.expect_int()?;
        if lo != 0 {
            return self.fail(&t, ParseErrorKind::Syntax, "loop ranges must start at 0");
        }
        self.expect_sym("..")?;
        let (tripcount, t) = self.expect_int()?;
        if tripcount == 0 {
            return self.fail(&t, ParseErrorKind::Invalid, "tripcount must be >= 1");
        }
        self.expect_sym("{")?;
        self.scope.push(id.clone());
        let mut body = Vec::new();
        while !self.at_sym("}") {
            if self.at_keyword("loop") {
                body.push(BodyItem::Loop(self.looop()?));
            } else {
                body.push(BodyItem::Stmt(self.statement()?));
            }
        }
        let close = self.expect_sym("}")?;
        self.scope.pop();
        if body.is_empty() {
            return self.fail(&close, ParseErrorKind::Syntax, "empty loop body");
        }
        Ok(LoopSpec {
            id,
            tripcount,
            body,
        })
    }

    fn statement(&mut self) -> Result<Statement> {
        let (id, at) = self.expect_ident()?;
        self.expect_sym("=")?;
        let (opname, op_at) = self.expect_ident()?;
        let op = match OpType::from_name(&opname) {
            Some(OpType::Phi | OpType::Br) => {
                return self.fail(
                    &op_at,
                    ParseErrorKind::Invalid,
                    format!("`{opname}` nodes are synthesized per loop and cannot be written"),
                )
            }
            Some(op) => op,
            None => {
                return self.fail(
                    &op_at,
                    ParseErrorKind::Syntax,
                    format!("unknown optype `{opname}`"),
                )
            }
        };
        let mut operands = vec![self.operand()?];
        while self.at_sym(",") {
            self.next();
            operands.push(self.operand()?);
        }
        self.expect_sym(";")?;

        let accesses = operands
            .iter()
            .filter(|o| matches!(o, Operand::Access(_)))
            .count();
        let values = operands.len() - accesses;
        let shape_ok = match op {
            OpType::Load => accesses == 1 && values == 0,
            OpType::Store => accesses == 1 && values == 1,
            _ => accesses == 0,
        };
        if !shape_ok {
            let what = match op {
                OpType::Load => "load takes exactly one array access",
                OpType::Store => "store takes one array access and one value",
                _ => "only load/store may access arrays",
            };
            return self.fail(&op_at, ParseErrorKind::Invalid, what);
        }
        // Declared after operands so a statement cannot reference itself.
        self.declare(&id, &at)?;
        self.stmts.insert(id.clone());
        Ok(Statement { id, op, operands })
    }

    fn operand(&mut self) -> Result<Operand> {
        let (name, at) = self.expect_ident()?;
        if !self.at_sym("[") {
            if self.stmts.contains(&name) || self.scope.contains(&name) {
                return Ok(Operand::Value(name));
            }
            return self.fail(
                &at,
                ParseErrorKind::Undeclared,
                format!("undeclared value `{name}`"),
            );
        }
        let Some(&rank) = self.arrays.get(&name) else {
            return self.fail(
                &at,
                ParseErrorKind::Undeclared,
                format!("undeclared array `{name}`"),
            );
        };
        let mut indices = Vec::new();
        while self.at_sym("[") {
            self.next();
            indices.push(self.index()?);
            self.expect_sym("]")?;
        }
        if indices.len() != rank {
            return self.fail(
                &at,
                ParseErrorKind::DimensionMismatch,
                format!(
                    "array `{name}` has {rank} dimension(s) but is indexed with {}",
                    indices.len()
                ),
            );
        }
        Ok(Operand::Access(AccessExpr {
            array: name,
            indices,
        }))
    }

    fn index(&mut self) -> Result<Index> {
        if self.at_keyword("dyn") {
            self.next();
            return Ok(Index::Dynamic);
        }
        let mut coeffs: BTreeMap<String, i64> = BTreeMap::new();
        let mut constant = 0i64;
        let mut sign = 1i64;
        if self.at_sym("-") {
            self.next();
            sign = -1;
        }
        loop {
            let (c, var) = self.term()?;
            match var {
                Some(v) => *coeffs.entry(v).or_insert(0) += sign * c,
                None => constant += sign * c,
            }
            if self.at_sym("+") {
                sign = 1;
            } else if self.at_sym("-") {
                sign = -1;
            } else {
                break;
            }
            self.next();
        }
        coeffs.retain(|_, c| *c != 0);
        Ok(Index::Affine(AffineExpr { coeffs, constant }))
    }

    /// `INT`, `IDENT`, `INT * IDENT` or `IDENT * INT`.
    fn term(&mut self) -> Result<(i64, Option<String>)> {
        let t = self.next();
        let (coef, var) = match &t.tok {
            Tok::Int(v) => {
                if self.at_sym("*") {
                    self.next();
                    let (var, at) = self.expect_ident()?;
                    self.check_index_var(&var, &at)?;
                    (*v, Some(var))
                } else {
                    (*v, None)
                }
            }
            Tok::Ident(var) => {
                let var = var.clone();
                self.check_index_var(&var, &t)?;
                if self.at_sym("*") {
                    self.next();
                    let (v, _) = self.expect_int()?;
                    (v, Some(var))
                } else {
                    (1, Some(var))
                }
            }
            other => {
                return self.fail(
                    &t,
                    ParseErrorKind::Syntax,
                    format!("expected index term, found {}", Self::describe(other)),
                )
            }
        };
        let coef = i64::try_from(coef)
            .map_err(|_| err(t.line, t.col, ParseErrorKind::Syntax, "coefficient overflow"))?;
        Ok((coef, var))
    }

    fn check_index_var(&self, var: &str, at: &Token) -> Result<()> {
        if self.scope.iter().any(|s| s == var) {
            Ok(())
        } else {
            self.fail(
                at,
                ParseErrorKind::Undeclared,
                format!("index uses `{var}`, which is not an enclosing loop variable"),
            )
        }
    }
}

/// Parse and validate a kernel written in the loop-nest DSL.
pub fn parse_kernel(text: &str) -> Result<KernelSpec> {
    let toks = lex(text)?;
    let mut p = Parser {
        toks,
        pos: 0,
        declared: HashSet::new(),
        arrays: HashMap::new(),
        stmts: HashSet::new(),
        scope: Vec::new(),
    };
    p.kernel()
}
