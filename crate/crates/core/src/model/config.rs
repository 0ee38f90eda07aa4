// Line-oriented model config files.
//
//   # comment
//   family = supermarket          linear | qbd | gim1 | mg1 | supermarket | bistable | expression
//   levels = 32                   truncation level L
//   phases = uniform(1)           or boundary(m0, m), or [m0, m1, ..., mL]
//   lambda = 0.9                  family parameters
//   max_jump = 16
//   block A0 = [[1, 0], [0, tail(1)]]
//   rate (0,1) -> (1,1) = 0.5 * tail(1)
//   matrix = [[-1, 1], [1, -1]]   linear family only
//
// A value whose brackets are unbalanced continues on the following lines.

use std::collections::BTreeMap;

use nalgebra::DMatrix;

use super::{
    BistableParams, ExprMatrix, FeatureExpression, GeneratorSpec, RateRule, StructuredBlocks,
    SupermarketParams,
};
use crate::error::{Error, Result};
use crate::state_space::{BlockGenerator, LevelPhaseLayout};

struct Entry {
    line: usize,
    value: String,
}

fn cfg_err(line: usize, message: impl Into<String>) -> Error {
    Error::Config {
        line,
        message: message.into(),
    }
}

fn bracket_balance(s: &str) -> i64 {
    s.chars().fold(0, |acc, c| match c {
        '[' | '(' => acc + 1,
        ']' | ')' => acc - 1,
        _ => acc,
    })
}

pub(super) fn parse(text: &str) -> Result<GeneratorSpec> {
    let mut params: BTreeMap<String, Entry> = BTreeMap::new();
    let mut blocks: BTreeMap<String, Entry> = BTreeMap::new();
    let mut rules: Vec<(usize, String)> = Vec::new();

    let mut lines = text.lines().enumerate().peekable();
    while let Some((idx, raw)) = lines.next() {
        let line_no = idx + 1;
        let mut line = strip_comment(raw).trim().to_string();
        if line.is_empty() {
            continue;
        }
        while bracket_balance(&line) > 0 {
            match lines.next() {
                Some((_, more)) => {
                    line.push(' ');
                    line.push_str(strip_comment(more).trim());
                }
                None => return Err(cfg_err(line_no, "unbalanced brackets")),
            }
        }
        if let Some(rest) = line.strip_prefix("rate ") {
            rules.push((line_no, rest.trim().to_string()));
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| cfg_err(line_no, "expected `key = value`"))?;
        let key = key.trim();
        let value = value.trim().to_string();
        if let Some(name) = key.strip_prefix("block ") {
            let name = name.trim().to_string();
            if blocks.contains_key(&name) {
                return Err(cfg_err(line_no, format!("block {name} given twice")));
            }
            blocks.insert(
                name,
                Entry {
                    line: line_no,
                    value,
                },
            );
        } else {
            if params.contains_key(key) {
                return Err(cfg_err(line_no, format!("`{key}` given twice")));
            }
            params.insert(
                key.to_string(),
                Entry {
                    line: line_no,
                    value,
                },
            );
        }
    }

    let family = params
        .remove("family")
        .ok_or_else(|| cfg_err(0, "missing `family`"))?;
    let max_jump = take_usize(&mut params, "max_jump")?;

    let spec = match family.value.as_str() {
        "linear" => {
            let m = params
                .remove("matrix")
                .ok_or_else(|| cfg_err(family.line, "linear family needs `matrix`"))?;
            let em = parse_matrix(&m.value, m.line)?;
            let (r, c) = em.shape();
            if r != c {
                return Err(cfg_err(m.line, "matrix must be square"));
            }
            let values = constant_entries(&em, m.line)?;
            let layout = match params.contains_key("phases") || params.contains_key("levels") {
                true => layout_from(&mut params, family.line)?,
                false => LevelPhaseLayout::uniform(r - 1, 1)?,
            };
            if layout.dim() != r {
                return Err(cfg_err(
                    m.line,
                    format!("matrix is {r}x{r} but the layout has {} states", layout.dim()),
                ));
            }
            let gen = BlockGenerator::from_off_diagonal(layout, values)
                .map_err(|e| cfg_err(m.line, e.to_string()))?;
            GeneratorSpec::linear(&gen)
        }
        "qbd" | "gim1" | "mg1" => {
            let layout = layout_from(&mut params, family.line)?;
            let mut a = Vec::new();
            let mut b = Vec::new();
            let mut seen = Vec::new();
            for (prefix, out) in [("A", &mut a), ("B", &mut b)] {
                let mut k = 0;
                while let Some(e) = blocks.get(&format!("{prefix}{k}")) {
                    out.push(parse_matrix(&e.value, e.line)?);
                    seen.push(format!("{prefix}{k}"));
                    k += 1;
                }
            }
            if let Some((name, e)) = blocks.iter().find(|(n, _)| !seen.contains(n)) {
                return Err(cfg_err(
                    e.line,
                    format!("unexpected block `{name}` (blocks are A0, A1, ... and B0, B1, ... without gaps)"),
                ));
            }
            blocks.clear();
            let sb = StructuredBlocks {
                boundary: b,
                repeating: a,
            };
            match family.value.as_str() {
                "qbd" => GeneratorSpec::qbd(layout, sb)?,
                "gim1" => GeneratorSpec::gim1(layout, sb)?,
                _ => GeneratorSpec::mg1(layout, sb)?,
            }
        }
        "supermarket" => {
            let levels = take_usize(&mut params, "levels")?
                .ok_or_else(|| cfg_err(family.line, "missing `levels`"))?;
            let d = take_usize(&mut params, "d")?.unwrap_or(2);
            let p = SupermarketParams {
                d: u32::try_from(d).map_err(|_| cfg_err(family.line, "d too large"))?,
                lambda: take_f64(&mut params, "lambda")?
                    .ok_or_else(|| cfg_err(family.line, "missing `lambda`"))?,
                mu: take_f64(&mut params, "mu")?.unwrap_or(1.0),
            };
            GeneratorSpec::supermarket(p, levels)?
        }
        "bistable" => {
            let levels = take_usize(&mut params, "levels")?.unwrap_or(40);
            let mut p = BistableParams::default();
            if let Some(v) = take_f64(&mut params, "base1")? {
                p.base[0] = v;
            }
            if let Some(v) = take_f64(&mut params, "base2")? {
                p.base[1] = v;
            }
            if let Some(v) = take_f64(&mut params, "gain")? {
                p.gain = v;
            }
            if let Some(v) = take_f64(&mut params, "half_saturation")? {
                p.half_saturation = v;
            }
            if let Some(v) = take_usize(&mut params, "hill")? {
                p.hill = v as u32;
            }
            if let Some(v) = take_f64(&mut params, "mu")? {
                p.mu = v;
            }
            if let Some(v) = take_f64(&mut params, "switching")? {
                p.switching = v;
            }
            GeneratorSpec::bistable(p, levels)?
        }
        "expression" => {
            let layout = layout_from(&mut params, family.line)?;
            let mut parsed = Vec::with_capacity(rules.len());
            for (line, text) in rules.drain(..) {
                parsed.push(parse_rule(&text, line)?);
            }
            GeneratorSpec::expression(layout, parsed)?
        }
        other => return Err(cfg_err(family.line, format!("unknown family `{other}`"))),
    };

    if let Some((k, e)) = params.iter().next() {
        return Err(cfg_err(e.line, format!("unknown or unused key `{k}`")));
    }
    if let Some((k, e)) = blocks.iter().next() {
        return Err(cfg_err(e.line, format!("block `{k}` is not used by this family")));
    }
    if let Some((line, _)) = rules.first() {
        return Err(cfg_err(*line, "`rate` entries need family = expression"));
    }
    match max_jump {
        Some(k) => spec.with_max_jump(k),
        None => Ok(spec),
    }
}

fn strip_comment(s: &str) -> &str {
    s.split_once('#').map_or(s, |(a, _)| a)
}

fn take_f64(params: &mut BTreeMap<String, Entry>, key: &str) -> Result<Option<f64>> {
    params
        .remove(key)
        .map(|e| {
            e.value
                .parse::<f64>()
                .map_err(|_| cfg_err(e.line, format!("`{key}` must be a number")))
        })
        .transpose()
}

fn take_usize(params: &mut BTreeMap<String, Entry>, key: &str) -> Result<Option<usize>> {
    params
        .remove(key)
        .map(|e| {
            e.value
                .parse::<usize>()
                .map_err(|_| cfg_err(e.line, format!("`{key}` must be a nonnegative integer")))
        })
        .transpose()
}

fn layout_from(params: &mut BTreeMap<String, Entry>, line: usize) -> Result<LevelPhaseLayout> {
    let levels = take_usize(params, "levels")?;
    let phases = params.remove("phases");
    let layout = match (levels, phases) {
        (Some(l), None) => LevelPhaseLayout::uniform(l, 1),
        (l, Some(p)) => {
            let v = p.value.replace(' ', "");
            if let Some(inner) = v.strip_prefix("uniform(").and_then(|s| s.strip_suffix(')')) {
                let m = inner
                    .parse()
                    .map_err(|_| cfg_err(p.line, "uniform(m) needs an integer"))?;
                let l = l.ok_or_else(|| cfg_err(p.line, "uniform phases need `levels`"))?;
                LevelPhaseLayout::uniform(l, m)
            } else if let Some(inner) =
                v.strip_prefix("boundary(").and_then(|s| s.strip_suffix(')'))
            {
                let (a, b) = inner
                    .split_once(',')
                    .ok_or_else(|| cfg_err(p.line, "boundary(m0, m) needs two integers"))?;
                let m0 = a.parse().map_err(|_| cfg_err(p.line, "bad m0"))?;
                let m = b.parse().map_err(|_| cfg_err(p.line, "bad m"))?;
                let l = l.ok_or_else(|| cfg_err(p.line, "boundary phases need `levels`"))?;
                LevelPhaseLayout::with_boundary(m0, m, l)
            } else if let Some(inner) = v.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                let counts = inner
                    .split(',')
                    .map(|s| s.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| cfg_err(p.line, "phase list must hold integers"))?;
                if let Some(l) = l {
                    if l + 1 != counts.len() {
                        return Err(cfg_err(p.line, "phase list length must be levels + 1"));
                    }
                }
                LevelPhaseLayout::new(counts)
            } else {
                return Err(cfg_err(p.line, "phases must be uniform(m), boundary(m0, m) or a list"));
            }
        }
        (None, None) => return Err(cfg_err(line, "missing `levels` / `phases`")),
    };
    layout.map_err(|e| cfg_err(line, e.to_string()))
}

/// Splits `s` at top-level commas (outside parentheses and brackets).
fn split_top(s: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut depth = 0i64;
    let mut start = 0;
    for (i, c) in s.char_indices() {
        match c {
            '(' | '[' => depth += 1,
            ')' | ']' => depth -= 1,
            ',' if depth == 0 => {
                out.push(&s[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    out.push(&s[start..]);
    out
}

fn parse_matrix(text: &str, line: usize) -> Result<ExprMatrix> {
    let t = text.trim();
    let inner = t
        .strip_prefix('[')
        .and_then(|s| s.strip_suffix(']'))
        .ok_or_else(|| cfg_err(line, "matrix must look like [[a, b], [c, d]]"))?;
    let mut rows = Vec::new();
    for row in split_top(inner) {
        let row = row.trim();
        let cells = row
            .strip_prefix('[')
            .and_then(|s| s.strip_suffix(']'))
            .ok_or_else(|| cfg_err(line, format!("bad matrix row `{row}`")))?;
        let exprs = split_top(cells)
            .into_iter()
            .map(|c| {
                FeatureExpression::parse(c.trim()).map_err(|e| cfg_err(line, e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(exprs);
    }
    let cols = rows[0].len();
    if rows.iter().any(|r| r.len() != cols) {
        return Err(cfg_err(line, "matrix rows have different lengths"));
    }
    let n = rows.len();
    ExprMatrix::new(n, cols, rows.into_iter().flatten().collect())
        .map_err(|e| cfg_err(line, e.to_string()))
}

fn constant_entries(m: &ExprMatrix, line: usize) -> Result<DMatrix<f64>> {
    let (r, c) = m.shape();
    let mut out = DMatrix::zeros(r, c);
    for i in 0..r {
        for j in 0..c {
            out[(i, j)] = m
                .entry(i, j)
                .constant_value()
                .ok_or_else(|| cfg_err(line, "linear matrix entries must be constants"))?;
        }
    }
    Ok(out)
}

fn parse_state(s: &str, line: usize) -> Result<(usize, usize)> {
    let inner = s
        .trim()
        .strip_prefix('(')
        .and_then(|s| s.strip_suffix(')'))
        .ok_or_else(|| cfg_err(line, format!("bad state `{s}`")))?;
    let (a, b) = inner
        .split_once(',')
        .ok_or_else(|| cfg_err(line, format!("bad state `{s}`")))?;
    let level = a.trim().parse().map_err(|_| cfg_err(line, "bad level"))?;
    let phase = b.trim().parse().map_err(|_| cfg_err(line, "bad phase"))?;
    Ok((level, phase))
}

fn parse_rule(text: &str, line: usize) -> Result<RateRule> {
    let (lhs, expr) = text
        .split_once('=')
        .ok_or_else(|| cfg_err(line, "expected `rate (k,j) -> (l,i) = expr`"))?;
    let (from, to) = lhs
        .split_once("->")
        .ok_or_else(|| cfg_err(line, "expected `->` between states"))?;
    Ok(RateRule {
        from: parse_state(from, line)?,
        to: parse_state(to, line)?,
        rate: FeatureExpression::parse(expr.trim()).map_err(|e| cfg_err(line, e.to_string()))?,
    })
}
