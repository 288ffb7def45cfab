//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use pfnas::autograd::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(r: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

/// Values in [-1, 1] kept at least `gap` away from zero.
pub fn away_from_zero(r: &mut impl Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = r.random_range(gap..1.0);
            if r.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Distinct values in [-1, 1] whose pairwise gaps are at least 2/(n+1) apart, randomly placed.
pub fn well_separated(r: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n)
        .map(|i| -1.0 + 2.0 * (i as f64 + 1.0) / (n as f64 + 1.0))
        .collect();
    data.shuffle(r);
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Plain nested-loop cross-correlation, `input [N,C,H,W]`, `kernel [F,C/g,kh,kw]`.
pub fn naive_conv(
    input: &Tensor<f64>,
    kernel: &Tensor<f64>,
    stride: usize,
    pad: usize,
    dil: usize,
    groups: usize,
) -> Tensor<f64> {
    let s = input.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let k = kernel.shape();
    let (f, cg, kh, kw) = (k[0], k[1], k[2], k[3]);
    let oh = (h + 2 * pad - dil * (kh - 1) - 1) / stride + 1;
    let ow = (w + 2 * pad - dil * (kw - 1) - 1) / stride + 1;
    let fg = f / groups;
    let x = input.data();
    let kd = kernel.data();
    let mut out = vec![0.0; n * f * oh * ow];
    for b in 0..n {
        for o in 0..f {
            let g = o / fg;
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..cg {
                        let cin = g * cg + ci;
                        for u in 0..kh {
                            for v in 0..kw {
                                let y = (i * stride + u * dil) as isize - pad as isize;
                                let xx = (j * stride + v * dil) as isize - pad as isize;
                                if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                                    continue;
                                }
                                acc += x[((b * c + cin) * h + y as usize) * w + xx as usize]
                                    * kd[((o * cg + ci) * kh + u) * kw + v];
                            }
                        }
                    }
                    out[((b * f + o) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, f, oh, ow], out).unwrap()
}

/// Window-loop pooling. Average pooling divides by k*k; max pooling skips padding.
pub fn naive_pool(input: &Tensor<f64>, max: bool, k: usize, stride: usize, pad: usize) -> Tensor<f64> {
    let s = input.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        for i in 0..oh {
            for j in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut sum = 0.0;
                for u in 0..k {
                    for v in 0..k {
                        let y = (i * stride + u) as isize - pad as isize;
                        let xx = (j * stride + v) as isize - pad as isize;
                        if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                            continue;
                        }
                        let val = x[plane * h * w + y as usize * w + xx as usize];
                        best = best.max(val);
                        sum += val;
                    }
                }
                out.push(if max { best } else { sum / (k * k) as f64 });
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Builds `sum(weights * f(inputs))` on a fresh tape and returns its value.
fn weighted_loss(
    inputs: &[Tensor<f64>],
    weights: &Tensor<f64>,
    build: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var,
    grad: bool,
) -> (Tape<f64>, Var, Vec<Var>) {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), grad)).collect();
    let out = build(&mut tape, &vars);
    let wv = tape.constant(weights.clone());
    let prod = tape.mul(out, wv).unwrap();
    let loss = tape.sum(prod).unwrap();
    (tape, loss, vars)
}

/// Worst relative error between reverse-mode and central-difference gradients over all
/// inputs: `max|analytic - numeric| / max(max|numeric|, 1e-6)`, per input tensor.
pub fn gradcheck(inputs: &[Tensor<f64>], build: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var, seed: u64, h: f64) -> f64 {
    let probe = {
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = build(&mut tape, &vars);
        tape.shape(out).to_vec()
    };
    let weights = uniform(&mut rng(seed ^ 0xABCD), &probe, -1.0, 1.0);
    let (mut tape, loss, vars) = weighted_loss(inputs, &weights, build, true);
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).expect("gradient for every input").data().to_vec();
        let mut numeric = Vec::with_capacity(input.numel());
        for j in 0..input.numel() {
            let eval = |delta: f64| {
                let mut shifted = inputs.to_vec();
                shifted[i].data_mut()[j] += delta;
                let (tape, loss, _) = weighted_loss(&shifted, &weights, build, false);
                tape.value(loss).data()[0]
            };
            numeric.push((eval(h) - eval(-h)) / (2.0 * h));
        }
        let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-6);
        worst = worst.max(max_abs_diff(&analytic, &numeric) / scale);
    }
    worst
}

/// Minimal DOT checker: a sequence of `digraph <id> { stmt* }` blocks where every statement
/// is an attribute/node/edge statement with balanced quotes and brackets, ended by `;`.
pub fn check_dot(text: &str) -> Result<usize, String> {
    let mut graphs = 0;
    let mut rest = text.trim();
    while !rest.is_empty() {
        let body_start = rest.find('{').ok_or("missing `{`")?;
        let head: Vec<&str> = rest[..body_start].split_whitespace().collect();
        if head.len() != 2 || head[0] != "digraph" || !is_id(head[1]) {
            return Err(format!("bad graph header {head:?}"));
        }
        let body_end = matching_brace(rest, body_start)?;
        for stmt in split_statements(&rest[body_start + 1..body_end])? {
            check_statement(stmt)?;
        }
        graphs += 1;
        rest = rest[body_end + 1..].trim();
    }
    if graphs == 0 {
        return Err("no graphs".into());
    }
    Ok(graphs)
}

fn is_id(s: &str) -> bool {
    let quoted = s.len() >= 2 && s.starts_with('"') && s.ends_with('"') && !s[1..s.len() - 1].contains('"');
    let bare = !s.is_empty()
        && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
        && !s.starts_with(|c: char| c.is_ascii_digit() && s.chars().any(|d| d.is_ascii_alphabetic()));
    quoted || bare
}

fn matching_brace(s: &str, open: usize) -> Result<usize, String> {
    let mut depth = 0;
    let mut quoted = false;
    for (i, ch) in s[open..].char_indices() {
        match ch {
            '"' => quoted = !quoted,
            '{' if !quoted => depth += 1,
            '}' if !quoted => {
                depth -= 1;
                if depth == 0 {
                    return Ok(open + i);
                }
            }
            _ => {}
        }
    }
    Err("unbalanced braces".into())
}

fn split_statements(body: &str) -> Result<Vec<&str>, String> {
    let mut out = Vec::new();
    let mut quoted = false;
    let mut start = 0;
    for (i, ch) in body.char_indices() {
        match ch {
            '"' => quoted = !quoted,
            ';' if !quoted => {
                out.push(body[start..i].trim());
                start = i + 1;
            }
            _ => {}
        }
    }
    if quoted {
        return Err("unterminated string".into());
    }
    if !body[start..].trim().is_empty() {
        return Err(format!("statement without `;`: {}", body[start..].trim()));
    }
    Ok(out.into_iter().filter(|s| !s.is_empty()).collect())
}

fn tokenize(stmt: &str) -> Result<Vec<String>, String> {
    let mut tokens = Vec::new();
    let mut chars = stmt.chars().peekable();
    while let Some(&c) = chars.peek() {
        if c.is_whitespace() {
            chars.next();
        } else if c == '"' {
            let mut s = String::from('"');
            chars.next();
            loop {
                match chars.next() {
                    Some('"') => break,
                    Some(ch) => s.push(ch),
                    None => return Err("unterminated string".into()),
                }
            }
            s.push('"');
            tokens.push(s);
        } else if "[]=,".contains(c) {
            tokens.push(c.to_string());
            chars.next();
        } else if c == '-' {
            chars.next();
            if chars.next() != Some('>') {
                return Err("expected `->`".into());
            }
            tokens.push("->".into());
        } else {
            let mut s = String::new();
            while let Some(&ch) = chars.peek() {
                if ch.is_whitespace() || "[]=,\"".contains(ch) || ch == '-' {
                    break;
                }
                s.push(ch);
                chars.next();
            }
            tokens.push(s);
        }
    }
    Ok(tokens)
}

fn check_attrs(tokens: &[String]) -> Result<(), String> {
    if tokens.first().map(String::as_str) != Some("[") || tokens.last().map(String::as_str) != Some("]") {
        return Err(format!("bad attribute list {tokens:?}"));
    }
    let inner = &tokens[1..tokens.len() - 1];
    for pair in inner.split(|t| t == ",") {
        if pair.len() != 3 || pair[1] != "=" || !is_id(&pair[0]) || !is_id(&pair[2]) {
            return Err(format!("bad attribute {pair:?}"));
        }
    }
    Ok(())
}

fn check_statement(stmt: &str) -> Result<(), String> {
    let t = tokenize(stmt)?;
    if t.len() == 3 && t[1] == "=" {
        return if is_id(&t[0]) && is_id(&t[2]) {
            Ok(())
        } else {
            Err(format!("bad assignment {stmt}"))
        };
    }
    let attrs_at = t.iter().position(|x| x == "[").unwrap_or(t.len());
    let (ids, attrs) = t.split_at(attrs_at);
    if !attrs.is_empty() {
        check_attrs(attrs)?;
    }
    if ids.is_empty() {
        return Err(format!("empty statement {stmt}"));
    }
    if matches!(ids[0].as_str(), "graph" | "node" | "edge") && ids.len() == 1 {
        return Ok(());
    }
    for (i, tok) in ids.iter().enumerate() {
        let ok = if i % 2 == 0 { is_id(tok) } else { tok == "->" };
        if !ok {
            return Err(format!("bad node/edge statement {stmt}"));
        }
    }
    if ids.len() % 2 == 0 {
        return Err(format!("dangling edge operator in {stmt}"));
    }
    Ok(())
}

/// Number of `a -> b [label=...]` edges per graph.
pub fn labeled_edges(text: &str) -> Vec<usize> {
    text.split("digraph")
        .skip(1)
        .map(|g| g.lines().filter(|l| l.contains("->") && l.contains("label")).count())
        .collect()
}

pub mod primitives;
