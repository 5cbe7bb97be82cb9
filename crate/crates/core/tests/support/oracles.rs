//! Independent reference computations used to cross-check the core crate.
//!
//! Nothing here calls into the builder or the distance routine. The shape
//! oracle re-derives every tensor shape from explicit convolution arithmetic
//! (padding, stride, kernel) and works directly from the encoded module
//! string; the distance oracle enumerates every alignment.

#![allow(dead_code)]

/// (op label, in (h, w, c), out (h, w, c), params)
pub type OracleRow = (String, (usize, usize, usize), (usize, usize, usize), usize);

/// Output size of a 2D convolution along one axis.
fn conv_out(size: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - kernel) / stride + 1
}

/// Output size of a transposed convolution along one axis.
fn conv_transpose_out(size: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (size - 1) * stride - 2 * pad + kernel
}

fn params(kernel: usize, c_in: usize, c_out: usize) -> usize {
    kernel * kernel * c_in * c_out + c_out
}

/// Module layers straight from the text: `Some((kernel, filters))` for convs.
fn tokens(module: &str) -> Vec<Option<(usize, usize)>> {
    module
        .split(',')
        .map(|tok| {
            if tok == "dropout2d" {
                None
            } else {
                let (kind, filters) = tok.split_once(':').unwrap();
                let kernel = kind[..1].parse::<usize>().unwrap();
                Some((kernel, filters.parse().unwrap()))
            }
        })
        .collect()
}

/// Expected encoder and decoder rows for `module` on `input` with `reductions`.
pub fn expected_plan(
    module: &str,
    input: (usize, usize, usize),
    reductions: u32,
) -> (Vec<OracleRow>, Vec<OracleRow>) {
    let layers = tokens(module);
    let mut enc = Vec::new();
    let (mut h, mut w, mut c) = input;
    let mut channel_history = vec![c];
    for layer in &layers {
        match *layer {
            Some((k, f)) => {
                let pad = (k - 1) / 2;
                let (nh, nw) = (conv_out(h, k, 1, pad), conv_out(w, k, 1, pad));
                enc.push((format!("conv{k}x{k}:{f}"), (h, w, c), (nh, nw, f), params(k, c, f)));
                enc.push(("relu".into(), (nh, nw, f), (nh, nw, f), 0));
                h = nh;
                w = nw;
                c = f;
            }
            None => enc.push(("dropout2d:0.5".into(), (h, w, c), (h, w, c), 0)),
        }
        channel_history.push(c);
    }
    for _ in 0..reductions {
        enc.push((format!("reduce1x1:{}", 2 * c), (h, w, c), (h, w, 2 * c), params(1, c, 2 * c)));
        enc.push(("relu".into(), (h, w, 2 * c), (h, w, 2 * c), 0));
        let (nh, nw) = (conv_out(h, 2, 2, 0), conv_out(w, 2, 2, 0));
        enc.push(("maxpool2x2s2".into(), (h, w, 2 * c), (nh, nw, 2 * c), 0));
        h = nh;
        w = nw;
        c *= 2;
    }

    // decoder before activations
    let mut body: Vec<OracleRow> = Vec::new();
    for _ in 0..reductions {
        let (nh, nw) = (conv_transpose_out(h, 2, 2, 0), conv_transpose_out(w, 2, 2, 0));
        body.push((format!("convtranspose2x2s2:{c}"), (h, w, c), (nh, nw, c), params(2, c, c)));
        body.push((format!("dilate1x1:{}", c / 2), (nh, nw, c), (nh, nw, c / 2), params(1, c, c / 2)));
        h = nh;
        w = nw;
        c /= 2;
    }
    for (idx, layer) in layers.iter().enumerate().rev() {
        match *layer {
            Some((k, _)) => {
                let target = channel_history[idx];
                body.push((format!("conv{k}x{k}:{target}"), (h, w, c), (h, w, target), params(k, c, target)));
                c = target;
            }
            None => body.push(("dropout2d:0.5".into(), (h, w, c), (h, w, c), 0)),
        }
    }
    let is_conv = |label: &str| {
        label.starts_with("conv") || label.starts_with("dilate") || label.starts_with("reduce")
    };
    let last_conv = body.iter().rposition(|r| is_conv(&r.0));
    let mut dec = Vec::new();
    for (i, row) in body.into_iter().enumerate() {
        let relu = (row.0.starts_with("conv") && !row.0.starts_with("convtranspose")
            || row.0.starts_with("dilate"))
            && Some(i) != last_conv;
        let out = row.2;
        dec.push(row);
        if relu {
            dec.push(("relu".into(), out, out, 0));
        }
    }
    dec.push(("tanh".into(), (h, w, c), (h, w, c), 0));
    (enc, dec)
}

/// Substitution cost computed from token text alone.
fn token_cost(a: &str, b: &str) -> f64 {
    if a == b {
        0.0
    } else if a.split(':').next() == b.split(':').next() {
        0.5
    } else {
        1.0
    }
}

/// Minimum-cost alignment of two token sequences found by enumerating every
/// alignment path (no memoisation).
pub fn exhaustive_distance(a: &[&str], b: &[&str]) -> f64 {
    match (a.split_first(), b.split_first()) {
        (None, None) => 0.0,
        (Some(_), None) => a.len() as f64,
        (None, Some(_)) => b.len() as f64,
        (Some((ha, ta)), Some((hb, tb))) => {
            let sub = token_cost(ha, hb) + exhaustive_distance(ta, tb);
            let del = 1.0 + exhaustive_distance(ta, b);
            let ins = 1.0 + exhaustive_distance(a, tb);
            sub.min(del).min(ins)
        }
    }
}

/// All 17 layer tokens.
pub fn all_tokens() -> Vec<String> {
    let mut out = Vec::new();
    for k in [1, 3, 5, 7] {
        for f in [8, 16, 32, 64] {
            out.push(format!("{k}x{k}conv2d:{f}"));
        }
    }
    out.push("dropout2d".into());
    out
}

/// The 306 modules of length one or two, as encoded strings.
pub fn short_modules() -> Vec<String> {
    let tokens = all_tokens();
    let mut out: Vec<String> = tokens.clone();
    for a in &tokens {
        for b in &tokens {
            out.push(format!("{a},{b}"));
        }
    }
    out
}
