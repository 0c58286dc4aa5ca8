//! Weight container: a UTF-8 `key=value` header terminated by a blank line,
//! then little-endian `f64` tensor data, row-major.
//!
//! ```text
//! salient-encoder v1
//! num_layers=2
//! num_heads=2
//! hidden_dim=16
//! ffn_dim=32
//! vocab_size=40
//! max_positions=24
//! num_classes=2
//! ln_epsilon=1e-12
//! activation=gelu
//! tensor=embeddings.token 40,16 0
//! tensor=embeddings.position 24,16 5120
//! ...
//!
//! <data>
//! ```
//!
//! Tensor offsets are in bytes, relative to the first byte after the blank
//! line. The writer emits tensors contiguously in canonical order.

use std::collections::HashMap;

use ndarray::{Array1, Array2, ArrayViewD};

use super::{EncoderBundle, EncoderConfig, EncoderLayer, LayerNorm, ModelError};

pub const FORMAT_MAGIC: &str = "salient-encoder v1";

/// Canonical tensor list in file order.
pub(crate) fn tensors<'a>(bundle: &'a EncoderBundle) -> Vec<(String, Vec<usize>, ArrayViewD<'a, f64>)> {
    let mut out = Vec::new();
    let mut push = |name: String, view: ArrayViewD<'a, f64>| {
        out.push((name, view.shape().to_vec(), view));
    };
    push("embeddings.token".into(), bundle.token_embeddings.view().into_dyn());
    push("embeddings.position".into(), bundle.position_embeddings.view().into_dyn());
    push("embeddings.ln.gamma".into(), bundle.embedding_ln.gamma.view().into_dyn());
    push("embeddings.ln.beta".into(), bundle.embedding_ln.beta.view().into_dyn());
    for (l, layer) in bundle.layers.iter().enumerate() {
        let p = format!("layers.{l}");
        push(format!("{p}.attn.query.weight"), layer.w_q.view().into_dyn());
        push(format!("{p}.attn.query.bias"), layer.b_q.view().into_dyn());
        push(format!("{p}.attn.key.weight"), layer.w_k.view().into_dyn());
        push(format!("{p}.attn.key.bias"), layer.b_k.view().into_dyn());
        push(format!("{p}.attn.value.weight"), layer.w_v.view().into_dyn());
        push(format!("{p}.attn.value.bias"), layer.b_v.view().into_dyn());
        push(format!("{p}.attn.output.weight"), layer.w_o.view().into_dyn());
        push(format!("{p}.attn.output.bias"), layer.b_o.view().into_dyn());
        push(format!("{p}.attn.ln.gamma"), layer.attn_ln.gamma.view().into_dyn());
        push(format!("{p}.attn.ln.beta"), layer.attn_ln.beta.view().into_dyn());
        push(format!("{p}.ffn.up.weight"), layer.w_ffn1.view().into_dyn());
        push(format!("{p}.ffn.up.bias"), layer.b_ffn1.view().into_dyn());
        push(format!("{p}.ffn.down.weight"), layer.w_ffn2.view().into_dyn());
        push(format!("{p}.ffn.down.bias"), layer.b_ffn2.view().into_dyn());
        push(format!("{p}.ffn.ln.gamma"), layer.ffn_ln.gamma.view().into_dyn());
        push(format!("{p}.ffn.ln.beta"), layer.ffn_ln.beta.view().into_dyn());
    }
    push("classifier.weight".into(), bundle.w_cls.view().into_dyn());
    push("classifier.bias".into(), bundle.b_cls.view().into_dyn());
    out
}

fn expected_names(config: &EncoderConfig) -> Vec<String> {
    let mut names: Vec<String> = [
        "embeddings.token",
        "embeddings.position",
        "embeddings.ln.gamma",
        "embeddings.ln.beta",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for l in 0..config.num_layers {
        for suffix in [
            "attn.query.weight",
            "attn.query.bias",
            "attn.key.weight",
            "attn.key.bias",
            "attn.value.weight",
            "attn.value.bias",
            "attn.output.weight",
            "attn.output.bias",
            "attn.ln.gamma",
            "attn.ln.beta",
            "ffn.up.weight",
            "ffn.up.bias",
            "ffn.down.weight",
            "ffn.down.bias",
            "ffn.ln.gamma",
            "ffn.ln.beta",
        ] {
            names.push(format!("layers.{l}.{suffix}"));
        }
    }
    names.push("classifier.weight".into());
    names.push("classifier.bias".into());
    names
}

pub(crate) fn expected_shape(config: &EncoderConfig, name: &str) -> Option<Vec<usize>> {
    let d = config.hidden_dim;
    let f = config.ffn_dim;
    let shape = match name {
        "embeddings.token" => vec![config.vocab_size, d],
        "embeddings.position" => vec![config.max_positions, d],
        "embeddings.ln.gamma" | "embeddings.ln.beta" => vec![d],
        "classifier.weight" => vec![config.num_classes, d],
        "classifier.bias" => vec![config.num_classes],
        _ => {
            let rest = name.strip_prefix("layers.")?;
            let (index, suffix) = rest.split_once('.')?;
            if index.parse::<usize>().ok()? >= config.num_layers {
                return None;
            }
            match suffix {
                "attn.query.weight" | "attn.key.weight" | "attn.value.weight" | "attn.output.weight" => {
                    vec![d, d]
                }
                "attn.query.bias" | "attn.key.bias" | "attn.value.bias" | "attn.output.bias" => vec![d],
                "attn.ln.gamma" | "attn.ln.beta" | "ffn.ln.gamma" | "ffn.ln.beta" => vec![d],
                "ffn.up.weight" => vec![d, f],
                "ffn.up.bias" => vec![f],
                "ffn.down.weight" => vec![f, d],
                "ffn.down.bias" => vec![d],
                _ => return None,
            }
        }
    };
    Some(shape)
}

pub fn write_bundle(bundle: &EncoderBundle) -> Vec<u8> {
    let c = &bundle.config;
    let mut header = format!(
        "{FORMAT_MAGIC}\nnum_layers={}\nnum_heads={}\nhidden_dim={}\nffn_dim={}\nvocab_size={}\n\
         max_positions={}\nnum_classes={}\nln_epsilon={:e}\nactivation={}\n",
        c.num_layers,
        c.num_heads,
        c.hidden_dim,
        c.ffn_dim,
        c.vocab_size,
        c.max_positions,
        c.num_classes,
        c.ln_epsilon,
        c.activation
    );
    let list = tensors(bundle);
    let mut offset = 0usize;
    for (name, shape, view) in &list {
        let dims: Vec<String> = shape.iter().map(usize::to_string).collect();
        header.push_str(&format!("tensor={name} {} {offset}\n", dims.join(",")));
        offset += view.len() * 8;
    }
    header.push('\n');
    let mut bytes = header.into_bytes();
    bytes.reserve(offset);
    for (_, _, view) in &list {
        for v in view.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    bytes
}

fn malformed(msg: impl Into<String>) -> ModelError {
    ModelError::MalformedHeader(msg.into())
}

fn parse_usize(key: &str, value: &str) -> Result<usize, ModelError> {
    value
        .parse()
        .map_err(|_| malformed(format!("{key}: expected a non-negative integer, got {value:?}")))
}

pub fn read_bundle(bytes: &[u8]) -> Result<EncoderBundle, ModelError> {
    let split = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| malformed("no blank line terminating the header"))?;
    let header = std::str::from_utf8(&bytes[..split]).map_err(|_| malformed("header is not UTF-8"))?;
    let data = &bytes[split + 2..];

    let mut lines = header.lines();
    if lines.next() != Some(FORMAT_MAGIC) {
        return Err(malformed(format!("first line must be {FORMAT_MAGIC:?}")));
    }
    let mut fields: HashMap<&str, &str> = HashMap::new();
    let mut manifest: HashMap<String, (Vec<usize>, usize)> = HashMap::new();
    for line in lines {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| malformed(format!("expected key=value, got {line:?}")))?;
        if key == "tensor" {
            let parts: Vec<&str> = value.split(' ').collect();
            let [name, dims, offset] = parts[..] else {
                return Err(malformed(format!("bad tensor entry {value:?}")));
            };
            let shape = dims
                .split(',')
                .map(|d| parse_usize("tensor shape", d))
                .collect::<Result<Vec<_>, _>>()?;
            let offset = parse_usize("tensor offset", offset)?;
            if manifest.insert(name.to_string(), (shape, offset)).is_some() {
                return Err(malformed(format!("tensor {name} listed twice")));
            }
        } else if fields.insert(key, value).is_some() {
            return Err(malformed(format!("duplicate key {key}")));
        }
    }
    let field = |key: &str| fields.get(key).copied().ok_or_else(|| malformed(format!("missing key {key}")));
    let config = EncoderConfig {
        num_layers: parse_usize("num_layers", field("num_layers")?)?,
        num_heads: parse_usize("num_heads", field("num_heads")?)?,
        hidden_dim: parse_usize("hidden_dim", field("hidden_dim")?)?,
        ffn_dim: parse_usize("ffn_dim", field("ffn_dim")?)?,
        vocab_size: parse_usize("vocab_size", field("vocab_size")?)?,
        max_positions: parse_usize("max_positions", field("max_positions")?)?,
        num_classes: parse_usize("num_classes", field("num_classes")?)?,
        ln_epsilon: field("ln_epsilon")?
            .parse()
            .map_err(|_| malformed("ln_epsilon is not a number"))?,
        activation: field("activation")?.parse().map_err(malformed)?,
    };
    if fields.len() != 9 {
        let known = [
            "num_layers",
            "num_heads",
            "hidden_dim",
            "ffn_dim",
            "vocab_size",
            "max_positions",
            "num_classes",
            "ln_epsilon",
            "activation",
        ];
        let unknown = fields.keys().find(|k| !known.contains(k)).copied().unwrap_or("?");
        return Err(malformed(format!("unknown key {unknown}")));
    }
    config.validate()?;

    let names = expected_names(&config);
    if let Some(extra) = manifest.keys().find(|k| !names.contains(k)) {
        return Err(malformed(format!("unexpected tensor {extra}")));
    }
    let mut values: HashMap<String, Vec<f64>> = HashMap::new();
    for name in &names {
        let (shape, offset) = manifest
            .get(name)
            .ok_or_else(|| ModelError::MissingTensor(name.clone()))?;
        let expected = expected_shape(&config, name).expect("canonical name");
        if *shape != expected {
            return Err(ModelError::ShapeMismatch {
                name: name.clone(),
                expected,
                found: shape.clone(),
            });
        }
        let count: usize = shape.iter().product();
        let end = offset
            .checked_add(count * 8)
            .filter(|&end| end <= data.len())
            .ok_or_else(|| ModelError::Truncated { name: name.clone() })?;
        let floats: Vec<f64> = data[*offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if let Some(index) = floats.iter().position(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite {
                name: name.clone(),
                index,
            });
        }
        values.insert(name.clone(), floats);
    }

    let mut take1 = |name: &str| Array1::from_vec(values.remove(name).expect("validated"));
    let d = config.hidden_dim;
    let f = config.ffn_dim;
    let embedding_ln = LayerNorm {
        gamma: take1("embeddings.ln.gamma"),
        beta: take1("embeddings.ln.beta"),
    };
    let b_cls = take1("classifier.bias");
    let mut layer_vectors = Vec::new();
    for l in 0..config.num_layers {
        let p = format!("layers.{l}");
        let v: Vec<Array1<f64>> = [
            "attn.query.bias",
            "attn.key.bias",
            "attn.value.bias",
            "attn.output.bias",
            "attn.ln.gamma",
            "attn.ln.beta",
            "ffn.up.bias",
            "ffn.down.bias",
            "ffn.ln.gamma",
            "ffn.ln.beta",
        ]
        .iter()
        .map(|s| take1(&format!("{p}.{s}")))
        .collect();
        layer_vectors.push(v);
    }
    let mut take2 = |name: &str, rows: usize, cols: usize| {
        Array2::from_shape_vec((rows, cols), values.remove(name).expect("validated")).expect("shape checked")
    };
    let token_embeddings = take2("embeddings.token", config.vocab_size, d);
    let position_embeddings = take2("embeddings.position", config.max_positions, d);
    let w_cls = take2("classifier.weight", config.num_classes, d);
    let mut layers = Vec::with_capacity(config.num_layers);
    for (l, v) in layer_vectors.into_iter().enumerate() {
        let p = format!("layers.{l}");
        let mut v = v.into_iter();
        let mut next = || v.next().expect("ten vectors");
        layers.push(EncoderLayer {
            w_q: take2(&format!("{p}.attn.query.weight"), d, d),
            b_q: next(),
            w_k: take2(&format!("{p}.attn.key.weight"), d, d),
            b_k: next(),
            w_v: take2(&format!("{p}.attn.value.weight"), d, d),
            b_v: next(),
            w_o: take2(&format!("{p}.attn.output.weight"), d, d),
            b_o: next(),
            attn_ln: LayerNorm {
                gamma: next(),
                beta: next(),
            },
            w_ffn1: take2(&format!("{p}.ffn.up.weight"), d, f),
            b_ffn1: next(),
            w_ffn2: take2(&format!("{p}.ffn.down.weight"), f, d),
            b_ffn2: next(),
            ffn_ln: LayerNorm {
                gamma: next(),
                beta: next(),
            },
        });
    }
    Ok(EncoderBundle {
        config,
        token_embeddings,
        position_embeddings,
        embedding_ln,
        layers,
        w_cls,
        b_cls,
    })
}
