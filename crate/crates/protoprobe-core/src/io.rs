//! Bit-exact model serialization and the g/h split views.
//!
//! File layout: 8-byte magic `PROTOPRB`, u16 LE version, u32 LE spec-block
//! length, UTF-8 spec text, then each parameter tensor in declaration order
//! as a u32 LE element count followed by raw little-endian f32 values.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::network::{forward_full, LayerParams, LayerSpec, ModelState, NetworkSpec};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"PROTOPRB";
pub const VERSION: u16 = 1;

fn spec_text(spec: &NetworkSpec) -> String {
    let mut lines = vec![
        format!("input={},{},{}", spec.input_shape[0], spec.input_shape[1], spec.input_shape[2]),
        format!("classes={}", spec.class_count),
        format!("feature_index={}", spec.feature_index),
    ];
    for layer in &spec.layers {
        lines.push(match *layer {
            LayerSpec::Dense { input, output } => format!("dense in={input} out={output}"),
            LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, padding } => format!(
                "conv2d in={in_channels} out={out_channels} kernel={kernel} stride={stride} padding={padding}"
            ),
            LayerSpec::Relu => "relu".into(),
            LayerSpec::GlobalAvgPool => "global_avg_pool".into(),
            LayerSpec::Flatten => "flatten".into(),
        });
    }
    lines.join("\n")
}

fn parse_kv(parts: &[&str], line: &str) -> Result<std::collections::HashMap<String, usize>> {
    let mut map = std::collections::HashMap::new();
    for part in parts {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| Error::CorruptFile(format!("malformed spec line: {line}")))?;
        let v: usize = v
            .parse()
            .map_err(|_| Error::CorruptFile(format!("bad value in spec line: {line}")))?;
        map.insert(k.to_string(), v);
    }
    Ok(map)
}

fn parse_spec_text(text: &str) -> Result<NetworkSpec> {
    let mut input_shape = None;
    let mut class_count = None;
    let mut feature_index = None;
    let mut layers = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(v) = line.strip_prefix("input=") {
            let dims: Vec<usize> = v
                .split(',')
                .map(|d| d.parse().map_err(|_| Error::CorruptFile(format!("bad input shape: {v}"))))
                .collect::<Result<_>>()?;
            if dims.len() != 3 {
                return Err(Error::CorruptFile(format!("input shape must be C,H,W: {v}")));
            }
            input_shape = Some([dims[0], dims[1], dims[2]]);
        } else if let Some(v) = line.strip_prefix("classes=") {
            class_count = Some(v.parse().map_err(|_| Error::CorruptFile(format!("bad classes: {v}")))?);
        } else if let Some(v) = line.strip_prefix("feature_index=") {
            feature_index =
                Some(v.parse().map_err(|_| Error::CorruptFile(format!("bad feature_index: {v}")))?);
        } else {
            let mut parts = line.split_whitespace();
            let kind = parts.next().unwrap();
            let rest: Vec<&str> = parts.collect();
            let kv = parse_kv(&rest, line)?;
            let get = |k: &str| {
                kv.get(k)
                    .copied()
                    .ok_or_else(|| Error::CorruptFile(format!("missing {k} in spec line: {line}")))
            };
            layers.push(match kind {
                "dense" => LayerSpec::Dense { input: get("in")?, output: get("out")? },
                "conv2d" => LayerSpec::Conv2d {
                    in_channels: get("in")?,
                    out_channels: get("out")?,
                    kernel: get("kernel")?,
                    stride: get("stride")?,
                    padding: get("padding")?,
                },
                "relu" => LayerSpec::Relu,
                "global_avg_pool" => LayerSpec::GlobalAvgPool,
                "flatten" => LayerSpec::Flatten,
                other => return Err(Error::CorruptFile(format!("unknown layer kind: {other}"))),
            });
        }
    }
    let spec = NetworkSpec {
        layers,
        input_shape: input_shape.ok_or_else(|| Error::CorruptFile("missing input= header".into()))?,
        class_count: class_count.ok_or_else(|| Error::CorruptFile("missing classes= header".into()))?,
        feature_index: feature_index
            .ok_or_else(|| Error::CorruptFile("missing feature_index= header".into()))?,
    };
    spec.validate()?;
    Ok(spec)
}

/// Serialize a model to bytes. Deterministic for identical models.
pub fn model_to_bytes(model: &ModelState) -> Result<Vec<u8>> {
    // Re-validate so nothing is written for an inconsistent model.
    ModelState::new(model.spec().clone(), model.params().to_vec())?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.write_u16::<LittleEndian>(VERSION)?;
    let text = spec_text(model.spec());
    out.write_u32::<LittleEndian>(text.len() as u32)?;
    out.extend_from_slice(text.as_bytes());
    for tensor in model.parameter_tensors() {
        out.write_u32::<LittleEndian>(tensor.len() as u32)?;
        for &v in tensor.data() {
            out.write_u32::<LittleEndian>(v.to_bits())?;
        }
    }
    Ok(out)
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<ModelState> {
    let mut cur = std::io::Cursor::new(bytes);
    let mut magic = [0u8; 8];
    cur.read_exact(&mut magic).map_err(|_| Error::NotAModelFile)?;
    if &magic != MAGIC {
        return Err(Error::NotAModelFile);
    }
    let version = cur.read_u16::<LittleEndian>().map_err(|_| Error::NotAModelFile)?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let spec_len = cur
        .read_u32::<LittleEndian>()
        .map_err(|_| Error::CorruptFile("truncated spec-block length".into()))? as usize;
    let mut text = vec![0u8; spec_len];
    cur.read_exact(&mut text)
        .map_err(|_| Error::CorruptFile("truncated spec block".into()))?;
    let text = String::from_utf8(text).map_err(|_| Error::CorruptFile("spec block not UTF-8".into()))?;
    let spec = parse_spec_text(&text)?;

    let mut params = Vec::with_capacity(spec.layers.len());
    for (i, layer) in spec.layers.iter().enumerate() {
        match layer.param_shapes() {
            None => params.push(LayerParams::Empty),
            Some((ws, bs)) => {
                let mut read_tensor = |shape: Vec<usize>, what: &str| -> Result<Tensor> {
                    let expected: usize = shape.iter().product();
                    let declared = cur.read_u32::<LittleEndian>().map_err(|_| {
                        Error::CorruptFile(format!("layer {i} ({}) {what}: missing length", layer.kind()))
                    })? as usize;
                    if declared != expected {
                        return Err(Error::CorruptFile(format!(
                            "layer {i} ({}) {what}: declared {declared} elements, spec needs {expected}",
                            layer.kind()
                        )));
                    }
                    let mut data = Vec::with_capacity(expected);
                    for _ in 0..expected {
                        let bits = cur.read_u32::<LittleEndian>().map_err(|_| {
                            Error::CorruptFile(format!(
                                "layer {i} ({}) {what}: truncated parameter block",
                                layer.kind()
                            ))
                        })?;
                        data.push(f32::from_bits(bits));
                    }
                    Tensor::new(shape, data)
                };
                let weights = read_tensor(ws, "weights")?;
                let bias = read_tensor(bs, "bias")?;
                params.push(LayerParams::Affine { weights, bias });
            }
        }
    }
    if cur.position() != bytes.len() as u64 {
        return Err(Error::CorruptFile(format!(
            "{} trailing bytes after parameter blocks",
            bytes.len() as u64 - cur.position()
        )));
    }
    ModelState::new(spec, params)
}

pub fn save_model<P: AsRef<Path>>(model: &ModelState, destination: P) -> Result<()> {
    let bytes = model_to_bytes(model)?;
    let mut file = std::fs::File::create(destination)?;
    file.write_all(&bytes)?;
    Ok(())
}

pub fn load_model<P: AsRef<Path>>(source: P) -> Result<ModelState> {
    let bytes = std::fs::read(source)?;
    model_from_bytes(&bytes)
}

/// Short content hash of a model, used to tie prototypes and reports to the
/// exact parameters they were computed from.
pub fn fingerprint(model: &ModelState) -> Result<String> {
    let bytes = model_to_bytes(model)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
}

/// Borrowed view of the feature extractor g: layers `0..feature_index`.
pub struct GView<'a> {
    model: &'a ModelState,
}

/// Borrowed view of the feature classifier h: layers `feature_index..` plus
/// softmax.
pub struct HView<'a> {
    model: &'a ModelState,
}

impl<'a> GView<'a> {
    /// Feature activation at the g/h boundary, in its natural shape.
    pub fn eval(&self, x: &Tensor) -> Result<Tensor> {
        let pass = forward_full(self.model, x)?;
        Ok(pass.activations[self.model.spec().feature_index].clone())
    }
}

impl<'a> HView<'a> {
    /// Class probabilities from a boundary activation.
    pub fn eval(&self, features: &Tensor) -> Result<Tensor> {
        // Evaluating h alone re-runs the suffix of the same layer code, so the
        // composition is bit-identical to the monolithic forward.
        let spec = self.model.spec();
        let shapes = spec.layer_shapes()?;
        let boundary = &shapes[spec.feature_index];
        let x = features.reshaped(boundary.clone()).map_err(|_| Error::ShapeMismatch {
            context: "h view input".into(),
            detail: format!("expected {} elements, got {}", boundary.iter().product::<usize>(), features.len()),
        })?;
        let mut cur = x;
        for i in spec.feature_index..spec.layers.len() {
            cur = crate::network::layer_forward(&spec.layers[i], &self.model.params()[i], &cur, i)?;
        }
        let probs = crate::network::softmax(cur.data());
        Ok(Tensor::from_vec(probs))
    }
}

/// Split a model into its g and h views without copying parameters.
pub fn split(model: &ModelState) -> (GView<'_>, HView<'_>) {
    (GView { model }, HView { model })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::forward;

    fn tiny_model() -> ModelState {
        let spec = NetworkSpec {
            layers: vec![
                LayerSpec::Conv2d { in_channels: 1, out_channels: 2, kernel: 3, stride: 1, padding: 1 },
                LayerSpec::Relu,
                LayerSpec::GlobalAvgPool,
                LayerSpec::Dense { input: 2, output: 3 },
            ],
            input_shape: [1, 4, 4],
            class_count: 3,
            feature_index: 3,
        };
        ModelState::random_init(spec, 7).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let model = tiny_model();
        let bytes = model_to_bytes(&model).unwrap();
        let loaded = model_from_bytes(&bytes).unwrap();
        assert_eq!(model.spec(), loaded.spec());
        for (a, b) in model.parameter_tensors().iter().zip(loaded.parameter_tensors()) {
            assert_eq!(
                a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn serialization_is_deterministic() {
        let model = tiny_model();
        assert_eq!(model_to_bytes(&model).unwrap(), model_to_bytes(&model).unwrap());
    }

    #[test]
    fn altered_magic_is_not_a_model_file() {
        let mut bytes = model_to_bytes(&tiny_model()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(model_from_bytes(&bytes), Err(Error::NotAModelFile)));
    }

    #[test]
    fn unknown_version_rejected() {
        let mut bytes = model_to_bytes(&tiny_model()).unwrap();
        bytes[8] = 9;
        assert!(matches!(model_from_bytes(&bytes), Err(Error::UnsupportedVersion(_))));
    }

    #[test]
    fn truncated_parameters_name_corruption() {
        let bytes = model_to_bytes(&tiny_model()).unwrap();
        let err = model_from_bytes(&bytes[..bytes.len() - 5]).unwrap_err();
        assert!(err.to_string().contains("corrupt file"), "{err}");
    }

    #[test]
    fn forward_matches_after_round_trip() {
        let model = tiny_model();
        let x = Tensor::new(vec![1, 4, 4], (0..16).map(|i| i as f32 / 16.0).collect()).unwrap();
        let (f1, p1) = forward(&model, &x).unwrap();
        let loaded = model_from_bytes(&model_to_bytes(&model).unwrap()).unwrap();
        let (f2, p2) = forward(&loaded, &x).unwrap();
        assert_eq!(f1.data(), f2.data());
        assert_eq!(p1.data(), p2.data());
    }

    #[test]
    fn split_composition_is_bitwise_exact() {
        let model = tiny_model();
        let x = Tensor::new(vec![1, 4, 4], (0..16).map(|i| (i as f32).sin()).collect()).unwrap();
        let (g, h) = split(&model);
        let features = g.eval(&x).unwrap();
        let probs = h.eval(&features).unwrap();
        let (f_ref, p_ref) = forward(&model, &x).unwrap();
        assert_eq!(features.flattened().data(), f_ref.data());
        assert_eq!(probs.data(), p_ref.data());
    }

    #[test]
    fn degenerate_split_is_softmax_only() {
        let spec = NetworkSpec {
            layers: vec![LayerSpec::Flatten, LayerSpec::Dense { input: 4, output: 2 }],
            input_shape: [1, 2, 2],
            class_count: 2,
            feature_index: 2,
        };
        let model = ModelState::random_init(spec, 3).unwrap();
        let x = Tensor::new(vec![1, 2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let (g, h) = split(&model);
        let logits = g.eval(&x).unwrap();
        let probs = h.eval(&logits).unwrap();
        let (_, p_ref) = forward(&model, &x).unwrap();
        assert_eq!(probs.data(), p_ref.data());
    }

    #[test]
    fn mismatched_params_rejected_before_write() {
        let model = tiny_model();
        let mut params = model.params().to_vec();
        if let LayerParams::Affine { weights, .. } = &mut params[0] {
            *weights = Tensor::zeros(vec![2, 2]);
        }
        // Construction itself fails, so save_model can never write bad bytes.
        assert!(ModelState::new(model.spec().clone(), params).is_err());
    }
}
