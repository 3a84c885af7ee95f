//! Small differentiable classifiers and deterministic initialization.
//!
//! Three architectures cover the desk-scale experiments: a linear probe,
//! an MLP, and a small CNN. None of them carries batch statistics, so
//! prediction is batch-decomposable and weight averaging is exactly an
//! average of pure parameters. Activation is SiLU throughout.

use std::io::{Read, Write};
use std::path::Path;

use crate::data::RngStream;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchKind {
    Linear,
    Mlp,
    SmallCnn,
}

impl ArchKind {
    pub fn name(&self) -> &'static str {
        match self {
            ArchKind::Linear => "linear",
            ArchKind::Mlp => "mlp",
            ArchKind::SmallCnn => "small_cnn",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ArchKind::Linear),
            "mlp" => Ok(ArchKind::Mlp),
            "small_cnn" => Ok(ArchKind::SmallCnn),
            other => Err(Error::Validation(format!("unknown model kind `{other}`"))),
        }
    }
}

/// Architecture description. `widths` means hidden layer sizes for the
/// MLP and `[conv1_channels, conv2_channels, dense_width]` for the CNN.
///
/// The CNN is conv(c1, 3x3) -> SiLU -> conv(c2, 4x4, stride 2) -> SiLU ->
/// flatten -> dense(fc) -> SiLU -> dense(K), all convolutions unpadded.
/// The stride-2 kernel is 4x4 because output extents must divide exactly
/// and a 3x3 stride-2 kernel cannot do that on even inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchSpec {
    pub kind: ArchKind,
    /// Input shape (channels, height, width).
    pub input: (usize, usize, usize),
    pub classes: usize,
    pub widths: Vec<usize>,
}

impl ArchSpec {
    pub fn linear(input: (usize, usize, usize), classes: usize) -> Self {
        ArchSpec {
            kind: ArchKind::Linear,
            input,
            classes,
            widths: vec![],
        }
    }

    pub fn mlp(input: (usize, usize, usize), classes: usize, hidden: Vec<usize>) -> Self {
        ArchSpec {
            kind: ArchKind::Mlp,
            input,
            classes,
            widths: hidden,
        }
    }

    pub fn small_cnn(input: (usize, usize, usize), classes: usize) -> Self {
        ArchSpec {
            kind: ArchKind::SmallCnn,
            input,
            classes,
            widths: vec![16, 32, 64],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Validation("need at least 2 classes".into()));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::Validation("widths must be positive".into()));
        }
        match self.kind {
            ArchKind::Linear => Ok(()),
            ArchKind::Mlp => {
                if self.widths.is_empty() {
                    Err(Error::Validation("mlp needs at least one hidden width".into()))
                } else {
                    Ok(())
                }
            }
            ArchKind::SmallCnn => {
                if self.widths.len() != 3 {
                    return Err(Error::Validation(
                        "small_cnn widths are [conv1, conv2, dense]".into(),
                    ));
                }
                self.cnn_extents().map(|_| ())
            }
        }
    }

    pub fn flat_input(&self) -> usize {
        self.input.0 * self.input.1 * self.input.2
    }

    /// Spatial extents after each CNN stage: ((h1, w1), (h2, w2)).
    fn cnn_extents(&self) -> Result<((usize, usize), (usize, usize))> {
        let (_, h, w) = self.input;
        if h < 3 || w < 3 {
            return Err(Error::Validation("small_cnn input too small".into()));
        }
        let (h1, w1) = (h - 2, w - 2);
        if h1 < 4 || w1 < 4 || (h1 - 4) % 2 != 0 || (w1 - 4) % 2 != 0 {
            return Err(Error::Validation(format!(
                "small_cnn stride-2 stage needs (extent - 2 - 4) even and nonnegative, got input {h}x{w}"
            )));
        }
        Ok(((h1, w1), ((h1 - 4) / 2 + 1, (w1 - 4) / 2 + 1)))
    }

    /// Parameter layout (name, shape, fan-in used for init scaling;
    /// fan-in zero means the tensor is a bias and starts at zero).
    fn layout(&self) -> Result<Vec<(String, Vec<usize>, usize)>> {
        self.validate()?;
        let (c, _, _) = self.input;
        let i = self.flat_input();
        let k = self.classes;
        Ok(match self.kind {
            ArchKind::Linear => vec![
                ("w".into(), vec![i, k], i),
                ("b".into(), vec![k], 0),
            ],
            ArchKind::Mlp => {
                let mut out = Vec::new();
                let mut prev = i;
                for (li, &hw) in self.widths.iter().enumerate() {
                    out.push((format!("fc{li}.w"), vec![prev, hw], prev));
                    out.push((format!("fc{li}.b"), vec![hw], 0));
                    prev = hw;
                }
                out.push(("out.w".into(), vec![prev, k], prev));
                out.push(("out.b".into(), vec![k], 0));
                out
            }
            ArchKind::SmallCnn => {
                let (c1, c2, fc) = (self.widths[0], self.widths[1], self.widths[2]);
                let (_, (h2, w2)) = self.cnn_extents()?;
                let flat = c2 * h2 * w2;
                vec![
                    ("conv1.k".into(), vec![c1, c, 3, 3], c * 9),
                    ("conv2.k".into(), vec![c2, c1, 4, 4], c1 * 16),
                    ("fc.w".into(), vec![flat, fc], flat),
                    ("fc.b".into(), vec![fc], 0),
                    ("out.w".into(), vec![fc, k], fc),
                    ("out.b".into(), vec![k], 0),
                ]
            }
        })
    }
}

/// Ordered, uniquely named parameter tensors. Serialization, SGD state
/// and EMA all rely on the deterministic ordering.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    entries: Vec<(String, Tensor)>,
}

impl ModelParams {
    pub fn new(entries: Vec<(String, Tensor)>) -> Result<Self> {
        for (i, (name, _)) in entries.iter().enumerate() {
            if entries[..i].iter().any(|(n, _)| n == name) {
                return Err(Error::Validation(format!("duplicate parameter `{name}`")));
            }
        }
        Ok(ModelParams { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn param_count(&self) -> usize {
        self.tensors().map(|t| t.numel()).sum()
    }

    /// True when both sides have the same names and shapes in the same
    /// order.
    pub fn same_layout(&self, other: &ModelParams) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((an, at), (bn, bt))| an == bn && at.shape() == bt.shape())
    }
}

/// He fan-in scaled normal weights, zero biases. Identical (seed, spec)
/// pairs produce bit-identical parameters.
pub fn init_model(spec: &ArchSpec, seed: u64) -> Result<ModelParams> {
    use rand_distr::Distribution;
    let layout = spec.layout()?;
    let streams = RngStream::new(seed);
    let mut entries = Vec::with_capacity(layout.len());
    for (idx, (name, shape, fan_in)) in layout.into_iter().enumerate() {
        let numel: usize = shape.iter().product();
        let data = if fan_in == 0 {
            vec![0.0; numel]
        } else {
            let mut rng = streams.stream("init", idx as u64);
            let normal = rand_distr::Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                .map_err(|e| Error::Validation(e.to_string()))?;
            (0..numel).map(|_| normal.sample(&mut rng)).collect()
        };
        entries.push((name, Tensor::new(shape, data)?));
    }
    ModelParams::new(entries)
}

/// Model parameters registered as graph leaves, in canonical order.
pub struct BoundModel {
    vars: Vec<Var>,
}

/// Register every parameter as a graph leaf.
pub fn bind(graph: &mut Graph, params: &ModelParams, requires_grad: bool) -> Result<BoundModel> {
    let mut vars = Vec::with_capacity(params.len());
    for (_, t) in params.iter() {
        vars.push(graph.leaf(t.clone(), requires_grad)?);
    }
    Ok(BoundModel { vars })
}

impl BoundModel {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients in canonical parameter order (zeros where a parameter
    /// received no contribution).
    pub fn grads(&self, graph: &Graph) -> Vec<Vec<f64>> {
        self.vars
            .iter()
            .map(|&v| {
                graph
                    .grad(v)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; graph.value(v).numel()])
            })
            .collect()
    }
}

/// Forward pass producing logits [B, K]. Differentiable in both the
/// bound parameters and the image input.
pub fn forward(graph: &mut Graph, spec: &ArchSpec, bound: &BoundModel, images: Var) -> Result<Var> {
    let shape = graph.value(images).shape().to_vec();
    let (c, h, w) = spec.input;
    if shape.len() != 4 || shape[1] != c || shape[2] != h || shape[3] != w {
        return Err(Error::Dimension(format!(
            "images {shape:?} do not match model input {c}x{h}x{w}"
        )));
    }
    let b = shape[0];
    let v = bound.vars();
    match spec.kind {
        ArchKind::Linear => {
            let flat = graph.reshape(images, vec![b, spec.flat_input()])?;
            graph.affine(flat, v[0], v[1])
        }
        ArchKind::Mlp => {
            let mut x = graph.reshape(images, vec![b, spec.flat_input()])?;
            let mut vi = 0;
            for _ in &spec.widths {
                x = graph.affine(x, v[vi], v[vi + 1])?;
                x = graph.silu(x)?;
                vi += 2;
            }
            graph.affine(x, v[vi], v[vi + 1])
        }
        ArchKind::SmallCnn => {
            let x = graph.conv2d(images, v[0], 1, 0)?;
            let x = graph.silu(x)?;
            let x = graph.conv2d(x, v[1], 2, 0)?;
            let x = graph.silu(x)?;
            let n = graph.value(x).numel() / b;
            let x = graph.reshape(x, vec![b, n])?;
            let x = graph.affine(x, v[2], v[3])?;
            let x = graph.silu(x)?;
            graph.affine(x, v[4], v[5])
        }
    }
}

/// Convenience non-differentiating forward: logits for an image batch.
pub fn predict(params: &ModelParams, spec: &ArchSpec, images: &Tensor) -> Result<Tensor> {
    predict_model(&SingleModel { params, spec }, images)
}

/// Anything that maps an image batch to logits inside a graph, with
/// gradients flowing to the image input. Attacks and diagnostics work
/// against this interface so ensembles behave like ordinary models.
pub trait DifferentiableModel: Sync {
    fn classes(&self) -> usize;
    fn input(&self) -> (usize, usize, usize);
    fn forward_graph(&self, graph: &mut Graph, images: Var) -> Result<Var>;
}

/// A plain (params, spec) pair viewed as a differentiable model.
pub struct SingleModel<'a> {
    pub params: &'a ModelParams,
    pub spec: &'a ArchSpec,
}

impl DifferentiableModel for SingleModel<'_> {
    fn classes(&self) -> usize {
        self.spec.classes
    }

    fn input(&self) -> (usize, usize, usize) {
        self.spec.input
    }

    fn forward_graph(&self, graph: &mut Graph, images: Var) -> Result<Var> {
        let bound = bind(graph, self.params, false)?;
        forward(graph, self.spec, &bound, images)
    }
}

/// Logits for an image batch from any differentiable model.
pub fn predict_model(m: &dyn DifferentiableModel, images: &Tensor) -> Result<Tensor> {
    let mut graph = Graph::new();
    let x = graph.constant(images.clone())?;
    let logits = m.forward_graph(&mut graph, x)?;
    Ok(graph.value(logits).clone())
}

// ---- checkpoint format ----

const CKPT_MAGIC: &str = "robustaug-ckpt v1";

fn widths_str(widths: &[usize]) -> String {
    widths
        .iter()
        .map(|w| w.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// One-line header with the spec, then per parameter: length-prefixed
/// name, u32 rank + extents, raw little-endian f64 payload.
pub fn save_checkpoint(path: &Path, spec: &ArchSpec, params: &ModelParams) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let (c, h, w) = spec.input;
    writeln!(
        f,
        "{CKPT_MAGIC} kind={} input={c}x{h}x{w} classes={} widths={}",
        spec.kind.name(),
        spec.classes,
        widths_str(&spec.widths)
    )?;
    for (name, t) in params.iter() {
        f.write_all(&(name.len() as u32).to_le_bytes())?;
        f.write_all(name.as_bytes())?;
        f.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            f.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in t.data() {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ArchSpec, ModelParams)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("checkpoint missing header line".into()))?;
    let header = std::str::from_utf8(&bytes[..nl])
        .map_err(|_| Error::Format("checkpoint header is not utf-8".into()))?;
    let spec = parse_header(header)?;
    let mut pos = nl + 1;
    let mut entries = Vec::new();
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let take_u32 = |pos: &mut usize| -> Result<u32> {
        let s = take(pos, 4)?;
        Ok(u32::from_le_bytes(s.try_into().unwrap()))
    };
    while pos < bytes.len() {
        let name_len = take_u32(&mut pos)? as usize;
        let name = std::str::from_utf8(take(&mut pos, name_len)?)
            .map_err(|_| Error::Format("parameter name is not utf-8".into()))?
            .to_string();
        let rank = take_u32(&mut pos)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(take_u32(&mut pos)? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = take(&mut pos, numel * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push((name, Tensor::new(shape, data)?));
    }
    Ok((spec, ModelParams::new(entries)?))
}

fn parse_header(header: &str) -> Result<ArchSpec> {
    let rest = header
        .strip_prefix(CKPT_MAGIC)
        .ok_or_else(|| Error::Format(format!("bad checkpoint magic: `{header}`")))?;
    let mut kind = None;
    let mut input = None;
    let mut classes = None;
    let mut widths = Vec::new();
    for field in rest.split_whitespace() {
        let (key, val) = field
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("bad header field `{field}`")))?;
        match key {
            "kind" => kind = Some(ArchKind::parse(val)?),
            "input" => {
                let dims: Vec<usize> = val
                    .split('x')
                    .map(|d| d.parse().map_err(|_| Error::Format(format!("bad input `{val}`"))))
                    .collect::<Result<_>>()?;
                if dims.len() != 3 {
                    return Err(Error::Format(format!("bad input `{val}`")));
                }
                input = Some((dims[0], dims[1], dims[2]));
            }
            "classes" => {
                classes = Some(
                    val.parse()
                        .map_err(|_| Error::Format(format!("bad classes `{val}`")))?,
                )
            }
            "widths" => {
                if !val.is_empty() {
                    widths = val
                        .split(',')
                        .map(|d| {
                            d.parse()
                                .map_err(|_| Error::Format(format!("bad widths `{val}`")))
                        })
                        .collect::<Result<_>>()?;
                }
            }
            other => return Err(Error::Format(format!("unknown header key `{other}`"))),
        }
    }
    let spec = ArchSpec {
        kind: kind.ok_or_else(|| Error::Format("header missing kind".into()))?,
        input: input.ok_or_else(|| Error::Format("header missing input".into()))?,
        classes: classes.ok_or_else(|| Error::Format("header missing classes".into()))?,
        widths,
    };
    spec.validate()?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_difference_gradient, max_rel_err};

    fn img(spec: &ArchSpec, b: usize, fill: impl Fn(usize) -> f64) -> Tensor {
        let n = b * spec.flat_input();
        Tensor::new(
            vec![b, spec.input.0, spec.input.1, spec.input.2],
            (0..n).map(fill).collect(),
        )
        .unwrap()
    }

    #[test]
    fn same_seed_gives_identical_parameter_bytes() {
        let spec = ArchSpec::small_cnn((3, 16, 16), 2);
        let a = init_model(&spec, 11).unwrap();
        let b = init_model(&spec, 11).unwrap();
        for ((_, ta), (_, tb)) in a.iter().zip(b.iter()) {
            let ba: Vec<u8> = ta.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            let bb: Vec<u8> = tb.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            assert_eq!(ba, bb);
        }
        assert_ne!(
            init_model(&spec, 12).unwrap().get("conv1.k").unwrap().data(),
            a.get("conv1.k").unwrap().data()
        );
    }

    #[test]
    fn linear_param_count() {
        let spec = ArchSpec::linear((3, 4, 4), 5);
        let p = init_model(&spec, 0).unwrap();
        assert_eq!(p.param_count(), 48 * 5 + 5);
    }

    #[test]
    fn small_cnn_zero_image_logits_equal_output_bias() {
        let spec = ArchSpec::small_cnn((3, 16, 16), 4);
        let mut p = init_model(&spec, 5).unwrap();
        p.get_mut("out.b")
            .unwrap()
            .data_mut()
            .copy_from_slice(&[0.5, -1.0, 2.0, 0.25]);
        let logits = predict(&p, &spec, &img(&spec, 1, |_| 0.0)).unwrap();
        assert_eq!(logits.data(), &[0.5, -1.0, 2.0, 0.25]);
    }

    #[test]
    fn predict_is_batch_decomposable() {
        let spec = ArchSpec::small_cnn((3, 16, 16), 3);
        let p = init_model(&spec, 3).unwrap();
        let two = img(&spec, 2, |i| ((i * 37) % 101) as f64 / 101.0);
        let one = Tensor::new(vec![1, 3, 16, 16], two.data()[..spec.flat_input()].to_vec()).unwrap();
        let l2 = predict(&p, &spec, &two).unwrap();
        let l1 = predict(&p, &spec, &one).unwrap();
        assert_eq!(&l2.data()[..3], l1.data());
    }

    #[test]
    fn linear_model_is_exactly_wx_plus_b() {
        let spec = ArchSpec::linear((1, 2, 2), 2);
        let p = init_model(&spec, 9).unwrap();
        let x = img(&spec, 1, |i| i as f64 / 7.0);
        let logits = predict(&p, &spec, &x).unwrap();
        let w = p.get("w").unwrap();
        let b = p.get("b").unwrap();
        for k in 0..2 {
            let expect: f64 =
                (0..4).map(|i| x.data()[i] * w.data()[i * 2 + k]).sum::<f64>() + b.data()[k];
            assert!((logits.data()[k] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let spec = ArchSpec {
            kind: ArchKind::SmallCnn,
            input: (2, 10, 10),
            classes: 2,
            widths: vec![4, 6, 8],
        };
        let p = init_model(&spec, 7).unwrap();
        let x = img(&spec, 1, |i| 0.3 + 0.4 * ((i * 13) % 17) as f64 / 17.0);

        let mut g = Graph::new();
        let bound = bind(&mut g, &p, false).unwrap();
        let xv = g.leaf(x.clone(), true).unwrap();
        let logits = forward(&mut g, &spec, &bound, xv).unwrap();
        let y = g
            .leaf(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap(), false)
            .unwrap();
        let loss = g.softmax_cross_entropy(logits, y).unwrap();
        g.backward(loss).unwrap();
        let ad = g.grad(xv).unwrap().to_vec();

        let fd = finite_difference_gradient(
            |params| {
                let mut g = Graph::new();
                let bound = bind(&mut g, &p, false)?;
                let xv = g.constant(params[0].clone())?;
                let logits = forward(&mut g, &spec, &bound, xv)?;
                let y = g.leaf(Tensor::new(vec![1, 2], vec![1.0, 0.0])?, false)?;
                let loss = g.softmax_cross_entropy(logits, y)?;
                g.value(loss).item()
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(max_rel_err(&ad, &fd[0]) < 1e-4);
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ArchSpec::mlp((3, 8, 8), 3, vec![10]);
        let p = init_model(&spec, 21).unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &spec, &p).unwrap();
        let (spec2, p2) = load_checkpoint(&path).unwrap();
        assert_eq!(spec, spec2);
        assert!(p.same_layout(&p2));
        let x = img(&spec, 2, |i| (i % 11) as f64 / 11.0);
        let a = predict(&p, &spec, &x).unwrap();
        let b = predict(&p2, &spec2, &x).unwrap();
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn load_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"not a checkpoint\n").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
    }
}
