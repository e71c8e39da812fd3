//! Deterministic synthetic models.
//!
//! Weights come from ChaCha8 seeded with the caller's seed and are drawn in
//! tensor insertion order, so a `(template, seed, options)` triple always
//! yields a byte-identical graph on every platform.

use std::fmt;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::ir::{
    infer_node, DataType, Graph, GraphError, Node, OpKind, Padding, TensorDef, TensorKind,
    TensorShape,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Template {
    /// Keyword-spotting style conv stack whose last feature maps are 1x1.
    KwsLike,
    /// Embedding lookup, mean over the sequence, dense classifier.
    TxtLike,
    /// Two dense layers around a wide hidden layer.
    DensePair,
    /// Three same-padded 3x3 convolutions.
    CnnChain,
    /// Pointwise, depthwise, pointwise block.
    DepthwiseChain,
    /// Seeded series-parallel stack of dense layers joined by additions.
    RandomSp,
}

impl Template {
    pub const ALL: [Template; 6] = [
        Template::KwsLike,
        Template::TxtLike,
        Template::DensePair,
        Template::CnnChain,
        Template::DepthwiseChain,
        Template::RandomSp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Template::KwsLike => "kws",
            Template::TxtLike => "txt",
            Template::DensePair => "dense-pair",
            Template::CnnChain => "cnn",
            Template::DepthwiseChain => "depthwise",
            Template::RandomSp => "random-sp",
        }
    }

    /// Whether an 8-bit variant exists. Deeper integer stacks would overflow
    /// the 32-bit accumulators without requantization.
    pub fn supports_int8(self) -> bool {
        matches!(self, Template::TxtLike | Template::DensePair)
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Template {
    type Err = ModelGenError;

    fn from_str(s: &str) -> Result<Template, ModelGenError> {
        Template::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| ModelGenError::UnknownTemplate(s.to_owned()))
    }
}

#[derive(Debug, Error)]
pub enum ModelGenError {
    #[error("scale {0} is outside 1..={max}", max = MAX_SCALE)]
    InvalidScale(usize),
    #[error("template `{0}` has no 8-bit variant")]
    NoInt8Variant(Template),
    #[error("unknown template `{0}`")]
    UnknownTemplate(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

pub const MAX_SCALE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenOptions {
    /// Width multiplier for channel and feature counts.
    pub scale: usize,
    /// 8-bit inputs and weights with 32-bit accumulation.
    pub int8: bool,
}

impl Default for GenOptions {
    fn default() -> Self {
        GenOptions {
            scale: 1,
            int8: false,
        }
    }
}

/// `template` at default scale in `f32`.
pub fn generate(template: Template, seed: u64) -> Result<Graph, ModelGenError> {
    generate_with(template, seed, &GenOptions::default())
}

pub fn generate_with(
    template: Template,
    seed: u64,
    opts: &GenOptions,
) -> Result<Graph, ModelGenError> {
    if opts.scale == 0 || opts.scale > MAX_SCALE {
        return Err(ModelGenError::InvalidScale(opts.scale));
    }
    if opts.int8 && !template.supports_int8() {
        return Err(ModelGenError::NoInt8Variant(template));
    }
    let mut b = Builder::new(seed, opts.int8);
    let s = opts.scale;
    match template {
        Template::KwsLike => kws(&mut b, s)?,
        Template::TxtLike => txt(&mut b, s)?,
        Template::DensePair => dense_pair(&mut b, s)?,
        Template::CnnChain => cnn(&mut b, s)?,
        Template::DepthwiseChain => depthwise(&mut b, s)?,
        Template::RandomSp => random_sp(&mut b, s)?,
    }
    b.graph.check()?;
    Ok(b.graph)
}

struct Builder {
    graph: Graph,
    rng: ChaCha8Rng,
    int8: bool,
}

impl Builder {
    fn new(seed: u64, int8: bool) -> Builder {
        Builder {
            graph: Graph::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            int8,
        }
    }

    fn act_dtype(&self) -> DataType {
        if self.int8 {
            DataType::I8
        } else {
            DataType::F32
        }
    }

    fn input(
        &mut self,
        id: &str,
        shape: impl Into<TensorShape>,
        dtype: DataType,
    ) -> Result<String, GraphError> {
        self.graph
            .add_tensor(TensorDef::new(id, shape, dtype, TensorKind::Input))?;
        Ok(id.to_owned())
    }

    fn weight(&mut self, id: &str, shape: impl Into<TensorShape>) -> Result<String, GraphError> {
        let shape = shape.into();
        let n = shape.element_count().unwrap_or(0);
        let def = if self.int8 {
            let v: Vec<i8> = (0..n).map(|_| self.rng.random_range(-127..=127)).collect();
            TensorDef::weight_i8(id, shape, &v)
        } else {
            let v: Vec<f32> = (0..n)
                .map(|_| self.rng.random_range(-1.0f32..=1.0))
                .collect();
            TensorDef::weight_f32(id, shape, &v)
        };
        self.graph.add_tensor(def)?;
        Ok(id.to_owned())
    }

    /// Adds `node` writing a new tensor `out` whose shape and dtype follow
    /// from inference.
    fn op(
        &mut self,
        node: &str,
        op: OpKind,
        inputs: &[&str],
        out: &str,
        kind: TensorKind,
    ) -> Result<String, GraphError> {
        let n = Node::new(node, op, inputs.iter().copied(), out);
        let defs: Vec<&TensorDef> = inputs
            .iter()
            .map(|t| {
                self.graph
                    .tensor(t)
                    .ok_or_else(|| GraphError::UnknownTensor {
                        node: node.into(),
                        tensor: (*t).into(),
                    })
            })
            .collect::<Result<_, _>>()?;
        let (shape, dtype) = infer_node(&n, &defs).map_err(|reason| GraphError::InvalidOp {
            node: node.into(),
            reason,
        })?;
        self.graph
            .add_tensor(TensorDef::new(out, shape, dtype, kind))?;
        self.graph.add_node(n)?;
        Ok(out.to_owned())
    }

    fn mid(
        &mut self,
        node: &str,
        op: OpKind,
        inputs: &[&str],
        out: &str,
    ) -> Result<String, GraphError> {
        self.op(node, op, inputs, out, TensorKind::Intermediate)
    }

    /// Convolution, bias and optional ReLU. Returns the last tensor.
    #[allow(clippy::too_many_arguments)]
    fn conv_block(
        &mut self,
        name: &str,
        x: &str,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        relu: Option<&str>,
    ) -> Result<String, GraphError> {
        let cin = self.graph.tensor(x).map_or(0, |t| t.shape.dim(3));
        let w = self.weight(&format!("{name}.w"), [cout, kernel, kernel, cin])?;
        let b = self.weight(&format!("{name}.b"), [cout])?;
        let op = OpKind::conv2d([kernel, kernel], [stride, stride], Padding::uniform(pad));
        let c = self.mid(name, op, &[x, &w], &format!("{name}.out"))?;
        let bias = format!("{name}.bias");
        let out = self.mid(&bias, OpKind::BiasAdd {}, &[&c, &b], &format!("{bias}.out"))?;
        match relu {
            Some(r) => self.mid(&format!("{name}.relu"), OpKind::relu(), &[&out], r),
            None => Ok(out),
        }
    }
}

fn kws(b: &mut Builder, s: usize) -> Result<(), GraphError> {
    let x = b.input("x", [1, 8, 8, 1], DataType::F32)?;
    let r1 = b.conv_block("conv1", &x, 16, 3, 2, 1, Some("r1"))?;
    let r2 = b.conv_block("conv2", &r1, 256 * s, 4, 1, 0, Some("r2"))?;
    let logits = b.conv_block("conv3", &r2, 12, 1, 1, 0, None)?;
    b.op(
        "softmax",
        OpKind::Softmax {},
        &[&logits],
        "y",
        TensorKind::Output,
    )?;
    Ok(())
}

fn txt(b: &mut Builder, s: usize) -> Result<(), GraphError> {
    let table = b.weight("table", [1000, 16 * s])?;
    let idx = b.input("idx", [1, 256], DataType::I32)?;
    let emb = b.mid("gather", OpKind::Gather { axis: 0 }, &[&table, &idx], "emb")?;
    let pooled = b.mid(
        "mean",
        OpKind::ReduceMean {
            axis: 1,
            count: None,
        },
        &[&emb],
        "pooled",
    )?;
    let w = b.weight("dense.w", [4, 16 * s])?;
    if b.int8 {
        b.op(
            "dense",
            OpKind::Dense {},
            &[&pooled, &w],
            "y",
            TensorKind::Output,
        )?;
        return Ok(());
    }
    let logits = b.mid("dense", OpKind::Dense {}, &[&pooled, &w], "logits")?;
    let bias = b.weight("dense.b", [4])?;
    let biased = b.mid("bias", OpKind::BiasAdd {}, &[&logits, &bias], "biased")?;
    b.op(
        "softmax",
        OpKind::Softmax {},
        &[&biased],
        "y",
        TensorKind::Output,
    )?;
    Ok(())
}

fn dense_pair(b: &mut Builder, s: usize) -> Result<(), GraphError> {
    let dt = b.act_dtype();
    let x = b.input("x", [1, 64], dt)?;
    let w1 = b.weight("dense1.w", [128 * s, 64])?;
    let b1 = b.weight("dense1.b", [128 * s])?;
    let d1 = b.mid("dense1", OpKind::Dense {}, &[&x, &w1], "d1")?;
    let hb = b.mid("bias1", OpKind::BiasAdd {}, &[&d1, &b1], "hb")?;
    let h = b.mid("relu1", OpKind::relu(), &[&hb], "h")?;
    let w2 = b.weight("dense2.w", [10, 128 * s])?;
    b.op(
        "dense2",
        OpKind::Dense {},
        &[&h, &w2],
        "y",
        TensorKind::Output,
    )?;
    Ok(())
}

fn cnn(b: &mut Builder, s: usize) -> Result<(), GraphError> {
    let x = b.input("x", [1, 12, 12, 4], DataType::F32)?;
    let r1 = b.conv_block("conv1", &x, 16 * s, 3, 1, 1, Some("r1"))?;
    let r2 = b.conv_block("conv2", &r1, 16 * s, 3, 1, 1, Some("r2"))?;
    let w = b.weight("conv3.w", [4, 3, 3, 16 * s])?;
    let c3 = b.mid(
        "conv3",
        OpKind::conv2d([3, 3], [1, 1], Padding::uniform(1)),
        &[&r2, &w],
        "c3",
    )?;
    let bias = b.weight("conv3.b", [4])?;
    b.op(
        "conv3.bias",
        OpKind::BiasAdd {},
        &[&c3, &bias],
        "y",
        TensorKind::Output,
    )?;
    Ok(())
}

fn depthwise(b: &mut Builder, s: usize) -> Result<(), GraphError> {
    let x = b.input("x", [1, 10, 10, 8], DataType::F32)?;
    let r1 = b.conv_block("expand", &x, 32 * s, 1, 1, 0, Some("r1"))?;
    let w = b.weight("dw.w", [1, 3, 3, 32 * s])?;
    let op = OpKind::DepthwiseConv2d {
        strides: [1, 1],
        padding: Padding::uniform(1),
    };
    let d = b.mid("dw", op, &[&r1, &w], "d")?;
    let bias = b.weight("dw.b", [32 * s])?;
    let db = b.mid("dw.bias", OpKind::BiasAdd {}, &[&d, &bias], "db")?;
    let r2 = b.mid("dw.relu", OpKind::relu(), &[&db], "r2")?;
    let w = b.weight("project.w", [8, 1, 1, 32 * s])?;
    let p = b.mid(
        "project",
        OpKind::conv2d([1, 1], [1, 1], Padding::ZERO),
        &[&r2, &w],
        "p",
    )?;
    b.op(
        "residual",
        OpKind::Add {},
        &[&p, &x],
        "y",
        TensorKind::Output,
    )?;
    Ok(())
}

const SP_WIDTHS: [usize; 4] = [8, 16, 32, 64];

/// Appends dense, bias and ReLU from `x` to a fresh tensor of `width`
/// features.
fn sp_layer(b: &mut Builder, x: &str, width: usize, k: &mut usize) -> Result<String, GraphError> {
    let name = format!("l{k}");
    *k += 1;
    let cin = b.graph.tensor(x).map_or(0, |t| t.shape.dim(1));
    let w = b.weight(&format!("{name}.w"), [width, cin])?;
    let bias = b.weight(&format!("{name}.b"), [width])?;
    let d = b.mid(&name, OpKind::Dense {}, &[x, &w], &format!("{name}.d"))?;
    let db = b.mid(
        &format!("{name}.bias"),
        OpKind::BiasAdd {},
        &[&d, &bias],
        &format!("{name}.db"),
    )?;
    b.mid(
        &format!("{name}.relu"),
        OpKind::relu(),
        &[&db],
        &format!("{name}.out"),
    )
}

/// Series or parallel composition of at most `budget` dense layers starting
/// from `x` and ending at `width` features.
fn sp_block(
    b: &mut Builder,
    x: &str,
    width: usize,
    depth: usize,
    k: &mut usize,
) -> Result<String, GraphError> {
    let choice = if depth == 0 {
        0
    } else {
        b.rng.random_range(0..3)
    };
    match choice {
        // parallel: every branch ends at `width`, branches summed in order
        2 => {
            let branches = b.rng.random_range(2..=3);
            let mut outs = Vec::new();
            for _ in 0..branches {
                outs.push(sp_block(b, x, width, depth - 1, k)?);
            }
            let mut acc = outs[0].clone();
            for o in &outs[1..] {
                let name = format!("add{k}");
                *k += 1;
                acc = b.mid(&name, OpKind::Add {}, &[&acc, o], &format!("{name}.out"))?;
            }
            Ok(acc)
        }
        // series: a hidden layer of random width, then the rest
        1 => {
            let hidden = *SP_WIDTHS.choose(&mut b.rng).expect("non-empty");
            let h = sp_layer(b, x, hidden, k)?;
            sp_block(b, &h, width, depth - 1, k)
        }
        _ => sp_layer(b, x, width, k),
    }
}

fn random_sp(b: &mut Builder, s: usize) -> Result<(), GraphError> {
    let x = b.input("x", [1, 16], DataType::F32)?;
    let mut k = 0;
    let width = SP_WIDTHS.choose(&mut b.rng).expect("non-empty") * s;
    let body = sp_block(b, &x, width, 3, &mut k)?;
    let w = b.weight("head.w", [4, width])?;
    b.op(
        "head",
        OpKind::Dense {},
        &[&body, &w],
        "y",
        TensorKind::Output,
    )?;
    Ok(())
}

/// A random DAG of at most `max_nodes` element-wise, dense and concat ops
/// over `[1, k]` tensors. Tensors nobody reads become model outputs.
pub fn random_dag(seed: u64, max_nodes: usize) -> Graph {
    let mut b = Builder::new(seed, false);
    let mut avail: Vec<String> = Vec::new();
    for i in 0..b.rng.random_range(1..=2) {
        let w = b.rng.random_range(1..=8);
        avail.push(
            b.input(&format!("x{i}"), [1, w], DataType::F32)
                .expect("fresh id"),
        );
    }
    let n = b.rng.random_range(1..=max_nodes.max(1));
    for i in 0..n {
        let a = avail[b.rng.random_range(0..avail.len())].clone();
        let two = avail.len() > 1 && b.rng.random_bool(0.4);
        let (op, inputs) = if two {
            let mut c = avail[b.rng.random_range(0..avail.len())].clone();
            if c == a {
                c = avail
                    .iter()
                    .find(|t| **t != a)
                    .expect("two tensors")
                    .clone();
            }
            (OpKind::Concat { axis: 1 }, vec![a, c])
        } else if b.rng.random_bool(0.5) {
            (OpKind::relu(), vec![a])
        } else {
            let cin = b.graph.tensor(&a).map_or(1, |t| t.shape.dim(1));
            let w = b.rng.random_range(1..=8);
            let wid = b.weight(&format!("n{i}.w"), [w, cin]).expect("fresh id");
            (OpKind::Dense {}, vec![a, wid])
        };
        let refs: Vec<&str> = inputs.iter().map(String::as_str).collect();
        let out = b
            .mid(&format!("n{i}"), op, &refs, &format!("t{i}"))
            .expect("well-typed op");
        avail.push(out);
    }
    let index_consumed: std::collections::HashSet<String> = b
        .graph
        .nodes()
        .flat_map(|n| n.inputs.iter().cloned())
        .collect();
    let dangling: Vec<String> = b
        .graph
        .tensors()
        .filter(|t| t.kind == TensorKind::Intermediate && !index_consumed.contains(&t.id))
        .map(|t| t.id.clone())
        .collect();
    for id in dangling {
        b.graph.tensor_mut(&id).expect("listed").kind = TensorKind::Output;
    }
    b.graph
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::count_macs;

    #[test]
    fn every_template_is_valid_and_reproducible() {
        for t in Template::ALL {
            for seed in [1, 2] {
                let a = generate(t, seed).unwrap();
                assert!(a.check().is_ok(), "{t}");
                assert_eq!(
                    a.to_json().unwrap(),
                    generate(t, seed).unwrap().to_json().unwrap()
                );
            }
        }
    }

    #[test]
    fn kws_ends_in_one_by_one_maps() {
        let g = generate(Template::KwsLike, 1).unwrap();
        assert_eq!(g.tensor("r2").unwrap().shape.dims(), &[1, 1, 1, 256]);
    }

    #[test]
    fn dense_pair_topology() {
        let g = generate_with(
            Template::DensePair,
            1,
            &GenOptions {
                scale: 2,
                int8: false,
            },
        )
        .unwrap();
        assert_eq!(g.tensor("h").unwrap().shape.dims(), &[1, 256]);
        assert_eq!(count_macs(&g).total, 64 * 256 + 256 * 10);
    }

    #[test]
    fn int8_variants() {
        let g = generate_with(
            Template::DensePair,
            1,
            &GenOptions {
                scale: 1,
                int8: true,
            },
        )
        .unwrap();
        assert_eq!(g.tensor("x").unwrap().dtype, DataType::I8);
        assert_eq!(g.tensor("y").unwrap().dtype, DataType::I32);
        assert!(matches!(
            generate_with(
                Template::CnnChain,
                1,
                &GenOptions {
                    scale: 1,
                    int8: true
                }
            ),
            Err(ModelGenError::NoInt8Variant(_))
        ));
    }

    #[test]
    fn scale_bounds() {
        for scale in [0, MAX_SCALE + 1] {
            let opts = GenOptions { scale, int8: false };
            assert!(matches!(
                generate_with(Template::TxtLike, 1, &opts),
                Err(ModelGenError::InvalidScale(_))
            ));
        }
    }

    #[test]
    fn template_names_round_trip() {
        for t in Template::ALL {
            assert_eq!(t.name().parse::<Template>().unwrap(), t);
        }
    }

    #[test]
    fn random_dags_are_valid() {
        for seed in 0..50 {
            let g = random_dag(seed, 10);
            assert!(g.check().is_ok(), "seed {seed}");
            assert!(g.num_nodes() <= 10);
        }
    }
}
