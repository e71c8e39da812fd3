use std::collections::BTreeMap;
use std::fmt;

use super::{buffer_size, infer_shapes, Graph, GraphError, TensorKind};

/// A single broken graph invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    UnknownTensor {
        node: String,
        tensor: String,
    },
    Arity {
        node: String,
        expected: String,
        found: usize,
    },
    MultipleProducers {
        tensor: String,
        producers: Vec<String>,
    },
    MissingProducer {
        tensor: String,
    },
    ProducedConstant {
        tensor: String,
    },
    UnconsumedIntermediate {
        tensor: String,
    },
    MissingPayload {
        tensor: String,
    },
    UnexpectedPayload {
        tensor: String,
    },
    PayloadSize {
        tensor: String,
        expected: usize,
        found: usize,
    },
    MissingShape {
        tensor: String,
    },
    Cycle,
    Shape {
        message: String,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::UnknownTensor { node, tensor } => {
                write!(f, "node `{node}` references unknown tensor `{tensor}`")
            }
            Violation::Arity {
                node,
                expected,
                found,
            } => {
                write!(
                    f,
                    "node `{node}` expects {expected} inputs/outputs, found {found}"
                )
            }
            Violation::MultipleProducers { tensor, producers } => {
                write!(f, "tensor `{tensor}` has producers {producers:?}")
            }
            Violation::MissingProducer { tensor } => write!(f, "tensor `{tensor}` has no producer"),
            Violation::ProducedConstant { tensor } => {
                write!(f, "input/weight tensor `{tensor}` is produced by a node")
            }
            Violation::UnconsumedIntermediate { tensor } => {
                write!(f, "intermediate `{tensor}` has no consumer")
            }
            Violation::MissingPayload { tensor } => write!(f, "weight `{tensor}` has no data"),
            Violation::UnexpectedPayload { tensor } => {
                write!(f, "non-weight `{tensor}` carries data")
            }
            Violation::PayloadSize {
                tensor,
                expected,
                found,
            } => {
                write!(f, "weight `{tensor}` needs {expected} bytes, has {found}")
            }
            Violation::MissingShape { tensor } => write!(f, "tensor `{tensor}` has no shape"),
            Violation::Cycle => write!(f, "graph contains a cycle"),
            Violation::Shape { message } => write!(f, "{message}"),
        }
    }
}

/// Collects every invariant violation. An empty list means the graph is
/// well formed and has a topological order.
pub fn validate(graph: &Graph) -> Vec<Violation> {
    let mut violations = Vec::new();
    let mut producers: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    let mut consumed: BTreeMap<&str, usize> = BTreeMap::new();

    for node in graph.nodes() {
        let (min, max) = node.op.arity();
        if node.inputs.len() < min || node.inputs.len() > max {
            let expected = if max == usize::MAX {
                format!("at least {min}")
            } else {
                min.to_string()
            };
            violations.push(Violation::Arity {
                node: node.id.clone(),
                expected,
                found: node.inputs.len(),
            });
        }
        if node.outputs.len() != 1 {
            violations.push(Violation::Arity {
                node: node.id.clone(),
                expected: "1 output".into(),
                found: node.outputs.len(),
            });
        }
        for t in node.inputs.iter().chain(&node.outputs) {
            if !graph.contains_tensor(t) {
                violations.push(Violation::UnknownTensor {
                    node: node.id.clone(),
                    tensor: t.clone(),
                });
            }
        }
        for t in &node.inputs {
            *consumed.entry(t.as_str()).or_default() += 1;
        }
        for t in &node.outputs {
            producers
                .entry(t.as_str())
                .or_default()
                .push(node.id.clone());
        }
    }

    for tensor in graph.tensors() {
        let prods = producers.get(tensor.id.as_str());
        match tensor.kind {
            TensorKind::Input | TensorKind::Weight => {
                if prods.is_some() {
                    violations.push(Violation::ProducedConstant {
                        tensor: tensor.id.clone(),
                    });
                }
                if !tensor.shape.is_known() {
                    violations.push(Violation::MissingShape {
                        tensor: tensor.id.clone(),
                    });
                }
            }
            TensorKind::Intermediate | TensorKind::Output => match prods {
                None => violations.push(Violation::MissingProducer {
                    tensor: tensor.id.clone(),
                }),
                Some(p) if p.len() > 1 => violations.push(Violation::MultipleProducers {
                    tensor: tensor.id.clone(),
                    producers: p.clone(),
                }),
                _ => {}
            },
        }
        if tensor.kind == TensorKind::Intermediate && !consumed.contains_key(tensor.id.as_str()) {
            violations.push(Violation::UnconsumedIntermediate {
                tensor: tensor.id.clone(),
            });
        }
        match (&tensor.kind, &tensor.data) {
            (TensorKind::Weight, None) => violations.push(Violation::MissingPayload {
                tensor: tensor.id.clone(),
            }),
            (TensorKind::Weight, Some(data)) if tensor.shape.is_known() => {
                if let Ok(expected) = buffer_size(tensor) {
                    if expected != data.len() {
                        violations.push(Violation::PayloadSize {
                            tensor: tensor.id.clone(),
                            expected,
                            found: data.len(),
                        });
                    }
                }
            }
            (TensorKind::Weight, Some(_)) => {}
            (_, Some(_)) => violations.push(Violation::UnexpectedPayload {
                tensor: tensor.id.clone(),
            }),
            (_, None) => {}
        }
    }

    if graph.topological_order().is_err() {
        violations.push(Violation::Cycle);
    }

    // Shape checks only make sense on a structurally sound graph.
    if violations.is_empty() {
        if let Err(e) = infer_shapes(graph) {
            violations.push(Violation::Shape {
                message: e.to_string(),
            });
        }
    }
    violations
}

impl Graph {
    /// `validate` as a `Result`.
    pub fn check(&self) -> Result<(), GraphError> {
        let v = validate(self);
        if v.is_empty() {
            Ok(())
        } else {
            Err(GraphError::Invalid(v))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::*;

    fn chain() -> Graph {
        let mut g = Graph::new();
        g.add_tensor(TensorDef::new(
            "x",
            [1, 4],
            DataType::F32,
            TensorKind::Input,
        ))
        .unwrap();
        g.add_tensor(TensorDef::new(
            "a",
            [1, 4],
            DataType::F32,
            TensorKind::Intermediate,
        ))
        .unwrap();
        g.add_tensor(TensorDef::new(
            "b",
            [1, 4],
            DataType::F32,
            TensorKind::Intermediate,
        ))
        .unwrap();
        g.add_tensor(TensorDef::new(
            "y",
            [1, 4],
            DataType::F32,
            TensorKind::Output,
        ))
        .unwrap();
        g.add_node(Node::new("n1", OpKind::relu(), ["x"], "a"))
            .unwrap();
        g.add_node(Node::new("n2", OpKind::relu(), ["a"], "b"))
            .unwrap();
        g.add_node(Node::new("n3", OpKind::relu(), ["b"], "y"))
            .unwrap();
        g
    }

    #[test]
    fn chain_is_ok() {
        assert!(validate(&chain()).is_empty());
    }

    #[test]
    fn unknown_tensor() {
        let mut g = chain();
        g.node_mut("n2").unwrap().inputs[0] = "nope".into();
        let v = validate(&g);
        assert!(v.contains(&Violation::UnknownTensor {
            node: "n2".into(),
            tensor: "nope".into()
        }));
    }

    #[test]
    fn multiple_producers() {
        let mut g = chain();
        g.add_node(Node::new("dup", OpKind::relu(), ["x"], "a"))
            .unwrap();
        let v = validate(&g);
        assert!(v
            .iter()
            .any(|x| matches!(x, Violation::MultipleProducers { tensor, .. } if tensor == "a")));
    }

    #[test]
    fn cycle_detected() {
        let mut g = chain();
        g.node_mut("n1").unwrap().inputs[0] = "b".into();
        assert!(validate(&g).contains(&Violation::Cycle));
        assert!(g.topological_order().is_err());
    }

    #[test]
    fn arity_and_payload() {
        let mut g = chain();
        g.node_mut("n2").unwrap().inputs.push("x".into());
        g.add_tensor(TensorDef {
            data: Some(vec![0; 3]),
            ..TensorDef::weight_f32("w", [2], &[0.0, 0.0])
        })
        .unwrap();
        let v = validate(&g);
        assert!(v
            .iter()
            .any(|x| matches!(x, Violation::Arity { node, .. } if node == "n2")));
        assert!(v.contains(&Violation::PayloadSize {
            tensor: "w".into(),
            expected: 8,
            found: 3
        }));
    }

    #[test]
    fn unconsumed_intermediate() {
        let mut g = chain();
        g.node_mut("n3").unwrap().inputs[0] = "a".into();
        assert!(validate(&g).contains(&Violation::UnconsumedIntermediate { tensor: "b".into() }));
    }
}
