//! `.dnn.json` interchange format.

use serde::{Deserialize, Serialize};

use super::{Graph, GraphError, Node, TensorDef};

#[derive(Serialize)]
struct GraphDocRef<'a> {
    tensors: Vec<&'a TensorDef>,
    nodes: Vec<&'a Node>,
}

#[derive(Deserialize)]
struct GraphDoc {
    tensors: Vec<TensorDef>,
    nodes: Vec<Node>,
}

pub(super) fn to_string(graph: &Graph) -> Result<String, GraphError> {
    let doc = GraphDocRef {
        tensors: graph.tensors().collect(),
        nodes: graph.nodes().collect(),
    };
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    Ok(text)
}

pub(super) fn from_str(text: &str) -> Result<Graph, GraphError> {
    let doc: GraphDoc = serde_json::from_str(text)?;
    let mut graph = Graph::new();
    for t in doc.tensors {
        graph.add_tensor(t)?;
    }
    for n in doc.nodes {
        graph.add_node(n)?;
    }
    Ok(graph)
}

pub(super) mod base64_bytes {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(data: &Option<Vec<u8>>, s: S) -> Result<S::Ok, S::Error> {
        match data {
            Some(bytes) => s.serialize_str(&STANDARD.encode(bytes)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<u8>>, D::Error> {
        let text: Option<String> = Option::deserialize(d)?;
        text.map(|t| {
            STANDARD
                .decode(t.as_bytes())
                .map_err(serde::de::Error::custom)
        })
        .transpose()
    }
}

#[cfg(test)]
mod tests {
    use crate::ir::*;

    fn sample() -> Graph {
        let mut g = Graph::new();
        g.add_tensor(TensorDef::new(
            "x",
            [1, 4, 4, 2],
            DataType::F32,
            TensorKind::Input,
        ))
        .unwrap();
        g.add_tensor(TensorDef::weight_f32(
            "w",
            [3, 1, 1, 2],
            &[1.0, -2.0, 0.5, 0.25, 3.0, 4.0],
        ))
        .unwrap();
        g.add_tensor(TensorDef::new(
            "y",
            [1, 4, 4, 3],
            DataType::F32,
            TensorKind::Intermediate,
        ))
        .unwrap();
        g.add_tensor(TensorDef::new(
            "z",
            [1, 4, 4, 3],
            DataType::F32,
            TensorKind::Output,
        ))
        .unwrap();
        g.add_node(Node::new(
            "conv",
            OpKind::conv2d([1, 1], [1, 1], Padding::ZERO),
            ["x", "w"],
            "y",
        ))
        .unwrap();
        g.add_node(Node::new("relu", OpKind::relu(), ["y"], "z"))
            .unwrap();
        g
    }

    #[test]
    fn json_shape_of_nodes() {
        let text = sample().to_json().unwrap();
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        let conv = &value["nodes"][0];
        assert_eq!(conv["op"], "conv2d");
        assert_eq!(conv["attrs"]["padding"], serde_json::json!([0, 0, 0, 0]));
        assert_eq!(value["nodes"][1]["attrs"]["function"], "relu");
        assert_eq!(value["tensors"][1]["kind"], "weight");
        assert!(value["tensors"][1]["data"].is_string());
        assert!(value["tensors"][0].get("data").is_none());
    }

    #[test]
    fn round_trip() {
        let g = sample();
        let back = Graph::from_json(&g.to_json().unwrap()).unwrap();
        assert_eq!(g, back);
    }

    #[test]
    fn duplicate_node_rejected_on_parse() {
        let mut text = sample().to_json().unwrap();
        text = text.replace("\"relu\",\n      \"op\"", "\"conv\",\n      \"op\"");
        assert!(matches!(
            Graph::from_json(&text),
            Err(GraphError::DuplicateId(_))
        ));
    }
}
