//! Service description documents and their JSON envelope.
//!
//! Every service, including the VSD-Agent, is described by the same
//! envelope: service metadata, an action list and a state-variable table.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use url::Url;

use crate::http::HttpRequest;
use crate::netfab::{socket_addr_of, request_target, Transport};
use crate::ssdp::VSD_AGENT_ST;

pub const SERVICE_ADD: &str = "Service-add";
pub const SERVICE_REMOVE: &str = "Service-remove";
pub const SERVICE_UPDATE: &str = "Service-update";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TypeTag {
    String,
    Int,
    Float,
    Bool,
}

impl TypeTag {
    pub fn accepts(self, value: &Value) -> bool {
        match self {
            TypeTag::String => value.is_string(),
            TypeTag::Int => value.is_i64() || value.is_u64(),
            TypeTag::Float => value.is_number(),
            TypeTag::Bool => value.is_boolean(),
        }
    }

    pub fn default_value(self) -> Value {
        match self {
            TypeTag::String => Value::String(String::new()),
            TypeTag::Int => Value::from(0),
            TypeTag::Float => Value::from(0.0),
            TypeTag::Bool => Value::Bool(false),
        }
    }

    /// Parses a command-line style literal into a value of this type.
    pub fn parse_literal(self, s: &str) -> Option<Value> {
        match self {
            TypeTag::String => Some(Value::String(s.to_string())),
            TypeTag::Int => s.parse::<i64>().ok().map(Value::from),
            TypeTag::Float => s.parse::<f64>().ok().map(Value::from),
            TypeTag::Bool => s.parse::<bool>().ok().map(Value::Bool),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    In,
    Out,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Argument {
    pub name: String,
    pub direction: Direction,
    #[serde(rename = "type")]
    pub type_tag: TypeTag,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionSignature {
    pub name: String,
    #[serde(default)]
    pub arguments: Vec<Argument>,
}

impl ActionSignature {
    pub fn inputs(&self) -> impl Iterator<Item = &Argument> {
        self.arguments.iter().filter(|a| a.direction == Direction::In)
    }

    pub fn outputs(&self) -> impl Iterator<Item = &Argument> {
        self.arguments.iter().filter(|a| a.direction == Direction::Out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateVariable {
    pub name: String,
    #[serde(rename = "type")]
    pub type_tag: TypeTag,
    pub evented: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceDescription {
    #[serde(rename = "serviceName")]
    pub service_name: String,
    #[serde(rename = "serviceType")]
    pub service_type: String,
    #[serde(rename = "controlURL")]
    pub control_url: String,
    #[serde(rename = "eventSubURL")]
    pub event_url: String,
    #[serde(rename = "actionList")]
    pub actions: Vec<ActionSignature>,
    #[serde(rename = "serviceStateTable")]
    pub state_variables: Vec<StateVariable>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DescriptionError {
    #[error("description syntax error: {0}")]
    Syntax(String),
    #[error("description schema violation: {0}")]
    SchemaViolation(String),
    #[error("description host unreachable: {0}")]
    Unreachable(String),
    #[error("description request failed with HTTP status {0}")]
    HttpStatus(u16),
}

impl ServiceDescription {
    pub fn action(&self, name: &str) -> Option<&ActionSignature> {
        self.actions.iter().find(|a| a.name == name)
    }

    pub fn variable(&self, name: &str) -> Option<&StateVariable> {
        self.state_variables.iter().find(|v| v.name == name)
    }

    pub fn validate(&self) -> Result<(), DescriptionError> {
        let fail = |m: String| Err(DescriptionError::SchemaViolation(m));
        if self.service_name.is_empty() {
            return fail("empty serviceName".into());
        }
        if self.service_type.is_empty() {
            return fail("empty serviceType".into());
        }
        if self.control_url.is_empty() || self.event_url.is_empty() {
            return fail("empty control or event URL".into());
        }
        let mut actions = HashSet::new();
        for action in &self.actions {
            if action.name.is_empty() || !actions.insert(action.name.as_str()) {
                return fail(format!("duplicate or empty action name {:?}", action.name));
            }
            let mut args = HashSet::new();
            for arg in &action.arguments {
                if arg.name.is_empty() || !args.insert(arg.name.as_str()) {
                    return fail(format!(
                        "duplicate or empty argument {:?} in {}",
                        arg.name, action.name
                    ));
                }
            }
        }
        let mut vars = HashSet::new();
        for var in &self.state_variables {
            if var.name.is_empty() || !vars.insert(var.name.as_str()) {
                return fail(format!("duplicate or empty state variable {:?}", var.name));
            }
        }
        Ok(())
    }
}

/// Writes the JSON envelope. Output is deterministic for equal documents.
pub fn encode_description(doc: &ServiceDescription) -> Vec<u8> {
    serde_json::to_vec_pretty(doc).expect("description serialization is infallible")
}

pub fn decode_description(raw: &[u8]) -> Result<ServiceDescription, DescriptionError> {
    let doc: ServiceDescription = serde_json::from_slice(raw).map_err(|e| {
        use serde_json::error::Category;
        match e.classify() {
            Category::Data => DescriptionError::SchemaViolation(e.to_string()),
            _ => DescriptionError::Syntax(e.to_string()),
        }
    })?;
    doc.validate()?;
    Ok(doc)
}

/// Retrieves the raw description bytes at `location`.
pub fn fetch_description_bytes(
    location: &Url,
    transport: &mut dyn Transport,
) -> Result<Vec<u8>, DescriptionError> {
    let addr =
        socket_addr_of(location).map_err(|e| DescriptionError::Unreachable(e.to_string()))?;
    let req = HttpRequest::new("GET", request_target(location))
        .with_header("HOST", addr.to_string());
    let resp = transport
        .request(addr, req)
        .map_err(|e| DescriptionError::Unreachable(e.to_string()))?;
    if resp.status != 200 {
        return Err(DescriptionError::HttpStatus(resp.status));
    }
    Ok(resp.body)
}

pub fn fetch_description(
    location: &Url,
    transport: &mut dyn Transport,
) -> Result<ServiceDescription, DescriptionError> {
    decode_description(&fetch_description_bytes(location, transport)?)
}

/// The description of the VSD-Agent service a VSD exposes for enrollment.
///
/// Only Service-add, Service-remove and Service-update are listed; the
/// discovery-reply and advertisement operations run inside the VSD and are
/// not remotely invocable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VsdAgentDescription(ServiceDescription);

impl VsdAgentDescription {
    pub const EXTERNAL_ACTIONS: [&'static str; 3] = [SERVICE_ADD, SERVICE_REMOVE, SERVICE_UPDATE];

    pub fn new() -> Self {
        let action = |name: &str| ActionSignature {
            name: name.to_string(),
            arguments: vec![
                Argument {
                    name: "owner".into(),
                    direction: Direction::In,
                    type_tag: TypeTag::String,
                },
                Argument {
                    name: "services".into(),
                    direction: Direction::In,
                    type_tag: TypeTag::String,
                },
                Argument {
                    name: "results".into(),
                    direction: Direction::Out,
                    type_tag: TypeTag::String,
                },
            ],
        };
        VsdAgentDescription(ServiceDescription {
            service_name: "VSD-Agent".into(),
            service_type: VSD_AGENT_ST.into(),
            control_url: "control".into(),
            event_url: "events".into(),
            actions: Self::EXTERNAL_ACTIONS.iter().map(|n| action(n)).collect(),
            state_variables: Vec::new(),
        })
    }

    pub fn description(&self) -> &ServiceDescription {
        &self.0
    }

    pub fn control_url(&self) -> &str {
        &self.0.control_url
    }
}

impl Default for VsdAgentDescription {
    fn default() -> Self {
        Self::new()
    }
}

impl TryFrom<ServiceDescription> for VsdAgentDescription {
    type Error = DescriptionError;

    fn try_from(doc: ServiceDescription) -> Result<Self, Self::Error> {
        if doc.service_type != VSD_AGENT_ST {
            return Err(DescriptionError::SchemaViolation(format!(
                "not a VSD-Agent description: {}",
                doc.service_type
            )));
        }
        for name in Self::EXTERNAL_ACTIONS {
            if doc.action(name).is_none() {
                return Err(DescriptionError::SchemaViolation(format!(
                    "VSD-Agent description lacks {name}"
                )));
            }
        }
        Ok(VsdAgentDescription(doc))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ServiceDescription {
        ServiceDescription {
            service_name: "temp".into(),
            service_type: "urn:demo:service:Temperature:1".into(),
            control_url: "control".into(),
            event_url: "events".into(),
            actions: vec![ActionSignature {
                name: "GetTemp".into(),
                arguments: vec![Argument {
                    name: "Value".into(),
                    direction: Direction::Out,
                    type_tag: TypeTag::Float,
                }],
            }],
            state_variables: vec![StateVariable {
                name: "Temp".into(),
                type_tag: TypeTag::Float,
                evented: true,
            }],
        }
    }

    #[test]
    fn roundtrip_and_determinism() {
        let doc = sample();
        let a = encode_description(&doc);
        assert_eq!(a, encode_description(&doc.clone()));
        assert_eq!(decode_description(&a).unwrap(), doc);
    }

    #[test]
    fn empty_action_list_is_encoded() {
        let mut doc = sample();
        doc.actions.clear();
        let text = String::from_utf8(encode_description(&doc)).unwrap();
        let v: Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["actionList"], Value::Array(vec![]));
    }

    #[test]
    fn truncated_envelope_is_syntax_error() {
        let raw = encode_description(&sample());
        let cut = &raw[..raw.len() / 2];
        assert!(matches!(decode_description(cut), Err(DescriptionError::Syntax(_))));
        assert!(matches!(decode_description(b""), Err(DescriptionError::Syntax(_))));
    }

    #[test]
    fn missing_service_type_is_schema_violation() {
        let mut v: Value = serde_json::from_slice(&encode_description(&sample())).unwrap();
        v.as_object_mut().unwrap().remove("serviceType");
        let raw = serde_json::to_vec(&v).unwrap();
        assert!(matches!(
            decode_description(&raw),
            Err(DescriptionError::SchemaViolation(_))
        ));
    }

    #[test]
    fn duplicate_action_names_rejected() {
        let mut doc = sample();
        doc.actions.push(doc.actions[0].clone());
        let raw = serde_json::to_vec(&doc).unwrap();
        assert!(matches!(
            decode_description(&raw),
            Err(DescriptionError::SchemaViolation(_))
        ));
    }

    /// Canonical VSD-Agent envelope written by hand, checked field by field.
    #[test]
    fn vsd_agent_envelope_fixture() {
        let arg = |n: &str, d: &str| serde_json::json!({"name": n, "direction": d, "type": "string"});
        let action = |n: &str| {
            serde_json::json!({
                "name": n,
                "arguments": [arg("owner", "in"), arg("services", "in"), arg("results", "out")]
            })
        };
        let fixture = serde_json::json!({
            "serviceName": "VSD-Agent",
            "serviceType": "VSD:VSD-AGENT",
            "controlURL": "control",
            "eventSubURL": "events",
            "actionList": [action("Service-add"), action("Service-remove"), action("Service-update")],
            "serviceStateTable": []
        });
        let doc = decode_description(&serde_json::to_vec(&fixture).unwrap()).unwrap();
        let agent = VsdAgentDescription::try_from(doc).unwrap();
        let d = agent.description();
        assert_eq!(d.service_type, "VSD:VSD-AGENT");
        assert_eq!(d.control_url, "control");
        assert_eq!(d.actions.len(), 3);
        let names: Vec<_> = d.actions.iter().map(|a| a.name.as_str()).collect();
        assert_eq!(names, ["Service-add", "Service-remove", "Service-update"]);
        for a in &d.actions {
            assert_eq!(a.inputs().count(), 2);
            assert_eq!(a.outputs().count(), 1);
        }
        assert_eq!(agent, VsdAgentDescription::new());
        let text = String::from_utf8(encode_description(d)).unwrap();
        assert!(text.contains("\"Service-add\""));
    }

    #[test]
    fn non_agent_description_is_rejected_as_agent() {
        assert!(VsdAgentDescription::try_from(sample()).is_err());
    }

    #[test]
    fn type_tags_check_values() {
        assert!(TypeTag::Int.accepts(&Value::from(3)));
        assert!(!TypeTag::Int.accepts(&Value::from(3.5)));
        assert!(TypeTag::Float.accepts(&Value::from(3)));
        assert!(!TypeTag::Bool.accepts(&Value::from("true")));
        assert_eq!(TypeTag::Bool.parse_literal("true"), Some(Value::Bool(true)));
        assert_eq!(TypeTag::Int.parse_literal("x"), None);
    }
}
