//! The small part of XML-RPC the PlanetLab API needs.

use std::collections::BTreeMap;
use std::fmt::Write;

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Int(i64),
    Bool(bool),
    Double(f64),
    String(String),
    DateTime(String),
    Base64(String),
    Array(Vec<Value>),
    Struct(BTreeMap<String, Value>),
    Nil,
}

impl Value {
    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::String(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_int(&self) -> Option<i64> {
        match self {
            Value::Int(i) => Some(*i),
            _ => None,
        }
    }

    pub fn as_array(&self) -> Option<&[Value]> {
        match self {
            Value::Array(a) => Some(a),
            _ => None,
        }
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        match self {
            Value::Struct(m) => m.get(key),
            _ => None,
        }
    }

    pub fn structure<K: Into<String>>(fields: impl IntoIterator<Item = (K, Value)>) -> Self {
        Value::Struct(fields.into_iter().map(|(k, v)| (k.into(), v)).collect())
    }

    pub fn strings<S: Into<String>>(items: impl IntoIterator<Item = S>) -> Self {
        Value::Array(items.into_iter().map(|s| Value::String(s.into())).collect())
    }
}

fn escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            _ => out.push(c),
        }
    }
    out
}

fn write_value(out: &mut String, v: &Value) {
    out.push_str("<value>");
    match v {
        Value::Int(i) => write!(out, "<int>{i}</int>").unwrap(),
        Value::Bool(b) => write!(out, "<boolean>{}</boolean>", u8::from(*b)).unwrap(),
        Value::Double(d) => write!(out, "<double>{d}</double>").unwrap(),
        Value::String(s) => write!(out, "<string>{}</string>", escape(s)).unwrap(),
        Value::DateTime(s) => write!(out, "<dateTime.iso8601>{}</dateTime.iso8601>", escape(s)).unwrap(),
        Value::Base64(s) => write!(out, "<base64>{}</base64>", escape(s)).unwrap(),
        Value::Array(items) => {
            out.push_str("<array><data>");
            for item in items {
                write_value(out, item);
            }
            out.push_str("</data></array>");
        }
        Value::Struct(fields) => {
            out.push_str("<struct>");
            for (k, v) in fields {
                write!(out, "<member><name>{}</name>", escape(k)).unwrap();
                write_value(out, v);
                out.push_str("</member>");
            }
            out.push_str("</struct>");
        }
        Value::Nil => out.push_str("<nil/>"),
    }
    out.push_str("</value>");
}

pub fn method_call(method: &str, params: &[Value]) -> String {
    let mut out = String::from("<?xml version=\"1.0\"?>\n<methodCall>");
    write!(out, "<methodName>{}</methodName><params>", escape(method)).unwrap();
    for p in params {
        out.push_str("<param>");
        write_value(&mut out, p);
        out.push_str("</param>");
    }
    out.push_str("</params></methodCall>\n");
    out
}

/// Body of a `methodResponse`, as used by servers.
pub fn method_response(result: &Value) -> String {
    let mut out = String::from("<?xml version=\"1.0\"?>\n<methodResponse><params><param>");
    write_value(&mut out, result);
    out.push_str("</param></params></methodResponse>\n");
    out
}

pub fn fault_response(code: i64, message: &str) -> String {
    let mut out = String::from("<?xml version=\"1.0\"?>\n<methodResponse><fault>");
    let fault = Value::structure([
        ("faultCode", Value::Int(code)),
        ("faultString", Value::String(message.to_string())),
    ]);
    write_value(&mut out, &fault);
    out.push_str("</fault></methodResponse>\n");
    out
}

#[derive(Debug, Clone, PartialEq)]
pub enum Response {
    Success(Value),
    Fault { code: i64, message: String },
}

fn elements<'a, 'i>(node: roxmltree::Node<'a, 'i>) -> impl Iterator<Item = roxmltree::Node<'a, 'i>> {
    node.children().filter(roxmltree::Node::is_element)
}

fn only_child<'a, 'i>(node: roxmltree::Node<'a, 'i>, name: &str) -> Result<roxmltree::Node<'a, 'i>, String> {
    elements(node)
        .find(|n| n.has_tag_name(name))
        .ok_or_else(|| format!("missing <{name}> in <{}>", node.tag_name().name()))
}

fn parse_value(node: roxmltree::Node) -> Result<Value, String> {
    let Some(typed) = elements(node).next() else {
        // an untyped value is a string
        return Ok(Value::String(node.text().unwrap_or_default().to_string()));
    };
    let text = || typed.text().unwrap_or_default().trim().to_string();
    Ok(match typed.tag_name().name() {
        "int" | "i4" | "i8" => Value::Int(text().parse().map_err(|_| format!("bad integer '{}'", text()))?),
        "boolean" => Value::Bool(match text().as_str() {
            "1" => true,
            "0" => false,
            other => return Err(format!("bad boolean '{other}'")),
        }),
        "double" => Value::Double(text().parse().map_err(|_| format!("bad double '{}'", text()))?),
        "string" => Value::String(typed.text().unwrap_or_default().to_string()),
        "dateTime.iso8601" => Value::DateTime(text()),
        "base64" => Value::Base64(text()),
        "nil" => Value::Nil,
        "array" => {
            let data = only_child(typed, "data")?;
            Value::Array(
                elements(data)
                    .map(|v| if v.has_tag_name("value") { parse_value(v) } else { Err("array item is not a <value>".into()) })
                    .collect::<Result<_, _>>()?,
            )
        }
        "struct" => {
            let mut fields = BTreeMap::new();
            for member in elements(typed) {
                let name = only_child(member, "name")?.text().unwrap_or_default().to_string();
                fields.insert(name, parse_value(only_child(member, "value")?)?);
            }
            Value::Struct(fields)
        }
        other => return Err(format!("unsupported value type <{other}>")),
    })
}

pub fn parse_response(body: &str) -> Result<Response, String> {
    let doc = roxmltree::Document::parse(body).map_err(|e| format!("not XML: {e}"))?;
    let root = doc.root_element();
    if !root.has_tag_name("methodResponse") {
        return Err(format!("expected <methodResponse>, found <{}>", root.tag_name().name()));
    }
    if let Ok(fault) = only_child(root, "fault") {
        let v = parse_value(only_child(fault, "value")?)?;
        let code = v.get("faultCode").and_then(Value::as_int).ok_or("fault without faultCode")?;
        let message = v.get("faultString").and_then(Value::as_str).unwrap_or_default().to_string();
        return Ok(Response::Fault { code, message });
    }
    let param = only_child(only_child(root, "params")?, "param")?;
    Ok(Response::Success(parse_value(only_child(param, "value")?)?))
}

/// Parses a `methodCall` into its method name and parameters.
pub fn parse_call(body: &str) -> Result<(String, Vec<Value>), String> {
    let doc = roxmltree::Document::parse(body).map_err(|e| format!("not XML: {e}"))?;
    let root = doc.root_element();
    let method = only_child(root, "methodName")?.text().unwrap_or_default().trim().to_string();
    let params = match only_child(root, "params") {
        Ok(p) => elements(p)
            .map(|param| parse_value(only_child(param, "value")?))
            .collect::<Result<_, _>>()?,
        Err(_) => Vec::new(),
    };
    Ok((method, params))
}
