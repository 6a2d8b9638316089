use std::collections::HashSet;
use std::fmt;

use chrono::DateTime;
use serde::Serialize;

use super::{Bundle, REQUIRED_COLUMNS, REQUIRED_METADATA};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ViolationKind {
    MissingColumn { column: String },
    RowWidth { expected: usize, found: usize },
    MissingValue { column: String },
    BadOrder { value: String },
    OrderNotIncreasing { previous: i64, found: i64 },
    DuplicateEventId { id: String },
    DanglingCodeState { id: String },
    BadTimestamp { value: String },
    MissingMetadata { property: String },
    InvalidMetadata { property: String, value: String },
}

/// One problem in a bundle. `row` is the 1-based data row of the main table
/// (the header is row 0); table-level problems have no row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub row: Option<usize>,
    #[serde(flatten)]
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(r) = self.row {
            write!(f, "row {r}: ")?;
        }
        match &self.kind {
            ViolationKind::MissingColumn { column } => write!(f, "missing column {column}"),
            ViolationKind::RowWidth { expected, found } => write!(f, "expected {expected} fields, found {found}"),
            ViolationKind::MissingValue { column } => write!(f, "empty {column}"),
            ViolationKind::BadOrder { value } => write!(f, "Order `{value}` is not an integer"),
            ViolationKind::OrderNotIncreasing { previous, found } => {
                write!(f, "Order {found} does not follow {previous}")
            }
            ViolationKind::DuplicateEventId { id } => write!(f, "duplicate EventID {id}"),
            ViolationKind::DanglingCodeState { id } => write!(f, "CodeStateID {id} has no code state"),
            ViolationKind::BadTimestamp { value } => write!(f, "ClientTimestamp `{value}` is not RFC 3339"),
            ViolationKind::MissingMetadata { property } => write!(f, "metadata lacks {property}"),
            ViolationKind::InvalidMetadata { property, value } => write!(f, "metadata {property} = `{value}` is invalid"),
        }
    }
}

/// Check `bundle` and list every violation found, in table order.
pub fn validate_bundle(bundle: &Bundle) -> Vec<Violation> {
    let mut out = Vec::new();
    let table = |kind| Violation { row: None, kind };

    for p in REQUIRED_METADATA {
        match bundle.metadata_value(p) {
            None | Some("") => out.push(table(ViolationKind::MissingMetadata { property: p.into() })),
            Some(v) => {
                let ok = match p {
                    "IsEventOrderingConsistent" => v == "true" || v == "false",
                    "EventOrderScope" => ["Global", "Restricted", "None"].contains(&v),
                    "CodeStateRepresentation" => v == "Directory",
                    _ => true,
                };
                if !ok {
                    out.push(table(ViolationKind::InvalidMetadata {
                        property: p.into(),
                        value: v.into(),
                    }));
                }
            }
        }
    }

    let main = &bundle.main;
    let col = |name: &str| main.column(name);
    for c in REQUIRED_COLUMNS {
        if col(c).is_none() {
            out.push(table(ViolationKind::MissingColumn { column: c.into() }));
        }
    }

    let width = main.header.len();
    let mut previous_order: Option<i64> = None;
    let mut event_ids = HashSet::new();
    for (i, row) in main.rows.iter().enumerate() {
        let r = Some(i + 1);
        let mut push = |kind| out.push(Violation { row: r, kind });
        if row.len() != width {
            push(ViolationKind::RowWidth {
                expected: width,
                found: row.len(),
            });
            continue;
        }
        for c in ["EventID", "Order", "SubjectID", "ToolInstances", "EventType", "ClientTimestamp"] {
            if let Some(j) = col(c) {
                if row[j].is_empty() {
                    push(ViolationKind::MissingValue { column: c.into() });
                }
            }
        }
        if let Some(j) = col("Order") {
            if !row[j].is_empty() {
                match row[j].parse::<i64>() {
                    Ok(o) => {
                        if let Some(p) = previous_order {
                            if o <= p {
                                push(ViolationKind::OrderNotIncreasing { previous: p, found: o });
                            }
                        }
                        previous_order = Some(o);
                    }
                    Err(_) => push(ViolationKind::BadOrder { value: row[j].clone() }),
                }
            }
        }
        if let Some(j) = col("EventID") {
            if !row[j].is_empty() && !event_ids.insert(row[j].as_str()) {
                push(ViolationKind::DuplicateEventId { id: row[j].clone() });
            }
        }
        if let Some(j) = col("CodeStateID") {
            if !row[j].is_empty() && !bundle.code_states.contains_key(&row[j]) {
                push(ViolationKind::DanglingCodeState { id: row[j].clone() });
            }
        }
        if let Some(j) = col("ClientTimestamp") {
            if !row[j].is_empty() && DateTime::parse_from_rfc3339(&row[j]).is_err() {
                push(ViolationKind::BadTimestamp { value: row[j].clone() });
            }
        }
    }
    out
}
