//! Economy and quota documents: UTF-8 JSON with the schemas described in the
//! README. Optional fields take documented defaults (uniform weight 1/n,
//! zero offsets, unbounded boxes), `null` bounds mean +infinity, and every
//! dimension mismatch is a schema error.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::economy::{CommoditySpace, Consumer, Economy, EconomyError};
use crate::firms::{Technology, TechnologyKind};
use crate::preferences::PreferenceSpec;

#[derive(Debug, Serialize, Deserialize)]
struct CommoditiesDoc {
    ell: usize,
    bad_count: usize,
    #[serde(default)]
    regulated_count: usize,
    #[serde(default)]
    labels: Option<Vec<String>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ConsumerDoc {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weight: Option<f64>,
    endowment: Vec<f64>,
    #[serde(default)]
    shares: Vec<f64>,
    #[serde(default)]
    bounds: Option<Vec<Option<f64>>>,
    preference: PreferenceSpec,
}

#[derive(Debug, Serialize, Deserialize)]
struct FirmDoc {
    kind: TechnologyKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    offset: Option<Vec<f64>>,
    #[serde(default)]
    generators: Vec<Vec<f64>>,
    #[serde(default)]
    free_disposal: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct EconomyDoc {
    commodities: CommoditiesDoc,
    consumers: Vec<ConsumerDoc>,
    #[serde(default)]
    firms: Vec<FirmDoc>,
    #[serde(default)]
    monotone_witnesses: BTreeMap<String, Vec<String>>,
}

/// Parses an economy document. Malformed JSON is a parse error; missing
/// fields and dimension mismatches are schema errors.
pub fn load_economy(text: &str) -> Result<Economy, EconomyError> {
    let doc: EconomyDoc = serde_json::from_str(text)?;
    let ell = doc.commodities.ell;
    if ell == 0 {
        return Err(EconomyError::Schema("ell must be positive".into()));
    }
    if doc.commodities.bad_count > ell {
        return Err(EconomyError::Schema(format!(
            "bad_count {} exceeds ell {ell}",
            doc.commodities.bad_count
        )));
    }
    if doc.commodities.regulated_count > ell {
        return Err(EconomyError::Schema(format!(
            "regulated_count {} exceeds ell {ell}",
            doc.commodities.regulated_count
        )));
    }
    let labels = match doc.commodities.labels {
        Some(labels) => {
            if labels.len() != ell {
                return Err(EconomyError::Schema(format!(
                    "{} labels for {ell} commodities",
                    labels.len()
                )));
            }
            labels
        }
        None => (0..ell).map(|i| format!("c{i}")).collect(),
    };

    let firm_count = doc.firms.len();
    let mut firms = Vec::with_capacity(firm_count);
    for (j, f) in doc.firms.into_iter().enumerate() {
        let offset = f.offset.unwrap_or_else(|| vec![0.0; ell]);
        if offset.len() != ell {
            return Err(EconomyError::Schema(format!(
                "firm {j} offset has {} entries for {ell} commodities",
                offset.len()
            )));
        }
        for (r, g) in f.generators.iter().enumerate() {
            if g.len() != ell {
                return Err(EconomyError::Schema(format!(
                    "firm {j} generator {r} has {} entries for {ell} commodities",
                    g.len()
                )));
            }
        }
        if f.kind == TechnologyKind::Zero && !f.generators.is_empty() {
            return Err(EconomyError::Schema(format!(
                "firm {j} is a singleton technology but declares generators"
            )));
        }
        firms.push(Technology {
            kind: f.kind,
            offset,
            generators: f.generators,
            free_disposal: f.free_disposal,
        });
    }

    let n = doc.consumers.len();
    if n == 0 {
        return Err(EconomyError::Schema("at least one consumer is required".into()));
    }
    let default_weight = 1.0 / n as f64;
    let mut consumers = Vec::with_capacity(n);
    for c in doc.consumers {
        if c.endowment.len() != ell {
            return Err(EconomyError::Schema(format!(
                "consumer {} endowment has {} entries for {ell} commodities",
                c.id,
                c.endowment.len()
            )));
        }
        if c.shares.len() != firm_count {
            return Err(EconomyError::Schema(format!(
                "consumer {} has {} share entries for {firm_count} firms",
                c.id,
                c.shares.len()
            )));
        }
        let bounds = match c.bounds {
            Some(b) => {
                if b.len() != ell {
                    return Err(EconomyError::Schema(format!(
                        "consumer {} bounds have {} entries for {ell} commodities",
                        c.id,
                        b.len()
                    )));
                }
                b.into_iter().map(|v| v.unwrap_or(f64::INFINITY)).collect()
            }
            None => vec![f64::INFINITY; ell],
        };
        consumers.push(Consumer {
            id: c.id,
            weight: c.weight.unwrap_or(default_weight),
            endowment: c.endowment,
            shares: c.shares,
            bounds,
            preference: c.preference,
        });
    }

    let mut witnesses = BTreeMap::new();
    for (key, ids) in doc.monotone_witnesses {
        let index: usize = key.parse().map_err(|_| {
            EconomyError::Schema(format!("monotone witness key {key:?} is not a commodity index"))
        })?;
        if index >= ell {
            return Err(EconomyError::Schema(format!(
                "monotone witness key {index} exceeds the commodity count"
            )));
        }
        witnesses.insert(index, ids);
    }

    Ok(Economy {
        commodities: CommoditySpace {
            ell,
            bad_count: doc.commodities.bad_count,
            regulated_count: doc.commodities.regulated_count,
            labels,
        },
        consumers,
        firms,
        monotone_witnesses: witnesses,
    })
}

/// Serializes an economy so that `load_economy(serialize_economy(e)) == e`
/// field for field (floats round-trip losslessly through serde_json).
pub fn serialize_economy(econ: &Economy) -> String {
    let doc = EconomyDoc {
        commodities: CommoditiesDoc {
            ell: econ.commodities.ell,
            bad_count: econ.commodities.bad_count,
            regulated_count: econ.commodities.regulated_count,
            labels: Some(econ.commodities.labels.clone()),
        },
        consumers: econ
            .consumers
            .iter()
            .map(|c| ConsumerDoc {
                id: c.id.clone(),
                weight: Some(c.weight),
                endowment: c.endowment.clone(),
                shares: c.shares.clone(),
                bounds: Some(
                    c.bounds
                        .iter()
                        .map(|b| if b.is_finite() { Some(*b) } else { None })
                        .collect(),
                ),
                preference: c.preference.clone(),
            })
            .collect(),
        firms: econ
            .firms
            .iter()
            .map(|f| FirmDoc {
                kind: f.kind,
                offset: Some(f.offset.clone()),
                generators: f.generators.clone(),
                free_disposal: f.free_disposal,
            })
            .collect(),
        monotone_witnesses: econ
            .monotone_witnesses
            .iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect(),
    };
    serde_json::to_string_pretty(&doc).expect("economy serialization is infallible")
}
