use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::*;

#[derive(Debug, thiserror::Error)]
pub enum LoadError {
    #[error("knowledge base is missing section {0:?}")]
    MissingSection(String),
    #[error("malformed knowledge-base document {path}: {detail}")]
    MalformedDocument { path: PathBuf, detail: String },
    #[error("cannot read {path}: {source}")]
    Unreadable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

macro_rules! section_doc {
    ($name:ident { $($field:ident : $ty:ty),* $(,)? }) => {
        #[derive(Serialize, Deserialize)]
        #[serde(deny_unknown_fields)]
        struct $name {
            schema_version: String,
            $($field: $ty,)*
        }
    };
}

section_doc!(FieldMappingDoc { entries: Vec<FieldMappingEntry> });
section_doc!(RunFeaturesDoc { features: Vec<RunFeatureDef> });
section_doc!(CodeFeaturesDoc { features: Vec<CodeFeatureDef> });
section_doc!(DerivedFieldsDoc { fields: Vec<DerivedFieldDef> });
section_doc!(HeadroomTiersDoc { tiers: Vec<HeadroomTierDef> });
section_doc!(PredicatesDoc { predicates: Vec<PredicateDef> });
section_doc!(VetoDoc { rules: Vec<VetoRule> });
section_doc!(DecisionTableDoc { cases: Vec<DecisionCase> });
section_doc!(LlmAssistDoc { methods: Vec<MethodKnowledge> });

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PriorityDoc {
    schema_version: String,
    bottleneck_types: Vec<String>,
    ordering: Vec<String>,
    #[serde(default)]
    overrides: Vec<PriorityOverride>,
}

/// Loads a knowledge base from a directory of section documents
/// (`<section>.json`) or from a single bundle document whose top-level keys
/// are the section names.
pub fn load_knowledge_base(locator: &Path) -> Result<KnowledgeBase, LoadError> {
    let meta = fs::metadata(locator).map_err(|source| LoadError::Unreadable {
        path: locator.to_path_buf(),
        source,
    })?;
    let docs = if meta.is_dir() {
        read_dir_documents(locator)?
    } else {
        read_bundle(locator)?
    };
    from_documents(docs)
}

fn read_dir_documents(dir: &Path) -> Result<BTreeMap<String, (PathBuf, serde_json::Value)>, LoadError> {
    let unreadable = |source| LoadError::Unreadable {
        path: dir.to_path_buf(),
        source,
    };
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(unreadable)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()
        .map_err(unreadable)?;
    paths.sort();
    let mut docs = BTreeMap::new();
    for path in paths {
        if path.is_dir() {
            continue;
        }
        let file_name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if file_name.starts_with('.') {
            continue;
        }
        let malformed = |detail: String| LoadError::MalformedDocument {
            path: path.clone(),
            detail,
        };
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        if path.extension().and_then(|e| e.to_str()) != Some("json") {
            return Err(malformed("knowledge-base documents must be .json".into()));
        }
        if !SECTIONS.contains(&stem) {
            return Err(malformed(format!("unrecognized section {stem:?}")));
        }
        let text = fs::read_to_string(&path).map_err(|source| LoadError::Unreadable {
            path: path.clone(),
            source,
        })?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| malformed(e.to_string()))?;
        docs.insert(stem.to_string(), (path.clone(), value));
    }
    Ok(docs)
}

fn read_bundle(path: &Path) -> Result<BTreeMap<String, (PathBuf, serde_json::Value)>, LoadError> {
    let malformed = |detail: String| LoadError::MalformedDocument {
        path: path.to_path_buf(),
        detail,
    };
    let text = fs::read_to_string(path).map_err(|source| LoadError::Unreadable {
        path: path.to_path_buf(),
        source,
    })?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| malformed(e.to_string()))?;
    let serde_json::Value::Object(map) = value else {
        return Err(malformed("bundle must be an object keyed by section".into()));
    };
    let mut docs = BTreeMap::new();
    for (key, doc) in map {
        if !SECTIONS.contains(&key.as_str()) {
            return Err(malformed(format!("unrecognized section {key:?}")));
        }
        docs.insert(key.clone(), (path.join(&key), doc));
    }
    Ok(docs)
}

fn take<T: DeserializeOwned>(
    docs: &mut BTreeMap<String, (PathBuf, serde_json::Value)>,
    section: &str,
) -> Result<(PathBuf, T), LoadError> {
    let (path, value) = docs
        .remove(section)
        .ok_or_else(|| LoadError::MissingSection(section.to_string()))?;
    let parsed = serde_json::from_value(value).map_err(|e| LoadError::MalformedDocument {
        path: path.clone(),
        detail: e.to_string(),
    })?;
    Ok((path, parsed))
}

fn from_documents(mut docs: BTreeMap<String, (PathBuf, serde_json::Value)>) -> Result<KnowledgeBase, LoadError> {
    // Report the first missing section in canonical order before parsing.
    if let Some(missing) = SECTIONS.iter().find(|s| !docs.contains_key(**s)) {
        return Err(LoadError::MissingSection(missing.to_string()));
    }
    let mut versions: Vec<(PathBuf, String)> = Vec::new();
    let (p, fm): (_, FieldMappingDoc) = take(&mut docs, "field_mapping")?;
    versions.push((p, fm.schema_version));
    let (p, rf): (_, RunFeaturesDoc) = take(&mut docs, "run_features_schema")?;
    versions.push((p, rf.schema_version));
    let (p, cf): (_, CodeFeaturesDoc) = take(&mut docs, "code_features")?;
    versions.push((p, cf.schema_version));
    let (p, df): (_, DerivedFieldsDoc) = take(&mut docs, "derived_fields")?;
    versions.push((p, df.schema_version));
    let (p, ht): (_, HeadroomTiersDoc) = take(&mut docs, "headroom_tiers")?;
    versions.push((p, ht.schema_version));
    let (p, pr): (_, PriorityDoc) = take(&mut docs, "bottleneck_priority_rules")?;
    versions.push((p, pr.schema_version));
    let (p, np): (_, PredicatesDoc) = take(&mut docs, "ncu_predicates")?;
    versions.push((p, np.schema_version));
    let (p, gf): (_, VetoDoc) = take(&mut docs, "global_forbidden_rules")?;
    versions.push((p, gf.schema_version));
    let (p, dt): (_, DecisionTableDoc) = take(&mut docs, "decision_table")?;
    versions.push((p, dt.schema_version));
    let (p, la): (_, LlmAssistDoc) = take(&mut docs, "llm_assist")?;
    versions.push((p, la.schema_version));

    let schema_version = versions[0].1.clone();
    if let Some((path, v)) = versions.iter().find(|(_, v)| *v != schema_version) {
        return Err(LoadError::MalformedDocument {
            path: path.clone(),
            detail: format!("schema_version {v:?} differs from {schema_version:?}"),
        });
    }

    Ok(KnowledgeBase {
        schema_version,
        field_mapping: FieldMapping { entries: fm.entries },
        run_features_schema: RunFeatureSchema { features: rf.features },
        code_features: cf.features,
        derived_fields: df.fields,
        headroom_tiers: ht.tiers,
        bottleneck_types: pr.bottleneck_types,
        priority: PriorityRule {
            ordering: pr.ordering,
            overrides: pr.overrides,
        },
        predicates: np.predicates,
        vetoes: gf.rules,
        decision_table: dt.cases,
        methods: la.methods,
    })
}

pub(super) fn to_documents(kb: &KnowledgeBase) -> BTreeMap<&'static str, serde_json::Value> {
    let v = kb.schema_version.clone();
    let mut out = BTreeMap::new();
    out.insert(
        "field_mapping",
        to(&FieldMappingDoc {
            schema_version: v.clone(),
            entries: kb.field_mapping.entries.clone(),
        }),
    );
    out.insert(
        "run_features_schema",
        to(&RunFeaturesDoc {
            schema_version: v.clone(),
            features: kb.run_features_schema.features.clone(),
        }),
    );
    out.insert(
        "code_features",
        to(&CodeFeaturesDoc {
            schema_version: v.clone(),
            features: kb.code_features.clone(),
        }),
    );
    out.insert(
        "derived_fields",
        to(&DerivedFieldsDoc {
            schema_version: v.clone(),
            fields: kb.derived_fields.clone(),
        }),
    );
    out.insert(
        "headroom_tiers",
        to(&HeadroomTiersDoc {
            schema_version: v.clone(),
            tiers: kb.headroom_tiers.clone(),
        }),
    );
    out.insert(
        "bottleneck_priority_rules",
        to(&PriorityDoc {
            schema_version: v.clone(),
            bottleneck_types: kb.bottleneck_types.clone(),
            ordering: kb.priority.ordering.clone(),
            overrides: kb.priority.overrides.clone(),
        }),
    );
    out.insert(
        "ncu_predicates",
        to(&PredicatesDoc {
            schema_version: v.clone(),
            predicates: kb.predicates.clone(),
        }),
    );
    out.insert(
        "global_forbidden_rules",
        to(&VetoDoc {
            schema_version: v.clone(),
            rules: kb.vetoes.clone(),
        }),
    );
    out.insert(
        "decision_table",
        to(&DecisionTableDoc {
            schema_version: v.clone(),
            cases: kb.decision_table.clone(),
        }),
    );
    out.insert(
        "llm_assist",
        to(&LlmAssistDoc {
            schema_version: v,
            methods: kb.methods.clone(),
        }),
    );
    out
}

fn to<T: Serialize>(doc: &T) -> serde_json::Value {
    serde_json::to_value(doc).expect("knowledge-base documents serialize")
}
