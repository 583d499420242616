//! Name-based persistent references and bidirectional namespaces.
//!
//! A [`PersistentRef`] locates an object by a (store, container, object)
//! name triple; an empty store name means "same store as the referrer".
//! A [`NamespaceTable`] maps names to refs in the forward direction and
//! refs back to their (possibly many) names in the reverse direction, and
//! keeps the two views exactly consistent.

use std::collections::BTreeMap;

use crate::error::{Result, StoreError};
use crate::names::validate_name;
use crate::value::Value;

/// Reserved object name under which a container's namespace table persists.
pub const NAMESPACE_OBJECT: &str = "__namespace__";

/// Reserved record field carrying an object-scoped namespace table.
pub const NAMESPACE_FIELD: &str = "__ns";

/// A reference that identifies an object across stores by name alone.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PersistentRef {
    /// Logical store name; empty means the referrer's own store.
    pub store: String,
    pub container: String,
    pub object: String,
}

impl PersistentRef {
    /// Canonical string form `store|container|object`. Name rules forbid
    /// `|` in every component, so the form is unambiguous.
    pub fn canonical(&self) -> String {
        format!("{}|{}|{}", self.store, self.container, self.object)
    }
}

impl std::fmt::Display for PersistentRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.canonical())
    }
}

/// Validates the triple and builds a reference. No I/O.
pub fn make_ref(store: &str, container: &str, object: &str) -> Result<PersistentRef> {
    if !store.is_empty() {
        validate_name(store)?;
    }
    validate_name(container)?;
    validate_name(object)?;
    Ok(PersistentRef {
        store: store.to_owned(),
        container: container.to_owned(),
        object: object.to_owned(),
    })
}

/// A naming scope: either a whole container or a single object.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Scope {
    Container(String),
    Object { container: String, object: String },
}

impl Scope {
    pub fn container(name: impl Into<String>) -> Scope {
        Scope::Container(name.into())
    }

    pub fn object(container: impl Into<String>, object: impl Into<String>) -> Scope {
        Scope::Object {
            container: container.into(),
            object: object.into(),
        }
    }
}

/// Bidirectional name table for one scope.
///
/// Forward names are unique; a single target may carry many names, so the
/// reverse side maps a canonical ref string to a sorted, duplicate-free
/// list of names.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NamespaceTable {
    forward: BTreeMap<String, PersistentRef>,
    reverse: BTreeMap<String, Vec<String>>,
}

impl NamespaceTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn forward(&self) -> &BTreeMap<String, PersistentRef> {
        &self.forward
    }

    pub fn reverse(&self) -> &BTreeMap<String, Vec<String>> {
        &self.reverse
    }

    /// Adds a name for a target, updating both directions.
    pub fn bind(&mut self, name: &str, target: PersistentRef) -> Result<()> {
        validate_name(name)?;
        if self.forward.contains_key(name) {
            return Err(StoreError::NameExists {
                container: String::new(),
                name: name.to_owned(),
            });
        }
        let key = target.canonical();
        self.forward.insert(name.to_owned(), target);
        let names = self.reverse.entry(key).or_default();
        match names.binary_search_by(|n| n.as_str().cmp(name)) {
            Ok(_) => {}
            Err(pos) => names.insert(pos, name.to_owned()),
        }
        Ok(())
    }

    pub fn resolve(&self, name: &str) -> Option<&PersistentRef> {
        self.forward.get(name)
    }

    /// All names bound to `target` in this table, ascending; empty if none.
    pub fn names_of(&self, target: &PersistentRef) -> Vec<String> {
        self.reverse
            .get(&target.canonical())
            .cloned()
            .unwrap_or_default()
    }

    /// Checks exact forward/reverse agreement.
    pub fn is_consistent(&self) -> bool {
        let mut derived: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (name, target) in &self.forward {
            derived
                .entry(target.canonical())
                .or_default()
                .push(name.clone());
        }
        derived == self.reverse
    }

    /// Encodes the table as `Rec{forward: Map name -> Ref, reverse: Map
    /// canonical -> Seq of Str}`.
    pub fn to_value(&self) -> Value {
        let forward = self
            .forward
            .iter()
            .map(|(n, r)| (n.clone(), Value::Ref(r.clone())))
            .collect::<BTreeMap<_, _>>();
        let reverse = self
            .reverse
            .iter()
            .map(|(k, names)| {
                (
                    k.clone(),
                    Value::Seq(names.iter().map(|n| Value::Str(n.clone())).collect()),
                )
            })
            .collect::<BTreeMap<_, _>>();
        Value::Rec(vec![
            ("forward".into(), Value::Map(forward)),
            ("reverse".into(), Value::Map(reverse)),
        ])
    }

    /// Inverse of [`to_value`](Self::to_value); rejects tables whose two
    /// directions disagree.
    pub fn from_value(v: &Value) -> Result<NamespaceTable> {
        let malformed = |what: &str| StoreError::MalformedEncoding(format!("namespace table: {what}"));
        let Value::Rec(fields) = v else {
            return Err(malformed("not a record"));
        };
        let [(f_name, f_val), (r_name, r_val)] = fields.as_slice() else {
            return Err(malformed("expected exactly forward and reverse fields"));
        };
        if f_name != "forward" || r_name != "reverse" {
            return Err(malformed("unexpected field names"));
        }
        let Value::Map(fwd) = f_val else {
            return Err(malformed("forward is not a map"));
        };
        let Value::Map(rev) = r_val else {
            return Err(malformed("reverse is not a map"));
        };
        let mut table = NamespaceTable::new();
        for (name, val) in fwd {
            let Value::Ref(r) = val else {
                return Err(malformed("forward entry is not a ref"));
            };
            table.forward.insert(name.clone(), r.clone());
        }
        for (key, val) in rev {
            let Value::Seq(items) = val else {
                return Err(malformed("reverse entry is not a sequence"));
            };
            let mut names = Vec::with_capacity(items.len());
            for item in items {
                let Value::Str(s) = item else {
                    return Err(malformed("reverse name is not a string"));
                };
                names.push(s.clone());
            }
            table.reverse.insert(key.clone(), names);
        }
        if !table.is_consistent() {
            return Err(malformed("forward and reverse directions disagree"));
        }
        Ok(table)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(c: &str, o: &str) -> PersistentRef {
        make_ref("", c, o).unwrap()
    }

    #[test]
    fn make_ref_validates() {
        let good = make_ref("", "hits", "ev001").unwrap();
        assert_eq!(good.store, "");
        assert_eq!(good.canonical(), "|hits|ev001");
        assert!(make_ref("", "hits", "").is_err());
        assert!(make_ref("", "", "ev001").is_err());
        assert!(make_ref("", "hi|ts", "ev001").is_err());
        assert!(make_ref("", "hi/ts", "ev001").is_err());
        assert!(make_ref("geo\tm", "c", "o").is_err());
        assert!(make_ref("geom", "c", "o").is_ok());
    }

    #[test]
    fn bind_and_resolve() {
        let mut t = NamespaceTable::new();
        t.bind("alpha", r("hits", "ev001")).unwrap();
        assert_eq!(t.resolve("alpha"), Some(&r("hits", "ev001")));
        assert_eq!(t.resolve("beta"), None);
        // Same name twice is rejected.
        assert!(t.bind("alpha", r("hits", "ev002")).is_err());
    }

    #[test]
    fn many_names_one_target_sorted() {
        let mut t = NamespaceTable::new();
        t.bind("beta", r("hits", "ev001")).unwrap();
        t.bind("alpha", r("hits", "ev001")).unwrap();
        assert_eq!(t.names_of(&r("hits", "ev001")), vec!["alpha", "beta"]);
        assert_eq!(t.names_of(&r("hits", "ev002")), Vec::<String>::new());
        assert!(t.is_consistent());
    }

    #[test]
    fn value_round_trip() {
        let mut t = NamespaceTable::new();
        t.bind("alpha", r("hits", "ev001")).unwrap();
        t.bind("beta", r("hits", "ev001")).unwrap();
        t.bind("gamma", r("geo", "box")).unwrap();
        let v = t.to_value();
        let back = NamespaceTable::from_value(&v).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn from_value_rejects_inconsistency() {
        let mut t = NamespaceTable::new();
        t.bind("alpha", r("hits", "ev001")).unwrap();
        let v = t.to_value();
        // Graft a reverse entry with no forward counterpart.
        let Value::Rec(mut fields) = v else { unreachable!() };
        let Value::Map(rev) = &mut fields[1].1 else {
            unreachable!()
        };
        rev.insert(
            "|geo|box".into(),
            Value::Seq(vec![Value::Str("ghost".into())]),
        );
        assert!(NamespaceTable::from_value(&Value::Rec(fields)).is_err());
    }
}
