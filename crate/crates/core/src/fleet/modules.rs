//! Environment modules: named bundles of variable settings and path
//! prepends that select a parallel-programming flavor with one command.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleManifestEntry {
    pub name: String,
    pub env_sets: BTreeMap<String, String>,
    /// Variable → path segment placed at the front of a `:`-separated list.
    pub env_prepends: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    entries: Vec<ModuleManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("duplicate module name {0:?}")]
pub struct DuplicateModule(pub String);

impl Manifest {
    pub fn new(entries: Vec<ModuleManifestEntry>) -> Result<Self, DuplicateModule> {
        let mut seen = std::collections::BTreeSet::new();
        for e in &entries {
            if !seen.insert(e.name.as_str()) {
                return Err(DuplicateModule(e.name.clone()));
            }
        }
        Ok(Manifest { entries })
    }

    pub fn get(&self, name: &str) -> Option<&ModuleManifestEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.get(name).is_some()
    }

    pub fn entries(&self) -> &[ModuleManifestEntry] {
        &self.entries
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }
}

impl Default for Manifest {
    /// Two MPI implementations and two alternates, each installed under its
    /// own prefix.
    fn default() -> Self {
        let entry = |name: &str, prefix: &str| ModuleManifestEntry {
            name: name.to_owned(),
            env_sets: BTreeMap::new(),
            env_prepends: [
                ("PATH", format!("{prefix}/bin")),
                ("LD_LIBRARY_PATH", format!("{prefix}/lib")),
                ("MANPATH", format!("{prefix}/share/man")),
            ]
            .into_iter()
            .map(|(k, v)| (k.to_owned(), v))
            .collect(),
        };
        Manifest::new(vec![
            entry("mpich1", "/opt/mpich-1.2.7"),
            entry("mpich2", "/opt/mpich2-1.0.6"),
            entry("lam-mpi", "/opt/lam-7.1.4"),
            entry("pvm", "/opt/pvm3"),
        ])
        .expect("default names are unique")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Loaded {
    name: String,
    /// Values the module overwrote; `None` means the variable was unset.
    saved: BTreeMap<String, Option<String>>,
}

/// A node's process environment plus the stack of loaded modules.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Environment {
    vars: BTreeMap<String, String>,
    loaded: Vec<Loaded>,
}

impl Environment {
    pub fn new(vars: BTreeMap<String, String>) -> Self {
        Environment {
            vars,
            loaded: Vec::new(),
        }
    }

    pub fn vars(&self) -> &BTreeMap<String, String> {
        &self.vars
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.vars.get(key).map(String::as_str)
    }

    pub fn loaded(&self) -> Vec<&str> {
        self.loaded.iter().map(|l| l.name.as_str()).collect()
    }

    /// `KEY=value` lines in key order; the byte form compared across nodes.
    pub fn render(&self) -> String {
        self.vars
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    pub fn apply(&self, entry: &ModuleManifestEntry) -> Environment {
        let mut next = self.clone();
        let mut saved = BTreeMap::new();
        for key in entry.env_sets.keys().chain(entry.env_prepends.keys()) {
            saved
                .entry(key.clone())
                .or_insert_with(|| self.vars.get(key).cloned());
        }
        for (k, v) in &entry.env_sets {
            next.vars.insert(k.clone(), v.clone());
        }
        for (k, seg) in &entry.env_prepends {
            let joined = match next.vars.get(k) {
                Some(old) if !old.is_empty() => format!("{seg}:{old}"),
                _ => seg.clone(),
            };
            next.vars.insert(k.clone(), joined);
        }
        next.loaded.push(Loaded {
            name: entry.name.clone(),
            saved,
        });
        next
    }

    /// Undoes the most recent load of `name`. Modules loaded after it are
    /// unwound and re-applied, so the result equals never having loaded it.
    /// Unloading a module that is not loaded returns the environment as is.
    pub fn remove(&self, name: &str, manifest: &Manifest) -> Environment {
        let Some(pos) = self.loaded.iter().rposition(|l| l.name == name) else {
            return self.clone();
        };
        let mut next = self.clone();
        let above: Vec<Loaded> = next.loaded.split_off(pos);
        for layer in above.iter().rev() {
            for (k, old) in &layer.saved {
                match old {
                    Some(v) => next.vars.insert(k.clone(), v.clone()),
                    None => next.vars.remove(k),
                };
            }
        }
        for layer in &above[1..] {
            if let Some(entry) = manifest.get(&layer.name) {
                next = next.apply(entry);
            }
        }
        next
    }

    /// Unloads everything.
    pub fn purge(&self, manifest: &Manifest) -> Environment {
        let mut next = self.clone();
        while let Some(top) = next.loaded.last().map(|l| l.name.clone()) {
            next = next.remove(&top, manifest);
        }
        next
    }

    /// Replaces whatever is loaded with `entry`.
    pub fn switch(&self, entry: &ModuleManifestEntry, manifest: &Manifest) -> Environment {
        self.purge(manifest).apply(entry)
    }
}
