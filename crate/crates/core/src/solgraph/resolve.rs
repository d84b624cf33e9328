use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{SolgraphError, VENDORED_DIR};

/// A compiler-style import remapping, `prefix=target`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Remapping {
    pub prefix: String,
    pub target: String,
}

impl FromStr for Remapping {
    type Err = SolgraphError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        // solc also accepts a `context:` qualifier; it is irrelevant for
        // file-level resolution and is dropped.
        let s = match s.split_once(':') {
            Some((_, rest)) if !rest.contains(':') && rest.contains('=') => rest,
            _ => s,
        };
        match s.split_once('=') {
            Some((prefix, target)) if !prefix.is_empty() => Ok(Remapping {
                prefix: prefix.to_string(),
                target: target.to_string(),
            }),
            _ => Err(SolgraphError::InvalidRemapping(s.to_string())),
        }
    }
}

impl fmt::Display for Remapping {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}={}", self.prefix, self.target)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolverConfig {
    pub remappings: Vec<Remapping>,
    /// Project-relative directories searched for bare specifiers after the
    /// project root itself.
    pub library_roots: Vec<String>,
}

impl ResolverConfig {
    pub fn with_remappings(remappings: Vec<Remapping>) -> Self {
        ResolverConfig {
            remappings,
            library_roots: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Resolution {
    Resolved(String),
    Unresolved,
}

impl Resolution {
    pub fn path(&self) -> Option<&str> {
        match self {
            Resolution::Resolved(p) => Some(p),
            Resolution::Unresolved => None,
        }
    }
}

/// Lexically normalizes a `/`-separated relative path. Returns `None` for
/// absolute paths and for paths that climb above their root.
pub fn normalize(path: &str) -> Option<String> {
    if path.starts_with('/') {
        return None;
    }
    let mut parts: Vec<&str> = Vec::new();
    for seg in path.split('/') {
        match seg {
            "" | "." => {}
            ".." => {
                parts.pop()?;
            }
            s => parts.push(s),
        }
    }
    if parts.is_empty() {
        None
    } else {
        Some(parts.join("/"))
    }
}

fn parent_dir(path: &str) -> &str {
    match path.rfind('/') {
        Some(i) => &path[..i],
        None => "",
    }
}

fn join(dir: &str, rel: &str) -> String {
    if dir.is_empty() {
        rel.to_string()
    } else {
        format!("{dir}/{rel}")
    }
}

/// Resolves import specifiers against a fixed set of known project files.
///
/// Resolution never touches the filesystem: a target only resolves if it is in
/// `known`, which is populated from a project scan.
#[derive(Debug, Clone)]
pub struct Resolver<'a> {
    config: &'a ResolverConfig,
    known: &'a BTreeSet<String>,
}

impl<'a> Resolver<'a> {
    pub fn new(config: &'a ResolverConfig, known: &'a BTreeSet<String>) -> Self {
        Resolver { config, known }
    }

    fn lookup(&self, candidate: &str) -> Resolution {
        match normalize(candidate) {
            Some(p) if self.known.contains(&p) => Resolution::Resolved(p),
            _ => Resolution::Unresolved,
        }
    }

    /// Tries, in order: a relative path from the importer's directory
    /// (`./`, `../`); the longest matching remapping; the project root; each
    /// library root. Anything still unresolved falls back to a previously
    /// vendored stub of the same file name.
    pub fn resolve(&self, importer: &str, specifier: &str) -> Resolution {
        match self.resolve_declared(importer, specifier) {
            Resolution::Unresolved => self.resolve_vendored(specifier),
            found => found,
        }
    }

    fn resolve_declared(&self, importer: &str, specifier: &str) -> Resolution {
        if specifier.starts_with("./") || specifier.starts_with("../") {
            return self.lookup(&join(parent_dir(importer), specifier));
        }
        let remap = self
            .config
            .remappings
            .iter()
            .filter(|r| specifier.starts_with(&r.prefix))
            // max_by_key keeps the last of equal maxima: later definitions win, as in solc.
            .max_by_key(|r| r.prefix.len());
        if let Some(r) = remap {
            let rest = &specifier[r.prefix.len()..];
            return self.lookup(&format!("{}{}", r.target, rest));
        }
        if let Resolution::Resolved(p) = self.lookup(specifier) {
            return Resolution::Resolved(p);
        }
        for root in &self.config.library_roots {
            if let Resolution::Resolved(p) = self.lookup(&join(root.trim_end_matches('/'), specifier)) {
                return Resolution::Resolved(p);
            }
        }
        Resolution::Unresolved
    }

    /// Stubs copied in by an earlier patch run live at `vendored/<file name>`.
    fn resolve_vendored(&self, specifier: &str) -> Resolution {
        let name = specifier.rsplit('/').next().unwrap_or(specifier);
        self.lookup(&format!("{VENDORED_DIR}/{name}"))
    }
}

/// Free-function form of [`Resolver::resolve`].
pub fn resolve_specifier(
    importer: &str,
    specifier: &str,
    config: &ResolverConfig,
    known: &BTreeSet<String>,
) -> Resolution {
    Resolver::new(config, known).resolve(importer, specifier)
}
