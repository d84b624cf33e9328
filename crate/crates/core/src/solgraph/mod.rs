//! Solidity project dependency recovery.
//!
//! A project tree is scanned for `.sol` files, every file's import directives
//! are extracted with a comment- and string-aware scanner, specifiers are
//! resolved to project files, and the result is assembled into a
//! [`DependencyGraph`]. Imports that cannot be resolved can then be filled
//! from a local stub library with [`patch_missing`], which copies matching
//! contracts into a `vendored/` subtree of the project.

mod lexer;
mod resolve;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use walkdir::WalkDir;

pub use lexer::{parse_imports, parse_source, ImportKind, ImportStatement, ParseWarning, ParsedSource};
pub use resolve::{normalize, resolve_specifier, Remapping, Resolution, Resolver, ResolverConfig};

pub const SOLIDITY_EXTENSION: &str = "sol";
pub const VENDORED_DIR: &str = "vendored";

#[derive(Debug, Error)]
pub enum SolgraphError {
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid remapping `{0}`, expected prefix=target")]
    InvalidRemapping(String),
    #[error("{0} is not a directory")]
    NotADirectory(PathBuf),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SolgraphError + '_ {
    move |source| SolgraphError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One Solidity file of a project.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceUnit {
    /// Project-relative path with `/` separators.
    pub path: String,
    pub raw_text: String,
    pub imports: Vec<ImportStatement>,
    pub pragma_versions: Vec<String>,
    pub warnings: Vec<ParseWarning>,
    /// Set when the file could not be read; `imports` is then empty.
    pub unreadable: bool,
}

impl SourceUnit {
    pub fn from_text(path: impl Into<String>, raw_text: impl Into<String>) -> Self {
        let raw_text = raw_text.into();
        let parsed = parse_source(&raw_text);
        SourceUnit {
            path: path.into(),
            raw_text,
            imports: parsed.imports,
            pragma_versions: parsed.pragma_versions,
            warnings: parsed.warnings,
            unreadable: false,
        }
    }

    fn unreadable(path: String, err: &std::io::Error) -> Self {
        SourceUnit {
            path,
            raw_text: String::new(),
            imports: Vec::new(),
            pragma_versions: Vec::new(),
            warnings: vec![ParseWarning {
                offset: 0,
                message: format!("unreadable file: {err}"),
            }],
            unreadable: true,
        }
    }
}

fn relative_slash_path(root: &Path, path: &Path) -> Option<String> {
    let rel = path.strip_prefix(root).ok()?;
    let parts: Vec<String> = rel
        .components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect();
    Some(parts.join("/"))
}

fn is_solidity_file(path: &Path) -> bool {
    path.extension().and_then(|e| e.to_str()) == Some(SOLIDITY_EXTENSION)
}

/// Collects every `.sol` file under `root`, sorted by project-relative path.
///
/// Symbolic links are not followed. A file that cannot be read yields a unit
/// flagged `unreadable` instead of failing the scan.
pub fn scan_project(root: &Path) -> Result<Vec<SourceUnit>, SolgraphError> {
    let meta = fs::metadata(root).map_err(io_err(root))?;
    if !meta.is_dir() {
        return Err(SolgraphError::NotADirectory(root.to_path_buf()));
    }
    fs::read_dir(root).map_err(io_err(root))?;

    let mut files = Vec::new();
    for entry in WalkDir::new(root).follow_links(false).sort_by_file_name() {
        let entry = match entry {
            Ok(e) => e,
            // Unreadable subdirectories are skipped, the root was checked above.
            Err(_) => continue,
        };
        if entry.file_type().is_file() && is_solidity_file(entry.path()) {
            if let Some(rel) = relative_slash_path(root, entry.path()) {
                files.push((rel, entry.into_path()));
            }
        }
    }
    files.sort_by(|a, b| a.0.cmp(&b.0));

    Ok(files
        .into_par_iter()
        .map(|(rel, abs)| match fs::read(&abs) {
            Ok(bytes) => SourceUnit::from_text(rel, String::from_utf8_lossy(&bytes).into_owned()),
            Err(e) => SourceUnit::unreadable(rel, &e),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct UnresolvedImport {
    pub importer: String,
    pub specifier: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DependencyGraph {
    pub nodes: BTreeSet<String>,
    /// `(importer, imported)` pairs.
    pub edges: BTreeSet<(String, String)>,
    pub unresolved: Vec<UnresolvedImport>,
}

impl DependencyGraph {
    /// Files directly imported by `path`.
    pub fn dependencies_of<'a>(&'a self, path: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.edges
            .range((path.to_string(), String::new())..)
            .take_while(move |(from, _)| from == path)
            .map(|(_, to)| to.as_str())
    }

    pub fn has_cycle(&self) -> bool {
        let mut state: BTreeMap<&str, u8> = BTreeMap::new();
        fn visit<'a>(g: &'a DependencyGraph, n: &'a str, state: &mut BTreeMap<&'a str, u8>) -> bool {
            match state.get(n) {
                Some(1) => return true,
                Some(2) => return false,
                _ => {}
            }
            state.insert(n, 1);
            for d in g.dependencies_of(n) {
                if visit(g, d, state) {
                    return true;
                }
            }
            state.insert(n, 2);
            false
        }
        self.nodes.iter().any(|n| visit(self, n, &mut state))
    }
}

type UnitLinks = (Vec<(String, String)>, Vec<UnresolvedImport>);

/// Builds the import graph of `units`. Cyclic imports are kept as-is.
pub fn build_graph(units: &[SourceUnit], config: &ResolverConfig) -> DependencyGraph {
    let known: BTreeSet<String> = units.iter().map(|u| u.path.clone()).collect();
    let resolver = Resolver::new(config, &known);
    let per_unit: Vec<UnitLinks> = units
        .par_iter()
        .map(|u| {
            let mut edges = Vec::new();
            let mut missing = Vec::new();
            for imp in &u.imports {
                match resolver.resolve(&u.path, &imp.specifier) {
                    Resolution::Resolved(to) => edges.push((u.path.clone(), to)),
                    Resolution::Unresolved => missing.push(UnresolvedImport {
                        importer: u.path.clone(),
                        specifier: imp.specifier.clone(),
                    }),
                }
            }
            (edges, missing)
        })
        .collect();

    let mut graph = DependencyGraph {
        nodes: known.clone(),
        ..Default::default()
    };
    let mut unresolved = BTreeSet::new();
    for (edges, missing) in per_unit {
        for (from, to) in edges {
            graph.nodes.insert(to.clone());
            graph.edges.insert((from, to));
        }
        unresolved.extend(missing);
    }
    graph.unresolved = unresolved.into_iter().collect();
    graph
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PatchRecord {
    pub specifier: String,
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AmbiguousStub {
    pub file_name: String,
    /// Stub-library-relative candidates; the first one was used.
    pub candidates: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FileWarning {
    pub path: String,
    pub offset: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolutionReport {
    /// Final path component of the project root, so reports do not depend on
    /// where the project is checked out.
    pub project_root: String,
    pub file_count: usize,
    pub edge_count: usize,
    pub missing: Vec<UnresolvedImport>,
    pub patched: Vec<PatchRecord>,
    pub ambiguous: Vec<AmbiguousStub>,
    /// Imports of vendored stubs that the stub library could not satisfy.
    pub vendored_gaps: Vec<UnresolvedImport>,
    pub warnings: Vec<FileWarning>,
}

fn root_name(root: &Path) -> String {
    let canonical = fs::canonicalize(root).unwrap_or_else(|_| root.to_path_buf());
    canonical
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| ".".into())
}

impl ResolutionReport {
    /// Report for a graph that has not been patched.
    pub fn for_graph(root: &Path, graph: &DependencyGraph, units: &[SourceUnit]) -> Self {
        let mut warnings: Vec<FileWarning> = units
            .iter()
            .flat_map(|u| {
                u.warnings.iter().map(move |w| FileWarning {
                    path: u.path.clone(),
                    offset: w.offset,
                    message: w.message.clone(),
                })
            })
            .collect();
        warnings.sort();
        ResolutionReport {
            project_root: root_name(root),
            file_count: graph.nodes.len(),
            edge_count: graph.edges.len(),
            missing: graph.unresolved.clone(),
            patched: Vec::new(),
            ambiguous: Vec::new(),
            vendored_gaps: Vec::new(),
            warnings,
        }
    }
}

fn terminal_name(specifier: &str) -> &str {
    specifier.rsplit('/').next().unwrap_or(specifier)
}

fn index_stub_library(stubs: &Path) -> Result<BTreeMap<String, Vec<String>>, SolgraphError> {
    if !fs::metadata(stubs).map_err(io_err(stubs))?.is_dir() {
        return Err(SolgraphError::NotADirectory(stubs.to_path_buf()));
    }
    let mut index: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for entry in WalkDir::new(stubs).follow_links(false) {
        let entry = entry.map_err(|e| SolgraphError::Io {
            path: stubs.to_path_buf(),
            source: e.into(),
        })?;
        if entry.file_type().is_file() && is_solidity_file(entry.path()) {
            if let Some(rel) = relative_slash_path(stubs, entry.path()) {
                let name = entry.file_name().to_string_lossy().into_owned();
                index.entry(name).or_default().push(rel);
            }
        }
    }
    for candidates in index.values_mut() {
        candidates.sort();
    }
    Ok(index)
}

/// Fills unresolved imports from a local stub library.
///
/// Each unresolved specifier whose file name exists in `stub_library` is
/// copied to `<project_root>/vendored/<name>` and linked into the graph. The
/// imports of vendored files are followed as well; gaps among those are
/// reported in `vendored_gaps` and do not enter `graph.unresolved`, so the
/// unresolved list never grows.
///
/// The input graph is not modified. On an I/O error no graph is returned,
/// although files copied before the failure stay on disk.
pub fn patch_missing(
    graph: &DependencyGraph,
    units: &[SourceUnit],
    project_root: &Path,
    stub_library: &Path,
    config: &ResolverConfig,
) -> Result<(DependencyGraph, ResolutionReport), SolgraphError> {
    let mut report = ResolutionReport::for_graph(project_root, graph, units);
    if graph.unresolved.is_empty() {
        return Ok((graph.clone(), report));
    }
    let stub_index = index_stub_library(stub_library)?;

    let mut out = DependencyGraph {
        nodes: graph.nodes.clone(),
        edges: graph.edges.clone(),
        unresolved: Vec::new(),
    };
    let mut known = graph.nodes.clone();
    let mut vendored_by_name: BTreeMap<String, String> = BTreeMap::new();
    let mut patched: BTreeMap<String, String> = BTreeMap::new();
    let mut ambiguous = Vec::new();
    let mut missing = BTreeSet::new();
    let mut gaps = BTreeSet::new();

    // (import, originates from a vendored stub)
    let mut queue: VecDeque<(UnresolvedImport, bool)> =
        graph.unresolved.iter().cloned().map(|u| (u, false)).collect();

    while let Some((u, from_stub)) = queue.pop_front() {
        let name = terminal_name(&u.specifier).to_string();
        let target = if let Some(p) = vendored_by_name.get(&name) {
            Some(p.clone())
        } else if let Some(candidates) = stub_index.get(&name) {
            if candidates.len() > 1 {
                ambiguous.push(AmbiguousStub {
                    file_name: name.clone(),
                    candidates: candidates.clone(),
                });
            }
            let rel = format!("{VENDORED_DIR}/{name}");
            let src = stub_library.join(&candidates[0]);
            let dest_dir = project_root.join(VENDORED_DIR);
            fs::create_dir_all(&dest_dir).map_err(io_err(&dest_dir))?;
            let dest = dest_dir.join(&name);
            let text = fs::read(&src).map_err(io_err(&src))?;
            fs::write(&dest, &text).map_err(io_err(&dest))?;

            known.insert(rel.clone());
            out.nodes.insert(rel.clone());
            vendored_by_name.insert(name.clone(), rel.clone());

            let unit = SourceUnit::from_text(rel.clone(), String::from_utf8_lossy(&text).into_owned());
            let resolver = Resolver::new(config, &known);
            for imp in &unit.imports {
                match resolver.resolve(&rel, &imp.specifier) {
                    Resolution::Resolved(to) => {
                        out.edges.insert((rel.clone(), to));
                    }
                    Resolution::Unresolved => queue.push_back((
                        UnresolvedImport {
                            importer: rel.clone(),
                            specifier: imp.specifier.clone(),
                        },
                        true,
                    )),
                }
            }
            Some(rel)
        } else {
            None
        };

        match target {
            Some(rel) => {
                out.edges.insert((u.importer.clone(), rel.clone()));
                if !from_stub {
                    patched.entry(u.specifier.clone()).or_insert(rel);
                }
            }
            None if from_stub => {
                gaps.insert(u);
            }
            None => {
                missing.insert(u);
            }
        }
    }

    out.unresolved = missing.iter().cloned().collect();
    report.file_count = out.nodes.len();
    report.edge_count = out.edges.len();
    report.missing = out.unresolved.clone();
    report.patched = patched
        .into_iter()
        .map(|(specifier, path)| PatchRecord { specifier, path })
        .collect();
    report.ambiguous = ambiguous;
    report.vendored_gaps = gaps.into_iter().collect();
    Ok((out, report))
}

/// On-disk form of a resolved project: the graph plus its report. Field order
/// and sorting are fixed so the serialized file is diff-stable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphDocument {
    #[serde(flatten)]
    pub graph: DependencyGraph,
    pub report: ResolutionReport,
}

impl GraphDocument {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("graph document serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }
}

/// Scan, resolve, and optionally patch a project in one call.
pub fn collect(
    root: &Path,
    config: &ResolverConfig,
    stub_library: Option<&Path>,
) -> Result<(Vec<SourceUnit>, GraphDocument), SolgraphError> {
    let units = scan_project(root)?;
    let graph = build_graph(&units, config);
    let (graph, report) = match stub_library {
        Some(stubs) => patch_missing(&graph, &units, root, stubs, config)?,
        None => {
            let report = ResolutionReport::for_graph(root, &graph, &units);
            (graph, report)
        }
    };
    Ok((units, GraphDocument { graph, report }))
}
