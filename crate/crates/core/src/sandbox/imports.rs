//! Import scanning and policy enforcement, applied before compilation.
//!
//! Detection is line based: any line whose first token is `import` or `from`
//! counts, at any indentation, so imports placed inside function bodies are
//! caught too. Dynamic imports (`__import__`, `importlib`) are not detected.

use std::collections::HashSet;
use std::fs;
use std::io;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::directive_store::{GenerationPolicy, ImportPolicy};
use crate::failure::{FailureCategory, FailureRecord, Stage};

const DEFAULT_STD_MODULES: &str = include_str!("../../assets/std_modules.txt");

/// Top-level module names of the interpreter's standard library. Implicitly
/// allowed under the `deny` and `strip` policies.
#[derive(Debug, Clone)]
pub struct StdModules {
    names: HashSet<String>,
}

impl Default for StdModules {
    fn default() -> Self {
        Self::parse(DEFAULT_STD_MODULES)
    }
}

impl StdModules {
    /// One module name per line; `#` starts a comment.
    pub fn parse(text: &str) -> Self {
        let names = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or("").trim())
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect();
        Self { names }
    }

    pub fn load(path: &Path) -> io::Result<Self> {
        fs::read_to_string(path).map(|t| Self::parse(&t))
    }

    pub fn contains(&self, top_level: &str) -> bool {
        self.names.contains(top_level)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImportScanResult {
    /// Every imported module, in source order, first occurrence only.
    pub imports: Vec<String>,
    /// The subset of `imports` not permitted by the allowlist or std set.
    pub violations: Vec<String>,
}

/// One import statement and the physical lines it spans.
#[derive(Debug, Clone, PartialEq, Eq)]
struct ImportStatement {
    lines: Range<usize>,
    modules: Vec<String>,
}

fn first_word(s: &str) -> &str {
    s.split(|c: char| c.is_whitespace() || c == '(')
        .next()
        .unwrap_or("")
}

fn modules_in(statement: &str) -> Vec<String> {
    let mut out = Vec::new();
    for part in statement.split(';') {
        let part = part.trim();
        match first_word(part) {
            "import" => {
                for name in part["import".len()..].split(',') {
                    let module = first_word(name.trim().trim_matches(|c| c == '(' || c == ')'));
                    if !module.is_empty() {
                        out.push(module.to_string());
                    }
                }
            }
            "from" => {
                let module = first_word(part["from".len()..].trim_start());
                if !module.is_empty() {
                    out.push(module.to_string());
                }
            }
            _ => {}
        }
    }
    out
}

fn statements(source: &str) -> Vec<ImportStatement> {
    let lines: Vec<&str> = source.split('\n').collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        let trimmed = lines[i].trim_start();
        if !matches!(first_word(trimmed), "import" | "from") {
            i += 1;
            continue;
        }
        let start = i;
        let mut text = trimmed.trim_end().to_string();
        let mut open = text.matches('(').count() > text.matches(')').count();
        while (text.ends_with('\\') || open) && i + 1 < lines.len() {
            i += 1;
            if text.ends_with('\\') {
                text.pop();
            }
            text.push(' ');
            text.push_str(lines[i].trim());
            open = text.matches('(').count() > text.matches(')').count();
        }
        i += 1;
        let modules = modules_in(&text);
        if !modules.is_empty() {
            out.push(ImportStatement {
                lines: start..i,
                modules,
            });
        }
    }
    out
}

fn top_level(module: &str) -> &str {
    module.split('.').next().unwrap_or("")
}

#[derive(Debug, Clone, Default)]
pub struct ImportGuard {
    std: StdModules,
}

impl ImportGuard {
    pub fn new(std: StdModules) -> Self {
        Self { std }
    }

    pub fn std_modules(&self) -> &StdModules {
        &self.std
    }

    pub fn is_allowed(&self, module: &str, allowlist: &[String]) -> bool {
        let top = top_level(module);
        if !top.is_empty() && self.std.contains(top) {
            return true;
        }
        allowlist.iter().any(|a| {
            module == a || (module.starts_with(a.as_str()) && module[a.len()..].starts_with('.'))
        })
    }

    pub fn scan_imports(&self, source: &str, allowlist: &[String]) -> ImportScanResult {
        let mut result = ImportScanResult::default();
        for stmt in statements(&source.replace("\r\n", "\n")) {
            for m in stmt.modules {
                if result.imports.contains(&m) {
                    continue;
                }
                if !self.is_allowed(&m, allowlist) {
                    result.violations.push(m.clone());
                }
                result.imports.push(m);
            }
        }
        result
    }

    /// `deny` passes clean source through unchanged and fails otherwise;
    /// `strip` deletes every violating import line, leaving the remaining
    /// lines byte-identical; `allow` is the identity.
    pub fn apply_policy(&self, source: &str, policy: &GenerationPolicy) -> Result<String, FailureRecord> {
        match policy.import_policy {
            ImportPolicy::Allow => Ok(source.to_string()),
            ImportPolicy::Deny => {
                let scan = self.scan_imports(source, &policy.allowlist);
                if scan.violations.is_empty() {
                    Ok(source.to_string())
                } else {
                    Err(FailureRecord::new(
                        FailureCategory::DisallowedImport,
                        Stage::Guard,
                        format!("disallowed imports: {}", scan.violations.join(", ")),
                    ))
                }
            }
            ImportPolicy::Strip => {
                let normalized = source.replace("\r\n", "\n");
                let doomed: HashSet<usize> = statements(&normalized)
                    .into_iter()
                    .filter(|s| s.modules.iter().any(|m| !self.is_allowed(m, &policy.allowlist)))
                    .flat_map(|s| s.lines)
                    .collect();
                if doomed.is_empty() {
                    return Ok(source.to_string());
                }
                Ok(normalized
                    .split_inclusive('\n')
                    .enumerate()
                    .filter(|(i, _)| !doomed.contains(i))
                    .map(|(_, l)| l)
                    .collect())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn guard() -> ImportGuard {
        ImportGuard::default()
    }

    fn policy(p: ImportPolicy) -> GenerationPolicy {
        GenerationPolicy {
            import_policy: p,
            ..GenerationPolicy::default()
        }
    }

    const LISTING: &str = "def onOpenDynamic(self):\n    from tkinter import filedialog\n    filename = filedialog.askopenfilename()\n";

    #[test]
    fn std_list_loaded() {
        let std = StdModules::default();
        assert!(std.contains("os"));
        assert!(std.contains("tkinter"));
        assert!(!std.contains("numpy"));
        assert!(std.len() > 100);
    }

    #[test]
    fn stdlib_import_clean_under_deny() {
        let r = guard().scan_imports("import os\n", &[]);
        assert_eq!(r.imports, ["os"]);
        assert!(r.violations.is_empty());
    }

    #[test]
    fn third_party_flagged() {
        let r = guard().scan_imports("import requests\n\ndef f():\n    return 1\n", &[]);
        assert_eq!(r.violations, ["requests"]);
        let err = guard()
            .apply_policy("import requests\n", &policy(ImportPolicy::Deny))
            .unwrap_err();
        assert_eq!(err.category, FailureCategory::DisallowedImport);
        assert_eq!(err.stage, Stage::Guard);
    }

    #[test]
    fn nested_imports_detected() {
        let r = guard().scan_imports(LISTING, &[]);
        assert_eq!(r.imports, ["tkinter"]);
        assert!(r.violations.is_empty());
        let r = guard().scan_imports("def f():\n    if True:\n        import numpy as np\n", &[]);
        assert_eq!(r.violations, ["numpy"]);
    }

    #[test]
    fn statement_forms() {
        let src = "import os.path as p, numpy.linalg\nfrom collections import (\n    OrderedDict,\n    deque)\nimport json; import yaml\nfrom . import sibling\nimportant = 1\nfrom_here = 2\nimport sys, \\\n    pandas\n";
        let r = guard().scan_imports(src, &[]);
        assert_eq!(
            r.imports,
            ["os.path", "numpy.linalg", "collections", "json", "yaml", ".", "sys", "pandas"]
        );
        assert_eq!(r.violations, ["numpy.linalg", "yaml", ".", "pandas"]);
    }

    #[test]
    fn allowlist_matches_dotted_prefix() {
        let allow = vec!["numpy".to_string()];
        let g = guard();
        assert!(g.is_allowed("numpy", &allow));
        assert!(g.is_allowed("numpy.linalg", &allow));
        assert!(!g.is_allowed("numpyx", &allow));
    }

    #[test]
    fn deny_clean_is_identity() {
        let out = guard().apply_policy(LISTING, &policy(ImportPolicy::Deny)).unwrap();
        assert_eq!(out, LISTING);
    }

    #[test]
    fn strip_one_of_ten_lines() {
        let lines: Vec<String> = (0..10)
            .map(|i| if i == 4 { "    import numpy".to_string() } else { format!("    x{i} = {i}") })
            .collect();
        let src = format!("{}\n", lines.join("\n"));
        let out = guard().apply_policy(&src, &policy(ImportPolicy::Strip)).unwrap();
        let kept: Vec<&str> = out.lines().collect();
        assert_eq!(kept.len(), 9);
        let expected: Vec<&str> = lines.iter().filter(|l| !l.contains("numpy")).map(String::as_str).collect();
        assert_eq!(kept, expected);
    }

    #[test]
    fn strip_removes_parenthesized_continuation() {
        let src = "from pandas import (\n    DataFrame,\n    Series)\nx = 1\n";
        let out = guard().apply_policy(src, &policy(ImportPolicy::Strip)).unwrap();
        assert_eq!(out, "x = 1\n");
    }

    #[test]
    fn allow_is_identity() {
        let src = "import numpy\nimport requests\n";
        assert_eq!(guard().apply_policy(src, &policy(ImportPolicy::Allow)).unwrap(), src);
    }

    // Four import sites, two nested in a function body. Every subset of the
    // sites is rendered and the guard's verdicts are compared against what the
    // construction says they must be.
    const SITES: [(&str, &str, bool); 4] = [
        ("import os", "os", true),
        ("    from tkinter import filedialog", "tkinter", true),
        ("import numpy as np", "numpy", false),
        ("    import requests", "requests", false),
    ];

    fn lattice_source(mask: u8) -> (String, Vec<&'static str>, String) {
        let mut top = Vec::new();
        let mut body = Vec::new();
        let mut violators = Vec::new();
        let mut kept_top = Vec::new();
        let mut kept_body = Vec::new();
        for (i, (line, module, std)) in SITES.iter().enumerate() {
            if mask & (1 << i) == 0 {
                continue;
            }
            let nested = line.starts_with(' ');
            if nested { body.push(*line) } else { top.push(*line) }
            if *std {
                if nested { kept_body.push(*line) } else { kept_top.push(*line) }
            } else {
                violators.push(*module);
            }
        }
        let render = |top: &[&str], body: &[&str]| {
            let mut s = String::new();
            for l in top {
                s.push_str(l);
                s.push('\n');
            }
            s.push_str("def action(self):\n");
            for l in body {
                s.push_str(l);
                s.push('\n');
            }
            s.push_str("    return 1\n");
            s
        };
        (render(&top, &body), violators, render(&kept_top, &kept_body))
    }

    #[test]
    fn policy_lattice_exhaustive() {
        let g = guard();
        for mask in 0u8..16 {
            let (src, violators, stripped) = lattice_source(mask);
            let scan = g.scan_imports(&src, &[]);
            assert_eq!(scan.violations, violators, "mask {mask:04b}");
            match g.apply_policy(&src, &policy(ImportPolicy::Deny)) {
                Ok(out) => {
                    assert!(violators.is_empty(), "mask {mask:04b}");
                    assert_eq!(out, src);
                }
                Err(f) => {
                    assert_eq!(f.detail, format!("disallowed imports: {}", violators.join(", ")));
                }
            }
            assert_eq!(g.apply_policy(&src, &policy(ImportPolicy::Strip)).unwrap(), stripped);
            assert_eq!(g.apply_policy(&src, &policy(ImportPolicy::Allow)).unwrap(), src);
        }
    }
}
