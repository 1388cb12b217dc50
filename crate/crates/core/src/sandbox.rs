//! Program validation and execution inside a workspace, per-subject job
//! arrays, and derivative checks.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{Read, Write};
use std::os::unix::process::CommandExt;
use std::path::{Component, Path, PathBuf};
use std::process::{Child, Command, ExitStatus, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Mutex};
use std::thread;
use std::time::{Duration, Instant, SystemTime};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::EntryKind;
use crate::jit::SelectionResult;
use crate::registry::Registry;

pub const SUBDIRS: [&str; 5] = ["scripts", "logs", "slurm_outputs", "derivatives", "models"];
pub const TRUNCATION_MARKER: &str = "\n[output truncated]\n";

#[derive(Debug, Error)]
pub enum SandboxError {
    #[error("program references primitive `{0}` that was not selected")]
    UndeclaredPrimitive(String),
    #[error("program source is empty")]
    EmptyProgram,
    #[error("program exceeded the wall-clock limit of {limit_s} s")]
    Timeout { limit_s: f64, record: Box<ExecutionRecord> },
    #[error("program output exceeded {limit} bytes")]
    OutputOverflow { limit: usize, record: Box<ExecutionRecord> },
    #[error("could not spawn program: {0}")]
    SpawnFailure(String),
    #[error("executor unavailable: {0}")]
    ExecutorUnavailable(String),
    #[error("subjects file missing or empty: {0}")]
    SubjectsFileMissing(PathBuf),
    #[error("duplicate subject id `{0}` in subjects file")]
    DuplicateSubject(String),
    #[error("cannot sample {n} of {available} subjects")]
    SampleTooLarge { n: usize, available: usize },
    #[error("path `{0}` resolves outside the workspace")]
    PathEscape(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Program {
    /// Workspace-relative path the source is written to.
    pub path: String,
    pub source: String,
    pub declared_primitives: BTreeSet<String>,
    pub entry_kind: EntryKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkspaceLayout {
    pub root: PathBuf,
}

impl WorkspaceLayout {
    /// Creates the root and its standard subdirectories.
    pub fn prepare(root: &Path) -> Result<Self, SandboxError> {
        for d in SUBDIRS {
            fs::create_dir_all(root.join(d))?;
        }
        Ok(Self {
            root: root.canonicalize()?,
        })
    }

    pub fn dir(&self, sub: &str) -> PathBuf {
        self.root.join(sub)
    }

    /// Resolves a workspace-relative (or absolute, inside-root) path without
    /// touching the filesystem.
    pub fn resolve(&self, path: &str) -> Result<PathBuf, SandboxError> {
        let p = Path::new(path);
        let joined = if p.is_absolute() { p.to_path_buf() } else { self.root.join(p) };
        let mut out = PathBuf::new();
        for c in joined.components() {
            match c {
                Component::ParentDir => {
                    if !out.pop() {
                        return Err(SandboxError::PathEscape(path.into()));
                    }
                }
                Component::CurDir => {}
                other => out.push(other),
            }
        }
        if out.starts_with(&self.root) {
            Ok(out)
        } else {
            Err(SandboxError::PathEscape(path.into()))
        }
    }

    pub fn relative(&self, p: &Path) -> String {
        p.strip_prefix(&self.root).unwrap_or(p).to_string_lossy().into_owned()
    }
}

/// Checks that every primitive the program touches was selected. Touched
/// primitives are the declared ones plus any registry name appearing as a
/// word in the source. `registry` is `None` when primitives are hidden.
pub fn validate_program(
    program: &Program,
    selection: &SelectionResult,
    registry: Option<&Registry>,
) -> Result<(), SandboxError> {
    if program.source.trim().is_empty() {
        return Err(SandboxError::EmptyProgram);
    }
    let selected: BTreeSet<&str> = selection.selected_names.iter().map(String::as_str).collect();
    let mut referenced: BTreeSet<String> = program.declared_primitives.clone();
    if let Some(reg) = registry {
        let words: BTreeSet<String> = source_words(&program.source);
        referenced.extend(reg.names().filter(|n| words.contains(*n)).map(str::to_string));
    }
    match referenced.into_iter().find(|n| !selected.contains(n.as_str())) {
        Some(n) => Err(SandboxError::UndeclaredPrimitive(n)),
        None => Ok(()),
    }
}

fn source_words(source: &str) -> BTreeSet<String> {
    source
        .split(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExecLimits {
    pub wall: Duration,
    pub output_bytes: usize,
}

impl Default for ExecLimits {
    fn default() -> Self {
        Self {
            wall: Duration::from_secs(600),
            output_bytes: 1 << 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionRecord {
    /// `None` when the program was not run or was killed.
    pub exit_status: Option<i32>,
    pub stdout_log: PathBuf,
    pub duration_s: f64,
    pub produced_paths: Vec<String>,
    #[serde(default)]
    pub violations: Vec<String>,
    #[serde(default)]
    pub truncated: bool,
}

impl ExecutionRecord {
    pub fn succeeded(&self) -> bool {
        self.exit_status == Some(0) && self.violations.is_empty()
    }

    pub fn read_log(&self) -> String {
        fs::read_to_string(&self.stdout_log).unwrap_or_default()
    }
}

fn write_targets() -> &'static [Regex] {
    use std::sync::OnceLock;
    static RE: OnceLock<Vec<Regex>> = OnceLock::new();
    RE.get_or_init(|| {
        [
            r#">{1,2}\s*["']?([^\s"'&|;)]+)"#,
            r#"\b(?:touch|tee(?:\s+-a)?|mkdir(?:\s+-p)?)\s+["']?([^\s"'&|;)]+)"#,
            r#"\b(?:cp|mv|ln)\s+(?:-\S+\s+)*\S+\s+["']?([^\s"'&|;)]+)"#,
            r#"open\(\s*["']([^"']+)["']\s*,\s*["'][wax]"#,
            r#"\.(?:to_csv|savefig|save|write_text|to_filename)\(\s*["']([^"']+)["']"#,
        ]
        .iter()
        .map(|p| Regex::new(p).expect("write-target pattern"))
        .collect()
    })
}

/// Paths the source writes to that resolve outside the workspace. Only
/// literal paths are visible to this scan.
pub fn confinement_violations(source: &str, ws: &WorkspaceLayout) -> Vec<String> {
    let mut out = BTreeSet::new();
    for re in write_targets() {
        for cap in re.captures_iter(source) {
            let target = &cap[1];
            if target.starts_with('$') || target.starts_with("/dev/") || target.starts_with('&') {
                continue;
            }
            if ws.resolve(target).is_err() {
                out.insert(target.to_string());
            }
        }
    }
    out.into_iter().collect()
}

type Snapshot = BTreeMap<PathBuf, (u64, SystemTime)>;

fn snapshot(root: &Path) -> Snapshot {
    let mut out = Snapshot::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let Ok(entries) = fs::read_dir(&dir) else { continue };
        for e in entries.flatten() {
            let p = e.path();
            match e.metadata() {
                Ok(m) if m.is_dir() => stack.push(p),
                Ok(m) => {
                    out.insert(p, (m.len(), m.modified().unwrap_or(SystemTime::UNIX_EPOCH)));
                }
                Err(_) => {}
            }
        }
    }
    out
}

fn produced(ws: &WorkspaceLayout, before: &Snapshot, after: &Snapshot, exclude: &Path) -> Vec<String> {
    after
        .iter()
        .filter(|(p, meta)| p.as_path() != exclude && before.get(*p) != Some(meta))
        .map(|(p, _)| ws.relative(p))
        .collect()
}

fn kill_group(child: &mut Child) {
    // the child leads its own process group; take stragglers down with it
    let _ = Command::new("kill")
        .args(["-KILL", "--", &format!("-{}", child.id())])
        .stderr(Stdio::null())
        .status();
    let _ = child.kill();
}

enum Finish {
    Exited(ExitStatus),
    TimedOut,
    Overflowed,
}

/// Spawns `cmd` with stdout and stderr merged into `log`, enforcing limits.
fn run_logged(mut cmd: Command, log: &Path, limits: ExecLimits) -> Result<(Finish, bool), SandboxError> {
    let (mut reader, writer) = std::io::pipe()?;
    let writer2 = writer.try_clone()?;
    cmd.stdin(Stdio::null()).stdout(writer).stderr(writer2).process_group(0);
    let mut child = cmd.spawn().map_err(|e| SandboxError::SpawnFailure(e.to_string()))?;
    drop(cmd);
    let mut file = File::create(log)?;
    let limit = limits.output_bytes;
    let (tx, rx) = mpsc::channel::<()>();
    let pump = thread::spawn(move || -> std::io::Result<bool> {
        let mut written = 0usize;
        let mut buf = [0u8; 8192];
        loop {
            let n = match reader.read(&mut buf) {
                Ok(0) | Err(_) => return Ok(false),
                Ok(n) => n,
            };
            if written + n > limit {
                file.write_all(&buf[..limit - written])?;
                file.write_all(TRUNCATION_MARKER.as_bytes())?;
                let _ = tx.send(());
                return Ok(true);
            }
            file.write_all(&buf[..n])?;
            written += n;
        }
    });
    let start = Instant::now();
    let finish = loop {
        if rx.try_recv().is_ok() {
            kill_group(&mut child);
            let _ = child.wait();
            break Finish::Overflowed;
        }
        if let Some(status) = child.try_wait()? {
            break Finish::Exited(status);
        }
        if start.elapsed() >= limits.wall {
            kill_group(&mut child);
            let _ = child.wait();
            break Finish::TimedOut;
        }
        thread::sleep(Duration::from_millis(5));
    };
    if matches!(finish, Finish::Exited(_)) {
        // background leftovers would hold the pipe open
        kill_group(&mut child);
    }
    let truncated = pump.join().map_err(|_| SandboxError::SpawnFailure("log pump panicked".into()))??;
    let finish = match finish {
        Finish::Exited(_) if truncated => Finish::Overflowed,
        f => f,
    };
    Ok((finish, truncated))
}

fn interpreter(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()) {
        Some("py") => "python3",
        _ => "sh",
    }
}

/// Writes the program source under the workspace.
pub fn write_program(program: &Program, ws: &WorkspaceLayout) -> Result<PathBuf, SandboxError> {
    let path = ws.resolve(&program.path)?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(&path, &program.source)?;
    Ok(path)
}

/// Runs an existing workspace script. A nonzero exit is part of the record,
/// not an error.
pub fn run_script(
    script: &str,
    ws: &WorkspaceLayout,
    limits: ExecLimits,
    env: &[(String, String)],
) -> Result<ExecutionRecord, SandboxError> {
    let path = ws.resolve(script)?;
    let stem = path.file_stem().map_or("program".into(), |s| s.to_string_lossy().into_owned());
    let source = fs::read_to_string(&path)?;
    let mut cmd = Command::new(interpreter(&path));
    cmd.arg(&path);
    run_checked(&source, cmd, &ws.dir("logs").join(format!("{stem}.log")), ws, limits, env)
}

/// Runs `sh -c command` under the same confinement scan and limits as a
/// script. Output goes to `logs/<log_name>.log`.
pub fn run_shell(
    command: &str,
    log_name: &str,
    ws: &WorkspaceLayout,
    limits: ExecLimits,
    env: &[(String, String)],
) -> Result<ExecutionRecord, SandboxError> {
    let mut cmd = Command::new("sh");
    cmd.arg("-c").arg(command);
    run_checked(command, cmd, &ws.dir("logs").join(format!("{log_name}.log")), ws, limits, env)
}

fn run_checked(
    source: &str,
    mut cmd: Command,
    log: &Path,
    ws: &WorkspaceLayout,
    limits: ExecLimits,
    env: &[(String, String)],
) -> Result<ExecutionRecord, SandboxError> {
    let log = log.to_path_buf();
    let violations = confinement_violations(source, ws);
    if !violations.is_empty() {
        let msg: String = violations
            .iter()
            .map(|v| format!("workspace violation: write to `{v}` is outside the workspace; program not run\n"))
            .collect();
        fs::write(&log, msg)?;
        return Ok(ExecutionRecord {
            exit_status: None,
            stdout_log: log,
            duration_s: 0.0,
            produced_paths: Vec::new(),
            violations,
            truncated: false,
        });
    }
    let before = snapshot(&ws.root);
    cmd.current_dir(&ws.root).env("WORKSPACE", &ws.root);
    for (k, v) in env {
        cmd.env(k, v);
    }
    let start = Instant::now();
    let (finish, truncated) = run_logged(cmd, &log, limits)?;
    let record = ExecutionRecord {
        exit_status: match &finish {
            Finish::Exited(s) => s.code(),
            _ => None,
        },
        stdout_log: log.clone(),
        duration_s: start.elapsed().as_secs_f64(),
        produced_paths: produced(ws, &before, &snapshot(&ws.root), &log),
        violations: Vec::new(),
        truncated,
    };
    match finish {
        Finish::Exited(_) => Ok(record),
        Finish::TimedOut => Err(SandboxError::Timeout {
            limit_s: limits.wall.as_secs_f64(),
            record: Box::new(record),
        }),
        Finish::Overflowed => Err(SandboxError::OutputOverflow {
            limit: limits.output_bytes,
            record: Box::new(record),
        }),
    }
}

pub fn execute_program(
    program: &Program,
    ws: &WorkspaceLayout,
    limits: ExecLimits,
) -> Result<ExecutionRecord, SandboxError> {
    write_program(program, ws)?;
    run_script(&program.path, ws, limits, &[])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Executor {
    LocalPool,
    Slurm,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobArraySpec {
    pub job_name: String,
    pub subjects_file: PathBuf,
    /// Command run per subject; `{subject}` is replaced by the subject id.
    pub per_subject_command: String,
    pub max_parallel: usize,
    pub log_dir: PathBuf,
    /// Extra `#SBATCH` lines passed through verbatim (resources, partition).
    #[serde(default)]
    pub sbatch_options: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobArrayOutcome {
    /// One record per subject, in subjects-file order.
    pub records: Vec<(String, ExecutionRecord)>,
    /// Highest number of jobs observed running at once.
    pub max_concurrency: usize,
}

pub fn read_subjects(path: &Path) -> Result<Vec<String>, SandboxError> {
    let text = fs::read_to_string(path).map_err(|_| SandboxError::SubjectsFileMissing(path.into()))?;
    let subjects: Vec<String> = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_string).collect();
    if subjects.is_empty() {
        return Err(SandboxError::SubjectsFileMissing(path.into()));
    }
    let mut seen = BTreeSet::new();
    for s in &subjects {
        if !seen.insert(s) {
            return Err(SandboxError::DuplicateSubject(s.clone()));
        }
    }
    Ok(subjects)
}

/// Renders the array batch script. The subject id of each array task is the
/// task index's line in the subjects file.
pub fn render_sbatch(spec: &JobArraySpec, n_subjects: usize, output_dir: &Path) -> String {
    let mut s = String::from("#!/bin/bash\n");
    s.push_str(&format!("#SBATCH --job-name={}\n", spec.job_name));
    s.push_str(&format!("#SBATCH --array=1-{n_subjects}\n"));
    for opt in &spec.sbatch_options {
        s.push_str(&format!("#SBATCH {opt}\n"));
    }
    s.push_str(&format!(
        "#SBATCH --output={}/{}-%A_%a.out\n\n",
        output_dir.display(),
        spec.job_name
    ));
    s.push_str(&format!("SUBJECT_LIST={}\n", spec.subjects_file.display()));
    s.push_str("SUB_ID=$(sed -n \"${SLURM_ARRAY_TASK_ID}p\" \"$SUBJECT_LIST\")\n\n");
    s.push_str(&format!("LOG_DIR={}\n", spec.log_dir.display()));
    s.push_str("mkdir -p \"$LOG_DIR\"\n\n");
    s.push_str("exec >\"${LOG_DIR}/${SUB_ID}.log\" 2>&1\n\n");
    s.push_str(&spec.per_subject_command.replace("{subject}", "${SUB_ID}"));
    s.push('\n');
    s
}

fn find_on_path(bin: &str) -> Option<PathBuf> {
    std::env::var_os("PATH").and_then(|paths| {
        std::env::split_paths(&paths)
            .map(|d| d.join(bin))
            .find(|p| p.is_file())
    })
}

fn log_record(log: PathBuf, exit: Option<i32>, duration_s: f64) -> ExecutionRecord {
    ExecutionRecord {
        exit_status: exit,
        stdout_log: log,
        duration_s,
        produced_paths: Vec::new(),
        violations: Vec::new(),
        truncated: false,
    }
}

/// Runs one command per subject and returns after every job has finished.
pub fn dispatch_job_array(
    spec: &JobArraySpec,
    executor: Executor,
    ws: &WorkspaceLayout,
    limits: ExecLimits,
) -> Result<JobArrayOutcome, SandboxError> {
    let subjects = read_subjects(&spec.subjects_file)?;
    fs::create_dir_all(&spec.log_dir)?;
    match executor {
        Executor::LocalPool => local_pool(spec, &subjects, ws, limits),
        Executor::Slurm => slurm(spec, &subjects, ws),
    }
}

fn local_pool(
    spec: &JobArraySpec,
    subjects: &[String],
    ws: &WorkspaceLayout,
    limits: ExecLimits,
) -> Result<JobArrayOutcome, SandboxError> {
    let next = AtomicUsize::new(0);
    let active = AtomicUsize::new(0);
    let high = AtomicUsize::new(0);
    let results: Mutex<BTreeMap<usize, ExecutionRecord>> = Mutex::new(BTreeMap::new());
    let failure: Mutex<Option<SandboxError>> = Mutex::new(None);
    let workers = spec.max_parallel.max(1).min(subjects.len());
    thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(subject) = subjects.get(i) else { break };
                let now = active.fetch_add(1, Ordering::SeqCst) + 1;
                high.fetch_max(now, Ordering::SeqCst);
                let log = spec.log_dir.join(format!("{subject}.log"));
                let mut cmd = Command::new("sh");
                cmd.arg("-c")
                    .arg(spec.per_subject_command.replace("{subject}", subject))
                    .current_dir(&ws.root)
                    .env("WORKSPACE", &ws.root)
                    .env("SUB_ID", subject)
                    .env("SLURM_ARRAY_TASK_ID", (i + 1).to_string())
                    .env("SLURM_ARRAY_JOB_ID", &spec.job_name);
                let start = Instant::now();
                let outcome = run_logged(cmd, &log, limits);
                active.fetch_sub(1, Ordering::SeqCst);
                match outcome {
                    Ok((finish, truncated)) => {
                        let mut r = log_record(
                            log,
                            match finish {
                                Finish::Exited(s) => s.code(),
                                _ => None,
                            },
                            start.elapsed().as_secs_f64(),
                        );
                        r.truncated = truncated;
                        results.lock().unwrap_or_else(|e| e.into_inner()).insert(i, r);
                    }
                    Err(e) => {
                        failure.lock().unwrap_or_else(|p| p.into_inner()).get_or_insert(e);
                    }
                }
            });
        }
    });
    if let Some(e) = failure.into_inner().unwrap_or_else(|p| p.into_inner()) {
        return Err(e);
    }
    let results = results.into_inner().unwrap_or_else(|p| p.into_inner());
    Ok(JobArrayOutcome {
        records: subjects.iter().cloned().zip(results.into_values()).collect(),
        max_concurrency: high.into_inner(),
    })
}

fn slurm(spec: &JobArraySpec, subjects: &[String], ws: &WorkspaceLayout) -> Result<JobArrayOutcome, SandboxError> {
    let sbatch = find_on_path("sbatch").ok_or_else(|| SandboxError::ExecutorUnavailable("sbatch not found on PATH".into()))?;
    let out_dir = ws.dir("slurm_outputs");
    fs::create_dir_all(&out_dir)?;
    let script = ws.dir("scripts").join(format!("{}.sbatch.sh", spec.job_name));
    fs::write(&script, render_sbatch(spec, subjects.len(), &out_dir))?;
    let start = Instant::now();
    let status = Command::new(sbatch)
        .arg("--wait")
        .arg(&script)
        .current_dir(&ws.root)
        .stdin(Stdio::null())
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .status()
        .map_err(|e| SandboxError::ExecutorUnavailable(e.to_string()))?;
    let elapsed = start.elapsed().as_secs_f64();
    Ok(JobArrayOutcome {
        records: subjects
            .iter()
            .map(|s| {
                (
                    s.clone(),
                    log_record(spec.log_dir.join(format!("{s}.log")), status.code(), elapsed),
                )
            })
            .collect(),
        max_concurrency: 0,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DerivativeReport {
    /// Every subject, mapped to the expected paths it lacks.
    pub per_subject: BTreeMap<String, Vec<String>>,
}

impl DerivativeReport {
    pub fn is_complete(&self) -> bool {
        self.per_subject.values().all(Vec::is_empty)
    }

    /// Only the subjects with missing files.
    pub fn missing(&self) -> BTreeMap<String, Vec<String>> {
        self.per_subject
            .iter()
            .filter(|(_, v)| !v.is_empty())
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }
}

/// Expands each `{subject}` pattern per subject and reports what is absent
/// under `root`.
pub fn check_derivatives(root: &Path, patterns: &[String], subjects: &[String]) -> DerivativeReport {
    DerivativeReport {
        per_subject: subjects
            .iter()
            .map(|s| {
                let missing = patterns
                    .iter()
                    .map(|p| p.replace("{subject}", s))
                    .filter(|p| !root.join(p).exists())
                    .collect();
                (s.clone(), missing)
            })
            .collect(),
    }
}

/// Seeded sample of `n` subjects, kept in input order.
pub fn sample_subjects(subjects: &[String], n: usize, seed: u64) -> Result<Vec<String>, SandboxError> {
    if n > subjects.len() {
        return Err(SandboxError::SampleTooLarge {
            n,
            available: subjects.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, subjects.len(), n).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| subjects[i].clone()).collect())
}

/// Words in `text` that look like subject ids (`sub-...`).
pub fn subject_mentions(text: &str) -> BTreeSet<String> {
    tokenize_keep_dash(text).into_iter().filter(|w| w.starts_with("sub-")).collect()
}

fn tokenize_keep_dash(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_ascii_alphanumeric() || c == '-' || c == '_'))
        .filter(|w| !w.is_empty())
        .map(|w| w.trim_end_matches('-').to_string())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::{Family, PrimitiveCard};

    fn ws() -> (tempfile::TempDir, WorkspaceLayout) {
        let d = tempfile::tempdir().unwrap();
        let w = WorkspaceLayout::prepare(&d.path().join("ws")).unwrap();
        (d, w)
    }

    fn prog(path: &str, source: &str, declared: &[&str]) -> Program {
        Program {
            path: path.into(),
            source: source.into(),
            declared_primitives: declared.iter().map(|s| s.to_string()).collect(),
            entry_kind: EntryKind::SingleRun,
        }
    }

    fn selection(names: &[&str]) -> SelectionResult {
        SelectionResult {
            selected_names: names.iter().map(|s| s.to_string()).collect(),
            rationale: None,
            injected_context: String::new(),
        }
    }

    fn card(name: &str) -> PrimitiveCard {
        PrimitiveCard {
            name: name.into(),
            module: "tool_lib.fsl".into(),
            description: "d".into(),
            detailed_schema: "s".into(),
            family: Family::Processing,
            command_template: None,
            extra: Default::default(),
        }
    }

    #[test]
    fn validation() {
        let reg = Registry::from_cards(vec![card("fsl_bet_t1w"), card("fsl_fast_t1w")]).unwrap();
        let sel = selection(&["fsl_bet_t1w"]);
        assert!(validate_program(&prog("scripts/a.sh", "fsl_bet_t1w in.nii", &["fsl_bet_t1w"]), &sel, Some(&reg)).is_ok());
        assert!(matches!(
            validate_program(&prog("scripts/a.sh", "fsl_fast_t1w x", &[]), &sel, Some(&reg)),
            Err(SandboxError::UndeclaredPrimitive(n)) if n == "fsl_fast_t1w"
        ));
        assert!(matches!(
            validate_program(&prog("scripts/a.sh", "echo", &["fsl_bet_t1w"]), &selection(&[]), None),
            Err(SandboxError::UndeclaredPrimitive(_))
        ));
        assert!(matches!(
            validate_program(&prog("scripts/a.sh", "  ", &[]), &sel, None),
            Err(SandboxError::EmptyProgram)
        ));
    }

    #[test]
    fn runs_and_logs() {
        let (_d, w) = ws();
        let r = execute_program(
            &prog(
                "scripts/step.sh",
                "echo 'step 01 has completed'\necho out > derivatives/x.txt\necho warn 1>&2\n",
                &[],
            ),
            &w,
            ExecLimits::default(),
        )
        .unwrap();
        assert_eq!(r.exit_status, Some(0));
        let log = r.read_log();
        assert!(log.contains("step 01 has completed") && log.contains("warn"));
        assert!(r.produced_paths.contains(&"derivatives/x.txt".to_string()));
        assert!(!r.produced_paths.iter().any(|p| p.starts_with("logs/")));
    }

    #[test]
    fn nonzero_exit_is_recorded() {
        let (_d, w) = ws();
        let r = execute_program(
            &prog(
                "scripts/fail.py",
                "import sys\nprint('Traceback (most recent call last):')\nsys.exit(1)\n",
                &[],
            ),
            &w,
            ExecLimits::default(),
        )
        .unwrap();
        assert_eq!(r.exit_status, Some(1));
        assert!(!r.succeeded());
        assert!(r.read_log().contains("Traceback"));
    }

    #[test]
    fn shell_commands() {
        let (_d, w) = ws();
        let env = [("NAME".to_string(), "sub-01".to_string())];
        let r = run_shell("echo $NAME > derivatives/n.txt; echo done", "cmd_1", &w, ExecLimits::default(), &env).unwrap();
        assert!(r.succeeded());
        assert_eq!(r.read_log(), "done\n");
        assert!(r.stdout_log.ends_with("logs/cmd_1.log"));
        assert_eq!(r.produced_paths, ["derivatives/n.txt"]);
        let bad = run_shell("echo x > /etc/owned", "cmd_2", &w, ExecLimits::default(), &[]).unwrap();
        assert_eq!(bad.exit_status, None);
        assert_eq!(bad.violations, ["/etc/owned"]);
    }

    #[test]
    fn confinement() {
        let (d, w) = ws();
        let outside = d.path().join("escape.txt");
        let src = format!("echo hi > {}\n", outside.display());
        let r = execute_program(&prog("scripts/bad.sh", &src, &[]), &w, ExecLimits::default()).unwrap();
        assert_eq!(r.violations.len(), 1);
        assert!(r.read_log().contains("workspace violation"));
        assert!(!outside.exists());
        assert!(confinement_violations("echo x > ../up.txt", &w).len() == 1);
        assert!(confinement_violations("echo x > /dev/null; echo y > logs/a.txt", &w).is_empty());
    }

    #[test]
    fn timeout_and_overflow() {
        let (_d, w) = ws();
        let limits = ExecLimits {
            wall: Duration::from_millis(200),
            output_bytes: 1 << 20,
        };
        assert!(matches!(
            execute_program(&prog("scripts/slow.sh", "sleep 5\n", &[]), &w, limits),
            Err(SandboxError::Timeout { .. })
        ));
        let limits = ExecLimits {
            wall: Duration::from_secs(10),
            output_bytes: 1000,
        };
        match execute_program(&prog("scripts/loud.sh", "yes hello\n", &[]), &w, limits) {
            Err(SandboxError::OutputOverflow { record, .. }) => {
                let log = record.read_log();
                assert!(log.ends_with(TRUNCATION_MARKER));
                assert_eq!(log.len(), 1000 + TRUNCATION_MARKER.len());
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn job_array_local() {
        let (_d, w) = ws();
        let subjects: Vec<String> = (1..=3).map(|i| format!("sub-{i:02}")).collect();
        let sf = w.root.join("subjects.txt");
        fs::write(&sf, subjects.join("\n")).unwrap();
        let spec = JobArraySpec {
            job_name: "prep".into(),
            subjects_file: sf.clone(),
            per_subject_command: "echo processing {subject} task $SLURM_ARRAY_TASK_ID".into(),
            max_parallel: 2,
            log_dir: w.dir("logs"),
            sbatch_options: vec![],
        };
        let out = dispatch_job_array(&spec, Executor::LocalPool, &w, ExecLimits::default()).unwrap();
        assert_eq!(out.records.len(), 3);
        for (i, s) in subjects.iter().enumerate() {
            let log = fs::read_to_string(w.dir("logs").join(format!("{s}.log"))).unwrap();
            assert_eq!(log.trim(), format!("processing {s} task {}", i + 1));
        }
        fs::write(&sf, "\n").unwrap();
        assert!(matches!(
            dispatch_job_array(&spec, Executor::LocalPool, &w, ExecLimits::default()),
            Err(SandboxError::SubjectsFileMissing(_))
        ));
        fs::write(&sf, "a\na\n").unwrap();
        assert!(matches!(read_subjects(&sf), Err(SandboxError::DuplicateSubject(_))));
    }

    #[test]
    fn sbatch_template() {
        let spec = JobArraySpec {
            job_name: "fmriprep".into(),
            subjects_file: "/ws/subjects.txt".into(),
            per_subject_command: "python scripts/run.py --subject_id {subject}".into(),
            max_parallel: 4,
            log_dir: "/ws/logs".into(),
            sbatch_options: vec!["--cpus-per-task=4".into()],
        };
        let s = render_sbatch(&spec, 12, Path::new("/ws/slurm_outputs"));
        assert!(s.starts_with("#!/bin/bash\n#SBATCH --job-name=fmriprep\n#SBATCH --array=1-12\n#SBATCH --cpus-per-task=4\n"));
        assert!(s.contains("#SBATCH --output=/ws/slurm_outputs/fmriprep-%A_%a.out"));
        assert!(s.contains("SUB_ID=$(sed -n \"${SLURM_ARRAY_TASK_ID}p\" \"$SUBJECT_LIST\")"));
        assert!(s.contains("exec >\"${LOG_DIR}/${SUB_ID}.log\" 2>&1"));
        assert!(s.ends_with("python scripts/run.py --subject_id ${SUB_ID}\n"));
    }

    #[test]
    fn derivatives() {
        let d = tempfile::tempdir().unwrap();
        let subjects: Vec<String> = ["sub-01", "sub-02", "sub-03"].map(String::from).to_vec();
        for s in &subjects {
            fs::create_dir_all(d.path().join(format!("derivatives/{s}"))).unwrap();
            if s != "sub-02" {
                fs::write(d.path().join(format!("derivatives/{s}/anat_mni.nii")), "").unwrap();
            }
        }
        let pats = vec!["derivatives/{subject}/anat_mni.nii".to_string()];
        let r = check_derivatives(d.path(), &pats, &subjects);
        assert_eq!(
            r.missing(),
            BTreeMap::from([("sub-02".to_string(), vec!["derivatives/sub-02/anat_mni.nii".to_string()])])
        );
        assert!(r.per_subject["sub-01"].is_empty());
        assert!(check_derivatives(d.path(), &pats, &[]).is_complete());
    }

    #[test]
    fn sampling() {
        let ids: Vec<String> = (1..=20).map(|i| format!("sub-{i:03}")).collect();
        assert_eq!(sample_subjects(&ids, 20, 3).unwrap(), ids);
        let a = sample_subjects(&ids, 5, 42).unwrap();
        assert_eq!(a, sample_subjects(&ids, 5, 42).unwrap());
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert!(matches!(sample_subjects(&ids, 21, 1), Err(SandboxError::SampleTooLarge { .. })));
    }

    #[test]
    fn path_resolution() {
        let (_d, w) = ws();
        assert!(w.resolve("scripts/a.sh").is_ok());
        assert!(w.resolve("../x").is_err());
        assert!(w.resolve("/etc/passwd").is_err());
        assert!(w.resolve("scripts/../logs/a").is_ok());
    }
}
