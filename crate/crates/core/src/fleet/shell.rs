//! The node shell: a closed interpreter over a fixed command set. Nothing
//! here touches the host system.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::archive::{script_from_files, unpack};
use super::modules::Manifest;
use super::node::{NodeState, ProcState, RankProc};
use crate::domain::{NodeId, Timestamp};

/// Longest `sleep` honoured; larger requests are clamped.
pub const MAX_SLEEP: Duration = Duration::from_secs(10);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommandResult {
    pub exit_code: i32,
    pub stdout: String,
    pub stderr: String,
}

impl CommandResult {
    pub fn ok(stdout: impl Into<String>) -> Self {
        CommandResult {
            exit_code: 0,
            stdout: stdout.into(),
            stderr: String::new(),
        }
    }

    pub fn fail(code: i32, stderr: impl Into<String>) -> Self {
        CommandResult {
            exit_code: code,
            stdout: String::new(),
            stderr: stderr.into(),
        }
    }
}

pub(crate) enum Step {
    Done(CommandResult),
    /// The caller sleeps without holding the node state.
    Sleep(Duration),
}

pub(crate) fn valid_path(name: &str) -> bool {
    !name.is_empty()
        && !name.starts_with('/')
        && !name
            .split('/')
            .any(|s| s.is_empty() || s == "." || s == "..")
}

pub(crate) fn run(
    state: &mut NodeState,
    node: &NodeId,
    manifest: &Manifest,
    line: &str,
    now: Timestamp,
) -> Step {
    let Some(words) = shlex::split(line) else {
        return Step::Done(CommandResult::fail(2, "sh: syntax error\n"));
    };
    let Some((cmd, args)) = words.split_first() else {
        return Step::Done(CommandResult::ok(""));
    };
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    state.refresh(now);
    let r = match cmd.as_str() {
        "sleep" => return sleep(&args),
        "true" => CommandResult::ok(""),
        "false" => CommandResult::fail(1, ""),
        "echo" => CommandResult::ok(format!("{}\n", args.join(" "))),
        "hostname" => CommandResult::ok(format!("{node}\n")),
        "env" => CommandResult::ok(state.env.render()),
        "printenv" => match args.as_slice() {
            [var] => match state.env.get(var) {
                Some(v) => CommandResult::ok(format!("{v}\n")),
                None => CommandResult::fail(1, ""),
            },
            _ => CommandResult::fail(2, "usage: printenv VAR\n"),
        },
        "cat" => cat(state, &args),
        "ls" => ls(state, &args),
        "rm" => rm(state, &args),
        "module" => module(state, manifest, &args),
        "unpack" => unpack_cmd(state, &args),
        "run" => run_rank(state, &args, now),
        "ps" => ps(state),
        "kill" => match args.as_slice() {
            [job] => {
                let n = state.kill(Some(job)).len();
                CommandResult::ok(format!("killed {n}\n"))
            }
            _ => CommandResult::fail(2, "usage: kill JOB\n"),
        },
        other => CommandResult::fail(127, format!("sh: {other}: command not found\n")),
    };
    Step::Done(r)
}

fn sleep(args: &[&str]) -> Step {
    match args {
        [secs] => match secs.parse::<f64>() {
            Ok(s) if s.is_finite() && s >= 0.0 => {
                Step::Sleep(Duration::from_secs_f64(s).min(MAX_SLEEP))
            }
            _ => Step::Done(CommandResult::fail(
                1,
                format!("sleep: invalid time interval '{secs}'\n"),
            )),
        },
        _ => Step::Done(CommandResult::fail(1, "sleep: missing operand\n")),
    }
}

fn cat(state: &NodeState, args: &[&str]) -> CommandResult {
    if args.is_empty() {
        return CommandResult::fail(2, "usage: cat FILE...\n");
    }
    let mut out = String::new();
    let mut err = String::new();
    for f in args {
        match state.files.get(*f) {
            Some(bytes) => out.push_str(&String::from_utf8_lossy(bytes)),
            None => err.push_str(&format!("cat: {f}: No such file or directory\n")),
        }
    }
    CommandResult {
        exit_code: if err.is_empty() { 0 } else { 1 },
        stdout: out,
        stderr: err,
    }
}

fn ls(state: &NodeState, args: &[&str]) -> CommandResult {
    let prefix = match args {
        [] => String::new(),
        [dir] => format!("{}/", dir.trim_end_matches('/')),
        _ => return CommandResult::fail(2, "usage: ls [DIR]\n"),
    };
    let out: String = state
        .files
        .keys()
        .filter_map(|k| k.strip_prefix(&prefix))
        .map(|k| format!("{k}\n"))
        .collect();
    CommandResult::ok(out)
}

fn rm(state: &mut NodeState, args: &[&str]) -> CommandResult {
    let mut err = String::new();
    for f in args {
        if state.files.remove(*f).is_none() {
            err.push_str(&format!(
                "rm: cannot remove '{f}': No such file or directory\n"
            ));
        }
    }
    CommandResult {
        exit_code: if err.is_empty() { 0 } else { 1 },
        stdout: String::new(),
        stderr: err,
    }
}

fn module(state: &mut NodeState, manifest: &Manifest, args: &[&str]) -> CommandResult {
    let lookup = |name: &str| {
        manifest
            .get(name)
            .ok_or_else(|| CommandResult::fail(1, format!("module: unknown module '{name}'\n")))
    };
    let next = match args {
        ["avail"] => {
            return CommandResult::ok(
                manifest
                    .names()
                    .map(|n| format!("{n}\n"))
                    .collect::<String>(),
            )
        }
        ["list"] => {
            return CommandResult::ok(
                state
                    .env
                    .loaded()
                    .iter()
                    .map(|n| format!("{n}\n"))
                    .collect::<String>(),
            )
        }
        ["purge"] => state.env.purge(manifest),
        ["load", name] => match lookup(name) {
            Ok(e) => state.env.apply(e),
            Err(r) => return r,
        },
        ["unload", name] => state.env.remove(name, manifest),
        ["switch", name] => match lookup(name) {
            Ok(e) => state.env.switch(e, manifest),
            Err(r) => return r,
        },
        _ => {
            return CommandResult::fail(
                2,
                "usage: module avail|list|purge|load M|unload M|switch M\n",
            )
        }
    };
    state.env = next;
    CommandResult::ok("")
}

fn unpack_cmd(state: &mut NodeState, args: &[&str]) -> CommandResult {
    let [archive, dir] = args else {
        return CommandResult::fail(2, "usage: unpack ARCHIVE DIR\n");
    };
    if !valid_path(dir) {
        return CommandResult::fail(2, format!("unpack: bad directory '{dir}'\n"));
    }
    let Some(bytes) = state.files.get(*archive) else {
        return CommandResult::fail(1, format!("unpack: {archive}: No such file or directory\n"));
    };
    match unpack(bytes) {
        Ok(files) => {
            let n = files.len();
            for (name, data) in files {
                state.files.insert(format!("{dir}/{name}"), data);
            }
            CommandResult::ok(format!("{n} files\n"))
        }
        Err(e) => CommandResult::fail(1, format!("unpack: {e}\n")),
    }
}

fn run_rank(state: &mut NodeState, args: &[&str], now: Timestamp) -> CommandResult {
    let [dir, rank] = args else {
        return CommandResult::fail(2, "usage: run DIR RANK\n");
    };
    let Ok(rank) = rank.parse::<u32>() else {
        return CommandResult::fail(2, format!("run: bad rank '{rank}'\n"));
    };
    let prefix = format!("{dir}/");
    let files = state
        .files
        .iter()
        .filter_map(|(k, v)| k.strip_prefix(&prefix).map(|k| (k.to_owned(), v.clone())))
        .collect();
    let script = match script_from_files(&files) {
        Ok(s) => s,
        Err(e) => return CommandResult::fail(1, format!("run: {e}\n")),
    };
    if state.proc_state(dir, rank) == Some(ProcState::Running) {
        return CommandResult::fail(1, format!("run: {dir} rank {rank} already running\n"));
    }
    state.procs.push(RankProc {
        job: (*dir).to_owned(),
        rank,
        script,
        started_at: now,
        state: ProcState::Running,
    });
    CommandResult::ok(format!("rank {rank} started\n"))
}

fn ps(state: &NodeState) -> CommandResult {
    let mut out = String::from("JOB RANK STATE\n");
    for p in &state.procs {
        let st = match p.state {
            ProcState::Running => "running".to_owned(),
            ProcState::Exited(c) => format!("exited({c})"),
            ProcState::Killed => "killed".to_owned(),
        };
        out.push_str(&format!("{} {} {st}\n", p.job, p.rank));
    }
    CommandResult::ok(out)
}
