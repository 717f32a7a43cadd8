//! The `quasik` command line.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::chase::{chase_explore, Budget, ChaseResult, Verdict};
use crate::decision::{decide, sat, DecisionBudget, DecisionVerdict, SatVerdict};
use crate::formula::{parse_formula, ModalFormula};
use crate::instance::Instance;
use crate::kripke::{check_qdp, force, KripkeModel, QdpSet};
use crate::template::{default_branching, verify_template};

pub const EXIT_USAGE: i32 = 64;
pub const EXIT_IO: i32 = 74;

#[derive(Parser, Debug)]
#[command(name = "quasik", version, about = "Decide modal formulas over quasi-dense frames")]
struct Cli {
    /// Emit JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "QUASIK_JOBS")]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Decide whether a formula is a theorem of L(P).
    Decide(DecideArgs),
    /// Decide whether a formula is satisfiable in L(P).
    Sat(DecideArgs),
    /// Run the chase on {P_φ(a)} and dump the result.
    Chase(ChaseArgs),
    /// Check the template properties of a tree given as instance JSON.
    CheckTemplate(CheckTemplateArgs),
    /// Evaluate a formula at a world of a model given as JSON.
    ModelCheck(ModelCheckArgs),
}

#[derive(Args, Debug)]
struct FormulaArgs {
    /// Formula text, or @path to read it from a file.
    #[arg(short = 'f', long = "formula")]
    formula: String,
    /// Comma-separated quasi-density properties such as "1->2,2->3"; empty means K.
    #[arg(short = 'p', long = "qdps", default_value = "")]
    qdps: String,
}

#[derive(Args, Debug)]
struct ChaseBudgetArgs {
    /// Chase steps allowed per branch.
    #[arg(long, default_value_t = 5000, value_parser = clap::value_parser!(u64).range(1..))]
    steps: u64,
    /// Chase branches allowed in total.
    #[arg(long, default_value_t = 512, value_parser = clap::value_parser!(u64).range(1..))]
    branches: u64,
    /// Write the chase trace to this file.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DecideArgs {
    #[command(flatten)]
    formula: FormulaArgs,
    #[command(flatten)]
    chase: ChaseBudgetArgs,
    /// Largest model size tried by the finite-model oracle.
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(1..=8))]
    worlds: u64,
    /// Branching cap of template enumeration.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    branching: Option<u64>,
    /// Work units of template enumeration.
    #[arg(long, default_value_t = 200_000, value_parser = clap::value_parser!(u64).range(1..))]
    candidates: u64,
}

#[derive(Args, Debug)]
struct ChaseArgs {
    #[command(flatten)]
    formula: FormulaArgs,
    #[command(flatten)]
    chase: ChaseBudgetArgs,
}

#[derive(Args, Debug)]
struct CheckTemplateArgs {
    /// Tree as instance JSON (template JSON is accepted too).
    #[arg(short = 't', long = "template")]
    template: PathBuf,
    #[command(flatten)]
    formula: FormulaArgs,
}

#[derive(Args, Debug)]
struct ModelCheckArgs {
    /// Model JSON file.
    #[arg(short = 'm', long = "model")]
    model: PathBuf,
    /// World name or index.
    #[arg(short = 'w', long = "world")]
    world: String,
    #[command(flatten)]
    formula: FormulaArgs,
}

enum Failure {
    Usage(String),
    Io(String),
}

type Outcome = Result<i32, Failure>;

fn read_file(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Io(format!("cannot read {}: {e}", path.display())))
}

fn parse_inputs(a: &FormulaArgs) -> Result<(ModalFormula, QdpSet), Failure> {
    let text = match a.formula.strip_prefix('@') {
        Some(path) => read_file(Path::new(path))?,
        None => a.formula.clone(),
    };
    let f = parse_formula(text.trim()).map_err(|e| Failure::Usage(format!("formula: {e}")))?;
    let p = a.qdps.parse::<QdpSet>().map_err(|e| Failure::Usage(format!("qdps: {e}")))?;
    Ok((f, p))
}

fn budget_of(c: &ChaseBudgetArgs) -> Budget {
    Budget { max_steps: c.steps as usize, max_branches: c.branches as usize }
}

fn write_trace(path: &Option<PathBuf>, lines: &[String]) -> Result<(), Failure> {
    if let Some(path) = path {
        let mut text = lines.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Failure::Io(format!("cannot write {}: {e}", path.display())))?;
    }
    Ok(())
}

fn emit(out: &mut dyn Write, v: &Value) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(v).expect("serializable");
    writeln!(out, "{text}").map_err(|e| Failure::Io(e.to_string()))
}

fn say(out: &mut dyn Write, text: &str) -> Result<(), Failure> {
    writeln!(out, "{text}").map_err(|e| Failure::Io(e.to_string()))
}

fn decision_budget(a: &DecideArgs) -> DecisionBudget {
    DecisionBudget {
        oracle_worlds: a.worlds as usize,
        chase: budget_of(&a.chase),
        template_branching: a.branching.map(|b| b as usize),
        template_candidates: a.candidates as usize,
        ..DecisionBudget::default()
    }
}

fn warn_branching(a: &DecideArgs, g: &ModalFormula, err: &mut dyn Write) {
    if let Some(b) = a.branching {
        let bound = default_branching(g);
        if (b as usize) < bound {
            let _ = writeln!(
                err,
                "warning: branching cap {b} is below the default bound {bound}; exhaustion verdicts are not authoritative"
            );
        }
    }
}

fn chase_for_trace(f: &ModalFormula, p: &QdpSet, a: &ChaseBudgetArgs) -> Option<ChaseResult> {
    a.trace.as_ref().map(|_| chase_explore(f, p, budget_of(a)))
}

fn cmd_decide(a: &DecideArgs, json: bool, out: &mut dyn Write, err: &mut dyn Write) -> Outcome {
    let (f, p) = parse_inputs(&a.formula)?;
    let outcome = decide(&f, &p, &decision_budget(a));
    warn_branching(a, &outcome.negation, err);
    if let Some(r) = chase_for_trace(&outcome.negation, &p, &a.chase) {
        write_trace(&a.chase.trace, &r.trace_lines())?;
    }
    if json {
        emit(out, &outcome.to_json(&f, &p))?;
    } else {
        let verdict = match outcome.verdict {
            DecisionVerdict::Theorem => "theorem",
            DecisionVerdict::NonTheorem => "non-theorem",
            DecisionVerdict::Unknown => "unknown",
        };
        say(out, &format!("{verdict} ({} certificate)", outcome.certificate.kind()))?;
        if !outcome.authoritative {
            say(out, "note: exhaustion below the default branching bound")?;
        }
    }
    Ok(match outcome.verdict {
        DecisionVerdict::Theorem => 0,
        DecisionVerdict::NonTheorem => 1,
        DecisionVerdict::Unknown => 2,
    })
}

fn cmd_sat(a: &DecideArgs, json: bool, out: &mut dyn Write, err: &mut dyn Write) -> Outcome {
    let (f, p) = parse_inputs(&a.formula)?;
    warn_branching(a, &f, err);
    let outcome = sat(&f, &p, &decision_budget(a));
    if let Some(r) = chase_for_trace(&f, &p, &a.chase) {
        write_trace(&a.chase.trace, &r.trace_lines())?;
    }
    if json {
        emit(out, &outcome.to_json(&f, &p))?;
    } else {
        let verdict = match outcome.verdict {
            SatVerdict::Satisfiable => "satisfiable",
            SatVerdict::Unsatisfiable => "unsatisfiable",
            SatVerdict::Unknown => "unknown",
        };
        say(out, &format!("{verdict} ({} certificate)", outcome.certificate.kind()))?;
    }
    Ok(match outcome.verdict {
        SatVerdict::Satisfiable => 0,
        SatVerdict::Unsatisfiable => 1,
        SatVerdict::Unknown => 2,
    })
}

fn chase_json(r: &ChaseResult) -> Value {
    let verdict = match r.verdict {
        Verdict::AllContradictory => json!("all_contradictory"),
        Verdict::Witness(i) => json!({ "witness": i }),
        Verdict::BudgetExhausted => json!("budget_exhausted"),
    };
    let branches: Vec<Value> = r
        .branches
        .iter()
        .map(|b| {
            json!({
                "id": b.id,
                "status": b.status,
                "steps": b.step_count,
                "instance": b.instance.to_json_value(),
                "trace": b.trace.iter().map(|e| e.to_string()).collect::<Vec<_>>(),
            })
        })
        .collect();
    json!({
        "verdict": verdict,
        "total_steps": r.total_steps,
        "branches_created": r.branches_created,
        "branches": branches,
    })
}

fn cmd_chase(a: &ChaseArgs, json: bool, out: &mut dyn Write) -> Outcome {
    let (f, p) = parse_inputs(&a.formula)?;
    let r = chase_explore(&f, &p, budget_of(&a.chase));
    write_trace(&a.chase.trace, &r.trace_lines())?;
    if json {
        emit(out, &chase_json(&r))?;
    } else {
        let verdict = match r.verdict {
            Verdict::AllContradictory => "all branches contradictory".to_string(),
            Verdict::Witness(i) => format!("saturated witness branch {}", r.branches[i].id),
            Verdict::BudgetExhausted => "budget exhausted".to_string(),
        };
        say(out, &format!("{verdict}; {} steps, {} branches", r.total_steps, r.branches_created))?;
        for b in &r.branches {
            say(out, &format!("branch {} {:?} after {} steps: {}", b.id, b.status, b.step_count, b.instance))?;
        }
    }
    Ok(0)
}

fn cmd_check_template(a: &CheckTemplateArgs, json: bool, out: &mut dyn Write) -> Outcome {
    let (f, p) = parse_inputs(&a.formula)?;
    let text = read_file(&a.template)?;
    let tree = Instance::from_json(&text).map_err(|e| Failure::Usage(format!("template: {e}")))?;
    match verify_template(&tree, &f, &p) {
        Ok(t) => {
            if json {
                emit(out, &json!({ "ok": true, "template": t.to_json_value() }))?;
            } else {
                say(out, &format!("template ok: {} terms, N = {}", t.tree.term_count(), t.params.big_n))?;
            }
            Ok(0)
        }
        Err(v) => {
            if json {
                emit(out, &json!({ "ok": false, "violation": v }))?;
            } else {
                say(out, &format!("violation of {v}"))?;
            }
            Ok(1)
        }
    }
}

fn cmd_model_check(a: &ModelCheckArgs, json: bool, out: &mut dyn Write) -> Outcome {
    let (f, p) = parse_inputs(&a.formula)?;
    let text = read_file(&a.model)?;
    let m = KripkeModel::from_json(&text).map_err(|e| Failure::Usage(format!("model: {e}")))?;
    let w = m.world_index(&a.world).map_err(|e| Failure::Usage(format!("world: {e}")))?;
    let forced = force(&m, w, &f);
    let qdps: Vec<(String, bool)> = p.iter().map(|q| (q.to_string(), check_qdp(&m, q))).collect();
    let holds = forced && qdps.iter().all(|(_, ok)| *ok);
    if json {
        let frame: serde_json::Map<String, Value> = qdps.iter().map(|(q, ok)| (q.clone(), json!(ok))).collect();
        emit(
            out,
            &json!({
                "world": m.world_names()[w],
                "formula": f.to_string(),
                "forced": forced,
                "qdps": frame,
                "result": holds,
            }),
        )?;
    } else {
        say(out, &format!("{} at {}: {}", f, m.world_names()[w], forced))?;
        for (q, ok) in &qdps {
            say(out, &format!("frame satisfies {q}: {ok}"))?;
        }
    }
    Ok(if holds { 0 } else { 1 })
}

/// Runs the command line with explicit output streams; returns the exit code.
pub fn run_with<I, S>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let text = e.render().to_string();
            if code == 0 {
                let _ = write!(out, "{text}");
            } else {
                let _ = write!(err, "{text}");
            }
            return code;
        }
    };
    let json = cli.json;
    let body = |out: &mut Vec<u8>, err: &mut Vec<u8>| match &cli.command {
        Command::Decide(a) => cmd_decide(a, json, out, err),
        Command::Sat(a) => cmd_sat(a, json, out, err),
        Command::Chase(a) => cmd_chase(a, json, out),
        Command::CheckTemplate(a) => cmd_check_template(a, json, out),
        Command::ModelCheck(a) => cmd_model_check(a, json, out),
    };
    let (mut buf_out, mut buf_err) = (Vec::new(), Vec::new());
    let result = match cli.jobs {
        Some(0) => Err(Failure::Usage("--jobs must be positive".into())),
        Some(j) => match rayon::ThreadPoolBuilder::new().num_threads(j).build() {
            Ok(pool) => pool.install(|| body(&mut buf_out, &mut buf_err)),
            Err(e) => Err(Failure::Io(e.to_string())),
        },
        None => body(&mut buf_out, &mut buf_err),
    };
    if out.write_all(&buf_out).and_then(|_| err.write_all(&buf_err)).is_err() {
        return EXIT_IO;
    }
    match result {
        Ok(code) => code,
        Err(Failure::Usage(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Io(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            EXIT_IO
        }
    }
}

/// Runs the command line on the process streams.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with(argv, &mut stdout.lock(), &mut stderr.lock())
}
