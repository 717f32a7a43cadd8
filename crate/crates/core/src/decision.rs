//! Decision pipeline: finite-model oracle, chase, template search.

use serde::Serialize;
use serde_json::{json, Value};

use crate::chase::{chase_explore, extract_model, verify_refutation, Budget, ChaseResult, Verdict};
use crate::formula::ModalFormula;
use crate::kripke::{brute_force_sat, check_qdps, force, PointedModel, QdpSet};
use crate::template::{
    default_branching, locally_feasible, reverify, search_template, template_from_chase, SearchOutcome,
    SearchStage, Template, TemplateSearchBudget,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct DecisionBudget {
    /// Largest model tried by the finite-model oracle.
    pub oracle_worlds: usize,
    pub chase: Budget,
    /// Branching cap of template enumeration; `None` uses the default cap.
    pub template_branching: Option<usize>,
    /// Work units of template enumeration; 0 skips the template stage.
    pub template_candidates: usize,
    /// Budget of the chase run inside the template stage.
    pub template_chase: Budget,
}

impl Default for DecisionBudget {
    fn default() -> Self {
        DecisionBudget {
            oracle_worlds: 4,
            chase: Budget::default(),
            template_branching: None,
            template_candidates: 200_000,
            template_chase: Budget { max_steps: 2000, max_branches: 64 },
        }
    }
}

impl DecisionBudget {
    pub fn template_budget(&self, f: &ModalFormula) -> TemplateSearchBudget {
        let mut b = TemplateSearchBudget::for_formula(f);
        if let Some(cap) = self.template_branching {
            b.max_branching = cap;
        }
        b.max_candidates = self.template_candidates;
        b.chase = self.template_chase;
        b
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SatVerdict {
    Satisfiable,
    Unsatisfiable,
    Unknown,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionVerdict {
    Theorem,
    NonTheorem,
    Unknown,
}

#[derive(Clone, Debug)]
pub enum Certificate {
    /// A finite pointed model satisfying the formula and every property.
    Model(PointedModel),
    /// A contradiction-free template for the formula.
    Template(Box<Template>),
    /// A chase run whose every leaf contains `contr`.
    Refutation(ChaseResult),
    /// The template search covered its bounded space without success.
    Exhaustion { stage: SearchStage, budget: TemplateSearchBudget },
    None,
}

impl Certificate {
    pub fn kind(&self) -> &'static str {
        match self {
            Certificate::Model(_) => "model",
            Certificate::Template(_) => "template",
            Certificate::Refutation(_) => "refutation",
            Certificate::Exhaustion { .. } => "exhaustion",
            Certificate::None => "none",
        }
    }

    pub fn to_json(&self) -> Value {
        match self {
            Certificate::Model(pm) => json!({
                "kind": "model",
                "world": pm.world,
                "model": pm.model.to_json_value(),
            }),
            Certificate::Template(t) => json!({
                "kind": "template",
                "template": t.to_json_value(),
            }),
            Certificate::Refutation(r) => json!({
                "kind": "refutation",
                "branches": r.branches.len(),
                "steps": r.total_steps,
                "trace": r.trace_lines(),
            }),
            Certificate::Exhaustion { stage, budget } => json!({
                "kind": "exhaustion",
                "stage": stage,
                "budget": budget,
            }),
            Certificate::None => json!({ "kind": "none" }),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Resources {
    pub oracle_worlds: usize,
    pub chase_steps: usize,
    pub chase_branches: usize,
    pub chase_verdict: Option<String>,
    pub template_search: Option<String>,
}

#[derive(Clone, Debug)]
pub struct SatOutcome {
    pub verdict: SatVerdict,
    pub certificate: Certificate,
    pub resources: Resources,
    /// False when an exhaustion verdict relies on a branching cap below the
    /// default one.
    pub authoritative: bool,
}

#[derive(Clone, Debug)]
pub struct DecisionOutcome {
    pub verdict: DecisionVerdict,
    /// The formula whose satisfiability was tested: the negated candidate.
    pub negation: ModalFormula,
    pub certificate: Certificate,
    pub resources: Resources,
    pub authoritative: bool,
}

fn chase_verdict_name(v: Verdict) -> &'static str {
    match v {
        Verdict::AllContradictory => "all_contradictory",
        Verdict::Witness(_) => "witness",
        Verdict::BudgetExhausted => "budget_exhausted",
    }
}

/// Satisfiability of `f` in `L(P)` through the staged pipeline.
pub fn sat(f: &ModalFormula, p: &QdpSet, budget: &DecisionBudget) -> SatOutcome {
    let mut resources = Resources { oracle_worlds: budget.oracle_worlds, ..Default::default() };
    let done = |verdict, certificate, resources| SatOutcome { verdict, certificate, resources, authoritative: true };

    if budget.oracle_worlds > 0 {
        if let Some(pm) = brute_force_sat(f, p, budget.oracle_worlds) {
            return done(SatVerdict::Satisfiable, Certificate::Model(pm), resources);
        }
    }

    let result = chase_explore(f, p, budget.chase);
    resources.chase_steps = result.total_steps;
    resources.chase_branches = result.branches_created;
    resources.chase_verdict = Some(chase_verdict_name(result.verdict).into());
    match result.verdict {
        Verdict::AllContradictory => {
            return done(SatVerdict::Unsatisfiable, Certificate::Refutation(result), resources);
        }
        Verdict::Witness(_) => {
            let branch = result.witness().expect("witness branch");
            let cert = match template_from_chase(branch, f, p) {
                Ok(t) => Certificate::Template(Box::new(t)),
                Err(_) => match extract_model(branch, f, p) {
                    Ok(pm) => Certificate::Model(pm),
                    Err(_) => Certificate::None,
                },
            };
            if !matches!(cert, Certificate::None) {
                return done(SatVerdict::Satisfiable, cert, resources);
            }
        }
        Verdict::BudgetExhausted => {}
    }

    if budget.template_candidates == 0 {
        return done(SatVerdict::Unknown, Certificate::None, resources);
    }
    let tb = budget.template_budget(f);
    let outcome = search_template(f, p, &tb);
    match outcome {
        SearchOutcome::Found(t, stage) => {
            resources.template_search = Some(format!("found ({})", stage_name(stage)));
            done(SatVerdict::Satisfiable, Certificate::Template(t), resources)
        }
        SearchOutcome::Exhausted(stage) => {
            resources.template_search = Some(format!("exhausted ({})", stage_name(stage)));
            let authoritative = stage != SearchStage::Enumeration || tb.max_branching >= default_branching(f);
            SatOutcome {
                verdict: SatVerdict::Unsatisfiable,
                certificate: Certificate::Exhaustion { stage, budget: tb },
                resources,
                authoritative,
            }
        }
        SearchOutcome::BudgetExhausted => {
            resources.template_search = Some("budget_exhausted".into());
            done(SatVerdict::Unknown, Certificate::None, resources)
        }
    }
}

fn stage_name(s: SearchStage) -> &'static str {
    match s {
        SearchStage::LocalFeasibility => "local_feasibility",
        SearchStage::ChasePrefix => "chase_prefix",
        SearchStage::Enumeration => "enumeration",
    }
}

/// Whether `candidate` belongs to `L(P)`, via satisfiability of its negation.
pub fn decide(candidate: &ModalFormula, p: &QdpSet, budget: &DecisionBudget) -> DecisionOutcome {
    let negation = candidate.negate();
    let s = sat(&negation, p, budget);
    let verdict = match s.verdict {
        SatVerdict::Satisfiable => DecisionVerdict::NonTheorem,
        SatVerdict::Unsatisfiable => DecisionVerdict::Theorem,
        SatVerdict::Unknown => DecisionVerdict::Unknown,
    };
    DecisionOutcome {
        verdict,
        negation,
        certificate: s.certificate,
        resources: s.resources,
        authoritative: s.authoritative,
    }
}

/// Re-checks a certificate produced for the satisfiability of `f`.
pub fn verify_certificate(cert: &Certificate, f: &ModalFormula, p: &QdpSet) -> Result<(), String> {
    match cert {
        Certificate::Model(pm) => {
            if !check_qdps(&pm.model, p) {
                return Err("model violates a quasi-density property".into());
            }
            if !force(&pm.model, pm.world, f) {
                return Err("model does not force the formula".into());
            }
            Ok(())
        }
        Certificate::Template(t) => {
            if t.tree.has_contr() {
                return Err("template contains contr".into());
            }
            reverify(t, f, p)
        }
        Certificate::Refutation(r) => verify_refutation(f, p, r),
        Certificate::Exhaustion { stage, budget } => match stage {
            SearchStage::LocalFeasibility => {
                if locally_feasible(f, budget.depth(f, p)) {
                    Err("formula is locally feasible".into())
                } else {
                    Ok(())
                }
            }
            _ => match search_template(f, p, budget) {
                SearchOutcome::Exhausted(s) if s == *stage => Ok(()),
                other => Err(format!("search rerun disagrees: {other:?}")),
            },
        },
        Certificate::None => Err("no certificate".into()),
    }
}

impl SatOutcome {
    pub fn to_json(&self, f: &ModalFormula, p: &QdpSet) -> Value {
        json!({
            "formula": f.to_string(),
            "qdps": p.to_string(),
            "verdict": self.verdict,
            "authoritative": self.authoritative,
            "certificate": self.certificate.to_json(),
            "resources": self.resources,
        })
    }
}

impl DecisionOutcome {
    pub fn to_json(&self, candidate: &ModalFormula, p: &QdpSet) -> Value {
        json!({
            "formula": candidate.to_string(),
            "negation": self.negation.to_string(),
            "qdps": p.to_string(),
            "verdict": self.verdict,
            "authoritative": self.authoritative,
            "certificate": self.certificate.to_json(),
            "resources": self.resources,
        })
    }
}
