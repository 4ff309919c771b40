//! Instruction evolution under an evolving method, response generation,
//! and multi-round dataset evolution.

use std::collections::{BTreeSet, HashSet};
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data_model::{InstructionRecord, Role, Turn};
use crate::gateway::{Gateway, GatewayError, GenerationRequest, RoleTag};
use crate::optimizer::EvolvingMethod;
use crate::templates::{extract_final_instruction, PromptTemplate, TemplateError, TemplateName, DEFAULT_MARKER};

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum EvolutionError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("instruction is empty")]
    EmptyInstruction,
    #[error("rounds must be at least 1")]
    NoRounds,
}

/// Sampling and formatting knobs shared by evolution calls.
#[derive(Debug, Clone)]
pub struct EvolutionSettings {
    pub marker: String,
    pub evol_temperature: f64,
    pub responder_temperature: f64,
    pub max_tokens: u32,
    pub response_template: PromptTemplate,
}

impl Default for EvolutionSettings {
    fn default() -> Self {
        Self {
            marker: DEFAULT_MARKER.to_string(),
            evol_temperature: 0.0,
            responder_temperature: 0.0,
            max_tokens: 2048,
            response_template: PromptTemplate::shipped(TemplateName::ResponseGeneration),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Evolved {
    pub instruction: String,
    pub format_warning: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryFailure {
    /// 1-based round that failed.
    pub round: usize,
    pub message: String,
}

/// An instruction followed by its successive evolutions under one method.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvolutionTrajectory {
    pub origin: InstructionRecord,
    pub generations: Vec<String>,
    pub method_version: String,
    pub warnings: Vec<bool>,
    pub failure: Option<TrajectoryFailure>,
}

impl EvolutionTrajectory {
    /// Stage 0 is the origin instruction, stage i the i-th generation.
    pub fn stages(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.origin.final_instruction()).chain(self.generations.iter().map(String::as_str))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordFailure {
    pub record_id: String,
    pub round: u32,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetEvolution {
    pub records: Vec<InstructionRecord>,
    pub failures: Vec<RecordFailure>,
    pub format_warnings: usize,
}

/// Runs evolution and response calls through a shared gateway.
pub struct Evolver<'g> {
    gateway: &'g Gateway,
    settings: EvolutionSettings,
}

impl<'g> Evolver<'g> {
    pub fn new(gateway: &'g Gateway, settings: EvolutionSettings) -> Self {
        Self { gateway, settings }
    }

    pub fn gateway(&self) -> &Gateway {
        self.gateway
    }

    pub fn settings(&self) -> &EvolutionSettings {
        &self.settings
    }

    pub fn evolve_once(&self, instruction: &str, method: &EvolvingMethod, phase: &str) -> Result<Evolved, EvolutionError> {
        self.evolve_in_context(instruction, &[], method, phase)
    }

    fn evolve_in_context(
        &self,
        instruction: &str,
        history: &[Turn],
        method: &EvolvingMethod,
        phase: &str,
    ) -> Result<Evolved, EvolutionError> {
        if instruction.trim().is_empty() {
            return Err(EvolutionError::EmptyInstruction);
        }
        let prompt = method.render(instruction)?;
        let request = GenerationRequest::new(RoleTag::Evol, prompt)
            .sampling(self.settings.evol_temperature, 1.0)
            .max_tokens(self.settings.max_tokens)
            .history(history.to_vec());
        let output = self.gateway.generate(&request, phase)?;
        let extracted = extract_final_instruction(&output, &self.settings.marker)?;
        Ok(Evolved {
            instruction: extracted.text,
            format_warning: extracted.format_warning,
        })
    }

    pub fn generate_response(&self, instruction: &str, phase: &str) -> Result<String, EvolutionError> {
        self.respond_in_context(instruction, &[], phase)
    }

    fn respond_in_context(&self, instruction: &str, history: &[Turn], phase: &str) -> Result<String, EvolutionError> {
        if instruction.trim().is_empty() {
            return Err(EvolutionError::EmptyInstruction);
        }
        let prompt = self.settings.response_template.render_with(&[("instruction", instruction)])?;
        let request = GenerationRequest::new(RoleTag::Responder, prompt)
            .sampling(self.settings.responder_temperature, 1.0)
            .max_tokens(self.settings.max_tokens)
            .history(history.to_vec());
        Ok(self.gateway.generate(&request, phase)?)
    }

    /// Evolves the record's final user turn `rounds` times in a chain. A failing
    /// round ends the chain; earlier generations are kept.
    pub fn build_trajectory(
        &self,
        record: &InstructionRecord,
        method: &EvolvingMethod,
        rounds: usize,
        phase: &str,
    ) -> Result<EvolutionTrajectory, EvolutionError> {
        if rounds == 0 {
            return Err(EvolutionError::NoRounds);
        }
        let mut trajectory = EvolutionTrajectory {
            origin: record.clone(),
            generations: Vec::with_capacity(rounds),
            method_version: method.version(),
            warnings: Vec::with_capacity(rounds),
            failure: None,
        };
        let mut current = record.final_instruction().to_string();
        for round in 1..=rounds {
            match self.evolve_once(&current, method, phase) {
                Ok(evolved) => {
                    trajectory.warnings.push(evolved.format_warning);
                    trajectory.generations.push(evolved.instruction.clone());
                    current = evolved.instruction;
                }
                Err(e) => {
                    trajectory.failure = Some(TrajectoryFailure {
                        round,
                        message: e.to_string(),
                    });
                    break;
                }
            }
        }
        Ok(trajectory)
    }

    /// One evolution round of a whole conversation: every user turn is
    /// evolved and answered with the already-evolved turns as context.
    fn evolve_conversation(
        &self,
        parent: &InstructionRecord,
        method: &EvolvingMethod,
        round: u32,
        id: String,
        phase: &str,
    ) -> Result<(InstructionRecord, usize), EvolutionError> {
        let mut turns: Vec<Turn> = Vec::with_capacity(parent.turns.len());
        let mut warnings = 0;
        for turn in parent.turns.iter().filter(|t| t.role == Role::User) {
            let evolved = self.evolve_in_context(&turn.text, &turns, method, phase)?;
            warnings += usize::from(evolved.format_warning);
            let response = self.respond_in_context(&evolved.instruction, &turns, phase)?;
            turns.push(Turn::user(evolved.instruction));
            turns.push(Turn::assistant(response));
        }
        let record = InstructionRecord {
            id,
            turns,
            source: parent.source.clone(),
            round,
            parent_id: Some(parent.id.clone()),
        };
        Ok((record, warnings))
    }

    /// Evolves every record for `rounds` rounds; round k re-evolves round k-1.
    /// Failed records are dropped from later rounds and reported. Output is
    /// ordered by (input order, round).
    pub fn evolve_dataset(
        &self,
        records: &[InstructionRecord],
        method: &EvolvingMethod,
        rounds: u32,
    ) -> Result<DatasetEvolution, EvolutionError> {
        if rounds == 0 {
            return Err(EvolutionError::NoRounds);
        }
        let done = AtomicUsize::new(0);
        let per_record = self.gateway.map_bounded(records, |seed| {
            let mut produced = Vec::with_capacity(rounds as usize);
            let mut warnings = 0;
            let mut parent = seed.clone();
            for round in 1..=rounds {
                let id = format!("{}-r{}", seed.id, parent.round + 1);
                match self.evolve_conversation(&parent, method, parent.round + 1, id, "evolve_dataset") {
                    Ok((record, w)) => {
                        warnings += w;
                        parent = record.clone();
                        produced.push(record);
                        let n = done.fetch_add(1, Ordering::Relaxed) + 1;
                        if n % 100 == 0 {
                            tracing::info!(evolved = n, "evolution progress");
                        }
                    }
                    Err(e) => {
                        tracing::warn!(record = %seed.id, round, error = %e, "evolution failed");
                        return (
                            produced,
                            warnings,
                            Some(RecordFailure {
                                record_id: seed.id.clone(),
                                round,
                                message: e.to_string(),
                            }),
                        );
                    }
                }
            }
            (produced, warnings, None)
        });
        let mut out = DatasetEvolution::default();
        for (produced, warnings, failure) in per_record {
            out.records.extend(produced);
            out.format_warnings += warnings;
            out.failures.extend(failure);
        }
        Ok(out)
    }
}

/// Keeps records whose round is in `rounds`, in input order, first id wins.
pub fn mix_rounds(evolved: &[InstructionRecord], rounds: &BTreeSet<u32>) -> Vec<InstructionRecord> {
    let mut seen = HashSet::new();
    evolved
        .iter()
        .filter(|r| rounds.contains(&r.round) && seen.insert(r.id.as_str()))
        .cloned()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{MockBackend, MockRule, MockScript, RetryPolicy};
    use std::collections::HashMap;
    use std::sync::Arc;

    const ECHO_EVOL: &str = r"(?s)#Instruction#:\n(.*)$";

    fn method() -> EvolvingMethod {
        EvolvingMethod::initial(format!("Rewrite it.\n{DEFAULT_MARKER}\n#Instruction#:\n{{instruction}}"))
    }

    fn echo_rules() -> Vec<MockRule> {
        vec![
            MockRule::reply(RoleTag::Evol, format!("{DEFAULT_MARKER}\nEVOLVED: {{1}}")).regex(ECHO_EVOL),
            MockRule::reply(RoleTag::Responder, "The answer is 4."),
        ]
    }

    fn gateway(rules: Vec<MockRule>) -> Gateway {
        Gateway::new(Arc::new(MockBackend::new(MockScript::new(rules)).unwrap()))
            .with_retry(RetryPolicy::no_delay(0))
            .with_max_in_flight(4)
    }

    #[test]
    fn evolve_once_extracts() {
        let gw = gateway(echo_rules());
        let ev = Evolver::new(&gw, EvolutionSettings::default());
        let out = ev.evolve_once("add 2+2", &method(), "t").unwrap();
        assert_eq!(out.instruction, "EVOLVED: add 2+2");
        assert!(!out.format_warning);
        assert_eq!(gw.ledger().snapshot().role(RoleTag::Evol), 1);
    }

    #[test]
    fn evolve_uses_evol_temperature() {
        let backend = Arc::new(MockBackend::new(MockScript::new(echo_rules())).unwrap());
        let gw = Gateway::new(backend.clone());
        let ev = Evolver::new(&gw, EvolutionSettings::default());
        ev.evolve_once("x", &method(), "t").unwrap();
        let reqs = backend.requests();
        assert_eq!(reqs[0].temperature, 0.0);
        assert_eq!(reqs[0].role_tag, RoleTag::Evol);
    }

    #[test]
    fn empty_instruction_rejected() {
        let gw = gateway(echo_rules());
        let ev = Evolver::new(&gw, EvolutionSettings::default());
        assert_eq!(ev.evolve_once("  ", &method(), "t"), Err(EvolutionError::EmptyInstruction));
    }

    #[test]
    fn trajectory_chains_generations() {
        let gw = gateway(echo_rules());
        let ev = Evolver::new(&gw, EvolutionSettings::default());
        let seed = InstructionRecord::seed("a", "seed", "");
        let t1 = ev.build_trajectory(&seed, &method(), 1, "t").unwrap();
        assert_eq!(t1.generations, ["EVOLVED: seed"]);
        let t3 = ev.build_trajectory(&seed, &method(), 3, "t").unwrap();
        assert_eq!(t3.generations[2], "EVOLVED: EVOLVED: EVOLVED: seed");
        assert_eq!(t3.stages().count(), 4);
        assert!(t3.failure.is_none());
        assert_eq!(ev.build_trajectory(&seed, &method(), 0, "t"), Err(EvolutionError::NoRounds));
    }

    #[test]
    fn trajectory_keeps_generations_before_failure() {
        // Round 1 succeeds, round 2 sees the evolved text and hits a fatal rule.
        let mut fatal = MockRule::reply(RoleTag::Evol, "unused").contains("EVOLVED:");
        fatal.fatal = Some("400".into());
        let mut rules = vec![fatal];
        rules.extend(echo_rules());
        let gw = gateway(rules);
        let ev = Evolver::new(&gw, EvolutionSettings::default());
        let t = ev
            .build_trajectory(&InstructionRecord::seed("a", "seed", ""), &method(), 2, "t")
            .unwrap();
        assert_eq!(t.generations, ["EVOLVED: seed"]);
        assert_eq!(t.failure.as_ref().map(|f| f.round), Some(2));
    }

    #[test]
    fn response_is_verbatim() {
        let gw = gateway(vec![MockRule::reply(RoleTag::Responder, "Understood. Anything else?")]);
        let ev = Evolver::new(&gw, EvolutionSettings::default());
        assert_eq!(ev.generate_response("q", "r").unwrap(), "Understood. Anything else?");
    }

    #[test]
    fn dataset_rounds_and_lineage() {
        let gw = gateway(echo_rules());
        let ev = Evolver::new(&gw, EvolutionSettings::default());
        let seeds: Vec<_> = (0..3).map(|i| InstructionRecord::seed(format!("s{i}"), format!("q{i}"), "src")).collect();
        let one = ev.evolve_dataset(&seeds, &method(), 1).unwrap();
        assert_eq!(one.records.len(), 3);
        assert!(one.records.iter().all(|r| r.round == 1 && r.parent_id.is_some()));

        let two = ev.evolve_dataset(&seeds, &method(), 2).unwrap();
        assert_eq!(two.records.len(), 6);
        let order: Vec<(&str, u32)> = two.records.iter().map(|r| (r.id.as_str(), r.round)).collect();
        assert_eq!(order, [("s0-r1", 1), ("s0-r2", 2), ("s1-r1", 1), ("s1-r2", 2), ("s2-r1", 1), ("s2-r2", 2)]);

        let mut by_id: HashMap<&str, &InstructionRecord> = two.records.iter().map(|r| (r.id.as_str(), r)).collect();
        by_id.extend(seeds.iter().map(|r| (r.id.as_str(), r)));
        for r in &two.records {
            let mut hops = 0;
            let mut cur: &InstructionRecord = r;
            while let Some(p) = &cur.parent_id {
                cur = by_id[p.as_str()];
                hops += 1;
            }
            assert_eq!(hops, r.round);
            assert_eq!(cur.round, 0);
        }
        assert_eq!(two.records[1].turns[0].text, "EVOLVED: EVOLVED: q0");
        assert_eq!(two.records[1].turns[1], Turn::assistant("The answer is 4."));
    }

    #[test]
    fn multi_turn_evolves_every_user_turn() {
        let gw = gateway(echo_rules());
        let ev = Evolver::new(&gw, EvolutionSettings::default());
        let mut record = InstructionRecord::seed("m", "u1", "sharegpt");
        for i in 2..=5 {
            record.turns.push(Turn::assistant(format!("a{}", i - 1)));
            record.turns.push(Turn::user(format!("u{i}")));
        }
        let out = ev.evolve_dataset(&[record], &method(), 1).unwrap();
        let snap = gw.ledger().snapshot();
        assert_eq!(snap.total_calls(), 10);
        assert_eq!(snap.role(RoleTag::Evol), 5);
        let turns = &out.records[0].turns;
        assert_eq!(turns.len(), 10);
        assert_eq!(turns[8], Turn::user("EVOLVED: u5"));
    }

    #[test]
    fn failures_are_skipped_and_reported() {
        let mut fatal = MockRule::reply(RoleTag::Evol, "unused").contains("bad");
        fatal.fatal = Some("400".into());
        let mut rules = vec![fatal];
        rules.extend(echo_rules());
        let gw = gateway(rules);
        let ev = Evolver::new(&gw, EvolutionSettings::default());
        let seeds = vec![InstructionRecord::seed("ok", "fine", ""), InstructionRecord::seed("ko", "bad", "")];
        let out = ev.evolve_dataset(&seeds, &method(), 2).unwrap();
        assert_eq!(out.records.len(), 2);
        assert_eq!(out.failures.len(), 1);
        assert_eq!(out.failures[0].record_id, "ko");
        assert_eq!(out.failures[0].round, 1);
        assert_eq!(gw.ledger().snapshot().failures, 1);
    }

    #[test]
    fn mix_filters_by_round() {
        let records: Vec<InstructionRecord> = (0..10)
            .flat_map(|s| {
                (1..=3).map(move |k| InstructionRecord {
                    id: format!("s{s}-r{k}"),
                    turns: vec![Turn::user("x")],
                    source: String::new(),
                    round: k,
                    parent_id: Some(format!("s{s}")),
                })
            })
            .collect();
        let one = mix_rounds(&records, &BTreeSet::from([1]));
        assert_eq!(one.len(), 10);
        assert!(one.iter().all(|r| r.round == 1));
        assert_eq!(mix_rounds(&records, &BTreeSet::from([1, 2, 3])), records);

        let mixed: BTreeSet<String> = mix_rounds(&records, &BTreeSet::from([1, 2])).into_iter().map(|r| r.id).collect();
        let union: BTreeSet<String> = mix_rounds(&records, &BTreeSet::from([1]))
            .into_iter()
            .chain(mix_rounds(&records, &BTreeSet::from([2])))
            .map(|r| r.id)
            .collect();
        assert_eq!(mixed, union);

        let mut dup = records.clone();
        dup.push(records[0].clone());
        assert_eq!(mix_rounds(&dup, &BTreeSet::from([1])).len(), 10);
    }
}
