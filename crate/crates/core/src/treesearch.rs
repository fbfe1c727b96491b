//! Step-level tree search over partial solutions, scored by simulation.
//!
//! The search grows a tree whose edges are reasoning steps. Each iteration
//! walks from the root (unvisited children first, then UCT), expands a leaf
//! into `k` candidate next steps when due, and scores exactly one node by
//! drawing `l` direct completions of its partial solution and measuring what
//! fraction reach the question's answer. That correctness ratio backs up the
//! path as reward, exactly one evaluation per iteration, so visit counts obey
//! a strict conservation law that the tests audit after every step.
//!
//! Harvesting returns the `n` best complete solutions found, padding with
//! direct completions of the most promising open paths when fewer than `n`
//! branches reached an answer. [`run_naive_mcts`] is the ablation baseline:
//! the same loop but scored by a self-assessed quality judgment of the
//! partial solution instead of simulated answer correctness.

use crate::answers::{
    answers_equal, canonicalize, contains_final_answer_cue, extract_answer, AnswerError,
    CanonicalAnswer, ExtractorConfig,
};
use crate::backend::{complete_batch, Backend, BackendError, GenerationRequest, Message};
use crate::corpus::Question;
use crate::templates::{PromptTemplate, TemplateError, DEFAULT_CRITIQUE, DEFAULT_SOLVE};
use crate::util::mix_seed;
use regex::Regex;
use serde::{Deserialize, Serialize};
use std::sync::LazyLock;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("backend failure during {phase}: {source}")]
    Backend {
        phase: &'static str,
        #[source]
        source: BackendError,
    },
    #[error("expansion produced no usable steps at node {node}")]
    ExpansionExhausted { node: usize },
    #[error("node {node} cannot be expanded")]
    NodeNotExpandable { node: usize },
    #[error("search ended with nothing to harvest")]
    SearchStarved,
    #[error("invalid search config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("golden answer unusable: {0}")]
    Answer(#[from] AnswerError),
}

/// How reasoning is split into steps and rejoined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StepDelimiter {
    #[default]
    BlankLine,
    Newline,
}

impl StepDelimiter {
    pub fn as_str(&self) -> &'static str {
        match self {
            StepDelimiter::BlankLine => "\n\n",
            StepDelimiter::Newline => "\n",
        }
    }
}

/// How multi-sample draws are issued to the backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// One request per sample, each with its own derived seed.
    #[default]
    PerCall,
    /// A single request with `num_samples` set.
    Batched,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    /// Candidate next steps per expansion.
    pub k: usize,
    /// Direct completions per reward evaluation.
    pub l: usize,
    /// Rollouts to harvest.
    pub n: usize,
    /// Depth at which nodes become terminal regardless of content.
    pub max_depth: usize,
    /// UCT exploration constant; 0 degenerates to greedy mean-reward descent.
    pub uct_c: f64,
    /// Search iterations (one reward evaluation each).
    pub iterations: usize,
    pub step_delimiter: StepDelimiter,
    pub sampling_mode: SamplingMode,
    pub seed: u64,
    /// Numeric tolerance when comparing simulated answers to the gold answer.
    pub tolerance: f64,
    /// When true, failed completions count as incorrect simulations instead
    /// of aborting the search.
    pub continue_on_error: bool,
    /// Solve prompt with a `{question}` slot.
    pub solve_template: String,
    /// Self-scoring prompt with `{question}` and `{solution}` slots, used by
    /// [`run_naive_mcts`].
    pub critique_template: String,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            k: 3,
            l: 5,
            n: 8,
            max_depth: 10,
            uct_c: 1.414,
            iterations: 40,
            step_delimiter: StepDelimiter::BlankLine,
            sampling_mode: SamplingMode::PerCall,
            seed: 0,
            tolerance: crate::answers::DEFAULT_TOLERANCE,
            continue_on_error: false,
            solve_template: DEFAULT_SOLVE.to_string(),
            critique_template: DEFAULT_CRITIQUE.to_string(),
        }
    }
}

/// One node of the search tree. `visits`/`total_reward` are the usual N/W
/// statistics; `evals` counts reward evaluations that originated at this node
/// (as opposed to backpropagations passing through from descendants).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchNode {
    pub step_text: String,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    pub depth: usize,
    pub visits: u32,
    pub total_reward: f64,
    pub terminal: bool,
    pub evals: u32,
    pub cached_reward: Option<f64>,
}

impl SearchNode {
    /// Mean backed-up reward (Q); 0 for unvisited nodes.
    pub fn mean_reward(&self) -> f64 {
        if self.visits == 0 {
            0.0
        } else {
            self.total_reward / f64::from(self.visits)
        }
    }
}

/// Arena-allocated search tree; node 0 is the root (empty step).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchTree {
    pub nodes: Vec<SearchNode>,
}

impl SearchTree {
    fn new() -> Self {
        Self {
            nodes: vec![SearchNode {
                step_text: String::new(),
                parent: None,
                children: Vec::new(),
                depth: 0,
                visits: 0,
                total_reward: 0.0,
                terminal: false,
                evals: 0,
                cached_reward: None,
            }],
        }
    }

    pub const ROOT: usize = 0;

    fn add_child(&mut self, parent: usize, step_text: String, terminal: bool) -> usize {
        let depth = self.nodes[parent].depth + 1;
        let id = self.nodes.len();
        self.nodes.push(SearchNode {
            step_text,
            parent: Some(parent),
            children: Vec::new(),
            depth,
            visits: 0,
            total_reward: 0.0,
            terminal,
            evals: 0,
            cached_reward: None,
        });
        self.nodes[parent].children.push(id);
        id
    }

    /// Steps from the root's first child down to `node`, in order.
    pub fn path_steps(&self, node: usize) -> Vec<&str> {
        let mut steps = Vec::new();
        let mut cursor = Some(node);
        while let Some(id) = cursor {
            let n = &self.nodes[id];
            if n.parent.is_some() {
                steps.push(n.step_text.as_str());
            }
            cursor = n.parent;
        }
        steps.reverse();
        steps
    }
}

/// Picks the child of `node` maximizing Q + c * sqrt(ln N_parent / N_child),
/// breaking ties toward the lower index. Callers descend to unvisited
/// children first, so every child here has been visited; an unvisited child
/// is still selected outright rather than dividing by zero.
pub fn uct_select(tree: &SearchTree, node: usize, uct_c: f64) -> usize {
    let parent = &tree.nodes[node];
    assert!(
        !parent.children.is_empty(),
        "uct_select called on a childless node"
    );
    if let Some(&fresh) = parent
        .children
        .iter()
        .find(|&&c| tree.nodes[c].visits == 0)
    {
        return fresh;
    }
    let ln_parent = f64::from(parent.visits.max(1)).ln();
    let mut best = parent.children[0];
    let mut best_score = f64::NEG_INFINITY;
    for &child in &parent.children {
        let c = &tree.nodes[child];
        let score = c.mean_reward() + uct_c * (ln_parent / f64::from(c.visits)).sqrt();
        if score > best_score {
            best = child;
            best_score = score;
        }
    }
    best
}

/// Adds `reward` and one visit to every node from `leaf` up to the root.
pub fn backpropagate(tree: &mut SearchTree, leaf: usize, reward: f64) {
    let mut cursor = Some(leaf);
    while let Some(id) = cursor {
        let node = &mut tree.nodes[id];
        node.visits += 1;
        node.total_reward += reward;
        cursor = node.parent;
    }
}

/// How nodes are scored: by simulated answer correctness, or by asking the
/// model to rate its own partial solution (the ablation baseline).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardMode {
    Simulation,
    SelfCritique,
}

/// A harvested solution path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub question_id: String,
    pub steps: Vec<String>,
    /// Steps joined with the step delimiter.
    pub full_text: String,
    /// Mean backed-up reward of the leaf this rollout came from.
    pub reward_at_leaf: f64,
    /// Node the rollout was read from.
    pub leaf: usize,
    /// True when the tail was freshly sampled at harvest time instead of
    /// taken from a terminal path.
    pub padded: bool,
}

/// An in-progress search. Most callers use [`run_search`]; tests and tools
/// drive [`Search::step`] directly to observe the tree between iterations.
pub struct Search<'a> {
    backend: &'a dyn Backend,
    question: &'a Question,
    config: SearchConfig,
    extractor: &'a ExtractorConfig,
    solve: PromptTemplate,
    critique: PromptTemplate,
    golden: CanonicalAnswer,
    mode: RewardMode,
    tree: SearchTree,
    evaluations: usize,
}

impl<'a> Search<'a> {
    pub fn new(
        backend: &'a dyn Backend,
        question: &'a Question,
        config: SearchConfig,
        extractor: &'a ExtractorConfig,
    ) -> Result<Self, SearchError> {
        Self::with_mode(backend, question, config, extractor, RewardMode::Simulation)
    }

    pub fn with_mode(
        backend: &'a dyn Backend,
        question: &'a Question,
        config: SearchConfig,
        extractor: &'a ExtractorConfig,
        mode: RewardMode,
    ) -> Result<Self, SearchError> {
        for (name, value) in [
            ("k", config.k),
            ("l", config.l),
            ("n", config.n),
            ("max_depth", config.max_depth),
        ] {
            if value == 0 {
                return Err(SearchError::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if !(config.uct_c >= 0.0 && config.uct_c.is_finite()) {
            return Err(SearchError::InvalidConfig(
                "uct_c must be finite and non-negative".into(),
            ));
        }
        if !(config.tolerance > 0.0) {
            return Err(SearchError::InvalidConfig("tolerance must be positive".into()));
        }
        let solve = PromptTemplate::new(&config.solve_template, &["question"])?;
        let critique = PromptTemplate::new(&config.critique_template, &["question", "solution"])?;
        let golden = canonicalize(&question.golden_answer)?;
        Ok(Self {
            backend,
            question,
            config,
            extractor,
            solve,
            critique,
            golden,
            mode,
            tree: SearchTree::new(),
            evaluations: 0,
        })
    }

    pub fn tree(&self) -> &SearchTree {
        &self.tree
    }

    /// Completed reward evaluations; equals the root's visit count.
    pub fn evaluations(&self) -> usize {
        self.evaluations
    }

    fn path_messages(&self, node: usize) -> Vec<Message> {
        let mut user = Message::user(self.solve.fill(&[("question", &self.question.prompt_text)]));
        if let Some(image) = &self.question.image_ref {
            user = user.with_image(image.clone());
        }
        let steps = self.tree.path_steps(node);
        let mut messages = vec![user];
        if !steps.is_empty() {
            messages.push(Message::assistant(
                steps.join(self.config.step_delimiter.as_str()),
            ));
        }
        messages
    }

    /// Draws `count` completions of the partial solution at `node`, returning
    /// full reply texts. `purpose` partitions the seed space; `salt`
    /// distinguishes retries.
    fn draw_completions(
        &self,
        node: usize,
        count: usize,
        purpose: &'static str,
        salt: usize,
    ) -> Result<Vec<Option<String>>, SearchError> {
        let messages = self.path_messages(node);
        let node_tag = node.to_string();
        let salt_tag = salt.to_string();
        let responses: Vec<Result<String, BackendError>> = match self.config.sampling_mode {
            SamplingMode::PerCall => {
                let requests: Vec<GenerationRequest> = (0..count)
                    .map(|j| {
                        GenerationRequest::from_messages(messages.clone()).with_seed(mix_seed(
                            self.config.seed,
                            &[purpose, &self.question.id, &node_tag, &salt_tag, &j.to_string()],
                        ))
                    })
                    .collect();
                complete_batch(self.backend, &requests)
                    .into_iter()
                    .map(|r| r.map(|resp| resp.texts.into_iter().next().unwrap_or_default()))
                    .collect()
            }
            SamplingMode::Batched => {
                let request = GenerationRequest::from_messages(messages)
                    .with_seed(mix_seed(
                        self.config.seed,
                        &[purpose, &self.question.id, &node_tag, &salt_tag],
                    ))
                    .with_num_samples(count as u32);
                match self.backend.complete(&request) {
                    Ok(resp) => {
                        let mut texts: Vec<Result<String, BackendError>> =
                            resp.texts.into_iter().map(Ok).collect();
                        texts.resize_with(count, || Ok(String::new()));
                        texts.truncate(count);
                        texts
                    }
                    Err(e) => {
                        if self.config.continue_on_error {
                            // One failed batched call loses all samples.
                            (0..count).map(|_| Err(clone_error(&e))).collect()
                        } else {
                            return Err(SearchError::Backend {
                                phase: purpose,
                                source: e,
                            });
                        }
                    }
                }
            }
        };
        let mut texts = Vec::with_capacity(count);
        for response in responses {
            match response {
                Ok(text) => texts.push(Some(text)),
                Err(e) if self.config.continue_on_error => {
                    let _ = e;
                    texts.push(None);
                }
                Err(e) => {
                    return Err(SearchError::Backend {
                        phase: purpose,
                        source: e,
                    })
                }
            }
        }
        Ok(texts)
    }

    fn first_step(&self, reply: &str) -> Option<String> {
        reply
            .split(self.config.step_delimiter.as_str())
            .map(str::trim)
            .find(|s| !s.is_empty())
            .map(str::to_string)
    }

    /// Expands a childless, non-terminal node into up to `k` distinct child
    /// steps. Colliding steps are re-sampled once, then disambiguated with a
    /// suffix, so expansion always yields distinct siblings.
    pub fn expand(&mut self, node: usize) -> Result<Vec<usize>, SearchError> {
        {
            let n = &self.tree.nodes[node];
            if n.terminal || !n.children.is_empty() {
                return Err(SearchError::NodeNotExpandable { node });
            }
        }
        let replies = self.draw_completions(node, self.config.k, "expand", 0)?;
        let mut seen = std::collections::HashSet::new();
        let mut steps = Vec::new();
        for (slot, reply) in replies.into_iter().enumerate() {
            let Some(step) = reply.as_deref().and_then(|r| self.first_step(r)) else {
                continue;
            };
            let step = if seen.contains(&step) {
                let retry = self
                    .draw_completions(node, 1, "expand-retry", slot)?
                    .into_iter()
                    .next()
                    .flatten()
                    .and_then(|r| self.first_step(&r));
                match retry {
                    Some(r) if !seen.contains(&r) => r,
                    _ => format!("{step} (variant {slot})"),
                }
            } else {
                step
            };
            seen.insert(step.clone());
            steps.push(step);
        }
        if steps.is_empty() {
            return Err(SearchError::ExpansionExhausted { node });
        }
        let child_depth = self.tree.nodes[node].depth + 1;
        let ids = steps
            .into_iter()
            .map(|step| {
                let terminal =
                    contains_final_answer_cue(&step) || child_depth >= self.config.max_depth;
                self.tree.add_child(node, step, terminal)
            })
            .collect();
        Ok(ids)
    }

    /// Scores `node` by drawing `l` direct completions of its partial
    /// solution and returning the fraction whose extracted answer matches the
    /// gold answer. Pure with respect to tree statistics: updates nothing.
    pub fn simulate_reward(&self, node: usize) -> Result<f64, SearchError> {
        let completions = self.draw_completions(node, self.config.l, "simulate", 0)?;
        let mut correct = 0usize;
        for completion in &completions {
            let extracted = completion
                .as_deref()
                .and_then(|text| extract_answer(text, self.extractor));
            if let Some(answer) = extracted {
                if answers_equal(&answer, &self.golden, self.config.tolerance) {
                    correct += 1;
                }
            }
        }
        Ok(correct as f64 / self.config.l as f64)
    }

    /// Scores `node` by asking the backend to rate the partial solution.
    /// Replies that state no parseable score fall back to 0.5.
    pub fn self_score(&self, node: usize) -> Result<f64, SearchError> {
        let steps = self.tree.path_steps(node);
        let solution = steps.join(self.config.step_delimiter.as_str());
        let prompt = self.critique.fill(&[
            ("question", self.question.prompt_text.as_str()),
            ("solution", solution.as_str()),
        ]);
        let mut user = Message::user(prompt);
        if let Some(image) = &self.question.image_ref {
            user = user.with_image(image.clone());
        }
        let request = GenerationRequest::from_messages(vec![user]).with_seed(mix_seed(
            self.config.seed,
            &["critique", &self.question.id, &node.to_string()],
        ));
        let reply = match self.backend.complete(&request) {
            Ok(resp) => resp.texts.into_iter().next().unwrap_or_default(),
            Err(e) if self.config.continue_on_error => {
                let _ = e;
                return Ok(0.5);
            }
            Err(e) => {
                return Err(SearchError::Backend {
                    phase: "critique",
                    source: e,
                })
            }
        };
        Ok(parse_score(&reply).unwrap_or(0.5).clamp(0.0, 1.0))
    }

    fn evaluate_and_backprop(&mut self, node: usize) -> Result<(), SearchError> {
        let reward = match self.tree.nodes[node].cached_reward {
            Some(r) => r,
            None => {
                let r = match self.mode {
                    RewardMode::Simulation => self.simulate_reward(node)?,
                    RewardMode::SelfCritique => self.self_score(node)?,
                };
                self.tree.nodes[node].cached_reward = Some(r);
                r
            }
        };
        self.tree.nodes[node].evals += 1;
        self.evaluations += 1;
        backpropagate(&mut self.tree, node, reward);
        Ok(())
    }

    /// One search iteration: walk down, expand when due, evaluate exactly one
    /// node, back up its reward.
    pub fn step(&mut self) -> Result<(), SearchError> {
        let mut node = SearchTree::ROOT;
        loop {
            let current = &self.tree.nodes[node];
            if current.terminal {
                return self.evaluate_and_backprop(node);
            }
            if current.children.is_empty() {
                if current.visits == 0 && node != SearchTree::ROOT {
                    // First arrival at a fresh leaf: score it before growing it.
                    return self.evaluate_and_backprop(node);
                }
                let children = self.expand(node)?;
                return self.evaluate_and_backprop(children[0]);
            }
            node = current
                .children
                .iter()
                .copied()
                .find(|&c| self.tree.nodes[c].visits == 0)
                .unwrap_or_else(|| uct_select(&self.tree, node, self.config.uct_c));
        }
    }

    /// Runs the configured number of iterations.
    pub fn run(&mut self) -> Result<(), SearchError> {
        for _ in 0..self.config.iterations {
            self.step()?;
        }
        Ok(())
    }

    fn rollout_from_terminal(&self, node: usize, padded: bool) -> Rollout {
        let steps: Vec<String> = self
            .tree
            .path_steps(node)
            .into_iter()
            .map(str::to_string)
            .collect();
        let full_text = steps.join(self.config.step_delimiter.as_str());
        Rollout {
            question_id: self.question.id.clone(),
            steps,
            full_text,
            reward_at_leaf: self.tree.nodes[node].mean_reward(),
            leaf: node,
            padded,
        }
    }

    /// Collects the `n` best complete solutions: terminal paths ranked by
    /// mean reward (ties toward older nodes), padded with direct completions
    /// of the best open leaves when the tree holds fewer than `n` terminals.
    pub fn harvest(&self) -> Result<Vec<Rollout>, SearchError> {
        let mut terminals: Vec<usize> = (0..self.tree.nodes.len())
            .filter(|&i| self.tree.nodes[i].terminal)
            .collect();
        sort_by_reward(&self.tree, &mut terminals);

        let mut rollouts: Vec<Rollout> = terminals
            .iter()
            .take(self.config.n)
            .map(|&t| self.rollout_from_terminal(t, false))
            .collect();
        if rollouts.len() == self.config.n {
            return Ok(rollouts);
        }

        let mut frontier: Vec<usize> = (0..self.tree.nodes.len())
            .filter(|&i| !self.tree.nodes[i].terminal && self.tree.nodes[i].children.is_empty())
            .collect();
        sort_by_reward(&self.tree, &mut frontier);

        if frontier.is_empty() {
            if terminals.is_empty() {
                return Err(SearchError::SearchStarved);
            }
            // Everything reached an answer but there are fewer than n paths:
            // cycle the best terminals.
            let mut i = 0;
            while rollouts.len() < self.config.n {
                rollouts.push(self.rollout_from_terminal(terminals[i % terminals.len()], true));
                i += 1;
            }
            return Ok(rollouts);
        }

        let deficit = self.config.n - rollouts.len();
        for d in 0..deficit {
            let node = frontier[d % frontier.len()];
            let completion = self
                .draw_completions(node, 1, "pad", d)?
                .into_iter()
                .next()
                .flatten();
            let Some(completion) = completion else {
                continue; // continue_on_error: emit fewer than n
            };
            let mut steps: Vec<String> = self
                .tree
                .path_steps(node)
                .into_iter()
                .map(str::to_string)
                .collect();
            steps.extend(
                completion
                    .split(self.config.step_delimiter.as_str())
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(str::to_string),
            );
            let full_text = steps.join(self.config.step_delimiter.as_str());
            rollouts.push(Rollout {
                question_id: self.question.id.clone(),
                steps,
                full_text,
                reward_at_leaf: self.tree.nodes[node].mean_reward(),
                leaf: node,
                padded: true,
            });
        }
        Ok(rollouts)
    }
}

fn sort_by_reward(tree: &SearchTree, nodes: &mut [usize]) {
    nodes.sort_by(|&a, &b| {
        tree.nodes[b]
            .mean_reward()
            .partial_cmp(&tree.nodes[a].mean_reward())
            .expect("rewards are finite")
            .then(a.cmp(&b))
    });
}

fn clone_error(e: &BackendError) -> BackendError {
    BackendError::Transport(e.to_string())
}

static SCORE_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)score\s*[:=]?\s*([0-9]*\.?[0-9]+)").unwrap());

fn parse_score(text: &str) -> Option<f64> {
    SCORE_RE
        .captures_iter(text)
        .last()
        .and_then(|c| c[1].parse::<f64>().ok())
}

/// Runs a full search and harvest for one question.
pub fn run_search(
    backend: &dyn Backend,
    question: &Question,
    config: &SearchConfig,
    extractor: &ExtractorConfig,
) -> Result<Vec<Rollout>, SearchError> {
    let mut search = Search::new(backend, question, config.clone(), extractor)?;
    search.run()?;
    search.harvest()
}

/// The ablation baseline: identical search loop, but node rewards come from
/// the model rating its own partial solutions. Returns the answer extracted
/// from the highest-rated complete path, or `None` when no answer could be
/// extracted.
pub fn run_naive_mcts(
    backend: &dyn Backend,
    question: &Question,
    config: &SearchConfig,
    extractor: &ExtractorConfig,
) -> Result<Option<CanonicalAnswer>, SearchError> {
    let mut search = Search::with_mode(
        backend,
        question,
        config.clone(),
        extractor,
        RewardMode::SelfCritique,
    )?;
    search.run()?;
    let mut config_one = search.config.clone();
    config_one.n = 1;
    let search = Search {
        config: config_one,
        ..search
    };
    let rollouts = search.harvest()?;
    Ok(rollouts
        .first()
        .and_then(|r| extract_answer(&r.full_text, search.extractor)))
}

/// Audits the bookkeeping invariants the search maintains: the root's visit
/// count equals the number of completed evaluations, every node's visits
/// equal its own evaluations plus its children's visits, terminal nodes have
/// no children, and all cached rewards lie in [0, 1].
pub fn check_tree_invariants(tree: &SearchTree, evaluations: usize) -> Result<(), String> {
    if tree.nodes[SearchTree::ROOT].visits as usize != evaluations {
        return Err(format!(
            "root visits {} != evaluations {}",
            tree.nodes[SearchTree::ROOT].visits, evaluations
        ));
    }
    for (id, node) in tree.nodes.iter().enumerate() {
        let child_visits: u32 = node.children.iter().map(|&c| tree.nodes[c].visits).sum();
        if node.visits != node.evals + child_visits {
            return Err(format!(
                "node {id}: visits {} != evals {} + child visits {child_visits}",
                node.visits, node.evals
            ));
        }
        if node.terminal && !node.children.is_empty() {
            return Err(format!("terminal node {id} has children"));
        }
        if let Some(r) = node.cached_reward {
            if !(0.0..=1.0).contains(&r) {
                return Err(format!("node {id}: reward {r} outside [0, 1]"));
            }
        }
        for &child in &node.children {
            if tree.nodes[child].parent != Some(id) {
                return Err(format!("node {child} has wrong parent link"));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{toy_questions, Script, ScriptedBackend, StochasticBackend, StochasticProfile};
    use crate::backend::GenerationResponse;

    fn toy_q() -> Question {
        toy_questions(1, 5)[0].clone()
    }

    fn question_with_gold(gold: &str) -> Question {
        Question {
            id: "q-test".into(),
            prompt_text: format!("what is it? <<gold:{gold}>>"),
            image_ref: None,
            golden_answer: gold.to_string(),
            choices: None,
            source: crate::corpus::Source::Other("toy".into()),
            category: None,
            extra: serde_json::Map::new(),
        }
    }

    /// Test backend keyed purely by request seed.
    struct SeedKeyed {
        replies: std::collections::HashMap<u64, String>,
    }

    impl Backend for SeedKeyed {
        fn complete(&self, request: &GenerationRequest) -> Result<GenerationResponse, BackendError> {
            let seed = request.seed.expect("seed-keyed backend needs seeds");
            let reply = self
                .replies
                .get(&seed)
                .unwrap_or_else(|| panic!("no reply for seed {seed}"));
            Ok(GenerationResponse {
                texts: vec![reply.clone(); request.num_samples.max(1) as usize],
                model_id: "seed-keyed".into(),
                usage: None,
            })
        }

        fn id(&self) -> String {
            "seed-keyed".into()
        }
    }

    fn hand_tree() -> SearchTree {
        // Root with two visited children matching the documented worked
        // example: parent N=11, children (Q=0.5, N=10) and (Q=0.4, N=1).
        let mut tree = SearchTree::new();
        let a = tree.add_child(0, "a".into(), false);
        let b = tree.add_child(0, "b".into(), false);
        tree.nodes[0].visits = 11;
        tree.nodes[a].visits = 10;
        tree.nodes[a].total_reward = 5.0;
        tree.nodes[b].visits = 1;
        tree.nodes[b].total_reward = 0.4;
        tree
    }

    #[test]
    fn uct_matches_hand_computed_example() {
        let tree = hand_tree();
        // Scores: 0.5 + 1.414*sqrt(ln 11 / 10) = 1.19 for child 1,
        // 0.4 + 1.414*sqrt(ln 11 / 1) = 2.59 for child 2.
        assert_eq!(uct_select(&tree, 0, 1.414), 2);
        // Greedy (c = 0) flips the choice to the higher-mean child.
        assert_eq!(uct_select(&tree, 0, 0.0), 1);
    }

    #[test]
    fn uct_breaks_ties_toward_lower_index() {
        let mut tree = SearchTree::new();
        let a = tree.add_child(0, "a".into(), false);
        let b = tree.add_child(0, "b".into(), false);
        tree.nodes[0].visits = 4;
        for id in [a, b] {
            tree.nodes[id].visits = 2;
            tree.nodes[id].total_reward = 1.0;
        }
        assert_eq!(uct_select(&tree, 0, 1.414), a);
    }

    #[test]
    fn uct_prefers_unvisited_children() {
        let mut tree = hand_tree();
        let c = tree.add_child(0, "c".into(), false);
        assert_eq!(uct_select(&tree, 0, 1.414), c);
    }

    #[test]
    fn backpropagate_updates_the_whole_path() {
        let mut tree = SearchTree::new();
        let a = tree.add_child(0, "a".into(), false);
        let leaf = tree.add_child(a, "b".into(), true);
        backpropagate(&mut tree, leaf, 0.6);
        backpropagate(&mut tree, leaf, 1.0);
        assert_eq!(tree.nodes[0].visits, 2);
        assert_eq!(tree.nodes[a].visits, 2);
        assert_eq!(tree.nodes[leaf].visits, 2);
        assert!((tree.nodes[leaf].total_reward - 1.6).abs() < 1e-12);
        assert!((tree.nodes[leaf].mean_reward() - 0.8).abs() < 1e-12);
        // Sibling untouched.
        let c = tree.add_child(0, "c".into(), false);
        assert_eq!(tree.nodes[c].visits, 0);
        assert_eq!(tree.nodes[c].mean_reward(), 0.0);
    }

    #[test]
    fn expand_truncates_to_first_step_and_marks_terminals() {
        let question = question_with_gold("7");
        let script = Script::with_default("First consider the shape.\n\nThen measure.\n\nThe answer is 7.");
        let backend = ScriptedBackend::new(script);
        let extractor = ExtractorConfig::rule_based();
        let config = SearchConfig {
            k: 3,
            ..Default::default()
        };
        let mut search = Search::new(&backend, &question, config, &extractor).unwrap();
        let children = search.expand(0).unwrap();
        assert_eq!(children.len(), 3);
        // All three samples gave the same first step; dedup kept them distinct.
        let steps: Vec<&str> = children
            .iter()
            .map(|&c| search.tree().nodes[c].step_text.as_str())
            .collect();
        assert_eq!(steps[0], "First consider the shape.");
        assert!(steps[1].starts_with("First consider the shape."));
        assert_ne!(steps[0], steps[1]);
        assert_ne!(steps[1], steps[2]);
        // A plain reasoning step is not terminal.
        assert!(!search.tree().nodes[children[0]].terminal);
        // Expanding a node that already has children is refused.
        assert!(matches!(
            search.expand(0),
            Err(SearchError::NodeNotExpandable { node: 0 })
        ));
    }

    #[test]
    fn expand_marks_answer_steps_terminal() {
        let question = question_with_gold("7");
        let backend = ScriptedBackend::new(Script::with_default("The answer is 7."));
        let extractor = ExtractorConfig::rule_based();
        let mut search =
            Search::new(&backend, &question, SearchConfig::default(), &extractor).unwrap();
        let children = search.expand(0).unwrap();
        assert!(search.tree().nodes[children[0]].terminal);
    }

    #[test]
    fn expand_forces_terminal_at_max_depth() {
        let question = question_with_gold("7");
        let backend = ScriptedBackend::new(Script::with_default("Keep going.\n\nMore."));
        let extractor = ExtractorConfig::rule_based();
        let config = SearchConfig {
            max_depth: 1,
            ..Default::default()
        };
        let mut search = Search::new(&backend, &question, config, &extractor).unwrap();
        let children = search.expand(0).unwrap();
        assert!(search.tree().nodes[children[0]].terminal, "depth cap must force terminal");
    }

    #[test]
    fn simulate_reward_is_the_exact_correct_fraction() {
        let question = question_with_gold("7");
        let config = SearchConfig {
            l: 5,
            seed: 77,
            ..Default::default()
        };
        // Pin each of the five simulation draws by its derived seed: three
        // correct, two wrong.
        let mut replies = std::collections::HashMap::new();
        for j in 0..5u32 {
            let seed = mix_seed(77, &["simulate", &question.id, "0", "0", &j.to_string()]);
            let text = if j < 3 {
                "The answer is 7."
            } else {
                "The answer is 8."
            };
            replies.insert(seed, text.to_string());
        }
        let backend = SeedKeyed { replies };
        let extractor = ExtractorConfig::rule_based();
        let search = Search::new(&backend, &question, config, &extractor).unwrap();
        let reward = search.simulate_reward(0).unwrap();
        assert_eq!(reward, 0.6);
    }

    #[test]
    fn simulate_reward_degenerate_rates() {
        let question = toy_q();
        let extractor = ExtractorConfig::rule_based();
        for (p, expected) in [(1.0, 1.0), (0.0, 0.0)] {
            let backend = StochasticBackend::new(StochasticProfile {
                p_correct: p,
                seed: 3,
                ..Default::default()
            })
            .unwrap();
            let config = SearchConfig {
                l: 8,
                ..Default::default()
            };
            let search = Search::new(&backend, &question, config, &extractor).unwrap();
            assert_eq!(search.simulate_reward(0).unwrap(), expected);
        }
    }

    #[test]
    fn search_loop_preserves_invariants_and_is_deterministic() {
        let question = toy_q();
        let backend = StochasticBackend::new(StochasticProfile {
            p_correct: 0.5,
            seed: 11,
            ..Default::default()
        })
        .unwrap();
        let extractor = ExtractorConfig::rule_based();
        let config = SearchConfig {
            k: 2,
            l: 2,
            n: 4,
            iterations: 30,
            seed: 9,
            ..Default::default()
        };
        let mut search = Search::new(&backend, &question, config.clone(), &extractor).unwrap();
        for step in 0..config.iterations {
            search.step().unwrap();
            check_tree_invariants(search.tree(), search.evaluations())
                .unwrap_or_else(|e| panic!("after iteration {step}: {e}"));
        }
        assert_eq!(search.evaluations(), 30);
        // Every cached reward is a multiple of 1/l.
        for node in &search.tree().nodes {
            if let Some(r) = node.cached_reward {
                let scaled = r * config.l as f64;
                assert!((scaled - scaled.round()).abs() < 1e-9, "reward {r} not a multiple of 1/l");
            }
        }
        // Same seed, same tree and rollouts.
        let rollouts_a = search.harvest().unwrap();
        let mut rerun = Search::new(&backend, &question, config.clone(), &extractor).unwrap();
        rerun.run().unwrap();
        let rollouts_b = rerun.harvest().unwrap();
        assert_eq!(rollouts_a, rollouts_b);
        assert_eq!(rollouts_a.len(), 4);
        // A different search seed explores differently.
        let mut other = Search::new(
            &backend,
            &question,
            SearchConfig {
                seed: 10,
                ..config
            },
            &extractor,
        )
        .unwrap();
        other.run().unwrap();
        assert_ne!(other.harvest().unwrap(), rollouts_a);
    }

    #[test]
    fn harvest_ranks_terminals_by_reward_then_pads() {
        let question = question_with_gold("7");
        // Every expansion reply concludes immediately, so children of the
        // root are terminal; with k=2 there are two terminal paths and
        // harvest must cycle them to reach n=4.
        let backend = ScriptedBackend::new(Script::with_default("The answer is 7."));
        let extractor = ExtractorConfig::rule_based();
        let config = SearchConfig {
            k: 2,
            l: 2,
            n: 4,
            iterations: 3,
            ..Default::default()
        };
        let mut search = Search::new(&backend, &question, config, &extractor).unwrap();
        search.run().unwrap();
        let rollouts = search.harvest().unwrap();
        assert_eq!(rollouts.len(), 4);
        assert!(!rollouts[0].padded);
        assert!(!rollouts[1].padded);
        assert!(rollouts[2].padded);
        assert!(rollouts[3].padded);
        // Ranked by leaf reward, descending.
        assert!(rollouts[0].reward_at_leaf >= rollouts[1].reward_at_leaf);
    }

    #[test]
    fn harvest_pads_from_bare_root_as_direct_sampling() {
        let question = question_with_gold("7");
        let backend = ScriptedBackend::new(Script::with_default(
            "Work it out.\n\nThe answer is 7.",
        ));
        let extractor = ExtractorConfig::rule_based();
        let config = SearchConfig {
            n: 3,
            iterations: 0,
            ..Default::default()
        };
        let search = Search::new(&backend, &question, config, &extractor).unwrap();
        let rollouts = search.harvest().unwrap();
        assert_eq!(rollouts.len(), 3);
        for r in &rollouts {
            assert!(r.padded);
            assert_eq!(r.steps, vec!["Work it out.", "The answer is 7."]);
            assert_eq!(r.full_text, "Work it out.\n\nThe answer is 7.");
            assert_eq!(r.reward_at_leaf, 0.0);
        }
    }

    #[test]
    fn full_text_round_trips_through_the_delimiter() {
        let question = question_with_gold("7");
        let backend = ScriptedBackend::new(Script::with_default(
            "Step one here.\n\n\nStep two.\n\nThe answer is 7.",
        ));
        let extractor = ExtractorConfig::rule_based();
        let config = SearchConfig {
            n: 1,
            iterations: 0,
            ..Default::default()
        };
        let search = Search::new(&backend, &question, config.clone(), &extractor).unwrap();
        let rollouts = search.harvest().unwrap();
        let rejoined: Vec<&str> = rollouts[0]
            .full_text
            .split(config.step_delimiter.as_str())
            .collect();
        assert_eq!(rejoined, rollouts[0].steps);
    }

    #[test]
    fn naive_mode_returns_best_rated_answer_deterministically() {
        let question = toy_q();
        let backend = StochasticBackend::new(StochasticProfile {
            p_correct: 1.0,
            seed: 21,
            ..Default::default()
        })
        .unwrap();
        let extractor = ExtractorConfig::rule_based();
        let config = SearchConfig {
            k: 2,
            iterations: 8,
            critique_template: crate::templates::DEFAULT_CRITIQUE_MOCK.to_string(),
            ..Default::default()
        };
        let a = run_naive_mcts(&backend, &question, &config, &extractor).unwrap();
        let b = run_naive_mcts(&backend, &question, &config, &extractor).unwrap();
        assert_eq!(a, b);
        let gold = canonicalize(&question.golden_answer).unwrap();
        assert!(answers_equal(&a.unwrap(), &gold, 1e-9));
    }

    #[test]
    fn config_validation_rejects_zeroes() {
        let question = toy_q();
        let backend = ScriptedBackend::new(Script::default());
        let extractor = ExtractorConfig::rule_based();
        for config in [
            SearchConfig {
                k: 0,
                ..Default::default()
            },
            SearchConfig {
                l: 0,
                ..Default::default()
            },
            SearchConfig {
                uct_c: -1.0,
                ..Default::default()
            },
        ] {
            assert!(matches!(
                Search::new(&backend, &question, config, &extractor),
                Err(SearchError::InvalidConfig(_))
            ));
        }
    }

    #[test]
    fn backend_errors_surface_unless_tolerated() {
        let question = question_with_gold("7");
        let backend = ScriptedBackend::new(Script::default()); // no entries at all
        let extractor = ExtractorConfig::rule_based();
        let mut search = Search::new(
            &backend,
            &question,
            SearchConfig::default(),
            &extractor,
        )
        .unwrap();
        assert!(matches!(
            search.step(),
            Err(SearchError::Backend { phase: "expand", .. })
        ));
        // With continue_on_error the expansion has no usable steps instead.
        let mut tolerant = Search::new(
            &backend,
            &question,
            SearchConfig {
                continue_on_error: true,
                ..Default::default()
            },
            &extractor,
        )
        .unwrap();
        assert!(matches!(
            tolerant.step(),
            Err(SearchError::ExpansionExhausted { node: 0 })
        ));
    }
}
