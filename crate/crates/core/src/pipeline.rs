//! Chunked task graphs with resource-class exclusion, plus two executors
//! driving one dispatcher: a threaded one and a discrete-event simulator.
//!
//! Classes map to tokens: ingress copy, egress copy and compute each hold one
//! token; a mixed task holds all three.

use std::collections::VecDeque;
use std::fmt;
use std::sync::mpsc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of chunk buffers in flight.
pub const SLOTS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StageClass {
    IngressCopy,
    EgressCopy,
    Compute,
    Mixed,
}

impl StageClass {
    fn tokens(self) -> u8 {
        match self {
            StageClass::IngressCopy => 0b001,
            StageClass::EgressCopy => 0b010,
            StageClass::Compute => 0b100,
            StageClass::Mixed => 0b111,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            StageClass::IngressCopy => "ingress",
            StageClass::EgressCopy => "egress",
            StageClass::Compute => "compute",
            StageClass::Mixed => "mixed",
        }
    }
}

impl fmt::Display for StageClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GraphKind {
    Refactor,
    Reconstruct,
}

impl GraphKind {
    /// Per-chunk chain: (label, class).
    pub fn stages(self) -> &'static [(&'static str, StageClass)] {
        match self {
            GraphKind::Refactor => &[
                ("I", StageClass::IngressCopy),
                ("Z", StageClass::Compute),
                ("L", StageClass::Mixed),
                ("S", StageClass::EgressCopy),
            ],
            GraphKind::Reconstruct => &[
                ("X", StageClass::Mixed),
                ("I", StageClass::IngressCopy),
                ("Z", StageClass::Compute),
                ("O", StageClass::EgressCopy),
            ],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub id: usize,
    pub chunk: usize,
    pub stage: usize,
    pub label: &'static str,
    pub class: StageClass,
}

impl Task {
    /// Buffer slot this chunk occupies.
    pub fn slot(&self) -> usize {
        self.chunk % SLOTS
    }
}

#[derive(Clone, Debug)]
pub struct PipelineGraph {
    kind: GraphKind,
    num_chunks: usize,
    tasks: Vec<Task>,
    edges: Vec<(usize, usize)>,
    preds: Vec<Vec<usize>>,
    succs: Vec<Vec<usize>>,
}

impl PipelineGraph {
    fn new(kind: GraphKind, num_chunks: usize) -> Result<Self> {
        if num_chunks == 0 {
            return Err(Error::Config("pipeline needs at least one chunk".into()));
        }
        let stages = kind.stages();
        let tasks = (0..num_chunks)
            .flat_map(|chunk| {
                stages.iter().enumerate().map(move |(stage, &(label, class))| Task {
                    id: chunk * stages.len() + stage,
                    chunk,
                    stage,
                    label,
                    class,
                })
            })
            .collect();
        Ok(PipelineGraph {
            kind,
            num_chunks,
            tasks,
            edges: Vec::new(),
            preds: vec![Vec::new(); num_chunks * stages.len()],
            succs: vec![Vec::new(); num_chunks * stages.len()],
        })
    }

    fn add_edge(&mut self, from: (usize, usize), to: (usize, usize)) {
        let (a, b) = (self.task_id(from.0, from.1), self.task_id(to.0, to.1));
        if !self.preds[b].contains(&a) {
            self.edges.push((a, b));
            self.preds[b].push(a);
            self.succs[a].push(b);
        }
    }

    fn add_chains(&mut self) {
        let stages = self.kind.stages().len();
        for k in 0..self.num_chunks {
            for s in 1..stages {
                self.add_edge((k, s - 1), (k, s));
            }
            if k + 1 < self.num_chunks {
                for s in 0..stages {
                    self.add_edge((k, s), (k + 1, s));
                }
            }
        }
    }

    pub fn kind(&self) -> GraphKind {
        self.kind
    }

    pub fn num_chunks(&self) -> usize {
        self.num_chunks
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn task(&self, id: usize) -> &Task {
        &self.tasks[id]
    }

    pub fn task_id(&self, chunk: usize, stage: usize) -> usize {
        chunk * self.kind.stages().len() + stage
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn preds(&self, id: usize) -> &[usize] {
        &self.preds[id]
    }

    pub fn has_edge(&self, from: (usize, usize), to: (usize, usize)) -> bool {
        self.preds[self.task_id(to.0, to.1)].contains(&self.task_id(from.0, from.1))
    }

    /// Kahn's algorithm.
    pub fn is_acyclic(&self) -> bool {
        let mut indeg: Vec<usize> = self.preds.iter().map(Vec::len).collect();
        let mut queue: VecDeque<usize> = (0..indeg.len()).filter(|&i| indeg[i] == 0).collect();
        let mut seen = 0;
        while let Some(t) = queue.pop_front() {
            seen += 1;
            for &s in &self.succs[t] {
                indeg[s] -= 1;
                if indeg[s] == 0 {
                    queue.push_back(s);
                }
            }
        }
        seen == self.tasks.len()
    }
}

/// I → Z → L → S per chunk; I_{k+1} → L_k; S_k → I_{k+3}.
pub fn build_refactor_graph(num_chunks: usize) -> Result<PipelineGraph> {
    let mut g = PipelineGraph::new(GraphKind::Refactor, num_chunks)?;
    g.add_chains();
    for k in 0..num_chunks {
        if k + 1 < num_chunks {
            g.add_edge((k + 1, 0), (k, 2));
        }
        if k + SLOTS < num_chunks {
            g.add_edge((k, 3), (k + SLOTS, 0));
        }
    }
    Ok(g)
}

/// X → I → Z → O per chunk; X_k → I_{k+1}; X_{k+1} → O_k; O_k → X_{k+3}.
pub fn build_reconstruct_graph(num_chunks: usize) -> Result<PipelineGraph> {
    let mut g = PipelineGraph::new(GraphKind::Reconstruct, num_chunks)?;
    g.add_chains();
    for k in 0..num_chunks {
        if k + 1 < num_chunks {
            g.add_edge((k, 0), (k + 1, 1));
            g.add_edge((k + 1, 0), (k, 3));
        }
        if k + SLOTS < num_chunks {
            g.add_edge((k, 3), (k + SLOTS, 0));
        }
    }
    Ok(g)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scheduler {
    Pipelined,
    Sequential,
}

impl std::str::FromStr for Scheduler {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "on" | "pipelined" => Ok(Scheduler::Pipelined),
            "off" | "sequential" => Ok(Scheduler::Sequential),
            _ => Err(Error::Config(format!("unknown scheduler '{s}'"))),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum TaskState {
    Waiting,
    Running,
    Done,
}

/// Token bookkeeping shared by both executors.
struct Dispatcher<'g> {
    graph: &'g PipelineGraph,
    scheduler: Scheduler,
    missing: Vec<usize>,
    state: Vec<TaskState>,
    busy: u8,
    running: usize,
    done: usize,
    halted: bool,
}

impl<'g> Dispatcher<'g> {
    fn new(graph: &'g PipelineGraph, scheduler: Scheduler) -> Self {
        Dispatcher {
            graph,
            scheduler,
            missing: graph.preds.iter().map(Vec::len).collect(),
            state: vec![TaskState::Waiting; graph.tasks.len()],
            busy: 0,
            running: 0,
            done: 0,
            halted: false,
        }
    }

    fn priority(t: &Task) -> (bool, usize, usize) {
        (t.class != StageClass::Mixed, t.chunk, t.stage)
    }

    /// Tasks to launch now, in launch order.
    fn dispatch(&mut self) -> Vec<usize> {
        if self.halted {
            return Vec::new();
        }
        let mut ready: Vec<&Task> = self
            .graph
            .tasks
            .iter()
            .filter(|t| self.state[t.id] == TaskState::Waiting && self.missing[t.id] == 0)
            .collect();
        ready.sort_by_key(|t| Self::priority(t));
        let mut launched = Vec::new();
        let mut reserved = 0u8;
        for t in ready {
            if self.scheduler == Scheduler::Sequential && self.running > 0 {
                break;
            }
            let need = t.class.tokens();
            if need & (self.busy | reserved) == 0 {
                self.busy |= need;
                self.running += 1;
                self.state[t.id] = TaskState::Running;
                launched.push(t.id);
            } else {
                reserved |= need;
            }
        }
        launched
    }

    fn complete(&mut self, id: usize) {
        debug_assert!(self.state[id] == TaskState::Running);
        self.state[id] = TaskState::Done;
        self.busy &= !self.graph.tasks[id].class.tokens();
        self.running -= 1;
        self.done += 1;
        for &s in &self.graph.succs[id] {
            self.missing[s] -= 1;
        }
    }

    /// Stop launching; running tasks still drain.
    fn halt(&mut self, id: usize) {
        self.state[id] = TaskState::Done;
        self.busy &= !self.graph.tasks[id].class.tokens();
        self.running -= 1;
        self.halted = true;
    }

    fn all_done(&self) -> bool {
        self.done == self.graph.tasks.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub task: usize,
    pub chunk: usize,
    pub class: StageClass,
    pub start_ns: u64,
    pub end_ns: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionTrace {
    pub entries: Vec<TraceEntry>,
}

impl ExecutionTrace {
    fn finish(mut entries: Vec<TraceEntry>) -> Self {
        entries.sort_by_key(|e| (e.start_ns, e.task));
        ExecutionTrace { entries }
    }

    pub fn makespan(&self) -> u64 {
        let start = self.entries.iter().map(|e| e.start_ns).min().unwrap_or(0);
        let end = self.entries.iter().map(|e| e.end_ns).max().unwrap_or(0);
        end - start
    }

    /// `task,chunk,class,start_ns,end_ns`, one line per task, with header.
    pub fn to_csv(&self, graph: &PipelineGraph) -> String {
        let mut out = String::from("task,chunk,class,start_ns,end_ns\n");
        for e in &self.entries {
            let t = graph.task(e.task);
            out.push_str(&format!(
                "{}{},{},{},{},{}\n",
                t.label, e.chunk, e.chunk, e.class, e.start_ns, e.end_ns
            ));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    ClassOverlap { a: usize, b: usize },
    MixedOverlap { mixed: usize, other: usize },
    DependencyInversion { pred: usize, succ: usize },
    Missing { task: usize },
    Duplicate { task: usize },
    Malformed { task: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::ClassOverlap { a, b } => write!(f, "tasks {a} and {b} share a class and overlap"),
            Violation::MixedOverlap { mixed, other } => {
                write!(f, "mixed task {mixed} overlaps task {other}")
            }
            Violation::DependencyInversion { pred, succ } => {
                write!(f, "task {succ} started before predecessor {pred} ended")
            }
            Violation::Missing { task } => write!(f, "task {task} missing from trace"),
            Violation::Duplicate { task } => write!(f, "task {task} appears twice"),
            Violation::Malformed { task } => write!(f, "task {task} ends before it starts or is unknown"),
        }
    }
}

/// Check exclusion and dependency rules over a complete trace.
pub fn validate_trace(graph: &PipelineGraph, trace: &ExecutionTrace) -> std::result::Result<(), Vec<Violation>> {
    let mut violations = Vec::new();
    let n = graph.tasks.len();
    let mut at: Vec<Option<&TraceEntry>> = vec![None; n];
    for e in &trace.entries {
        if e.task >= n || e.end_ns < e.start_ns || graph.tasks[e.task].class != e.class {
            violations.push(Violation::Malformed { task: e.task });
            continue;
        }
        if at[e.task].is_some() {
            violations.push(Violation::Duplicate { task: e.task });
        } else {
            at[e.task] = Some(e);
        }
    }
    for (task, slot) in at.iter().enumerate() {
        if slot.is_none() {
            violations.push(Violation::Missing { task });
        }
    }
    let entries: Vec<&TraceEntry> = at.iter().flatten().copied().collect();
    for (i, a) in entries.iter().enumerate() {
        for b in &entries[i + 1..] {
            let overlap = a.start_ns < b.end_ns && b.start_ns < a.end_ns;
            if !overlap {
                continue;
            }
            if a.class == StageClass::Mixed || b.class == StageClass::Mixed {
                let (mixed, other) = if a.class == StageClass::Mixed { (a.task, b.task) } else { (b.task, a.task) };
                violations.push(Violation::MixedOverlap { mixed, other });
            } else if a.class == b.class {
                violations.push(Violation::ClassOverlap { a: a.task, b: b.task });
            }
        }
    }
    for &(pred, succ) in &graph.edges {
        if let (Some(p), Some(s)) = (at[pred], at[succ]) {
            if p.end_ns > s.start_ns {
                violations.push(Violation::DependencyInversion { pred, succ });
            }
        }
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

/// Work performed for each task by the threaded executor.
pub trait StageRunner: Sync {
    fn run(&self, task: &Task) -> Result<()>;
}

impl<F: Fn(&Task) -> Result<()> + Sync> StageRunner for F {
    fn run(&self, task: &Task) -> Result<()> {
        self(task)
    }
}

fn stage_failure(task: &Task, err: Error) -> Error {
    match err {
        e @ Error::StageFailure { .. } => e,
        other => Error::StageFailure {
            chunk: task.chunk,
            stage: task.label,
            source: Box::new(other),
        },
    }
}

/// Run every task on worker threads under the dispatcher's token rules.
///
/// On failure nothing new is launched; running tasks drain and the error of
/// the lowest failing chunk is returned.
pub fn execute<R: StageRunner>(graph: &PipelineGraph, runner: &R, scheduler: Scheduler) -> Result<ExecutionTrace> {
    let origin = Instant::now();
    let mut dispatcher = Dispatcher::new(graph, scheduler);
    let mut entries = Vec::with_capacity(graph.tasks.len());
    let mut failures: Vec<(usize, usize, Error)> = Vec::new();
    std::thread::scope(|scope| {
        let (tx, rx) = mpsc::channel::<(usize, u64, u64, Result<()>)>();
        let launch = |ids: Vec<usize>| {
            for id in ids {
                let tx = tx.clone();
                let task = graph.tasks[id];
                scope.spawn(move || {
                    let start = origin.elapsed().as_nanos() as u64;
                    let res = runner.run(&task);
                    let end = origin.elapsed().as_nanos() as u64;
                    let _ = tx.send((id, start, end, res));
                });
            }
        };
        launch(dispatcher.dispatch());
        while dispatcher.running > 0 {
            let (id, start, end, res) = rx.recv().expect("worker channel closed");
            let task = graph.tasks[id];
            match res {
                Ok(()) => {
                    entries.push(TraceEntry {
                        task: id,
                        chunk: task.chunk,
                        class: task.class,
                        start_ns: start,
                        end_ns: end,
                    });
                    dispatcher.complete(id);
                }
                Err(e) => {
                    failures.push((task.chunk, task.stage, stage_failure(&task, e)));
                    dispatcher.halt(id);
                }
            }
            launch(dispatcher.dispatch());
        }
    });
    if let Some((_, _, err)) = failures.into_iter().min_by_key(|(c, s, _)| (*c, *s)) {
        return Err(err);
    }
    debug_assert!(dispatcher.all_done());
    Ok(ExecutionTrace::finish(entries))
}

/// Discrete-event run with the given per-task latency (in ns).
pub fn simulate(graph: &PipelineGraph, scheduler: Scheduler, latency: impl Fn(&Task) -> u64) -> ExecutionTrace {
    let mut dispatcher = Dispatcher::new(graph, scheduler);
    let mut now = 0u64;
    // (end time, task, start time)
    let mut running: Vec<(u64, usize, u64)> = Vec::new();
    let mut entries = Vec::with_capacity(graph.tasks.len());
    loop {
        for id in dispatcher.dispatch() {
            running.push((now + latency(&graph.tasks[id]), id, now));
        }
        if running.is_empty() {
            break;
        }
        let next = running.iter().map(|r| r.0).min().unwrap();
        now = next;
        running.sort_by_key(|r| (r.0, r.1));
        while running.first().is_some_and(|r| r.0 == now) {
            let (end, id, start) = running.remove(0);
            let t = &graph.tasks[id];
            entries.push(TraceEntry {
                task: id,
                chunk: t.chunk,
                class: t.class,
                start_ns: start,
                end_ns: end,
            });
            dispatcher.complete(id);
        }
    }
    ExecutionTrace::finish(entries)
}
