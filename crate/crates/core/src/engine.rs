//! The engine: registries, sources, sessions and plan runs behind one
//! synchronous API shared by the service and the CLI.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};

use crate::clock::{Clock, SystemClock};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::executor::{ExecOptions, ExecutionRecord, Executor, NodeCache, PlanRun, PlanStatus};
use crate::operators::catalog::bootstrap;
use crate::persist::write_atomic;
use crate::planner::{
    explain_costs, instantiate, optimize, validate, CostContext, CostModel, CostRow, DataPlan, Objective,
    OptimizeOptions, Refiner, ValidationReport,
};
use crate::registry::{
    DataRegistry, Level, MetadataEntry, OperatorDescriptor, OperatorRegistry, SearchHit, SourceDescriptor,
};
use crate::session::{Session, StreamMessage, DEFAULT_NAMESPACE};
use crate::sources::{SourceManager, UserSource};
use crate::value::{Table, Value};

const DATA_REGISTRY_FILE: &str = "data_registry.json";
const OPERATOR_REGISTRY_FILE: &str = "operator_registry.json";
const NODE_CACHE_FILE: &str = "node_cache.json";
const LLM_CACHE_FILE: &str = "llm_cache.json";
const SESSIONS_FILE: &str = "sessions.json";

/// A question lowered to an executable plan.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PlannedQuery {
    pub refined: DataPlan,
    pub optimized: DataPlan,
    /// Alternatives dropped during refinement, with the reason.
    pub notes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub plan_id: String,
    pub session_id: String,
    pub status: PlanStatus,
}

/// A plan with its execution record, as served by `GET /plans/{id}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PlanView {
    pub plan_id: String,
    pub session_id: String,
    pub plan: DataPlan,
    pub record: ExecutionRecord,
}

#[derive(Serialize)]
struct SessionSnapshot {
    session_id: String,
    namespace: String,
    created_at_ms: i64,
    messages: Vec<StreamMessage>,
}

pub struct Engine {
    config: Config,
    operators: OperatorRegistry,
    sources: SourceManager,
    cost_model: CostModel,
    cache: NodeCache,
    clock: Arc<dyn Clock>,
    sessions: RwLock<BTreeMap<String, Arc<Session>>>,
    runs: RwLock<BTreeMap<String, Arc<Mutex<PlanRun>>>>,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine").field("sources", &self.sources).finish()
    }
}

impl Engine {
    pub fn open(config: Config) -> Result<Self> {
        Self::open_with_clock(config, Arc::new(SystemClock))
    }

    pub fn open_with_clock(config: Config, clock: Arc<dyn Clock>) -> Result<Self> {
        let state = config.state_dir.as_ref().map(|d| config.resolve(d));
        let users = UserSource::new(clock.clone(), config.user_store.as_ref().map(|p| config.resolve(p)))?;
        let registry = match state
            .as_ref()
            .map(|d| d.join(DATA_REGISTRY_FILE))
            .filter(|p| p.exists())
        {
            Some(p) => DataRegistry::load(&p)?,
            None => DataRegistry::new(),
        };
        let sources = SourceManager::new(Arc::new(registry), config.base_dir.clone(), Arc::new(users));
        for desc in &config.sources {
            if sources.registry().source(&desc.source_id).is_some() {
                sources.connect(desc)?;
            } else {
                sources.register(desc.clone())?;
            }
        }
        for desc in sources.registry().list_sources() {
            if !config.sources.iter().any(|d| d.source_id == desc.source_id) {
                if let Err(e) = sources.connect(&desc) {
                    tracing::warn!("persisted source `{}` could not be reconnected: {e}", desc.source_id);
                }
            }
        }
        if let Some(id) = &config.default_llm {
            sources.llm(id)?;
            sources.set_default_llm(id);
        }
        let cost_model = match &config.cost_model {
            Some(p) => CostModel::load(&config.resolve(p))?,
            None => CostModel::default(),
        };
        let engine = Engine {
            operators: bootstrap(),
            sources,
            cost_model,
            cache: NodeCache::default(),
            clock,
            sessions: RwLock::default(),
            runs: RwLock::default(),
            config,
        };
        if let Some(dir) = &state {
            engine.restore_caches(dir)?;
        }
        if engine.config.sync_on_start {
            for d in engine.config.sources.clone() {
                engine.sources.sync(&d.source_id)?;
            }
        }
        Ok(engine)
    }

    fn restore_caches(&self, dir: &std::path::Path) -> Result<()> {
        let nodes = dir.join(NODE_CACHE_FILE);
        if nodes.exists() {
            self.cache
                .restore(serde_json::from_str(&std::fs::read_to_string(nodes)?)?);
        }
        let llm = dir.join(LLM_CACHE_FILE);
        if llm.exists() {
            let all: BTreeMap<String, BTreeMap<String, Table>> = serde_json::from_str(&std::fs::read_to_string(llm)?)?;
            for (id, entries) in all {
                if let Ok(src) = self.sources.llm(&id) {
                    src.restore_cache(entries);
                }
            }
        }
        Ok(())
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn operators(&self) -> &OperatorRegistry {
        &self.operators
    }

    pub fn sources(&self) -> &SourceManager {
        &self.sources
    }

    pub fn node_cache(&self) -> &NodeCache {
        &self.cache
    }

    pub fn cost_model(&self) -> &CostModel {
        &self.cost_model
    }

    fn state_dir(&self) -> Option<PathBuf> {
        self.config.state_dir.as_ref().map(|d| self.config.resolve(d))
    }

    /// Writes registries, caches and stream snapshots to the state dir.
    pub fn persist(&self) -> Result<()> {
        let Some(dir) = self.state_dir() else {
            return Ok(());
        };
        self.sources.registry().save(&dir.join(DATA_REGISTRY_FILE))?;
        self.operators.save(&dir.join(OPERATOR_REGISTRY_FILE))?;
        write_atomic(
            &dir.join(NODE_CACHE_FILE),
            serde_json::to_string(&self.cache.snapshot())?.as_bytes(),
        )?;
        let llm: BTreeMap<String, BTreeMap<String, Table>> = self
            .sources
            .llm_sources()
            .iter()
            .map(|s| (s.source_id().to_string(), s.cache_snapshot()))
            .collect();
        write_atomic(&dir.join(LLM_CACHE_FILE), serde_json::to_string(&llm)?.as_bytes())?;
        let sessions: Vec<SessionSnapshot> = self
            .sessions
            .read()
            .unwrap()
            .values()
            .map(|s| SessionSnapshot {
                session_id: s.session_id.clone(),
                namespace: s.namespace.clone(),
                created_at_ms: s.created_at_ms,
                messages: s.main().read_after(0),
            })
            .collect();
        write_atomic(&dir.join(SESSIONS_FILE), serde_json::to_string(&sessions)?.as_bytes())
    }

    // sessions

    pub fn create_session(&self, namespace: Option<&str>) -> Arc<Session> {
        let s = Arc::new(Session::new(
            uuid::Uuid::new_v4().to_string(),
            namespace.unwrap_or(DEFAULT_NAMESPACE),
            self.clock.now_ms(),
        ));
        self.sessions.write().unwrap().insert(s.session_id.clone(), s.clone());
        s
    }

    pub fn session(&self, id: &str) -> Result<Arc<Session>> {
        self.sessions
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| Error::not_found("session", id))
    }

    // planning

    fn cost_context<'a>(&'a self, session: Option<&'a Session>) -> CostContext<'a> {
        CostContext {
            model: &self.cost_model,
            registry: Some(self.sources.registry().as_ref()),
            users: Some((
                self.sources.users().as_ref(),
                session.map_or(DEFAULT_NAMESPACE, |s| s.namespace.as_str()),
            )),
        }
    }

    pub fn objective(&self, objective: Option<Objective>) -> Objective {
        objective.unwrap_or(self.config.default_objective)
    }

    pub fn instantiate(&self, operator_id: &str, attributes: BTreeMap<String, Value>) -> Result<DataPlan> {
        instantiate(&self.operators, operator_id, attributes)
    }

    pub fn refine_plan(&self, plan: DataPlan) -> Result<(DataPlan, Vec<String>)> {
        Refiner::new(&self.operators, &self.sources, plan, self.config.max_depth).run()
    }

    pub fn optimize_plan(
        &self,
        plan: &DataPlan,
        objective: Option<Objective>,
        rewrites: bool,
        session: Option<&Session>,
    ) -> Result<DataPlan> {
        let opts = OptimizeOptions {
            rewrites,
            default_llm: self.sources.default_llm(),
        };
        optimize(
            plan,
            &self.operators,
            self.cost_context(session),
            self.objective(objective),
            &opts,
        )
    }

    pub fn validate_plan(&self, plan: &DataPlan) -> ValidationReport {
        validate(plan, &self.operators)
    }

    pub fn explain(
        &self,
        plan: &DataPlan,
        objective: Option<Objective>,
        session: Option<&Session>,
    ) -> Result<Vec<CostRow>> {
        explain_costs(plan, self.cost_context(session), self.objective(objective))
    }

    /// instantiate(question_answer), refine, optimize.
    pub fn plan_question(
        &self,
        question: &str,
        objective: Option<Objective>,
        session: Option<&Session>,
    ) -> Result<PlannedQuery> {
        let root = self.instantiate(
            "question_answer",
            BTreeMap::from([("question".to_string(), Value::from(question))]),
        )?;
        let (refined, notes) = self.refine_plan(root)?;
        let optimized = self.optimize_plan(&refined, objective, true, session)?;
        Ok(PlannedQuery {
            refined,
            optimized,
            notes,
        })
    }

    // execution

    fn executor(&self, options: ExecOptions) -> Executor<'_> {
        Executor::new(&self.operators, &self.sources, &self.cache, options)
    }

    fn start(&self, session: &Session, plan: DataPlan, options: ExecOptions) -> Result<RunSummary> {
        let plan_id = uuid::Uuid::new_v4().to_string();
        let run = self.executor(options).execute(&plan_id, plan, session)?;
        let summary = RunSummary {
            plan_id: plan_id.clone(),
            session_id: session.session_id.clone(),
            status: run.record.status,
        };
        self.runs.write().unwrap().insert(plan_id, Arc::new(Mutex::new(run)));
        Ok(summary)
    }

    /// Plans a question and runs it on the session until it finishes or
    /// waits for the user.
    pub fn query(&self, session_id: &str, question: &str, objective: Option<Objective>) -> Result<RunSummary> {
        let session = self.session(session_id)?;
        let planned = self.plan_question(question, objective, Some(&session))?;
        self.start(&session, planned.optimized, self.config.executor)
    }

    /// Runs a pre-built plan, optimizing it first when it still has
    /// alternatives. Without a session, a fresh one is created.
    pub fn execute_plan(
        &self,
        session_id: Option<&str>,
        plan: DataPlan,
        objective: Option<Objective>,
        options: Option<ExecOptions>,
    ) -> Result<RunSummary> {
        let session = match session_id {
            Some(id) => self.session(id)?,
            None => self.create_session(None),
        };
        let report = self.validate_plan(&plan);
        if !report.is_empty() {
            return Err(Error::InvalidPlan(report));
        }
        let plan = if plan.alternatives.is_empty() {
            plan
        } else {
            self.optimize_plan(&plan, objective, true, Some(&session))?
        };
        self.start(&session, plan, options.unwrap_or(self.config.executor))
    }

    /// Resumes the run waiting on `prompt_id` in this session.
    pub fn answer(&self, session_id: &str, prompt_id: &str, answer: &serde_json::Value) -> Result<RunSummary> {
        let session = self.session(session_id)?;
        let run = self
            .runs
            .read()
            .unwrap()
            .values()
            .find(|r| {
                let r = r.lock().unwrap();
                r.session_id == session_id && r.waiting_prompts().iter().any(|p| p == prompt_id)
            })
            .cloned()
            .ok_or_else(|| Error::not_found("prompt", prompt_id))?;
        let mut run = run.lock().unwrap();
        self.executor(self.config.executor)
            .resume_with_answer(&mut run, &session, prompt_id, answer)?;
        Ok(RunSummary {
            plan_id: run.plan_id.clone(),
            session_id: session_id.to_string(),
            status: run.record.status,
        })
    }

    pub fn plan_view(&self, plan_id: &str) -> Result<PlanView> {
        let run = self
            .runs
            .read()
            .unwrap()
            .get(plan_id)
            .cloned()
            .ok_or_else(|| Error::not_found("plan", plan_id))?;
        let run = run.lock().unwrap();
        Ok(PlanView {
            plan_id: run.plan_id.clone(),
            session_id: run.session_id.clone(),
            plan: run.plan.clone(),
            record: run.record.clone(),
        })
    }

    // registries

    pub fn search(&self, query: &str, level: Option<Level>, k: usize) -> Vec<SearchHit> {
        self.sources.registry().search_metadata(query, level, k)
    }

    pub fn list_sources(&self) -> Vec<SourceDescriptor> {
        self.sources.registry().list_sources()
    }

    pub fn register_source(&self, desc: SourceDescriptor) -> Result<String> {
        let id = self.sources.register(desc)?;
        self.persist()?;
        Ok(id)
    }

    pub fn sync_source(&self, source_id: &str) -> Result<Vec<MetadataEntry>> {
        if self.sources.registry().source(source_id).is_none() {
            return Err(Error::not_found("source", source_id));
        }
        let entries = self.sources.sync(source_id)?;
        self.persist()?;
        Ok(entries)
    }

    pub fn list_operators(&self) -> Vec<OperatorDescriptor> {
        self.operators.list()
    }
}
