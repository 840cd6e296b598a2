"""Pipeline model: validated specs, runs, stage results, logs, metrics.

A pipeline document is one ``pipeline "<name>" { ... }`` block holding an
optional ``trigger`` block plus ordered ``stage`` blocks. Stage bodies
come in four shapes:

* ``checkout = true`` — pull the triggering revision into the workspace
* ``run = [commands]`` — sequential shell steps
* ``job "<name>" { run = [...] }`` blocks (two or more) — parallel jobs
* ``target = "<name>"`` + ``files = [...]`` — copy files to a deploy target

Any stage can carry an ``approval { prompt, timeout }`` gate, which holds
the run in ``waiting_approval`` before the stage body executes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from . import dsl, scm
from .dsl import ValidationError

QUEUED = "queued"
RUNNING = "running"
WAITING_APPROVAL = "waiting_approval"
SUCCEEDED = "succeeded"
FAILED = "failed"
ABORTED = "aborted"

PENDING = "pending"
SKIPPED = "skipped"

TERMINAL_STATES = {SUCCEEDED, FAILED, ABORTED}

ALLOWED_TRANSITIONS = {
    (QUEUED, RUNNING),
    (RUNNING, WAITING_APPROVAL),
    (WAITING_APPROVAL, RUNNING),
    (WAITING_APPROVAL, ABORTED),
    (RUNNING, SUCCEEDED),
    (RUNNING, FAILED),
    (RUNNING, ABORTED),
}

OUTCOME_TEXT = {SUCCEEDED: "SUCCESS", FAILED: "FAILURE", ABORTED: "ABORTED"}

DEFAULT_APPROVAL_TIMEOUT_S = 3600.0
DEFAULT_POLL_INTERVAL_S = 30.0


class RunNotTerminal(Exception):
    pass


# --- Spec ----------------------------------------------------------------


@dataclass(frozen=True)
class CheckoutBody:
    pass


@dataclass(frozen=True)
class StepsBody:
    commands: tuple


@dataclass(frozen=True)
class JobSpec:
    name: str
    commands: tuple


@dataclass(frozen=True)
class ParallelBody:
    jobs: tuple


@dataclass(frozen=True)
class DeployBody:
    target: str
    files: tuple


@dataclass(frozen=True)
class ApprovalGateSpec:
    prompt: str = "Approve?"
    timeout_s: float = DEFAULT_APPROVAL_TIMEOUT_S


@dataclass(frozen=True)
class StageSpec:
    name: str
    body: object
    approval: ApprovalGateSpec = None
    ephemeral_env: bool = False
    line: int = field(default=0, compare=False)
    col: int = field(default=0, compare=False)


@dataclass(frozen=True)
class TriggerSpec:
    poll: bool = False
    webhook: bool = False
    repo: scm.RepoRef = None
    interval_s: float = DEFAULT_POLL_INTERVAL_S


@dataclass(frozen=True)
class PipelineSpec:
    name: str
    trigger: TriggerSpec
    stages: tuple

    def stage_names(self):
        return [s.name for s in self.stages]


def _literal(attr: dsl.Attribute, kinds, what: str):
    value = attr.value
    if isinstance(value, dsl.Str):
        if value.interpolations:
            raise ValidationError(
                f"{what} must be a plain string", attr.line, attr.col
            )
        result = value.text
    elif isinstance(value, dsl.Num):
        result = value.value
    elif isinstance(value, dsl.Bool):
        result = value.value
    elif isinstance(value, dsl.ListExpr):
        result = []
        for item in value.items:
            if not isinstance(item, dsl.Str) or item.interpolations:
                raise ValidationError(
                    f"{what} must be a list of plain strings", attr.line, attr.col
                )
            result.append(item.text)
    else:
        raise ValidationError(f"{what} must be a literal", attr.line, attr.col)
    if not isinstance(result, kinds):
        raise ValidationError(
            f"{what} has the wrong type", attr.line, attr.col
        )
    return result


def _parse_trigger(block: dsl.Block, base_dir: Path) -> TriggerSpec:
    poll = webhook = False
    repo_location = None
    kind = "dir"
    branch = "main"
    interval = DEFAULT_POLL_INTERVAL_S
    for item in block.body:
        if isinstance(item, dsl.Block):
            raise ValidationError(
                f"unexpected block '{item.keyword}' in trigger", item.line, item.col
            )
        if item.name == "poll":
            poll = _literal(item, bool, "trigger.poll")
        elif item.name == "webhook":
            webhook = _literal(item, bool, "trigger.webhook")
        elif item.name == "repo":
            repo_location = _literal(item, str, "trigger.repo")
        elif item.name == "kind":
            kind = _literal(item, str, "trigger.kind")
            if kind not in ("git", "dir"):
                raise ValidationError(
                    f"trigger.kind must be 'git' or 'dir', got '{kind}'",
                    item.line,
                    item.col,
                )
        elif item.name == "branch":
            branch = _literal(item, str, "trigger.branch")
        elif item.name == "interval":
            interval = float(_literal(item, (int, float), "trigger.interval"))
            if interval < 1:
                raise ValidationError(
                    "trigger.interval must be at least 1 second", item.line, item.col
                )
        else:
            raise ValidationError(
                f"unknown trigger attribute '{item.name}'", item.line, item.col
            )
    repo = None
    if repo_location is not None:
        if kind == "dir" or (kind == "git" and not repo_location.startswith(("http", "git@", "ssh"))):
            located = Path(repo_location)
            if not located.is_absolute():
                located = (base_dir / located).resolve()
            repo_location = str(located)
        repo = scm.RepoRef(kind, repo_location, branch)
    if poll and repo is None:
        raise ValidationError("poll trigger requires a repo", block.line, block.col)
    return TriggerSpec(poll=poll, webhook=webhook, repo=repo, interval_s=interval)


def _parse_approval(block: dsl.Block) -> ApprovalGateSpec:
    prompt = "Approve?"
    timeout = DEFAULT_APPROVAL_TIMEOUT_S
    for item in block.body:
        if isinstance(item, dsl.Block):
            raise ValidationError(
                f"unexpected block '{item.keyword}' in approval", item.line, item.col
            )
        if item.name == "prompt":
            prompt = _literal(item, str, "approval.prompt")
        elif item.name == "timeout":
            timeout = float(_literal(item, (int, float), "approval.timeout"))
            if timeout <= 0:
                raise ValidationError(
                    "approval.timeout must be positive", item.line, item.col
                )
        else:
            raise ValidationError(
                f"unknown approval attribute '{item.name}'", item.line, item.col
            )
    return ApprovalGateSpec(prompt, timeout)


def _check_deploy_file(path: str, attr: dsl.Attribute):
    pure = Path(path)
    if pure.is_absolute() or ".." in pure.parts or not path:
        raise ValidationError(
            f"deploy files must be relative paths inside the workspace: '{path}'",
            attr.line,
            attr.col,
        )


def _parse_stage(block: dsl.Block) -> StageSpec:
    if len(block.labels) != 1:
        raise ValidationError(
            "stage block takes exactly one label", block.line, block.col
        )
    name = block.labels[0]
    checkout = None
    commands = None
    jobs = []
    target = None
    files_attr = None
    approval = None
    ephemeral = False
    for item in block.body:
        if isinstance(item, dsl.Block):
            if item.keyword == "job":
                if len(item.labels) != 1:
                    raise ValidationError(
                        "job block takes exactly one label", item.line, item.col
                    )
                job_commands = None
                for sub in item.body:
                    if isinstance(sub, dsl.Block) or sub.name != "run":
                        line = getattr(sub, "line", item.line)
                        col = getattr(sub, "col", item.col)
                        raise ValidationError(
                            "job blocks support only a 'run' list", line, col
                        )
                    job_commands = _literal(sub, list, "job.run")
                if not job_commands:
                    raise ValidationError(
                        f"job '{item.labels[0]}' has no commands", item.line, item.col
                    )
                if any(j.name == item.labels[0] for j in jobs):
                    raise ValidationError(
                        f"duplicate job name '{item.labels[0]}' in stage '{name}'",
                        item.line,
                        item.col,
                    )
                jobs.append(JobSpec(item.labels[0], tuple(job_commands)))
            elif item.keyword == "approval":
                approval = _parse_approval(item)
            else:
                raise ValidationError(
                    f"unknown block '{item.keyword}' in stage '{name}'",
                    item.line,
                    item.col,
                )
            continue
        if item.name == "checkout":
            checkout = _literal(item, bool, "stage.checkout")
        elif item.name == "run":
            commands = _literal(item, list, "stage.run")
        elif item.name == "target":
            target = _literal(item, str, "stage.target")
        elif item.name == "files":
            files_attr = item
        elif item.name == "ephemeral_env":
            ephemeral = _literal(item, bool, "stage.ephemeral_env")
        else:
            raise ValidationError(
                f"unknown stage attribute '{item.name}'", item.line, item.col
            )

    shapes = [
        bool(checkout),
        commands is not None,
        bool(jobs),
        target is not None or files_attr is not None,
    ]
    if sum(shapes) != 1:
        raise ValidationError(
            f"stage '{name}' must have exactly one body: checkout, run, "
            "jobs, or target+files",
            block.line,
            block.col,
        )
    if checkout:
        body = CheckoutBody()
        if ephemeral:
            raise ValidationError(
                "ephemeral_env applies only to run/job stages", block.line, block.col
            )
    elif commands is not None:
        if not commands:
            raise ValidationError(
                f"stage '{name}' has an empty run list", block.line, block.col
            )
        body = StepsBody(tuple(commands))
    elif jobs:
        if len(jobs) < 2:
            raise ValidationError(
                f"parallel stage '{name}' needs at least 2 jobs",
                block.line,
                block.col,
            )
        body = ParallelBody(tuple(jobs))
    else:
        if target is None or files_attr is None:
            raise ValidationError(
                f"deploy stage '{name}' needs both target and files",
                block.line,
                block.col,
            )
        files = _literal(files_attr, list, "stage.files")
        if not files:
            raise ValidationError(
                f"deploy stage '{name}' lists no files", files_attr.line, files_attr.col
            )
        for path in files:
            _check_deploy_file(path, files_attr)
        if ephemeral:
            raise ValidationError(
                "ephemeral_env applies only to run/job stages", block.line, block.col
            )
        body = DeployBody(target, tuple(files))
    return StageSpec(name, body, approval, ephemeral, block.line, block.col)


def validate(doc: dsl.Document, base_dir=None) -> PipelineSpec:
    """Check a pipeline document and build its spec.

    `base_dir` anchors relative trigger repo paths; it defaults to the
    directory of the document's source file.
    """
    if base_dir is None:
        source = Path(doc.source_name)
        base_dir = source.parent if source.name.endswith(".fl") else Path.cwd()
    base_dir = Path(base_dir)

    pipelines = [
        item
        for item in doc.items
        if isinstance(item, dsl.Block) and item.keyword == "pipeline"
    ]
    if not pipelines:
        raise ValidationError("document contains no pipeline block")
    if len(pipelines) > 1:
        second = pipelines[1]
        raise ValidationError(
            "document contains more than one pipeline block", second.line, second.col
        )
    block = pipelines[0]
    if len(block.labels) != 1:
        raise ValidationError(
            "pipeline block takes exactly one label", block.line, block.col
        )
    name = block.labels[0]

    trigger = TriggerSpec()
    saw_trigger = False
    stages = []
    positions = {}
    for item in block.body:
        if isinstance(item, dsl.Attribute):
            raise ValidationError(
                f"unexpected attribute '{item.name}' in pipeline", item.line, item.col
            )
        if item.keyword == "trigger":
            if saw_trigger:
                raise ValidationError(
                    "more than one trigger block", item.line, item.col
                )
            saw_trigger = True
            trigger = _parse_trigger(item, base_dir)
        elif item.keyword == "stage":
            stage = _parse_stage(item)
            if stage.name in positions:
                first_line, first_col = positions[stage.name]
                raise ValidationError(
                    f"duplicate stage name '{stage.name}' "
                    f"(first at {first_line}:{first_col}, again at {item.line}:{item.col})",
                    item.line,
                    item.col,
                )
            positions[stage.name] = (item.line, item.col)
            stages.append(stage)
        else:
            raise ValidationError(
                f"unknown block '{item.keyword}' in pipeline", item.line, item.col
            )

    if not stages:
        raise ValidationError("pipeline has no stages", block.line, block.col)
    checkouts = [i for i, s in enumerate(stages) if isinstance(s.body, CheckoutBody)]
    if len(checkouts) > 1:
        offender = stages[checkouts[1]]
        raise ValidationError(
            "at most one checkout stage is allowed", offender.line, offender.col
        )
    if checkouts and checkouts[0] != 0:
        offender = stages[checkouts[0]]
        raise ValidationError(
            "the checkout stage must come first", offender.line, offender.col
        )
    return PipelineSpec(name, trigger, tuple(stages))


# --- Deploy targets -------------------------------------------------------


@dataclass(frozen=True)
class TargetSpec:
    """Named deploy destination: a literal directory or an infra output."""

    name: str
    path: str = None
    output: str = None


def parse_target(block: dsl.Block) -> TargetSpec:
    if len(block.labels) != 1:
        raise ValidationError(
            "target block takes exactly one label", block.line, block.col
        )
    path = output = None
    for item in block.body:
        if isinstance(item, dsl.Block):
            raise ValidationError(
                f"unexpected block '{item.keyword}' in target", item.line, item.col
            )
        if item.name == "path":
            path = _literal(item, str, "target.path")
        elif item.name == "output":
            output = _literal(item, str, "target.output")
        else:
            raise ValidationError(
                f"unknown target attribute '{item.name}'", item.line, item.col
            )
    if (path is None) == (output is None):
        raise ValidationError(
            "target needs exactly one of 'path' or 'output'", block.line, block.col
        )
    return TargetSpec(block.labels[0], path, output)


# --- Runs ------------------------------------------------------------------


def _ts_text(moment: datetime) -> str:
    return moment.astimezone(timezone.utc).isoformat().replace("+00:00", "Z")


def _ts_parse(text: str) -> datetime:
    return datetime.fromisoformat(text.replace("Z", "+00:00"))


@dataclass
class LogEvent:
    seq: int
    ts: datetime
    scope: str  # "<stage>", "<stage>/<job>", or "run"
    stream: str  # out | err | sys
    text: str

    def render(self) -> str:
        return f"[{_ts_text(self.ts)}] [{self.scope}] {self.stream}: {self.text}"


@dataclass
class ApprovalState:
    prompt: str
    timeout_s: float
    decision: str = None  # approve | reject | timeout
    decided_by: str = None
    decided_at: datetime = None

    def to_json_value(self):
        return {
            "prompt": self.prompt,
            "timeout_s": self.timeout_s,
            "decision": self.decision,
            "decided_by": self.decided_by,
            "decided_at": _ts_text(self.decided_at) if self.decided_at else None,
        }

    @classmethod
    def from_json_value(cls, value):
        return cls(
            prompt=value["prompt"],
            timeout_s=value["timeout_s"],
            decision=value["decision"],
            decided_by=value["decided_by"],
            decided_at=_ts_parse(value["decided_at"]) if value["decided_at"] else None,
        )


@dataclass
class JobResult:
    name: str
    status: str = PENDING
    exit_code: int = None

    def to_json_value(self):
        return {"name": self.name, "status": self.status, "exit_code": self.exit_code}

    @classmethod
    def from_json_value(cls, value):
        return cls(value["name"], value["status"], value["exit_code"])


@dataclass
class StageResult:
    name: str
    status: str = PENDING
    started: datetime = None
    finished: datetime = None
    job_results: list = field(default_factory=list)

    @property
    def duration_s(self):
        if self.started and self.finished:
            return (self.finished - self.started).total_seconds()
        return None

    def to_json_value(self):
        return {
            "name": self.name,
            "status": self.status,
            "started": _ts_text(self.started) if self.started else None,
            "finished": _ts_text(self.finished) if self.finished else None,
            "job_results": [j.to_json_value() for j in self.job_results],
        }

    @classmethod
    def from_json_value(cls, value):
        return cls(
            name=value["name"],
            status=value["status"],
            started=_ts_parse(value["started"]) if value["started"] else None,
            finished=_ts_parse(value["finished"]) if value["finished"] else None,
            job_results=[JobResult.from_json_value(j) for j in value["job_results"]],
        )


@dataclass
class RunMetrics:
    queue_latency_s: float = None
    stage_durations: list = field(default_factory=list)  # (stage, seconds)
    total_duration_s: float = None
    first_failure_stage_ordinal: int = None
    outcome: str = None

    def to_json_value(self):
        return {
            "queue_latency_s": self.queue_latency_s,
            "stage_durations": [[name, secs] for name, secs in self.stage_durations],
            "total_duration_s": self.total_duration_s,
            "first_failure_stage_ordinal": self.first_failure_stage_ordinal,
            "outcome": self.outcome,
        }

    @classmethod
    def from_json_value(cls, value):
        if value is None:
            return None
        return cls(
            queue_latency_s=value["queue_latency_s"],
            stage_durations=[(n, s) for n, s in value["stage_durations"]],
            total_duration_s=value["total_duration_s"],
            first_failure_stage_ordinal=value["first_failure_stage_ordinal"],
            outcome=value["outcome"],
        )


@dataclass
class Run:
    id: str
    pipeline: str
    revision: scm.Revision
    cause: str  # poll | webhook | manual
    state: str = QUEUED
    created: datetime = field(default_factory=scm.utcnow)
    started: datetime = None
    finished: datetime = None
    stage_results: list = field(default_factory=list)
    metrics: RunMetrics = None
    gate: ApprovalState = None
    history: list = field(default_factory=list)  # (from, to, ts)

    @property
    def terminal(self) -> bool:
        return self.state in TERMINAL_STATES

    def to_json_value(self):
        return {
            "id": self.id,
            "pipeline": self.pipeline,
            "revision": {
                "id": self.revision.id,
                "message": self.revision.message,
                "observed_at": _ts_text(self.revision.observed_at),
            },
            "cause": self.cause,
            "state": self.state,
            "created": _ts_text(self.created),
            "started": _ts_text(self.started) if self.started else None,
            "finished": _ts_text(self.finished) if self.finished else None,
            "stage_results": [s.to_json_value() for s in self.stage_results],
            "metrics": self.metrics.to_json_value() if self.metrics else None,
            "gate": self.gate.to_json_value() if self.gate else None,
            "history": [
                [src, dst, _ts_text(ts)] for src, dst, ts in self.history
            ],
        }

    @classmethod
    def from_json_value(cls, value):
        revision = scm.Revision(
            value["revision"]["id"],
            value["revision"]["message"],
            _ts_parse(value["revision"]["observed_at"]),
        )
        return cls(
            id=value["id"],
            pipeline=value["pipeline"],
            revision=revision,
            cause=value["cause"],
            state=value["state"],
            created=_ts_parse(value["created"]),
            started=_ts_parse(value["started"]) if value["started"] else None,
            finished=_ts_parse(value["finished"]) if value["finished"] else None,
            stage_results=[
                StageResult.from_json_value(s) for s in value["stage_results"]
            ],
            metrics=RunMetrics.from_json_value(value["metrics"]),
            gate=ApprovalState.from_json_value(value["gate"]) if value["gate"] else None,
            history=[(src, dst, _ts_parse(ts)) for src, dst, ts in value["history"]],
        )


def compute_metrics(run: Run) -> RunMetrics:
    """Derive the feedback metrics of a finished run."""
    if not run.terminal:
        raise RunNotTerminal(run.id)
    queue_latency = None
    if run.started:
        queue_latency = (run.started - run.created).total_seconds()
    durations = [
        (s.name, s.duration_s) for s in run.stage_results if s.duration_s is not None
    ]
    total = None
    if run.started and run.finished:
        total = (run.finished - run.started).total_seconds()
    ordinal = None
    for index, stage in enumerate(run.stage_results, start=1):
        if stage.status == FAILED:
            ordinal = index
            break
    return RunMetrics(
        queue_latency_s=queue_latency,
        stage_durations=durations,
        total_duration_s=total,
        first_failure_stage_ordinal=ordinal,
        outcome=run.state,
    )
