"""Run scheduling and execution.

One worker thread per pipeline executes that pipeline's runs serially in
enqueue order; different pipelines run concurrently. Parallel-stage jobs
share a bounded thread pool. Approval gates hold the run in
``waiting_approval`` until a decision arrives or the gate times out.

On-disk layout under the engine's data dir:

    runs/<pipeline>/<run-id>/run.json   canonical run record
    runs/<pipeline>/<run-id>/log        one rendered line per log event
    workspaces/<pipeline>/<run-id>/     per-run checkout/workdir
"""

from __future__ import annotations

import logging
import os
import queue
import shutil
import signal
import subprocess
import tempfile
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from . import pipeline as pl
from . import scm
from .iac import StateStore
from .jsonio import read_json, write_canonical
from .providers.static_server import StaticSite

log = logging.getLogger(__name__)

DEFAULT_STEP_TIMEOUT_S = 300.0


class UnknownPipeline(Exception):
    pass


class UnknownRun(Exception):
    pass


class NotWaiting(Exception):
    pass


class _StageFailure(Exception):
    """Internal: stage body failed; recorded, never escapes the executor."""


class _EngineStopping(Exception):
    pass


# --- Ephemeral test environments -----------------------------------------


@dataclass
class EphemeralEnv:
    dir: Path
    server: StaticSite
    url: str


def provision_test_env(workspace) -> EphemeralEnv:
    """Serve a throwaway copy of the workspace over HTTP on an auto port."""
    doc_dir = Path(tempfile.mkdtemp(prefix="flowline-testenv-"))
    shutil.copytree(workspace, doc_dir, dirs_exist_ok=True)
    server = StaticSite(doc_dir)
    return EphemeralEnv(doc_dir, server, f"http://{server.addr}")


def teardown_test_env(env: EphemeralEnv) -> None:
    env.server.stop()
    shutil.rmtree(env.dir, ignore_errors=True)


# --- Engine ----------------------------------------------------------------


class PipelineEngine:
    def __init__(
        self,
        data_dir,
        pipelines,
        targets=None,
        state_path=None,
        *,
        workspace_retention=5,
        step_timeout_s=DEFAULT_STEP_TIMEOUT_S,
        worker_pool_size=None,
    ):
        self.data_dir = Path(data_dir)
        self.pipelines = dict(pipelines)
        self.targets = dict(targets or {})
        self.state_path = Path(state_path) if state_path else self.data_dir / "state.json"
        self.workspace_retention = workspace_retention
        self.step_timeout_s = step_timeout_s
        self.worker_pool_size = worker_pool_size or os.cpu_count() or 2

        self._lock = threading.RLock()
        self._runs = {}
        self._events = {}  # run id -> list[LogEvent]
        self._disk_logs = {}  # run id -> list[str], for runs loaded from disk
        self._log_files = {}
        self._conditions = {}
        self._queues = {name: queue.Queue() for name in self.pipelines}
        self._counters = {name: 0 for name in self.pipelines}
        self._workers = []
        self._stopping = threading.Event()
        self._started = False

    # -- lifecycle ---------------------------------------------------

    def start(self):
        (self.data_dir / "runs").mkdir(parents=True, exist_ok=True)
        (self.data_dir / "workspaces").mkdir(parents=True, exist_ok=True)
        self._load_persisted_runs()
        for name in self.pipelines:
            worker = threading.Thread(
                target=self._worker, args=(name,), name=f"runner-{name}", daemon=True
            )
            worker.start()
            self._workers.append(worker)
        self._started = True
        return self

    def stop(self):
        self._stopping.set()
        for worker in self._workers:
            worker.join(timeout=5)
        with self._lock:
            for run in self._runs.values():
                self._persist(run)
            for fh in self._log_files.values():
                try:
                    fh.close()
                except OSError:
                    pass
            self._log_files.clear()

    def _load_persisted_runs(self):
        runs_root = self.data_dir / "runs"
        for run_file in sorted(runs_root.glob("*/*/run.json")):
            try:
                run = pl.Run.from_json_value(read_json(run_file))
            except (ValueError, KeyError):
                log.warning("skipping unreadable run record %s", run_file)
                continue
            if not run.terminal:
                # The previous process died or stopped mid-run.
                run.history.append((run.state, pl.ABORTED, scm.utcnow()))
                run.state = pl.ABORTED
                run.finished = run.finished or scm.utcnow()
                for stage in run.stage_results:
                    if stage.status in (pl.PENDING, pl.RUNNING, pl.WAITING_APPROVAL):
                        stage.status = pl.SKIPPED
                run.metrics = pl.compute_metrics(run)
                self._persist(run)
                log_path = run_file.parent / "log"
                with open(log_path, "a", encoding="utf-8") as fh:
                    fh.write(
                        pl.LogEvent(0, scm.utcnow(), "run", "sys", "Finished: ABORTED").render()
                        + "\n"
                    )
            self._runs[run.id] = run
            prefix = f"{run.pipeline}-"
            if run.id.startswith(prefix) and run.id[len(prefix):].isdigit():
                number = int(run.id[len(prefix):])
                if number > self._counters.get(run.pipeline, 0):
                    self._counters[run.pipeline] = number

    # -- public operations --------------------------------------------

    def enqueue(self, pipeline_name, revision, cause) -> pl.Run:
        return self.enqueue_run(pipeline_name, revision, cause)[0]

    def enqueue_run(self, pipeline_name, revision, cause):
        """Like enqueue, but also reports whether a new run was created."""
        with self._lock:
            if pipeline_name not in self.pipelines:
                raise UnknownPipeline(pipeline_name)
            for run in self._runs.values():
                if (
                    run.pipeline == pipeline_name
                    and run.state == pl.QUEUED
                    and run.revision.id == revision.id
                ):
                    return run, False
            self._counters[pipeline_name] += 1
            run = pl.Run(
                id=f"{pipeline_name}-{self._counters[pipeline_name]}",
                pipeline=pipeline_name,
                revision=revision,
                cause=cause,
            )
            spec = self.pipelines[pipeline_name]
            run.stage_results = [pl.StageResult(s.name) for s in spec.stages]
            self._runs[run.id] = run
            self._events[run.id] = []
            self._conditions[run.id] = threading.Condition(self._lock)
            self._persist(run)
            self._queues[pipeline_name].put(run.id)
            return run, True

    def resolve_approval(self, run_id, decision, by) -> pl.Run:
        if decision not in ("approve", "reject"):
            raise ValueError(f"decision must be approve or reject, got {decision!r}")
        with self._lock:
            run = self._runs.get(run_id)
            if run is None:
                raise UnknownRun(run_id)
            if run.state != pl.WAITING_APPROVAL or run.gate is None or run.gate.decision:
                raise NotWaiting(run_id)
            run.gate.decision = decision
            run.gate.decided_by = by
            run.gate.decided_at = scm.utcnow()
            if decision == "approve":
                self._transition(run, pl.RUNNING)
            else:
                self._transition(run, pl.ABORTED)
            condition = self._conditions.get(run_id)
            if condition is not None:
                condition.notify_all()
            self._persist(run)
            return run

    def get_run(self, run_id) -> pl.Run:
        with self._lock:
            run = self._runs.get(run_id)
            if run is None:
                raise UnknownRun(run_id)
            return run

    def run_snapshot(self, run_id) -> dict:
        with self._lock:
            return self.get_run(run_id).to_json_value()

    def list_runs(self, pipeline_name=None, limit=None):
        with self._lock:
            runs = [
                r
                for r in self._runs.values()
                if pipeline_name is None or r.pipeline == pipeline_name
            ]
            runs.sort(key=lambda r: r.created, reverse=True)
            if limit is not None:
                runs = runs[:limit]
            return [r.to_json_value() for r in runs]

    def get_log(self, run_id, offset=0, limit=1000):
        """Rendered log lines from `offset`; never returns a torn line."""
        with self._lock:
            run = self._runs.get(run_id)
            if run is None:
                raise UnknownRun(run_id)
            lines = self._rendered_log(run)
            page = lines[offset : offset + limit]
            next_offset = offset + len(page)
            complete = run.terminal and next_offset >= len(lines)
            return page, next_offset, complete

    def _rendered_log(self, run):
        events = self._events.get(run.id)
        if events is not None:
            return [e.render() for e in events]
        cached = self._disk_logs.get(run.id)
        if cached is None:
            log_path = self.run_dir(run) / "log"
            cached = (
                log_path.read_text(encoding="utf-8").splitlines()
                if log_path.exists()
                else []
            )
            if run.terminal:
                self._disk_logs[run.id] = cached
        return cached

    def wait_run(self, run_id, timeout_s=30.0, until=None):
        """Block until the run reaches `until` (default: fully finalized).

        A terminal run counts as reached only once its metrics and final
        log line are in place, so callers never observe a half-finished
        record.
        """
        deadline = time.monotonic() + timeout_s
        while time.monotonic() < deadline:
            with self._lock:
                run = self.get_run(run_id)
                if until is None:
                    if run.terminal and run.metrics is not None:
                        return run
                elif run.state == until:
                    return run
            time.sleep(0.02)
        raise TimeoutError(f"run {run_id} did not reach {until or 'a terminal state'}")

    def run_dir(self, run) -> Path:
        return self.data_dir / "runs" / run.pipeline / run.id

    def workspace_dir(self, run) -> Path:
        return self.data_dir / "workspaces" / run.pipeline / run.id

    # -- internals ------------------------------------------------------

    def _persist(self, run):
        run_dir = self.run_dir(run)
        run_dir.mkdir(parents=True, exist_ok=True)
        write_canonical(run_dir / "run.json", run.to_json_value())

    def _transition(self, run, new_state):
        assert (run.state, new_state) in pl.ALLOWED_TRANSITIONS, (
            f"illegal transition {run.state} -> {new_state}"
        )
        run.history.append((run.state, new_state, scm.utcnow()))
        run.state = new_state
        if new_state == pl.RUNNING and run.started is None:
            run.started = scm.utcnow()
        if new_state in pl.TERMINAL_STATES:
            run.finished = scm.utcnow()

    def _log(self, run, scope, stream, text):
        with self._lock:
            events = self._events.setdefault(run.id, [])
            event = pl.LogEvent(len(events), scm.utcnow(), scope, stream, text)
            events.append(event)
            fh = self._log_files.get(run.id)
            if fh is not None:
                fh.write(event.render() + "\n")
                fh.flush()

    def _worker(self, pipeline_name):
        pending = self._queues[pipeline_name]
        while not self._stopping.is_set():
            try:
                run_id = pending.get(timeout=0.2)
            except queue.Empty:
                continue
            try:
                self._execute(run_id)
            except _EngineStopping:
                return
            except Exception:
                log.exception("executor crashed on %s", run_id)
                with self._lock:
                    run = self._runs.get(run_id)
                    if run is not None and not run.terminal:
                        self._finalize(run, pl.FAILED)

    def _execute(self, run_id):
        with self._lock:
            run = self._runs[run_id]
            spec = self.pipelines[run.pipeline]
            run_dir = self.run_dir(run)
            run_dir.mkdir(parents=True, exist_ok=True)
            self._log_files[run.id] = open(run_dir / "log", "a", encoding="utf-8")
            self._transition(run, pl.RUNNING)
            self._persist(run)

        workspace = self.workspace_dir(run)
        workspace.mkdir(parents=True, exist_ok=True)
        env_base = dict(os.environ)
        env_base.update(
            RUN_ID=run.id, REVISION=run.revision.id, PIPELINE=run.pipeline
        )

        outcome = pl.SUCCEEDED
        for index, stage in enumerate(spec.stages):
            result = run.stage_results[index]
            if outcome != pl.SUCCEEDED:
                result.status = pl.SKIPPED
                continue
            if stage.approval is not None:
                decision = self._gate(run, stage, result)
                if decision != "approve":
                    result.status = pl.ABORTED
                    outcome = pl.ABORTED
                    continue
            status = self._execute_stage(run, stage, result, workspace, env_base, spec)
            if status != pl.SUCCEEDED:
                outcome = pl.FAILED

        self._finalize(run, outcome)

    def _gate(self, run, stage, result) -> str:
        gate = stage.approval
        condition = self._conditions[run.id]
        with self._lock:
            run.gate = pl.ApprovalState(gate.prompt, gate.timeout_s)
            result.status = pl.WAITING_APPROVAL
            self._transition(run, pl.WAITING_APPROVAL)
            self._persist(run)
        self._log(run, stage.name, "sys", f"waiting for approval: {gate.prompt}")
        deadline = time.monotonic() + gate.timeout_s
        with condition:
            while run.gate.decision is None:
                if self._stopping.is_set():
                    self._persist(run)
                    raise _EngineStopping()
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    break
                condition.wait(min(remaining, 0.2))
            if run.gate.decision is None:
                run.gate.decision = "timeout"
                run.gate.decided_at = scm.utcnow()
                self._transition(run, pl.ABORTED)
            decision = run.gate.decision
            self._persist(run)
        if decision == "approve":
            self._log(run, stage.name, "sys", f"approved by {run.gate.decided_by}")
        elif decision == "reject":
            self._log(run, stage.name, "sys", f"rejected by {run.gate.decided_by}")
        else:
            self._log(
                run, stage.name, "sys", f"approval timed out after {gate.timeout_s:g}s"
            )
        return decision

    def _execute_stage(self, run, stage, result, workspace, env_base, spec):
        with self._lock:
            result.status = pl.RUNNING
            result.started = scm.utcnow()
            self._persist(run)
        env = dict(env_base)
        ephemeral = None
        try:
            if stage.ephemeral_env:
                ephemeral = provision_test_env(workspace)
                env["TEST_ENV_URL"] = ephemeral.url
                self._log(run, stage.name, "sys", f"test environment at {ephemeral.url}")
            body = stage.body
            if isinstance(body, pl.CheckoutBody):
                self._run_checkout(run, stage, workspace, spec)
            elif isinstance(body, pl.StepsBody):
                for command in body.commands:
                    code = self._run_command(run, stage.name, command, workspace, env)
                    if code != 0:
                        raise _StageFailure(f"step failed with exit code {code}")
            elif isinstance(body, pl.ParallelBody):
                self._run_parallel(run, stage, body, result, workspace, env)
            elif isinstance(body, pl.DeployBody):
                self._run_deploy(run, stage, body, workspace)
            status = pl.SUCCEEDED
        except _StageFailure as exc:
            self._log(run, stage.name, "sys", str(exc))
            status = pl.FAILED
        finally:
            if ephemeral is not None:
                teardown_test_env(ephemeral)
                self._log(run, stage.name, "sys", "test environment torn down")
            with self._lock:
                result.status = status
                result.finished = scm.utcnow()
                self._persist(run)
        return status

    def _run_checkout(self, run, stage, workspace, spec):
        repo = spec.trigger.repo
        if repo is None:
            raise _StageFailure("checkout failed: pipeline has no repo configured")
        try:
            scm.checkout(repo, run.revision, workspace)
        except (scm.RepoUnreachable, scm.RevisionVanished, scm.CheckoutError, OSError) as exc:
            raise _StageFailure(f"checkout failed: {exc}") from exc
        self._log(
            run, stage.name, "sys", f"checked out {run.revision.id} from {repo.location}"
        )

    def _run_command(self, run, scope, command, cwd, env) -> int:
        self._log(run, scope, "sys", f"+ {command}")
        proc = subprocess.Popen(
            command,
            shell=True,
            cwd=cwd,
            env=env,
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
            text=True,
            start_new_session=True,  # its own group, so a timeout kill reaps children
        )

        def pump(pipe, stream):
            for line in pipe:
                self._log(run, scope, stream, line.rstrip("\n"))
            pipe.close()

        readers = [
            threading.Thread(target=pump, args=(proc.stdout, "out"), daemon=True),
            threading.Thread(target=pump, args=(proc.stderr, "err"), daemon=True),
        ]
        for reader in readers:
            reader.start()
        try:
            code = proc.wait(timeout=self.step_timeout_s)
        except subprocess.TimeoutExpired:
            try:
                os.killpg(proc.pid, signal.SIGKILL)
            except ProcessLookupError:
                pass
            proc.wait()
            self._log(
                run, scope, "sys", f"command timed out after {self.step_timeout_s:g}s"
            )
            code = 124
        for reader in readers:
            reader.join(timeout=5)
        return code

    def _run_parallel(self, run, stage, body, result, workspace, env):
        with self._lock:
            result.job_results = [pl.JobResult(job.name, pl.RUNNING) for job in body.jobs]

        def run_job(job, job_result):
            job_env = dict(env)
            job_env["JOB_NAME"] = job.name
            scope = f"{stage.name}/{job.name}"
            for command in job.commands:
                code = self._run_command(run, scope, command, workspace, job_env)
                if code != 0:
                    job_result.status = pl.FAILED
                    job_result.exit_code = code
                    return
            job_result.status = pl.SUCCEEDED
            job_result.exit_code = 0

        workers = min(len(body.jobs), self.worker_pool_size)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(run_job, job, job_result)
                for job, job_result in zip(body.jobs, result.job_results)
            ]
            for future in futures:
                future.result()
        failed = [j.name for j in result.job_results if j.status != pl.SUCCEEDED]
        if failed:
            raise _StageFailure("job(s) failed: " + ", ".join(failed))

    def _resolve_target(self, name):
        target = self.targets.get(name)
        if target is None:
            raise _StageFailure(f"deploy target '{name}' is not configured")
        if target.path is not None:
            return Path(target.path)
        store = StateStore(self.state_path)
        if not store.path.exists():
            raise _StageFailure(
                f"deploy target '{name}' reads output '{target.output}' "
                f"but there is no state at {store.path}"
            )
        outputs = store.load().outputs
        value = outputs.get(target.output)
        if not isinstance(value, str):
            raise _StageFailure(
                f"deploy target '{name}': output '{target.output}' missing from state"
            )
        return Path(value)

    def _run_deploy(self, run, stage, body, workspace):
        target_dir = self._resolve_target(body.target)
        if not target_dir.is_dir():
            raise _StageFailure(f"deploy target directory missing: {target_dir}")
        for relpath in body.files:
            source = workspace / relpath
            if not source.is_file():
                raise _StageFailure(f"deploy file missing from workspace: {relpath}")
            dest = target_dir / relpath
            dest.parent.mkdir(parents=True, exist_ok=True)
            shutil.copy2(source, dest)
            self._log(run, stage.name, "out", f"'{relpath}' -> '{dest}'")

    def _finalize(self, run, outcome):
        # One critical section: once wait_run sees metrics, the final log
        # line and the persisted record are already in place.
        with self._lock:
            for result in run.stage_results:
                if result.status == pl.PENDING:
                    result.status = pl.SKIPPED
            if not run.terminal:
                self._transition(run, outcome)
            self._log(run, "run", "sys", f"Finished: {pl.OUTCOME_TEXT[run.state]}")
            fh = self._log_files.pop(run.id, None)
            if fh is not None:
                fh.close()
            run.metrics = pl.compute_metrics(run)
            self._persist(run)
        self._prune_workspaces(run.pipeline)

    def _prune_workspaces(self, pipeline_name):
        if self.workspace_retention is None:
            return
        root = self.data_dir / "workspaces" / pipeline_name
        if not root.is_dir():
            return
        prefix = f"{pipeline_name}-"

        def run_number(path):
            suffix = path.name[len(prefix):]
            return int(suffix) if path.name.startswith(prefix) and suffix.isdigit() else -1

        workspaces = sorted((p for p in root.iterdir() if p.is_dir()), key=run_number)
        for stale in workspaces[: max(0, len(workspaces) - self.workspace_retention)]:
            shutil.rmtree(stale, ignore_errors=True)
