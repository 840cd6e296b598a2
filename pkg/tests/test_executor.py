import itertools
import random
import re
import threading
import time
from pathlib import Path

import pytest

from flowline import dsl, pipeline as pl, scm
from flowline.executor import (
    NotWaiting,
    PipelineEngine,
    UnknownPipeline,
    UnknownRun,
    provision_test_env,
    teardown_test_env,
)
from flowline.jsonio import read_json

from helpers import FIG7_FILES, make_dir_repo, pipeline_text, port_refuses, wait_until


def spec_from(text, base_dir="/tmp"):
    return pl.validate(dsl.parse_source(text), base_dir=base_dir)


def steps_pipeline(name, *commands, approval=None):
    run_list = ", ".join(f'"{c}"' for c in commands)
    gate = f"  approval {{ prompt = \"go?\" timeout = {approval} }}\n" if approval else ""
    return (
        f'pipeline "{name}" {{\n'
        f'  stage "work" {{\n{gate}    run = [{run_list}]\n  }}\n'
        "}\n"
    )


@pytest.fixture
def engine_factory(tmp_path):
    engines = []

    def build(pipelines, targets=None, **kwargs):
        engine = PipelineEngine(
            tmp_path / "data", pipelines, targets or {}, **kwargs
        )
        engine.start()
        engines.append(engine)
        return engine

    yield build
    for engine in engines:
        engine.stop()


def make_revision(text="rev"):
    import hashlib

    return scm.Revision(hashlib.sha256(text.encode()).hexdigest())


@pytest.fixture
def site_world(tmp_path, engine_factory):
    """Fig. 3 shaped pipeline over a dir repo with a deploy target."""
    repo = make_dir_repo(tmp_path / "repo", FIG7_FILES)
    prod = tmp_path / "prod"
    prod.mkdir()
    spec = spec_from(pipeline_text(repo, approval_timeout=10), base_dir=tmp_path)
    engine = engine_factory(
        {"site": spec}, {"prod": pl.TargetSpec("prod", path=str(prod))}
    )
    return engine, repo, prod


def test_full_run_deploy_log_format(site_world):
    engine, repo, prod = site_world
    run = engine.enqueue("site", scm.head(scm.RepoRef("dir", str(repo))), "manual")
    engine.wait_run(run.id, 30, until=pl.WAITING_APPROVAL)
    engine.resolve_approval(run.id, "approve", "tester")
    run = engine.wait_run(run.id, 30)
    assert run.state == pl.SUCCEEDED

    lines, _, complete = engine.get_log(run.id)
    assert complete
    for name in ("any.html", "index.html", "Jenkinsfile"):
        assert any(f"'{name}' -> '{prod}/{name}'" in line for line in lines), name
    assert lines[-1].endswith("[run] sys: Finished: SUCCESS")
    assert (prod / "index.html").read_text() == FIG7_FILES["index.html"]


def test_fail_fast_skips_later_stages(tmp_path, engine_factory):
    text = (
        'pipeline "p" {\n'
        '  stage "one" { run = ["true"] }\n'
        '  stage "two" { run = ["exit 3"] }\n'
        '  stage "three" { run = ["true"] }\n'
        '  stage "four" { run = ["true"] }\n'
        "}\n"
    )
    engine = engine_factory({"p": spec_from(text)})
    run = engine.enqueue("p", make_revision(), "manual")
    run = engine.wait_run(run.id, 20)
    assert run.state == pl.FAILED
    assert [s.status for s in run.stage_results] == [
        pl.SUCCEEDED,
        pl.FAILED,
        pl.SKIPPED,
        pl.SKIPPED,
    ]
    assert run.metrics.first_failure_stage_ordinal == 2
    lines, _, _ = engine.get_log(run.id)
    assert lines[-1].endswith("Finished: FAILURE")


def test_parallel_two_sleeps_run_concurrently(tmp_path, engine_factory):
    text = (
        'pipeline "p" {\n'
        '  stage "sleepy" {\n'
        '    job "a" { run = ["sleep 1"] }\n'
        '    job "b" { run = ["sleep 1"] }\n'
        "  }\n"
        "}\n"
    )
    engine = engine_factory({"p": spec_from(text)})
    run = engine.enqueue("p", make_revision(), "manual")
    run = engine.wait_run(run.id, 20)
    assert run.state == pl.SUCCEEDED
    stage = run.stage_results[0]
    assert stage.duration_s < 1.8
    assert all(j.status == pl.SUCCEEDED for j in stage.job_results)


@pytest.mark.parametrize("job_count", [2, 3])
def test_parallel_aggregation_truth_table(tmp_path, engine_factory, job_count):
    matrices = list(itertools.product([True, False], repeat=job_count))
    specs = {}
    for index, matrix in enumerate(matrices):
        jobs = "".join(
            f'    job "j{j}" {{ run = ["{"true" if ok else "false"}"] }}\n'
            for j, ok in enumerate(matrix)
        )
        name = f"m{index}"
        specs[name] = spec_from(
            f'pipeline "{name}" {{\n  stage "par" {{\n{jobs}  }}\n}}\n'
        )
    engine = engine_factory(specs)
    runs = {
        name: engine.enqueue(name, make_revision(name), "manual") for name in specs
    }
    for index, matrix in enumerate(matrices):
        run = engine.wait_run(runs[f"m{index}"].id, 30)
        expected = pl.SUCCEEDED if all(matrix) else pl.FAILED
        stage = run.stage_results[0]
        assert stage.status == expected, matrix
        for ok, job in zip(matrix, stage.job_results):
            assert job.status == (pl.SUCCEEDED if ok else pl.FAILED)


def test_parallel_no_sibling_cancellation(tmp_path, engine_factory):
    witness = tmp_path / "sibling-finished.txt"
    text = (
        'pipeline "p" {\n'
        '  stage "par" {\n'
        '    job "fails" { run = ["false"] }\n'
        f'    job "slow" {{ run = ["sleep 0.4 && touch {witness}"] }}\n'
        "  }\n"
        "}\n"
    )
    engine = engine_factory({"p": spec_from(text)})
    run = engine.enqueue("p", make_revision(), "manual")
    run = engine.wait_run(run.id, 20)
    assert run.state == pl.FAILED
    assert witness.exists(), "sibling job must run to completion"


def test_env_vars_exposed_to_steps(tmp_path, engine_factory):
    out = tmp_path / "env.txt"
    text = (
        'pipeline "envy" {\n'
        '  stage "s" { run = ["echo $RUN_ID $REVISION $PIPELINE >> '
        f'{out}" ] }}\n'
        "}\n"
    )
    engine = engine_factory({"envy": spec_from(text)})
    revision = make_revision("env")
    run = engine.enqueue("envy", revision, "manual")
    run = engine.wait_run(run.id, 20)
    assert run.state == pl.SUCCEEDED
    words = out.read_text().split()
    assert words == [run.id, revision.id, "envy"]


def test_job_name_env_in_parallel(tmp_path, engine_factory):
    out_dir = tmp_path / "jobs"
    out_dir.mkdir()
    text = (
        'pipeline "p" {\n'
        '  stage "par" {\n'
        f'    job "alpha" {{ run = ["echo $JOB_NAME > {out_dir}/a.txt"] }}\n'
        f'    job "beta" {{ run = ["echo $JOB_NAME > {out_dir}/b.txt"] }}\n'
        "  }\n"
        "}\n"
    )
    engine = engine_factory({"p": spec_from(text)})
    run = engine.enqueue("p", make_revision(), "manual")
    engine.wait_run(run.id, 20)
    assert (out_dir / "a.txt").read_text().strip() == "alpha"
    assert (out_dir / "b.txt").read_text().strip() == "beta"


# --- ephemeral test environments -----------------------------------------


def test_provision_and_teardown_test_env(tmp_path):
    workspace = make_dir_repo(tmp_path / "ws", {"index.html": "<i>env</i>"})
    env = provision_test_env(workspace)
    try:
        import urllib.request

        with urllib.request.urlopen(env.url + "/index.html", timeout=2) as response:
            assert response.read() == b"<i>env</i>"
    finally:
        port = env.server.port
        teardown_test_env(env)
    assert port_refuses(port, timeout_s=2)
    assert not env.dir.exists()


def test_teardown_runs_after_stage_failure(tmp_path, engine_factory):
    text = (
        'pipeline "p" {\n'
        '  stage "t" {\n'
        "    ephemeral_env = true\n"
        '    run = ["false"]\n'
        "  }\n"
        "}\n"
    )
    engine = engine_factory({"p": spec_from(text)})
    run = engine.enqueue("p", make_revision(), "manual")
    run = engine.wait_run(run.id, 20)
    assert run.state == pl.FAILED
    lines, _, _ = engine.get_log(run.id)
    url_line = next(line for line in lines if "test environment at" in line)
    port = int(url_line.rsplit(":", 1)[1])
    assert any("test environment torn down" in line for line in lines)
    assert port_refuses(port, timeout_s=2)


def test_concurrent_runs_get_distinct_env_ports(tmp_path, engine_factory):
    text_template = (
        'pipeline "{name}" {{\n'
        '  stage "t" {{\n'
        "    ephemeral_env = true\n"
        '    run = ["echo $TEST_ENV_URL && sleep 0.4"]\n'
        "  }}\n"
        "}}\n"
    )
    engine = engine_factory(
        {
            "a": spec_from(text_template.format(name="a")),
            "b": spec_from(text_template.format(name="b")),
        }
    )
    run_a = engine.enqueue("a", make_revision("a"), "manual")
    run_b = engine.enqueue("b", make_revision("b"), "manual")
    engine.wait_run(run_a.id, 20)
    engine.wait_run(run_b.id, 20)

    def env_port(run_id):
        lines, _, _ = engine.get_log(run_id)
        line = next(l for l in lines if "test environment at" in l)
        return line.rsplit(":", 1)[1]

    assert env_port(run_a.id) != env_port(run_b.id)


# --- scheduling ------------------------------------------------------------


def test_enqueue_dedupes_queued_same_revision(tmp_path, engine_factory):
    # A run waiting at a gate keeps the worker busy so later enqueues stay queued.
    gated = steps_pipeline("p", "true", approval=30)
    engine = engine_factory({"p": spec_from(gated)})
    blocker = engine.enqueue("p", make_revision("block"), "manual")
    engine.wait_run(blocker.id, 20, until=pl.WAITING_APPROVAL)

    first = engine.enqueue("p", make_revision("same"), "poll")
    again = engine.enqueue("p", make_revision("same"), "poll")
    other = engine.enqueue("p", make_revision("different"), "poll")
    assert first.id == again.id
    assert other.id != first.id
    engine.resolve_approval(blocker.id, "reject", "cleanup")


def test_runs_execute_in_fifo_order(tmp_path, engine_factory):
    marker = tmp_path / "order.txt"
    text = (
        'pipeline "p" {\n'
        f'  stage "s" {{ run = ["echo $REVISION >> {marker}"] }}\n'
        "}\n"
    )
    engine = engine_factory({"p": spec_from(text)})
    rev_a, rev_b = make_revision("A"), make_revision("B")
    run_a = engine.enqueue("p", rev_a, "manual")
    run_b = engine.enqueue("p", rev_b, "manual")
    engine.wait_run(run_a.id, 20)
    engine.wait_run(run_b.id, 20)
    assert marker.read_text().split() == [rev_a.id, rev_b.id]


def test_pipelines_run_concurrently(tmp_path, engine_factory):
    text_template = 'pipeline "{name}" {{\n  stage "s" {{ run = ["sleep 0.6"] }}\n}}\n'
    engine = engine_factory(
        {
            "a": spec_from(text_template.format(name="a")),
            "b": spec_from(text_template.format(name="b")),
        }
    )
    started = time.monotonic()
    run_a = engine.enqueue("a", make_revision("a"), "manual")
    run_b = engine.enqueue("b", make_revision("b"), "manual")
    engine.wait_run(run_a.id, 20)
    engine.wait_run(run_b.id, 20)
    assert time.monotonic() - started < 1.1


def test_unknown_pipeline_rejected(engine_factory):
    engine = engine_factory({"p": spec_from(steps_pipeline("p", "true"))})
    with pytest.raises(UnknownPipeline):
        engine.enqueue("ghost", make_revision(), "manual")
    with pytest.raises(UnknownRun):
        engine.get_run("ghost-1")


def test_step_timeout_fails_stage(tmp_path, engine_factory):
    engine = engine_factory(
        {"p": spec_from(steps_pipeline("p", "sleep 30"))}, step_timeout_s=0.4
    )
    started = time.monotonic()
    run = engine.enqueue("p", make_revision(), "manual")
    run = engine.wait_run(run.id, 20)
    assert run.state == pl.FAILED
    assert time.monotonic() - started < 5
    lines, _, _ = engine.get_log(run.id)
    assert any("timed out" in line for line in lines)


# --- approvals ---------------------------------------------------------------


def test_reject_aborts_and_deploys_nothing(site_world):
    engine, repo, prod = site_world
    run = engine.enqueue("site", scm.head(scm.RepoRef("dir", str(repo))), "manual")
    engine.wait_run(run.id, 30, until=pl.WAITING_APPROVAL)
    engine.resolve_approval(run.id, "reject", "security")
    run = engine.wait_run(run.id, 30)
    assert run.state == pl.ABORTED
    assert run.gate.decided_by == "security"
    assert list(prod.iterdir()) == []
    statuses = [s.status for s in run.stage_results]
    assert statuses[-1] == pl.ABORTED
    lines, _, _ = engine.get_log(run.id)
    assert lines[-1].endswith("Finished: ABORTED")


def test_approval_timeout_aborts(tmp_path, engine_factory):
    engine = engine_factory({"p": spec_from(steps_pipeline("p", "true", approval=1))})
    run = engine.enqueue("p", make_revision(), "manual")
    run = engine.wait_run(run.id, 20)
    assert run.state == pl.ABORTED
    assert run.gate.decision == "timeout"


def test_concurrent_decisions_one_winner(tmp_path, engine_factory):
    engine = engine_factory({"p": spec_from(steps_pipeline("p", "true", approval=30))})
    run = engine.enqueue("p", make_revision(), "manual")
    engine.wait_run(run.id, 20, until=pl.WAITING_APPROVAL)

    barrier = threading.Barrier(2)
    outcomes = []

    def decide(decision):
        barrier.wait()
        try:
            engine.resolve_approval(run.id, decision, decision + "-er")
            outcomes.append(("ok", decision))
        except NotWaiting:
            outcomes.append(("not_waiting", decision))

    threads = [
        threading.Thread(target=decide, args=("approve",)),
        threading.Thread(target=decide, args=("reject",)),
    ]
    for thread in threads:
        thread.start()
    for thread in threads:
        thread.join()
    winners = [o for o in outcomes if o[0] == "ok"]
    losers = [o for o in outcomes if o[0] == "not_waiting"]
    assert len(winners) == 1 and len(losers) == 1
    final = engine.wait_run(run.id, 20)
    assert final.gate.decision == winners[0][1]


def test_resolve_approval_on_non_waiting_run(tmp_path, engine_factory):
    engine = engine_factory({"p": spec_from(steps_pipeline("p", "true"))})
    run = engine.enqueue("p", make_revision(), "manual")
    engine.wait_run(run.id, 20)
    with pytest.raises(NotWaiting):
        engine.resolve_approval(run.id, "approve", "late")
    with pytest.raises(UnknownRun):
        engine.resolve_approval("nope-9", "approve", "x")


# --- logs, persistence, workspaces -------------------------------------------


def test_every_command_logged_and_final_line(tmp_path, engine_factory):
    commands = ["echo one", "echo two", "echo three"]
    engine = engine_factory({"p": spec_from(steps_pipeline("p", *commands))})
    run = engine.enqueue("p", make_revision(), "manual")
    run = engine.wait_run(run.id, 20)
    lines, _, _ = engine.get_log(run.id)
    for command in commands:
        assert any(f"sys: + {command}" in line for line in lines), command
    assert lines[-1].endswith("[run] sys: Finished: SUCCESS")
    pattern = re.compile(
        r"^\[\d{4}-\d{2}-\d{2}T\d{2}:\d{2}:\d{2}\.\d+Z\] \[[^\]]+\] (out|err|sys): "
    )
    for line in lines:
        assert pattern.match(line), line


def test_log_file_matches_events(tmp_path, engine_factory):
    engine = engine_factory({"p": spec_from(steps_pipeline("p", "echo hi", "echo yo"))})
    run = engine.enqueue("p", make_revision(), "manual")
    run = engine.wait_run(run.id, 20)
    lines, _, _ = engine.get_log(run.id, 0, 10_000)
    on_disk = (engine.run_dir(run) / "log").read_text().splitlines()
    assert lines == on_disk


def test_run_json_persisted_and_replayable(tmp_path, engine_factory):
    engine = engine_factory({"p": spec_from(steps_pipeline("p", "true", approval=5))})
    run = engine.enqueue("p", make_revision(), "manual")
    engine.wait_run(run.id, 20, until=pl.WAITING_APPROVAL)
    engine.resolve_approval(run.id, "approve", "ok")
    run = engine.wait_run(run.id, 20)

    stored = read_json(engine.run_dir(run) / "run.json")
    replayed = pl.Run.from_json_value(stored)
    assert replayed.state == pl.SUCCEEDED
    transitions = [(src, dst) for src, dst, _ in replayed.history]
    assert transitions[0] == (pl.QUEUED, pl.RUNNING)
    for src, dst in transitions:
        assert (src, dst) in pl.ALLOWED_TRANSITIONS, (src, dst)


def test_workspace_isolation_and_retention(tmp_path, engine_factory):
    engine = engine_factory(
        {"p": spec_from(steps_pipeline("p", "echo w"))}, workspace_retention=2
    )
    run_ids = []
    for index in range(4):
        run = engine.enqueue("p", make_revision(f"r{index}"), "manual")
        engine.wait_run(run.id, 20)
        run_ids.append(run.id)
    assert len(set(run_ids)) == 4
    workspace_root = tmp_path / "data" / "workspaces" / "p"
    remaining = sorted(p.name for p in workspace_root.iterdir())
    assert remaining == ["p-3", "p-4"]


def test_engine_restart_marks_stale_runs_aborted(tmp_path):
    spec = spec_from(steps_pipeline("p", "true"))
    engine = PipelineEngine(tmp_path / "data", {"p": spec})
    engine.start()
    run = engine.enqueue("p", make_revision(), "manual")
    engine.wait_run(run.id, 20)
    engine.stop()

    # Forge a crashed run on disk.
    crashed = pl.Run("p-9", "p", make_revision("crash"), "poll", state=pl.RUNNING)
    crashed.history = [(pl.QUEUED, pl.RUNNING, scm.utcnow())]
    crashed.started = scm.utcnow()
    crash_dir = tmp_path / "data" / "runs" / "p" / "p-9"
    crash_dir.mkdir(parents=True)
    from flowline.jsonio import write_canonical

    write_canonical(crash_dir / "run.json", crashed.to_json_value())

    engine2 = PipelineEngine(tmp_path / "data", {"p": spec})
    engine2.start()
    try:
        revived = engine2.get_run("p-9")
        assert revived.state == pl.ABORTED
        lines, _, complete = engine2.get_log("p-9")
        assert complete and lines[-1].endswith("Finished: ABORTED")
        # Counter resumes past the forged run id.
        new_run = engine2.enqueue("p", make_revision("next"), "manual")
        assert new_run.id == "p-10"
    finally:
        engine2.stop()


def test_fail_fast_property_random_failure_points(tmp_path, engine_factory):
    rng = random.Random(42)
    stage_count = 4
    for trial in range(3):
        fail_at = rng.randrange(stage_count)
        stages = "".join(
            f'  stage "s{i}" {{ run = ["{"false" if i == fail_at else "true"}"] }}\n'
            for i in range(stage_count)
        )
        name = f"ff{trial}"
        engine = engine_factory({name: spec_from(f'pipeline "{name}" {{\n{stages}}}\n')})
        run = engine.enqueue(name, make_revision(name), "manual")
        run = engine.wait_run(run.id, 20)
        statuses = [s.status for s in run.stage_results]
        expected = (
            [pl.SUCCEEDED] * fail_at
            + [pl.FAILED]
            + [pl.SKIPPED] * (stage_count - fail_at - 1)
        )
        assert statuses == expected
        assert run.metrics.first_failure_stage_ordinal == fail_at + 1
