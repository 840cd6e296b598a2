"""Operator CLI: `infra` for provisioning, `ci` for pipelines.

Exit codes: 0 success (for plan: no changes), 1 runtime or validation
failure, 2 plan has changes (only with --detailed-exitcode), 64 usage
error. Diagnostics go to stderr, results to stdout.
"""

from __future__ import annotations

import argparse
import signal
import sys
import time
from pathlib import Path

import requests

from . import dsl, iac, pipeline as pl, scm, server
from .jsonio import canonical_dumps
from .providers import LocalProvider, MockProvider

USAGE_ERROR = 64


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(USAGE_ERROR)


class CommandError(Exception):
    """Failure with a user-facing message; exits 1."""


# --- infra -----------------------------------------------------------------


def make_providers(state_path) -> dict:
    """Provider registry for one state file.

    The local provider keeps its sandboxes next to the state file so a
    later invocation (destroy, re-plan) finds them again. The mock
    provider is in-memory and meant for tests.
    """
    return {
        "local": LocalProvider(Path(str(state_path) + ".d")),
        "mock": MockProvider(),
    }


def _load_infra(path) -> iac.InfraConfig:
    try:
        return iac.load_config(path)
    except FileNotFoundError:
        raise CommandError(f"no such file: {path}")
    except dsl.PositionedError as exc:
        raise CommandError(f"{path}:{exc}")


def _render_output_value(value) -> str:
    if isinstance(value, list):
        import json

        return json.dumps(value)
    return dsl.value_to_text(value)


def _print_outputs(outputs):
    if not outputs:
        return
    print("\nOutputs:\n")
    for name in sorted(outputs):
        print(f"{name} = {_render_output_value(outputs[name])}")


def _confirm(question: str) -> bool:
    print(f"{question} (yes/no): ", end="", flush=True)
    answer = sys.stdin.readline().strip()
    return answer == "yes"


def cmd_infra_plan(args) -> int:
    config = _load_infra(args.file)
    store = iac.StateStore(args.state)
    state = store.load()
    providers = make_providers(args.state)
    schemas = {name: p.schema() for name, p in providers.items()}
    try:
        plan = iac.plan(config, state, schemas)
    except (iac.SchemaError, iac.UnknownReference, iac.DuplicateAddress,
            iac.CycleError, dsl.ValidationError) as exc:
        raise CommandError(str(exc))
    if args.json:
        print(canonical_dumps(plan.to_json_value()), end="")
    else:
        print(iac.render_plan(plan), end="")
    if args.detailed_exitcode and plan.has_changes:
        return 2
    return 0


def cmd_infra_apply(args) -> int:
    config = _load_infra(args.file)
    store = iac.StateStore(args.state)
    providers = make_providers(args.state)
    schemas = {name: p.schema() for name, p in providers.items()}
    try:
        with store.lock():
            state = store.load()
            plan = iac.plan(config, state, schemas)
            print(iac.render_plan(plan), end="")
            if plan.has_changes and not args.auto_approve:
                if not _confirm("Apply?"):
                    print("Apply cancelled.", file=sys.stderr)
                    return 1
            new_state, outputs = iac.apply(
                plan, config, state, providers, checkpoint=store.save
            )
            store.save(new_state)
    except iac.LockHeld as exc:
        raise CommandError(str(exc))
    except iac.StalePlan as exc:
        raise CommandError(f"stale plan: {exc}")
    except iac.ProviderError as exc:
        raise CommandError(f"apply failed at {exc.address}: {exc.cause}")
    except (iac.SchemaError, iac.UnknownReference, iac.DuplicateAddress,
            iac.CycleError, dsl.ValidationError) as exc:
        raise CommandError(str(exc))
    print(
        f"Apply complete! Resources: {plan.add_count} added, "
        f"{plan.change_count} changed, {plan.destroy_count} destroyed."
    )
    _print_outputs(outputs)
    return 0


def cmd_infra_destroy(args) -> int:
    store = iac.StateStore(args.state)
    providers = make_providers(args.state)
    try:
        with store.lock():
            state = store.load()
            count = len(state.resources)
            if count and not args.auto_approve:
                if not _confirm(f"Destroy {count} resource(s)?"):
                    print("Destroy cancelled.", file=sys.stderr)
                    return 1
            new_state = iac.destroy(state, providers, checkpoint=store.save)
            store.save(new_state)
    except iac.LockHeld as exc:
        raise CommandError(str(exc))
    except iac.ProviderError as exc:
        raise CommandError(f"destroy failed at {exc.address}: {exc.cause}")
    print(f"Destroy complete! Resources: {count} destroyed.")
    return 0


def cmd_infra_output(args) -> int:
    store = iac.StateStore(args.state)
    if not store.path.exists():
        raise CommandError(f"no state at {args.state}")
    outputs = store.load().outputs
    if args.name is None:
        for name in sorted(outputs):
            print(f"{name} = {_render_output_value(outputs[name])}")
        return 0
    if args.name not in outputs:
        raise CommandError(f"no output named '{args.name}'")
    print(_render_output_value(outputs[args.name]))
    return 0


# --- ci ---------------------------------------------------------------------


class ApiClient:
    def __init__(self, base_url: str):
        self.base = base_url.rstrip("/")

    def _url(self, path: str) -> str:
        return self.base + path

    def request(self, method, path, **kwargs):
        try:
            response = requests.request(
                method, self._url(path), timeout=30, **kwargs
            )
        except requests.RequestException as exc:
            raise CommandError(f"cannot reach server at {self.base}: {exc}")
        if response.status_code >= 400:
            try:
                detail = response.json()["error"]["message"]
            except (ValueError, KeyError):
                detail = response.text.strip()
            raise CommandError(f"{method} {path}: {response.status_code}: {detail}")
        return response.json()

    def get(self, path, **kwargs):
        return self.request("GET", path, **kwargs)

    def post(self, path, payload=None):
        return self.request("POST", path, json=payload or {})


def cmd_ci_validate(args) -> int:
    path = Path(args.file)
    try:
        doc = dsl.parse_source(path.read_text(encoding="utf-8"), str(path))
        pl.validate(doc, base_dir=path.parent)
    except FileNotFoundError:
        raise CommandError(f"no such file: {args.file}")
    except dsl.PositionedError as exc:
        raise CommandError(f"{path}:{exc}")
    print("OK")
    return 0


def cmd_ci_serve(args) -> int:
    config = server.ApiConfig(
        listen=args.listen,
        config_dir=args.config,
        data_dir=args.data,
        webhook_token=args.webhook_token,
    )
    try:
        service = server.serve(config)
    except (server.ConfigInvalid, server.AddressInUse) as exc:
        raise CommandError(str(exc))
    print(f"serving on {service.url}", file=sys.stderr)

    def _stop(signum, frame):
        print("shutting down", file=sys.stderr)
        service.stop()

    signal.signal(signal.SIGINT, _stop)
    signal.signal(signal.SIGTERM, _stop)
    service.wait()
    return 0


def _stream_log(client, run_id, follow: bool) -> None:
    offset = 0
    while True:
        page = client.get(f"/api/runs/{run_id}/log?offset={offset}&limit=500")
        for line in page["events"]:
            print(line, flush=True)
        offset = page["next_offset"]
        if page["complete"]:
            return
        if not follow and not page["events"]:
            return
        if not page["events"]:
            time.sleep(0.3)


def cmd_ci_run(args) -> int:
    client = ApiClient(args.server)
    payload = {}
    if args.revision:
        payload["revision"] = args.revision
    run = client.post(f"/api/pipelines/{args.pipeline}/runs", payload)
    print(f"run {run['id']} queued", file=sys.stderr)
    if not args.watch:
        print(run["id"])
        return 0
    _stream_log(client, run["id"], follow=True)
    final = client.get(f"/api/runs/{run['id']}")
    return 0 if final["state"] == "succeeded" else 1


def cmd_ci_approve(args) -> int:
    client = ApiClient(args.server)
    decision = "reject" if args.reject else "approve"
    run = client.post(
        f"/api/runs/{args.run_id}/approval", {"decision": decision, "by": args.by}
    )
    print(f"{run['id']}: {decision} recorded, state {run['state']}")
    return 0


def cmd_ci_logs(args) -> int:
    client = ApiClient(args.server)
    _stream_log(client, args.run_id, follow=args.follow)
    return 0


def cmd_ci_status(args) -> int:
    client = ApiClient(args.server)
    run = client.get(f"/api/runs/{args.run_id}")
    if args.json:
        print(canonical_dumps(run), end="")
        return 0
    print(f"{run['id']}: {run['state']} (revision {run['revision']['id'][:12]})")
    for stage in run["stage_results"]:
        print(f"  {stage['name']}: {stage['status']}")
        for job in stage["job_results"]:
            print(f"    {job['name']}: {job['status']}")
    if run["metrics"]:
        metrics = run["metrics"]
        print(f"  outcome: {metrics['outcome']}")
        if metrics["first_failure_stage_ordinal"]:
            print(f"  first failure at stage: {metrics['first_failure_stage_ordinal']}")
    return 0


# --- parsers -----------------------------------------------------------------


def _build_infra_parser(prog="infra") -> _Parser:
    parser = _Parser(prog=prog, description="Infrastructure plan/apply/destroy")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    plan_p = sub.add_parser("plan", help="show actions needed to match the config")
    plan_p.add_argument("-f", "--file", required=True, help="infrastructure .fl file")
    plan_p.add_argument("--state", default="state.json")
    plan_p.add_argument("--detailed-exitcode", action="store_true")
    plan_p.add_argument("--json", action="store_true")
    plan_p.set_defaults(func=cmd_infra_plan)

    apply_p = sub.add_parser("apply", help="apply the config")
    apply_p.add_argument("-f", "--file", required=True)
    apply_p.add_argument("--state", default="state.json")
    apply_p.add_argument("--auto-approve", action="store_true")
    apply_p.set_defaults(func=cmd_infra_apply)

    destroy_p = sub.add_parser("destroy", help="delete everything in the state")
    destroy_p.add_argument("--state", default="state.json")
    destroy_p.add_argument("--auto-approve", action="store_true")
    destroy_p.set_defaults(func=cmd_infra_destroy)

    output_p = sub.add_parser("output", help="print recorded outputs")
    output_p.add_argument("name", nargs="?")
    output_p.add_argument("--state", default="state.json")
    output_p.set_defaults(func=cmd_infra_output)
    return parser


def _build_ci_parser(prog="ci") -> _Parser:
    parser = _Parser(prog=prog, description="Pipeline service and client")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    validate_p = sub.add_parser("validate", help="check a pipeline document")
    validate_p.add_argument("file")
    validate_p.set_defaults(func=cmd_ci_validate)

    serve_p = sub.add_parser("serve", help="run the pipeline service")
    serve_p.add_argument("--config", required=True, help="directory of .fl documents")
    serve_p.add_argument("--data", required=True, help="state/runs/workspaces directory")
    serve_p.add_argument("--listen", default="127.0.0.1:8080")
    serve_p.add_argument("--webhook-token", default="")
    serve_p.set_defaults(func=cmd_ci_serve)

    run_p = sub.add_parser("run", help="trigger a run")
    run_p.add_argument("pipeline")
    run_p.add_argument("--revision")
    run_p.add_argument("--watch", action="store_true")
    run_p.add_argument("--server", default="http://127.0.0.1:8080")
    run_p.set_defaults(func=cmd_ci_run)

    approve_p = sub.add_parser("approve", help="resolve an approval gate")
    approve_p.add_argument("run_id")
    approve_p.add_argument("--reject", action="store_true")
    approve_p.add_argument("--by", default="cli")
    approve_p.add_argument("--server", default="http://127.0.0.1:8080")
    approve_p.set_defaults(func=cmd_ci_approve)

    logs_p = sub.add_parser("logs", help="print a run's log")
    logs_p.add_argument("run_id")
    logs_p.add_argument("--follow", action="store_true")
    logs_p.add_argument("--server", default="http://127.0.0.1:8080")
    logs_p.set_defaults(func=cmd_ci_logs)

    status_p = sub.add_parser("status", help="summarize a run")
    status_p.add_argument("run_id")
    status_p.add_argument("--json", action="store_true")
    status_p.add_argument("--server", default="http://127.0.0.1:8080")
    status_p.set_defaults(func=cmd_ci_status)
    return parser


def _run(parser: _Parser, argv) -> int:
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else USAGE_ERROR
    try:
        return args.func(args)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 1


def infra_entry(argv=None) -> int:
    return _run(_build_infra_parser(), argv if argv is not None else sys.argv[1:])


def ci_entry(argv=None) -> int:
    return _run(_build_ci_parser(), argv if argv is not None else sys.argv[1:])


def main(argv=None) -> int:
    argv = list(argv if argv is not None else sys.argv[1:])
    if not argv or argv[0] in ("-h", "--help"):
        print("usage: flowline {infra,ci} ...", file=sys.stderr)
        return 0 if argv else USAGE_ERROR
    head, rest = argv[0], argv[1:]
    if head == "infra":
        return infra_entry(rest)
    if head == "ci":
        return ci_entry(rest)
    print(f"flowline: error: unknown command '{head}'", file=sys.stderr)
    return USAGE_ERROR


if __name__ == "__main__":
    sys.exit(main())
