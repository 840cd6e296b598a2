"""Infrastructure engine: dependency graph, plan, apply, destroy, state.

A parsed infrastructure document declares resources and outputs. The
engine diffs the desired resources against the recorded state file and
produces an ordered plan (create/update/replace/delete/noop), then applies
it through a provider, recording ids and computed attributes back into
state. Values that depend on not-yet-created resources are tracked as
unknown and rendered as ``(known after apply)``.
"""

from __future__ import annotations

import heapq
import os
import uuid
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

from . import dsl
from .dsl import ValidationError
from .jsonio import read_json, write_canonical

CREATE, UPDATE, REPLACE, DELETE, NOOP = "create", "update", "replace", "delete", "noop"

KNOWN_AFTER_APPLY = "(known after apply)"


class _Unknown:
    def __repr__(self):
        return KNOWN_AFTER_APPLY


class _Absent:
    def __repr__(self):
        return "(absent)"


UNKNOWN = _Unknown()
ABSENT = _Absent()


class CycleError(Exception):
    def __init__(self, cycle):
        self.cycle = list(cycle)
        super().__init__("dependency cycle: " + " -> ".join(self.cycle))


class UnknownReference(Exception):
    def __init__(self, address, path):
        self.address = address
        self.path = tuple(path)
        super().__init__(
            f"{address} references unknown resource: " + ".".join(self.path)
        )


class DuplicateAddress(Exception):
    def __init__(self, address):
        self.address = address
        super().__init__(f"duplicate resource address: {address}")


class SchemaError(Exception):
    pass


class StalePlan(Exception):
    pass


class LockHeld(Exception):
    pass


class ProviderError(Exception):
    def __init__(self, address, cause, partial_state=None):
        self.address = address
        self.cause = cause
        self.partial_state = partial_state
        super().__init__(f"{address}: {cause}")


# --- Configuration extraction -------------------------------------------


@dataclass
class ResourceSpec:
    type: str
    name: str
    attrs: dict
    line: int = 0
    col: int = 0

    @property
    def address(self) -> str:
        return f"{self.type}.{self.name}"


@dataclass
class OutputSpec:
    name: str
    value: object
    line: int = 0
    col: int = 0


@dataclass
class InfraConfig:
    provider: str = "local"
    resources: list = field(default_factory=list)
    outputs: list = field(default_factory=list)


_IDENT_OK = dsl._IDENT_START, dsl._IDENT_CONT


def _require_ident(label: str, what: str, line: int, col: int) -> str:
    start, cont = _IDENT_OK
    if not label or label[0] not in start or any(c not in cont for c in label):
        raise ValidationError(f"{what} must be an identifier, got {label!r}", line, col)
    return label


def extract_config(doc: dsl.Document) -> InfraConfig:
    """Split an infrastructure document into provider, resources, outputs."""
    config = InfraConfig()
    seen_provider = False
    seen_outputs = {}
    for item in doc.items:
        if isinstance(item, dsl.Attribute):
            raise ValidationError(
                f"unexpected top-level attribute '{item.name}'", item.line, item.col
            )
        if item.keyword == "provider":
            if seen_provider:
                raise ValidationError("more than one provider block", item.line, item.col)
            if len(item.labels) != 1:
                raise ValidationError(
                    "provider block takes exactly one label", item.line, item.col
                )
            config.provider = _require_ident(
                item.labels[0], "provider name", item.line, item.col
            )
            seen_provider = True
        elif item.keyword == "resource":
            if len(item.labels) != 2:
                raise ValidationError(
                    "resource block takes two labels: type and name",
                    item.line,
                    item.col,
                )
            rtype = _require_ident(item.labels[0], "resource type", item.line, item.col)
            rname = _require_ident(item.labels[1], "resource name", item.line, item.col)
            attrs = {}
            for sub in item.body:
                if not isinstance(sub, dsl.Attribute):
                    raise ValidationError(
                        f"unexpected block '{sub.keyword}' inside resource",
                        sub.line,
                        sub.col,
                    )
                attrs[sub.name] = sub.value
            config.resources.append(ResourceSpec(rtype, rname, attrs, item.line, item.col))
        elif item.keyword == "output":
            if len(item.labels) != 1:
                raise ValidationError(
                    "output block takes exactly one label", item.line, item.col
                )
            name = _require_ident(item.labels[0], "output name", item.line, item.col)
            if name in seen_outputs:
                raise ValidationError(f"duplicate output '{name}'", item.line, item.col)
            value = None
            for sub in item.body:
                if isinstance(sub, dsl.Attribute) and sub.name == "value":
                    value = sub.value
                else:
                    raise ValidationError(
                        "output block supports only a 'value' attribute",
                        sub.line,
                        sub.col,
                    )
            if value is None:
                raise ValidationError(
                    f"output '{name}' is missing its value", item.line, item.col
                )
            spec = OutputSpec(name, value, item.line, item.col)
            seen_outputs[name] = spec
            config.outputs.append(spec)
        else:
            raise ValidationError(
                f"unknown top-level block '{item.keyword}'", item.line, item.col
            )
    return config


def load_config(path) -> InfraConfig:
    text = Path(path).read_text(encoding="utf-8")
    return extract_config(dsl.parse_source(text, str(path)))


# --- Dependency graph ----------------------------------------------------


@dataclass
class DepGraph:
    nodes: set = field(default_factory=set)
    edges: set = field(default_factory=set)  # (dependent, dependency)

    def dependencies_of(self, address: str):
        return sorted(dep for node, dep in self.edges if node == address)


def build_graph(specs) -> DepGraph:
    graph = DepGraph()
    for spec in specs:
        if spec.address in graph.nodes:
            raise DuplicateAddress(spec.address)
        graph.nodes.add(spec.address)
    for spec in specs:
        for expr in spec.attrs.values():
            for ref in dsl.expr_refs(expr):
                target = ".".join(ref.path[:2])
                if target not in graph.nodes:
                    raise UnknownReference(spec.address, ref.path)
                if target != spec.address:
                    graph.edges.add((spec.address, target))
                else:
                    raise CycleError([spec.address, spec.address])
    _find_cycle(graph)
    return graph


def _find_cycle(graph: DepGraph):
    deps = {node: set() for node in graph.nodes}
    for node, dep in graph.edges:
        deps[node].add(dep)
    state = {}  # node -> 1 visiting, 2 done
    stack = []

    def visit(node):
        state[node] = 1
        stack.append(node)
        for dep in sorted(deps[node]):
            mark = state.get(dep)
            if mark == 1:
                cycle = stack[stack.index(dep):] + [dep]
                raise CycleError(cycle)
            if mark is None:
                visit(dep)
        stack.pop()
        state[node] = 2

    for node in sorted(graph.nodes):
        if node not in state:
            visit(node)


def topo_order(graph: DepGraph):
    """Dependencies before dependents; ties broken lexicographically."""
    dependents = {node: [] for node in graph.nodes}
    pending = {node: 0 for node in graph.nodes}
    for node, dep in graph.edges:
        if node not in pending or dep not in pending:
            raise UnknownReference(node, dep.split("."))
        dependents[dep].append(node)
        pending[node] += 1
    ready = [node for node, count in pending.items() if count == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        node = heapq.heappop(ready)
        order.append(node)
        for dependent in dependents[node]:
            pending[dependent] -= 1
            if pending[dependent] == 0:
                heapq.heappush(ready, dependent)
    if len(order) != len(graph.nodes):
        remaining = sorted(set(graph.nodes) - set(order))
        raise CycleError(remaining)
    return order


# --- State ---------------------------------------------------------------


@dataclass
class ResourceState:
    address: str
    provider: str
    id: str
    attrs: dict
    depends_on: list = field(default_factory=list)

    @property
    def type(self) -> str:
        return self.address.split(".", 1)[0]

    def to_json_value(self):
        return {
            "address": self.address,
            "attrs": self.attrs,
            "depends_on": list(self.depends_on),
            "id": self.id,
            "provider": self.provider,
        }

    @classmethod
    def from_json_value(cls, value):
        return cls(
            address=value["address"],
            provider=value["provider"],
            id=value["id"],
            attrs=dict(value["attrs"]),
            depends_on=list(value["depends_on"]),
        )


@dataclass
class StateFile:
    version: int = 1
    serial: int = 0
    lineage: str = ""
    resources: list = field(default_factory=list)
    outputs: dict = field(default_factory=dict)

    def resource(self, address: str):
        for record in self.resources:
            if record.address == address:
                return record
        return None

    def to_json_value(self):
        return {
            "version": self.version,
            "serial": self.serial,
            "lineage": self.lineage,
            "resources": [
                r.to_json_value() for r in sorted(self.resources, key=lambda r: r.address)
            ],
            "outputs": self.outputs,
        }

    @classmethod
    def from_json_value(cls, value):
        return cls(
            version=value["version"],
            serial=value["serial"],
            lineage=value["lineage"],
            resources=[ResourceState.from_json_value(r) for r in value["resources"]],
            outputs=dict(value["outputs"]),
        )

    def copy(self) -> "StateFile":
        return StateFile.from_json_value(self.to_json_value())


class StateStore:
    """State file IO plus the single-writer lock (`<state>.lock`)."""

    def __init__(self, path):
        self.path = Path(path)

    def load(self) -> StateFile:
        if not self.path.exists():
            return StateFile(lineage=str(uuid.uuid4()))
        return StateFile.from_json_value(read_json(self.path))

    def save(self, state: StateFile):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        write_canonical(self.path, state.to_json_value())

    @contextmanager
    def lock(self):
        lock_path = Path(str(self.path) + ".lock")
        lock_path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise LockHeld(f"state is locked by another writer: {lock_path}") from None
        try:
            os.write(fd, f"{os.getpid()}\n".encode())
            os.close(fd)
            yield
        finally:
            try:
                os.unlink(lock_path)
            except OSError:
                pass


# --- Plan ----------------------------------------------------------------


@dataclass
class AttrDiff:
    name: str
    old: object  # Value or ABSENT
    new: object  # Value, UNKNOWN, or ABSENT


@dataclass
class PlanEntry:
    address: str
    action: str
    attr_diffs: list = field(default_factory=list)


@dataclass
class Plan:
    entries: list
    state_serial: int

    @property
    def add_count(self):
        return sum(1 for e in self.entries if e.action in (CREATE, REPLACE))

    @property
    def change_count(self):
        return sum(1 for e in self.entries if e.action == UPDATE)

    @property
    def destroy_count(self):
        return sum(1 for e in self.entries if e.action in (DELETE, REPLACE))

    @property
    def has_changes(self):
        return any(e.action != NOOP for e in self.entries)

    def to_json_value(self):
        def encode(value):
            if value is UNKNOWN:
                return KNOWN_AFTER_APPLY
            if value is ABSENT:
                return None
            return value

        return {
            "state_serial": self.state_serial,
            "entries": [
                {
                    "address": e.address,
                    "action": e.action,
                    "diffs": [
                        {"name": d.name, "old": encode(d.old), "new": encode(d.new)}
                        for d in e.attr_diffs
                    ],
                }
                for e in self.entries
            ],
            "summary": {
                "add": self.add_count,
                "change": self.change_count,
                "destroy": self.destroy_count,
            },
        }


_ACTION_PREFIX = {CREATE: "+", UPDATE: "~", DELETE: "-", REPLACE: "-/+"}


def render_plan(plan: Plan) -> str:
    lines = [
        f"{_ACTION_PREFIX[e.action]} {e.address}"
        for e in plan.entries
        if e.action != NOOP
    ]
    lines.append(
        f"Plan: {plan.add_count} to add, {plan.change_count} to change, "
        f"{plan.destroy_count} to destroy."
    )
    return "".join(line + "\n" for line in lines)


def _check_kind(address, attr_name, kind, value):
    if kind == "text":
        good = isinstance(value, str)
    elif kind == "number":
        good = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif kind == "bool":
        good = isinstance(value, bool)
    else:
        good = isinstance(value, list)
    if not good:
        raise ValidationError(
            f"attribute '{attr_name}' of {address} expects {kind}, "
            f"got {type(value).__name__}"
        )


def _resolve_expr(expr, scope, schema_types, address):
    """Evaluate an attribute expression at plan time.

    `scope` maps ``type.name.attr`` to a concrete value or UNKNOWN; any
    unknown input taints the whole result.
    """
    if isinstance(expr, dsl.Num):
        return expr.value
    if isinstance(expr, dsl.Bool):
        return expr.value
    if isinstance(expr, dsl.Ref):
        return _resolve_ref(expr, scope, schema_types, address)
    if isinstance(expr, dsl.ListExpr):
        values = [_resolve_expr(e, scope, schema_types, address) for e in expr.items]
        if any(v is UNKNOWN for v in values):
            return UNKNOWN
        return values
    if isinstance(expr, dsl.Str):
        out = []
        for part in expr.parts:
            if isinstance(part, str):
                out.append(part)
                continue
            value = _resolve_ref(part, scope, schema_types, address)
            if value is UNKNOWN:
                return UNKNOWN
            if isinstance(value, list):
                raise dsl.TypeMismatch(
                    f"cannot interpolate list value {part.dotted()} into a string"
                )
            out.append(dsl.value_to_text(value))
        return "".join(out)
    raise TypeError(f"not an expression: {expr!r}")


def _resolve_ref(ref, scope, schema_types, address):
    if len(ref.path) != 3:
        raise SchemaError(
            f"{address}: reference {ref.dotted()} must name "
            "a resource attribute (type.name.attr)"
        )
    target_type, _, attr_name = ref.path
    target_schema = schema_types.get(target_type)
    if target_schema is None or target_schema.attr(attr_name) is None:
        raise SchemaError(
            f"{address}: {ref.dotted()} names no attribute of {target_type}"
        )
    key = ref.dotted()
    if key not in scope:
        raise UnknownReference(address, ref.path)
    return scope[key]


def _resolve_inputs(spec, scope, schema_types):
    """Resolved input attrs for one resource, defaults applied."""
    type_schema = schema_types.get(spec.type)
    if type_schema is None:
        raise SchemaError(f"unknown resource type: {spec.type}")
    for name in spec.attrs:
        attr_schema = type_schema.attr(name)
        if attr_schema is None:
            raise SchemaError(f"{spec.address}: unknown attribute '{name}'")
        if attr_schema.computed:
            raise SchemaError(
                f"{spec.address}: '{name}' is computed and cannot be set"
            )
    resolved = {}
    for attr_schema in type_schema.inputs():
        name = attr_schema.name
        if name in spec.attrs:
            value = _resolve_expr(spec.attrs[name], scope, schema_types, spec.address)
        elif attr_schema.required:
            raise ValidationError(
                f"{spec.address}: missing required attribute '{name}'",
                spec.line,
                spec.col,
            )
        else:
            default = attr_schema.default
            value = list(default) if isinstance(default, tuple) else default
        if value is not UNKNOWN and value is not None:
            _check_kind(spec.address, name, attr_schema.kind, value)
        resolved[name] = value
    return resolved


def _delete_order(state: StateFile, addresses):
    """Reverse topological order over the state's recorded depends_on."""
    graph = DepGraph(nodes=set(addresses))
    for record in state.resources:
        if record.address not in graph.nodes:
            continue
        for dep in record.depends_on:
            if dep in graph.nodes:
                graph.edges.add((record.address, dep))
    return list(reversed(topo_order(graph)))


def plan(config: InfraConfig, state: StateFile, schemas) -> Plan:
    """Diff desired resources against state into an ordered action list."""
    provider_schema = schemas.get(config.provider)
    if provider_schema is None:
        raise SchemaError(f"no schema for provider '{config.provider}'")
    schema_types = provider_schema.resource_types

    graph = build_graph(config.resources)
    order = topo_order(graph)
    by_address = {spec.address: spec for spec in config.resources}
    desired = set(by_address)

    # Output expressions must point at declared resources and real attributes.
    for output in config.outputs:
        for ref in dsl.expr_refs(output.value):
            target = ".".join(ref.path[:2])
            if target not in desired:
                raise UnknownReference(f"output.{output.name}", ref.path)

    deleted = [r.address for r in state.resources if r.address not in desired]
    entries = [
        PlanEntry(
            address,
            DELETE,
            [
                AttrDiff(name, value, ABSENT)
                for name, value in sorted(state.resource(address).attrs.items())
            ],
        )
        for address in _delete_order(state, deleted)
    ]

    scope = {}
    for address in order:
        spec = by_address[address]
        new_inputs = _resolve_inputs(spec, scope, schema_types)
        type_schema = schema_types[spec.type]
        old = state.resource(address)
        if old is None:
            action = CREATE
            diffs = [
                AttrDiff(name, ABSENT, value) for name, value in sorted(new_inputs.items())
            ]
            diffs += [
                AttrDiff(a.name, ABSENT, UNKNOWN) for a in type_schema.computed()
            ]
        else:
            diffs = []
            force = False
            for name, new_value in sorted(new_inputs.items()):
                old_value = old.attrs.get(name, ABSENT)
                if new_value is UNKNOWN or new_value != old_value:
                    diffs.append(AttrDiff(name, old_value, new_value))
                    if type_schema.attr(name).force_new:
                        force = True
            action = (REPLACE if force else UPDATE) if diffs else NOOP
        entries.append(PlanEntry(address, action, diffs))

        for name, value in new_inputs.items():
            scope[f"{address}.{name}"] = value
        for attr_schema in type_schema.computed():
            if action == NOOP:
                scope[f"{address}.{attr_schema.name}"] = old.attrs.get(attr_schema.name)
            else:
                scope[f"{address}.{attr_schema.name}"] = UNKNOWN

    return Plan(entries, state.serial)


# --- Apply / destroy ------------------------------------------------------


def _concrete_inputs(spec, scope, schema_types):
    resolved = _resolve_inputs(spec, scope, schema_types)
    for name, value in resolved.items():
        if value is UNKNOWN:
            raise ProviderError(
                spec.address, f"attribute '{name}' failed to resolve during apply"
            )
    return resolved


def _evaluate_outputs(outputs, scope):
    return {o.name: dsl.eval_expr(o.value, scope) for o in outputs}


def apply(plan_obj: Plan, config: InfraConfig, state: StateFile, providers, checkpoint=None):
    """Execute a plan. Returns (new_state, outputs).

    `checkpoint`, when given, is called with the evolving state after every
    resource mutation so partially-applied work is never lost. On failure a
    ProviderError carrying the partial state is raised; everything completed
    stays recorded.
    """
    if plan_obj.state_serial != state.serial:
        raise StalePlan(
            f"plan was computed against serial {plan_obj.state_serial}, "
            f"state is now at {state.serial}"
        )
    provider = providers[config.provider]
    schema_types = provider.schema().resource_types
    graph = build_graph(config.resources)
    by_address = {spec.address: spec for spec in config.resources}

    scope = {}

    def publish(record: ResourceState):
        for name, value in record.attrs.items():
            scope[f"{record.address}.{name}"] = value

    if not plan_obj.has_changes:
        for record in state.resources:
            publish(record)
        outputs = _evaluate_outputs(config.outputs, scope)
        if outputs == state.outputs:
            return state, dict(outputs)
        new_state = state.copy()
        new_state.serial += 1
        new_state.outputs = outputs
        if checkpoint:
            checkpoint(new_state)
        return new_state, dict(outputs)

    new_state = state.copy()
    new_state.serial += 1
    new_state.outputs = {}

    def save():
        if checkpoint:
            checkpoint(new_state)

    def remove(address):
        new_state.resources = [r for r in new_state.resources if r.address != address]

    def run_create(spec):
        inputs = _concrete_inputs(spec, scope, schema_types)
        resource_id, computed = provider.create(spec.type, inputs)
        record = ResourceState(
            address=spec.address,
            provider=config.provider,
            id=resource_id,
            attrs={**inputs, **computed},
            depends_on=graph.dependencies_of(spec.address),
        )
        new_state.resources.append(record)
        publish(record)
        save()

    for entry in plan_obj.entries:
        old = state.resource(entry.address)
        spec = by_address.get(entry.address)
        try:
            if entry.action == NOOP:
                publish(old)
            elif entry.action == DELETE:
                provider.delete(old.type, old.id)
                remove(entry.address)
                save()
            elif entry.action == CREATE:
                run_create(spec)
            elif entry.action == REPLACE:
                provider.delete(old.type, old.id)
                remove(entry.address)
                save()
                run_create(spec)
            elif entry.action == UPDATE:
                inputs = _concrete_inputs(spec, scope, schema_types)
                computed = provider.update(spec.type, old.id, dict(old.attrs), inputs)
                record = ResourceState(
                    address=spec.address,
                    provider=config.provider,
                    id=old.id,
                    attrs={**inputs, **computed},
                    depends_on=graph.dependencies_of(spec.address),
                )
                remove(entry.address)
                new_state.resources.append(record)
                publish(record)
                save()
        except ProviderError:
            save()
            raise
        except Exception as exc:
            save()
            raise ProviderError(entry.address, exc, partial_state=new_state) from exc

    outputs = _evaluate_outputs(config.outputs, scope)
    new_state.outputs = outputs
    save()
    return new_state, dict(outputs)


def destroy(state: StateFile, providers, checkpoint=None) -> StateFile:
    """Delete every recorded resource, dependents first."""
    new_state = state.copy()
    new_state.serial += 1
    new_state.outputs = {}
    order = _delete_order(state, [r.address for r in state.resources])
    for address in order:
        record = state.resource(address)
        provider = providers[record.provider]
        try:
            provider.delete(record.type, record.id)
        except Exception as exc:
            if checkpoint:
                checkpoint(new_state)
            raise ProviderError(address, exc, partial_state=new_state) from exc
        new_state.resources = [r for r in new_state.resources if r.address != address]
        if checkpoint:
            checkpoint(new_state)
    if checkpoint:
        checkpoint(new_state)
    return new_state
