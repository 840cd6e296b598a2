"""In-memory provider with deterministic ids and an operation journal."""

from __future__ import annotations

import hashlib
import json

from .base import NotFound, PASSWORD_LENGTH, Provider, RESOURCE_TYPES


class MockProvider(Provider):
    """Deterministic backend for tests: no filesystem, no processes.

    Ids are ``mock-1``, ``mock-2``, ... per provider instance. Every
    create/update/delete call is appended to `journal` (and optionally to a
    JSON-lines file) as ``{op, type, id, attrs}``.
    """

    name = "mock"

    def __init__(self, journal_path=None):
        self._counter = 0
        self._live = {}  # id -> (type_name, attrs dict incl. computed)
        self.journal = []
        self._journal_path = journal_path

    def _record(self, op, type_name, resource_id, attrs):
        entry = {"op": op, "type": type_name, "id": resource_id, "attrs": dict(attrs)}
        self.journal.append(entry)
        if self._journal_path:
            with open(self._journal_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")

    def live_count(self) -> int:
        return len(self._live)

    def _computed_for(self, type_name, resource_id, attrs):
        serial = int(resource_id.split("-")[1])
        if type_name == "local_instance":
            port = attrs.get("port") or 40000 + serial
            addr = f"127.0.0.1:{port}"
            password = hashlib.sha256(
                f"mock-admin-{resource_id}".encode()
            ).hexdigest()[:PASSWORD_LENGTH]
            return {
                "id": resource_id,
                "addr": addr,
                "url": f"http://{addr}/",
                "admin_password": password,
                "root_dir": f"/mock/{resource_id}",
            }
        if type_name == "local_site":
            instance_id = attrs["instance"]
            record = self._live.get(instance_id)
            root = record[1]["root_dir"] if record else f"/mock/{instance_id}"
            return {
                "id": resource_id,
                "path": f"{root}/www/{attrs['doc_root']}",
            }
        if type_name == "local_file":
            digest = hashlib.sha256(str(attrs["content"]).encode()).hexdigest()
            return {"id": resource_id, "sha256": digest}
        raise NotFound(type_name)

    def create(self, type_name, attrs):
        if type_name not in RESOURCE_TYPES:
            raise NotFound(type_name)
        self._counter += 1
        resource_id = f"mock-{self._counter}"
        computed = self._computed_for(type_name, resource_id, attrs)
        self._live[resource_id] = (type_name, {**attrs, **computed})
        self._record("create", type_name, resource_id, attrs)
        return resource_id, computed

    def update(self, type_name, resource_id, old_attrs, new_attrs):
        if resource_id not in self._live:
            raise NotFound(resource_id)
        computed = self._computed_for(type_name, resource_id, new_attrs)
        # Identity survives updates.
        computed["id"] = resource_id
        if type_name == "local_instance":
            computed["admin_password"] = self._live[resource_id][1]["admin_password"]
        self._live[resource_id] = (type_name, {**new_attrs, **computed})
        self._record("update", type_name, resource_id, new_attrs)
        return computed

    def delete(self, type_name, resource_id):
        self._live.pop(resource_id, None)
        self._record("delete", type_name, resource_id, {})
