"""Local provider: sandbox directories with real HTTP servers.

Each ``local_instance`` is a directory under the provider's data dir with
a ``www/`` docroot served by a detached static-server process, so created
infrastructure outlives the CLI invocation that applied it. The provider
keeps a registry file mapping resource ids to on-disk records so a later
process (destroy, plan) can find them again.

Instance layout: ``<root_dir>/www/``, ``<root_dir>/admin_password`` (0600),
``<root_dir>/provision.log``, plus ``server.pid``/``server.port``/``server.log``.
"""

from __future__ import annotations

import hashlib
import logging
import os
import secrets
import shutil
import signal
import subprocess
import sys
import time
import urllib.error
import urllib.request
from pathlib import Path

from ..jsonio import read_json, write_canonical
from .base import (
    NotFound,
    PASSWORD_ALPHABET,
    PASSWORD_LENGTH,
    PortUnavailable,
    Provider,
    ProvisionFailed,
)

log = logging.getLogger(__name__)

PROVISION_TIMEOUT_S = 60
SERVER_START_TIMEOUT_S = 10


def _generate_password() -> str:
    return "".join(secrets.choice(PASSWORD_ALPHABET) for _ in range(PASSWORD_LENGTH))


def _pid_alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


class LocalProvider(Provider):
    name = "local"

    def __init__(self, data_dir):
        # Absolute so recorded paths stay valid for processes with other cwds.
        self.data_dir = Path(data_dir).absolute()
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self._registry_path = self.data_dir / "registry.json"

    # -- registry ---------------------------------------------------

    def _registry(self) -> dict:
        if self._registry_path.exists():
            return read_json(self._registry_path)
        return {}

    def _save_registry(self, registry: dict):
        write_canonical(self._registry_path, registry)

    def _register(self, resource_id: str, record: dict):
        registry = self._registry()
        registry[resource_id] = record
        self._save_registry(registry)

    def _unregister(self, resource_id: str):
        registry = self._registry()
        if registry.pop(resource_id, None) is not None:
            self._save_registry(registry)

    # -- create -----------------------------------------------------

    def create(self, type_name, attrs):
        if type_name == "local_instance":
            return self._create_instance(attrs)
        if type_name == "local_site":
            return self._create_site(attrs)
        if type_name == "local_file":
            return self._create_file(attrs)
        raise NotFound(type_name)

    def _create_instance(self, attrs):
        resource_id = f"inst-{secrets.token_hex(4)}"
        root = self.data_dir / "instances" / resource_id
        www = root / "www"
        www.mkdir(parents=True)
        try:
            password = _generate_password()
            password_path = root / "admin_password"
            password_path.write_text(password + "\n", encoding="utf-8")
            password_path.chmod(0o600)

            self._provision(root, attrs.get("provision") or [])
            pid, port = self._start_server(root, int(attrs.get("port") or 0))
        except BaseException:
            shutil.rmtree(root, ignore_errors=True)
            raise

        addr = f"127.0.0.1:{port}"
        self._register(
            resource_id,
            {"type": "local_instance", "root_dir": str(root), "pid": pid, "port": port},
        )
        computed = {
            "id": resource_id,
            "addr": addr,
            "url": f"http://{addr}/",
            "admin_password": password,
            "root_dir": str(root),
        }
        return resource_id, computed

    def _provision(self, root: Path, commands):
        log_path = root / "provision.log"
        with open(log_path, "a", encoding="utf-8") as log_fh:
            for command in commands:
                log_fh.write(f"+ {command}\n")
                log_fh.flush()
                try:
                    proc = subprocess.run(
                        command,
                        shell=True,
                        cwd=root,
                        capture_output=True,
                        text=True,
                        timeout=PROVISION_TIMEOUT_S,
                    )
                except subprocess.TimeoutExpired as exc:
                    output = (exc.stdout or "") + (exc.stderr or "")
                    log_fh.write(output + f"(timed out after {PROVISION_TIMEOUT_S}s)\n")
                    raise ProvisionFailed(command, -1, output) from exc
                output = proc.stdout + proc.stderr
                log_fh.write(output)
                if proc.returncode != 0:
                    log_fh.write(f"(exit {proc.returncode})\n")
                    raise ProvisionFailed(command, proc.returncode, output)

    def _start_server(self, root: Path, port: int):
        www = root / "www"
        port_file = root / "server.port"
        pid_file = root / "server.pid"
        server_log = root / "server.log"
        argv = [
            sys.executable,
            "-m",
            "flowline.providers.static_server",
            "--root",
            str(www),
            "--host",
            "127.0.0.1",
            "--port",
            str(port),
            "--port-file",
            str(port_file),
            "--pid-file",
            str(pid_file),
        ]
        with open(server_log, "ab") as log_fh:
            proc = subprocess.Popen(
                argv,
                stdout=log_fh,
                stderr=log_fh,
                stdin=subprocess.DEVNULL,
                start_new_session=True,
            )
        deadline = time.monotonic() + SERVER_START_TIMEOUT_S
        while time.monotonic() < deadline:
            if port_file.exists():
                break
            if proc.poll() is not None:
                detail = server_log.read_text(encoding="utf-8", errors="replace")
                if proc.returncode == 3:
                    raise PortUnavailable(detail.strip() or f"port {port} unavailable")
                raise OSError(f"instance server exited {proc.returncode}: {detail}")
            time.sleep(0.02)
        else:
            proc.terminate()
            raise OSError("instance server did not report a port in time")
        bound_port = int(port_file.read_text().strip())
        self._wait_healthy(bound_port, deadline)
        return proc.pid, bound_port

    def _wait_healthy(self, port: int, deadline: float):
        url = f"http://127.0.0.1:{port}/__health"
        while True:
            try:
                with urllib.request.urlopen(url, timeout=2) as resp:
                    if resp.status == 200:
                        return
            except (urllib.error.URLError, ConnectionError):
                pass
            if time.monotonic() >= deadline:
                raise OSError(f"instance server on port {port} never became healthy")
            time.sleep(0.02)

    def _create_site(self, attrs):
        instance = self._registry().get(attrs["instance"])
        if instance is None or instance["type"] != "local_instance":
            raise NotFound(attrs["instance"])
        doc_root = attrs["doc_root"].strip("/")
        path = Path(instance["root_dir"]) / "www" / doc_root
        path.mkdir(parents=True, exist_ok=True)
        resource_id = f"site-{secrets.token_hex(4)}"
        self._register(
            resource_id,
            {"type": "local_site", "path": str(path), "instance": attrs["instance"]},
        )
        return resource_id, {"id": resource_id, "path": str(path)}

    def _create_file(self, attrs):
        path = Path(attrs["path"]).absolute()
        path.parent.mkdir(parents=True, exist_ok=True)
        content = attrs["content"]
        path.write_text(content, encoding="utf-8")
        resource_id = f"file-{secrets.token_hex(4)}"
        self._register(resource_id, {"type": "local_file", "path": str(path)})
        digest = hashlib.sha256(content.encode()).hexdigest()
        return resource_id, {"id": resource_id, "sha256": digest}

    # -- update -----------------------------------------------------

    def update(self, type_name, resource_id, old_attrs, new_attrs):
        record = self._registry().get(resource_id)
        if record is None:
            raise NotFound(resource_id)
        if type_name == "local_file":
            path = Path(record["path"])
            content = new_attrs["content"]
            if old_attrs.get("content") != content:
                path.write_text(content, encoding="utf-8")
            digest = hashlib.sha256(content.encode()).hexdigest()
            return {"id": resource_id, "sha256": digest}
        if type_name == "local_instance":
            return self._update_instance(resource_id, record, old_attrs, new_attrs)
        if type_name == "local_site":
            # Both inputs are force_new; updates never carry a diff here.
            return {"id": resource_id, "path": record["path"]}
        raise NotFound(type_name)

    def _update_instance(self, resource_id, record, old_attrs, new_attrs):
        root = Path(record["root_dir"])
        port = record["port"]
        wanted = int(new_attrs.get("port") or 0)
        if wanted not in (0, port) or not _pid_alive(record["pid"]):
            # Port change (or dead server): restart on the requested port.
            self._stop_server(record)
            (root / "server.port").unlink(missing_ok=True)
            pid, port = self._start_server(root, wanted)
            record.update(pid=pid, port=port)
            self._register(resource_id, record)
        addr = f"127.0.0.1:{port}"
        password = (root / "admin_password").read_text(encoding="utf-8").strip()
        return {
            "id": resource_id,
            "addr": addr,
            "url": f"http://{addr}/",
            "admin_password": password,
            "root_dir": str(root),
        }

    # -- delete -----------------------------------------------------

    def delete(self, type_name, resource_id):
        record = self._registry().get(resource_id)
        if record is None:
            log.info("delete of unknown id %s: already gone", resource_id)
            return
        if record["type"] == "local_instance":
            self._stop_server(record)
            shutil.rmtree(record["root_dir"], ignore_errors=True)
        elif record["type"] == "local_site":
            shutil.rmtree(record["path"], ignore_errors=True)
        elif record["type"] == "local_file":
            Path(record["path"]).unlink(missing_ok=True)
        self._unregister(resource_id)

    def _stop_server(self, record: dict):
        pid = record.get("pid")
        if not pid or not _pid_alive(pid):
            return
        try:
            os.kill(pid, signal.SIGTERM)
        except ProcessLookupError:
            return
        deadline = time.monotonic() + 5
        while time.monotonic() < deadline:
            # Reap if it is our child; either way poll until the pid is gone.
            try:
                os.waitpid(pid, os.WNOHANG)
            except ChildProcessError:
                pass
            if not _pid_alive(pid):
                return
            time.sleep(0.02)
        try:
            os.kill(pid, signal.SIGKILL)
        except ProcessLookupError:
            pass
