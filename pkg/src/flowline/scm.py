"""Source revisions, checkouts, and the polling trigger.

Two repository kinds: ``git`` (driven through the installed git binary)
and ``dir`` (a plain directory whose revision id is a content hash, so the
core suite needs no git at all).

The dir revision id is the SHA-256 of a canonical listing: for every
regular file in lexicographic relative-path order, the line
``<relpath>\\0<sha256-of-bytes>\\n``, hashed as one stream. Symlinks and
empty directories are excluded.
"""

from __future__ import annotations

import hashlib
import logging
import shutil
import subprocess
import threading
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

log = logging.getLogger(__name__)


class RepoUnreachable(Exception):
    pass


class BranchNotFound(Exception):
    pass


class RevisionVanished(Exception):
    pass


class CheckoutError(Exception):
    pass


def utcnow() -> datetime:
    return datetime.now(timezone.utc)


@dataclass(frozen=True)
class RepoRef:
    kind: str  # git | dir
    location: str
    branch: str = "main"

    def __post_init__(self):
        if self.kind not in ("git", "dir"):
            raise ValueError(f"unknown repo kind: {self.kind}")
        if not self.location:
            raise ValueError("repo location must be non-empty")


@dataclass(frozen=True)
class Revision:
    id: str
    message: str = None
    observed_at: datetime = field(default_factory=utcnow, compare=False)


@dataclass(frozen=True)
class PollerConfig:
    repo: RepoRef
    interval_s: float
    pipeline: str

    def __post_init__(self):
        if self.interval_s < 1:
            raise ValueError("poll interval must be at least 1 second")


def _iter_regular_files(root: Path):
    for path in sorted(root.rglob("*"), key=lambda p: str(p.relative_to(root))):
        if path.is_symlink() or not path.is_file():
            continue
        yield path.relative_to(root).as_posix(), path


def dir_tree_hash(root) -> str:
    root = Path(root)
    if not root.is_dir():
        raise RepoUnreachable(f"not a directory: {root}")
    hasher = hashlib.sha256()
    for relpath, path in _iter_regular_files(root):
        digest = hashlib.sha256(path.read_bytes()).hexdigest()
        hasher.update(f"{relpath}\0{digest}\n".encode())
    return hasher.hexdigest()


def _git(args, cwd=None):
    try:
        proc = subprocess.run(
            ["git", *args], cwd=cwd, capture_output=True, text=True, timeout=60
        )
    except FileNotFoundError as exc:
        raise RepoUnreachable("git executable not found") from exc
    except subprocess.TimeoutExpired as exc:
        raise RepoUnreachable(f"git {' '.join(args)} timed out") from exc
    return proc


def _git_head(repo: RepoRef) -> Revision:
    location = Path(repo.location)
    if location.is_dir():
        proc = _git(["rev-parse", "--verify", f"refs/heads/{repo.branch}"], cwd=location)
        if proc.returncode != 0:
            probe = _git(["rev-parse", "--git-dir"], cwd=location)
            if probe.returncode != 0:
                raise RepoUnreachable(f"not a git repository: {location}")
            raise BranchNotFound(f"no branch '{repo.branch}' in {location}")
        commit = proc.stdout.strip()
        message = None
        shown = _git(["log", "-1", "--format=%s", commit], cwd=location)
        if shown.returncode == 0:
            message = shown.stdout.strip() or None
        return Revision(commit, message)
    proc = _git(["ls-remote", repo.location, f"refs/heads/{repo.branch}"])
    if proc.returncode != 0:
        raise RepoUnreachable(proc.stderr.strip() or f"cannot reach {repo.location}")
    line = proc.stdout.strip()
    if not line:
        raise BranchNotFound(f"no branch '{repo.branch}' at {repo.location}")
    return Revision(line.split()[0])


def head(repo: RepoRef) -> Revision:
    """Current tip of the repository: commit id (git) or tree hash (dir)."""
    if repo.kind == "git":
        return _git_head(repo)
    return Revision(dir_tree_hash(repo.location))


def checkout(repo: RepoRef, rev: Revision, dest) -> None:
    """Materialize the tree at `rev` into `dest` (which must be empty/absent)."""
    dest = Path(dest)
    if dest.exists() and any(dest.iterdir()):
        raise CheckoutError(f"destination not empty: {dest}")
    dest.mkdir(parents=True, exist_ok=True)
    if repo.kind == "git":
        proc = _git(["clone", "--quiet", repo.location, str(dest)])
        if proc.returncode != 0:
            shutil.rmtree(dest, ignore_errors=True)
            raise RepoUnreachable(proc.stderr.strip() or f"cannot clone {repo.location}")
        proc = _git(["checkout", "--quiet", "--detach", rev.id], cwd=dest)
        if proc.returncode != 0:
            shutil.rmtree(dest, ignore_errors=True)
            raise RepoUnreachable(
                proc.stderr.strip() or f"cannot check out {rev.id}"
            )
        return
    # Dir repos have no history: a copy is only the requested revision while
    # the head still matches it.
    current = dir_tree_hash(repo.location)
    if current != rev.id:
        raise RevisionVanished(
            f"directory {repo.location} moved on from {rev.id[:12]}"
        )
    root = Path(repo.location)
    for relpath, path in _iter_regular_files(root):
        target = dest / relpath
        target.parent.mkdir(parents=True, exist_ok=True)
        shutil.copyfile(path, target)


def poll_once(cfg: PollerConfig, last_seen: Revision = None):
    """Return the new head iff it differs from `last_seen`, else None."""
    try:
        current = head(cfg.repo)
    except (RepoUnreachable, BranchNotFound) as exc:
        log.warning("poll of %s failed: %s", cfg.repo.location, exc)
        return None
    if last_seen is not None and current.id == last_seen.id:
        return None
    return current


class Poller(threading.Thread):
    """Watches one repository and hands changed revisions to a callback.

    The head observed at startup becomes the baseline: only subsequent
    changes trigger. Poll failures are logged and retried next tick.
    """

    def __init__(self, cfg: PollerConfig, on_revision):
        super().__init__(name=f"poller-{cfg.pipeline}", daemon=True)
        self.cfg = cfg
        self.on_revision = on_revision
        self._stop_event = threading.Event()
        self.last_seen = None

    def run(self):
        try:
            self.last_seen = head(self.cfg.repo)
        except (RepoUnreachable, BranchNotFound) as exc:
            log.warning("initial poll of %s failed: %s", self.cfg.repo.location, exc)
        while not self._stop_event.wait(self.cfg.interval_s):
            revision = poll_once(self.cfg, self.last_seen)
            if revision is not None:
                self.last_seen = revision
                try:
                    self.on_revision(revision)
                except Exception:
                    log.exception("trigger callback failed for %s", self.cfg.pipeline)

    def stop(self, wait=True):
        self._stop_event.set()
        if wait and self.is_alive():
            self.join(timeout=self.cfg.interval_s + 5)


def wait_for_change(cfg: PollerConfig, last_seen, timeout_s: float):
    """Poll until a new revision appears or the timeout passes (test helper)."""
    deadline = time.monotonic() + timeout_s
    while time.monotonic() < deadline:
        revision = poll_once(cfg, last_seen)
        if revision is not None:
            return revision
        time.sleep(min(cfg.interval_s, 0.1))
    return None
