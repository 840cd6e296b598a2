"""Canonical JSON serialization shared by state files and run records.

Canonical form: keys sorted lexicographically at every level, 2-space
indentation, UTF-8, trailing newline. Equal values always serialize to
identical bytes.
"""

import json
import os
import tempfile


def canonical_dumps(value) -> str:
    return json.dumps(value, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def write_canonical(path, value) -> None:
    """Atomically write `value` to `path` in canonical form."""
    text = canonical_dumps(value)
    directory = os.path.dirname(os.fspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".json")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)
