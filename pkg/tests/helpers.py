"""Shared fixtures-in-code: repo builders, doc generators, oracles."""

from __future__ import annotations

import random
import re
import socket
import time
from pathlib import Path

from flowline import dsl

SAMPLES = Path(__file__).resolve().parent.parent / "samples"

FIG7_FILES = {
    "index.html": "<h1>site</h1>\n",
    "any.html": "<p>any page</p>\n",
    "Jenkinsfile": "pipeline { stages { } }\n",
}


def make_dir_repo(path, files) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for relpath, content in files.items():
        target = path / relpath
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(content, encoding="utf-8")
    return path


def pipeline_text(
    repo,
    name="site",
    interval=1,
    target="prod",
    webhook=False,
    approval_timeout=60,
):
    webhook_line = "    webhook = true\n" if webhook else ""
    return f'''pipeline "{name}" {{
  trigger {{
    poll = true
    repo = "{repo}"
    kind = "dir"
    interval = {interval}
{webhook_line}  }}

  stage "pull" {{
    checkout = true
  }}

  stage "build" {{
    run = ["echo building revision $REVISION"]
  }}

  stage "test" {{
    ephemeral_env = true

    job "unit" {{
      run = ["test -f index.html"]
    }}

    job "smoke" {{
      run = ["curl -fsS $TEST_ENV_URL/index.html > /dev/null"]
    }}
  }}

  stage "deploy" {{
    approval {{
      prompt = "Deploy to production?"
      timeout = {approval_timeout}
    }}
    target = "{target}"
    files = ["any.html", "index.html", "Jenkinsfile"]
  }}
}}
'''


def wait_until(predicate, timeout_s=10.0, interval_s=0.02, message="condition"):
    deadline = time.monotonic() + timeout_s
    while time.monotonic() < deadline:
        result = predicate()
        if result:
            return result
        time.sleep(interval_s)
    raise TimeoutError(f"timed out waiting for {message}")


def free_port() -> int:
    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


def port_refuses(port, timeout_s=2.0) -> bool:
    deadline = time.monotonic() + timeout_s
    while time.monotonic() < deadline:
        with socket.socket() as sock:
            sock.settimeout(0.2)
            if sock.connect_ex(("127.0.0.1", port)) != 0:
                return True
        time.sleep(0.05)
    return False


# --- Independent regex-based tokenizer (oracle for the lexer) -----------

_ORACLE_TOKEN = re.compile(
    r'(?P<comment>#[^\n]*)'
    r'|(?P<string>"(?:\\.|[^"\\\n])*")'
    r'|(?P<number>-?[0-9]+(?:\.[0-9]+)?)'
    r'|(?P<word>[A-Za-z_][A-Za-z0-9_-]*)'
    r'|(?P<interp_open>\$\{)'
    r'|(?P<punct>[={}\[\],.])'
    r'|(?P<space>[ \t\r\n]+)'
)

_ORACLE_ESCAPES = {'"': '"', "\\": "\\", "n": "\n", "t": "\t", "$": "$"}


def _oracle_decode(raw: str) -> str:
    body = raw[1:-1]
    out = []
    i = 0
    while i < len(body):
        if body[i] == "\\":
            out.append(_ORACLE_ESCAPES[body[i + 1]])
            i += 2
        else:
            out.append(body[i])
            i += 1
    return "".join(out)


def oracle_tokenize(source: str):
    """Regex-driven token stream: (kind, lexeme, line, col) tuples."""
    tokens = []
    pos = 0
    line, col = 1, 1
    while pos < len(source):
        match = _ORACLE_TOKEN.match(source, pos)
        assert match, f"oracle cannot lex at offset {pos}: {source[pos:pos+10]!r}"
        text = match.group(0)
        kind = match.lastgroup
        if kind == "string":
            tokens.append(("string", _oracle_decode(text), line, col))
        elif kind == "number":
            tokens.append(("number", text, line, col))
        elif kind == "word":
            token_kind = "bool" if text in ("true", "false") else "ident"
            tokens.append((token_kind, text, line, col))
        elif kind in ("punct", "interp_open"):
            tokens.append(("punct", text, line, col))
        newlines = text.count("\n")
        if newlines:
            line += newlines
            col = len(text) - text.rindex("\n")
        else:
            col += len(text)
        pos = match.end()
    tokens.append(("eof", "", line, col))
    return tokens


# --- Random document generator (round-trip property) --------------------

_STRING_CHARS = (
    "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789"
    " !#%&'()*+,-./:;<=>?@[]^_`|~${}\\\"\n\t"
    "äöüßéλπ漢字"
)


class DocGen:
    def __init__(self, seed: int):
        self.rng = random.Random(seed)

    def ident(self) -> str:
        rng = self.rng
        first = rng.choice("abcdefghijklmnopqrstuvwxyz_")
        rest = "".join(
            rng.choice("abcdefghijklmnopqrstuvwxyz0123456789_-")
            for _ in range(rng.randint(0, 6))
        )
        word = first + rest
        return word if word not in ("true", "false") else word + "_x"

    def ref(self) -> dsl.Ref:
        length = self.rng.randint(2, 4)
        return dsl.Ref(tuple(self.ident() for _ in range(length)))

    def string(self) -> dsl.Str:
        rng = self.rng
        parts = []
        for _ in range(rng.randint(1, 3)):
            if rng.random() < 0.25:
                parts.append(self.ref())
            else:
                parts.append(
                    "".join(
                        rng.choice(_STRING_CHARS) for _ in range(rng.randint(0, 12))
                    )
                )
        merged = []
        for part in parts:
            if isinstance(part, str) and merged and isinstance(merged[-1], str):
                merged[-1] += part
            elif isinstance(part, str) and not part:
                continue
            else:
                merged.append(part)
        return dsl.Str(tuple(merged))

    def number(self) -> dsl.Num:
        rng = self.rng
        roll = rng.random()
        if roll < 0.5:
            return dsl.Num(rng.randint(-10**6, 10**6))
        if roll < 0.9:
            return dsl.Num(round(rng.uniform(-1000, 1000), rng.randint(1, 6)))
        return dsl.Num(rng.uniform(-1e22, 1e22))

    def expr(self, depth=0) -> dsl.Expr:
        rng = self.rng
        choices = ["string", "number", "bool", "ref"]
        if depth < 2:
            choices.append("list")
        kind = rng.choice(choices)
        if kind == "string":
            return self.string()
        if kind == "number":
            return self.number()
        if kind == "bool":
            return dsl.Bool(rng.random() < 0.5)
        if kind == "ref":
            return self.ref()
        return dsl.ListExpr(
            tuple(self.expr(depth + 1) for _ in range(rng.randint(0, 4)))
        )

    def items(self, depth=0) -> tuple:
        rng = self.rng
        count = rng.randint(0, 5 - depth) if depth else rng.randint(1, 5)
        result = []
        used_names = set()
        for _ in range(count):
            if depth < 2 and rng.random() < 0.4:
                labels = tuple(
                    "".join(
                        rng.choice(_STRING_CHARS) for _ in range(rng.randint(0, 8))
                    )
                    for _ in range(rng.randint(0, 2))
                )
                result.append(
                    dsl.Block(self.ident(), labels, self.items(depth + 1))
                )
            else:
                name = self.ident()
                while name in used_names:
                    name = self.ident()
                used_names.add(name)
                result.append(dsl.Attribute(name, self.expr()))
        return tuple(result)

    def document(self) -> dsl.Document:
        return dsl.Document(self.items())
