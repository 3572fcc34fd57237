"""Property-tree configuration files.

Grammar::

    entry := key [value] [ '{' entry* '}' ]

A value runs to the end of the line, a ``;``, or a brace.  Values that
need those characters (or are empty) are written in double quotes.
``#`` starts a comment outside quotes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ConfigError

_SPECIAL = set(';{}#"\n')


@dataclass
class Node:
    key: str
    value: str = ""
    children: list = field(default_factory=list)

    def get(self, key, default=None):
        for child in self.children:
            if child.key == key:
                return child.value
        return default

    def child(self, key):
        for c in self.children:
            if c.key == key:
                return c
        return None

    def all(self, key):
        return [c for c in self.children if c.key == key]

    def get_int(self, key, default=None):
        raw = self.get(key)
        if raw is None:
            return default
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{self.key} {self.value}: {key} expects an integer, got {raw!r}") from None

    def get_float(self, key, default=None):
        raw = self.get(key)
        if raw is None:
            return default
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{self.key} {self.value}: {key} expects a number, got {raw!r}") from None


class _Parser:
    def __init__(self, text):
        self.text = text
        self.pos = 0
        self.line = 1

    def error(self, msg):
        raise ConfigError(f"line {self.line}: {msg}")

    def peek(self):
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def skip_blank(self):
        """Skip whitespace, newlines, semicolons and comments."""
        while self.pos < len(self.text):
            c = self.text[self.pos]
            if c == "\n":
                self.line += 1
                self.pos += 1
            elif c.isspace() or c == ";":
                self.pos += 1
            elif c == "#":
                while self.pos < len(self.text) and self.text[self.pos] != "\n":
                    self.pos += 1
            else:
                break

    def skip_inline_space(self):
        while self.pos < len(self.text) and self.text[self.pos] in " \t\r":
            self.pos += 1

    def quoted(self):
        self.pos += 1
        out = []
        while True:
            c = self.peek()
            if c == "":
                self.error("unterminated string")
            self.pos += 1
            if c == '"':
                return "".join(out)
            if c == "\\" and self.peek() in ('"', "\\"):
                out.append(self.peek())
                self.pos += 1
            else:
                if c == "\n":
                    self.line += 1
                out.append(c)

    def entries(self, closing):
        nodes = []
        while True:
            self.skip_blank()
            c = self.peek()
            if c == "":
                if closing:
                    self.error("missing '}'")
                return nodes
            if c == "}":
                if not closing:
                    self.error("unexpected '}'")
                self.pos += 1
                return nodes
            if c == "{":
                self.error("block without a key")
            nodes.append(self.entry())

    def entry(self):
        start = self.pos
        while self.pos < len(self.text) and not self.text[self.pos].isspace() and self.text[self.pos] not in _SPECIAL:
            self.pos += 1
        key = self.text[start:self.pos]
        if not key:
            self.error(f"expected a key, found {self.peek()!r}")
        self.skip_inline_space()
        value = ""
        if self.peek() == '"':
            value = self.quoted()
            self.skip_inline_space()
        else:
            start = self.pos
            while self.pos < len(self.text) and self.text[self.pos] not in ";{}#\n":
                self.pos += 1
            value = self.text[start:self.pos].strip()
        node = Node(key, value)
        if self.peek() == "{":
            self.pos += 1
            node.children = self.entries(closing=True)
        elif self.peek() not in ("", ";", "\n", "}", "#"):
            self.error(f"unexpected {self.peek()!r} after value")
        return node


def loads(text: str) -> Node:
    """Parse a config document into a root node with key ``""``."""
    return Node("", "", _Parser(text).entries(closing=False))


def load(path) -> Node:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    return loads(text)


def _quote(value: str) -> str:
    if value == "" or any(c in _SPECIAL for c in value) or value != value.strip():
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    return value


def dumps(node: Node, indent=0) -> str:
    out = []
    pad = "    " * indent
    for child in node.children:
        line = pad + child.key
        if child.value != "" or child.children == []:
            line += " " + _quote(child.value)
        if child.children:
            out.append(line + " {\n")
            out.append(dumps(child, indent + 1))
            out.append(pad + "}\n")
        else:
            out.append(line + "\n")
    return "".join(out)
