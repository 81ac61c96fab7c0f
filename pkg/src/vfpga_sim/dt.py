"""Device-tree source subset with overlay support.

Grammar::

    file     := ['/dts-v1/' ';'] '/' '{' body '}' ';'
    overlay  := ['/dts-v1/' ';'] '/plugin/' ';' '/' '{' fragment* '}' ';'
    body     := (prop | node)*
    node     := NAME '{' body '}' ';'
    prop     := NAME ';' | NAME '=' value ';'
    value    := STRING | '<' CELL* '>' | '[' HEXBYTES ']'
    fragment := 'fragment@N' '{' 'target-path' '=' STRING ';'
                '__overlay__' '{' body '}' ';' '}' ';'

``//`` line comments and ``/* */`` block comments are skipped.  Labels,
phandle references and ``/delete-node/`` are not supported.
"""

from __future__ import annotations

import copy
import re
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Optional, Union


class DtError(ValueError):
    def __init__(self, msg: str, line: Optional[int] = None, col: Optional[int] = None):
        self.line, self.col = line, col
        where = f"{line}:{col}: " if line is not None else ""
        super().__init__(where + msg)


class DtsSyntaxError(DtError):
    pass


class DuplicateNode(DtError):
    pass


class BadCell(DtError):
    pass


class MissingPluginMarker(DtError):
    pass


class RelativeTarget(DtError):
    pass


class TargetNotFound(DtError):
    pass


class GuardViolation(DtError):
    """An overlay tried to change a property frozen at passthrough time."""


class Cells(tuple):
    """A ``<...>`` property: 32-bit cells."""

    def __new__(cls, values: Iterable[int] = ()):
        vals = tuple(int(v) for v in values)
        for v in vals:
            if not 0 <= v <= 0xFFFFFFFF:
                raise BadCell(f"cell value {v:#x} does not fit in 32 bits")
        return super().__new__(cls, vals)

    def __repr__(self) -> str:
        return "Cells(<" + " ".join(f"{v:#x}" for v in self) + ">)"


class _Empty:
    _inst = None

    def __new__(cls):
        if cls._inst is None:
            cls._inst = super().__new__(cls)
        return cls._inst

    def __repr__(self) -> str:
        return "EMPTY"

    def __deepcopy__(self, memo):
        return self

    def __reduce__(self):
        return (_Empty, ())


EMPTY = _Empty()

PropValue = Union[str, Cells, bytes, _Empty]

STATUS_VALUES = ("okay", "disabled")
_NODE_NAME = re.compile(r"^[A-Za-z0-9,._+-]+(@[A-Za-z0-9,._+-]+)?$")
_PROP_NAME = re.compile(r"^[A-Za-z0-9,._+?#-]+$")


@dataclass
class DtNode:
    name: str
    props: dict[str, PropValue] = field(default_factory=dict)
    children: list["DtNode"] = field(default_factory=list)

    def child(self, name: str) -> Optional["DtNode"]:
        for c in self.children:
            if c.name == name:
                return c
        return None

    def find(self, path: str) -> Optional["DtNode"]:
        if not path.startswith("/"):
            raise RelativeTarget(f"path {path!r} is not absolute")
        node: Optional[DtNode] = self
        for part in filter(None, path.split("/")):
            node = node.child(part) if node is not None else None
        return node

    def walk(self, prefix: str = "") -> Iterator[tuple[str, "DtNode"]]:
        path = prefix if prefix else "/"
        yield path, self
        for c in self.children:
            yield from c.walk(f"{prefix}/{c.name}")

    @property
    def status(self) -> Optional[str]:
        v = self.props.get("status")
        return v if isinstance(v, str) else None

    @property
    def unit_address(self) -> Optional[str]:
        return self.name.partition("@")[2] or None


@dataclass
class Fragment:
    target_path: str
    overlay: DtNode


@dataclass
class Overlay:
    fragments: list[Fragment]


# -- lexer ---------------------------------------------------------------

_TOKEN = re.compile(
    r"""
    (?P<ws>\s+|//[^\n]*|/\*.*?\*/)
  | (?P<directive>/[a-z][a-z0-9-]*/)
  | (?P<string>"(?:[^"\\\n]|\\.)*")
  | (?P<punct>[{};=<>\[\]/])
  | (?P<word>[A-Za-z0-9,._+*#?@-]+)
    """,
    re.VERBOSE | re.DOTALL,
)


@dataclass
class _Tok:
    kind: str
    text: str
    line: int
    col: int


def _tokenize(text: str) -> list[_Tok]:
    toks = []
    pos, line, line_start = 0, 1, 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            raise DtsSyntaxError(f"unexpected character {text[pos]!r}", line, pos - line_start + 1)
        kind = m.lastgroup
        if kind != "ws":
            toks.append(_Tok(kind, m.group(), line, pos - line_start + 1))
        chunk = m.group()
        nl = chunk.count("\n")
        if nl:
            line += nl
            line_start = pos + chunk.rindex("\n") + 1
        pos = m.end()
    toks.append(_Tok("eof", "", line, pos - line_start + 1))
    return toks


_ESCAPES = {"n": "\n", "t": "\t", "\\": "\\", '"': '"', "r": "\r", "0": "\0"}


def _unquote(tok: _Tok) -> str:
    out, body, i = [], tok.text[1:-1], 0
    while i < len(body):
        ch = body[i]
        if ch == "\\":
            i += 1
            esc = body[i]
            if esc not in _ESCAPES:
                raise DtsSyntaxError(f"unknown escape \\{esc}", tok.line, tok.col)
            out.append(_ESCAPES[esc])
        else:
            out.append(ch)
        i += 1
    return "".join(out)


def _quote(s: str) -> str:
    rev = {v: k for k, v in _ESCAPES.items()}
    return '"' + "".join("\\" + rev[c] if c in rev else c for c in s) + '"'


class _Parser:
    def __init__(self, text: str):
        self.toks = _tokenize(text)
        self.i = 0

    @property
    def tok(self) -> _Tok:
        return self.toks[self.i]

    def next(self) -> _Tok:
        t = self.toks[self.i]
        self.i += 1
        return t

    def expect(self, text: str) -> _Tok:
        t = self.next()
        if t.text != text or t.kind == "string":
            shown = t.text or "end of input"
            raise DtsSyntaxError(f"expected {text!r}, got {shown!r}", t.line, t.col)
        return t

    def header(self, plugin: bool) -> None:
        if self.tok.kind == "directive" and self.tok.text == "/dts-v1/":
            self.next()
            self.expect(";")
        if plugin:
            if self.tok.text != "/plugin/":
                raise MissingPluginMarker("overlay must start with '/plugin/;'", self.tok.line, self.tok.col)
            self.next()
            self.expect(";")
        elif self.tok.kind == "directive":
            raise DtsSyntaxError(f"unexpected directive {self.tok.text}", self.tok.line, self.tok.col)

    def root(self) -> DtNode:
        if self.tok.kind == "eof":
            raise DtsSyntaxError("missing root node '/ { ... };'", self.tok.line, self.tok.col)
        self.expect("/")
        self.expect("{")
        node = DtNode("")
        self.body(node)
        self.expect("}")
        self.expect(";")
        if self.tok.kind != "eof":
            raise DtsSyntaxError(f"trailing input {self.tok.text!r}", self.tok.line, self.tok.col)
        return node

    def body(self, node: DtNode) -> None:
        while self.tok.text != "}" or self.tok.kind != "punct":
            t = self.next()
            if t.kind != "word":
                shown = t.text or "end of input"
                raise DtsSyntaxError(f"expected a node or property name, got {shown!r}", t.line, t.col)
            follow = self.tok
            if follow.text == "{":
                if not _NODE_NAME.match(t.text):
                    raise DtsSyntaxError(f"bad node name {t.text!r}", t.line, t.col)
                if node.child(t.text) is not None:
                    raise DuplicateNode(f"duplicate node {t.text!r}", t.line, t.col)
                self.next()
                child = DtNode(t.text)
                self.body(child)
                self.expect("}")
                self.expect(";")
                node.children.append(child)
                continue
            if not _PROP_NAME.match(t.text):
                raise DtsSyntaxError(f"bad property name {t.text!r}", t.line, t.col)
            if follow.text == ";":
                self.next()
                node.props[t.text] = EMPTY
            elif follow.text == "=":
                self.next()
                node.props[t.text] = self.value()
                self.expect(";")
            else:
                raise DtsSyntaxError(f"expected '=', ';' or '{{' after {t.text!r}", follow.line, follow.col)
            if t.text == "status" and node.props["status"] not in STATUS_VALUES:
                raise DtsSyntaxError("status must be \"okay\" or \"disabled\"", t.line, t.col)

    def value(self) -> PropValue:
        t = self.next()
        if t.kind == "string":
            return _unquote(t)
        if t.text == "<":
            cells = []
            while self.tok.text != ">":
                c = self.next()
                cells.append(_parse_cell(c))
            self.next()
            return Cells(cells)
        if t.text == "[":
            digits = []
            while self.tok.text != "]":
                c = self.next()
                if c.kind != "word" or not re.fullmatch(r"[0-9A-Fa-f]+", c.text) or len(c.text) % 2:
                    raise BadCell(f"bad byte string element {c.text!r}", c.line, c.col)
                digits.append(c.text)
            self.next()
            return bytes.fromhex("".join(digits))
        shown = t.text or "end of input"
        raise DtsSyntaxError(f"expected a property value, got {shown!r}", t.line, t.col)


def _parse_cell(tok: _Tok) -> int:
    if tok.kind != "word":
        shown = tok.text or "end of input"
        raise BadCell(f"expected a cell, got {shown!r}", tok.line, tok.col)
    try:
        v = int(tok.text, 16) if tok.text.lower().startswith("0x") else int(tok.text, 10)
    except ValueError:
        raise BadCell(f"bad cell {tok.text!r}", tok.line, tok.col) from None
    if not 0 <= v <= 0xFFFFFFFF:
        raise BadCell(f"cell {tok.text} does not fit in 32 bits", tok.line, tok.col)
    return v


def parse_dts(text: str) -> DtNode:
    p = _Parser(text)
    p.header(plugin=False)
    return p.root()


def parse_overlay(text: str) -> Overlay:
    p = _Parser(text)
    p.header(plugin=True)
    root = p.root()
    if root.props:
        raise DtsSyntaxError("overlay root may only contain fragments")
    fragments = []
    for frag in root.children:
        if not frag.name.startswith("fragment@"):
            raise DtsSyntaxError(f"unexpected overlay node {frag.name!r}")
        target = frag.props.get("target-path")
        body = frag.child("__overlay__")
        if not isinstance(target, str) or body is None:
            raise DtsSyntaxError(f"{frag.name} needs target-path and __overlay__")
        if not target.startswith("/"):
            raise RelativeTarget(f"{frag.name}: target-path {target!r} is not absolute")
        fragments.append(Fragment(target, body))
    return Overlay(fragments)


# -- serialization -------------------------------------------------------


def _format_value(v: PropValue) -> str:
    if isinstance(v, str):
        return _quote(v)
    if isinstance(v, Cells):
        return "<" + " ".join(f"{c:#x}" for c in v) + ">"
    if isinstance(v, bytes):
        return "[" + " ".join(f"{b:02x}" for b in v) + "]"
    raise TypeError(f"not a property value: {v!r}")


def _emit(node: DtNode, depth: int, out: list[str]) -> None:
    pad = "    " * depth
    for name, v in node.props.items():
        out.append(f"{pad}{name};" if v is EMPTY else f"{pad}{name} = {_format_value(v)};")
    for c in node.children:
        out.append(f"{pad}{c.name} {{")
        _emit(c, depth + 1, out)
        out.append(f"{pad}}};")


def serialize_dts(tree: DtNode) -> str:
    out = ["/dts-v1/;", "", "/ {"]
    _emit(tree, 1, out)
    out.append("};")
    return "\n".join(out) + "\n"


# -- overlays ------------------------------------------------------------

GUARDED_PROPS = ("reg", "interrupts")


def _guard_map(guard) -> dict[str, object]:
    if guard is None:
        return {}
    if isinstance(guard, Mapping):
        return dict(guard)
    if hasattr(guard, "path"):
        return {guard.path: guard}
    return {g.path: g for g in guard}


def _merge(base: DtNode, patch: DtNode, path: str, guards: dict) -> None:
    g = guards.get(path)
    for name, v in patch.props.items():
        if g is not None and name in GUARDED_PROPS and base.props.get(name) != v:
            raise GuardViolation(f"{path}: property {name!r} is bound to the passthrough device")
        if name == "status" and v not in STATUS_VALUES:
            raise DtsSyntaxError(f"{path}: status must be \"okay\" or \"disabled\"")
        base.props[name] = v
    for pc in patch.children:
        child = base.child(pc.name)
        if child is None:
            child = DtNode(pc.name)
            base.children.append(child)
        _merge(child, pc, f"{path.rstrip('/')}/{pc.name}", guards)


def apply_overlay(tree: DtNode, overlay: Overlay, guard=None) -> DtNode:
    """Return a patched copy of ``tree``; ``tree`` itself is left alone.

    ``guard`` is a :class:`~vfpga_sim.iommu.BasePropertyGuard`, an iterable
    of them, or a mapping from node path to guard.
    """
    guards = {p.rstrip("/") or "/": g for p, g in _guard_map(guard).items()}
    out = copy.deepcopy(tree)
    for frag in overlay.fragments:
        target = out.find(frag.target_path)
        if target is None:
            raise TargetNotFound(f"overlay target {frag.target_path!r} not in tree")
        _merge(target, frag.overlay, frag.target_path.rstrip("/") or "/", guards)
    return out


def cells_of(node: DtNode, name: str) -> Optional[Cells]:
    v = node.props.get(name)
    return v if isinstance(v, Cells) else None


def address_cells(parent: Optional[DtNode]) -> tuple[int, int]:
    """``(#address-cells, #size-cells)`` for children of ``parent``.

    Defaults to one cell each when the parent does not say.
    """
    if parent is None:
        return 1, 1
    ac = cells_of(parent, "#address-cells")
    sc = cells_of(parent, "#size-cells")
    return (ac[0] if ac else 1), (sc[0] if sc else 1)


def decode_reg(reg: Cells, acells: int, scells: int) -> list[tuple[int, int]]:
    stride = acells + scells
    if stride == 0 or len(reg) % stride:
        raise BadCell(f"reg has {len(reg)} cells, not a multiple of {stride}")
    out = []
    for i in range(0, len(reg), stride):
        base = 0
        for c in reg[i:i + acells]:
            base = (base << 32) | c
        size = 0
        for c in reg[i + acells:i + stride]:
            size = (size << 32) | c
        out.append((base, size))
    return out


def parent_path(path: str) -> str:
    head = path.rstrip("/").rsplit("/", 1)[0]
    return head or "/"
