"""Textual format for dataflow graphs.

Grammar (one instruction per line):

    graph @name (mesh=[2,2]) {
      %x = f32[8,16] parameter(0), sharding={devices=[2,1]0,1}
      %y = f32[8,16] relu(%x)
      return %y
    }

Printing then parsing yields a structurally identical graph; float constants
are emitted with enough digits to round-trip exactly.
"""

from __future__ import annotations

import re
from typing import Optional

import numpy as np

from .ir import (
    CompareDirection,
    ConvDims,
    DType,
    Graph,
    Instruction,
    Op,
    ReduceKind,
    Shape,
    WindowDim,
    validate_graph,
)
from .sharding import DeviceMesh, Sharding, ShardingError, np_dtype


class ParseError(Exception):
    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


_OPCODES = {op.value: op for op in Op}
_DTYPES = {d.value: d for d in DType}

_TOKEN_RE = re.compile(
    r"""
      (?P<ws>[ \t]+)
    | (?P<comment>//[^\n]*)
    | (?P<newline>\n)
    | (?P<number>-?\d+\.\d+(?:[eE][-+]?\d+)?|-?\d+[eE][-+]?\d+
               |-?inf|nan|-?\d+)
    | (?P<ssa>%[A-Za-z0-9_.\-]+)
    | (?P<at>@[A-Za-z0-9_.\-]+)
    | (?P<ident>[A-Za-z_][A-Za-z0-9_\-]*)
    | (?P<punct>[{}()\[\],=])
    """,
    re.VERBOSE,
)

# Attributes reconstructed from the declared result shape, never printed.
_IMPLIED_ATTRS = {"shape", "out_dims"}

# Printing order per opcode keeps output deterministic.
_ATTR_ORDER = [
    "index", "iota_dimension", "direction", "kind", "dim", "dims",
    "broadcast_dims", "permutation", "low", "high", "interior",
    "starts", "limits", "strides", "sizes",
    "lhs_batch", "lhs_contracting", "rhs_batch", "rhs_contracting",
    "conv_dims", "window", "amount", "fill",
    "split_dim", "concat_dim", "subgroups", "pairs", "literal",
]


class _Token:
    __slots__ = ("kind", "text", "line", "col")

    def __init__(self, kind, text, line, col):
        self.kind, self.text, self.line, self.col = kind, text, line, col

    def __repr__(self):
        return f"{self.kind}:{self.text!r}"


def _tokenize(text: str) -> list[_Token]:
    tokens = []
    line, col = 1, 1
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if not m:
            raise ParseError(f"unexpected character {text[pos]!r}", line, col)
        kind = m.lastgroup
        tok = m.group()
        if kind == "newline":
            tokens.append(_Token("newline", tok, line, col))
            line += 1
            col = 1
        else:
            if kind not in ("ws", "comment"):
                tokens.append(_Token(kind, tok, line, col))
            col += len(tok)
        pos = m.end()
    tokens.append(_Token("eof", "", line, col))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.tokens = _tokenize(text)
        self.pos = 0

    def peek(self) -> _Token:
        return self.tokens[self.pos]

    def next(self) -> _Token:
        tok = self.tokens[self.pos]
        if tok.kind != "eof":
            self.pos += 1
        return tok

    def error(self, message: str, tok: Optional[_Token] = None):
        tok = tok or self.peek()
        raise ParseError(message, tok.line, tok.col)

    def skip_newlines(self):
        while self.peek().kind == "newline":
            self.next()

    def expect(self, kind: str, text: Optional[str] = None) -> _Token:
        tok = self.next()
        if tok.kind != kind or (text is not None and tok.text != text):
            want = text if text is not None else kind
            self.error(f"expected {want!r}, found {tok.text!r}", tok)
        return tok

    def expect_punct(self, ch: str) -> _Token:
        return self.expect("punct", ch)

    # -- value parsers ------------------------------------------------------

    def parse_int(self) -> int:
        tok = self.expect("number")
        try:
            return int(tok.text)
        except ValueError:
            self.error(f"expected integer, found {tok.text!r}", tok)

    def parse_number(self) -> float:
        tok = self.expect("number")
        if tok.text in ("inf", "-inf", "nan"):
            return float(tok.text)
        try:
            return int(tok.text)
        except ValueError:
            return float(tok.text)

    def parse_int_list(self) -> tuple[int, ...]:
        self.expect_punct("[")
        items = []
        if not self._at_punct("]"):
            items.append(self.parse_int())
            while self._at_punct(","):
                self.next()
                items.append(self.parse_int())
        self.expect_punct("]")
        return tuple(items)

    def parse_int_list_list(self) -> tuple[tuple[int, ...], ...]:
        self.expect_punct("[")
        items = []
        if not self._at_punct("]"):
            items.append(self.parse_int_list())
            while self._at_punct(","):
                self.next()
                items.append(self.parse_int_list())
        self.expect_punct("]")
        return tuple(items)

    def _at_punct(self, ch: str) -> bool:
        tok = self.peek()
        return tok.kind == "punct" and tok.text == ch

    def parse_shape(self) -> Shape:
        tok = self.expect("ident")
        if tok.text not in _DTYPES:
            self.error(f"unknown dtype {tok.text!r}", tok)
        dims = self.parse_int_list()
        return Shape(dims, _DTYPES[tok.text])

    def parse_literal(self):
        """Nested bracket lists of numbers, or a bare scalar."""
        if self._at_punct("["):
            self.next()
            items = []
            if not self._at_punct("]"):
                items.append(self.parse_literal())
                while self._at_punct(","):
                    self.next()
                    items.append(self.parse_literal())
            self.expect_punct("]")
            return items
        if self.peek().kind == "ident" and self.peek().text in ("true", "false"):
            return self.next().text == "true"
        return self.parse_number()

    def parse_struct_fields(self) -> dict:
        """`{key=value, ...}` with int / int-list values."""
        self.expect_punct("{")
        fields = {}
        while not self._at_punct("}"):
            key = self.expect("ident").text
            self.expect_punct("=")
            if self._at_punct("["):
                fields[key] = self.parse_int_list()
            else:
                fields[key] = self.parse_int()
            if self._at_punct(","):
                self.next()
        self.expect_punct("}")
        return fields

    def parse_sharding(self) -> Sharding:
        """Consume a balanced `{...}` block and hand it to the sharding parser."""
        start = self.expect_punct("{")
        depth = 1
        pieces = []
        while depth > 0:
            tok = self.next()
            if tok.kind == "eof":
                self.error("unterminated sharding", start)
            if tok.kind == "punct" and tok.text == "{":
                depth += 1
            elif tok.kind == "punct" and tok.text == "}":
                depth -= 1
                if depth == 0:
                    break
            pieces.append(tok)
        text = ""
        for tok in pieces:
            if tok.kind == "ident" and text and not text.endswith(("{", "[", "=")):
                text += " "
            text += tok.text
        try:
            return Sharding.parse(text)
        except ShardingError as e:
            self.error(str(e), start)

    # -- attribute values ---------------------------------------------------

    def parse_attr(self, opcode: Op, name: str):
        if name == "sharding":
            return self.parse_sharding()
        if name in ("direction",):
            tok = self.expect("ident")
            try:
                return CompareDirection(tok.text)
            except ValueError:
                self.error(f"unknown compare direction {tok.text!r}", tok)
        if name == "kind":
            tok = self.expect("ident")
            try:
                return ReduceKind(tok.text)
            except ValueError:
                self.error(f"unknown reduce kind {tok.text!r}", tok)
        if name in ("subgroups", "pairs"):
            return self.parse_int_list_list()
        if name == "conv_dims":
            f = self.parse_struct_fields()
            try:
                return ConvDims(
                    lhs_batch=f["lhs_batch"], lhs_feature=f["lhs_feature"],
                    lhs_spatial=tuple(f["lhs_spatial"]),
                    rhs_in_feature=f["rhs_in_feature"],
                    rhs_out_feature=f["rhs_out_feature"],
                    rhs_spatial=tuple(f["rhs_spatial"]),
                    out_batch=f["out_batch"], out_feature=f["out_feature"],
                    out_spatial=tuple(f["out_spatial"]),
                )
            except KeyError as e:
                self.error(f"conv_dims missing field {e}")
        if name == "window":
            self.expect_punct("[")
            dims = []
            while not self._at_punct("]"):
                f = self.parse_struct_fields()
                dims.append(WindowDim(
                    size=f["size"], stride=f.get("stride", 1),
                    padding_low=f.get("padding_low", 0),
                    padding_high=f.get("padding_high", 0),
                    base_dilation=f.get("base_dilation", 1),
                    window_dilation=f.get("window_dilation", 1),
                ))
                if self._at_punct(","):
                    self.next()
            self.expect_punct("]")
            return tuple(dims)
        if name == "literal":
            return self.parse_literal()
        if name == "fill":
            return self.parse_number()
        if self._at_punct("["):
            first = self.parse_int_list_or_nested()
            return first
        return self.parse_int()

    def parse_int_list_or_nested(self):
        save = self.pos
        self.expect_punct("[")
        if self._at_punct("["):
            self.pos = save
            return self.parse_int_list_list()
        self.pos = save
        return self.parse_int_list()

    # -- instructions -------------------------------------------------------

    def parse_instruction(self) -> Instruction:
        id_tok = self.expect("ssa")
        self.expect_punct("=")
        shape = self.parse_shape()
        op_tok = self.expect("ident")
        if op_tok.text not in _OPCODES:
            self.error(f"unknown opcode {op_tok.text!r}", op_tok)
        opcode = _OPCODES[op_tok.text]
        self.expect_punct("(")
        operands: list[str] = []
        attrs: dict = {}
        if opcode == Op.PARAMETER:
            if self.peek().kind == "number":
                attrs["index"] = self.parse_int()
        else:
            while self.peek().kind == "ssa":
                operands.append(self.next().text[1:])
                if self._at_punct(","):
                    self.next()
        self.expect_punct(")")
        sharding = None
        while self._at_punct(","):
            self.next()
            name = self.expect("ident").text
            self.expect_punct("=")
            value = self.parse_attr(opcode, name)
            if name == "sharding":
                sharding = value
            else:
                attrs[name] = value
        # Reconstruct attrs that the printer derives from the result shape.
        if opcode in (Op.PARAMETER, Op.CONSTANT, Op.IOTA):
            attrs["shape"] = shape
        if opcode == Op.PARAMETER and "index" not in attrs:
            self.error("parameter needs an index", id_tok)
        if opcode in (Op.RESHAPE, Op.BROADCAST):
            attrs["out_dims"] = shape.dims
        if opcode == Op.CONSTANT:
            if "literal" not in attrs:
                self.error("constant needs a literal", id_tok)
            try:
                attrs["literal"] = np.asarray(
                    attrs["literal"], dtype=np_dtype(shape.dtype)
                ).reshape(shape.dims)
            except ValueError as e:
                self.error(f"bad constant literal: {e}", id_tok)
        if sharding is not None and sharding.kind.name != "REPLICATED" \
                and sharding.data_rank != shape.rank:
            self.error(
                f"sharding rank {sharding.data_rank} does not match "
                f"shape rank {shape.rank}", id_tok)
        return Instruction(
            id=id_tok.text[1:], opcode=opcode, operands=tuple(operands),
            attrs=attrs, shape=shape, sharding=sharding,
        )

    def parse_graph(self) -> Graph:
        self.skip_newlines()
        if self.peek().kind == "ssa":
            return self._parse_bare_instructions()
        self.expect("ident", "graph")
        name = self.expect("at").text[1:]
        mesh = None
        if self._at_punct("("):
            self.next()
            self.expect("ident", "mesh")
            self.expect_punct("=")
            dims = self.parse_int_list()
            ids = []
            while self.peek().kind == "number":
                ids.append(self.parse_int())
                if self._at_punct(","):
                    self.next()
            if ids:
                mesh = DeviceMesh(tuple(dims), tuple(ids))
            else:
                mesh = DeviceMesh.default(*dims)
            self.expect_punct(")")
        self.expect_punct("{")
        self.skip_newlines()
        instructions = []
        outputs: tuple[str, ...] = ()
        while True:
            tok = self.peek()
            if tok.kind == "ident" and tok.text == "return":
                self.next()
                outs = [self.expect("ssa").text[1:]]
                while self._at_punct(","):
                    self.next()
                    outs.append(self.expect("ssa").text[1:])
                outputs = tuple(outs)
                self.skip_newlines()
                break
            if tok.kind == "ssa":
                instructions.append(self.parse_instruction())
                self.skip_newlines()
                continue
            self.error(f"expected instruction or return, found {tok.text!r}", tok)
        self.expect_punct("}")
        self.skip_newlines()
        graph = Graph(name, tuple(instructions), outputs, mesh)
        diags = validate_graph(graph)
        if diags:
            raise ParseError("; ".join(diags), 1, 1)
        return graph


    def _parse_bare_instructions(self) -> Graph:
        """Headerless form: a list of instructions with an optional return.

        Outputs default to the last instruction when no return is given.
        """
        instructions = []
        outputs: tuple[str, ...] = ()
        while True:
            tok = self.peek()
            if tok.kind == "ssa":
                instructions.append(self.parse_instruction())
                self.skip_newlines()
                continue
            if tok.kind == "ident" and tok.text == "return":
                self.next()
                outs = [self.expect("ssa").text[1:]]
                while self._at_punct(","):
                    self.next()
                    outs.append(self.expect("ssa").text[1:])
                outputs = tuple(outs)
                self.skip_newlines()
            break
        if self.peek().kind != "eof":
            self.error(f"expected instruction, found {self.peek().text!r}",
                       self.peek())
        if not instructions:
            self.error("empty input")
        if not outputs:
            outputs = (instructions[-1].id,)
        graph = Graph("main", tuple(instructions), outputs, None)
        diags = validate_graph(graph)
        if diags:
            raise ParseError("; ".join(diags), 1, 1)
        return graph


def parse_graph(text: str) -> Graph:
    return _Parser(text).parse_graph()


# ---------------------------------------------------------------------------
# Printing
# ---------------------------------------------------------------------------


def _format_number(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    f = float(x)
    if np.isinf(f):
        return "inf" if f > 0 else "-inf"
    if np.isnan(f):
        return "nan"
    text = repr(f)
    # Integer-valued floats need a decimal point to keep their dtype on parse.
    if "." not in text and "e" not in text and "n" not in text:
        text += ".0"
    return text


def _format_literal(value: np.ndarray) -> str:
    if value.ndim == 0:
        return _format_number(value[()])
    return "[" + ",".join(_format_literal(value[i]) for i in range(value.shape[0])) + "]"


def _format_int_list(values) -> str:
    return "[" + ",".join(str(int(v)) for v in values) + "]"


def _format_struct(fields: dict) -> str:
    parts = []
    for k, v in fields.items():
        if isinstance(v, (tuple, list)):
            parts.append(f"{k}={_format_int_list(v)}")
        else:
            parts.append(f"{k}={int(v)}")
    return "{" + ",".join(parts) + "}"


def _format_attr(name: str, value) -> str:
    if name == "literal":
        return f"literal={_format_literal(np.asarray(value))}"
    if isinstance(value, CompareDirection) or isinstance(value, ReduceKind):
        return f"{name}={value.value}"
    if name in ("subgroups", "pairs"):
        inner = ",".join(_format_int_list(g) for g in value)
        return f"{name}=[{inner}]"
    if name == "conv_dims":
        cd: ConvDims = value
        return "conv_dims=" + _format_struct({
            "lhs_batch": cd.lhs_batch, "lhs_feature": cd.lhs_feature,
            "lhs_spatial": cd.lhs_spatial, "rhs_in_feature": cd.rhs_in_feature,
            "rhs_out_feature": cd.rhs_out_feature, "rhs_spatial": cd.rhs_spatial,
            "out_batch": cd.out_batch, "out_feature": cd.out_feature,
            "out_spatial": cd.out_spatial,
        })
    if name == "window":
        inner = ",".join(_format_struct({
            "size": w.size, "stride": w.stride,
            "padding_low": w.padding_low, "padding_high": w.padding_high,
            "base_dilation": w.base_dilation, "window_dilation": w.window_dilation,
        }) for w in value)
        return f"window=[{inner}]"
    if name == "fill":
        return f"fill={_format_number(value)}"
    if isinstance(value, (tuple, list)):
        return f"{name}={_format_int_list(value)}"
    return f"{name}={int(value)}"


def print_instruction(ins: Instruction) -> str:
    if ins.opcode == Op.PARAMETER:
        call = f"parameter({ins.attrs['index']})"
        skip = {"index"} | _IMPLIED_ATTRS
    else:
        call = ins.opcode.value + "(" + ", ".join(f"%{o}" for o in ins.operands) + ")"
        skip = set(_IMPLIED_ATTRS)
    parts = [f"%{ins.id} = {ins.shape} {call}"]
    names = sorted(
        (k for k in ins.attrs if k not in skip),
        key=lambda k: (_ATTR_ORDER.index(k) if k in _ATTR_ORDER else 99, k),
    )
    for name in names:
        parts.append(_format_attr(name, ins.attrs[name]))
    if ins.sharding is not None:
        parts.append(f"sharding={{{ins.sharding.format()}}}")
    return ", ".join(parts)


def print_graph(graph: Graph) -> str:
    header = f"graph @{graph.name}"
    if graph.mesh is not None:
        mesh = graph.mesh
        header += f" (mesh={_format_int_list(mesh.mesh_dims)}"
        default_ids = tuple(range(len(mesh.device_ids)))
        if tuple(mesh.device_ids) != default_ids:
            header += "".join(
                ("," if i else "") + str(d) for i, d in enumerate(mesh.device_ids)
            )
        header += ")"
    lines = [header + " {"]
    for ins in graph.instructions:
        lines.append("  " + print_instruction(ins))
    lines.append("  return " + ", ".join(f"%{o}" for o in graph.outputs))
    lines.append("}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Structural equality
# ---------------------------------------------------------------------------


def _attrs_equal(a: dict, b: dict) -> bool:
    if set(a) != set(b):
        return False
    for k in a:
        va, vb = a[k], b[k]
        if isinstance(va, np.ndarray) or isinstance(vb, np.ndarray):
            if not (np.asarray(va).shape == np.asarray(vb).shape
                    and np.array_equal(va, vb)):
                return False
        elif isinstance(va, (tuple, list)) and isinstance(vb, (tuple, list)):
            if tuple(map(_norm, va)) != tuple(map(_norm, vb)):
                return False
        elif va != vb:
            return False
    return True


def _norm(v):
    if isinstance(v, (tuple, list)):
        return tuple(map(_norm, v))
    return v


def instructions_equal(a: Instruction, b: Instruction) -> bool:
    return (
        a.id == b.id
        and a.opcode == b.opcode
        and a.operands == b.operands
        and a.shape == b.shape
        and a.sharding == b.sharding
        and _attrs_equal(a.attrs, b.attrs)
    )


def graphs_equal(a: Graph, b: Graph) -> bool:
    if a.name != b.name or a.outputs != b.outputs:
        return False
    if (a.mesh is None) != (b.mesh is None):
        return False
    if a.mesh is not None and (
        a.mesh.mesh_dims != b.mesh.mesh_dims
        or tuple(a.mesh.device_ids) != tuple(b.mesh.device_ids)
    ):
        return False
    if len(a.instructions) != len(b.instructions):
        return False
    return all(
        instructions_equal(x, y) for x, y in zip(a.instructions, b.instructions)
    )
