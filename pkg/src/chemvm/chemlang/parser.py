"""Recursive-descent parser for the synthesis DSL.

Surface form (LL(1), `#` starts a comment running to end of line):

    procedure "name" {
      reagents {
        a: sp:water 1 mol @R1 reagent      # name: species amount @flask role
      }
      hardware {
        RX1: reactor                        # vessel: station kind
      }
      steps {
        add(vessel=RX1, reagent=a)
        react_hot(reagent=b, temp=80 C, time=600 s, vessel=RX1)
      }
      meta {
        target = "X"
      }
    }

Identifiers are `[A-Za-z_][A-Za-z0-9_]*`; quantities are `<number> <unit>`
with units mol, mmol, g, mg, mL, C, s, min, h, normalized to base units
(mol, g, mL, C, s) in the AST. Vessels referenced by steps but not listed
under `hardware` are auto-registered with the unconstrained kind `any`;
`waste` and `product` are built-ins and never need declaring.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .ast import (
    BUILTIN_VESSELS,
    OPTIONAL_PARAMS,
    REQUIRED_PARAMS,
    ROLES,
    UNITS,
    ChemProgram,
    HardwareReq,
    OpKind,
    ParamValue,
    Quantity,
    ReagentDecl,
    UnitOperation,
)

__all__ = ["ParseError", "parse_program"]

_OP_KINDS = {k.value: k for k in OpKind}

# Param value typing: which quantity dimension each well-known key takes.
_QUANTITY_PARAMS = {
    "temp": ("C",),
    "cool_to": ("C",),
    "time": ("s",),
    "amount": ("mol", "g", "mL"),
}


class ParseError(Exception):
    """Syntax or reference error, pinned to a source line and column."""

    def __init__(self, message: str, line: int, col: int, code: str = "syntax"):
        super().__init__(f"{line}:{col}: {message}")
        self.message = message
        self.line = line
        self.col = col
        self.code = code


@dataclass(frozen=True)
class _Tok:
    kind: str  # ident | number | string | punct | eof
    text: str
    line: int
    col: int


_NUMBER_RE = re.compile(r"-?(\d+\.\d*|\.\d+|\d+)([eE][+-]?\d+)?")
_IDENT_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")
_PUNCT = set("{}(),:=@")


def _tokenize(text: str) -> list[_Tok]:
    toks: list[_Tok] = []
    line, col = 1, 1
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch == "\n":
            line += 1
            col = 1
            i += 1
            continue
        if ch in " \t\r":
            i += 1
            col += 1
            continue
        if ch == "#":
            while i < n and text[i] != "\n":
                i += 1
            continue
        if ch == '"':
            j = i + 1
            buf = []
            while j < n and text[j] != '"':
                if text[j] == "\n":
                    raise ParseError("unterminated string", line, col)
                if text[j] == "\\" and j + 1 < n:
                    esc = text[j + 1]
                    buf.append({"n": "\n", "t": "\t", '"': '"', "\\": "\\"}.get(esc, esc))
                    j += 2
                else:
                    buf.append(text[j])
                    j += 1
            if j >= n:
                raise ParseError("unterminated string", line, col)
            toks.append(_Tok("string", "".join(buf), line, col))
            col += j + 1 - i
            i = j + 1
            continue
        m = _NUMBER_RE.match(text, i)
        if m and (ch.isdigit() or ch == "." or (ch == "-" and m.end() > i + 1)):
            toks.append(_Tok("number", m.group(0), line, col))
            col += m.end() - i
            i = m.end()
            continue
        m = _IDENT_RE.match(text, i)
        if m:
            toks.append(_Tok("ident", m.group(0), line, col))
            col += m.end() - i
            i = m.end()
            continue
        if ch in _PUNCT:
            toks.append(_Tok("punct", ch, line, col))
            i += 1
            col += 1
            continue
        raise ParseError(f"unexpected character {ch!r}", line, col)
    toks.append(_Tok("eof", "", line, col))
    return toks


class _Parser:
    def __init__(self, toks: list[_Tok]):
        self.toks = toks
        self.pos = 0

    def peek(self) -> _Tok:
        return self.toks[self.pos]

    def next(self) -> _Tok:
        tok = self.toks[self.pos]
        self.pos += 1
        return tok

    def fail(self, message: str, tok: _Tok | None = None, code: str = "syntax"):
        tok = tok or self.peek()
        raise ParseError(message, tok.line, tok.col, code)

    def expect(self, kind: str, text: str | None = None) -> _Tok:
        tok = self.peek()
        if tok.kind != kind or (text is not None and tok.text != text):
            want = text if text is not None else kind
            got = tok.text if tok.kind != "eof" else "end of input"
            self.fail(f"expected {want!r}, got {got!r}")
        return self.next()

    # --- grammar ---

    def program(self) -> ChemProgram:
        self.expect("ident", "procedure")
        name = self.expect("string").text
        self.expect("punct", "{")
        reagents: list[ReagentDecl] = []
        hardware: list[HardwareReq] = []
        steps: list[UnitOperation] = []
        metadata: dict[str, str] = {}
        seen: set[str] = set()
        while self.peek().text != "}":
            tok = self.peek()
            if tok.kind != "ident" or tok.text not in ("reagents", "hardware", "steps", "meta"):
                self.fail("expected a section: reagents, hardware, steps or meta")
            if tok.text in seen:
                self.fail(f"duplicate section {tok.text!r}")
            seen.add(tok.text)
            section = self.next().text
            self.expect("punct", "{")
            if section == "reagents":
                while self.peek().text != "}":
                    reagents.append(self.reagent_decl(reagents))
            elif section == "hardware":
                while self.peek().text != "}":
                    hardware.append(self.hardware_req(hardware))
            elif section == "steps":
                while self.peek().text != "}":
                    steps.append(self.step())
            else:
                while self.peek().text != "}":
                    key = self.expect("ident")
                    if key.text in metadata:
                        self.fail(f"duplicate meta key {key.text!r}", key)
                    self.expect("punct", "=")
                    metadata[key.text] = self.expect("string").text
            self.expect("punct", "}")
        close = self.expect("punct", "}")
        if self.peek().kind != "eof":
            self.fail("trailing input after program")
        if not steps:
            raise ParseError("program has no steps", close.line, close.col)
        prog = ChemProgram(name, reagents, hardware, steps, metadata)
        self._check_references(prog)
        return prog

    def reagent_decl(self, existing: list[ReagentDecl]) -> ReagentDecl:
        name = self.expect("ident")
        if any(d.name == name.text for d in existing):
            self.fail(f"duplicate reagent {name.text!r}", name, code="duplicate_reagent")
        self.expect("punct", ":")
        sp = self.expect("ident")
        if sp.text != "sp":
            self.fail("expected species tag 'sp:'", sp)
        self.expect("punct", ":")
        species = self.expect("ident").text
        amount = self.quantity(allowed=("mol", "g", "mL"))
        if amount.value <= 0:
            self.fail("reagent amount must be positive", name)
        self.expect("punct", "@")
        source = self.expect("ident").text
        role_tok = self.expect("ident")
        if role_tok.text not in ROLES:
            self.fail(f"unknown role {role_tok.text!r} (expected one of {', '.join(ROLES)})", role_tok)
        return ReagentDecl(name.text, species, amount, source, role_tok.text, line=name.line)

    def quantity(self, allowed: tuple[str, ...]) -> Quantity:
        num = self.expect("number")
        unit = self.expect("ident")
        if unit.text not in UNITS:
            self.fail(f"unknown unit {unit.text!r}", unit)
        base, scale = UNITS[unit.text]
        if base not in allowed:
            self.fail(f"expected a quantity in {'/'.join(allowed)}", unit)
        return Quantity(float(num.text) * scale, base)

    def hardware_req(self, existing: list[HardwareReq]) -> HardwareReq:
        vessel = self.expect("ident")
        if any(h.vessel == vessel.text for h in existing):
            self.fail(f"duplicate hardware entry {vessel.text!r}", vessel)
        self.expect("punct", ":")
        kind = self.expect("ident").text
        return HardwareReq(vessel.text, kind, line=vessel.line)

    def step(self) -> UnitOperation:
        name = self.expect("ident")
        kind = _OP_KINDS.get(name.text)
        if kind is None:
            self.fail(f"unknown step kind {name.text!r}", name, code="unknown_step_kind")
        self.expect("punct", "(")
        params: dict[str, ParamValue] = {}
        while self.peek().text != ")":
            if params:
                self.expect("punct", ",")
            key = self.expect("ident")
            if key.text in params:
                self.fail(f"duplicate parameter {key.text!r}", key)
            self.expect("punct", "=")
            params[key.text] = self.param_value(kind, key)
        self.expect("punct", ")")
        allowed = REQUIRED_PARAMS[kind] | OPTIONAL_PARAMS[kind] | {"reaction_step"}
        for key in params:
            if key not in allowed:
                self.fail(f"unknown parameter {key!r} for {kind.value}", name)
        return UnitOperation(kind, params, line=name.line)

    def param_value(self, kind: OpKind, key: _Tok) -> ParamValue:
        tok = self.peek()
        value: ParamValue
        if tok.kind == "number":
            self.next()
            nxt = self.peek()
            if nxt.kind == "ident" and nxt.text in UNITS:
                self.next()
                base, scale = UNITS[nxt.text]
                value = Quantity(float(tok.text) * scale, base)
            elif nxt.kind == "ident":
                self.fail(f"unknown unit {nxt.text!r}", nxt)
                raise AssertionError
            else:
                raw = float(tok.text)
                value = int(raw) if raw == int(raw) else raw
        elif tok.kind in ("ident", "string"):
            value = self.next().text
        else:
            self.fail("expected a parameter value")
            raise AssertionError
        dims = _QUANTITY_PARAMS.get(key.text)
        if dims is not None and (not isinstance(value, Quantity) or value.unit not in dims):
            self.fail(f"parameter {key.text!r} takes a quantity in {'/'.join(dims)}", tok)
        if key.text == "reaction_step" and not isinstance(value, int):
            self.fail("reaction_step takes a bare integer", tok)
        if key.text in ("vessel", "from", "to", "reagent", "solvent", "species") and not isinstance(value, str):
            self.fail(f"parameter {key.text!r} takes an identifier", tok)
        return value

    def _check_references(self, prog: ChemProgram) -> None:
        declared = {d.name for d in prog.reagents}
        last_marker = 0
        for op in prog.steps:
            for key in ("reagent", "solvent"):
                ref = op.params.get(key)
                if ref is not None and ref not in declared:
                    raise ParseError(
                        f"step references undeclared reagent {ref!r}",
                        op.line, 1, code="undeclared_reference",
                    )
            marker = op.reaction_step
            if marker is not None:
                if marker <= 0:
                    raise ParseError("reaction_step must be a positive integer", op.line, 1)
                if marker < last_marker:
                    raise ParseError("reaction_step markers must be non-decreasing", op.line, 1)
                last_marker = marker
            amount = op.params.get("amount")
            if isinstance(amount, Quantity) and amount.value <= 0:
                raise ParseError("amount must be positive", op.line, 1)
            time = op.params.get("time")
            if isinstance(time, Quantity) and time.value <= 0:
                raise ParseError("time must be positive", op.line, 1)
        known = {h.vessel for h in prog.hardware} | set(BUILTIN_VESSELS)
        for op in prog.steps:
            for v in op.vessels():
                if v not in known:
                    prog.hardware.append(HardwareReq(v, "any", line=op.line))
                    known.add(v)


def parse_program(text: str) -> ChemProgram:
    """Parse DSL text into a `ChemProgram`; raises `ParseError` on bad input."""
    return _Parser(_tokenize(text)).program()
