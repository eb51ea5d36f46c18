"""Program IR: function catalog, text/GQA parsing, validation and layout selection.

Text listing grammar, one function per line::

    Op[ category]: arg, arg, ..., [dep], [dep]

``Op`` is case-insensitive. Arguments are comma separated; leading and trailing
whitespace around each separator is ignored. Dependencies are bracketed
integers (``[1]`` or ``[1, 3]``) and may follow the last argument with or
without a comma. Two markers are recognised: a ``(o)`` argument on ``relate``
flips its direction to object-side (``(s)`` is the default, subject-side), and
a category written ``not(color)`` on ``filter`` negates the filter.
"""

from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass, replace
from typing import Any, Iterable, Mapping, Sequence


class ValueType(enum.Enum):
    OBJLIST = "ObjList"
    BOOLEAN = "Boolean"
    STRING = "String"


class ProgramError(Exception):
    pass


class ProgramSyntaxError(ProgramError):
    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class UnknownOperation(ProgramError):
    def __init__(self, operation: str, payload: Any = None):
        super().__init__(f"unknown operation {operation!r}")
        self.operation = operation
        self.payload = payload


class ArityMismatch(ProgramError):
    pass


class MalformedSemantic(ProgramError):
    pass


class InvalidProgram(ProgramError):
    def __init__(self, diagnostics: list[Diagnostic]):
        super().__init__("; ".join(str(d) for d in diagnostics))
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class FunctionSignature:
    operation: str
    category_required: bool
    input_types: tuple[ValueType, ...]
    argument_arity: int
    output_type: ValueType


@dataclass(frozen=True)
class FunctionCall:
    index: int
    operation: str
    category: str | None = None
    arguments: tuple[str, ...] = ()
    dependencies: tuple[int, ...] = ()
    negate: bool = False
    direction: str = "subject"

    @property
    def name(self) -> str:
        if self.category is None:
            return self.operation
        cat = f"not({self.category})" if self.negate else self.category
        return f"{self.operation} {cat}"


@dataclass(frozen=True)
class Program:
    functions: tuple[FunctionCall, ...]

    def __len__(self):
        return len(self.functions)

    def __iter__(self):
        return iter(self.functions)

    def __getitem__(self, i):
        return self.functions[i]

    @property
    def sink(self) -> FunctionCall:
        return self.functions[-1]


O, B, S = ValueType.OBJLIST, ValueType.BOOLEAN, ValueType.STRING


@dataclass(frozen=True)
class Catalog:
    signatures: Mapping[str, FunctionSignature]

    def __contains__(self, operation: str) -> bool:
        return operation in self.signatures

    def signature(self, operation: str) -> FunctionSignature:
        try:
            return self.signatures[operation]
        except KeyError:
            raise UnknownOperation(operation) from None

    def partition(self, vtype: ValueType) -> frozenset[str]:
        return frozenset(op for op, sig in self.signatures.items() if sig.output_type is vtype)

    @property
    def F_O(self) -> frozenset[str]:
        return self.partition(O)

    @property
    def F_B(self) -> frozenset[str]:
        return self.partition(B)

    @property
    def F_S(self) -> frozenset[str]:
        return self.partition(S)


def _sig(op, cat, inputs, arity, out):
    return FunctionSignature(op, cat, tuple(inputs), arity, out)


DEFAULT_CATALOG = Catalog({
    "select": _sig("select", False, [], 1, O),
    "filter": _sig("filter", True, [O], 1, O),
    "relate": _sig("relate", False, [O], 2, O),
    "verify": _sig("verify", True, [O], 1, B),
    "query": _sig("query", True, [O], 0, S),
    "exist": _sig("exist", False, [O], 0, B),
    "and": _sig("and", False, [B, B], 0, B),
    "or": _sig("or", False, [B, B], 0, B),
    "choose": _sig("choose", True, [O], 2, S),
    "same": _sig("same", True, [O, O], 0, B),
    "different": _sig("different", True, [O, O], 0, B),
    "common": _sig("common", False, [O, O], 0, S),
})


def classify(call: FunctionCall, catalog: Catalog = DEFAULT_CATALOG) -> ValueType:
    return catalog.signature(call.operation).output_type


def selected_layout(program: Program, catalog: Catalog = DEFAULT_CATALOG) -> list[FunctionCall]:
    """The object-producing calls, in execution order; these drive the encoder layout."""
    f_o = catalog.F_O
    return [f for f in program.functions if f.operation in f_o]


# ---------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class Diagnostic:
    index: int | None
    code: str
    message: str

    def __str__(self):
        where = f"[{self.index}] " if self.index is not None else ""
        return f"{where}{self.code}: {self.message}"


def validate(program: Program, catalog: Catalog = DEFAULT_CATALOG) -> list[Diagnostic]:
    """Return typing/ordering diagnostics; an empty list means the program is valid."""
    diags: list[Diagnostic] = []
    funcs = program.functions
    if not funcs:
        return [Diagnostic(None, "empty", "program has no functions")]
    out_types: dict[int, ValueType] = {}
    used: set[int] = set()
    for pos, f in enumerate(funcs):
        if f.index != pos:
            diags.append(Diagnostic(pos, "index", f"call carries index {f.index}, expected {pos}"))
        sig = catalog.signatures.get(f.operation)
        if sig is None:
            diags.append(Diagnostic(pos, "unknown-operation", f"{f.operation!r} is not in the catalog"))
            continue
        out_types[pos] = sig.output_type
        if sig.category_required and not f.category:
            diags.append(Diagnostic(pos, "category", f"{f.operation} needs a category"))
        if not sig.category_required and f.category:
            diags.append(Diagnostic(pos, "category", f"{f.operation} takes no category"))
        if f.negate and f.operation != "filter":
            diags.append(Diagnostic(pos, "negate", "only filter can be negated"))
        if f.direction not in ("subject", "object") or (f.direction == "object" and f.operation != "relate"):
            diags.append(Diagnostic(pos, "direction", f"bad direction {f.direction!r}"))
        if len(f.arguments) != sig.argument_arity:
            diags.append(Diagnostic(pos, "arity",
                                    f"{f.operation} takes {sig.argument_arity} arguments, got {len(f.arguments)}"))
        if len(f.dependencies) != len(sig.input_types):
            diags.append(Diagnostic(pos, "arity",
                                    f"{f.operation} takes {len(sig.input_types)} inputs, got {len(f.dependencies)}"))
        for dep, want in zip(f.dependencies, sig.input_types):
            if not 0 <= dep < pos:
                diags.append(Diagnostic(pos, "forward-dependency", f"dependency {dep} is not an earlier step"))
                continue
            used.add(dep)
            have = out_types.get(dep)
            if have is not None and have is not want:
                diags.append(Diagnostic(pos, "type", f"input {dep} is {have.value}, expected {want.value}"))
    last = len(funcs) - 1
    sink_type = out_types.get(last)
    if sink_type is ValueType.OBJLIST:
        diags.append(Diagnostic(last, "sink", "final function returns ObjList; needs Boolean or String"))
    for pos in range(last):
        if pos not in used:
            diags.append(Diagnostic(pos, "dangling", "output is never consumed (multiple sinks)"))
    return diags


def check(program: Program, catalog: Catalog = DEFAULT_CATALOG) -> Program:
    diags = validate(program, catalog)
    if diags:
        raise InvalidProgram(diags)
    return program


# ---------------------------------------------------------------------------
# text form

_HEAD = re.compile(r"\s*([A-Za-z_]+)(?:\s+([A-Za-z_]+|not\([A-Za-z_]+\)))?\s*:")
_DEP_GROUP = re.compile(r"\[\s*(\d+(?:\s*,\s*\d+)*)\s*\]")


def parse_program_text(text: str, catalog: Catalog = DEFAULT_CATALOG) -> Program:
    calls = []
    lines = [ln for ln in text.splitlines()]
    for lineno, line in enumerate(lines, start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        calls.append(_parse_line(line, lineno, len(calls), catalog))
    if not calls:
        raise ProgramSyntaxError("empty program", 1, 1)
    program = Program(tuple(calls))
    diags = validate(program, catalog)
    if diags:
        arity = [d for d in diags if d.code == "arity"]
        if arity:
            raise ArityMismatch(str(arity[0]))
        raise InvalidProgram(diags)
    return program


def _parse_line(line: str, lineno: int, index: int, catalog: Catalog) -> FunctionCall:
    m = _HEAD.match(line)
    if not m:
        col = len(line) - len(line.lstrip()) + 1
        raise ProgramSyntaxError("expected 'Op[ category]:'", lineno, col)
    op = m.group(1).lower()
    category = m.group(2)
    if op not in catalog:
        raise UnknownOperation(op)
    negate = False
    if category and category.startswith("not("):
        negate, category = True, category[4:-1]
    rest = line[m.end():]
    offset = m.end()

    deps: list[int] = []
    tail_start = len(rest)
    # dependency groups must close the line
    for dm in reversed(list(_DEP_GROUP.finditer(rest))):
        between = rest[dm.end():tail_start]
        if between.strip(" \t,"):
            break
        deps[:0] = [int(x) for x in dm.group(1).split(",")]
        tail_start = dm.start()
    arg_text = rest[:tail_start].rstrip().rstrip(",")
    if "[" in arg_text or "]" in arg_text:
        col = offset + (arg_text.find("[") if "[" in arg_text else arg_text.find("]")) + 1
        raise ProgramSyntaxError("misplaced dependency bracket", lineno, col)
    args = [a.strip() for a in arg_text.split(",")] if arg_text.strip() else []
    for a_pos, a in enumerate(args):
        if not a:
            raise ProgramSyntaxError("empty argument", lineno, offset + 1 + a_pos)
    direction = "subject"
    if op == "relate":
        marks = [a for a in args if a in ("(s)", "(o)")]
        if marks:
            direction = "object" if marks[-1] == "(o)" else "subject"
            args = [a for a in args if a not in ("(s)", "(o)")]
    return FunctionCall(index, op, category, tuple(args), tuple(deps), negate, direction)


def serialize_text(program: Program) -> str:
    lines = []
    for f in program.functions:
        head = f.operation.capitalize()
        if f.category:
            head += " " + (f"not({f.category})" if f.negate else f.category)
        parts = list(f.arguments)
        if f.direction == "object":
            parts.append("(o)")
        parts += [f"[{d}]" for d in f.dependencies]
        lines.append(f"{head}: {', '.join(parts)}".rstrip())
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# GQA "semantic" field

_OBJ_REF = re.compile(r"\s*\((?:\d+(?:\s*,\s*\d+)*|-)\)\s*$")


def parse_program_gqa(semantic: Sequence[Mapping[str, Any]], catalog: Catalog = DEFAULT_CATALOG) -> Program:
    if not semantic:
        raise MalformedSemantic("empty semantic list")
    calls = []
    for index, entry in enumerate(semantic):
        try:
            op_field = str(entry["operation"]).strip()
            argument = str(entry["argument"])
            deps = tuple(int(d) for d in entry["dependencies"])
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedSemantic(f"entry {index}: {exc}") from None
        op, _, category = op_field.partition(" ")
        op = op.lower()
        category = category.strip() or None
        if op not in catalog:
            raise UnknownOperation(op_field, payload=dict(entry))
        negate = False
        if category and category.startswith("not(") and category.endswith(")"):
            negate, category = True, category[4:-1]
        args = [a.strip() for a in argument.split(",")] if argument.strip() else []
        args = [_OBJ_REF.sub("", a).strip() for a in args]
        args = [a for a in args if a]
        direction = "subject"
        if op == "relate":
            kept = []
            for a in args:
                if a in ("(s)", "s"):
                    direction = "subject"
                elif a in ("(o)", "o"):
                    direction = "object"
                else:
                    kept.append(a)
            args = kept
        if op == "choose" and len(args) == 1 and "|" in args[0]:
            args = [a.strip() for a in args[0].split("|")]
        if op == "filter" and len(args) == 1 and args[0].startswith("not(") and args[0].endswith(")"):
            negate, args = True, [args[0][4:-1]]
        sig = catalog.signature(op)
        # GQA writes some categories as the argument, e.g. query with argument "name"
        if sig.category_required and category is None and len(args) == sig.argument_arity + 1:
            category, args = args[0], args[1:]
        calls.append(FunctionCall(index, op, category, tuple(args), deps, negate, direction))
    program = Program(tuple(calls))
    diags = validate(program, catalog)
    if diags:
        raise InvalidProgram(diags)
    return program


# ---------------------------------------------------------------------------
# canonical JSON


def program_to_json(program: Program) -> list[dict[str, Any]]:
    out = []
    for f in program.functions:
        rec: dict[str, Any] = {"op": f.operation, "category": f.category,
                               "args": list(f.arguments), "deps": list(f.dependencies)}
        if f.operation == "relate":
            rec["direction"] = f.direction
        if f.negate:
            rec["negate"] = True
        out.append(rec)
    return out


def program_from_json(doc: Iterable[Mapping[str, Any]]) -> Program:
    calls = []
    for i, rec in enumerate(doc):
        calls.append(FunctionCall(i, rec["op"], rec.get("category"), tuple(rec.get("args", ())),
                                  tuple(rec.get("deps", ())), bool(rec.get("negate", False)),
                                  rec.get("direction", "subject")))
    return Program(tuple(calls))


def dumps_program(program: Program) -> str:
    return json.dumps(program_to_json(program), separators=(",", ":"))


def reindex(calls: Sequence[FunctionCall]) -> Program:
    return Program(tuple(replace(c, index=i) for i, c in enumerate(calls)))
