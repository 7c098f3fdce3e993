"""Corpus scanning and function-level fragment extraction for C-family sources.

Extraction is a lexer-level heuristic, not a full C grammar: a top-level
``(...)`` group followed by ``{`` opens a function body, with a side path
for K&R-style parameter declarations. Braces inside strings, comments, and
preprocessor directives never affect nesting depth.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

from .errors import StorageError

logger = logging.getLogger(__name__)

DEFAULT_EXTENSIONS = frozenset({".c", ".h"})

# Cleaning filters: files above the size cap are treated as generated code,
# files with a NUL in the first 8 KiB as binary.
MAX_FILE_BYTES = 10 * 1024 * 1024
_BINARY_SNIFF_BYTES = 8192

_C_KEYWORDS = frozenset(
    """auto break case char const continue default do double else enum extern
    float for goto if inline int long register restrict return short signed
    sizeof static struct switch typedef union unsigned void volatile while
    _Bool _Complex _Imaginary _Atomic _Noreturn _Static_assert _Thread_local
    """.split()
)

# Multi-character operators first so alternation is maximal-munch.
_OPERATORS = [
    ">>=", "<<=", "...",
    "->", "++", "--", "<<", ">>", "<=", ">=", "==", "!=", "&&", "||",
    "+=", "-=", "*=", "/=", "%=", "&=", "^=", "|=", "##",
]

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<line_comment>//[^\n]*)
  | (?P<block_comment>/\*.*?\*/|/\*.*\Z)
  | (?P<string>"(?:\\.|[^"\\\n])*(?:"|(?=\n)|\Z))
  | (?P<char>'(?:\\.|[^'\\\n])*(?:'|(?=\n)|\Z))
  | (?P<number>\.?\d(?:[eEpP][+-]|[\w.])*)
  | (?P<word>[A-Za-z_]\w*)
  | (?P<punct>%s|.)
    """
    % "|".join(re.escape(op) for op in _OPERATORS),
    re.VERBOSE | re.DOTALL,
)


@dataclass(frozen=True)
class SourceFile:
    """A corpus file that passed the cleaning filters."""

    path: Path
    byte_size: int
    line_count: int


@dataclass(frozen=True)
class CodeFragment:
    """One extracted top-level function.

    ``text`` is the exact content of lines ``start_line..end_line`` (1-based,
    inclusive), so re-reading the file reproduces it byte for byte.
    """

    file_path: Path
    start_line: int
    end_line: int
    text: str
    token_stream: tuple[str, ...]


@dataclass
class ScanStats:
    """Corpus-level counters, emitted in the parse report."""

    original_files: int = 0
    cleaned_files: int = 0
    original_lines: int = 0
    skipped: int = 0
    filtered_extension: int = 0
    filtered_binary: int = 0
    filtered_size: int = 0
    functions_parsed: int = 0
    partially_parsed_files: int = 0
    rejected_empty: int = 0
    parse_time_s: float = 0.0

    def as_report(self) -> dict[str, object]:
        return {
            "original_files": self.original_files,
            "cleaned_files": self.cleaned_files,
            "original_lines": self.original_lines,
            "functions_parsed": self.functions_parsed,
            "parse_time_s": round(self.parse_time_s, 3),
            "skipped": self.skipped,
            "filtered_extension": self.filtered_extension,
            "filtered_binary": self.filtered_binary,
            "filtered_size": self.filtered_size,
            "partially_parsed_files": self.partially_parsed_files,
            "rejected_empty": self.rejected_empty,
        }


@dataclass(frozen=True)
class _Tok:
    kind: str  # word | number | string | char | punct | directive
    text: str
    line: int


def _lex(text: str, directives_opaque: bool) -> list[_Tok]:
    """Lex ``text`` into significant tokens, dropping whitespace and comments.

    With ``directives_opaque`` a ``#`` that starts a line swallows the whole
    logical line (including backslash continuations) into one token, so
    braces inside macros cannot unbalance the structural scan.
    """
    tokens: list[_Tok] = []
    pos = 0
    line = 1
    n = len(text)
    last_sig_line = 0
    while pos < n:
        m = _TOKEN_RE.match(text, pos)
        if m is None:  # pragma: no cover - the catch-all punct makes this unreachable
            pos += 1
            continue
        kind = m.lastgroup or "punct"
        chunk = m.group()
        if kind in ("ws", "line_comment", "block_comment"):
            line += chunk.count("\n")
            pos = m.end()
            continue
        if (
            directives_opaque
            and kind == "punct"
            and chunk == "#"
            and line > last_sig_line
        ):
            end = _directive_end(text, pos)
            body = text[pos:end]
            tokens.append(_Tok("directive", body, line))
            line += body.count("\n")
            last_sig_line = line
            pos = end
            continue
        tokens.append(_Tok(kind, chunk, line))
        line += chunk.count("\n")
        last_sig_line = line
        pos = m.end()
    return tokens


def _directive_end(text: str, start: int) -> int:
    """Return the index one past a preprocessor logical line."""
    pos = start
    n = len(text)
    while pos < n:
        nl = text.find("\n", pos)
        if nl == -1:
            return n
        if nl > start and text[nl - 1] == "\\":
            pos = nl + 1
            continue
        return nl  # newline itself stays outside the directive token
    return n


def tokenize(text: str) -> tuple[str, ...]:
    """Split source text into lexical tokens with comments and whitespace removed."""
    return tuple(tok.text for tok in _lex(text, directives_opaque=False))


@dataclass
class FileParseResult:
    fragments: list[CodeFragment]
    partially_parsed: bool


def is_binary(head: bytes) -> bool:
    return b"\x00" in head[:_BINARY_SNIFF_BYTES]


def scan_corpus(
    root: Path,
    extensions: Iterable[str] = DEFAULT_EXTENSIONS,
    stats: ScanStats | None = None,
) -> Iterator[SourceFile]:
    """Yield cleaned source files under ``root`` in lexicographic path order.

    An unreadable root is fatal; unreadable individual files are logged,
    counted as skipped, and passed over.
    """
    root = Path(root)
    if not root.is_dir():
        raise StorageError(f"corpus root is not a readable directory: {root}")
    suffixes = {s if s.startswith(".") else "." + s for s in extensions}
    if not suffixes:
        raise StorageError("no file extensions configured")

    try:
        paths = sorted(
            (p for p in root.rglob("*") if p.is_file()), key=lambda p: str(p)
        )
    except OSError as exc:
        raise StorageError(f"cannot scan corpus root {root}: {exc}") from exc

    stats = stats if stats is not None else ScanStats()
    for path in paths:
        stats.original_files += 1
        if path.suffix not in suffixes:
            stats.filtered_extension += 1
            continue
        try:
            data = path.read_bytes()
        except OSError as exc:
            logger.warning("skipping unreadable file %s: %s", path, exc)
            stats.skipped += 1
            continue
        if len(data) > MAX_FILE_BYTES:
            stats.filtered_size += 1
            continue
        if is_binary(data):
            stats.filtered_binary += 1
            continue
        line_count = data.count(b"\n")
        if data and not data.endswith(b"\n"):
            line_count += 1
        stats.cleaned_files += 1
        stats.original_lines += line_count
        yield SourceFile(path=path, byte_size=len(data), line_count=line_count)


def parse_source(text: str, path: Path) -> FileParseResult:
    """Extract every top-level function definition from ``text``."""
    tokens = _lex(text, directives_opaque=True)
    lines = text.splitlines(keepends=True)
    fragments: list[CodeFragment] = []
    partial = False

    n = len(tokens)
    i = 0
    decl_start: int | None = None
    while i < n:
        tok = tokens[i]
        if tok.kind == "directive" or (tok.kind == "punct" and tok.text in (";", "}")):
            decl_start = None
            i += 1
            continue
        if decl_start is None:
            decl_start = i
        if tok.kind == "punct" and tok.text == "{":
            # Brace block with no signature in front: struct/enum/union body
            # or an initializer. Consume without emitting.
            close = _match_braces(tokens, i)
            if close is None:
                partial = True
                break
            i = close + 1
            continue
        if tok.kind == "punct" and tok.text == "(":
            close = _match_parens(tokens, i)
            if close is None:
                partial = True
                break
            after = close + 1
            body_open = _function_body_open(tokens, i, close)
            if body_open is not None:
                body_close = _match_braces(tokens, body_open)
                if body_close is None:
                    partial = True
                    break
                frag = _make_fragment(
                    path, lines, tokens[decl_start].line, tokens[body_close].line
                )
                fragments.append(frag)
                decl_start = None
                i = body_close + 1
                continue
            i = after
            continue
        i += 1

    return FileParseResult(fragments=fragments, partially_parsed=partial)


def extract_functions(source: SourceFile | Path) -> list[CodeFragment]:
    """Parse one cleaned file and return its function fragments."""
    path = source.path if isinstance(source, SourceFile) else Path(source)
    text = read_source_text(path)
    return parse_source(text, path).fragments


def read_source_text(path: Path) -> str:
    # errors="replace" keeps decoding deterministic on stray non-UTF-8 bytes
    return path.read_text(encoding="utf-8", errors="replace")


def parse_file(source: SourceFile, stats: ScanStats | None = None) -> list[CodeFragment]:
    """extract_functions plus bookkeeping into ``stats``."""
    result = parse_source(read_source_text(source.path), source.path)
    if stats is not None:
        stats.functions_parsed += len(result.fragments)
        if result.partially_parsed:
            stats.partially_parsed_files += 1
    return result.fragments


def _match_parens(tokens: list[_Tok], open_idx: int) -> int | None:
    depth = 0
    for j in range(open_idx, len(tokens)):
        t = tokens[j]
        if t.kind != "punct":
            continue
        if t.text == "(":
            depth += 1
        elif t.text == ")":
            depth -= 1
            if depth == 0:
                return j
    return None


def _match_braces(tokens: list[_Tok], open_idx: int) -> int | None:
    depth = 0
    for j in range(open_idx, len(tokens)):
        t = tokens[j]
        if t.kind != "punct":
            continue
        if t.text == "{":
            depth += 1
        elif t.text == "}":
            depth -= 1
            if depth == 0:
                return j
    return None


def _function_body_open(tokens: list[_Tok], open_idx: int, close_idx: int) -> int | None:
    """Index of the ``{`` opening a function body after a parameter list, or None.

    Handles three shapes: ``(...) {``, ``(...) attr... {`` where attr is a
    parenthesized suffix like __attribute__((...)), and K&R declarations,
    which are only attempted when the parameter list is a bare identifier
    list (``(a, b)`` with no type keywords).
    """
    j = close_idx + 1
    n = len(tokens)
    if j >= n:
        return None
    nxt = tokens[j]
    if nxt.kind == "punct":
        if nxt.text == "{":
            return j
        return None  # ';' prototype, ',' declarator list, '=' initializer, ...
    if nxt.kind not in ("word", "number"):
        return None

    if _is_identifier_list(tokens, open_idx, close_idx):
        # K&R parameter declarations: word/, / * / [ ] / ; groups, then '{'.
        while j < n:
            t = tokens[j]
            if t.kind in ("word", "number"):
                j += 1
                continue
            if t.kind == "punct":
                if t.text == "{":
                    return j
                if t.text in ("*", ",", ";", "[", "]"):
                    j += 1
                    continue
                if t.text == "(":
                    close = _match_parens(tokens, j)
                    if close is None:
                        return None
                    j = close + 1
                    continue
            return None
        return None

    # Attribute-style suffix: words and balanced paren groups before '{'.
    while j < n:
        t = tokens[j]
        if t.kind == "word":
            j += 1
            continue
        if t.kind == "punct":
            if t.text == "{":
                return j
            if t.text == "(":
                close = _match_parens(tokens, j)
                if close is None:
                    return None
                j = close + 1
                continue
        return None
    return None


def _is_identifier_list(tokens: list[_Tok], open_idx: int, close_idx: int) -> bool:
    inner = tokens[open_idx + 1 : close_idx]
    if not inner:
        return False
    expect_name = True
    for t in inner:
        if expect_name:
            if t.kind != "word" or t.text in _C_KEYWORDS:
                return False
            expect_name = False
        else:
            if t.kind != "punct" or t.text != ",":
                return False
            expect_name = True
    return not expect_name


def _make_fragment(
    path: Path, lines: list[str], start_line: int, end_line: int
) -> CodeFragment:
    text = "".join(lines[start_line - 1 : end_line])
    return CodeFragment(
        file_path=path,
        start_line=start_line,
        end_line=end_line,
        text=text,
        token_stream=tokenize(text),
    )


def format_report_text(report: dict) -> str:
    """Human-readable corpus statistics block."""
    rows = [
        ("# Original Lines of Code", f"{report['original_lines']:,}"),
        ("# Original Files", f"{report['original_files']:,}"),
        ("# Cleaned Files", f"{report['cleaned_files']:,}"),
        ("# Functions Parsed", f"{report['functions_parsed']:,}"),
        ("Parsing Time", f"{report['parse_time_s']:.1f}s"),
    ]
    width = max(len(k) for k, _ in rows)
    return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)


def format_parse_report(stats: ScanStats) -> str:
    """Human-readable block plus machine-readable key=value lines."""
    report = stats.as_report()
    out = [format_report_text(report), ""]
    out.extend(f"{k}={report[k]}" for k in sorted(report))
    return "\n".join(out)
