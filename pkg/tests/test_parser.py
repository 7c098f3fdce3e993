"""Corpus scanning, tokenization, and function extraction."""

import json
from pathlib import Path

import pytest
from hypothesis import given, strategies as st

from clonesearch.errors import StorageError
from clonesearch.parser import (
    ScanStats,
    extract_functions,
    parse_source,
    scan_corpus,
    tokenize,
)

DATA = Path(__file__).parent / "data" / "c_suite"
EXPECTED = json.loads((DATA / "expected.json").read_text())


class TestTokenize:
    def test_whitespace_collapse(self):
        assert tokenize("int  a ;") == ("int", "a", ";")

    def test_newlines_and_tabs(self):
        assert tokenize("a\n\t=1;") == ("a", "=", "1", ";")

    def test_comment_stripped(self):
        assert tokenize("x = 1; /* c */") == ("x", "=", "1", ";")
        assert tokenize("x = 1; // trailing") == ("x", "=", "1", ";")

    def test_string_and_char_literals(self):
        assert tokenize('s = "a b";') == ("s", "=", '"a b"', ";")
        assert tokenize("c = '}';") == ("c", "=", "'}'", ";")

    def test_unterminated_string_consumes_to_eol(self):
        assert tokenize('s = "open\nnext;') == ("s", "=", '"open', "next", ";")

    def test_multichar_operators(self):
        assert tokenize("a>>=b;") == ("a", ">>=", "b", ";")
        assert tokenize("p->q++;") == ("p", "->", "q", "++", ";")

    def test_numbers(self):
        assert tokenize("x = 0x1F + 1.5e-3;") == ("x", "=", "0x1F", "+", "1.5e-3", ";")

    @given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4))
    def test_whitespace_runs_equivalent(self, a, b, c):
        # Any run of blanks outside literals tokenizes like a single space.
        base = "int f ( void ) { return 1 ; }"
        noisy = base.replace(" ", " " * a, 3).replace(" ", "\n" * b, 2).replace(" ", "\t" * c, 1)
        assert tokenize(noisy) == tokenize(base)

    def test_deterministic(self):
        text = 'int f(void){return "x";}'
        assert tokenize(text) == tokenize(text)


class TestExtractSuite:
    @pytest.mark.parametrize("name", sorted(EXPECTED))
    def test_hand_traced_boundaries(self, name):
        text = (DATA / name).read_text()
        result = parse_source(text, DATA / name)
        got = [[f.start_line, f.end_line] for f in result.fragments]
        assert got == EXPECTED[name]["fragments"]
        assert result.partially_parsed == EXPECTED[name]["partial"]

    @pytest.mark.parametrize("name", sorted(EXPECTED))
    def test_text_reproduces_file_lines(self, name):
        path = DATA / name
        lines = path.read_text().splitlines(keepends=True)
        for frag in extract_functions(path):
            assert frag.text == "".join(lines[frag.start_line - 1 : frag.end_line])

    def test_fragments_non_overlapping(self):
        for name in EXPECTED:
            frags = extract_functions(DATA / name)
            for a, b in zip(frags, frags[1:]):
                assert a.end_line <= b.start_line

    def test_idempotent(self):
        text = (DATA / "two_functions.c").read_text()
        r1 = parse_source(text, Path("x.c"))
        r2 = parse_source(text, Path("x.c"))
        assert [f.text for f in r1.fragments] == [f.text for f in r2.fragments]


class TestScanCorpus:
    def test_suffix_filter(self, tmp_path):
        (tmp_path / "a.c").write_text("int x;\n")
        (tmp_path / "b.h").write_text("int y;\n")
        (tmp_path / "c.txt").write_text("readme\n")
        files = [f.path.name for f in scan_corpus(tmp_path)]
        assert files == ["a.c", "b.h"]

    def test_empty_dir(self, tmp_path):
        assert list(scan_corpus(tmp_path)) == []

    def test_binary_filtered(self, tmp_path):
        (tmp_path / "a.c").write_bytes(b"int x;\x00\n")
        stats = ScanStats()
        assert list(scan_corpus(tmp_path, stats=stats)) == []
        assert stats.skipped == 0
        assert stats.filtered_binary == 1

    def test_oversize_filtered(self, tmp_path, monkeypatch):
        monkeypatch.setattr("clonesearch.parser.MAX_FILE_BYTES", 16)
        (tmp_path / "big.c").write_text("x" * 64)
        stats = ScanStats()
        assert list(scan_corpus(tmp_path, stats=stats)) == []
        assert stats.filtered_size == 1

    def test_lexicographic_order(self, tmp_path):
        (tmp_path / "sub").mkdir()
        (tmp_path / "sub" / "z.c").write_text("int a;\n")
        (tmp_path / "ab.c").write_text("int b;\n")
        (tmp_path / "a.c").write_text("int c;\n")
        got = [str(f.path.relative_to(tmp_path)) for f in scan_corpus(tmp_path)]
        assert got == sorted(got)

    def test_unreadable_root_fatal(self, tmp_path):
        with pytest.raises(StorageError):
            list(scan_corpus(tmp_path / "missing"))

    def test_line_count(self, tmp_path):
        (tmp_path / "a.c").write_text("int x;\nint y;\nint z;")
        files = list(scan_corpus(tmp_path))
        assert files[0].line_count == 3
