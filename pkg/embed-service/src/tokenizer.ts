/**
 * C-family lexical tokenizer, matching the indexer's tokenization exactly:
 * comments and whitespace dropped, string/char/number literals kept whole,
 * multi-character operators maximal-munch. Two texts that differ only in
 * whitespace or comments produce the same token stream, which is what makes
 * hash-encoder vectors interchangeable with the indexer's.
 */

const OPERATORS = [
  '>>=', '<<=', '...',
  '->', '++', '--', '<<', '>>', '<=', '>=', '==', '!=', '&&', '||',
  '+=', '-=', '*=', '/=', '%=', '&=', '^=', '|=', '##',
];

const TOKEN_RE = new RegExp(
  [
    String.raw`(?<ws>\s+)`,
    String.raw`(?<lineComment>\/\/[^\n]*)`,
    String.raw`(?<blockComment>\/\*[\s\S]*?\*\/|\/\*[\s\S]*$)`,
    String.raw`(?<str>"(?:\\[\s\S]|[^"\\\n])*(?:"|(?=\n)|$))`,
    String.raw`(?<chr>'(?:\\[\s\S]|[^'\\\n])*(?:'|(?=\n)|$))`,
    String.raw`(?<num>\.?\d(?:[eEpP][+-]|[\w.])*)`,
    String.raw`(?<word>[A-Za-z_]\w*)`,
    `(?<punct>${OPERATORS.map((op) => op.replace(/[.*+?^${}()|[\]\\]/g, '\\$&')).join('|')}|[\\s\\S])`,
  ].join('|'),
  'y',
);

export function tokenize(text: string): string[] {
  const tokens: string[] = [];
  TOKEN_RE.lastIndex = 0;
  let pos = 0;
  while (pos < text.length) {
    TOKEN_RE.lastIndex = pos;
    const m = TOKEN_RE.exec(text);
    if (m === null) {
      pos += 1; // unreachable: the single-char fallback always matches
      continue;
    }
    pos = TOKEN_RE.lastIndex;
    const groups = m.groups!;
    if (groups.ws !== undefined || groups.lineComment !== undefined || groups.blockComment !== undefined) {
      continue;
    }
    tokens.push(m[0]);
  }
  return tokens;
}
