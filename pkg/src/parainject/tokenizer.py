"""WordPiece-style subword tokenization and span remapping.

Covers vocabulary construction (greedy pair merges over a word-frequency
table), longest-match-first segmentation, sentence-pair encoding with
[CLS]/[SEP] layout, and remapping word-level phrase spans to token
indices in the concatenated sequence.
"""

from collections import Counter
from dataclasses import dataclass, field

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
RESERVED = [PAD, UNK, CLS, SEP, MASK]
CONT = "##"
MAX_WORD_CHARS = 100


class TokenizerError(ValueError):
    pass


class PairTooLongError(TokenizerError):
    pass


class Vocab:
    """Token-to-id map with the five reserved tokens on ids 0..4."""

    def __init__(self, tokens):
        if tokens[: len(RESERVED)] != RESERVED:
            raise TokenizerError(
                f"first {len(RESERVED)} tokens must be {RESERVED} in order"
            )
        if len(set(tokens)) != len(tokens):
            dupes = [t for t, c in Counter(tokens).items() if c > 1]
            raise TokenizerError(f"duplicate tokens in vocabulary: {dupes[:5]}")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    def id_of(self, token):
        return self.index.get(token, self.index[UNK])

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            for t in self.tokens:
                f.write(t + "\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            return cls([line.rstrip("\n") for line in f if line.rstrip("\n")])


def build_vocab(corpus, target_size):
    """Greedy pair-merge subword inventory from an iterable of word lists.

    The alphabet (single characters, word-initial and continuation forms)
    is always included so segmentation can fall back to characters.
    Merges proceed by descending pair frequency, ties broken
    lexicographically for determinism.
    """
    word_freq = Counter()
    for words in corpus:
        word_freq.update(w[:MAX_WORD_CHARS] for w in words)
    if not word_freq:
        raise TokenizerError("cannot build a vocabulary from an empty corpus")

    # Each word as a list of symbols: first char bare, rest ##-prefixed.
    pieces = {
        w: [w[0]] + [CONT + ch for ch in w[1:]] for w in word_freq
    }
    alphabet = sorted({s for syms in pieces.values() for s in syms})
    base = len(RESERVED) + len(alphabet)
    if target_size <= base:
        raise TokenizerError(
            f"target size {target_size} must exceed reserved + alphabet = {base}"
        )

    merged = []
    while base + len(merged) < target_size:
        pair_freq = Counter()
        for w, syms in pieces.items():
            f = word_freq[w]
            for x, y in zip(syms, syms[1:]):
                pair_freq[(x, y)] += f
        if not pair_freq:
            break
        best = max(pair_freq.items(), key=lambda kv: (kv[1], kv[0]))[0]
        x, y = best
        joined = x + y[len(CONT):]
        for w, syms in pieces.items():
            out = []
            i = 0
            while i < len(syms):
                if i + 1 < len(syms) and syms[i] == x and syms[i + 1] == y:
                    out.append(joined)
                    i += 2
                else:
                    out.append(syms[i])
                    i += 1
            pieces[w] = out
        if joined not in merged:
            merged.append(joined)

    return Vocab(RESERVED + alphabet + merged)


@dataclass
class EncodedPair:
    """`[CLS] s [SEP] t [SEP]` as token ids, with per-word subword offsets.

    ``src_offsets[w]``/``tgt_offsets[w]`` give the (first, last) subword
    index of word w *within its own sentence's subword list*; positions in
    the concatenated sequence are derived by remap_spans. ``boundary`` is
    the index of the first target token (= len(source subwords) + 2).
    """

    ids: list
    segments: list
    src_offsets: list
    tgt_offsets: list
    boundary: int
    tokens: list = field(repr=False, default_factory=list)

    def __len__(self):
        return len(self.ids)


class Tokenizer:
    def __init__(self, vocab):
        self.vocab = vocab

    def segment_word(self, word):
        """Greedy longest-match-first WordPiece pieces for one word."""
        word = word[:MAX_WORD_CHARS]
        if word in self.vocab:
            return [word]
        out = []
        start = 0
        while start < len(word):
            end = len(word)
            match = None
            while start < end:
                piece = word[start:end]
                if start > 0:
                    piece = CONT + piece
                if piece in self.vocab:
                    match = piece
                    break
                end -= 1
            if match is None:
                # character absent from alphabet; whole word becomes [UNK]
                return [UNK]
            out.append(match)
            start = end
        return out

    def encode_words(self, words):
        """Subword tokens plus per-word (first, last) offsets."""
        tokens = []
        offsets = []
        for w in words:
            pieces = self.segment_word(w)
            offsets.append((len(tokens), len(tokens) + len(pieces) - 1))
            tokens.extend(pieces)
        return tokens, offsets

    def detokenize(self, tokens):
        """Invert encode_words: join continuation pieces, space-join words."""
        words = []
        for t in tokens:
            if t.startswith(CONT) and words:
                words[-1] += t[len(CONT):]
            else:
                words.append(t)
        return words

    def encode_pair(self, s_words, t_words, max_len, truncate=False):
        """Encode a sentence pair; rejects overflow unless truncate=True.

        Truncation (used only for sentence-level tasks where labels cannot
        be corrupted) trims subwords from the tail of the longer side.
        """
        if not s_words or not t_words:
            raise TokenizerError("both sentences must be non-empty")
        s_sub, s_off = self.encode_words(s_words)
        t_sub, t_off = self.encode_words(t_words)
        total = len(s_sub) + len(t_sub) + 3
        if total > max_len:
            if not truncate:
                raise PairTooLongError(
                    f"pair needs {total} tokens (source {len(s_sub)}, target "
                    f"{len(t_sub)}) but max_len is {max_len}"
                )
            while len(s_sub) + len(t_sub) + 3 > max_len:
                if len(s_sub) >= len(t_sub) and len(s_sub) > 1:
                    s_sub.pop()
                elif len(t_sub) > 1:
                    t_sub.pop()
                else:
                    raise PairTooLongError(f"max_len {max_len} too small for any pair")
        tokens = [CLS] + s_sub + [SEP] + t_sub + [SEP]
        boundary = len(s_sub) + 2
        segments = [0] * boundary + [1] * (len(t_sub) + 1)
        ids = [self.vocab.id_of(t) for t in tokens]
        return EncodedPair(ids, segments, s_off, t_off, boundary, tokens)

    def encode_single(self, words, max_len):
        """`[CLS] s [SEP]` with all-zero segments, tail-truncated."""
        if not words:
            raise TokenizerError("sentence must be non-empty")
        sub, off = self.encode_words(words)
        sub = sub[: max_len - 2]
        tokens = [CLS] + sub + [SEP]
        ids = [self.vocab.id_of(t) for t in tokens]
        return EncodedPair(ids, [0] * len(ids), off, [], len(ids), tokens)

    def remap_spans(self, word_alignments, pair):
        """Word-level span quadruples -> token spans in the encoded pair.

        Source word span (a,b) maps to subword span shifted by 1 (for
        [CLS]); target word span (c,d) shifts by boundary. Raises on spans
        referencing words that do not exist.
        """
        out = []
        for js, je, ms, ne in word_alignments:
            if not (0 <= js <= je < len(pair.src_offsets)):
                raise TokenizerError(
                    f"source word span ({js},{je}) out of range for "
                    f"{len(pair.src_offsets)} words"
                )
            if not (0 <= ms <= ne < len(pair.tgt_offsets)):
                raise TokenizerError(
                    f"target word span ({ms},{ne}) out of range for "
                    f"{len(pair.tgt_offsets)} words"
                )
            j = pair.src_offsets[js][0] + 1
            k = pair.src_offsets[je][1] + 1
            m = pair.tgt_offsets[ms][0] + pair.boundary
            n = pair.tgt_offsets[ne][1] + pair.boundary
            out.append((j, k, m, n))
        return out
