"""Word-level tokenizer and a small prefix language model.

The model input is ``[visual tokens] + [instruction] + [BOS + response]``.
Visual and instruction positions see each other freely; each response
position sees the whole prefix and the response positions up to itself.
"""
from __future__ import annotations

import re
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .encoder import ConfigError
from .nn import LayerNorm, Linear, Module, SelfAttentionBlock, param
from .tensor import Tensor

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")
_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def tokenize(text: str) -> list[str]:
    """Lowercase; words and single punctuation marks become separate tokens."""
    return _TOKEN_RE.findall(text.lower())


def detokenize(tokens: Sequence[str]) -> str:
    out = ""
    for tok in tokens:
        if out and not (len(tok) == 1 and not tok.isalnum() and tok != "_"):
            out += " "
        out += tok
    return out


def normalize_text(text: str) -> str:
    return detokenize(tokenize(text))


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    role: str = "instruction"

    def __len__(self) -> int:
        return len(self.ids)


class Vocabulary:
    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:4]) != RESERVED:
            raise ValueError(f"vocabulary must start with the reserved tokens {RESERVED}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary contains duplicate tokens")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    @classmethod
    def build(cls, texts: Iterable[str]) -> Vocabulary:
        words = sorted({w for text in texts for w in tokenize(text)} - set(RESERVED))
        return cls(list(RESERVED) + words)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def encode(self, text: str, role: str = "instruction") -> TokenSequence:
        ids = [self.index.get(w, UNK) for w in tokenize(text)]
        if role == "response":
            ids.append(EOS)
        return TokenSequence(tuple(ids), role)

    def decode(self, seq: TokenSequence | Sequence[int]) -> str:
        ids = seq.ids if isinstance(seq, TokenSequence) else seq
        words = []
        for i in ids:
            if i == EOS:
                break
            if i in (PAD, BOS):
                continue
            words.append(self.tokens[i])
        return detokenize(words)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> Vocabulary:
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines)


@dataclass(frozen=True)
class LMConfig:
    vocab_size: int = 64
    width: int = 64
    layers: int = 2
    heads: int = 4
    max_response_len: int = 24
    max_instruction_len: int = 32
    n_visual: int = 32

    def __post_init__(self):
        if self.width % self.heads:
            raise ConfigError(f"LM width {self.width} not divisible by {self.heads} heads")

    @property
    def max_positions(self) -> int:
        return self.n_visual + self.max_instruction_len + self.max_response_len + 1

    def to_dict(self) -> dict:
        return asdict(self)


def pad_batch(seqs: Sequence[Sequence[int]], width: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    width = max([len(s) for s in seqs] + [0]) if width is None else width
    ids = np.full((len(seqs), width), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return ids, mask


class PrefixLM(Module):
    def __init__(self, cfg: LMConfig, rng: np.random.Generator):
        self._cfg = cfg
        c = cfg.width
        self.tok_embed = param(rng.normal(0.0, 0.5, size=(cfg.vocab_size, c)))
        self.pos_embed = param(rng.normal(0.0, 0.1, size=(cfg.max_positions, c)))
        self.segment = param(rng.normal(0.0, 0.1, size=(2, c)))
        self.blocks = [SelfAttentionBlock(c, cfg.heads, rng) for _ in range(cfg.layers)]
        self.ln_f = LayerNorm(c)
        self.head = Linear(c, cfg.vocab_size, rng)

    @property
    def config(self) -> LMConfig:
        return self._cfg

    def forward(self, visual: Tensor, instr_ids: np.ndarray, instr_mask: np.ndarray,
                resp_ids: np.ndarray) -> Tensor:
        """Logits (B, R, V) for each response input position.

        ``resp_ids`` is (B, R): BOS followed by the response prefix (padding
        after a sequence's end only affects later positions).
        """
        cfg = self._cfg
        b, n_v, _ = visual.shape
        instr_ids = np.asarray(instr_ids, dtype=np.int64)
        resp_ids = np.asarray(resp_ids, dtype=np.int64)
        n_i, n_r = instr_ids.shape[1], resp_ids.shape[1]
        if n_r > cfg.max_response_len + 1:
            raise ValueError(f"response prefix of length {n_r - 1} exceeds max_response_len={cfg.max_response_len}")
        if n_i > cfg.max_instruction_len:
            raise ValueError(f"instruction of length {n_i} exceeds max_instruction_len={cfg.max_instruction_len}")
        if n_v > cfg.n_visual:
            raise ValueError(f"{n_v} visual tokens exceed n_visual={cfg.n_visual}")
        instr_mask = np.asarray(instr_mask, dtype=bool)
        lengths = instr_mask.sum(axis=1)

        total = n_v + n_i + n_r
        pos = np.zeros((b, total), dtype=np.int64)
        pos[:, :n_v] = np.arange(n_v)
        pos[:, n_v:n_v + n_i] = n_v + np.minimum(np.arange(n_i)[None, :], np.maximum(lengths[:, None] - 1, 0))
        pos[:, n_v + n_i:] = n_v + lengths[:, None] + np.arange(n_r)[None, :]

        text_ids = np.concatenate([instr_ids, resp_ids], axis=1)
        text = T.embedding(self.tok_embed, text_ids) + self.segment[1]
        x = T.concat([visual + self.segment[0], text], axis=1) + T.embedding(self.pos_embed, pos)

        key_ok = np.concatenate([np.ones((b, n_v), dtype=bool), instr_mask, np.ones((b, n_r), dtype=bool)], axis=1)
        n_pre = n_v + n_i
        allowed = np.zeros((total, total), dtype=bool)
        allowed[:, :n_pre] = True
        allowed[n_pre:, n_pre:] = np.tril(np.ones((n_r, n_r), dtype=bool))
        mask = (allowed[None, :, :] & key_ok[:, None, :])[:, None, :, :]

        for block in self.blocks:
            x = block(x, mask)
        out = self.ln_f(x[:, n_pre:])
        return self.head(out)

    __call__ = forward


def response_batch(responses: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Teacher-forcing arrays from response id lists that end in EOS.

    Returns (inputs = BOS + response[:-1], targets = response, weights) where
    the weights give each sample's tokens equal total mass 1.
    """
    width = max(len(r) for r in responses)
    inputs = np.full((len(responses), width), PAD, dtype=np.int64)
    targets = np.full((len(responses), width), PAD, dtype=np.int64)
    weights = np.zeros((len(responses), width))
    for i, r in enumerate(responses):
        if not r:
            raise ValueError(f"response {i} is empty")
        inputs[i, 0] = BOS
        inputs[i, 1:len(r)] = r[:-1]
        targets[i, :len(r)] = r
        weights[i, :len(r)] = 1.0 / len(r)
    return inputs, targets, weights


def sequence_loss(lm: PrefixLM, visual: Tensor, instr_ids: np.ndarray, instr_mask: np.ndarray,
                  responses: Sequence[Sequence[int]]) -> Tensor:
    """Token cross-entropy over response positions, mean per sample, mean over the batch."""
    inputs, targets, weights = response_batch(responses)
    logits = lm.forward(visual, instr_ids, instr_mask, inputs)
    return T.cross_entropy(logits, targets, weights)


def greedy_decode(lm: PrefixLM, visual: Tensor, instr_ids: np.ndarray, instr_mask: np.ndarray,
                  max_len: int | None = None) -> list[list[int]]:
    """Batched argmax decoding; returns each sequence without its EOS."""
    cfg = lm.config
    max_len = cfg.max_response_len if max_len is None else min(max_len, cfg.max_response_len)
    b = visual.shape[0]
    seqs = [[] for _ in range(b)]
    done = np.zeros(b, dtype=bool)
    resp = np.full((b, 1), BOS, dtype=np.int64)
    with T.no_grad():
        for _ in range(max_len):
            logits = lm.forward(visual, instr_ids, instr_mask, resp).data[:, -1]
            nxt = np.argmax(logits, axis=-1)
            for i in range(b):
                if not done[i]:
                    if nxt[i] == EOS:
                        done[i] = True
                    else:
                        seqs[i].append(int(nxt[i]))
            if done.all():
                break
            resp = np.concatenate([resp, nxt[:, None]], axis=1)
    return seqs


def beam_decode(lm: PrefixLM, visual: Tensor, instr_ids: np.ndarray, instr_mask: np.ndarray,
                width: int = 3, max_len: int | None = None) -> list[int]:
    """Single-sample beam search ranked by length-normalised log-probability.

    Ties are broken by the lexicographically smaller id sequence.
    """
    cfg = lm.config
    max_len = cfg.max_response_len if max_len is None else min(max_len, cfg.max_response_len)
    if max_len <= 0:
        return []
    beams: list[tuple[float, tuple[int, ...]]] = [(0.0, ())]
    finished: list[tuple[float, tuple[int, ...]]] = []
    with T.no_grad():
        for step in range(max_len):
            n = len(beams)
            resp = np.array([[BOS, *seq] for _, seq in beams], dtype=np.int64)
            logits = lm.forward(T.concat([visual] * n, axis=0) if n > 1 else visual,
                                np.repeat(instr_ids, n, axis=0), np.repeat(instr_mask, n, axis=0), resp).data[:, -1]
            logp = logits - logits.max(-1, keepdims=True)
            logp = logp - np.log(np.exp(logp).sum(-1, keepdims=True))
            cands = [(score + float(row[tok]), seq + (tok,))
                     for (score, seq), row in zip(beams, logp) for tok in range(row.shape[0])]
            cands.sort(key=lambda c: (-c[0], c[1]))
            beams = []
            for score, seq in cands[:width]:
                if seq[-1] == EOS or step + 1 == max_len:
                    finished.append((score, seq))
                else:
                    beams.append((score, seq))
            if not beams:
                break
    best = min(finished, key=lambda c: (-c[0] / len(c[1]), c[1]))
    seq = list(best[1])
    return seq[:-1] if seq and seq[-1] == EOS else seq
