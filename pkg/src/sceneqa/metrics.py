"""Corpus text-generation metrics: BLEU-1..4, ROUGE-L, CIDEr and exact match.

Every scoring function returns a fraction (CIDEr: its raw 0..10 value);
``MetricReport`` converts to the usual percentage scale.
"""
from __future__ import annotations

import json
import math
import warnings
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .lm import tokenize

ROUGE_BETA2 = 1.2
CIDER_N = 4
METRIC_NAMES = ("BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "METEOR", "ROUGE-L", "CIDEr", "EM@1")


class MetricWarning(UserWarning):
    pass


@dataclass(frozen=True)
class EvalPair:
    id: str
    hypothesis: tuple[str, ...]
    references: tuple[tuple[str, ...], ...]
    task: str = "qa"

    def __post_init__(self):
        if not self.references:
            raise ValueError(f"pair {self.id!r}: at least one reference is required")

    @classmethod
    def from_text(cls, id: str, hypothesis: str, references: Sequence[str], task: str = "qa") -> EvalPair:
        return cls(id, tuple(tokenize(hypothesis)), tuple(tuple(tokenize(r)) for r in references), task)


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


# --------------------------------------------------------------------- BLEU
def bleu(pairs: Sequence[EvalPair], n: int = 4) -> float:
    """Corpus BLEU-n with pooled clipped precisions and a corpus brevity penalty.

    A zero precision of order k is replaced by 1 / (2 * corpus k-gram count),
    with the count floored at 1.
    """
    if not 1 <= n <= 4:
        raise ValueError(f"BLEU order must be in 1..4, got {n}")
    hyp_len = sum(len(p.hypothesis) for p in pairs)
    if hyp_len == 0:
        warnings.warn("bleu: hypothesis corpus is empty; score defined as 0", MetricWarning, stacklevel=2)
        return 0.0
    ref_len = 0
    for p in pairs:
        c = len(p.hypothesis)
        ref_len += min((abs(len(r) - c), len(r)) for r in p.references)[1]
    log_sum = 0.0
    for k in range(1, n + 1):
        matched = total = 0
        for p in pairs:
            hyp = ngrams(p.hypothesis, k)
            best: Counter = Counter()
            for r in p.references:
                best |= ngrams(r, k)
            matched += sum(min(c, best[g]) for g, c in hyp.items())
            total += max(len(p.hypothesis) - k + 1, 0)
        precision = matched / total if matched else 1.0 / (2 * max(total, 1))
        log_sum += math.log(precision) / n
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return bp * math.exp(log_sum)


# ------------------------------------------------------------------ ROUGE-L
def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_pair(hyp: Sequence[str], refs: Iterable[Sequence[str]], beta2: float = ROUGE_BETA2) -> float:
    best = 0.0
    for ref in refs:
        lcs = lcs_length(hyp, ref)
        if lcs == 0:
            continue
        p, r = lcs / len(hyp), lcs / len(ref)
        best = max(best, (1 + beta2) * p * r / (r + beta2 * p))
    return best


def rouge_l(pairs: Sequence[EvalPair], beta2: float = ROUGE_BETA2) -> float:
    if not pairs:
        return 0.0
    return sum(rouge_l_pair(p.hypothesis, p.references, beta2) for p in pairs) / len(pairs)


# -------------------------------------------------------------------- CIDEr
def _tfidf(counts: Counter, df: Counter, n_docs: int) -> dict:
    total = sum(counts.values())
    if total == 0:
        return {}
    return {g: (c / total) * math.log(n_docs / max(df[g], 1)) for g, c in counts.items()}


def _cosine(u: dict, v: dict) -> float:
    nu = math.sqrt(sum(x * x for x in u.values()))
    nv = math.sqrt(sum(x * x for x in v.values()))
    if nu == 0 or nv == 0:
        return 0.0
    return sum(x * v.get(g, 0.0) for g, x in u.items()) / (nu * nv)


def cider_pairs(pairs: Sequence[EvalPair]) -> list[float]:
    """Per-pair CIDEr: 10 x the mean over n = 1..4 of the TF-IDF cosine."""
    n_docs = len(pairs)
    scores = [0.0] * n_docs
    for n in range(1, CIDER_N + 1):
        df: Counter = Counter()
        for p in pairs:
            seen = set()
            for r in p.references:
                seen.update(ngrams(r, n))
            df.update(seen)
        for i, p in enumerate(pairs):
            hyp = _tfidf(ngrams(p.hypothesis, n), df, n_docs)
            mean_ref: dict = defaultdict(float)
            for r in p.references:
                for g, x in _tfidf(ngrams(r, n), df, n_docs).items():
                    mean_ref[g] += x / len(p.references)
            scores[i] += 10.0 * _cosine(hyp, mean_ref) / CIDER_N
    return scores


def cider(pairs: Sequence[EvalPair]) -> float:
    if not pairs:
        return 0.0
    return sum(cider_pairs(pairs)) / len(pairs)


# ----------------------------------------------------------------------- EM
def normalize_answer(tokens_or_text: Sequence[str] | str) -> str:
    """Lowercase, split punctuation, drop trailing punctuation, single spaces."""
    toks = tokenize(tokens_or_text) if isinstance(tokens_or_text, str) else [t.lower() for t in tokens_or_text]
    while toks and not any(ch.isalnum() for ch in toks[-1]):
        toks.pop()
    return " ".join(toks)


def exact_match(p: EvalPair) -> bool:
    hyp = normalize_answer(p.hypothesis)
    return any(hyp == normalize_answer(r) for r in p.references)


def em_at_1(pairs: Sequence[EvalPair]) -> float:
    if not pairs:
        return 0.0
    return sum(exact_match(p) for p in pairs) / len(pairs)


# ------------------------------------------------------------------- report
def corpus_scores(pairs: Sequence[EvalPair]) -> dict[str, float | None]:
    """Percent-scale scores; CIDEr is the raw value x 100 and METEOR is not computed."""
    out: dict[str, float | None] = {f"BLEU-{k}": 100.0 * bleu(pairs, k) for k in range(1, 5)}
    out["METEOR"] = None
    out["ROUGE-L"] = 100.0 * rouge_l(pairs)
    out["CIDEr"] = 100.0 * cider(pairs)
    out["EM@1"] = 100.0 * em_at_1(pairs)
    return out


@dataclass
class MetricReport:
    scores: dict[str, float | None]
    per_task: dict[str, dict[str, float | None]] = field(default_factory=dict)
    per_sample: list[dict] = field(default_factory=list)
    count: int = 0

    @classmethod
    def from_pairs(cls, pairs: Sequence[EvalPair]) -> MetricReport:
        if not pairs:
            warnings.warn("evaluation corpus is empty", MetricWarning, stacklevel=2)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", MetricWarning)
            scores = corpus_scores(pairs)
            by_task: dict[str, list[EvalPair]] = defaultdict(list)
            for p in pairs:
                by_task[p.task].append(p)
            per_task = {t: corpus_scores(ps) for t, ps in sorted(by_task.items())}
            ciders = cider_pairs(pairs) if pairs else []
        samples = [{"id": p.id, "task": p.task, "em": exact_match(p),
                    "rouge_l": 100.0 * rouge_l_pair(p.hypothesis, p.references), "cider": 100.0 * c}
                   for p, c in zip(pairs, ciders)]
        return cls(scores, per_task, samples, len(pairs))

    def record(self) -> dict:
        return asdict(self)

    def table(self) -> str:
        def fmt(v):
            return "n/a" if v is None else f"{v:.2f}"

        header = ["split"] + list(METRIC_NAMES) + ["n"]
        rows = [["all"] + [fmt(self.scores[k]) for k in METRIC_NAMES] + [str(self.count)]]
        for task, sc in self.per_task.items():
            n = sum(1 for s in self.per_sample if s["task"] == task)
            rows.append([task] + [fmt(sc[k]) for k in METRIC_NAMES] + [str(n)])
        widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
        lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in [header] + rows]
        return "\n".join(lines)


# ------------------------------------------------------------- predictions
def write_predictions(path: str | Path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_predictions(path: str | Path) -> list[EvalPair]:
    """Line-delimited ``{id, question, answer, references[], task?}`` records."""
    pairs = []
    for i, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines()):
        if not line.strip():
            continue
        rec = json.loads(line)
        for key in ("id", "answer", "references"):
            if key not in rec:
                raise ValueError(f"prediction record {i}: missing field {key!r}")
        pairs.append(EvalPair.from_text(str(rec["id"]), rec["answer"], rec["references"], rec.get("task", "qa")))
    return pairs
