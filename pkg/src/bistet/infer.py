"""Greedy decoding, bidirectional selection, lexicon matching, metrics and attention analysis."""

from __future__ import annotations

import csv
import math
import string
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import ContractError, no_grad
from .data import LabeledImage, worker_count, write_pgm
from .model import (
    Direction,
    ModelConfig,
    Parameters,
    _direction,
    decode,
    encode,
    extract_visual_features,
)

_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


# ---------------------------------------------------------------- decoding


@dataclass
class Decoded:
    """Raw greedy output in model order; ``tokens`` includes EOS when emitted."""

    tokens: List[int]
    step_probs: List[float]
    chars: List[int]


def greedy_decode(memory, direction, params: Parameters, config: ModelConfig, max_len: Optional[int] = None) -> List[Decoded]:
    """Argmax decoding from SOS until EOS or ``max_len`` characters, batched over ``memory``.

    SOS and PAD are never selected. The recorded probability of each step is the
    full-softmax probability of the chosen token, EOS step included.
    """
    max_len = config.max_decode_len if max_len is None else max_len
    direction = _direction(direction)
    vocab = config.vocab
    mem = memory
    if mem.ndim == 2:
        from .autodiff import reshape

        mem = reshape(mem, (1,) + mem.shape)
    b = mem.shape[0]
    seqs = np.full((b, 1), vocab.sos, dtype=np.int64)
    done = np.zeros(b, dtype=bool)
    results = [Decoded([], [], []) for _ in range(b)]
    banned = np.array([vocab.sos, vocab.pad])
    with no_grad():
        for _ in range(max_len + 1):
            logits, _ = decode(seqs, mem, direction, params, config)
            last = logits.data[:, -1, :]
            z = last - last.max(axis=-1, keepdims=True)
            p = np.exp(z)
            p /= p.sum(axis=-1, keepdims=True)
            masked = p.copy()
            masked[:, banned] = -1.0
            choice = masked.argmax(axis=-1)
            for i in range(b):
                if done[i]:
                    continue
                tok = int(choice[i])
                results[i].tokens.append(tok)
                results[i].step_probs.append(float(p[i, tok]))
                if tok == vocab.eos:
                    done[i] = True
                else:
                    results[i].chars.append(tok)
                    if len(results[i].chars) >= max_len:
                        done[i] = True
            if done.all():
                break
            nxt = np.where(done, vocab.pad, choice)
            seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
    return results


def sequence_probability(step_probs: Sequence[float]) -> float:
    """Product of step probabilities, accumulated in log space."""
    if len(step_probs) == 0:
        raise ContractError("sequence_probability of an empty step list")
    probs = np.asarray(step_probs, dtype=np.float64)
    if (probs <= 0).any() or (probs > 1).any():
        raise ContractError("step probabilities must lie in (0, 1]")
    return float(np.exp(np.log(probs).sum()))


@dataclass
class Candidate:
    text: str  # reading order
    direction: Direction
    step_probs: List[float]
    probability: float


@dataclass
class PredictionResult:
    text: str
    direction: Direction
    step_probs: List[float]
    probability: float
    candidates: Dict[Direction, Candidate] = field(default_factory=dict)


def _candidate(dec: Decoded, direction: Direction, config: ModelConfig) -> Candidate:
    chars = dec.chars if direction is Direction.LTR else dec.chars[::-1]
    text = config.vocab.decode(chars)
    return Candidate(text, direction, dec.step_probs, sequence_probability(dec.step_probs))


def select(candidates: Dict[Direction, Candidate]) -> PredictionResult:
    """Highest product probability wins; ties go to left-to-right."""
    order = [d for d in (Direction.LTR, Direction.RTL) if d in candidates]
    best = candidates[order[0]]
    for d in order[1:]:
        if candidates[d].probability > best.probability:
            best = candidates[d]
    assert best.probability == max(c.probability for c in candidates.values())
    return PredictionResult(best.text, best.direction, best.step_probs, best.probability, dict(candidates))


def _as_batch(images) -> np.ndarray:
    if isinstance(images, LabeledImage):
        return images.pixels[None]
    if isinstance(images, (list, tuple)) and images and isinstance(images[0], LabeledImage):
        return np.stack([im.pixels for im in images])
    arr = np.asarray(images, dtype=np.float64)
    return arr[None] if arr.ndim == 2 else arr


def predict(images, params: Parameters, config: ModelConfig, direction: str = "bi") -> List[PredictionResult]:
    """Decode a batch of normalized images with ``ltr``, ``rtl`` or ``bi`` (both, best product)."""
    pixels = _as_batch(images)
    if direction == "bi":
        directions = list(config.directions)
    else:
        directions = [_direction(direction)]
    with no_grad():
        memory = encode(extract_visual_features(pixels, params, config), params, config)
        decoded = {d: greedy_decode(memory, d, params, config) for d in directions}
    out = []
    for i in range(pixels.shape[0]):
        cands = {d: _candidate(decoded[d][i], d, config) for d in directions}
        out.append(select(cands))
    return out


def bidirectional_predict(image, params: Parameters, config: ModelConfig) -> PredictionResult:
    return predict(image, params, config, "bi")[0]


def predict_many(items, params: Parameters, config: ModelConfig, direction: str = "bi", chunk: int = 64) -> List[PredictionResult]:
    """Chunked :func:`predict`; chunks fan out over ``BISTET_THREADS`` workers."""
    pixels = _as_batch(items)
    chunks = [pixels[i:i + chunk] for i in range(0, len(pixels), chunk)]
    workers = min(worker_count(), max(len(chunks), 1))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(lambda c: predict(c, params, config, direction), chunks))
    else:
        parts = [predict(c, params, config, direction) for c in chunks]
    return [r for part in parts for r in part]


# ---------------------------------------------------------------- lexicon and metrics


def edit_distance(a: str, b: str) -> int:
    """Levenshtein distance with unit costs."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def lexicon_predict(text: str, lexicon: Sequence[str]) -> str:
    """Lexicon word closest in edit distance; the earliest entry wins ties."""
    if not lexicon:
        raise ContractError("lexicon is empty")
    best, best_d = lexicon[0], edit_distance(text, lexicon[0])
    for word in lexicon[1:]:
        if best_d == 0:
            break
        d = edit_distance(text, word)
        if d < best_d:
            best, best_d = word, d
    return best


def normalize_transcript(text: str, vocab=None) -> str:
    """Lower-case and drop the 32 ASCII punctuation marks."""
    return text.lower().translate(_PUNCT_TABLE)


@dataclass
class EvalReport:
    accuracy: float
    count: int
    correct: int
    per_length: Dict[int, Tuple[int, int]]  # length -> (count, correct)

    def length_accuracy(self, length: int) -> float:
        n, c = self.per_length[length]
        return c / n

    def to_tsv(self) -> str:
        lines = ["length\tcount\taccuracy"]
        for length in sorted(self.per_length):
            n, c = self.per_length[length]
            lines.append(f"{length}\t{n}\t{c / n:.6f}")
        lines.append(f"all\t{self.count}\t{self.accuracy:.6f}")
        return "\n".join(lines) + "\n"


def evaluate_accuracy(predictions: Sequence[str], ground_truths: Sequence[str], lexicon: Optional[Sequence[str]] = None) -> EvalReport:
    """Exact-match word accuracy after normalization, with a per-length breakdown."""
    if len(predictions) != len(ground_truths):
        raise ContractError(f"{len(predictions)} predictions for {len(ground_truths)} ground truths")
    lex = [normalize_transcript(w) for w in lexicon] if lexicon else None
    per_length: Dict[int, List[int]] = {}
    correct = 0
    for pred, gt in zip(predictions, ground_truths):
        p, g = normalize_transcript(pred), normalize_transcript(gt)
        if lex is not None:
            p = lexicon_predict(p, lex)
        ok = int(p == g)
        correct += ok
        slot = per_length.setdefault(len(g), [0, 0])
        slot[0] += 1
        slot[1] += ok
    n = len(ground_truths)
    return EvalReport(correct / n if n else 0.0, n, correct, {k: (v[0], v[1]) for k, v in per_length.items()})


def evaluate_model(items: Sequence[LabeledImage], params: Parameters, config: ModelConfig, direction: str = "bi",
                   lexicon: Optional[Sequence[str]] = None) -> EvalReport:
    if not items:
        return EvalReport(0.0, 0, 0, {})
    results = predict_many(list(items), params, config, direction)
    return evaluate_accuracy([r.text for r in results], [it.transcript for it in items], lexicon)


# ---------------------------------------------------------------- attention


@dataclass
class AttentionMap:
    layer: int
    head: int
    kind: str  # "decoder-self" | "decoder-cross"
    matrix: np.ndarray  # [decode steps, keys]


@dataclass
class AttentionResult:
    direction: Direction
    maps: List[AttentionMap]
    decoded: Decoded
    text: str  # reading order

    @property
    def n_chars(self) -> int:
        return len(self.decoded.chars)

    def cross(self, layer: int) -> List[AttentionMap]:
        return [m for m in self.maps if m.kind == "decoder-cross" and m.layer == layer]


def extract_attention(image, direction, params: Parameters, config: ModelConfig) -> AttentionResult:
    """Greedy-decode one image, then replay the decoded prefix to capture every attention map.

    Row ``t`` of each map is the query that predicted the ``t``-th emitted token.
    """
    direction = _direction(direction)
    pixels = _as_batch(image)[:1]
    with no_grad():
        memory = encode(extract_visual_features(pixels, params, config), params, config)
        dec = greedy_decode(memory, direction, params, config)[0]
        inputs = np.array([[config.vocab.sos] + dec.tokens[:-1]], dtype=np.int64)
        _, attn = decode(inputs, memory, direction, params, config)
    maps = []
    for a in attn:
        for h in range(a.weights.shape[1]):
            maps.append(AttentionMap(a.layer, h, a.kind, np.array(a.weights[0, h])))
    return AttentionResult(direction, maps, dec, _candidate(dec, direction, config).text)


@dataclass
class DirectionScore:
    r: float
    degenerate: bool = False


def attention_direction_score(maps) -> DirectionScore:
    """Pearson correlation between step index and attention centre of mass.

    ``maps`` is a ``[steps, keys]`` matrix or a list of maps to head-average.
    """
    if isinstance(maps, np.ndarray):
        alpha = maps
    else:
        alpha = np.mean([m.matrix if isinstance(m, AttentionMap) else np.asarray(m) for m in maps], axis=0)
    alpha = np.asarray(alpha, dtype=np.float64)
    steps = alpha.shape[0]
    if steps < 3:
        raise ContractError(f"direction score needs at least 3 decode steps, got {steps}")
    centre = alpha @ np.arange(alpha.shape[1], dtype=np.float64)
    t = np.arange(steps, dtype=np.float64)
    tc, cc = t - t.mean(), centre - centre.mean()
    denom = math.sqrt(float((tc * tc).sum()) * float((cc * cc).sum()))
    if denom < 1e-12:
        return DirectionScore(0.0, True)
    return DirectionScore(float((tc * cc).sum() / denom))


def character_direction_score(result: AttentionResult) -> DirectionScore:
    """Score over the last decoder layer's head-averaged cross-attention, character steps only."""
    last = max(m.layer for m in result.maps)
    alpha = np.mean([m.matrix for m in result.cross(last)], axis=0)[: result.n_chars]
    return attention_direction_score(alpha)


def dump_attention(result: AttentionResult, out_dir, prefix: str = "attn", upscale: int = 8) -> List[Path]:
    """Write one PGM heatmap and one CSV per map; returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for m in result.maps:
        kind = "cross" if m.kind == "decoder-cross" else "self"
        stem = f"{prefix}_{result.direction.value}_{kind}_l{m.layer}_h{m.head}"
        img = np.kron(m.matrix, np.ones((upscale, upscale)))
        write_pgm(out / f"{stem}.pgm", img)
        with open(out / f"{stem}.csv", "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            for row in m.matrix:
                w.writerow([f"{v:.8f}" for v in row])
        written += [out / f"{stem}.pgm", out / f"{stem}.csv"]
    return written
