"""Charset codec, synthetic word rendering, and dataset/lexicon file I/O."""

from __future__ import annotations

import json
import os
import string
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .font import GLYPH_HEIGHT, GLYPH_WIDTH, glyph

ALPHANUMERIC = string.ascii_lowercase + string.digits
PUNCTUATION = string.punctuation  # the 32 printable ASCII marks

LABELS_FILE = "labels.tsv"
MANIFEST_FILE = "manifest.json"


class CodecError(ValueError):
    pass


class RenderError(ValueError):
    pass


class DatasetError(IOError):
    pass


class LexiconError(ValueError):
    pass


# ---------------------------------------------------------------- vocabulary


class Vocabulary:
    """Dense character ids followed by SOS, EOS and PAD."""

    def __init__(self, include_punctuation: bool = False, chars: Optional[str] = None):
        if chars is None:
            chars = ALPHANUMERIC + (PUNCTUATION if include_punctuation else "")
        elif len(set(chars)) != len(chars) or not chars:
            raise CodecError(f"charset must be non-empty without repeats: {chars!r}")
        self.chars = chars
        self.include_punctuation = include_punctuation
        self._index = {c: i for i, c in enumerate(self.chars)}
        self.sos = len(self.chars)
        self.eos = self.sos + 1
        self.pad = self.sos + 2

    def __len__(self) -> int:
        return len(self.chars) + 3

    def __contains__(self, ch) -> bool:
        return ch in self._index

    def char_id(self, ch: str) -> int:
        try:
            return self._index[ch]
        except KeyError:
            raise CodecError(f"character {ch!r} is not in the charset") from None

    def encode(self, text: str) -> list:
        bad = sorted({c for c in text if c not in self._index})
        if bad:
            raise CodecError(f"characters not in charset: {''.join(bad)!r}")
        return [self._index[c] for c in text]

    def decode(self, ids) -> str:
        """Characters for ``ids``; stops at EOS, skips SOS/PAD."""
        out = []
        for i in ids:
            i = int(i)
            if i == self.eos:
                break
            if i in (self.sos, self.pad):
                continue
            if not 0 <= i < len(self.chars):
                raise CodecError(f"unknown token id {i}")
            out.append(self.chars[i])
        return "".join(out)

    def is_special(self, i: int) -> bool:
        return i >= self.sos


@dataclass(frozen=True)
class TokenSequence:
    """``[SOS, y_1 .. y_L, EOS]``; ``length`` is L."""

    ids: tuple
    sos: int
    eos: int

    def __post_init__(self):
        ids = self.ids
        if len(ids) < 2 or ids[0] != self.sos or ids[-1] != self.eos:
            raise CodecError(f"token sequence must start with SOS and end with EOS: {ids}")
        if any(i in (self.sos, self.eos) for i in ids[1:-1]):
            raise CodecError(f"special symbol inside token sequence: {ids}")

    @property
    def length(self) -> int:
        return len(self.ids) - 2

    @property
    def chars(self) -> tuple:
        return self.ids[1:-1]


def encode_label(text: str, vocab: Vocabulary, max_len: int) -> TokenSequence:
    if not text:
        raise CodecError("empty transcript")
    if len(text) > max_len:
        raise CodecError(f"transcript {text!r} longer than max_len={max_len}")
    return TokenSequence((vocab.sos, *vocab.encode(text), vocab.eos), vocab.sos, vocab.eos)


def make_reversed_target(tokens: TokenSequence) -> TokenSequence:
    return TokenSequence((tokens.sos, *reversed(tokens.chars), tokens.eos), tokens.sos, tokens.eos)


def pad_batch(rows: Sequence[Sequence[int]], pad: int) -> np.ndarray:
    width = max(len(r) for r in rows)
    out = np.full((len(rows), width), pad, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
    return out


# ---------------------------------------------------------------- rendering


@dataclass
class Augment:
    noise_sigma: float = 0.0
    h_jitter: int = 0  # max extra left offset in pixels
    spacing_jitter: int = 0  # max extra pixels per inter-character gap


@dataclass
class LabeledImage:
    pixels: np.ndarray
    transcript: str
    name: str = ""


def glyph_scale(height: int) -> int:
    s = height // GLYPH_HEIGHT
    if s < 1:
        raise RenderError(f"canvas height {height} is smaller than the glyph height {GLYPH_HEIGHT}")
    return s


def render_word_image(
    text: str,
    seed: int,
    augment: Optional[Augment] = None,
    height: int = 16,
    width: int = 96,
) -> LabeledImage:
    """Draw ``text`` with the bitmap font on a ``height x width`` canvas in [0, 1].

    Glyphs are scaled by ``height // 7`` and separated by one scaled font
    column. Ink is 1.0 before noise.
    """
    augment = augment or Augment()
    if not text:
        raise RenderError("cannot render an empty transcript")
    scale = glyph_scale(height)
    gw, gh, gap = GLYPH_WIDTH * scale, GLYPH_HEIGHT * scale, scale
    n = len(text)
    base = n * gw + (n - 1) * gap
    if base > width:
        raise RenderError(f"{text!r} needs {base}px but the canvas is {width}px wide")
    rng = np.random.default_rng(seed)
    extra = np.zeros(max(n - 1, 0), dtype=np.int64)
    if augment.spacing_jitter > 0 and n > 1:
        extra = rng.integers(0, augment.spacing_jitter + 1, size=n - 1)
        slack = width - base
        while extra.sum() > slack:
            extra[int(np.argmax(extra))] -= 1
    slack = width - base - int(extra.sum())
    x0 = 0
    if augment.h_jitter > 0:
        x0 = int(rng.integers(0, min(augment.h_jitter, slack) + 1))
    y0 = (height - gh) // 2
    canvas = np.zeros((height, width), dtype=np.float64)
    x = x0
    for k, ch in enumerate(text):
        g = np.kron(glyph(ch), np.ones((scale, scale), dtype=np.uint8))
        canvas[y0:y0 + gh, x:x + gw] = np.maximum(canvas[y0:y0 + gh, x:x + gw], g)
        x += gw + gap + (int(extra[k]) if k < n - 1 else 0)
    if augment.noise_sigma > 0:
        canvas = np.clip(canvas + rng.normal(0.0, augment.noise_sigma, canvas.shape), 0.0, 1.0)
    return LabeledImage(canvas, text)


def max_renderable_length(width: int, height: int) -> int:
    scale = glyph_scale(height)
    return (width + scale) // ((GLYPH_WIDTH + 1) * scale)


# ---------------------------------------------------------------- PGM


def write_pgm(path, pixels: np.ndarray) -> None:
    """Write a P5 (binary, maxval 255) greymap from floats in [0, 1]."""
    data = np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a P5 greymap into floats in [0, 1]."""
    path = Path(path)
    raw = path.read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    if tokens[0] != b"P5":
        raise DatasetError(f"{path}: not a P5 PGM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise DatasetError(f"{path}: malformed PGM header") from None
    if maxval != 255 or w <= 0 or h <= 0:
        raise DatasetError(f"{path}: unsupported PGM geometry {w}x{h} maxval {maxval}")
    body = raw[pos:]
    if len(body) < w * h:
        raise DatasetError(f"{path}: truncated PGM data ({len(body)} of {w * h} bytes)")
    return np.frombuffer(body[: w * h], dtype=np.uint8).reshape(h, w).astype(np.float64) / 255.0


# ---------------------------------------------------------------- datasets


@lru_cache(maxsize=1)
def bundled_words() -> tuple:
    text = resources.files("bistet.resources").joinpath("words.txt").read_text(encoding="utf-8")
    return tuple(w for w in text.split() if w)


@dataclass
class DatasetSpec:
    count: int = 1000
    min_len: int = 1
    max_len: int = 8
    seed: int = 0
    word_fraction: float = 0.25
    include_punctuation: bool = False
    height: int = 16
    width: int = 96
    augment: Augment = field(default_factory=lambda: Augment(0.1, 8, 1))

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        d = dict(d)
        aug = d.pop("augment", None)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown dataset keys: {sorted(unknown)}")
        spec = cls(**d)
        if aug is not None:
            spec.augment = Augment(**aug) if isinstance(aug, dict) else aug
        return spec

    def to_dict(self) -> dict:
        return asdict(self)


def item_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1, dtype=np.uint32)[0])


def sample_transcript(spec: DatasetSpec, rng: np.random.Generator) -> str:
    chars = ALPHANUMERIC + (PUNCTUATION if spec.include_punctuation else "")
    if spec.word_fraction > 0 and rng.random() < spec.word_fraction:
        words = [w for w in bundled_words() if spec.min_len <= len(w) <= spec.max_len]
        if words:
            return words[int(rng.integers(len(words)))]
    n = int(rng.integers(spec.min_len, spec.max_len + 1))
    return "".join(chars[int(i)] for i in rng.integers(0, len(chars), size=n))


def _make_item(spec: DatasetSpec, index: int) -> LabeledImage:
    rng = np.random.default_rng(item_seed(spec.seed, index))
    text = sample_transcript(spec, rng)
    img = render_word_image(text, int(rng.integers(2**31)), spec.augment, spec.height, spec.width)
    img.name = f"{index:06d}.pgm"
    return img


def generate_dataset(spec: DatasetSpec, out_dir, workers: Optional[int] = None) -> dict:
    """Render ``spec.count`` images plus ``labels.tsv`` and ``manifest.json``."""
    if spec.min_len < 1 or spec.max_len < spec.min_len:
        raise ValueError(f"bad length range [{spec.min_len}, {spec.max_len}]")
    limit = max_renderable_length(spec.width, spec.height)
    if spec.max_len > limit:
        raise RenderError(f"max_len={spec.max_len} does not fit a {spec.width}px canvas (limit {limit})")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"{out}: {exc}") from exc
    workers = workers or worker_count()
    indices = range(spec.count)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            items = list(pool.map(lambda i: _make_item(spec, i), indices))
    else:
        items = [_make_item(spec, i) for i in indices]

    total = 0.0
    total_sq = 0.0
    n_pix = 0
    rows = []
    for item in items:
        path = out / item.name
        try:
            write_pgm(path, item.pixels)
        except OSError as exc:
            raise DatasetError(f"{path}: {exc}") from exc
        q = np.round(np.clip(item.pixels, 0, 1) * 255.0) / 255.0
        total += float(q.sum())
        total_sq += float((q * q).sum())
        n_pix += q.size
        rows.append(f"{item.name}\t{item.transcript}\n")
    mean = total / n_pix
    std = float(np.sqrt(max(total_sq / n_pix - mean * mean, 1e-12)))
    with open(out / LABELS_FILE, "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(rows)
    manifest = {"spec": spec.to_dict(), "seed": spec.seed, "count": spec.count, "mean": mean, "std": std}
    with open(out / MANIFEST_FILE, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def read_manifest(data_dir) -> dict:
    path = Path(data_dir) / MANIFEST_FILE
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DatasetError(f"{path}: manifest not found") from None
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: malformed manifest ({exc})") from None


def load_dataset(data_dir, normalize: bool = True, vocab: Optional[Vocabulary] = None) -> list:
    """Load ``labels.tsv`` rows in order; pixels standardized by the manifest mean/std."""
    data_dir = Path(data_dir)
    manifest = read_manifest(data_dir)
    if vocab is None:
        vocab = Vocabulary(bool(manifest.get("spec", {}).get("include_punctuation", False)))
    mean, std = float(manifest["mean"]), float(manifest["std"])
    labels = data_dir / LABELS_FILE
    try:
        lines = labels.read_text(encoding="utf-8").split("\n")
    except FileNotFoundError:
        raise DatasetError(f"{labels}: not found") from None
    items = []
    for row, line in enumerate(lines, start=1):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[1]:
            raise DatasetError(f"{labels} row {row}: expected 'filename<TAB>transcript'")
        name, text = parts
        bad = [c for c in text if c not in vocab]
        if bad:
            raise DatasetError(f"{labels} row {row}: character {bad[0]!r} not in charset")
        try:
            pixels = read_pgm(data_dir / name)
        except FileNotFoundError:
            raise DatasetError(f"{labels} row {row}: missing image {data_dir / name}") from None
        except DatasetError as exc:
            raise DatasetError(f"{labels} row {row}: {exc}") from None
        if normalize:
            pixels = (pixels - mean) / std
        items.append(LabeledImage(pixels, text, name))
    return items


def load_lexicon(path) -> list:
    """One word per line, lower-cased, blank lines dropped, order and duplicates kept."""
    path = Path(path)
    words = [ln.strip().lower() for ln in path.read_text(encoding="utf-8").splitlines()]
    words = [w for w in words if w]
    if not words:
        raise LexiconError(f"{path}: lexicon is empty")
    return words


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("BISTET_THREADS", "1")))
    except ValueError:
        return 1
