"""Loss, ADADELTA, learning-rate schedule, two-direction training and checkpoints."""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np

from .autodiff import ContractError, Tensor, log_softmax, mul, sum_
from .data import LabeledImage, Vocabulary, encode_label, make_reversed_target, pad_batch
from .model import (
    Direction,
    ModelConfig,
    Parameters,
    forward,
    init_parameters,
    parameter_shapes,
)
from .nn import ConfigError

log = logging.getLogger(__name__)


class OptimizerError(ArithmeticError):
    pass


class TrainingError(RuntimeError):
    pass


class CheckpointError(IOError):
    pass


@dataclass
class TrainConfig:
    total_iterations: int = 3000
    batch_size: int = 32
    milestones: Tuple[float, ...] = (0.3, 0.6, 0.8)
    lr: float = 1.0
    rho: float = 0.9
    eps: float = 1e-6
    label_smoothing: float = 0.1
    seed: int = 0
    eval_every: int = 500
    eval_size: int = 256
    checkpoint_every: int = 1000
    # multi-source batch composition; only one synthetic source exists at desk scale
    source_weights: Dict[str, float] = field(default_factory=lambda: {"synthetic": 1.0})

    def __post_init__(self):
        self.milestones = tuple(float(m) for m in self.milestones)
        prev = 0.0
        for m in self.milestones:
            if not prev < m < 1.0:
                raise ConfigError(f"milestones must be strictly increasing in (0, 1): {self.milestones}")
            prev = m
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0.0 <= self.label_smoothing < 0.5:
            raise ConfigError("label_smoothing must be in [0, 0.5)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------- loss


def smoothed_targets(targets: np.ndarray, vocab_size: int, eps_ls: float) -> np.ndarray:
    q = np.full(targets.shape + (vocab_size,), eps_ls / (vocab_size - 1))
    np.put_along_axis(q, targets[..., None], 1.0 - eps_ls, axis=-1)
    return q


def smoothed_kl_loss(logits, targets, eps_ls: float, pad_mask: Optional[np.ndarray] = None) -> Tensor:
    """Mean over unpadded positions of KL(q || softmax(logits)).

    ``q`` puts ``1 - eps_ls`` on the target and spreads ``eps_ls`` evenly
    over the other ``V - 1`` classes. ``pad_mask`` is True at real positions.
    """
    targets = np.asarray(targets, dtype=np.int64)
    V = logits.shape[-1]
    if logits.shape[:-1] != targets.shape:
        raise ContractError(f"logits {logits.shape} do not match targets {targets.shape}")
    if not 0.0 <= eps_ls < 0.5:
        raise ContractError(f"label smoothing {eps_ls} outside [0, 0.5)")
    valid = np.ones(targets.shape, dtype=bool) if pad_mask is None else np.asarray(pad_mask, dtype=bool)
    n = int(valid.sum())
    if n == 0:
        raise ContractError("every position is padding")
    q = smoothed_targets(targets, V, eps_ls) * valid[..., None]
    with np.errstate(divide="ignore", invalid="ignore"):
        neg_entropy = float(np.where(q > 0, q * np.log(q), 0.0).sum())
    cross = sum_(mul(log_softmax(logits, axis=-1), q))
    return mul(cross, -1.0 / n) + neg_entropy / n


# ---------------------------------------------------------------- optimizer


@dataclass
class AdadeltaState:
    rho: float = 0.9
    eps: float = 1e-6
    lr: float = 1.0
    steps: int = 0
    sq_grad: Dict[str, np.ndarray] = field(default_factory=dict)  # E[g^2]
    sq_delta: Dict[str, np.ndarray] = field(default_factory=dict)  # E[dx^2]

    @classmethod
    def for_params(cls, params: Parameters, rho=0.9, eps=1e-6, lr=1.0) -> "AdadeltaState":
        st = cls(rho, eps, lr)
        for name, p in params.items():
            st.sq_grad[name] = np.zeros_like(p.data)
            st.sq_delta[name] = np.zeros_like(p.data)
        return st


def adadelta_step(params: Parameters, grads: Dict[str, np.ndarray], state: AdadeltaState, lr_factor: float = 1.0) -> None:
    """In-place ADADELTA update; the step is additionally scaled by ``state.lr * lr_factor``.

    A parameter with no gradient is treated as having a zero gradient.
    """
    rho, eps, lr = state.rho, state.eps, state.lr * lr_factor
    for name, g in grads.items():
        if g is not None and not np.isfinite(g).all():
            raise OptimizerError(f"non-finite gradient for parameter {name}")
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        eg = state.sq_grad[name]
        ed = state.sq_delta[name]
        eg *= rho
        eg += (1.0 - rho) * g * g
        delta = -np.sqrt(ed + eps) / np.sqrt(eg + eps) * g
        ed *= rho
        ed += (1.0 - rho) * delta * delta
        p.data += lr * delta
    state.steps += 1


def lr_factor(iteration: int, config: TrainConfig) -> float:
    """0.1 ** (number of milestones reached); milestone k is at ``fraction_k * total``."""
    passed = sum(1 for m in config.milestones if iteration >= m * config.total_iterations)
    return 0.1 ** passed


# ---------------------------------------------------------------- batches and steps


@dataclass
class Batch:
    pixels: np.ndarray  # [B, H, W] normalized
    inputs: Dict[Direction, np.ndarray]  # [B, L] SOS + chars (+ PAD)
    targets: Dict[Direction, np.ndarray]  # [B, L] chars + EOS (+ PAD)
    mask: np.ndarray  # [B, L] True at real positions


def make_batch(items: Sequence[LabeledImage], vocab: Vocabulary, max_len: int) -> Batch:
    seqs = [encode_label(it.transcript, vocab, max_len) for it in items]
    inputs, targets = {}, {}
    for direction in Direction:
        ss = seqs if direction is Direction.LTR else [make_reversed_target(s) for s in seqs]
        inputs[direction] = pad_batch([s.ids[:-1] for s in ss], vocab.pad)
        targets[direction] = pad_batch([s.ids[1:] for s in ss], vocab.pad)
    mask = targets[Direction.LTR] != vocab.pad
    pixels = np.stack([it.pixels for it in items])
    return Batch(pixels, inputs, targets, mask)


def direction_loss(batch: Batch, direction: Direction, params: Parameters, config: ModelConfig, eps_ls: float) -> Tensor:
    logits, _ = forward(batch.pixels, batch.inputs[direction], direction, params, config)
    return smoothed_kl_loss(logits, batch.targets[direction], eps_ls, batch.mask)


def zero_grads(params: Parameters) -> None:
    for p in params.values():
        p.grad = None


def bidirectional_train_step(
    batch: Batch,
    params: Parameters,
    config: ModelConfig,
    state: AdadeltaState,
    eps_ls: float = 0.1,
    factor: float = 1.0,
) -> Tuple[float, float]:
    """Backward the LTR loss, then the RTL loss into the same grads, then one ADADELTA step."""
    zero_grads(params)
    losses = []
    for direction in config.directions:
        loss = direction_loss(batch, direction, params, config, eps_ls)
        loss.backward()
        losses.append(loss.item())
    grads = {name: p.grad for name, p in params.items()}
    adadelta_step(params, grads, state, factor)
    if len(losses) == 1:
        losses.append(float("nan"))
    return losses[0], losses[1]


# ---------------------------------------------------------------- checkpoints

MAGIC = b"BST1"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    config: ModelConfig
    params: Dict[str, np.ndarray]  # float32
    iteration: int = 0
    optimizer: Optional[Dict[str, np.ndarray]] = None  # "sq_grad/<name>", "sq_delta/<name>"
    optimizer_meta: Optional[dict] = None

    @classmethod
    def from_training(cls, config, params: Parameters, iteration: int, state: Optional[AdadeltaState] = None):
        tensors = {k: v.data.astype(np.float32) for k, v in params.items()}
        opt = meta = None
        if state is not None:
            opt = {}
            for k in params:
                opt[f"sq_grad/{k}"] = state.sq_grad[k].astype(np.float32)
                opt[f"sq_delta/{k}"] = state.sq_delta[k].astype(np.float32)
            meta = {"rho": state.rho, "eps": state.eps, "lr": state.lr, "steps": state.steps}
        return cls(config, tensors, iteration, opt, meta)

    def to_parameters(self) -> Parameters:
        return {k: Tensor(v.astype(np.float64), requires_grad=True, name=k) for k, v in self.params.items()}


def _pack_tensors(tensors: Dict[str, np.ndarray]) -> bytes:
    out = [struct.pack("<Q", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    header = {"model": ckpt.config.to_dict(), "iteration": int(ckpt.iteration)}
    if ckpt.optimizer_meta is not None:
        header["optimizer"] = ckpt.optimizer_meta
    meta = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<Q", len(meta)), meta]
    parts.append(_pack_tensors(ckpt.params))
    parts.append(_pack_tensors(ckpt.optimizer or {}))
    return b"".join(parts)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(checkpoint_bytes(ckpt))
        tmp.replace(path)
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"{self.path}: truncated while reading {what} at offset {self.pos}")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def tensors(self, section: str) -> Dict[str, np.ndarray]:
        (count,) = self.unpack("<Q", f"{section} count")
        out = {}
        for _ in range(count):
            at = self.pos
            (nlen,) = self.unpack("<H", f"{section} name length")
            try:
                name = self.take(nlen, f"{section} name").decode("utf-8")
            except UnicodeDecodeError:
                raise CheckpointError(f"{self.path}: bad tensor name at offset {at}") from None
            (rank,) = self.unpack("<I", f"rank of {name}")
            dims = self.unpack(f"<{rank}Q", f"dims of {name}") if rank else ()
            n = int(np.prod(dims)) if rank else 1
            data = np.frombuffer(self.take(4 * n, f"data of {name}"), dtype="<f4").reshape(dims)
            if name in out:
                raise CheckpointError(f"{self.path}: duplicate tensor {name!r} at offset {at}")
            out[name] = data.astype(np.float32)
        return out


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    r = _Reader(buf, path)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r} at offset 0")
    (version,) = r.unpack("<I", "version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version} at offset 4")
    (mlen,) = r.unpack("<Q", "config length")
    at = r.pos
    try:
        header = json.loads(r.take(mlen, "config JSON").decode("utf-8"))
        config = ModelConfig.from_dict(header["model"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: bad config JSON at offset {at}: {exc}") from None
    params = r.tensors("parameter")
    optimizer = r.tensors("optimizer")
    if r.pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - r.pos} trailing bytes at offset {r.pos}")
    expected = {name: shape for name, shape, _ in parameter_shapes(config)}
    for name, shape in expected.items():
        if name not in params:
            raise CheckpointError(f"{path}: missing parameter {name!r} (have {len(params)} of {len(expected)})")
        if params[name].shape != shape:
            raise CheckpointError(f"{path}: parameter {name!r} has shape {params[name].shape}, expected {shape}")
    extra = sorted(set(params) - set(expected))
    if extra:
        raise CheckpointError(f"{path}: unexpected parameter {extra[0]!r}")
    # keep canonical order
    params = {name: params[name] for name in expected}
    return Checkpoint(config, params, int(header.get("iteration", 0)), optimizer or None, header.get("optimizer"))


def state_from_checkpoint(ckpt: Checkpoint) -> Optional[AdadeltaState]:
    if not ckpt.optimizer:
        return None
    meta = ckpt.optimizer_meta or {}
    st = AdadeltaState(meta.get("rho", 0.9), meta.get("eps", 1e-6), meta.get("lr", 1.0), meta.get("steps", 0))
    for k in ckpt.params:
        st.sq_grad[k] = ckpt.optimizer[f"sq_grad/{k}"].astype(np.float64)
        st.sq_delta[k] = ckpt.optimizer[f"sq_delta/{k}"].astype(np.float64)
    return st


# ---------------------------------------------------------------- loop

LOG_HEADER = "iteration\tlr_factor\tloss\tloss_ltr\tloss_rtl\teval_accuracy\n"


def _seed_streams(train_cfg: TrainConfig):
    init_seq, shuffle_seq = np.random.SeedSequence(train_cfg.seed).spawn(2)
    return int(init_seq.generate_state(1)[0]), shuffle_seq


def initial_parameters(train_cfg: TrainConfig, model_cfg: ModelConfig) -> Parameters:
    """Parameters that ``run_training`` starts from for this seed."""
    return init_parameters(model_cfg, _seed_streams(train_cfg)[0])


def _fmt(x: float) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.6f}"


def run_training(
    train_cfg: TrainConfig,
    model_cfg: ModelConfig,
    dataset: Sequence[LabeledImage],
    out_dir,
    eval_set: Optional[Sequence[LabeledImage]] = None,
    progress: Optional[Callable[[int, float, float], None]] = None,
) -> Checkpoint:
    """Seeded training loop; writes ``train_log.tsv`` and ``ckpt_*.bst``/``final.bst``."""
    from .infer import evaluate_model  # avoids an import cycle

    if not dataset:
        raise TrainingError("training dataset is empty")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    init_seed, shuffle_seq = _seed_streams(train_cfg)
    params = init_parameters(model_cfg, init_seed)
    state = AdadeltaState.for_params(params, train_cfg.rho, train_cfg.eps, train_cfg.lr)
    rng = np.random.default_rng(shuffle_seq)
    vocab = model_cfg.vocab
    eval_items = list(eval_set if eval_set is not None else dataset)[: train_cfg.eval_size]
    n = len(dataset)
    bs = min(train_cfg.batch_size, n)
    order = rng.permutation(n)
    cursor = 0

    with open(out / "train_log.tsv", "w", encoding="utf-8", newline="\n") as logf:
        logf.write(LOG_HEADER)
        for it in range(train_cfg.total_iterations):
            if cursor + bs > n:
                order = rng.permutation(n)
                cursor = 0
            idx = order[cursor:cursor + bs]
            cursor += bs
            batch = make_batch([dataset[i] for i in idx], vocab, model_cfg.max_decode_len)
            factor = lr_factor(it, train_cfg)
            l_ltr, l_rtl = bidirectional_train_step(batch, params, model_cfg, state, train_cfg.label_smoothing, factor)
            if not math.isfinite(l_ltr) or (model_cfg.bidirectional and not math.isfinite(l_rtl)):
                raise TrainingError(f"non-finite loss at iteration {it}: ltr={l_ltr} rtl={l_rtl}")
            if progress is not None:
                progress(it, l_ltr, l_rtl)
            done = it + 1
            acc = None
            if train_cfg.eval_every and (done % train_cfg.eval_every == 0 or done == train_cfg.total_iterations):
                direction = "bi" if model_cfg.bidirectional else "ltr"
                acc = evaluate_model(eval_items, params, model_cfg, direction).accuracy
                log.info("iter %d lr %.4g loss ltr %.4f rtl %.4f acc %.4f", done, factor, l_ltr, l_rtl, acc)
            mean = l_ltr if not model_cfg.bidirectional else (l_ltr + l_rtl) / 2
            logf.write(f"{done}\t{factor:g}\t{_fmt(mean)}\t{_fmt(l_ltr)}\t{_fmt(l_rtl)}\t{_fmt(acc)}\n")
            if train_cfg.checkpoint_every and done % train_cfg.checkpoint_every == 0:
                save_checkpoint(out / f"ckpt_{done:06d}.bst", Checkpoint.from_training(model_cfg, params, done, state))
    final = Checkpoint.from_training(model_cfg, params, train_cfg.total_iterations, state)
    save_checkpoint(out / "final.bst", final)
    return final
