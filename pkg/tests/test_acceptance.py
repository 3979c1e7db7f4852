"""Acceptance suite: one test per criterion, each recording a pass/fail summary line.

The desk-scale model (criteria 4-7) is trained once per session and cached under
``.pytest_cache`` keyed by the experiment config and a hash of the package sources.
Set ``BISTET_FRESH=1`` to ignore the cache.
"""

import hashlib
import json
import os
import random
import shutil
import time
import zlib
from functools import lru_cache
from pathlib import Path

import numpy as np
import pytest

import bistet
from bistet import autodiff as ad
from bistet.autodiff import Tensor, gradient_check
from bistet.data import DatasetSpec, LabeledImage, generate_dataset, load_dataset, read_manifest
from bistet.infer import (
    character_direction_score,
    edit_distance,
    evaluate_accuracy,
    extract_attention,
    lexicon_predict,
    normalize_transcript,
    predict_many,
)
from bistet.model import (
    Direction,
    ModelConfig,
    count_parameters,
    decode,
    encode,
    extract_visual_features,
    init_parameters,
    normalize_pixels,
)
from bistet.train import (
    AdadeltaState,
    Checkpoint,
    CheckpointError,
    TrainConfig,
    bidirectional_train_step,
    checkpoint_bytes,
    direction_loss,
    load_checkpoint,
    make_batch,
    run_training,
    save_checkpoint,
    smoothed_kl_loss,
    zero_grads,
)

TRAIN_SPEC = DatasetSpec(count=8000, min_len=1, max_len=8, seed=11)
TEST_SPEC = DatasetSpec(count=1000, min_len=1, max_len=8, seed=22)
DESK_TRAIN = TrainConfig(total_iterations=3000, batch_size=32, milestones=(0.3, 0.6, 0.8), seed=7,
                         eval_every=500, eval_size=256, checkpoint_every=1000)
DESK_MODEL = dict(n_layers=2, heads=4, d_model=64, d_ff=256)
TIME_LIMIT_S = 30 * 60


def _source_digest() -> str:
    h = hashlib.sha256()
    for p in sorted(Path(bistet.__file__).parent.glob("*.py")):
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def _experiment_key() -> str:
    blob = json.dumps({"train": TRAIN_SPEC.to_dict(), "test": TEST_SPEC.to_dict(),
                       "opt": DESK_TRAIN.to_dict(), "model": DESK_MODEL, "src": _source_digest()}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _normalized(items, cfg):
    return [LabeledImage(normalize_pixels(it.pixels, cfg), it.transcript, it.name) for it in items]


@pytest.fixture(scope="session")
def desk(request):
    root = Path(request.config.cache.mkdir(f"bistet-desk-{_experiment_key()}"))
    meta_path = root / "meta.json"
    if os.environ.get("BISTET_FRESH") == "1" and root.exists():
        shutil.rmtree(root)
        root.mkdir(parents=True)
    generate_dataset(TRAIN_SPEC, root / "train")
    generate_dataset(TEST_SPEC, root / "test")
    manifest = read_manifest(root / "train")
    cfg = ModelConfig(**DESK_MODEL, pixel_mean=float(manifest["mean"]), pixel_std=float(manifest["std"]))
    test = _normalized(load_dataset(root / "test", normalize=False), cfg)
    if meta_path.exists() and (root / "run" / "final.bst").exists():
        meta = json.loads(meta_path.read_text())
    else:
        train = _normalized(load_dataset(root / "train", normalize=False), cfg)
        t0 = time.perf_counter()
        run_training(DESK_TRAIN, cfg, train, root / "run", eval_set=test)
        meta = {"train_seconds": time.perf_counter() - t0}
        meta_path.write_text(json.dumps(meta))
    ck = load_checkpoint(root / "run" / "final.bst")
    params = ck.to_parameters()
    preds = predict_many(test, params, ck.config, "bi")
    truths = [it.transcript for it in test]
    reports = {
        "ltr": evaluate_accuracy([p.candidates[Direction.LTR].text for p in preds], truths),
        "rtl": evaluate_accuracy([p.candidates[Direction.RTL].text for p in preds], truths),
        "bi": evaluate_accuracy([p.text for p in preds], truths),
    }
    return dict(root=root, config=ck.config, params=params, test=test, preds=preds, reports=reports, **meta)


# ---------------------------------------------------------------- 1


def _primitive_cases():
    rng = np.random.default_rng(7)
    r = lambda *s: Tensor(rng.normal(size=s))  # noqa: E731
    w3, w34, w23, x34 = r(3), r(3, 4), r(2, 3), r(3, 4)
    s4a, s4b = r(4), r(4)
    k, b3, x = r(3, 2, 3, 3), r(3), r(2, 2, 6, 8)
    ids = np.array([[0, 2, 1], [3, 3, 0]])
    mask = np.tril(np.ones((4, 4), dtype=bool))
    cases = {
        "add": ((2, 3), lambda t: ad.add(t, w3)),
        "sub": ((2, 3), lambda t: ad.sub(w3, t)),
        "mul": ((2, 3), lambda t: ad.mul(t, w23)),
        "neg": ((2, 3), ad.neg),
        "exp": ((2, 3), ad.exp),
        "log": ((2, 3), lambda t: ad.log(ad.add(ad.mul(t, t), 1.0))),
        "relu": ((3, 4), ad.relu),
        "matmul": ((2, 3), lambda t: ad.matmul(t, w34)),
        "matmul_batched": ((2, 3, 4), lambda t: ad.matmul(t, ad.transpose(t, (0, 2, 1)))),
        "reshape": ((2, 6), lambda t: ad.mul(ad.reshape(t, (3, 4)), x34)),
        "transpose": ((2, 3, 4), lambda t: ad.transpose(t, (2, 0, 1))),
        "concat": ((2, 3), lambda t: ad.concat([t, w23], axis=1)),
        "gather": ((4, 3), lambda t: ad.gather(t, ids)),
        "sum": ((2, 3, 4), lambda t: ad.sum_(t, axis=1)),
        "mean": ((2, 3, 4), lambda t: ad.mean(t, axis=-1)),
        "softmax": ((3, 4), lambda t: ad.softmax(t, axis=-1)),
        "masked_softmax": ((4, 4), lambda t: ad.softmax(ad.add(t, np.where(mask, 0.0, ad.MASK_BIAS)))),
        "log_softmax": ((3, 4), ad.log_softmax),
        "layer_norm": ((3, 4), lambda t: ad.layer_norm(t, s4a, s4b, 1e-6)),
        "conv2d_input": ((2, 2, 6, 8), lambda t: ad.conv2d(t, k, b3, (2, 2), (1, 1))),
        "conv2d_weight": ((3, 2, 3, 3), lambda t: ad.conv2d(x, t, b3, (2, 1), (1, 1))),
    }
    return {n: (fn, rng.normal(size=shape)) for n, (shape, fn) in cases.items()}


def test_criterion_1_gradient_integrity(criterion):
    t0 = time.perf_counter()
    worst_prim = 0.0
    for name, (fn, x0) in _primitive_cases().items():
        w = Tensor(np.random.default_rng(zlib.crc32(name.encode())).normal(size=fn(Tensor(x0)).shape))
        worst_prim = max(worst_prim, gradient_check(lambda t: ad.sum_(ad.mul(fn(t), w)), x0, eps=1e-5))

    cfg = ModelConfig(n_layers=1, heads=2, d_model=8, d_ff=16, image_height=8, image_width=16, max_decode_len=3,
                      charset="abc", backbone_channels=(3, 3, 3), backbone_strides=((2, 2), (2, 2), (2, 1)))
    assert cfg.vocab_size == 6
    params = init_parameters(cfg, 3)
    rng = np.random.default_rng(4)
    batch = make_batch([LabeledImage(rng.normal(size=(8, 16)), t) for t in ("ab", "cba")], cfg.vocab, 3)

    def loss_fn():
        total = None
        for d in Direction:
            memory = encode(extract_visual_features(batch.pixels, params, cfg), params, cfg)
            logits, _ = decode(batch.inputs[d], memory, d, params, cfg)
            loss = smoothed_kl_loss(logits, batch.targets[d], 0.1, batch.mask)
            total = loss if total is None else ad.add(total, loss)
        return total

    # components below 1e-6 sit at the central-difference round-off level, so they are compared absolutely
    worst_model = max(ad.parameters_grad_check(loss_fn, params.values(), eps=1e-5, floor=1e-6).values())
    elapsed = time.perf_counter() - t0
    ok = worst_prim < 1e-5 and worst_model < 1e-4 and elapsed < 60
    criterion(1, ok, f"primitive max rel err {worst_prim:.2e}, end-to-end {worst_model:.2e}, {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- 2


def _reachable(root, params):
    by_id = {id(t): n for n, t in params.items()}
    seen, stack, found = set(), [root], set()
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if id(node) in by_id:
            found.add(by_id[id(node)])
        stack.extend(node._parents)
    return found


def test_criterion_2_single_decoder(criterion, monkeypatch):
    import bistet.train as train

    cfg = ModelConfig(**DESK_MODEL, max_decode_len=8)
    params = init_parameters(cfg, 0)
    batch = make_batch([LabeledImage(np.random.default_rng(i).normal(size=(16, 96)), w)
                        for i, w in enumerate(["word", "x1"])], cfg.vocab, 8)
    used = {d: {n for n in _reachable(direction_loss(batch, d, params, cfg, 0.1), params) if n.startswith("decoder.")}
            for d in Direction}
    same_decoder = used[Direction.LTR] == used[Direction.RTL] == {n for n in params if n.startswith("decoder.")}

    uni = ModelConfig(**DESK_MODEL, bidirectional=False)
    delta = count_parameters(cfg)["total"] - count_parameters(uni)["total"]

    calls = []
    real = train.adadelta_step
    monkeypatch.setattr(train, "adadelta_step", lambda *a, **k: (calls.append(1), real(*a, **k))[1])
    state = AdadeltaState.for_params(params)
    for _ in range(3):
        bidirectional_train_step(batch, params, cfg, state)
    ok = same_decoder and delta == cfg.d_model and len(calls) == 3 and state.steps == 3
    criterion(2, ok, f"shared decoder={same_decoder}, extra params={delta} (d_model={cfg.d_model}), "
                     f"optimizer steps for 3 batches={len(calls)}")
    assert ok


# ---------------------------------------------------------------- 3


def test_criterion_3_gradient_accumulation(criterion):
    cfg = ModelConfig(**DESK_MODEL, max_decode_len=8)
    params = init_parameters(cfg, 1)
    rng = np.random.default_rng(5)
    batch = make_batch([LabeledImage(rng.normal(size=(16, 96)), w) for w in ["hello", "a9", "stone"]], cfg.vocab, 8)
    single = {}
    for d in Direction:
        zero_grads(params)
        direction_loss(batch, d, params, cfg, 0.1).backward()
        single[d] = {n: np.zeros_like(p.data) if p.grad is None else p.grad.copy() for n, p in params.items()}
    zero_grads(params)
    for d in Direction:
        direction_loss(batch, d, params, cfg, 0.1).backward()
    mismatched = [n for n, p in params.items()
                  if not np.array_equal(p.grad, single[Direction.LTR][n] + single[Direction.RTL][n])]
    ok = not mismatched
    criterion(3, ok, f"{len(params) - len(mismatched)}/{len(params)} parameter gradients bit-exact")
    assert ok, mismatched


# ---------------------------------------------------------------- 4-7


def test_criterion_4_desk_training(criterion, desk):
    acc = {k: desk["reports"][k].accuracy for k in ("ltr", "rtl")}
    secs = desk["train_seconds"]
    ok = acc["ltr"] >= 0.90 and acc["rtl"] >= 0.90 and secs <= TIME_LIMIT_S
    criterion(4, ok, f"ltr {acc['ltr']:.3f}, rtl {acc['rtl']:.3f} (need >= 0.90); training {secs / 60:.1f} min")
    assert ok


def test_criterion_5_bidirectional_benefit(criterion, desk):
    rep = desk["reports"]
    best_single = max(rep["ltr"].accuracy, rep["rtl"].accuracy)
    optimal = all(p.probability == max(c.probability for c in p.candidates.values()) for p in desk["preds"])
    ok = rep["bi"].accuracy >= best_single - 0.01 and optimal
    criterion(5, ok, f"bi {rep['bi'].accuracy:.3f} vs best single {best_single:.3f}; "
                     f"selection optimal on all {len(desk['preds'])} items: {optimal}")
    assert ok


def test_criterion_6_attention_direction(criterion, desk):
    cfg, params = desk["config"], desk["params"]
    means, counts = {}, {}
    for d in Direction:
        scores = []
        for item, pred in zip(desk["test"], desk["preds"]):
            if len(item.transcript) < 5 or pred.candidates[d].text != item.transcript:
                continue
            scores.append(character_direction_score(extract_attention(item.pixels, d, params, cfg)).r)
        counts[d], means[d] = len(scores), float(np.mean(scores)) if scores else float("nan")
    ok = (min(counts.values()) >= 50 and means[Direction.LTR] >= 0.5 and means[Direction.RTL] <= -0.5)
    criterion(6, ok, f"ltr mean r {means[Direction.LTR]:+.3f} (n={counts[Direction.LTR]}), "
                     f"rtl mean r {means[Direction.RTL]:+.3f} (n={counts[Direction.RTL]})")
    assert ok


def test_criterion_7_accuracy_vs_length(criterion, desk):
    tsv = desk["root"] / "accuracy_by_length.tsv"
    lines = []
    for direction in ("ltr", "rtl", "bi"):
        rep = desk["reports"][direction]
        (desk["root"] / f"accuracy_by_length_{direction}.tsv").write_text(rep.to_tsv())
        lines.append((direction, rep))
    tsv.write_text(desk["reports"]["bi"].to_tsv())
    rows = [ln.split("\t") for ln in tsv.read_text().splitlines()[1:]]
    per_len = {int(r[0]): float(r[2]) for r in rows if r[0] != "all"}
    short = {n: per_len.get(n, 0.0) for n in range(1, 7)}
    ok = all(a >= 0.85 for a in short.values())
    criterion(7, ok, "bi accuracy by length " + ", ".join(f"{n}:{a:.2f}" for n, a in short.items()))
    assert ok


# ---------------------------------------------------------------- 8


@lru_cache(maxsize=None)
def _ed_oracle(a, b):
    if not a or not b:
        return len(a) + len(b)
    return min(_ed_oracle(a[1:], b) + 1, _ed_oracle(a, b[1:]) + 1, _ed_oracle(a[1:], b[1:]) + (a[0] != b[0]))


def test_criterion_8_metric_and_lexicon(criterion):
    checks = [
        normalize_transcript("Coffee!") == "coffee",
        normalize_transcript("A-1") == "a1",
        evaluate_accuracy(["COFFEE"], ["coffee"]).accuracy == 1.0,
        evaluate_accuracy(["ab", "cx"], ["ab", "cd"]).accuracy == 0.5,
        evaluate_accuracy(["coffe"], ["coffee"], lexicon=["tea", "coffee"]).accuracy == 1.0,
        lexicon_predict("dog", ["cat", "dog"]) == "dog",
        lexicon_predict("cot", ["cat", "dog"]) == "cat",
        lexicon_predict("ab", ["ad", "ac"]) == "ad",
        edit_distance("kitten", "sitting") == 3,
        edit_distance("abc", "ab") == 1,
    ]
    rng = random.Random(2024)
    alphabet = "abcde"
    bad = 0
    for _ in range(1000):
        a = "".join(rng.choice(alphabet) for _ in range(rng.randint(0, 7)))
        b = "".join(rng.choice(alphabet) for _ in range(rng.randint(0, 7)))
        bad += edit_distance(a, b) != _ed_oracle(a, b)
    ok = all(checks) and bad == 0
    criterion(8, ok, f"{sum(checks)}/{len(checks)} tagged examples, {1000 - bad}/1000 randomized edit distances")
    assert ok


# ---------------------------------------------------------------- 9


def test_criterion_9_determinism_and_serialization(criterion, tmp_path):
    generate_dataset(DatasetSpec(count=40, max_len=6, seed=3), tmp_path / "data")
    items = load_dataset(tmp_path / "data")
    cfg = ModelConfig(n_layers=1, heads=2, d_model=16, d_ff=32, max_decode_len=6)
    tc = TrainConfig(total_iterations=5, batch_size=8, seed=9, eval_every=0, checkpoint_every=0)
    run_training(tc, cfg, items, tmp_path / "a")
    run_training(tc, cfg, items, tmp_path / "b")
    a = (tmp_path / "a" / "final.bst").read_bytes()
    reproducible = a == (tmp_path / "b" / "final.bst").read_bytes()

    save_checkpoint(tmp_path / "again.bst", load_checkpoint(tmp_path / "a" / "final.bst"))
    roundtrip = (tmp_path / "again.bst").read_bytes() == a

    corruptions = {
        "magic": b"XXXX" + a[4:],
        "truncated": a[: len(a) // 3],
        "trailing": a + b"\x00",
        "header": a[:17] + b"#" + a[18:],
    }
    structured = 0
    for name, raw in corruptions.items():
        (tmp_path / f"{name}.bst").write_bytes(raw)
        try:
            load_checkpoint(tmp_path / f"{name}.bst")
        except CheckpointError:
            structured += 1
    ck = Checkpoint.from_training(cfg, init_parameters(cfg, 0), 0)
    del ck.params["head.weight"]
    try:
        load_checkpoint_bytes_ok = False
        (tmp_path / "missing.bst").write_bytes(checkpoint_bytes(ck))
        load_checkpoint(tmp_path / "missing.bst")
    except CheckpointError as e:
        load_checkpoint_bytes_ok = "head.weight" in str(e)
    ok = reproducible and roundtrip and structured == len(corruptions) and load_checkpoint_bytes_ok
    criterion(9, ok, f"rerun identical={reproducible}, save-load-save identical={roundtrip}, "
                     f"structured errors {structured + load_checkpoint_bytes_ok}/{len(corruptions) + 1}")
    assert ok
