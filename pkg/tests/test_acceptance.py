"""Acceptance suite: one test per criterion, each reporting a pass/fail line.

The desk model (criteria 8-10) and the LoRA fine-tune (criterion 11) are
trained once per session and cached under ``.acceptance_cache/`` keyed by the
training setup and the source of the modules that shape the weights.
"""

from __future__ import annotations

import hashlib
import struct
import time
from pathlib import Path

import numpy as np
import pytest

from memo_edge import evaluation as ev
from memo_edge import synthdata as sd
from memo_edge.autodiff import GradTape, Tensor, backward
from memo_edge.checkpoint import CheckpointError, decode_checkpoint, load_network, save_network
from memo_edge.gradcheck import check_gradients
from memo_edge.inference import InferenceConfig, predict_map, unmask_step
from memo_edge.model import MASKED, MEMONetwork, ModelConfig, TriStateEdgeMap, predict, predict_guided
from memo_edge.training import (
    TrainingConfig,
    bernoulli_mask,
    lora_inject,
    lora_parameter_count,
    masked_bce_loss,
    train,
)

from op_cases import build_cases
from oracles import hall_max_matching, maps_from_codes, sparse_codes

ROOT = Path(__file__).resolve().parents[1]
CACHE = ROOT / ".acceptance_cache"
SRC = ROOT / "src" / "memo_edge"

# desk model
TRAIN_PAIRS, TRAIN_SEED = 2000, 0
HELD_OUT, HELD_OUT_SEED = 200, 1
DESK_CHANNELS = (16, 32, 64, 128)  # config-file default; the dataclass default is wider
DESK_LR = 1e-3
DESK_BUDGET = 25 * 60.0  # seconds, within the 30 CPU-minute allowance

# LoRA variant domain: blurrier, noisier renders of polygon-only scenes
VARIANT = dict(blur_sigma=1.2, noise_sigma=0.06, shape_weights=(0.0, 1.0, 0.0))
VARIANT_PAIRS, VARIANT_SEED = 200, 2
VARIANT_HELD_OUT, VARIANT_HELD_OUT_SEED = 100, 3
LORA_RANK, LORA_LR, LORA_BUDGET = 4, 1e-3, 5 * 60.0


def verdict(report, number: int, ok: bool, detail: str) -> None:
    report(number, ok, detail)
    assert ok, detail


def _as_input(image: np.ndarray) -> np.ndarray:
    return sd.quantize_image(image).transpose(2, 0, 1).astype(np.float32) / 255.0


def _pairs(cfg: sd.SceneConfig, base_seed: int, n: int):
    out = [sd.generate_sample(cfg, sd.sample_seed(base_seed, i)) for i in range(n)]
    return [_as_input(im) for im, _ in out], [e for _, e in out]


def _cache_key(*parts) -> str:
    h = hashlib.blake2b(digest_size=8)
    for name in ("autodiff.py", "model.py", "optim.py", "training.py", "synthdata.py"):
        h.update((SRC / name).read_bytes())
    h.update(repr(parts).encode())
    return h.hexdigest()


# ---------------------------------------------------------------- fixtures


@pytest.fixture(scope="session")
def desk_model() -> MEMONetwork:
    tcfg = TrainingConfig(batch_size=16, learning_rate=DESK_LR, epochs=100, time_budget=DESK_BUDGET, seed=TRAIN_SEED)
    mcfg = ModelConfig(channels=DESK_CHANNELS, seed=TRAIN_SEED)
    path = CACHE / f"desk-{_cache_key(tcfg, mcfg, TRAIN_PAIRS, sd.SceneConfig())}.memo"
    if not path.exists():
        images, edges = _pairs(sd.SceneConfig(), TRAIN_SEED, TRAIN_PAIRS)
        net = MEMONetwork(mcfg)
        start = time.process_time()
        train(net, images, edges, tcfg)
        assert time.process_time() - start <= 30 * 60
        CACHE.mkdir(exist_ok=True)
        save_network(net, path)
    return load_network(path)


@pytest.fixture(scope="session")
def held_out():
    return _pairs(sd.SceneConfig(), HELD_OUT_SEED, HELD_OUT)


@pytest.fixture(scope="session")
def sweep(desk_model, held_out):
    """CEval/SEval reports of the desk model for every inference setting the criteria need."""
    images, gts = held_out
    out = {}
    for strategy, steps in [("locmax", 5), ("locmax", 10), ("locmax", 20), ("locmax", 40), ("topk", 10), ("random", 10)]:
        cfg = InferenceConfig(steps=steps, strategy=strategy, seed=0)
        preds = [predict_map(desk_model, im, cfg) for im in images]
        out[strategy, steps] = (ev.ods_ois(preds, gts, protocol="ceval"), ev.ods_ois(preds, gts, protocol="seval"))
    return out


# ---------------------------------------------------------------- 1-7: properties


def test_criterion_01_gradient_suite(acceptance_report):
    start = time.perf_counter()
    worst, worst_name = 0.0, ""
    cases = build_cases()
    for name, (fn, arrays) in sorted(cases.items()):
        assert all(a.size <= 64 for a in arrays)
        err = max(check_gradients(fn, arrays))
        if err >= worst:
            worst, worst_name = err, name
    elapsed = time.perf_counter() - start
    ok = worst < 1e-5 and elapsed < 60
    verdict(acceptance_report, 1, ok, f"{len(cases)} ops, worst rel err {worst:.2e} ({worst_name}), {elapsed:.1f}s")


def test_criterion_02_loss_locality(acceptance_report):
    rng = np.random.default_rng(2)
    leaks = 0
    for _ in range(100):
        h, w = rng.integers(2, 17, size=2)
        edges = rng.random((h, w)) < 0.3
        r = float(rng.uniform(0.05, 1.0))
        e_r = bernoulli_mask(edges, r, rng)
        logits = Tensor(rng.standard_normal((h, w)) * 3, requires_grad=True, dtype=np.float64)
        with GradTape() as tape:
            loss = masked_bce_loss(logits, edges, e_r, r)
        g = backward(loss, tape, {"z": logits})["z"]
        leaks += int(np.count_nonzero(g[~e_r.masked]))
    verdict(acceptance_report, 2, leaks == 0, f"100 instances, {leaks} non-zero gradients at unmasked pixels")


def test_criterion_03_masking_statistics(acceptance_report):
    rng = np.random.default_rng(3)
    edges = rng.random((100, 100)) < 0.5
    n = edges.size
    parts = []
    ok = True
    for r in (0.1, 0.5, 0.9):
        frac = bernoulli_mask(edges, r, rng).masked_fraction()
        bound = 3 * np.sqrt(r * (1 - r) / n)
        ok &= abs(frac - r) <= bound
        parts.append(f"r={r}: {frac:.4f} (+-{bound:.4f})")
    verdict(acceptance_report, 3, bool(ok), "; ".join(parts))


def test_criterion_04_guidance_identity(acceptance_report):
    rng = np.random.default_rng(4)
    net = MEMONetwork(ModelConfig(channels=DESK_CHANNELS, seed=4))
    head = net.params["decoder.head.conv.weight"]
    head.data = (rng.standard_normal(head.shape) * 0.5).astype(head.data.dtype)
    image = rng.random((3, 32, 32)).astype(np.float32)
    e_r = bernoulli_mask(rng.random((32, 32)) < 0.2, 0.6, rng)
    r = e_r.masked_fraction()
    plain = predict(net, image, e_r, r)
    identity = float(np.abs(predict_guided(net, image, e_r, r, 1.0) - plain).max())
    zero = np.zeros_like(image)
    ref = predict_guided(net, zero, e_r, r, 1.0)
    invariance = max(float(np.abs(predict_guided(net, zero, e_r, r, s) - ref).max()) for s in (0.5, 1.5, 3.0, 10.0))
    ok = identity <= 1e-6 and invariance <= 1e-6
    verdict(acceptance_report, 4, ok, f"|s=1 - plain| = {identity:.1e}, zero-image spread over s = {invariance:.1e}")


class _RandomFields:
    """Stand-in predictor drawing a fresh probability field on every call."""

    def __init__(self, rng, shape):
        self.rng, self.shape = rng, shape
        self.passes = 0

    def __call__(self, e_r, r):
        self.passes += 1
        return self.rng.random(self.shape)


def test_criterion_05_locmax_progress(acceptance_report):
    rng = np.random.default_rng(5)
    cfg = InferenceConfig(steps=None)
    worst_steps, ok = 0, True
    for _ in range(50):
        h, w = rng.integers(4, 25, size=2)
        predictor = _RandomFields(rng, (h, w))
        e_r = TriStateEdgeMap.all_masked(h, w)
        counts = [e_r.masked_count()]
        steps = 0
        while e_r.masked_count() and steps < h * w:
            before = e_r.states.copy()
            e_r, _ = unmask_step(None, None, e_r, cfg, rng, predictor)
            done = before != MASKED
            ok &= bool(np.array_equal(e_r.states[done], before[done]))
            counts.append(e_r.masked_count())
            steps += 1
        ok &= counts[-1] == 0 and all(b < a for a, b in zip(counts, counts[1:]))
        worst_steps = max(worst_steps, steps)
    verdict(acceptance_report, 5, bool(ok), f"50 fields, strictly decreasing, longest run {worst_steps} steps")


def test_criterion_06_matcher_oracle(acceptance_report):
    rng = np.random.default_rng(6)
    codes = sparse_codes(3)
    sparse_a = np.repeat(codes, len(codes))
    sparse_b = np.tile(codes, len(codes))
    rand_a = rng.integers(0, 1 << 16, 1_000_000)
    rand_b = rng.integers(0, 1 << 16, 1_000_000)
    a_codes = np.concatenate([rand_a, sparse_a])
    b_codes = np.concatenate([rand_b, sparse_b])
    total, bad = 0, 0
    for tol in (1.0, 1.5):
        for lo in range(0, len(a_codes), 200_000):
            a = maps_from_codes(a_codes[lo : lo + 200_000])
            b = maps_from_codes(b_codes[lo : lo + 200_000])
            want = hall_max_matching(a, b, tol)
            got = np.fromiter((ev.match_edges(x, y, tol).true_positives for x, y in zip(a, b)), dtype=np.int64, count=len(a))
            bad += int(np.count_nonzero(got != want))
            total += len(a)
    verdict(acceptance_report, 6, bad == 0, f"{total} pairs over tol 1.0/1.5 ({len(codes)}^2 sparse per tol), {bad} discrepancies")


def test_criterion_07_synthetic_crispness(acceptance_report):
    cfg = sd.SceneConfig()
    worst_ac, blocks = 1.0, 0
    for i in range(100):
        _, edges = sd.generate_sample(cfg, sd.sample_seed(7, i))
        e = edges.astype(bool)
        worst_ac = min(worst_ac, ev.average_crispness(e.astype(np.float64)))
        blocks += int(np.count_nonzero(e[:-1, :-1] & e[1:, :-1] & e[:-1, 1:] & e[1:, 1:]))
    ok = worst_ac >= 0.95 and blocks == 0
    verdict(acceptance_report, 7, ok, f"100 maps, min AC {worst_ac:.3f}, {blocks} all-edge 2x2 blocks")


# ---------------------------------------------------------------- 8-11: trained models


def test_criterion_08_end_to_end(acceptance_report, sweep):
    ceval, _ = sweep["locmax", 10]
    ok = ceval.ods >= 0.55 and ceval.ac >= 0.45
    verdict(acceptance_report, 8, ok, f"held-out {HELD_OUT}: CEval ODS {ceval.ods:.3f} (need >= 0.55), AC@10 {ceval.ac:.3f} (need >= 0.45)")


def test_criterion_09_steps_trend(acceptance_report, sweep):
    steps = (5, 10, 20, 40)
    acs = [sweep["locmax", s][0].ac for s in steps]
    seval = [sweep["locmax", s][1].ods for s in steps]
    monotone = all(b >= a for a, b in zip(acs, acs[1:]))
    gain = acs[-1] - acs[0]
    spread = max(seval) - min(seval)
    ok = monotone and gain >= 0.05 and spread < 0.05
    detail = "AC " + " ".join(f"{a:.3f}" for a in acs) + f" (gain {gain:.3f}, need >= 0.05); SEval ODS spread {spread:.3f} (need < 0.05)"
    verdict(acceptance_report, 9, ok, detail)


def test_criterion_10_strategy_ordering(acceptance_report, sweep):
    res = {s: sweep[s, 10][0] for s in ("locmax", "random", "topk")}
    ok = res["locmax"].ods > res["topk"].ods and res["topk"].ac < min(res["locmax"].ac, res["random"].ac)
    detail = ", ".join(f"{s}: ODS {r.ods:.3f} AC {r.ac:.3f}" for s, r in res.items())
    verdict(acceptance_report, 10, ok, detail)


def test_criterion_11_lora_contract(acceptance_report, desk_model):
    vcfg = sd.SceneConfig(**VARIANT)
    images, edges = _pairs(vcfg, VARIANT_SEED, VARIANT_PAIRS)
    test_images, test_gts = _pairs(vcfg, VARIANT_HELD_OUT_SEED, VARIANT_HELD_OUT)
    icfg = InferenceConfig(steps=10, seed=0)
    base_ods = ev.ods_ois([predict_map(desk_model, im, icfg) for im in test_images], test_gts, protocol="ceval").ods

    before = {k: p.data.tobytes() for k, p in desk_model.params.items()}
    tcfg = TrainingConfig(batch_size=16, learning_rate=LORA_LR, epochs=1000, time_budget=LORA_BUDGET, seed=VARIANT_SEED)
    path = CACHE / f"lora-{_cache_key(tcfg, VARIANT, VARIANT_PAIRS, LORA_RANK, before)}.memo"
    if path.exists():
        tuned = load_network(path)
        expected = lora_parameter_count(tuned, LORA_RANK)
        adapters = sum(p.data.size for k, p in tuned.params.items() if k not in before)
    else:
        tuned = desk_model
        expected = lora_parameter_count(tuned, LORA_RANK)
        adapters = sum(a.parameter_count for a in lora_inject(tuned, LORA_RANK, seed=VARIANT_SEED))
        train(tuned, images, edges, tcfg)
        CACHE.mkdir(exist_ok=True)
        save_network(tuned, path)
    frozen = all(tuned.params[k].data.tobytes() == b for k, b in before.items())
    tuned_ods = ev.ods_ois([predict_map(tuned, im, icfg) for im in test_images], test_gts, protocol="ceval").ods
    ok = frozen and adapters == expected and tuned_ods > base_ods
    detail = f"base frozen: {frozen}; adapters {adapters} (formula {expected}); variant CEval ODS {base_ods:.3f} -> {tuned_ods:.3f}"
    verdict(acceptance_report, 11, ok, detail)


# ---------------------------------------------------------------- 12


def test_criterion_12_checkpoint_round_trip(acceptance_report, tmp_path):
    net = MEMONetwork(ModelConfig(seed=12))
    path = tmp_path / "net.memo"
    save_network(net, path)
    loaded = load_network(path)
    identical = list(loaded.params) == list(net.params) and all(
        loaded.params[k].data.dtype == p.data.dtype and loaded.params[k].data.tobytes() == p.data.tobytes() for k, p in net.params.items()
    )
    blob = bytearray(path.read_bytes())
    rng = np.random.default_rng(12)
    rejected = 0
    trials = 50
    (manifest_len,) = struct.unpack_from("<I", blob, 8)
    for pos in rng.integers(12 + manifest_len, len(blob) - 8, trials):
        bad = bytearray(blob)
        bad[pos] ^= 0x10
        try:
            decode_checkpoint(bytes(bad))
        except CheckpointError:
            rejected += 1
    ok = identical and rejected == trials
    verdict(acceptance_report, 12, ok, f"bit-identical: {identical}; corrupted payloads rejected {rejected}/{trials}")
