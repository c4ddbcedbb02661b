"""The eight acceptance criteria, each at its stated tolerance.

Every test records one PASS/FAIL line; the lines are repeated in a summary
section at the end of the pytest run. Criteria 4 and 5 share one set of
training runs (about 10 minutes on one CPU).
"""
import shutil
import sys
import time

import numpy as np
import pytest

from conftest import random_band, record_acceptance
from semistereo.cli import main as cli_main
from semistereo.data import load_ground_truth, read_manifest
from semistereo.dp import brute_force_path_oracle, filter_occluded_segments, \
    max_average_path, validate_path
from semistereo.embedding import EmbeddingNetwork, embed_line
from semistereo.evaluation import WtaReport, predict_disparity_map, wta_error_rate
from semistereo.losses import Method, contrastive_dp_loss, contrastive_loss, \
    mil_contrastive_loss, mil_loss
from semistereo.numeric import ConvLayer, conv2d_valid, conv2d_valid_backward, l2_normalize, \
    l2_normalize_backward
from semistereo.similarity import BANNED, band_mask, mask_col_maxima, mask_row_maxima, \
    suppress_path_neighborhood
from semistereo.synthetic import make_synthetic_dataset
from semistereo.training import TrainConfig, load_training_pairs, train

H = 1e-3
REL_TOL = 1e-3
INSTANCES = 20
# epochs per method for criteria 4 and 5; the criterion allows up to 10
E2E_EPOCHS = 3


def relative(a, n):
    return abs(a - n) / max(abs(a), abs(n), 1e-4)


# --- 1 ---------------------------------------------------------------------

def test_1_dp_oracle_equivalence():
    rng = np.random.default_rng(1)
    worst, problems = 0.0, []
    start = time.perf_counter()
    for _ in range(200):
        width = int(rng.integers(2, 9))
        d_max = int(rng.integers(1, min(4, width - 1) + 1))
        s = random_band(rng, width, d_max)
        fast, slow = max_average_path(s), brute_force_path_oracle(s)
        worst = max(worst, abs(fast.mean_energy - slow.mean_energy))
        problems += validate_path(fast, s) + validate_path(slow, s)
    ok = worst <= 1e-9 and not problems
    record_acceptance(1, "DP oracle equivalence", ok,
                      f"200 matrices, max |mean diff| = {worst:.2e}, "
                      f"invariant violations = {len(problems)}, {time.perf_counter() - start:.1f}s")
    assert ok


# --- 2 ---------------------------------------------------------------------

def _relu_pattern(net, band):
    x = band[None]
    signs = []
    for layer in net.layers:
        x, cache = conv2d_valid(x, layer, return_cache=True)
        if layer.relu:
            signs.append(cache.pre_activation > 0)
    return np.concatenate([s.ravel() for s in signs])


def _network_fd(rng, patch_size):
    """FD check of every conv layer's weights and biases plus the input, through
    the whole embedding. Probes whose +-h move flips a ReLU are not smooth there
    and are skipped (counted)."""
    # the shipped architecture (64 features), in float64
    net = EmbeddingNetwork.create(patch_size, seed=int(rng.integers(2 ** 31)), dtype=np.float64)
    band = rng.normal(size=(patch_size, patch_size + 6))
    target = rng.normal(size=(7, net.feature_dim))

    def loss():
        desc, _ = net.forward(band)
        return float(np.sum(desc[0] * target))

    desc, trace = net.forward(band)
    net.zero_grad()
    grad_band = net.backward(target[None], trace)
    probes = []
    for layer in net.layers:
        for _ in range(6):
            probes.append((layer.weight, tuple(rng.integers(0, n) for n in layer.weight.shape),
                           layer.grad_weight))
        probes.append((layer.bias, (int(rng.integers(layer.bias.size)),), layer.grad_bias))
    for _ in range(6):
        probes.append((band, tuple(rng.integers(0, n) for n in band.shape), grad_band))
    worst, skipped, checked = 0.0, 0, 0
    base = _relu_pattern(net, band)
    for array, idx, grad in probes:
        orig = array[idx]
        array[idx] = orig + H
        up, pat_up = loss(), _relu_pattern(net, band)
        array[idx] = orig - H
        down, pat_down = loss(), _relu_pattern(net, band)
        array[idx] = orig
        if not (np.array_equal(pat_up, base) and np.array_equal(pat_down, base)):
            skipped += 1
            continue
        checked += 1
        worst = max(worst, relative(grad[idx], (up - down) / (2 * H)))
    return worst, checked, skipped


def _conv_layer_fd(rng, relu):
    layer = ConvLayer.init_uniform(3, 4, rng, relu=relu, dtype=np.float64)
    layer.bias[:] = rng.uniform(-0.2, 0.2, layer.bias.shape)
    x = rng.normal(size=(3, 6, 7))
    target = rng.normal(size=(4, 4, 5))
    out, cache = conv2d_valid(x, layer, return_cache=True)
    layer.zero_grad()
    grad_x = conv2d_valid_backward(target, cache, layer)
    worst, checked, skipped = 0.0, 0, 0
    for array, grad in ((layer.weight, layer.grad_weight), (layer.bias, layer.grad_bias),
                        (x, grad_x)):
        for idx in np.ndindex(array.shape):
            orig = array[idx]
            vals, pats = [], []
            for delta in (H, -H):
                array[idx] = orig + delta
                o, c = conv2d_valid(x, layer, return_cache=True)
                vals.append(float(np.sum(o * target)))
                pats.append(c.pre_activation > 0)
            array[idx] = orig
            if relu and not (np.array_equal(pats[0], cache.pre_activation > 0)
                             and np.array_equal(pats[1], cache.pre_activation > 0)):
                skipped += 1
                continue
            checked += 1
            worst = max(worst, relative(grad[idx], (vals[0] - vals[1]) / (2 * H)))
    return worst, checked, skipped


def _l2_fd(rng):
    v = rng.normal(size=(3, 5))
    g = rng.normal(size=(3, 5))
    analytic = l2_normalize_backward(g, v)
    worst = 0.0
    for idx in np.ndindex(v.shape):
        orig = v[idx]
        v[idx] = orig + H
        up = float(np.sum(l2_normalize(v) * g))
        v[idx] = orig - H
        down = float(np.sum(l2_normalize(v) * g))
        v[idx] = orig
        worst = max(worst, relative(analytic[idx], (up - down) / (2 * H)))
    return worst


def _loss_fd(rng, method):
    """The losses are piecewise linear in the matrix entries. A probe is
    skipped when its +-h move crosses a kink (a max switches or a hinge
    changes state), detected by a non-zero second difference."""
    width, d_max = 12, 4
    mats = [random_band(rng, width, d_max) for _ in range(3)]
    if method is Method.CONTRASTIVE_DP:
        cells = filter_occluded_segments(max_average_path(mats[0]), 3).kept_cells()

    def evaluate():
        if method is Method.MIL:
            return mil_loss(*mats, mu=0.2)
        if method is Method.CONTRASTIVE:
            return contrastive_loss(mats[0], mu=0.2, t_sup=1)
        if method is Method.MIL_CONTRASTIVE:
            return mil_contrastive_loss(*mats, mu=0.2, t_sup=1)
        return contrastive_dp_loss(mats[0], cells, mu=0.2, t_sup=1)

    result = evaluate()
    keys = ("rp", "rn", "np") if method.needs_negative else ("rp",)
    worst, checked, skipped = 0.0, 0, 0
    for key, s in zip(keys, mats):
        grad = result.grads[key]
        for i, j in zip(*np.nonzero(s.valid)):
            orig = s.values[i, j]
            s.values[i, j] = orig + H
            up = evaluate().value
            s.values[i, j] = orig - H
            down = evaluate().value
            s.values[i, j] = orig
            if abs(up - 2 * result.value + down) > 1e-12:
                skipped += 1
                continue
            checked += 1
            worst = max(worst, relative(grad[i, j], (up - down) / (2 * H)))
    return worst, checked, skipped


def test_2_gradient_integrity():
    rng = np.random.default_rng(2)
    start = time.perf_counter()
    lines, ok = [], True

    def tally(name, results):
        nonlocal ok
        worst = max(r[0] for r in results)
        checked = sum(r[1] for r in results)
        skipped = sum(r[2] for r in results)
        passed = worst < REL_TOL and all(r[1] > 0 for r in results) and checked >= skipped
        ok &= passed
        lines.append(f"{name}: {len(results)} inst, max rel {worst:.1e}, "
                     f"{checked} probes, {skipped} kink-skipped")

    tally("conv relu", [_conv_layer_fd(rng, True) for _ in range(INSTANCES)])
    tally("conv linear", [_conv_layer_fd(rng, False) for _ in range(INSTANCES)])
    tally("net(9) layers", [_network_fd(rng, 9) for _ in range(INSTANCES)])
    tally("net(11) layers", [_network_fd(rng, 11) for _ in range(INSTANCES)])
    tally("l2_normalize", [(_l2_fd(rng), 15, 0) for _ in range(INSTANCES)])
    for method in Method:
        tally(method.value, [_loss_fd(rng, method) for _ in range(INSTANCES)])
    for line in lines:
        print("   ", line)
    record_acceptance(2, "gradient integrity", ok,
                      f"h={H}, rel tol {REL_TOL}, {len(lines)} components x {INSTANCES} "
                      f"instances, {time.perf_counter() - start:.1f}s")
    assert ok, "\n".join(lines)


# --- 3 ---------------------------------------------------------------------

def test_3_dense_embedding_equivalence():
    rng = np.random.default_rng(3)
    worst = 0.0
    start = time.perf_counter()
    for n in range(50):
        s = 9 if n % 2 == 0 else 11
        net = EmbeddingNetwork.create(s, seed=n)
        band = rng.normal(size=(s, int(rng.integers(s, s + 40))))
        dense = embed_line(band, net)
        for k in range(band.shape[1] - s + 1):
            x = band[None, :, k:k + s].astype(net.dtype)
            for layer in net.layers:
                x = conv2d_valid(x, layer)
            worst = max(worst, float(np.max(np.abs(dense[k] - l2_normalize(x[:, 0, 0])))))
    ok = worst <= 1e-5
    record_acceptance(3, "dense embedding equivalence", ok,
                      f"50 bands, max |diff| = {worst:.2e}, {time.perf_counter() - start:.1f}s")
    assert ok


# --- 4 and 5 ---------------------------------------------------------------

class _OpenWatch:
    """Audit hook noting every file opened under a directory while armed."""

    def __init__(self, root):
        self.root = str(root)
        self.armed = False
        self.seen = []
        sys.addaudithook(self)

    def __call__(self, event, args):
        if self.armed and event == "open" and isinstance(args[0], str) \
                and args[0].startswith(self.root):
            self.seen.append(args[0])


@pytest.fixture(scope="module")
def benchmark(tmp_path_factory):
    root = tmp_path_factory.mktemp("bench")
    manifest = make_synthetic_dataset(root, seed=0, n_pairs=20, height=128, width=256,
                                      d_max=16, perturb=True)
    entries = read_manifest(manifest)
    watch = _OpenWatch(root / "disp")
    # the watch must notice a ground-truth read, or its silence proves nothing
    watch.armed = True
    load_ground_truth(entries[0].gt, entries[0].gt_format)
    watch.armed = False
    assert watch.seen, "audit hook did not observe a ground-truth read"
    watch.seen.clear()
    pairs = load_training_pairs(manifest)

    def error(net):
        report = WtaReport()
        for entry, pair in zip(entries, pairs):
            gt = load_ground_truth(entry.gt, entry.gt_format)
            report = report.merge(wta_error_rate(predict_disparity_map(net, pair), gt,
                                                 patch_size=net.patch_size))
        return report.error_rate

    results = {}
    for method in Method:
        config = TrainConfig(method=method, epochs=E2E_EPOCHS, seed=0)
        init = EmbeddingNetwork.create(9, seed=int(np.random.default_rng(0).integers(2 ** 31)))
        watch.armed = True
        start = time.perf_counter()
        trained = train(config, pairs).net
        seconds = time.perf_counter() - start
        watch.armed = False
        results[method] = {"trained": error(trained), "seconds": seconds}
        if "untrained" not in results:
            results["untrained"] = error(init)
    results["gt_opened_during_training"] = list(watch.seen)
    return results


def test_4_end_to_end_learning(benchmark):
    untrained = benchmark["untrained"]
    dp = benchmark[Method.CONTRASTIVE_DP]
    leaks = benchmark["gt_opened_during_training"]
    ok = dp["trained"] < 0.5 * untrained and not leaks
    record_acceptance(4, "end-to-end learning", ok,
                      f"untrained {untrained:.4f} -> CONTRASTIVE_DP {dp['trained']:.4f} after "
                      f"{E2E_EPOCHS} epochs ({dp['seconds']:.0f}s), gt files opened during "
                      f"training: {len(leaks)}")
    assert ok


def test_5_method_ordering(benchmark):
    errors = {m: benchmark[m]["trained"] for m in Method}
    order = " > ".join(f"{m.value} {errors[m]:.4f}"
                       for m in sorted(Method, key=lambda m: -errors[m]))
    ok = errors[Method.CONTRASTIVE_DP] <= errors[Method.MIL]
    record_acceptance(5, "method ordering", ok, f"gate DP <= MIL; observed {order}")
    assert ok


# --- 6 ---------------------------------------------------------------------

def test_6_boundary_semantics(tmp_path):
    from PIL import Image
    from semistereo.data import GroundTruthDisparity, Occlusion
    gt_values = np.random.default_rng(6).integers(0, 50, (10, 12)).astype(float)
    gt = GroundTruthDisparity(gt_values, np.ones(gt_values.shape, bool),
                              np.full(gt_values.shape, Occlusion.VISIBLE, np.uint8))
    rate = wta_error_rate(gt_values + 3, gt).error_rate
    Image.fromarray(np.array([[768]], dtype=np.uint16)).save(tmp_path / "d.png")
    decoded = load_ground_truth(tmp_path / "d.png", "UINT16_PNG_X256").values[0, 0]
    ok = rate == 0.0 and decoded == 3.0
    record_acceptance(6, "boundary semantics", ok,
                      f"error(gt + 3) = {rate}, uint16 768 -> {decoded}")
    assert ok


# --- 7 ---------------------------------------------------------------------

def _check_masking(s, masked, violations):
    if np.any(masked.valid & ~s.valid):
        violations.append("mask grew")
    if np.any(masked.valid & ~band_mask(s.width, s.d_max)):
        violations.append("mask left the band")
    if np.any(masked.values[~masked.valid] != BANNED):
        violations.append("banned cell without sentinel")
    if np.any(masked.values[masked.valid] != s.values[masked.valid]):
        violations.append("kept value changed")


def _check_loss(result, mats, violations):
    if not result.value >= 0:
        violations.append("negative loss")
    for key, s in zip(("rp", "rn", "np"), mats):
        g = result.grads.get(key)
        if g is None:
            continue
        if result.value == 0 and np.any(g != 0):
            violations.append("zero loss with non-zero gradient")
        if np.any(g[~s.valid] != 0):
            violations.append("gradient on banned cell")


def test_7_invariant_fuzzing():
    rng = np.random.default_rng(7)
    violations, calls = [], 0
    start = time.perf_counter()
    while calls < 10_000:
        width = int(rng.integers(2, 20))
        d_max = int(rng.integers(1, width))
        mats = [random_band(rng, width, d_max) for _ in range(3)]
        if rng.uniform() < 0.3:  # ties and plateaus
            for m in mats:
                m.values[m.valid] = np.round(m.values[m.valid], 1)
        s = mats[0]
        t_sup = int(rng.integers(0, 4))
        mu = float(rng.uniform(0.01, 1.0))
        for masked in (mask_row_maxima(s, t_sup), mask_col_maxima(s, t_sup)):
            _check_masking(s, masked, violations)
        path = max_average_path(s)
        violations += validate_path(path, s)
        t_occ = int(rng.integers(1, 6))
        filtered = filter_occluded_segments(path, t_occ)
        looser = filter_occluded_segments(path, t_occ + 1)
        if np.any(filtered.kept & ~looser.kept):
            violations.append("occlusion filter not monotone in t_occ")
        if not np.array_equal(filtered.cells, path.cells):
            violations.append("occlusion filter moved cells")
        d = filtered.cells[:, 0] - filtered.cells[:, 1]
        if np.any((d < 0) | (d > d_max)):
            violations.append("path left the band")
        _check_masking(s, suppress_path_neighborhood(s, filtered.kept_cells(), t_sup), violations)
        _check_loss(mil_loss(*mats, mu=mu), mats, violations)
        _check_loss(contrastive_loss(s, mu=mu, t_sup=t_sup), mats, violations)
        _check_loss(mil_contrastive_loss(*mats, mu=mu, t_sup=t_sup), mats, violations)
        _check_loss(contrastive_dp_loss(s, filtered.kept_cells(), mu, t_sup), mats, violations)
        calls += 11
    ok = not violations
    record_acceptance(7, "invariant fuzzing", ok,
                      f"{calls} calls, {len(violations)} violations "
                      f"{sorted(set(violations))[:3]}, {time.perf_counter() - start:.1f}s")
    assert ok


# --- 8 ---------------------------------------------------------------------

def test_8_determinism(tmp_path):
    manifest = make_synthetic_dataset(tmp_path / "data", seed=8, n_pairs=3, height=40,
                                      width=96, d_max=12)
    (tmp_path / "cfg.txt").write_text("method = CONTRASTIVE_DP\nepochs = 2\nseed = 11\n")
    runs = []
    for name in ("a", "b"):
        assert cli_main(["train", "--config", str(tmp_path / "cfg.txt"), "--manifest",
                         str(manifest), "--out", str(tmp_path / name)]) == 0
        runs.append(tmp_path / name)
    names = ["loss.log", "checkpoint.bin", "checkpoint_epoch1.bin", "checkpoint_epoch2.bin"]
    same = [(runs[0] / n).read_bytes() == (runs[1] / n).read_bytes() for n in names]
    ok = all(same)
    record_acceptance(8, "determinism", ok,
                      f"identical: {dict(zip(names, same))}")
    shutil.rmtree(tmp_path / "data")
    assert ok
