"""Acceptance criteria, one test per criterion.

A PASS/FAIL line per criterion is printed in the terminal summary (see
conftest.py).  Criteria 8 and 9 train real models and take roughly fifteen
minutes and three hours respectively.
"""

import csv
import math
import time
import zlib
from dataclasses import replace
from fractions import Fraction

import numpy as np
import pytest

from fdcheck import grad_close, numeric_grad, rel_error
from greyinput import experiment as X
from greyinput import layers as L
from greyinput import resample as R
from greyinput import tensor as T
from greyinput.cli import main as cli_main
from greyinput.descriptors import INDEX
from greyinput.losses import soft_f1_loss, weighted_bce
from greyinput.metrics import confusion_update, prauc
from greyinput.tensor import Tensor


def zlib_seed(name: str) -> int:
    return zlib.crc32(name.encode())


# ---------------------------------------------------------------------------
# 1. kernel oracle equivalence


def _hamming_ref(x, m=1.0):
    if abs(x) >= m:
        return 0.0
    s = 1.0 if x == 0 else math.sin(math.pi * x) / (math.pi * x)
    return s * (0.54 + 0.46 * math.cos(math.pi * x / m))


def _triangle_ref(x):
    return max(0.0, 1.0 - abs(x))


def _taps(n_in, n_out, kernel):
    """Dense tap table: row i holds the weight of every source index in a
    generous window, kernel stretched by the downscale factor."""
    scale = n_in / n_out
    f = max(scale, 1.0)
    src = np.arange(-3 * n_in - 4, 4 * n_in + 4)
    table = np.array([[kernel((s + 0.5 - (i + 0.5) * scale) / f) for s in src] for i in range(n_out)])
    return table, np.clip(src, 0, n_in - 1)


_TAP_CACHE = {}


def _filter_ref(img, oh, ow, kernel, name):
    h, w = img.shape
    for key, args in (((name, h, oh), (h, oh)), ((name, w, ow), (w, ow))):
        if key not in _TAP_CACHE:
            _TAP_CACHE[key] = _taps(*args, kernel)
    ky, iy = _TAP_CACHE[(name, h, oh)]
    kx, ix = _TAP_CACHE[(name, w, ow)]
    ext = img[np.ix_(iy, ix)]  # edge pixels repeated outwards
    out = np.empty((oh, ow))
    for i in range(oh):
        for j in range(ow):
            k2 = np.outer(ky[i], kx[j])
            out[i, j] = (k2 * ext).sum() / k2.sum()
    return np.clip(out, 0.0, 1.0)


def _nearest_ref(img, oh, ow):
    h, w = img.shape
    out = np.empty((oh, ow))
    for i in range(oh):
        for j in range(ow):
            y = math.floor((Fraction(2 * i + 1, 2)) * Fraction(h, oh))
            x = math.floor((Fraction(2 * j + 1, 2)) * Fraction(w, ow))
            out[i, j] = img[min(y, h - 1), min(x, w - 1)]
    return out


def _bilinear_point_ref(img, oh, ow):
    h, w = img.shape
    out = np.empty((oh, ow))
    for i in range(oh):
        y = min(max((i + 0.5) * h / oh - 0.5, 0.0), h - 1.0)
        y0 = int(y)
        y1, ty = min(y0 + 1, h - 1), y - y0
        for j in range(ow):
            x = min(max((j + 0.5) * w / ow - 0.5, 0.0), w - 1.0)
            x0 = int(x)
            x1, tx = min(x0 + 1, w - 1), x - x0
            top = img[y0, x0] * (1 - tx) + img[y0, x1] * tx
            bottom = img[y1, x0] * (1 - tx) + img[y1, x1] * tx
            out[i, j] = top * (1 - ty) + bottom * ty
    return out


def test_criterion_01_kernel_oracles():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    sizes = range(1, 9)
    for h in sizes:
        for w in sizes:
            img = rng.random((h, w))
            for oh in sizes:
                for ow in sizes:
                    pairs = (
                        (R.resize_nearest(img, oh, ow), _nearest_ref(img, oh, ow)),
                        (R.resize_bilinear(img, oh, ow, "point"), _bilinear_point_ref(img, oh, ow)),
                        (R.resize_bilinear(img, oh, ow, "antialiased"),
                         _filter_ref(img, oh, ow, _triangle_ref, "tri")),
                        (R.resize_hamming(img, oh, ow), _filter_ref(img, oh, ow, _hamming_ref, "ham")),
                    )
                    for got, want in pairs:
                        worst = max(worst, float(np.max(np.abs(got - want))))
    elapsed = time.perf_counter() - start
    print(f"criterion 1: max deviation {worst:.3g}, {elapsed:.1f}s")
    assert worst < 1e-9
    assert elapsed < 10.0


# ---------------------------------------------------------------------------
# 2. analytic values


def test_criterion_02_analytic_values():
    for m in (0.5, 1.0, 2.0, 3.0):
        assert abs(R.hamming_window(0, m) - 1.0) < 1e-12
        assert abs(R.hamming_window(m, m) - 0.08) < 1e-12
    assert abs(R.sinc(0) - 1.0) < 1e-12
    assert abs(R.sinc(1) - 0.0) < 1e-12


# ---------------------------------------------------------------------------
# 3. gradient suite


def _away_from(x, points, gap=1e-3):
    for p in points:
        x[np.abs(x - p) < gap] = p + 10 * gap
    return x


# name -> (builder(rng) returning (fn(*tensors) -> Tensor, list of input arrays))
def _op_cases():
    cases = {}

    def unary(name, f, shape=(2, 3), kinks=(), positive=False):
        def build(rng):
            x = rng.normal(size=shape)
            if positive:
                x = np.abs(x) + 0.2
            return f, [_away_from(x, kinks)]
        cases[name] = build

    def binary(name, f, positive_b=False):
        def build(rng):
            a, b = rng.normal(size=(3, 4)), rng.normal(size=(1, 4))  # exercises broadcasting
            if positive_b:
                b = np.abs(b) + 0.5
            return f, [a, b]
        cases[name] = build

    binary("add", lambda a, b: a + b)
    binary("sub", lambda a, b: a - b)
    binary("mul", lambda a, b: a * b)
    binary("div", lambda a, b: a / b, positive_b=True)
    unary("neg", lambda a: -a)
    unary("power", lambda a: a ** 3)
    unary("sqrt_power", lambda a: a ** 0.5, positive=True)
    unary("log", T.log, positive=True)
    unary("exp", T.exp)
    unary("clip", lambda a: T.clip(a, -0.5, 0.5), kinks=(-0.5, 0.5))
    unary("sum", lambda a: T.tsum(a, axis=1))
    unary("mean", lambda a: T.mean(a, axis=0, keepdims=True))
    unary("reshape", lambda a: T.reshape(a, (3, 2)) * Tensor(np.arange(6.0).reshape(3, 2)))
    unary("flatten", T.flatten, shape=(2, 2, 3))
    unary("relu", T.relu, kinks=(0.0,))
    unary("sigmoid", T.sigmoid)
    unary("dropout", lambda a: T.dropout(a, 0.4, True, np.random.default_rng(5)))
    unary("adaptive_avg_pool", T.adaptive_avg_pool2d, shape=(2, 3, 4, 5))
    unary("pad2d", lambda a: T.pad2d(a, 1) * Tensor(np.linspace(-1, 1, 2 * 2 * 5 * 6).reshape(2, 2, 5, 6)),
          shape=(2, 2, 3, 4))

    def concat(rng):
        return (lambda a, b: T.concat([a, b], axis=1)), [rng.normal(size=(2, 2, 3)), rng.normal(size=(2, 1, 3))]

    def matmul(rng):
        return T.matmul, [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))]

    def linear(rng):
        return T.linear, [rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=(2,))]

    def conv(rng):
        k, s, p = (int(rng.integers(1, 4)), int(rng.integers(1, 3)), int(rng.integers(0, 2)))
        x, wt, b = rng.normal(size=(2, 2, 5, 5)), rng.normal(size=(3, 2, k, k)), rng.normal(size=(3,))
        return (lambda x, w, b: T.conv2d(x, w, b, stride=s, pad=p)), [x, wt, b]

    def bn(training, dims):
        def build(rng):
            shape = (4, 3, 2, 2) if dims == 2 else (5, 3)
            fn = T.batchnorm2d if dims == 2 else T.batchnorm1d
            stats = (rng.normal(size=3) * 0.1, rng.uniform(0.5, 1.5, size=3))

            def f(x, g, b):
                fresh = tuple(v.copy() for v in stats)  # running stats must not drift between calls
                return fn(x, g, b, fresh, training, 0.1, 1e-5)
            return f, [rng.normal(size=shape), rng.normal(size=3) + 1.0, rng.normal(size=3)]
        return build

    cases.update(concat=concat, matmul=matmul, linear=linear, conv2d=conv,
                 batchnorm2d_train=bn(True, 2), batchnorm2d_eval=bn(False, 2),
                 batchnorm1d_train=bn(True, 1), batchnorm1d_eval=bn(False, 1))
    return cases


def _check_op(fn, arrays, rng):
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*leaves)
    proj = rng.normal(size=out.shape)
    (out * Tensor(proj)).sum().backward()
    worst = 0.0
    for leaf, arr in zip(leaves, arrays):
        work = arr.copy()

        def f():
            ins = [Tensor(work if a is arr else a) for a in arrays]
            return float((fn(*ins).data * proj).sum())

        num = numeric_grad(f, work)
        if not grad_close(leaf.grad, num, rtol=1e-4):
            return False, rel_error(leaf.grad, num)
        worst = max(worst, rel_error(leaf.grad, num) if np.abs(num).max() > 1e-8 else 0.0)
    return True, worst


def _check_layer(kind, rng):
    spec = L.PreprocSpec(kind, branch_width=2)
    layer = L.build_preproc(spec, rng)
    layer.train()
    x = rng.normal(size=(3, 3, 5, 4))
    proj = rng.normal(size=(3, 3, 5, 4))
    params = list(layer.parameters())
    saved = [b.copy() for _, b in layer.named_buffers()]

    def forward(inp):
        for (_, b), s in zip(layer.named_buffers(), saved):
            b[...] = s
        return layer(inp)

    xt = Tensor(x.copy(), requires_grad=True)
    layer.zero_grad()
    (forward(xt) * Tensor(proj)).sum().backward()
    work = x.copy()

    def f():
        return float((forward(Tensor(work)).data * proj).sum())

    ok, worst = True, 0.0
    for target, grad in [(work, xt.grad)] + [(p.data, p.grad) for p in params]:
        num = numeric_grad(f, target)
        if not grad_close(grad, num, rtol=1e-4):
            ok = False
        elif np.abs(num).max() > 1e-8:
            worst = max(worst, rel_error(grad, num))
    return ok, worst


def _loss_case(rng, kind):
    b, c = int(rng.integers(1, 6)), int(rng.integers(1, 6))
    s = rng.uniform(0.05, 0.95, size=(b, c))
    y = (rng.random((b, c)) < 0.4).astype(float)
    w = rng.uniform(0.5, 2.0, size=c)
    fn = (lambda t: weighted_bce(t, y, w)) if kind == "bce" else (lambda t: soft_f1_loss(t, y))
    leaf = Tensor(s.copy(), requires_grad=True)
    fn(leaf).backward()
    num = numeric_grad(lambda: float(fn(Tensor(s)).data), s, step=1e-6)
    return rel_error(leaf.grad, num)


def test_criterion_03_gradient_suite():
    start = time.perf_counter()
    failures, worst = [], {}
    for name, build in _op_cases().items():
        rng = np.random.default_rng(zlib_seed(name))
        for _ in range(20):
            fn, arrays = build(rng)
            ok, err = _check_op(fn, arrays, rng)
            worst[name] = max(worst.get(name, 0.0), err)
            if not ok:
                failures.append((name, err))
    for kind in L.PREPROC_KINDS:
        if kind == "no_tfm":
            continue
        rng = np.random.default_rng(zlib_seed(kind))
        for _ in range(20):
            ok, err = _check_layer(kind, rng)
            worst[kind] = max(worst.get(kind, 0.0), err)
            if not ok:
                failures.append((kind, err))
    for kind in ("bce", "soft_f1"):
        rng = np.random.default_rng(zlib_seed(kind))
        errs = [_loss_case(rng, kind) for _ in range(20)]
        worst[f"loss_{kind}"] = max(errs)
        if max(errs) >= 1e-6:
            failures.append((kind, max(errs)))
    elapsed = time.perf_counter() - start
    print(f"criterion 3: {len(worst)} operations, worst relative errors "
          + ", ".join(f"{k}={v:.1e}" for k, v in sorted(worst.items())) + f"; {elapsed:.1f}s")
    assert not failures, failures
    assert elapsed < 60.0


# ---------------------------------------------------------------------------
# 4. confusion worked example


def test_criterion_04_confusion_worked_example():
    labels, scores = np.zeros(17), np.zeros(17)
    table = {"D01": (0, 0.3), "D02": (1, 0.9), "D03": (0, 0.2), "D04": (0, 0.8), "D05": (1, 0.6), "D06": (1, 0.6)}
    for code, (y, s) in table.items():
        labels[INDEX[code]], scores[INDEX[code]] = y, s
    m = np.zeros((17, 17))
    confusion_update(m, labels, scores)
    want = np.zeros((17, 17))
    want[INDEX["D02"], INDEX["D02"]] = 1.0
    want[INDEX["D05"], INDEX["D04"]] = 0.5
    want[INDEX["D06"], INDEX["D04"]] = 0.5
    assert np.max(np.abs(m - want)) < 1e-12


# ---------------------------------------------------------------------------
# 5. PRAUC oracle


def _brute_ap(scores, labels):
    """Every distinct score as a threshold; precision and recall counted by hand."""
    n_pos = sum(labels)
    ap, prev_recall = 0.0, 0.0
    for t in sorted(set(scores), reverse=True):
        tp = sum(1 for s, y in zip(scores, labels) if s >= t and y)
        fp = sum(1 for s, y in zip(scores, labels) if s >= t and not y)
        recall = tp / n_pos
        ap += (recall - prev_recall) * tp / (tp + fp)
        prev_recall = recall
    return ap


def test_criterion_05_prauc_oracle():
    rng = np.random.default_rng(55)
    worst = 0.0
    for k in range(2000):
        n = int(rng.integers(1, 40))
        labels = (rng.random(n) < rng.uniform(0.1, 0.9)).astype(int)
        if labels.sum() == 0:
            labels[int(rng.integers(n))] = 1
        # a third of the instances use coarse scores so ties are common
        scores = rng.random(n) if k % 3 else np.round(rng.random(n), 1)
        worst = max(worst, abs(prauc(scores, labels) - _brute_ap(list(scores), list(labels))))
    print(f"criterion 5: max deviation {worst:.3g}")
    assert worst < 1e-9
    for n_pos, n_neg in ((1, 0), (1, 5), (4, 9), (20, 3)):
        scores = np.r_[rng.uniform(0.6, 1.0, n_pos), rng.uniform(0.0, 0.5, n_neg)]
        labels = np.r_[np.ones(n_pos), np.zeros(n_neg)]
        assert prauc(scores, labels) == 1.0


# ---------------------------------------------------------------------------
# 6. soft-F1 bounds and anchor


def test_criterion_06_soft_f1():
    rng = np.random.default_rng(66)
    lo, hi = 1.0, 0.0
    for _ in range(1000):
        b, c = int(rng.integers(1, 8)), int(rng.integers(1, 18))
        s = rng.random((b, c))
        y = (rng.random((b, c)) < 0.3).astype(float)
        v = float(soft_f1_loss(Tensor(s), y).data)
        lo, hi = min(lo, v), max(hi, v)
    print(f"criterion 6: loss range [{lo:.4f}, {hi:.4f}]")
    assert 0.0 <= lo and hi <= 1.0
    anchor = float(soft_f1_loss(Tensor(np.array([[0.5]])), np.array([[1.0]])).data)
    assert abs(anchor - 1 / 3) < 1e-9


# ---------------------------------------------------------------------------
# 7. determinism


def _log_without_wall(path):
    with open(path, newline="") as fh:
        return [row[:4] for row in csv.reader(fh)]


def test_criterion_07_determinism(tmp_path):
    data = tmp_path / "data"
    assert cli_main(["gen", "--n", "40", "--seed", "11", "--out", str(data)]) == 0
    ini = tmp_path / "run.ini"
    ini.write_text("[experiment]\nval_fraction = 0.25\nbatch_size = 8\n")
    runs = []
    for name in ("first", "second"):
        out = tmp_path / name
        args = ["train", "--config", str(ini), "--data", str(data), "--seed", "5", "--epochs-frozen", "1",
                "--epochs-finetune", "1", "--out", str(out)]
        assert cli_main(args) == 0
        runs.append(out)
    a, b = runs
    assert (a / "checkpoint.npz").read_bytes() == (b / "checkpoint.npz").read_bytes()
    # every logged column except wall-clock time, compared as text
    assert _log_without_wall(a / "train_log.csv") == _log_without_wall(b / "train_log.csv")
    for name in ("per_class_prauc.csv", "confusion.csv", "summary.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


# ---------------------------------------------------------------------------
# 8. end-to-end learnability

LEARN_CONFIG = dict(gen_n=2000, gen_seed=0, channels="B-H-N", preproc="inc_d", loss="bce", resize_mode="aspect",
                    epochs_frozen=1, epochs_finetune=16, lr_frozen=3e-3, lr_min=3e-3, lr_max=1e-2, dtype="float32",
                    seed=0)
LEARN_BUDGET = 15 * 60


def test_criterion_08_learnability(tmp_path):
    start = time.perf_counter()
    cfg = X.ExperimentConfig(**LEARN_CONFIG, out=str(tmp_path / "learn"))
    result = X.train_run(cfg, progress=lambda r: print(f"  epoch {r.epoch}: val {r.macro_prauc:.4f}", flush=True))
    elapsed = time.perf_counter() - start
    print(f"criterion 8: macro PRAUC {result.macro_prauc:.4f} in {elapsed:.0f}s")
    assert result.macro_prauc >= 0.80
    assert elapsed <= LEARN_BUDGET


# ---------------------------------------------------------------------------
# 9. directional replication

DIRECTION_SEEDS = 5
DIRECTION_CONFIG = dict(gen_n=1000, gen_seed=1, channels="B-H-N", preproc="inc_d", loss="bce",
                        resize_mode="aspect", epochs_frozen=1, epochs_finetune=13, lr_frozen=3e-3, lr_min=3e-3,
                        lr_max=1e-2, dtype="float32")
DIRECTION_BUDGET = 3 * 3600


def test_criterion_09_directional(tmp_path):
    start = time.perf_counter()
    base = X.ExperimentConfig(**DIRECTION_CONFIG)
    images = X.resolve_dataset(base)
    variants = {
        "baseline": {},
        "squish": {"resize_mode": "squish", "target": "224x224"},
        "soft_f1": {"loss": "soft_f1"},
        "no_tfm": {"preproc": "no_tfm"},
    }
    scores = {k: [] for k in variants}
    for s in range(DIRECTION_SEEDS):
        seed = X.derive_seed(base.seed, s)
        for name, change in variants.items():
            cfg = replace(base, seed=seed, out=str(tmp_path / f"s{s}_{name}"), **change)
            scores[name].append(X.train_run(cfg, images).macro_prauc)
            print(f"  seed {s} {name}: {scores[name][-1]:.4f} ({time.perf_counter() - start:.0f}s)", flush=True)
    elapsed = time.perf_counter() - start
    base_s = np.array(scores["baseline"])
    wins_aspect = int(np.sum(base_s > np.array(scores["squish"])))
    wins_bce = int(np.sum(base_s > np.array(scores["soft_f1"])))
    mean_pre, mean_none = float(base_s.mean()), float(np.mean(scores["no_tfm"]))
    print(f"criterion 9: aspect>squish {wins_aspect}/5, bce>soft_f1 {wins_bce}/5, "
          f"inc_d mean {mean_pre:.4f} vs no_tfm {mean_none:.4f}, {elapsed:.0f}s")
    for name, vals in scores.items():
        print(f"  {name}: " + " ".join(f"{v:.4f}" for v in vals))
    assert wins_aspect >= 4
    assert wins_bce >= 4
    assert mean_pre > mean_none
    assert elapsed <= DIRECTION_BUDGET


# ---------------------------------------------------------------------------
# 10. grid machinery


def test_criterion_10_grid(tmp_path):
    base = X.ExperimentConfig(gen_n=24, gen_seed=3, backbone_channels="4,8", head_hidden=8, branch_width=2,
                              epochs_frozen=1, epochs_finetune=1, batch_size=6, val_fraction=0.25)
    res = X.run_grid(base, ["B-H-N", "N-N-N"], ["inc_d", "cbn_1"], ["bce"], ["48x24:aspect", "36x36:squish"], 2,
                     tmp_path)
    assert all(r["status"] == "ok" for r in res["rows"]) and len(res["rows"]) == 16
    raw = X.read_raw_rows(tmp_path / "grid_runs.csv")
    cols = ["48x24:aspect", "36x36:squish"]

    def cell(ch, pp, col):
        return float(np.mean([r["macro_prauc"] for r in raw
                              if (r["channels"], r["preproc"], r["resolution"]) == (ch, pp, col)]))

    with open(tmp_path / "grid_table.csv", newline="") as fh:
        table = list(csv.DictReader(fh))
    assert len(table) == 4
    for row in table:
        a, s = cell(row["channels"], row["preproc"], cols[0]), cell(row["channels"], row["preproc"], cols[1])
        assert abs(float(row[cols[0]]) - a) < 1e-12 and abs(float(row[cols[1]]) - s) < 1e-12
        assert abs(float(row["delta"]) - (a - s)) < 1e-12
    for fname, axis, others in (("marginal_by_preproc.csv", "preproc", ["B-H-N", "N-N-N"]),
                                ("marginal_by_channels.csv", "channels", ["inc_d", "cbn_1"])):
        with open(tmp_path / fname, newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 2
        for row in rows:
            key = row[axis]
            pick = (lambda o: (o, key)) if axis == "preproc" else (lambda o: (key, o))
            want = [np.mean([cell(*pick(o), c) for o in others]) for c in cols]
            assert abs(float(row[cols[0]]) - want[0]) < 1e-12
            assert abs(float(row[cols[1]]) - want[1]) < 1e-12
            assert abs(float(row["delta"]) - (want[0] - want[1])) < 1e-12
