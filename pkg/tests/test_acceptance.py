"""End-to-end acceptance gate.

Each test prints one ``[PASS]``/``[FAIL]`` line with its measured numbers
(run ``pytest tests/test_acceptance.py -v -s`` to watch them live) and then
asserts the same condition.  The desk-scale experiments train real networks
and dominate the runtime: the full file takes roughly half an hour on one
CPU core.
"""

import os
import time
from pathlib import Path

import numpy as np
import pytest

from test_formats import enumerate_fixed_grid, enumerate_float_grid, oracle_nearest

from lowprec.data import parse_idx, serialize_idx, synthesize_digits, to_dataset
from lowprec.formats import (
    ExactHost,
    FixedPoint,
    FloatEmu,
    quantize_array,
    representable_bounds,
)
from lowprec.harness import (
    DataConfig,
    ExperimentConfig,
    MAC_COST_TABLE,
    ModelConfig,
    OptimizerConfig,
    PrecisionConfig,
    mac_cost,
    run,
)
from lowprec.network import (
    MaxoutClassifier,
    MaxoutNetwork,
    Stager,
    backward,
    forward,
    nll_loss,
)
from lowprec.scaling import ScaleGroup, ScalingPolicy, apply_policy
from lowprec.tensor import Rng


def report(criterion: str, passed: bool, detail: str) -> None:
    print(f"[{'PASS' if passed else 'FAIL'}] {criterion}: {detail}", flush=True)
    assert passed, f"{criterion}: {detail}"


def mixed_scale(r, n, min_exp, max_exp):
    signs = np.where(r.uniform(0, 1, n) < 0.5, -1.0, 1.0)
    vals = signs * np.exp2(r.uniform(min_exp, max_exp, n)) * r.uniform(1, 2, n)
    vals[r.uniform(0, 1, n) < 0.01] = 0.0
    return vals


# ---------------------------------------------------------------------------
# criterion 1: quantizer property suite
# ---------------------------------------------------------------------------

def _property_battery(fmt, x):
    res = quantize_array(x, fmt)
    q = res.values
    again = quantize_array(q, fmt)
    assert np.array_equal(again.values, q), f"{fmt}: not idempotent"
    assert again.overflow_count == 0

    xs = np.sort(x)
    qs = quantize_array(xs, fmt).values
    assert np.all(np.diff(qs) >= 0), f"{fmt}: not monotone"

    lo, hi, _ = representable_bounds(fmt)
    inside = (x >= lo) & (x <= hi)
    if isinstance(fmt, FixedPoint):
        assert np.all(np.abs(q[inside] - x[inside]) <= fmt.step / 2 + 0.0), \
            f"{fmt}: half-step bound violated"
    else:
        xi, qi = x[inside], q[inside]
        mant, expo = np.frexp(np.abs(xi))
        binade = np.maximum(expo - 1, fmt.emin)
        allowed = np.exp2(binade - fmt.man_bits) / 2
        assert np.all(np.abs(qi - xi) <= allowed), f"{fmt}: half-ulp bound violated"

    assert np.all(q[x > hi] == hi) and np.all(q[x < lo] == lo), f"{fmt}: no saturation"
    assert res.overflow_count == int(np.count_nonzero((x > hi) | (x < lo)))


def test_criterion_1_quantizer_properties():
    t0 = time.time()
    r = np.random.default_rng(1001)
    per_format = 120_000
    families = {
        "fixed": [FixedPoint(12, 4), FixedPoint(20, 5)],
        "float": [FloatEmu(5, 10), FloatEmu(4, 6)],
    }
    checked = 0
    for fmts in families.values():
        for fmt in fmts:
            _property_battery(fmt, mixed_scale(r, per_format, -40, 40))
            checked += per_format

    # exhaustive oracle equivalence for every fixed width up to 6
    for width in range(2, 7):
        for int_exp in (0, 3):
            grid, parities = enumerate_fixed_grid(width, int_exp)
            mids = (grid[:-1] + grid[1:]) / 2
            probe = np.concatenate([
                grid, mids, mixed_scale(r, 4000, -8, int_exp + 3)])
            got = quantize_array(probe, FixedPoint(width, int_exp)).values
            want = oracle_nearest(grid, parities, probe)
            assert np.array_equal(got, want), f"width {width} @ {int_exp}"
    # and one six-bit float format against its enumerated grid
    grid, parities = enumerate_float_grid(3, 2)
    probe = np.concatenate([grid, (grid[:-1] + grid[1:]) / 2,
                            mixed_scale(r, 4000, -6, 4)])
    got = quantize_array(probe, FloatEmu(3, 2)).values
    assert np.array_equal(got, oracle_nearest(grid, parities, probe))

    elapsed = time.time() - t0
    report("criterion 1", elapsed < 60,
           f"properties on {checked} randomized values (two formats per family) "
           f"+ exhaustive oracles for widths <= 6, in {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion 2: half/single agreement with host formats
# ---------------------------------------------------------------------------

def test_criterion_2_host_float_agreement():
    t0 = time.time()
    r = np.random.default_rng(1002)
    x = mixed_scale(r, 100_000, -140, 126)
    x = x[np.abs(x) <= float(np.finfo(np.float32).max)]
    emulated = quantize_array(x, FloatEmu(8, 23)).values
    single_ok = np.array_equal(
        emulated.astype(np.float32).view(np.uint32),
        x.astype(np.float32).view(np.uint32),
    )

    grid, parities = enumerate_float_grid(5, 10)
    y = mixed_scale(r, 10_000, -26, 17)  # runs past 65504 to hit saturation
    half = quantize_array(y, FloatEmu(5, 10)).values
    half_ok = np.array_equal(half, oracle_nearest(grid, parities, y))

    elapsed = time.time() - t0
    report("criterion 2", single_ok and half_ok and elapsed < 60,
           f"single bit-for-bit on {len(x)} values ({single_ok}), "
           f"half vs enumerated grid on 10000 values ({half_ok}), {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion 3: scaling policy oracle
# ---------------------------------------------------------------------------

def test_criterion_3_policy_matches_reference():
    r = np.random.default_rng(1003)
    trials = 10_000
    legal = True
    agree = True
    for _ in range(trials):
        n = int(r.integers(1, 50_000))
        dbl = int(r.integers(0, n + 1))
        ovf = int(r.integers(0, dbl + 1))  # overflow set is inside the 2x set
        max_rate = float(r.choice([1e-4, r.uniform(0, 3e-4)]))
        g = ScaleGroup("g", exponent=0)
        g.element_count, g.overflow_count, g.double_overflow_count = n, ovf, dbl
        step = apply_policy(g, ScalingPolicy(max_overflow_rate=max_rate))
        if ovf / n > max_rate:
            want = 1
        elif dbl / n <= max_rate:
            want = -1
        else:
            want = 0
        legal &= step in (-1, 0, 1)
        agree &= step == want
    report("criterion 3", legal and agree,
           f"{trials} random (r, r2, r_max) triples, steps legal={legal}, "
           f"reference agreement={agree}")


# ---------------------------------------------------------------------------
# criterion 4: gradient check
# ---------------------------------------------------------------------------

def _worst_gradient_error(seed: int) -> float:
    rng = Rng(seed)
    stager = Stager(ExactHost(), ExactHost())
    net = MaxoutNetwork(8, (10, 10), 3, 2, stager, Rng(seed + 1))
    X = rng.uniform((5, 8), -1.0, 1.0)
    y = rng.integers((5,), 0, 3)

    def loss():
        return nll_loss(forward(net, X).probs, y)

    grads = backward(net, forward(net, X), y)
    pairs = []
    for layer, (dW, db) in zip(net.layers, grads.layers):
        pairs.append((layer.W, dW))
        pairs.append((layer.b, db))
    pairs.append((net.out.W, grads.out[0]))
    pairs.append((net.out.b, grads.out[1]))

    eps = 1e-6
    worst = 0.0
    for param, analytic in pairs:
        flat = param.master.reshape(-1)
        aflat = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            param.sync(stager)
            up = loss()
            flat[i] = orig - eps
            param.sync(stager)
            down = loss()
            flat[i] = orig
            param.sync(stager)
            numeric = (up - down) / (2 * eps)
            err = abs(numeric - aflat[i]) / max(abs(numeric) + abs(aflat[i]), 1e-8)
            worst = max(worst, err)
    return worst


def test_criterion_4_gradient_check():
    t0 = time.time()
    worst = max(_worst_gradient_error(seed) for seed in (11, 22, 33))
    elapsed = time.time() - t0
    report("criterion 4", worst <= 1e-5 and elapsed < 60,
           f"backprop vs central differences, 3 seeds, k=2, 10-unit layers: "
           f"max relative error {worst:.2e} in {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion 5: MAC cost table
# ---------------------------------------------------------------------------

def test_criterion_5_mac_cost():
    exact = all(mac_cost(m, a).alms == c for (m, a), c in MAC_COST_TABLE.items())
    rel = {
        (m, a): abs(mac_cost(m, a).model_alms - c) / c
        for (m, a), c in MAC_COST_TABLE.items()
    }
    fit_ok = all(v < 0.15 for v in rel.values())
    worst = max(rel.values())
    report("criterion 5", exact and fit_ok,
           f"table rows 504/138/128 exact={exact}, "
           f"model worst deviation {worst:.1%} (< 15%)")


# ---------------------------------------------------------------------------
# criteria 6-8: desk-scale trend experiments
# ---------------------------------------------------------------------------

DESK_TRAIN, DESK_TEST, DESK_SEED = 10_000, 2_000, 7

DESK_RECIPE = dict(
    hidden_units=(200, 200), pieces=2, epochs=20, batch_size=100,
    lr_start=0.05, lr_end=0.01, lr_decay_epochs=20,
    momentum_start=0.5, momentum_saturate=0.7, momentum_saturate_epoch=10,
    max_norm=2.5, dropout_input=0.2, dropout_hidden=0.5, seed=0,
)


@pytest.fixture(scope="session")
def desk_data():
    ti, tl, vi, vl = synthesize_digits(DESK_TRAIN, DESK_TEST, seed=DESK_SEED)
    return to_dataset(ti, tl), to_dataset(vi, vl)


def desk_run(desk_data, **precision):
    train_ds, test_ds = desk_data
    clf = MaxoutClassifier(**DESK_RECIPE, **precision)
    t0 = time.time()
    clf.fit(train_ds.X, train_ds.y, eval_set=(test_ds.X, test_ds.y))
    return clf.log_[-1].test_error, time.time() - t0


@pytest.fixture(scope="session")
def baseline(desk_data):
    return desk_run(desk_data)  # carrier-precision formats


def test_criterion_6_precision_trends(desk_data, baseline):
    base_err, base_time = baseline
    dfx_err, dfx_time = desk_run(
        desk_data, prop_format="fixed:10@5", update_format="fixed:12@5",
        dynamic_scaling=True)
    fixed_err, fixed_time = desk_run(
        desk_data, prop_format="fixed:10@5", update_format="fixed:32@5")
    half_err, half_time = desk_run(
        desk_data, prop_format="float:5.10", update_format="float:5.10")

    ok_a = dfx_err <= 1.4 * base_err
    ok_b = fixed_err >= 2.0 * base_err
    ok_c = half_err <= 1.2 * base_err
    ok_t = max(base_time, dfx_time, fixed_time, half_time) < 1200

    report(
        "criterion 6",
        ok_a and ok_b and ok_c and ok_t,
        f"baseline {base_err:.4f} ({base_time:.0f}s); "
        f"(a) dynamic 10/12 {dfx_err:.4f} = {dfx_err / base_err:.2f}x <= 1.4x: {ok_a}; "
        f"(b) static fixed 10-bit prop {fixed_err:.4f} = {fixed_err / base_err:.1f}x >= 2x: {ok_b}; "
        f"(c) half float {half_err:.4f} = {half_err / base_err:.2f}x <= 1.2x: {ok_c}; "
        f"all formats < 20 min: {ok_t}",
    )


def test_criterion_7_radix_sweep(desk_data, baseline):
    base_err, _ = baseline
    radixes = (3, 4, 5, 6, 7, 8)
    normalized = {}
    for e in radixes:
        err, _ = desk_run(desk_data, prop_format=f"fixed:32@{e}",
                          update_format=f"fixed:32@{e}")
        normalized[e] = err / max(base_err, 1e-12)
    best = min(normalized.values())
    ok = normalized[5] == best or normalized[6] == best
    table = ", ".join(f"e={e}: {v:.3f}" for e, v in normalized.items())
    report("criterion 7", ok,
           f"32-bit fixed point, normalized error by radix exponent [{table}]; "
           f"best at 5 or 6: {ok}")


def _dfx_config(out_dir: Path, name: str) -> ExperimentConfig:
    opt = {k: DESK_RECIPE[k] for k in (
        "epochs", "batch_size", "lr_start", "lr_end", "lr_decay_epochs",
        "momentum_start", "momentum_saturate", "momentum_saturate_epoch",
        "max_norm", "dropout_input", "dropout_hidden")}
    return ExperimentConfig(
        name=name, output_dir=str(out_dir / name), seed=DESK_RECIPE["seed"],
        data=DataConfig(source="synthetic", synthetic_train=DESK_TRAIN,
                        synthetic_test=DESK_TEST, synthetic_seed=DESK_SEED,
                        n_train=0, n_test=0),
        model=ModelConfig(hidden_units=DESK_RECIPE["hidden_units"],
                          pieces=DESK_RECIPE["pieces"]),
        optimizer=OptimizerConfig(**opt),
        precision=PrecisionConfig(prop="fixed:10@5", update="fixed:12@5",
                                  dynamic=True),
    )


def test_criterion_8_run_determinism(tmp_path_factory):
    out = tmp_path_factory.mktemp("determinism")
    first = run(_dfx_config(out, "first"))
    second = run(_dfx_config(out, "second"))
    a = (first.output_dir / "summary.csv").read_bytes()
    b = (second.output_dir / "summary.csv").read_bytes()
    report("criterion 8", a == b,
           f"two dynamic 10/12 runs, summary rows {a.splitlines()[-1]!r} vs "
           f"{b.splitlines()[-1]!r}, byte-identical: {a == b}")


# ---------------------------------------------------------------------------
# criterion 9: IDX round-trip at full dataset scale
# ---------------------------------------------------------------------------

def _official_blobs():
    """Raw train/test IDX bytes: real files when present, else synthetic."""
    root = os.environ.get("LOWPREC_DATA")
    names = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte",
             "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")
    if root:
        paths = [Path(root) / n for n in names]
        if all(p.exists() for p in paths):
            return [p.read_bytes() for p in paths], "official files"
    ti, tl, vi, vl = synthesize_digits(60_000, 10_000, seed=0)
    blobs = [serialize_idx(ti), serialize_idx(tl.astype(np.uint8)),
             serialize_idx(vi), serialize_idx(vl.astype(np.uint8))]
    return blobs, "synthetic stand-in corpus"


def test_criterion_9_idx_round_trip_at_scale():
    blobs, source = _official_blobs()
    arrays = [parse_idx(b) for b in blobs]
    tr_img, tr_lbl, te_img, te_lbl = arrays

    shapes_ok = (
        tr_img.shape == (60_000, 28, 28) and tr_lbl.shape == (60_000,)
        and te_img.shape == (10_000, 28, 28) and te_lbl.shape == (10_000,)
        and tr_img.shape[1] * tr_img.shape[2] == 784
    )
    labels_ok = (set(tr_lbl.tolist()) == set(range(10))
                 and set(te_lbl.tolist()) == set(range(10)))
    bytes_ok = all(serialize_idx(a) == b for a, b in zip(arrays, blobs))
    report("criterion 9", shapes_ok and labels_ok and bytes_ok,
           f"{source}: 60000/10000 x 784 shapes: {shapes_ok}, "
           f"full label coverage: {labels_ok}, re-serialization byte-identical: {bytes_ok}")
