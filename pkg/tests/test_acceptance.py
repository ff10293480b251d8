"""Acceptance suite: one PASS/FAIL line per criterion.

Each test appends its verdict to ``RESULTS``; ``conftest.py`` prints the
lines in the terminal summary, and running this file directly prints them
too.  The synthetic overfit and ablation runs share one module-scoped
training run at N_A=4 and take a few minutes on one core.
"""
import itertools
import time

import numpy as np
import pytest

from afterunet.axial import attention_full3d, attention_inter, attention_intra
from afterunet.bench import count_comparisons
from afterunet.gradcheck import grad_check
from afterunet.losses import combined_loss, dsc, evaluate, predict_volume
from afterunet.model import AFTerUNet, ModelConfig
from afterunet import tensor as T
from afterunet.tensor import Tensor, no_grad
from afterunet.training import Adam, TrainConfig, fit, load_checkpoint, save_checkpoint, train_epoch
from afterunet.volume import Volume, sample_slice_group, synth_dataset

RESULTS = []


def report(n, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


# -- 1. gradient suite ------------------------------------------------------------

def _op_cases(rng):
    def t(*shape):
        return Tensor(rng.normal(size=shape), requires_grad=True)

    x4, w4 = t(2, 3, 6, 6), t(4, 3, 3, 3)
    b4 = t(4)
    p = t(2, 3, 6, 8)
    a, b = t(3, 4), t(4, 5)
    m = t(3, 5, 4)
    g, be = t(4), t(4)
    gi, bi = t(3), t(3)
    lw, lb = t(6, 4), t(6)
    v = t(2, 3, 4)
    s = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)
    proj = lambda shape: rng.normal(size=shape)
    P1, P2, P3 = proj((2, 4, 6, 6)), proj((2, 3, 3, 4)), proj((2, 3, 12, 16))
    R1, R2, R3, R4 = proj((4, 15)), proj((2, 3, 4)), proj((2, 3, 4)), proj((3, 5, 4))
    R5 = proj((2, 3, 6, 6))
    lab = rng.integers(0, 3, size=(4, 4, 2))
    logits = t(3, 4, 4, 2)
    return {
        "add/mul/div/pow": (lambda: ((a * a + a) / (s * 2.0) + s ** 1.5).sum(), [a, s]),
        "exp/log/neg": (lambda: (T.exp(-a) + T.log(s)).sum(), [a, s]),
        "relu": (lambda: (T.relu(a) * a).sum(), [a]),
        "matmul": (lambda: (T.matmul(a, b) ** 2).sum(), [a, b]),
        "transpose/reshape": (lambda: (T.reshape(T.transpose(m, (2, 0, 1)), (4, 15)) * R1).sum(), [m]),
        "getitem/concat": (lambda: (T.concat([m[:, 1:3], m[:, :1]], axis=1) ** 2).sum(), [m]),
        "sum/mean": (lambda: (T.tsum(m, axis=1) ** 2).sum() + T.mean(m * m), [m]),
        "linear": (lambda: (T.linear(m, lw, lb) ** 2).sum(), [m, lw, lb]),
        "softmax": (lambda: (T.softmax(v, axis=-1) * R2).sum(), [v]),
        "log_softmax": (lambda: (T.log_softmax(v, axis=1) * R3).sum(), [v]),
        "layer_norm": (lambda: (T.layer_norm(m, g, be, 1e-5) * R4).sum(), [m, g, be]),
        "instance_norm": (lambda: (T.instance_norm(x4, gi, bi, 1e-5) * R5).sum(), [x4, gi, bi]),
        "conv2d": (lambda: (T.conv2d(x4, w4, b4, padding=1) * P1).sum(), [x4, w4, b4]),
        "maxpool2": (lambda: (T.maxpool2(p) * P2).sum(), [p]),
        "upsample2": (lambda: (T.upsample2(p) * P3).sum(), [p]),
        "dice+ce loss": (lambda: combined_loss(logits, lab), [logits]),
    }


def test_criterion_1_gradients():
    rng = np.random.default_rng(0)
    start = time.perf_counter()
    worst_op, worst_name = 0.0, ""
    for name, (f, params) in _op_cases(rng).items():
        err = grad_check(f, params)
        if err > worst_op:
            worst_op, worst_name = err, name

    cfg = ModelConfig(channels=(4, 8), num_classes=3, image_size=(16, 16), n_a=2, heads=2, layers=2,
                      dtype="float64", seed=1)
    model = AFTerUNet(cfg)
    x = Tensor(rng.normal(size=(1, 16, 16, 2)), requires_grad=True)
    labels = rng.integers(0, 3, size=(16, 16, 2))
    params = [("input", x)] + list(model.named_parameters())
    # a smaller step keeps central differences from straddling ReLU / max-pool kinks
    model_err = grad_check(lambda: combined_loss(model(x), labels), params, h=1e-6)
    n_params = sum(p.data.size for _, p in params)
    elapsed = time.perf_counter() - start
    ok = worst_op < 1e-4 and model_err < 1e-4 and elapsed < 300
    report(1, ok, f"max op error {worst_op:.2e} ({worst_name}), composed model error {model_err:.2e} "
                  f"over {n_params} coordinates (C_L=8, 16x16, N_A=2, L=2, f64), "
                  f"{elapsed:.1f}s (limits 1e-4, 300s)")


# -- 2. attention oracle ------------------------------------------------------------

def test_criterion_2_oracle_equivalence():
    rng = np.random.default_rng(2)
    worst_intra = worst_inter = 0.0
    for _ in range(100):
        a, ch = rng.integers(1, 4), rng.integers(1, 5)
        h, w, n = rng.integers(1, 6), rng.integers(1, 6), rng.integers(1, 9)
        q, k, v = (rng.normal(scale=rng.uniform(0.2, 3.0), size=(a, ch, h, w, 1)) for _ in range(3))
        diff = np.abs(attention_intra(q, k, v).data - attention_full3d(q, k, v).data).max()
        worst_intra = max(worst_intra, diff)
        q, k, v = (rng.normal(scale=rng.uniform(0.2, 3.0), size=(a, ch, 1, 1, n)) for _ in range(3))
        diff = np.abs(attention_inter(q, k, v).data - attention_full3d(q, k, v).data).max()
        worst_inter = max(worst_inter, diff)
    ok = worst_intra <= 1e-10 and worst_inter <= 1e-10
    report(2, ok, f"100 instances each: max |intra - full3d| at N_A=1 = {worst_intra:.1e}, "
                  f"max |inter - full3d| at H=W=1 = {worst_inter:.1e} (limit 1e-10)")


# -- 3. complexity counters ---------------------------------------------------------

def test_criterion_3_complexity():
    grids = list(itertools.product((1, 2, 4, 8, 16), (1, 2, 4, 8, 16), (1, 2, 4, 8)))
    bad = []
    for g in grids:
        h, w, n = g
        r = count_comparisons(g)
        if (r.comparisons_per_query_full, r.comparisons_per_query_factorized) != (h * w * n, h * w + n):
            bad.append(g)
    head = count_comparisons((16, 16, 8))
    ok = not bad and (head.comparisons_per_query_full, head.comparisons_per_query_factorized) == (2048, 264)
    report(3, ok, f"{len(grids) - len(bad)}/{len(grids)} grids match closed forms; 16x16x8: "
                  f"{head.comparisons_per_query_factorized} vs {head.comparisons_per_query_full} "
                  f"per query (ratio {head.reduction_ratio:.2f}x)")


# -- 4. sampling formula --------------------------------------------------------------

SAMPLING_TABLE = [  # (d, N_A, N_f, D, expected a_n)
    (10, 8, 1, 40, [6, 7, 8, 9, 10, 11, 12, 13]),
    (0, 8, 1, 40, [0, 0, 0, 0, 0, 1, 2, 3]),
    (1, 8, 1, 40, [0, 0, 0, 0, 1, 2, 3, 4]),
    (39, 8, 1, 40, [35, 36, 37, 38, 39, 39, 39, 39]),
    (37, 8, 1, 40, [33, 34, 35, 36, 37, 38, 39, 39]),
    (20, 8, 2, 40, [12, 14, 16, 18, 20, 22, 24, 26]),
    (3, 8, 2, 40, [0, 0, 0, 1, 3, 5, 7, 9]),
    (35, 8, 3, 40, [23, 26, 29, 32, 35, 38, 39, 39]),
    (5, 4, 1, 12, [3, 4, 5, 6]),
    (0, 4, 1, 12, [0, 0, 0, 1]),
    (11, 4, 1, 12, [9, 10, 11, 11]),
    (6, 4, 4, 12, [0, 2, 6, 10]),
    (2, 2, 1, 5, [1, 2]),
    (4, 2, 1, 5, [3, 4]),
    (0, 2, 3, 5, [0, 0]),
    (3, 6, 1, 4, [0, 1, 2, 3, 3, 3]),
    (0, 8, 1, 3, [0, 0, 0, 0, 0, 1, 2, 2]),
    (2, 8, 2, 3, [0, 0, 0, 0, 2, 2, 2, 2]),
    (7, 1, 1, 9, [7]),
    (0, 1, 5, 1, [0]),
]


def test_criterion_4_sampling():
    hits = 0
    clamped = sum(d - n_f * (n_a // 2) < 0 or d + n_f * (n_a - 1 - n_a // 2) > depth - 1
                  for d, n_a, n_f, depth, _ in SAMPLING_TABLE)
    for d, n_a, n_f, depth, want in SAMPLING_TABLE:
        # encode the slice index in the voxel values to check the gathered slices too
        vol = Volume(np.broadcast_to(np.arange(depth, dtype=np.float32), (1, 2, 2, depth)))
        group = sample_slice_group(vol, d, n_a, n_f)
        got = [int(i) for i in group.indices]
        hits += got == want and group.slices[0, 0, 0].tolist() == [float(i) for i in want]
    report(4, hits == len(SAMPLING_TABLE), f"{hits}/{len(SAMPLING_TABLE)} (d, N_A, N_f, D) cases match "
                                           f"exactly, {clamped} of them clamped at a boundary")


# -- 5. DSC ---------------------------------------------------------------------------

def test_criterion_5_dsc():
    rng = np.random.default_rng(5)
    sym = all(dsc(a, b) == dsc(b, a) for a, b in
              (rng.random((2, 8, 8, 3)) < rng.uniform(0.05, 0.9) for _ in range(200)))
    m = np.zeros((6, 6), bool)
    m[1:3, 1:4] = True
    disjoint = np.zeros_like(m)
    disjoint[4:, 4:] = True
    a = np.zeros(8, bool)  # |a| = |b| = 4, overlap 2
    a[:4] = True
    b = np.zeros(8, bool)
    b[2:6] = True
    checks = {
        "symmetry (200 random pairs)": sym,
        "dsc(m, m) = 1": dsc(m, m) == 1.0,
        "disjoint = 0": dsc(m, disjoint) == 0.0,
        "half overlap = 0.5": dsc(a, b) == 0.5,
    }
    report(5, all(checks.values()), ", ".join(f"{k}: {'ok' if v else 'WRONG'}" for k, v in checks.items()))


# -- 6 and 7. synthetic overfit and ablation ---------------------------------------------

DESK = dict(channels=(8, 16, 32), num_classes=3, image_size=(64, 64), heads=4, layers=2, n_f=1, seed=0)
DESK_TRAIN = TrainConfig(epochs=100, phase1_epochs=80, lr_phase1=5e-4, lr_phase2=5e-5, seed=0)


@pytest.fixture(scope="module")
def synth():
    return synth_dataset(4, (64, 64, 32), 3, seed=0)


def _probe_groups(dataset, n_a):
    return [sample_slice_group(v, d, n_a, 1, lab) for v, lab in dataset for d in range(2, 32, 4)]


def _probe_loss(model, groups):
    with no_grad():
        return float(np.mean([combined_loss(model(g.slices), g.labels).data for g in groups]))


def _train(dataset, n_a, probe_epochs=0):
    model = AFTerUNet(ModelConfig(n_a=n_a, **DESK))
    opt = Adam.from_config(model, DESK_TRAIN)
    groups = _probe_groups(dataset, n_a)
    start = time.perf_counter()
    probe, raw = [_probe_loss(model, groups)], []
    for epoch in range(probe_epochs):
        raw.append(train_epoch(model, opt, dataset, epoch, DESK_TRAIN))
        probe.append(_probe_loss(model, groups))
    raw += fit(model, dataset, DESK_TRAIN, opt=opt, start_epoch=probe_epochs, echo=None)
    train_time = time.perf_counter() - start
    result = evaluate(model, dataset)
    return {"model": model, "probe": probe, "raw": raw, "train_time": train_time, "result": result}


@pytest.fixture(scope="module")
def run_na4(synth):
    return _train(synth, 4, probe_epochs=20)


def test_criterion_6_overfit(run_na4):
    probe, res = run_na4["probe"], run_na4["result"]
    steps = np.diff(probe)
    decreasing = bool((steps < 0).all())
    ok = decreasing and res["mean"] >= 0.90
    per_class = ", ".join(f"{k} {v:.3f}" for k, v in res["per_class"].items())
    report(6, ok, f"probe loss {probe[0]:.4f} -> {probe[-1]:.4f} over 20 epochs, strictly decreasing: "
                  f"{decreasing} (largest step {steps.max():+.2e}); final mean DSC {res['mean']:.3f} "
                  f"({per_class}), limit 0.90; training {run_na4['train_time']:.0f}s on 1 core")


def test_criterion_7_ablation(synth, run_na4):
    single = _train(synth, 1)
    r4, r1 = run_na4["result"], single["result"]
    ok = r4["mean"] >= r1["mean"] - 0.02
    per_class = "; ".join(f"{k}: N_A=4 {r4['per_class'][k]:.3f} vs N_A=1 {r1['per_class'][k]:.3f}"
                          for k in r4["per_class"])
    report(7, ok, f"mean DSC N_A=4 {r4['mean']:.3f} vs N_A=1 {r1['mean']:.3f} (need >= N_A=1 - 0.02); "
                  f"{per_class} (class_1 is the axially elongated organ)")


# -- 8. determinism and persistence ------------------------------------------------------

def test_criterion_8_determinism(tmp_path):
    data = synth_dataset(3, (16, 16, 8), 3, seed=8)
    mcfg = ModelConfig(channels=(4, 8), num_classes=3, image_size=(16, 16), n_a=2, heads=2, layers=1, seed=8)
    tcfg = TrainConfig(epochs=3, phase1_epochs=2, lr_phase1=1e-3, lr_phase2=1e-4, seed=8)

    paths = [tmp_path / "a.aftc", tmp_path / "b.aftc"]
    hists = [fit(AFTerUNet(mcfg), data, tcfg, checkpoint_path=p, echo=None) for p in paths]
    identical = paths[0].read_bytes() == paths[1].read_bytes() and hists[0] == hists[1]

    model, opt, epoch = load_checkpoint(paths[0], mcfg, tcfg)
    save_checkpoint(tmp_path / "c.aftc", model, opt, epoch)
    roundtrip = (tmp_path / "c.aftc").read_bytes() == paths[0].read_bytes()

    part = AFTerUNet(mcfg)
    resumed = fit(part, data, tcfg, stop_epoch=1, checkpoint_path=tmp_path / "r.aftc", echo=None)
    model, opt, epoch = load_checkpoint(tmp_path / "r.aftc", mcfg, tcfg)
    resumed += fit(model, data, tcfg, opt=opt, start_epoch=epoch, checkpoint_path=tmp_path / "r.aftc", echo=None)
    resume_ok = resumed == hists[0] and (tmp_path / "r.aftc").read_bytes() == paths[0].read_bytes()

    report(8, identical and roundtrip and resume_ok,
           f"same-seed checkpoints byte-identical: {identical}; save/load/save byte-identical: {roundtrip}; "
           f"1 + 2 epoch resume equals 3-epoch run (losses and bytes): {resume_ok}")


# -- 9. assembly ---------------------------------------------------------------------

def test_criterion_9_assembly():
    cfg = ModelConfig(channels=(4, 8), num_classes=3, image_size=(16, 16), n_a=4, heads=2, layers=1,
                      dtype="float64", seed=9)
    model = AFTerUNet(cfg)
    vol, _ = synth_dataset(1, (16, 16, 7), 3, seed=9)[0]
    pred = predict_volume(model, vol)
    depth_ok = pred.labels.shape == (16, 16, 7)
    matches = 0
    with no_grad():
        for d in range(vol.depth):
            group = sample_slice_group(vol, d, cfg.n_a, cfg.n_f)
            logits = model(group.slices.astype(np.float64)).data
            matches += np.array_equal(pred.labels[..., d], logits[..., cfg.n_a // 2].argmax(0))
    report(9, depth_ok and matches == vol.depth,
           f"D=7 input -> {pred.labels.shape[2]} slices; {matches}/7 equal argmax of the middle map "
           f"(index {cfg.n_a // 2} of N_A={cfg.n_a})")


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q", "-s"]))
