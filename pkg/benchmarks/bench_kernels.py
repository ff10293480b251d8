"""Time the numba kernels against their numpy twins.

    python benchmarks/bench_kernels.py [--repeat 5] [--out results.txt]

Both paths are called directly, so the AFT_NUMBA flag does not matter here.
Each row also checks that the two paths agree.  Finally one training step of
the desk model runs under each backend in a subprocess, so the flag is read
at import time the way it is in real use.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from afterunet import kernels as K


def _cases(rng):
    x = rng.normal(size=(4, 16, 66, 66))
    cols = K.im2col_numpy(x, 3)
    pooled = rng.normal(size=(4, 16, 64, 64))
    _, arg = K.maxpool2_forward_numpy(pooled)
    grad = rng.normal(size=(4, 16, 32, 32))
    vol = rng.normal(size=(64, 64, 40))
    cx, cy, cz = (np.linspace(0, n - 1, m) for n, m in ((64, 80), (64, 80), (40, 100)))
    return [
        ("im2col 4x16x64x64 k3", K.im2col_numpy, K.im2col_numba, (x, 3)),
        ("col2im 4x16x64x64 k3", K.col2im_numpy, K.col2im_numba, (cols, 16, 66, 66, 3)),
        ("maxpool2 fwd 4x16x64x64", K.maxpool2_forward_numpy, K.maxpool2_forward_numba, (pooled,)),
        ("maxpool2 bwd 4x16x32x32", K.maxpool2_backward_numpy, K.maxpool2_backward_numba, (grad, arg)),
        ("trilinear 64x64x40 -> 80x80x100", K.trilinear_grid_numpy, K.trilinear_grid_numba, (vol, cx, cy, cz)),
    ]


def _best(fn, args, repeat):
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))


def _agree(a, b):
    if isinstance(a, tuple):
        return all(_agree(x, y) for x, y in zip(a, b))
    return np.allclose(a, b, rtol=1e-12, atol=1e-12)


STEP = """
import time, numpy as np
from afterunet.model import AFTerUNet, ModelConfig
from afterunet.training import Adam, train_step
from afterunet.volume import synth_dataset, sample_slice_group
cfg = ModelConfig(channels=(8, 16, 32), num_classes=3, image_size=(64, 64), n_a=4, heads=4, layers=2)
model = AFTerUNet(cfg); opt = Adam(model.named_parameters())
vol, lab = synth_dataset(1, (64, 64, 16), 3, seed=0)[0]
g = sample_slice_group(vol, 8, 4, 1, lab)
train_step(model, opt, g.slices, g.labels, 1e-4)
best = 1e9
for _ in range(REPEAT):
    t = time.perf_counter(); train_step(model, opt, g.slices, g.labels, 1e-4)
    best = min(best, time.perf_counter() - t)
print(best)
"""


def _train_step(flag, repeat):
    env = dict(os.environ, AFT_NUMBA=flag)
    out = subprocess.run([sys.executable, "-c", STEP.replace("REPEAT", str(repeat))],
                         env=env, capture_output=True, text=True, check=True)
    return float(out.stdout.strip())


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--out")
    ap.add_argument("--skip-step", action="store_true", help="skip the end-to-end training step")
    args = ap.parse_args(argv)

    rng = np.random.default_rng(0)
    rows = []
    for name, f_np, f_nb, fargs in _cases(rng):
        same = _agree(f_np(*fargs), f_nb(*fargs))  # also warms up the jit
        t_np, t_nb = _best(f_np, fargs, args.repeat), _best(f_nb, fargs, args.repeat)
        rows.append((name, t_np, t_nb, same))
    if not args.skip_step:
        t_np, t_nb = _train_step("0", args.repeat), _train_step("1", args.repeat)
        rows.append(("train step, desk model N_A=4", t_np, t_nb, None))

    width = max(len(r[0]) for r in rows)
    lines = [f"{'kernel':<{width}}  {'numpy ms':>9}  {'numba ms':>9}  {'speedup':>7}  agree",
             "-" * (width + 39)]
    for name, t_np, t_nb, same in rows:
        flag = "-" if same is None else ("yes" if same else "NO")
        lines.append(f"{name:<{width}}  {1e3 * t_np:9.2f}  {1e3 * t_nb:9.2f}  {t_np / t_nb:7.2f}  {flag}")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    return 0 if all(r[3] is not False for r in rows) else 1


if __name__ == "__main__":
    sys.exit(main())
