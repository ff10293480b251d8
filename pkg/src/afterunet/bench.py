"""Cost accounting for full 3D attention versus the inter/intra factorization.

Comparison counts are read from the attention counters while the real
attention code runs, then checked against the closed forms.  Memory figures
are analytic sizes of the materialized attention maps; an optional
``tracemalloc`` peak is reported alongside but never substituted for them.
"""
import tracemalloc
from dataclasses import dataclass

import numpy as np

from .axial import AFTBlock, count_attention
from .errors import AFTError, ConfigError
from .model import AFTerUNet
from .tensor import Tensor, no_grad


@dataclass
class AttnCostReport:
    grid: tuple
    comparisons_per_query_full: int
    comparisons_per_query_factorized: int
    attention_map_elements_full: int
    attention_map_elements_factorized: int
    reduction_ratio: float
    peak_bytes_full: int = None
    peak_bytes_factorized: int = None

    def to_kv(self):
        h, w, n = self.grid
        rows = [
            ("grid", f"{h}x{w}x{n}"),
            ("comparisons_per_query_full", self.comparisons_per_query_full),
            ("comparisons_per_query_factorized", self.comparisons_per_query_factorized),
            ("attention_map_elements_full", self.attention_map_elements_full),
            ("attention_map_elements_factorized", self.attention_map_elements_factorized),
            ("reduction_ratio", f"{self.reduction_ratio:.6f}"),
        ]
        if self.peak_bytes_full is not None:
            rows.append(("peak_bytes_full", self.peak_bytes_full))
            rows.append(("peak_bytes_factorized", self.peak_bytes_factorized))
        return "".join(f"{k}={v}\n" for k, v in rows)


def parse_grid(text):
    """``"16x16x8"`` -> ``(16, 16, 8)``."""
    try:
        h, w, n = (int(p) for p in text.lower().split("x"))
    except ValueError:
        raise ConfigError(f"grid must look like HxWxN, got {text!r}") from None
    if min(h, w, n) < 1:
        raise ConfigError(f"grid extents must be positive, got {text!r}")
    return h, w, n


def _run_block(mode, grid, heads, rng):
    h, w, n = grid
    width = 2 * heads
    block = AFTBlock(width, heads, np.random.default_rng(0), np.float64, mode=mode)
    z = Tensor(rng.normal(size=(n, h * w, width)))
    with count_attention() as counter, no_grad():
        block(z)
    return counter


def _peak(fn):
    tracemalloc.start()
    try:
        fn()
        return tracemalloc.get_traced_memory()[1]
    finally:
        tracemalloc.stop()


def count_comparisons(grid, heads=1, measure_peak=False, seed=0):
    """Run one full-attention block and one factorized block on ``grid``.

    Raises ``AFTError`` if the counters disagree with the closed forms
    ``H*W*N`` (full) and ``H*W + N`` (factorized), or if the materialized map
    sizes disagree with :func:`attention_memory`.
    """
    h, w, n = grid
    if min(h, w, n) < 1 or heads < 1:
        raise ConfigError(f"grid and heads must be positive, got {grid}, heads={heads}")
    rng = np.random.default_rng(seed)
    full = _run_block("full", grid, heads, rng)
    fact = _run_block("axial", grid, heads, rng)

    cpq_full = full.comparisons_per_query()
    # inter and intra each see every query once, so per-query counts add
    cpq_fact = fact.comparisons_per_query(("inter",)) + fact.comparisons_per_query(("intra",))
    maps_full, maps_fact = full.map_elements(), fact.map_elements()

    expect = attention_memory(grid, heads, 1)
    checks = [
        ("full comparisons", cpq_full, h * w * n),
        ("factorized comparisons", cpq_fact, h * w + n),
        ("full map elements", maps_full, expect["full"]),
        ("factorized map elements", maps_fact, expect["factorized"]),
    ]
    for what, got, want in checks:
        if got != want:
            raise AFTError(f"{what} on grid {grid}: counted {got}, closed form {want}")

    report = AttnCostReport(tuple(grid), cpq_full, cpq_fact, maps_full, maps_fact, cpq_full / cpq_fact)
    if measure_peak:
        report.peak_bytes_full = _peak(lambda: _run_block("full", grid, heads, rng))
        report.peak_bytes_factorized = _peak(lambda: _run_block("axial", grid, heads, rng))
    return report


def attention_memory(grid, heads, bytes_per_scalar=4):
    """Bytes held by attention maps: one row per query per pass."""
    h, w, n = grid
    tokens = h * w * n
    full = heads * tokens * tokens * bytes_per_scalar
    fact = heads * tokens * (h * w + n) * bytes_per_scalar
    return {"full": full, "factorized": fact, "ratio": full / fact}


def format_reports(reports, heads=8, bytes_per_scalar=4):
    header = ("grid", "cmp/query full", "cmp/query fact", "ratio",
              f"map MiB full (A={heads})", f"map MiB fact (A={heads})")
    rows = []
    for r in reports:
        mem = attention_memory(r.grid, heads, bytes_per_scalar)
        rows.append(("x".join(map(str, r.grid)), str(r.comparisons_per_query_full),
                     str(r.comparisons_per_query_factorized), f"{r.reduction_ratio:.2f}",
                     f"{mem['full'] / 2**20:.3f}", f"{mem['factorized'] / 2**20:.3f}"))
    return _table(header, rows)


def _table(header, rows):
    widths = [max(len(c) for c in col) for col in zip(header, *rows)]
    fmt = lambda r: "  ".join(c.ljust(wd) if i == 0 else c.rjust(wd) for i, (c, wd) in enumerate(zip(r, widths)))
    return "\n".join([fmt(header), "  ".join("-" * wd for wd in widths)] + [fmt(r) for r in rows]) + "\n"


# -- model profile ------------------------------------------------------------------

def _count(module):
    return sum(p.data.size for _, p in module.named_parameters())


def profile_model(cfg):
    """Parameter counts per module and analytic forward scratch for one group.

    Returns ``(rows, text)`` where rows is a list of ``(name, value)`` pairs.
    """
    model = AFTerUNet(cfg)
    itemsize = np.dtype(cfg.dtype).itemsize
    rows = [("encoder", _count(model.encoder))]
    t = model.transformer
    rows.append(("transformer.pos", t.pos.data.size))
    for i, block in enumerate(t.blocks):
        rows.append((f"transformer.blocks.{i}", _count(block)))
    rows.append(("transformer", _count(t)))
    rows.append(("decoder", _count(model.decoder)))
    rows.append(("total", _count(model)))

    h, w = cfg.image_size
    n, k = cfg.n_a, cfg.codec.kernel_size
    feats, cols, cin = 0, 0, cfg.in_channels
    for b, c in enumerate(cfg.channels):
        hb, wb = h >> b, w >> b
        feats += 2 * c * hb * wb * n
        cols = max(cols, max(cin, c) * k * k * hb * wb * n)
        cin = c
    grid = cfg.token_grid
    attn = attention_memory(grid, cfg.heads, itemsize)
    hl, wl, _ = grid
    attn_bytes = {"full": attn["full"], "axial": attn["factorized"],
                  "intra": cfg.heads * hl * wl * n * hl * wl * itemsize}[cfg.attention]
    scratch = [
        ("encoder feature maps (bytes)", feats * itemsize),
        ("largest im2col buffer (bytes)", cols * itemsize),
        (f"attention maps per block, {cfg.attention} (bytes)", attn_bytes),
        ("attention maps per block, full 3D (bytes)", attn["full"]),
    ]
    text = _table(("module", "parameters"), [(a, f"{b:,}") for a, b in rows])
    text += "\n" + _table(("forward scratch, one group", "estimate"), [(a, f"{b:,}") for a, b in scratch])
    return rows + scratch, text
