"""Fast built-in checks against independent oracles; used by ``icontrast selftest``."""

from __future__ import annotations

import itertools
import logging
import math

import numpy as np

from . import contrast, vit
from .maskgrid import token_mask
from .numerics import Rng, finite_diff_grad, relative_error
from .sampler import fps2d, fps_oracle

log = logging.getLogger(__name__)


def _check_rng():
    # first outputs of SplitMix64 seeded with 1234567
    r = Rng(1234567)
    got = [r.next_u64() for _ in range(2)]
    assert got == [6457827717110365317, 3203168211198807973], got


def _check_fps():
    for bits in range(1, 1 << 9):
        m = np.array([(bits >> i) & 1 for i in range(9)]).reshape(3, 3)
        start = tuple(int(v) for v in np.argwhere(m)[0])
        for n in range(1, int(m.sum()) + 1):
            assert fps2d(m, n, start=start) == fps_oracle(m, n, start), (bits, n)


def _check_threshold():
    rng = Rng(5)
    for _ in range(50):
        m = (rng.uniform_array((8, 8)) < 0.5).astype(np.uint8)
        for beta in (0.0, 0.25, 0.5, 0.75, 1.0):
            got = token_mask(m, beta, 4)
            for r, c in itertools.product(range(2), range(2)):
                want = int(m[4 * r:4 * r + 4, 4 * c:4 * c + 4].sum() > beta * 16)
                assert got[r, c] == want
    assert token_mask(np.ones((4, 4)), 1.0, 4)[0, 0] == 0


def _check_info_nce():
    rng = Rng(9)
    q, pos, neg = rng.normal_array(8), rng.normal_array((3, 8)), rng.normal_array((5, 8))
    tau = 0.2
    unit = lambda v: v / math.sqrt(float(v @ v))  # noqa: E731
    qn = unit(q)
    want = 0.0
    for p in pos:
        num = math.exp(float(qn @ unit(p)) / tau)
        den = num + sum(math.exp(float(qn @ unit(k)) / tau) for k in neg)
        want -= math.log(num / den)
    want /= len(pos)
    assert abs(contrast.info_nce(q, pos, neg, tau) - want) < 1e-12
    same = np.ones((4, 8))
    assert abs(contrast.info_nce(np.ones(8), same[:1], same, 0.1) - math.log(5)) < 1e-12


def _check_weights():
    for g in (0.5, 1.0, 2.0):
        w = contrast.layer_weights(4, g)
        assert abs(w.sum() - 1) < 1e-12 and np.all(np.diff(w) > 0)
    assert np.allclose(contrast.layer_weights(4, 0.0), 0.25)


def _check_vit_grad():
    cfg = vit.ViTConfig(height=8, width=8, patch=4, dim=8, layers=1, heads=2)
    params = vit.init_params(cfg, Rng(1), std=0.3)
    images = Rng(2).uniform_array((1, 8, 8, 3))
    w = Rng(3).normal_array((1, cfg.n_tokens, cfg.dim))

    def f(x):
        p = dict(params, **{"blk1.qkv_w": x})
        return float((vit.vit_forward(images, p, cfg).outputs[0][:, 1:] * w).sum())

    rec = vit.vit_forward(images, params, cfg)
    g = vit.vit_backward([w], None, rec, params)["blk1.qkv_w"]
    assert relative_error(g, finite_diff_grad(f, params["blk1.qkv_w"])) < 1e-6


CHECKS = {
    "rng reference stream": _check_rng,
    "fps vs oracle (all 3x3 masks)": _check_fps,
    "token threshold vs brute force": _check_threshold,
    "info_nce vs scalar loop": _check_info_nce,
    "layer weights": _check_weights,
    "vit gradient vs finite differences": _check_vit_grad,
}


def run_selftest() -> list[str]:
    """Run every check, log one line each, and return the names that failed."""
    failures = []
    for name, check in CHECKS.items():
        try:
            check()
        except Exception as exc:  # report every failure, keep going
            failures.append(name)
            log.error("FAIL %s: %r", name, exc)
        else:
            log.info("ok   %s", name)
    return failures
