"""Finite-difference oracles shared by the unit and acceptance suites."""

import numpy as np

from morphoformer import tensor as T
from morphoformer.tensor import Tensor

STEP = 1e-5
TOL = 1e-4
FLOOR = 1e-6


def rel_err(a, b, floor=FLOOR):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = np.maximum(np.abs(a), np.abs(b))
    big = scale > floor
    if not big.any():
        return 0.0
    return float(np.max(np.abs(a - b)[big] / scale[big]))


def check_op(fn, arrays, rng, step=STEP):
    """Worst relative error between autodiff and central differences of sum(fn(*x) * R)."""
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*leaves)
    weights = rng.normal(size=out.shape)

    def scalar():
        return float(np.sum(fn(*[Tensor._wrap(l.data) for l in leaves]).data * weights))

    with T.Tape() as tape:
        out = fn(*leaves)
        root = T.tsum(T.mul(out, weights))
    grads = T.backward(tape, root)
    worst = 0.0
    for leaf in leaves:
        num = T.numerical_grad(scalar, leaf.data, step)
        ana = grads.get(leaf, np.zeros(leaf.shape))
        worst = max(worst, rel_err(ana, num))
        # entries below the floor must still agree in absolute terms
        small = np.maximum(np.abs(ana), np.abs(num)) <= FLOOR
        if np.max(np.abs(ana - num)[small], initial=0.0) > 1e-8:
            return np.inf
    return worst


def _away_from(x, point, gap):
    """Push entries out of (point - gap, point + gap) so kinks are not straddled."""
    near = np.abs(x - point) < gap
    x[near] = point + np.where(x[near] >= point, gap, -gap)
    return x


def _shape(rng, nd=2, lo=1, hi=4):
    return tuple(int(s) for s in rng.integers(lo, hi + 1, size=nd))


def _bcast_pair(rng):
    s = _shape(rng, 2)
    other = tuple(1 if rng.random() < 0.3 else d for d in s)
    return (s, other) if rng.random() < 0.5 else (other, s)


def case_generators():
    """name -> (rng -> input arrays, differentiable fn)."""
    n = lambda rng, s: rng.normal(size=s)  # noqa: E731
    gens = {}

    def binary(op):
        def make(rng):
            a, b = _bcast_pair(rng)
            return [n(rng, a), n(rng, b)]
        return make, op

    gens["add"] = binary(T.add)
    gens["sub"] = binary(T.sub)
    gens["mul"] = binary(T.mul)
    gens["scale"] = (lambda rng: [n(rng, _shape(rng))], lambda a: T.scale(a, 1.7))
    gens["sigmoid"] = (lambda rng: [3 * n(rng, _shape(rng))], T.sigmoid)
    gens["relu"] = (lambda rng: [_away_from(n(rng, _shape(rng)), 0.0, 1e-3)], T.relu)
    gens["gelu"] = (lambda rng: [3 * n(rng, _shape(rng))], T.gelu)
    gens["tanh"] = (lambda rng: [2 * n(rng, _shape(rng))], T.tanh)
    gens["exp"] = (lambda rng: [n(rng, _shape(rng))], T.exp)
    gens["log"] = (lambda rng: [rng.uniform(0.2, 3.0, size=_shape(rng))], T.log)

    def mm(rng):
        m, k, p = _shape(rng, 3)
        if rng.random() < 0.5:
            return [n(rng, (m, k)), n(rng, (k, p))]
        b = int(rng.integers(1, 3))
        return [n(rng, (b, m, k)), n(rng, (b, k, p)) if rng.random() < 0.5 else n(rng, (k, p))]

    gens["matmul"] = (mm, T.matmul)
    gens["linear"] = (lambda rng: (lambda m, k, p: [n(rng, (m, k)), n(rng, (k, p)), n(rng, (p,))])(*_shape(rng, 3)),
                      T.linear)

    def ln(rng):
        s = _shape(rng, 2, 1, 3) + (int(rng.integers(2, 7)),)
        d = s[-1]
        return [n(rng, s), 1 + 0.3 * n(rng, (d,)), 0.3 * n(rng, (d,))]

    gens["layernorm"] = (ln, T.layernorm)
    gens["softmax"] = (lambda rng: [2 * n(rng, _shape(rng, 2, 1, 5))], T.softmax)

    def hub(rng):
        s = _shape(rng)
        beta = float(rng.uniform(0.3, 2.0))
        p, t = n(rng, s) * 2, n(rng, s) * 2
        r = _away_from(p - t, beta, 1e-3)
        r = _away_from(r, -beta, 1e-3)
        return [t + r, t, np.array(beta)]

    gens["huber"] = (hub, lambda p, t, beta: T.huber(p, t, float(beta.data)))
    gens["sum"] = (lambda rng: [n(rng, _shape(rng, 3))], lambda a: T.tsum(a, axis=1))
    gens["mean"] = (lambda rng: [n(rng, _shape(rng, 3))], lambda a: T.mean(a, axis=(0, 2)))
    gens["reshape"] = (lambda rng: [n(rng, (2, 3, 4))], lambda a: T.reshape(a, (4, 6)))
    gens["transpose"] = (lambda rng: [n(rng, _shape(rng, 3))], lambda a: T.transpose(a, (2, 0, 1)))
    gens["getitem"] = (lambda rng: [n(rng, (4, 5))], lambda a: a[1:3, ::2])
    gens["take"] = (lambda rng: [n(rng, (5, 3))], lambda a: T.take(a, np.array([[0, 4], [4, 2]]), axis=0))
    gens["concat"] = (lambda rng: [n(rng, (2, 3)), n(rng, (2, 2))], lambda a, b: T.concat([a, b], axis=1))
    gens["stack"] = (lambda rng: [n(rng, (2, 3)), n(rng, (2, 3))], lambda a, b: T.stack([a, b], axis=1))
    gens["roll"] = (lambda rng: [n(rng, (4, 5, 2))], lambda a: T.roll(a, (-2, 3), (0, 1)))
    return gens


def op_gradient_report(cases=100, seed=0):
    """Worst relative error per op over ``cases`` random instances."""
    out = {}
    for name, (make, fn) in case_generators().items():
        rng = np.random.default_rng([seed, len(name), sum(map(ord, name))])
        worst = 0.0
        for _ in range(cases):
            arrays = make(rng)
            if name == "huber":
                worst = max(worst, check_op(lambda p, t, fn=fn, b=arrays[2]: fn(p, t, Tensor._wrap(b)),
                                            arrays[:2], rng))
            else:
                worst = max(worst, check_op(fn, arrays, rng))
        out[name] = worst
    return out


def activate_relus(model, value=1.0):
    """Move ReLU pre-activations off the kink so central differences do not straddle it."""
    for name in ("dec.h.b", "sur.fc2.b", "amge.sar.fc1.b", "amge.opt.fc1.b", "amge.dem.fc1.b"):
        if name in model.params:
            model.params[name].data[...] = value
    return model


def model_gradient_check(model, x, target, fraction=0.01, rng=None, min_per_param=1, lambda_c=0.2, root="loss"):
    """Autodiff vs central differences on sampled parameter coordinates.

    ``root="loss"`` differentiates the full training loss; ``root="outputs"`` a fixed random
    weighting of the three prediction heads, which keeps the root O(1). One ulp of the root over
    2 * STEP is the oracle's resolution, so a root near 10 cannot meet TOL just above FLOOR.

    Returns (worst relative error, number of coordinates probed, number skipped as below the floor).
    """
    from morphoformer.training import total_loss
    rng = rng or np.random.default_rng(0)
    p = model.params
    lv_h, lv_f = p["loss.log_var_h"], p["loss.log_var_f"]
    if root == "outputs":
        heads = ("h_pred", "lambda_pred", "h_from_bf")
        out = model.forward(x)
        weights = [rng.normal(size=getattr(out, h).shape) for h in heads]

    def build():
        out = model.forward(x)
        if root == "outputs":
            terms = [T.tsum(T.mul(getattr(out, h), w)) for h, w in zip(heads, weights)]
            return terms[0] + terms[1] + terms[2]
        return total_loss(out, target, lv_h, lv_f, lambda_c)[0]

    def loss_value():
        return float(build().data)

    with T.Tape() as tape:
        loss = build()
    grads = T.backward(tape, loss)
    worst, probed, skipped = 0.0, 0, 0
    for name, t in p.items():
        k = max(min_per_param, int(round(fraction * t.size)))
        coords = rng.choice(t.size, size=min(k, t.size), replace=False)
        num = T.numerical_grad(loss_value, t.data, STEP, coords).reshape(-1)[coords]
        ana = grads.get(t, np.zeros(t.shape)).reshape(-1)[coords]
        big = np.maximum(np.abs(ana), np.abs(num)) > FLOOR
        skipped += int((~big).sum())
        probed += len(coords)
        if big.any():
            worst = max(worst, rel_err(ana[big], num[big]))
    for t in p.values():
        t.grad = None
    return worst, probed, skipped


TINY_RUN = {
    "seed": 3,
    "out_dir": "run",
    "preset": "desk",
    "model": {"d0": 24, "d": 12},
    "dataset": {"n_cities": 2, "grid_size": 40, "r0": 7.0},
    "train": {"epochs": 2, "batch_size": 16, "samples_per_epoch": 32, "max_val_samples": 32},
    "eval": {"seeds": [0, 1, 2]},
}


def run_pipeline(root, config=None, steps=None):
    """Run the CLI end to end inside ``root``; returns {relative path: bytes} of everything written."""
    import json
    import os

    from morphoformer.cli import main

    config = config or TINY_RUN
    steps = steps or ["generate", "split", "prior", "train", "eval", "gate-stats", "leakage-audit"]
    cwd = os.getcwd()
    os.chdir(root)
    try:
        with open("config.json", "w", encoding="utf-8") as f:
            json.dump(config, f)
        for step in steps:
            code = main([step, "--config", "config.json"])
            if code != 0:
                raise AssertionError(f"`{step}` exited with {code}")
        files = {}
        for dirpath, _, names in os.walk("run"):
            for n in names:
                p = os.path.join(dirpath, n)
                with open(p, "rb") as f:
                    files[p] = f.read()
        return files
    finally:
        os.chdir(cwd)
