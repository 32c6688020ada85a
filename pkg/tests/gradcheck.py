"""Central finite differences for gradient tests."""

import numpy as np

STEP = 1e-5


def numeric_grad(f, x, step=STEP):
    """Central-difference gradient of scalar ``f`` at array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + step
        fp = f()
        x[i] = orig - step
        fm = f()
        x[i] = orig
        g[i] = (fp - fm) / (2 * step)
    return g


def rel_error(analytic, numeric):
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(n), 1e-8)
    return float(np.linalg.norm(a - n) / scale)


# -- random-point runners shared by the unit and acceptance suites -------------

KINK = 1e-3


def _labels(rng, n, C, min_classes=1):
    while True:
        y = rng.integers(0, C, size=n)
        if len(np.unique(y)) >= min_classes:
            return y


def check_cross_entropy(rng):
    from nsce.losses import cross_entropy

    C, n = int(rng.integers(2, 6)), int(rng.integers(1, 9))
    z = rng.normal(scale=3.0, size=(n, C))
    y = _labels(rng, n, C)
    return rel_error(cross_entropy(z, y)[1], numeric_grad(lambda: cross_entropy(z, y)[0], z))


def check_sparsity(rng):
    from nsce.losses import sparsity_regularizer

    d, C = int(rng.integers(2, 17)), int(rng.integers(1, 6))
    W = rng.normal(size=(d, C))
    while np.any(np.abs(W) < KINK):
        small = np.abs(W) < KINK
        W[small] = rng.normal(size=small.sum())
    return rel_error(sparsity_regularizer(W)[1], numeric_grad(lambda: sparsity_regularizer(W)[0], W))


def check_separation(rng):
    from nsce.losses import max_separation

    h, C = int(rng.integers(2, 17)), int(rng.integers(2, 6))
    n = int(rng.integers(2, 9))
    y = _labels(rng, n, C, min_classes=min(2, n))
    R = rng.normal(size=(n, h))
    absent = [c for c in range(C) if c not in set(y.tolist())]
    fallbacks = {c: rng.normal(size=h) for c in absent[: int(rng.integers(0, len(absent) + 1))]}
    return rel_error(max_separation(R, y, fallbacks)[1], numeric_grad(lambda: max_separation(R, y, fallbacks)[0], R))


def check_binary(rng):
    from nsce.losses import targeted_binary_loss

    C, n = int(rng.integers(2, 6)), int(rng.integers(2, 9))
    z = rng.normal(scale=2.0, size=(n, C))
    y = _labels(rng, n, C)
    all_pairs = [(m, k) for m in range(C) for k in range(C) if m != k]
    pick = rng.permutation(len(all_pairs))[: int(rng.integers(1, min(4, len(all_pairs)) + 1))]
    pairs = [all_pairs[i] for i in pick]
    renorm = bool(rng.integers(0, 2))
    f = lambda: targeted_binary_loss(z, y, pairs, renorm)[0]  # noqa: E731
    return rel_error(targeted_binary_loss(z, y, pairs, renorm)[1], numeric_grad(f, z))


def _random_model(rng, d, C, h):
    from nsce.trainer import Model

    model = Model.init(d, C, h, seed=int(rng.integers(2**31)))
    model.head.W[:] = rng.normal(size=model.head.W.shape)
    model.head.bias[:] = rng.normal(size=C)
    return model


def _kink_free(model, X):
    W = model.head.W
    if np.any(np.abs(W) < KINK):
        return False
    if model.adapter.enabled:
        pre = model.adapter.preactivation(X)
        if np.any(np.abs(pre) < KINK):
            return False
        rep = np.maximum(pre, 0)
        if np.any(np.linalg.norm(rep, axis=1) == 0):
            return False
    return True


def check_objective(rng, adapter=True):
    """The composed batch objective against every parameter, through the adapter."""
    from nsce.trainer import objective

    while True:
        d, C = int(rng.integers(2, 17)), int(rng.integers(2, 6))
        h = int(rng.integers(2, 9)) if adapter else 0
        n = int(rng.integers(2, 9))
        model = _random_model(rng, d, C, h)
        X = rng.normal(size=(n, d))
        y = _labels(rng, n, C, min_classes=2)
        if not _kink_free(model, X):
            continue
        width = model.head.W.shape[0]
        absent = [c for c in range(C) if c not in set(y.tolist())]
        fallbacks = {c: np.abs(rng.normal(size=width)) + 0.1 for c in absent}
        gamma = float(rng.choice([0.01, 0.5, 1.0]))
        _, grads = objective(model, X, y, fallbacks, gamma)
        params = model.parameters()
        f = lambda: objective(model, X, y, fallbacks, gamma)[0].total  # noqa: E731
        errs = [rel_error(grads[k], numeric_grad(f, params[k])) for k in sorted(params)]
        # the kink check used the unperturbed point; recheck nothing crossed it
        if _kink_free(model, X):
            return max(errs)


def check_replay_objective(rng):
    from nsce.trainer import replay_objective

    while True:
        d, C, h, n = int(rng.integers(2, 17)), int(rng.integers(2, 6)), int(rng.integers(2, 9)), 6
        model = _random_model(rng, d, C, h)
        X = rng.normal(size=(n, d))
        y = _labels(rng, n, C, min_classes=2)
        if not _kink_free(model, X):
            continue
        m, k = (int(c) for c in rng.permutation(C)[:2])
        pairs = [(m, k)]
        _, grads = replay_objective(model, X, y, pairs)
        params = model.parameters()
        f = lambda: replay_objective(model, X, y, pairs)[0]  # noqa: E731
        return max(rel_error(grads[key], numeric_grad(f, params[key])) for key in sorted(params))


CHECKS = {
    "cross_entropy": check_cross_entropy,
    "sparsity": check_sparsity,
    "separation": check_separation,
    "binary": check_binary,
    "objective_linear": lambda rng: check_objective(rng, adapter=False),
    "objective_adapter": check_objective,
    "replay_adapter": check_replay_objective,
}


def worst_error(name, points, seed=0):
    rng = np.random.default_rng(seed)
    return max(CHECKS[name](rng) for _ in range(points))
