"""Central finite-difference gradient checks shared by the unit and acceptance suites."""
import numpy as np

from speckle_lab import nn
from speckle_lab.nn import Tensor

EPS = 1e-4
TOL = 1e-4


def relative_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def check(fn, arrays, seed=0, eps=EPS):
    """Max relative error between analytic and numeric gradients of ``fn``.

    ``fn`` maps float64 tensors to one output tensor, which is reduced to a
    scalar with a fixed random projection.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*tensors)
    proj = np.random.default_rng(seed).normal(size=out.shape)

    def scalar(values):
        return float(np.sum(fn(*[Tensor(v) for v in values]).data * proj))

    out.backward(proj)
    worst = 0.0
    for k, a in enumerate(arrays):
        numeric = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            plus = [x.copy() for x in arrays]
            minus = [x.copy() for x in arrays]
            plus[k][idx] += eps
            minus[k][idx] -= eps
            numeric[idx] = (scalar(plus) - scalar(minus)) / (2 * eps)
        analytic = tensors[k].grad if tensors[k].grad is not None else np.zeros_like(a)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def separated(rng, shape, spacing=1e-2):
    """Random values pairwise at least ``spacing`` apart, so max/ReLU kinks stay out of reach."""
    n = int(np.prod(shape))
    vals = (rng.permutation(n) - n / 2 + 0.5) * spacing
    return vals.reshape(shape)


def op_cases():
    """``(name, fn, arrays)`` triples: three random small shapes per differentiable op."""
    rng = np.random.default_rng(42)
    cases = []
    for i, (n, c, h, w, o, k, s, p) in enumerate([(2, 3, 5, 5, 4, 3, 1, 1), (1, 2, 7, 6, 3, 3, 2, 0),
                                                  (2, 2, 8, 8, 2, 7, 2, 3), (3, 4, 4, 5, 2, 1, 1, 0)]):
        cases.append((f"conv2d[{i}]",
                      lambda x, wt, b, s=s, p=p: nn.conv2d(x, wt, b, s, p),
                      [rng.normal(size=(n, c, h, w)), rng.normal(size=(o, c, k, k)),
                       rng.normal(size=o)]))
    for i, shape in enumerate([(4, 3, 6, 6), (2, 2, 3, 5), (5, 1, 4, 4)]):
        def bn(x, g, b, c=shape[1]):
            return nn.batchnorm2d(x, g, b, np.zeros(c), np.ones(c), True)
        cases.append((f"batchnorm2d[{i}]", bn,
                      [rng.normal(size=shape), rng.uniform(0.5, 1.5, shape[1]),
                       rng.normal(size=shape[1])]))
    for i, shape in enumerate([(2, 3, 4, 4), (1, 2, 5, 3), (3, 1, 2, 6)]):
        cases.append((f"relu[{i}]", nn.relu, [separated(rng, shape)]))
    for i, shape in enumerate([(2, 2, 6, 6), (1, 3, 5, 7), (2, 1, 4, 3)]):
        cases.append((f"maxpool2d[{i}]", nn.maxpool2d, [separated(rng, shape)]))
    for i, shape in enumerate([(2, 2, 5, 5), (1, 3, 4, 6), (2, 1, 2, 3)]):
        cases.append((f"avgpool2d[{i}]", nn.avgpool2d, [rng.normal(size=shape)]))
    for i, shape in enumerate([(2, 2, 3, 3), (1, 3, 2, 4), (2, 1, 1, 2)]):
        cases.append((f"upsample_nearest[{i}]", nn.upsample_nearest, [rng.normal(size=shape)]))
    for i, shape in enumerate([(2, 3, 4, 4), (1, 2, 5, 3), (4, 1, 2, 2)]):
        def drop(x, seed=i):
            return nn.dropout(x, 0.5, np.random.default_rng(seed), True)
        cases.append((f"dropout[{i}]", drop, [rng.normal(size=shape)]))
    for i, (ca, cb) in enumerate([(1, 2), (3, 1), (2, 2)]):
        cases.append((f"concat_channels[{i}]",
                      lambda a, b: nn.concat_channels([a, b]),
                      [rng.normal(size=(2, ca, 3, 3)), rng.normal(size=(2, cb, 3, 3))]))
    for i, shape in enumerate([(2, 3, 3), (4, 4), (1, 2, 2, 5)]):
        truth = rng.normal(size=shape)
        pred = truth + np.where(rng.random(shape) < 0.5, -1, 1) * rng.uniform(0.1, 1, shape)
        cases.append((f"mae_loss[{i}]", lambda x, t=truth: nn.mae_loss(x, t), [pred]))
    for i, shape in enumerate([(3,), (2, 2), (1, 2, 3, 1)]):
        cases.append((f"add[{i}]", nn.add, [rng.normal(size=shape), rng.normal(size=shape)]))
    return cases
