import numpy as np
import pytest

from fedgin import tensor as T

FD_STEP = 1e-4
FD_TOL = 1e-3


def fd_check(build, arrays, n_probes=10, seed=0, step=FD_STEP):
    """Compare autodiff gradients of ``build(*tensors)`` against central differences.

    ``build`` returns a Tensor of any shape; it is contracted with a fixed
    random direction to give the scalar under test.  Analytic gradients come
    from the float32 graph; the numeric side is evaluated in float64 so that
    rounding noise does not swamp the difference quotient.  Returns the worst
    ``|analytic - numeric| / max(1, |numeric|)`` over all probes.
    """
    rng = np.random.default_rng(seed)
    arrays = [np.array(a, dtype=np.float32).astype(np.float64) for a in arrays]
    leaves = [T.Tensor(a, requires_grad=True) for a in arrays]
    out = build(*leaves)
    direction = rng.standard_normal(out.shape)
    proj = T.sum_(T.mul(out, T.Tensor(direction)))
    T.backward(proj)
    analytic = [leaf.grad.copy() for leaf in leaves]

    def scalar(arrs):
        with T.precision(np.float64):
            o = build(*[T.Tensor(a) for a in arrs])
        assert o.data.dtype == np.float64
        return float(np.sum(o.data * direction))

    worst = 0.0
    for _ in range(n_probes):
        k = int(rng.integers(len(arrays)))
        idx = tuple(int(rng.integers(s)) for s in arrays[k].shape)
        plus = [a.copy() for a in arrays]
        minus = [a.copy() for a in arrays]
        plus[k][idx] += step
        minus[k][idx] -= step
        numeric = (scalar(plus) - scalar(minus)) / (2 * step)
        err = abs(float(analytic[k][idx]) - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
