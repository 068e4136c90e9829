import numpy as np

from floodcast import numerics as nx


def max_relative_error(fn, params, eps=1e-5, floor=1e-7):
    """Worst ``|analytic - numeric| / max(|analytic|, |numeric|, floor)`` over all entries."""
    nx.zero_grad(params)
    fn().backward()
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    numeric = nx.numerical_gradient(fn, params, eps)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
