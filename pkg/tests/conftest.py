import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def naive_conv2d(x, w, bias=None, stride=1, padding=0, groups=1):
    """Seven nested loops; the reference every conv path is checked against."""
    N, C, H, W = x.shape
    C_out, cig, k, _ = w.shape
    cog = C_out // groups
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    out = np.zeros((N, C_out, Ho, Wo))
    for n in range(N):
        for o in range(C_out):
            g = o // cog
            for i in range(Ho):
                for j in range(Wo):
                    acc = 0.0
                    for c in range(cig):
                        for p in range(k):
                            for q in range(k):
                                r, s = i * stride + p - padding, j * stride + q - padding
                                if 0 <= r < H and 0 <= s < W:
                                    acc += x[n, g * cig + c, r, s] * w[o, c, p, q]
                    out[n, o, i, j] = acc + (0.0 if bias is None else bias[o])
    return out


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """``acceptance(number, passed, detail)`` prints one result line and keeps it for the summary."""
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, [])

    def record(number, passed, detail):
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        print(line)
        lines.append(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
