"""Slow, obviously-correct reference implementations used as test oracles."""

M = 1 << 16


def weak_direct(block):
    """Weak sum straight from its definition over a 1-indexed block."""
    n = len(block)
    a = sum(block) % M
    b = sum((n - i + 1) * x for i, x in enumerate(block, start=1)) % M
    return a, b, a + M * b


def weak_rolled(buf, window):
    """Weak sums of every window, obtained by rolling byte by byte."""
    if len(buf) < window:
        return []
    a, b, _ = weak_direct(buf[:window])
    out = [a + M * b]
    for k in range(len(buf) - window):
        out_b, in_b = buf[k], buf[k + window]
        a = (a - out_b + in_b) % M
        b = (b - window * out_b + a) % M
        out.append(a + M * b)
    return out
