"""Independent brute-force references used by the unit and acceptance suites."""

import math

import numpy as np


def boundary_bruteforce(mask: np.ndarray) -> list[tuple[int, int]]:
    h, w = mask.shape
    out = []
    for i in range(h):
        for j in range(w):
            if not mask[i, j]:
                continue
            edge = i == 0 or j == 0 or i == h - 1 or j == w - 1
            if edge or not (mask[i - 1, j] and mask[i + 1, j] and mask[i, j - 1] and mask[i, j + 1]):
                out.append((i, j))
    return out


def percentile_linear(values: list[float], q: float) -> float:
    vals = sorted(values)
    rank = q / 100.0 * (len(vals) - 1)
    lo = math.floor(rank)
    hi = min(lo + 1, len(vals) - 1)
    return vals[lo] + (vals[hi] - vals[lo]) * (rank - lo)


def hd95_bruteforce(p: np.ndarray, g: np.ndarray) -> float:
    p, g = p.astype(bool), g.astype(bool)
    if not p.any() and not g.any():
        return 0.0
    if not p.any() or not g.any():
        return math.hypot(*p.shape)
    bp, bg = boundary_bruteforce(p), boundary_bruteforce(g)
    dists = []
    for a, b in ((bp, bg), (bg, bp)):
        for (i, j) in a:
            dists.append(min(math.hypot(i - k, j - l) for (k, l) in b))
    return percentile_linear(dists, 95.0)


def dice_count(p: np.ndarray, g: np.ndarray) -> float:
    inter = sum(1 for a, b in zip(p.flat, g.flat) if a and b)
    total = int(p.sum()) + int(g.sum())
    return 1.0 if total == 0 else 2 * inter / total


def iou_count(p: np.ndarray, g: np.ndarray) -> float:
    inter = sum(1 for a, b in zip(p.flat, g.flat) if a and b)
    union = sum(1 for a, b in zip(p.flat, g.flat) if a or b)
    return 1.0 if union == 0 else inter / union


def random_mask_pair(rng: np.random.Generator, max_size: int = 16):
    h = int(rng.integers(1, max_size + 1))
    w = int(rng.integers(1, max_size + 1))
    density_p, density_g = rng.uniform(0, 1, 2)
    p = (rng.random((h, w)) < density_p).astype(np.uint8)
    g = (rng.random((h, w)) < density_g).astype(np.uint8)
    return p, g


class ReluPattern:
    """Records the on/off pattern of every ReLU under ``modules``."""

    def __init__(self, modules):
        import torch

        self.pattern = []
        self.handles = [m.register_forward_hook(self._hook)
                        for root in modules for m in root.modules() if isinstance(m, torch.nn.ReLU)]

    def _hook(self, module, inputs, output):
        self.pattern.append(inputs[0] > 0)

    def capture(self, fn):
        self.pattern = []
        value = fn()
        return value, self.pattern

    def remove(self):
        for h in self.handles:
            h.remove()


def fd_check(loss_fn, params, n: int = 10, seed: int = 0, step: float = 1e-4, relu_modules=(), tol: float = 1e-3):
    """Worst relative gap between autodiff and central differences on ``n``
    randomly drawn scalar parameters. ``loss_fn`` must be float64.

    Central differences are only valid where the loss is smooth on
    [x - step, x + step]. When ``relu_modules`` is given, a draw that misses
    ``tol`` *and* has some ReLU inside them switching between the two probes
    is replaced by the next draw; the replaced draw must still agree within
    ``tol`` at ``step / 100``. Returns ``(worst, replaced, worst_replaced)``.
    """
    import torch

    for p in params:
        p.grad = None
    loss_fn().backward()
    gen = torch.Generator().manual_seed(seed)
    probe = ReluPattern(relu_modules)
    worst, replaced, worst_replaced, done = 0.0, 0, 0.0, 0
    try:
        while done < n:
            p = params[torch.randint(len(params), (1,), generator=gen).item()]
            flat = torch.randint(p.numel(), (1,), generator=gen).item()
            auto = p.grad.reshape(-1)[flat].item()
            with torch.no_grad():
                view = p.view(-1)
                view[flat] += step
                up, up_pattern = probe.capture(loss_fn)
                view[flat] -= 2 * step
                down, down_pattern = probe.capture(loss_fn)
                view[flat] += step
            fd = (up.item() - down.item()) / (2 * step)
            rel = abs(fd - auto) / max(abs(fd), abs(auto), 1e-10)
            kink = any(not torch.equal(a, b) for a, b in zip(up_pattern, down_pattern))
            if rel > tol and kink:
                replaced += 1
                fine = step / 100
                with torch.no_grad():
                    view[flat] += fine
                    up = loss_fn().item()
                    view[flat] -= 2 * fine
                    down = loss_fn().item()
                    view[flat] += fine
                fd = (up - down) / (2 * fine)
                worst_replaced = max(worst_replaced, abs(fd - auto) / max(abs(fd), abs(auto), 1e-10))
                continue
            worst = max(worst, rel)
            done += 1
    finally:
        probe.remove()
    return worst, replaced, worst_replaced
