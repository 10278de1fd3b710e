import numpy as np


def synthetic_scene(height, width, seed=0):
    """Procedural RGB scene (3×H×W in [0.05, 0.95]): gradient sky, blocks, discs, texture."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width] / max(height, width)
    img = np.empty((3, height, width))
    base = rng.uniform(0.3, 0.8, 3)
    tilt = rng.uniform(-0.3, 0.3, (3, 2))
    for c in range(3):
        img[c] = base[c] + tilt[c, 0] * yy + tilt[c, 1] * xx
    for _ in range(6):
        h, w = rng.integers(height // 8, height // 2), rng.integers(width // 8, width // 2)
        y, x = rng.integers(0, height - h), rng.integers(0, width - w)
        img[:, y : y + h, x : x + w] = rng.uniform(0.05, 0.95, (3, 1, 1))
    for _ in range(4):
        cy, cx, r = rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0.05, 0.2)
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        img[:, mask] = rng.uniform(0.05, 0.95, (3, 1))
    img += 0.05 * np.sin(40 * xx + 7 * yy)[None]
    return np.clip(img, 0.05, 0.95)


def fd_gradient_check(loss_fn, tensors, n_samples=20, step=1e-3, seed=0):
    """Compare autograd against central differences on randomly chosen entries.

    ``loss_fn()`` must return a scalar tensor computed from ``tensors`` (float64
    leaves with requires_grad).  Returns a list of (analytic, numeric, rel_err).
    """
    import torch

    for t in tensors:
        t.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    gen = np.random.default_rng(seed)
    sizes = np.array([t.numel() for t in tensors])
    results = []
    for _ in range(n_samples):
        which = int(gen.choice(len(tensors), p=sizes / sizes.sum()))
        t = tensors[which]
        flat = t.detach().view(-1)
        idx = int(gen.integers(flat.numel()))
        g = grads[which]
        analytic = 0.0 if g is None else float(g.reshape(-1)[idx])
        with torch.no_grad():
            orig = float(flat[idx])
            flat[idx] = orig + step
            up = float(loss_fn())
            flat[idx] = orig - step
            down = float(loss_fn())
            flat[idx] = orig
        numeric = (up - down) / (2 * step)
        results.append((analytic, numeric, relative_error(analytic, numeric)))
    return results


def relative_error(a, b, floor=1e-8):
    """|a-b| / max(|a|, |b|); pairs that are both below ``floor`` count as agreeing."""
    scale = max(abs(a), abs(b))
    if scale < floor:
        return 0.0
    return abs(a - b) / scale
