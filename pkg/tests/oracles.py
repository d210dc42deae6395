"""Independent reference implementations shared by the unit and acceptance tests."""

import numpy as np
import torch
import torch.nn.functional as F
from scipy.integrate import quad
from scipy.interpolate import lagrange


def torch_ms_ssim(x, y):
    """Reference MS-SSIM written directly against torch's conv2d / avg_pool2d."""
    weights = torch.tensor([0.0448, 0.2856, 0.3001, 0.2363, 0.1333], dtype=torch.float64)
    coords = torch.arange(11, dtype=torch.float64) - 5
    g = torch.exp(-(coords**2) / (2 * 1.5**2))
    g = (g / g.sum()).view(1, 1, 1, -1)
    X = torch.from_numpy(x)[None]
    Y = torch.from_numpy(y)[None]
    C = X.shape[1]

    def blur(t):
        t = F.conv2d(t, g.expand(C, 1, 1, 11), groups=C)
        return F.conv2d(t, g.transpose(2, 3).expand(C, 1, 11, 1), groups=C)

    c1, c2 = 0.01**2, 0.03**2
    vals = []
    for i in range(5):
        mx, my = blur(X), blur(Y)
        sxx = blur(X * X) - mx**2
        syy = blur(Y * Y) - my**2
        sxy = blur(X * Y) - mx * my
        cs = (2 * sxy + c2) / (sxx + syy + c2)
        ssim = ((2 * mx * my + c1) / (mx**2 + my**2 + c1)) * cs
        if i < 4:
            vals.append(torch.relu(cs.mean(dim=(2, 3))))
            pad = [s % 2 for s in X.shape[2:]]
            X = F.avg_pool2d(X, 2, padding=pad)
            Y = F.avg_pool2d(Y, 2, padding=pad)
        else:
            vals.append(torch.relu(ssim.mean(dim=(2, 3))))
    stacked = torch.stack(vals)
    return float(torch.prod(stacked ** weights.view(-1, 1, 1), dim=0).mean())


def bd_oracle(a, b):
    """Exact cubic interpolant (4 points) integrated by adaptive quadrature."""
    (ra, qa), (rb, qb) = a, b
    pa = lagrange(np.asarray(qa), np.log10(ra))
    pb = lagrange(np.asarray(qb), np.log10(rb))
    lo, hi = max(min(qa), min(qb)), min(max(qa), max(qb))
    diff, _ = quad(lambda q: pb(q) - pa(q), lo, hi, epsabs=1e-13, epsrel=1e-13)
    return (10 ** (diff / (hi - lo)) - 1) * 100
