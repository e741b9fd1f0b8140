"""Small fixtures shared across test modules."""

import numpy as np
import torch

from lensid.data import PhaseAnnotation


class IndexVideo:
    """Frame source whose frames are filled with their own index."""

    def __init__(self, n_frames, fps, size=4):
        self.fps = float(fps)
        self.size = size
        self._n = int(n_frames)

    def __len__(self):
        return self._n

    def __getitem__(self, i):
        if not 0 <= i < self._n:
            raise IndexError(i)
        return np.full((self.size, self.size, 3), float(i), np.float32)


def synthetic_annotations(n):
    """n valid annotations: >= 8 s before, 4 s implantation, >= 4 s after."""
    return [
        PhaseAnnotation(f"v{i:03d}", 30.0 + i % 5, 34.0 + i % 5, 120.0, 25.0)
        for i in range(n)
    ]


def finite_diff_grad(f, x, eps=1e-6):
    """Central-difference gradient of scalar f at float64 tensor x."""
    g = torch.zeros_like(x)
    flat, gflat = x.view(-1), g.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        hi = f(x).item()
        flat[i] = orig - eps
        lo = f(x).item()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return g
