"""Pure-numpy column-elimination kernel, used when the compiled extension is unavailable."""

import numpy as np


def eliminate_block(w: np.ndarray, panel: np.ndarray, c0: int, cols: np.ndarray) -> None:
    """Remove columns ``cols`` (absolute, ascending, all inside the block) from row ``w``.

    ``panel`` holds the current inverse-Hessian columns ``c0 .. c0+b`` for
    every row index and is downdated in place after each removal.
    """
    for p in cols:
        q = p - c0
        g = panel[p, q]
        colq = panel[:, q].copy()
        w -= (w[p] / g) * colq
        w[p] = 0.0
        panel -= np.outer(colq, panel[p] / g)
