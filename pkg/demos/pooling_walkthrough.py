"""Run every pooling operator on one small feature map and print the results.

    python3 demos/pooling_walkthrough.py
"""

import numpy as np

import poolgen as pg

x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
x[0, 0, 1, 1] = 20.0
geom = pg.PoolGeometry.square(2, stride=2)
print("input\n", x[0, 0])

out, _ = pg.max_pool_forward(x, geom)
print("\nmax\n", out[0, 0])
out, _ = pg.avg_pool_forward(x, geom)
print("avg\n", out[0, 0])

for a in (0.0, 0.5, 1.0):
    out, _ = pg.mixed_pool_forward(x, geom, pg.MixedParams.init(value=a))
    print(f"mixed a={a}\n", out[0, 0])

gated = pg.GatedParams.init(geom.n, seed=1)
out, _ = pg.gated_pool_forward(x, geom, gated)
print("gated, omega =", np.round(gated.omega.ravel(), 3), "\n", out[0, 0])

tree = pg.TreeParams.init(geom.n, levels=2, seed=1)
out, cache = pg.tree_pool_forward(x, geom, tree)
print("tree (2 levels)\n", out[0, 0])

# backward: gradient of sum(out) with respect to the input and the tree parameters
gx, gv, gomega = pg.tree_pool_backward(np.ones_like(out), cache, tree)
print("tree d/dx\n", np.round(gx[0, 0], 4))
print("tree d/dv\n", np.round(gv[0, 0, 0], 4))
print("tree d/domega\n", np.round(gomega[0, 0, 0], 4))
