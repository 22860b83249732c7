"""Compare hand-written backward passes against central differences.

    python3 demos/gradcheck_tour.py
"""

import numpy as np

import poolgen as pg
from poolgen.gradcheck import check_network, default_matrix

for spec in default_matrix()[:8]:
    print(pg.check_operator(spec, trials=5, seed=0).line(1e-6))

# the same machinery on a whole small network
rng = np.random.default_rng(0)
net = pg.Network(pg.default_architecture("tree", "gated", channels=(2, 2, 4, 4)), (1, 16, 16), seed=3)
for _, layer, name in net.named_params():
    if name == "b":
        layer.params[name][...] = rng.normal(0.0, 0.1, layer.params[name].shape)
x = np.abs(rng.normal(size=(4, 1, 16, 16)))
for key, r in check_network(net, x, rng.integers(0, 4, 4)).items():
    print(f"{key:10s} max rel err {r.max_rel_err:.2e}")
