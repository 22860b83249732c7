"""Train max, mixed and tree+gated pooling briefly on the synthetic shapes task.

    python3 demos/train_compare.py [epochs]
"""

import sys

from poolgen.cli import RunConfig, load_datasets
from poolgen.nn import Network
from poolgen.train import fit

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 4
cfg = RunConfig(train_size=800, val_size=200, test_size=200, max_epochs=epochs)
train, val, test = load_datasets(cfg)

for pool1, pool2 in (("max", "max"), ("mixed", "mixed"), ("tree", "gated")):
    cfg.pool1, cfg.pool2 = pool1, pool2
    net = Network(cfg.architecture(train.num_classes), train.images.shape[1:], seed=cfg.seed)
    history = fit(net, cfg.optimizer(), train, val, batch_size=cfg.batch_size,
                  max_epochs=cfg.max_epochs, seed=cfg.seed)
    acc = net.accuracy(test.with_means(train.channel_means).centered, test.labels)
    last = history[-1]
    print(f"{pool1}/{pool2}: train acc {last.train_acc:.3f}, test acc {acc:.3f}, "
          f"pool params {last.pool_params}")
